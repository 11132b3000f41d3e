"""Brute-force verification of the distribution-shift bounds on finite
discrete distributions.

Total variation here is the L1 convention, sum |p - q| (twice the half-L1
convention): the risk-difference bound integrates |density gap| * |loss| with
losses capped at 1, and only the L1 form makes that inequality hold as
written. ``risk`` therefore enforces per-point losses in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ContractError, ParameterError

TV_SLACK = 1e-12


def validate_distribution(p, tol=1e-12):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ParameterError(f"distribution must be a nonempty vector, got shape {p.shape}")
    if p.min() < 0:
        raise ParameterError(f"negative probability {p.min()}")
    if abs(p.sum() - 1.0) > tol:
        raise ParameterError(f"probabilities sum to {p.sum():.15f}, not 1")
    return p


def tv(p, q):
    """L1 total variation, in [0, 2]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ParameterError(f"support mismatch: {p.shape} vs {q.shape}")
    return float(np.abs(p - q).sum())


@dataclass(frozen=True)
class Hypothesis:
    """Either a predicted label per support point (0-1 loss against the
    labeling) or an explicit per-point loss table in [0, 1]."""

    labels: np.ndarray = None
    loss_table: np.ndarray = None

    def loss_vector(self, labeling):
        if (self.labels is None) == (self.loss_table is None):
            raise ParameterError("exactly one of labels/loss_table must be set")
        if self.loss_table is not None:
            loss = np.asarray(self.loss_table, dtype=np.float64)
            if loss.min() < 0 or loss.max() > 1:
                raise ContractError(
                    f"per-point loss must lie in [0, 1], got range "
                    f"[{loss.min()}, {loss.max()}]"
                )
            return loss
        return (np.asarray(self.labels) != np.asarray(labeling)).astype(np.float64)


def risk(h: Hypothesis, p, labeling):
    """Expected loss of h under distribution p."""
    p = validate_distribution(p)
    loss = h.loss_vector(labeling)
    if loss.shape != p.shape:
        raise ParameterError(f"loss over {loss.shape} points, distribution over {p.shape}")
    return float((p * loss).sum())


def empirical_risk(h: Hypothesis, labeling, indices):
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ParameterError("empirical risk needs at least one sample")
    return float(h.loss_vector(labeling)[indices].mean())


def check_tv_risk_bound(trials, support_size, seed, num_classes=3):
    """Random (P, P', labeling, hypothesis) draws with 0-1 loss; counts
    violations of  risk(P') <= risk(P) + tv(P', P)  beyond the fp slack."""
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(support_size), size=trials)
    p_prime = rng.dirichlet(np.ones(support_size), size=trials)
    labeling = rng.integers(0, num_classes, size=(trials, support_size))
    hypo = rng.integers(0, num_classes, size=(trials, support_size))
    loss = (hypo != labeling).astype(np.float64)
    r = (p * loss).sum(axis=1)
    r_prime = (p_prime * loss).sum(axis=1)
    gap = np.abs(p - p_prime).sum(axis=1)
    excess = r_prime - (r + gap)
    violations = int((excess > TV_SLACK).sum())
    return {
        "trials": int(trials),
        "support_size": int(support_size),
        "violations": violations,
        "max_excess": float(excess.max()),
    }


MAX_ENUM_N = 14
MAX_CLASS_SIZE = 64


def rademacher_exact(loss_matrix):
    """Exact empirical Rademacher complexity of a finite loss class on a
    fixed sample: average over all 2^n sign vectors of the best mean
    correlation sup_l (1/n) sum_i s_i * l(x_i). loss_matrix is (|class|, n)."""
    loss = np.asarray(loss_matrix, dtype=np.float64)
    if loss.ndim != 2:
        raise ParameterError(f"loss matrix must be 2-D, got shape {loss.shape}")
    size, n = loss.shape
    if n > MAX_ENUM_N or size > MAX_CLASS_SIZE:
        raise CapacityError(
            f"exact enumeration limited to {MAX_CLASS_SIZE} hypotheses x {MAX_ENUM_N} "
            f"samples, got {size} x {n}"
        )
    signs = 1.0 - 2.0 * ((np.arange(2**n)[:, None] >> np.arange(n)) & 1)
    corr = signs @ loss.T / n
    return float(corr.max(axis=1).mean())


def check_finite_sample_bound(hypotheses, p, p_prime, labeling, n, delta,
                              resamples, seed):
    """Resampling check of  risk(P') <= empirical_risk + tv(P', P) + xi  for
    the empirical-risk minimizer, with xi = 2 * exact Rademacher + the
    sqrt(log(1/delta) / 2n) tail term. Returns the violation fraction; the
    bound promises it stays below delta."""
    p = validate_distribution(p)
    p_prime = validate_distribution(p_prime)
    if not 0 < delta < 1:
        raise ParameterError(f"delta must be in (0, 1), got {delta}")
    loss = np.stack([h.loss_vector(labeling) for h in hypotheses])
    if loss.shape[0] > MAX_CLASS_SIZE or n > MAX_ENUM_N:
        raise CapacityError(
            f"limited to {MAX_CLASS_SIZE} hypotheses and n <= {MAX_ENUM_N}, "
            f"got {loss.shape[0]} hypotheses, n = {n}"
        )
    true_risks = loss @ p_prime
    gap = tv(p_prime, p)
    tail = np.sqrt(np.log(1.0 / delta) / (2.0 * n))
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(resamples):
        idx = rng.choice(p.size, size=n, p=p)
        sample_losses = loss[:, idx]
        emp = sample_losses.mean(axis=1)
        best = int(emp.argmin())
        xi = 2.0 * rademacher_exact(sample_losses) + tail
        if true_risks[best] > emp[best] + gap + xi + TV_SLACK:
            violations += 1
    return {
        "resamples": int(resamples),
        "n": int(n),
        "delta": float(delta),
        "violations": int(violations),
        "violation_rate": violations / resamples,
    }


def avg_tv_to_set(p, family):
    """Mean L1 distance from p to each member of the family."""
    if not family:
        raise ParameterError("family must be nonempty")
    return float(np.mean([tv(p, q) for q in family]))


def select_farthest_member(family):
    """Index of the member with the largest average distance to the family;
    ties go to the lowest index."""
    if not family:
        raise ParameterError("family must be nonempty")
    dists = np.array([avg_tv_to_set(q, family) for q in family])
    return int(dists.argmax())


def select_random_member(family, seed):
    if not family:
        raise ParameterError("family must be nonempty")
    return int(np.random.default_rng(seed).integers(len(family)))


def _mixture_family(rng, m, support_size, cluster_range, outlier_range):
    """Members are mixtures (1 - a_i) * A + a_i * B with A, B on disjoint
    halves of the support; the test distribution is B itself, so distances to
    it sit on a line: tv(member_i, B) = 2 * (1 - a_i)."""
    a = rng.dirichlet(np.ones(support_size))
    b = rng.dirichlet(np.ones(support_size))
    anchor_a = np.concatenate([a, np.zeros(support_size)])
    anchor_b = np.concatenate([np.zeros(support_size), b])
    alphas = rng.uniform(*cluster_range, size=m)
    alphas[m - 1] = rng.uniform(*outlier_range)
    family = [(1.0 - al) * anchor_a + al * anchor_b for al in alphas]
    return family, anchor_b, alphas


def check_selection_comparison(trials, seed, m=4, support_size=6,
                               cluster_range=(0.05, 0.25),
                               outlier_range=(0.8, 0.95)):
    """Diagnostic comparison of the two selection mechanisms on mixture
    families with one member standing apart from the cluster.

    Reports Monte Carlo estimates of E[tv(selected, test)] for
    farthest-member and uniform-random selection, plus the residual of the
    additivity assumption tv(set, test) = tv(set, member) + tv(member, test)
    per member. Never asserts the comparison: with a large residual the
    assumption behind it simply does not describe the family.
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    tv_far, tv_rand, residuals = [], [], []
    for trial in range(trials):
        family, p_test, _ = _mixture_family(rng, m, support_size,
                                            cluster_range, outlier_range)
        set_to_test = float(np.mean([tv(q, p_test) for q in family]))
        for member in family:
            residuals.append(abs(set_to_test
                                 - (avg_tv_to_set(member, family) + tv(member, p_test))))
        far = select_farthest_member(family)
        rand = select_random_member(family, seed=seed * 1_000_003 + trial)
        tv_far.append(tv(family[far], p_test))
        tv_rand.append(tv(family[rand], p_test))
    e_far = float(np.mean(tv_far))
    e_rand = float(np.mean(tv_rand))
    return {
        "trials": int(trials),
        "members": int(m),
        "e_tv_farthest": e_far,
        "e_tv_random": e_rand,
        "comparison_holds": bool(e_far <= e_rand),
        "assumption_residual_mean": float(np.mean(residuals)),
        "assumption_residual_max": float(np.max(residuals)),
    }
