"""Loss terms, hard-sample selection, and the full-batch tail schedule.

The combined objective is lambda_ce * CE + lambda_kd * (tempered teacher/student
KL on logits) + lambda_cm * (same KL against the distribution induced by the
projected features and the class text embeddings), evaluated only on the
selected subset of the batch. Selection scores are plain numpy (they pick
indices, nothing differentiates through them); the loss terms build on the
autodiff tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._kernels import backend as K
from .autodiff import Tape, Tensor
from .errors import ContractError, DimensionError, ParameterError

STRATEGIES = ("none", "ce", "kl", "distill", "focal")


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float = 1.0
    lambda_kd: float = 0.5
    lambda_cm: float = 0.5
    temperature: float = 3.0
    gamma: float | None = None  # student-side scale; None = use the teacher's
    t_squared: bool = True

    def __post_init__(self):
        if min(self.lambda_ce, self.lambda_kd, self.lambda_cm) < 0:
            raise ParameterError("loss weights must be >= 0")
        if self.temperature <= 0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if self.gamma is not None and self.gamma <= 0:
            raise ParameterError(f"gamma must be > 0, got {self.gamma}")

    @property
    def kl_scale(self):
        return self.temperature**2 if self.t_squared else 1.0


@dataclass(frozen=True)
class SelectionConfig:
    strategy: str = "ce"
    rho: float = 1.0 / 3.0
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0.0 < self.rho <= 1.0:
            raise ParameterError(f"rho must be in (0, 1], got {self.rho}")
        if self.focal_gamma < 0:
            raise ParameterError(f"focal_gamma must be >= 0, got {self.focal_gamma}")


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    kappa: float = 0.25

    def __post_init__(self):
        if self.total_steps < 1:
            raise ParameterError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 <= self.kappa < 1.0:
            raise ParameterError(f"kappa must be in [0, 1), got {self.kappa}")


def is_full_batch_step(t, schedule: ScheduleConfig) -> bool:
    """True for the final kappa fraction of training."""
    if not 0 <= t < schedule.total_steps:
        raise ParameterError(f"step {t} not in [0, {schedule.total_steps})")
    return t >= math.ceil((1.0 - schedule.kappa) * schedule.total_steps)


# ---- differentiable loss terms ----

def ce_loss(tape: Tape, logits, labels) -> Tensor:
    """Per-sample cross-entropy, shape (B,)."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be (B, C), got {list(logits.shape)}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ParameterError(
            f"labels must lie in [0, {logits.shape[1]}), got {labels.tolist()}"
        )
    lp = tape.log_softmax_t(logits, 1.0)
    return tape.mul_scalar(tape.take_per_row(lp, labels), -1.0)


def kl_div(p, q, tol=1e-6):
    """KL(p || q) for probability vectors, with 0*log(0) = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ParameterError(f"need equal-length vectors, got {p.shape} and {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if v.min() < 0 or abs(v.sum() - 1.0) > tol:
            raise ParameterError(f"{name} is not a probability vector (sum {v.sum():.8f})")
    if (q[p > 0] <= 0).any():
        raise ParameterError("q must be strictly positive where p > 0")
    mask = p > 0
    return float((p[mask] * (np.log(p[mask]) - np.log(q[mask]))).sum())


def _xlogx_rows(p):
    out = np.zeros_like(p)
    mask = p > 0
    out[mask] = p[mask] * np.log(p[mask])
    return out.sum(axis=1)


def _tempered_kl_mean(tape, teacher_probs, student_logits, temperature, scale):
    """mean_i scale * KL(p_t_i || softmax(student_i / T)) via log-softmax,
    so extreme logits stay in-domain."""
    plogp = _xlogx_rows(teacher_probs)  # constant wrt the student
    lq = tape.log_softmax_t(student_logits, temperature)
    cross = tape.row_sum(tape.mul(Tensor(teacher_probs), lq))
    per_sample = tape.sub(Tensor(plogp), cross)
    return tape.mul_scalar(tape.mean(per_sample), scale)


def logits_distill_loss(tape: Tape, student_logits, teacher_probs, temperature,
                        t_squared=True) -> Tensor:
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    sl = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    if teacher_probs.shape != tuple(sl.shape):
        raise DimensionError(
            f"teacher probs {list(teacher_probs.shape)} vs student logits {list(sl.shape)}"
        )
    scale = temperature**2 if t_squared else 1.0
    return _tempered_kl_mean(tape, teacher_probs, sl, temperature, scale)


def _check_unit_rows(mat, what, tol=1e-5):
    norms = np.linalg.norm(mat, axis=1)
    bad = np.abs(norms - 1.0) > tol
    if bad.any():
        row = int(np.argmax(bad))
        raise ContractError(f"{what} row {row} has norm {norms[row]:.6f}, expected 1 +- {tol}")


def cm_loss(tape: Tape, projected, text_embeddings, teacher_probs, gamma,
            temperature, t_squared=True) -> Tensor:
    """KL between teacher soft targets and the distribution of scaled cosines
    between projected student features and class text embeddings."""
    proj = projected if isinstance(projected, Tensor) else Tensor(projected)
    text = np.asarray(text_embeddings, dtype=np.float64)
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    if gamma <= 0:
        raise ParameterError(f"gamma must be > 0, got {gamma}")
    _check_unit_rows(proj.data, "projected features")
    _check_unit_rows(text, "text embeddings")
    sims = tape.mul_scalar(tape.matmul(proj, Tensor(text.T.copy())), float(gamma))
    scale = temperature**2 if t_squared else 1.0
    return _tempered_kl_mean(tape, teacher_probs, sims, temperature, scale)


def combined_loss(tape: Tape, weights: LossWeights, *, logits, labels,
                  teacher_probs=None, projected=None, text_embeddings=None,
                  teacher_scale=None, selected=None):
    """Weighted objective on the selected subset. Returns (total, parts) where
    parts holds the unweighted component values for logging."""
    labels = np.asarray(labels, dtype=np.int64)
    b = logits.shape[0]
    if selected is None:
        selected = np.arange(b, dtype=np.int64)
    else:
        selected = np.asarray(selected, dtype=np.int64)
        if selected.size == 0:
            raise ParameterError("selection must keep at least one sample")

    sub_logits = tape.gather_rows(logits, selected)
    sub_labels = labels[selected]

    terms = []
    parts = {"ce": 0.0, "kd": 0.0, "cm": 0.0}

    ce_mean = tape.mean(ce_loss(tape, sub_logits, sub_labels))
    parts["ce"] = float(ce_mean.data)
    if weights.lambda_ce != 0.0:
        terms.append(tape.mul_scalar(ce_mean, weights.lambda_ce))

    if weights.lambda_kd != 0.0:
        if teacher_probs is None:
            raise ParameterError("lambda_kd > 0 requires teacher_probs")
        kd = logits_distill_loss(tape, sub_logits, teacher_probs[selected],
                                 weights.temperature, weights.t_squared)
        parts["kd"] = float(kd.data)
        terms.append(tape.mul_scalar(kd, weights.lambda_kd))

    if weights.lambda_cm != 0.0:
        if projected is None or text_embeddings is None or teacher_probs is None:
            raise ParameterError(
                "lambda_cm > 0 requires projected features, text embeddings and teacher_probs"
            )
        gamma = weights.gamma if weights.gamma is not None else teacher_scale
        if gamma is None:
            raise ParameterError("no gamma configured and no teacher scale supplied")
        cm = cm_loss(tape, tape.gather_rows(projected, selected), text_embeddings,
                     teacher_probs[selected], gamma, weights.temperature,
                     weights.t_squared)
        parts["cm"] = float(cm.data)
        terms.append(tape.mul_scalar(cm, weights.lambda_cm))

    total = terms[0] if terms else tape.mul_scalar(ce_mean, 0.0)
    for t in terms[1:]:
        total = tape.add(total, t)
    parts["total"] = float(total.data)
    return total, parts


# ---- per-sample quantities and selection (plain numpy) ----

def np_softmax(logits, temperature=1.0):
    return K.softmax_rows(np.ascontiguousarray(np.asarray(logits, dtype=np.float64)),
                          float(temperature))


def np_per_sample_ce(logits, labels):
    lp = K.log_softmax_rows(np.ascontiguousarray(np.asarray(logits, dtype=np.float64)), 1.0)
    return -lp[np.arange(lp.shape[0]), np.asarray(labels, dtype=np.int64)]


def np_per_sample_kl(teacher_probs, student_logits, temperature):
    """KL(p_t_i || softmax(student_i / T)) per row."""
    p = np.asarray(teacher_probs, dtype=np.float64)
    lq = K.log_softmax_rows(
        np.ascontiguousarray(np.asarray(student_logits, dtype=np.float64)),
        float(temperature))
    return _xlogx_rows(p) - (p * lq).sum(axis=1)


def np_per_sample_cm_kl(teacher_probs, projected, text_embeddings, gamma, temperature):
    sims = float(gamma) * (np.asarray(projected, dtype=np.float64)
                           @ np.asarray(text_embeddings, dtype=np.float64).T)
    return np_per_sample_kl(teacher_probs, sims, temperature)


def np_focal(logits, labels, focal_gamma):
    """-(1 - p_true)^gamma * log(p_true); equals CE at gamma = 0."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = K.log_softmax_rows(np.ascontiguousarray(np.asarray(logits, dtype=np.float64)), 1.0)
    lp_true = lp[np.arange(lp.shape[0]), labels]
    return -((1.0 - np.exp(lp_true)) ** focal_gamma) * lp_true


def score_samples(selection: SelectionConfig, weights: LossWeights, *,
                  ce=None, kl=None, cm=None, focal=None, batch_size=None):
    """Per-sample hardness scores for the configured strategy."""
    strategy = selection.strategy
    if strategy == "none":
        if batch_size is None:
            for v in (ce, kl, cm, focal):
                if v is not None:
                    batch_size = len(v)
                    break
        if batch_size is None:
            raise ParameterError("strategy 'none' needs a batch size")
        return np.zeros(batch_size)
    if strategy == "ce":
        if ce is None:
            raise ParameterError("strategy 'ce' needs per-sample CE losses")
        return np.asarray(ce, dtype=np.float64)
    if strategy == "kl":
        if kl is None:
            raise ParameterError("strategy 'kl' needs per-sample KL values")
        return np.asarray(kl, dtype=np.float64)
    if strategy == "focal":
        if focal is None:
            raise ParameterError("strategy 'focal' needs per-sample focal losses")
        return np.asarray(focal, dtype=np.float64)
    # distill: the per-sample combined objective under the training weights
    if ce is None:
        raise ParameterError("strategy 'distill' needs per-sample CE losses")
    score = weights.lambda_ce * np.asarray(ce, dtype=np.float64)
    if weights.lambda_kd != 0.0:
        if kl is None:
            raise ParameterError("strategy 'distill' with lambda_kd > 0 needs KL values")
        score = score + weights.lambda_kd * weights.kl_scale * np.asarray(kl, dtype=np.float64)
    if weights.lambda_cm != 0.0:
        if cm is None:
            raise ParameterError("strategy 'distill' with lambda_cm > 0 needs CM values")
        score = score + weights.lambda_cm * weights.kl_scale * np.asarray(cm, dtype=np.float64)
    return score


def select_hard(scores, rho):
    """Indices of the ceil(rho*B) largest scores, ascending; ties keep the
    lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    b = scores.shape[0]
    if b < 1:
        raise ParameterError("cannot select from an empty batch")
    if not 0.0 < rho <= 1.0:
        raise ParameterError(f"rho must be in (0, 1], got {rho}")
    k = math.ceil(rho * b)
    if k >= b:
        return np.arange(b, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k]).astype(np.int64)
