import math

import numpy as np
import pytest

from scmd.autodiff import Tape, Tensor, backward, finite_diff_check
from scmd.errors import ContractError, ParameterError
from scmd.losses import (
    LossWeights,
    ScheduleConfig,
    SelectionConfig,
    ce_loss,
    cm_loss,
    combined_loss,
    is_full_batch_step,
    kl_div,
    logits_distill_loss,
    np_focal,
    np_per_sample_ce,
    np_per_sample_kl,
    np_softmax,
    score_samples,
    select_hard,
)

# fixed instances, expected values frozen from a pure-python brute-force run
DISTILL_LOGITS = np.array([[0.2, -1.3, 0.7], [2.0, 0.1, -0.4],
                           [-1.5, 0.3, 0.9], [0.05, 0.05, -0.2]])
DISTILL_TEACHER = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3],
                            [1 / 3, 1 / 3, 1 / 3], [0.05, 0.15, 0.8]])
DISTILL_EXPECTED = 2.3622756374286267

CM_PROJECTED = np.array([[1.0, 2.0, 2.0], [0.0, 3.0, 4.0]])
CM_PROJECTED = CM_PROJECTED / np.linalg.norm(CM_PROJECTED, axis=1, keepdims=True)
CM_TEXT = np.eye(3)
CM_TEACHER = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
CM_EXPECTED = 1.6744431538559477


def test_ce_uniform_logits_is_log_c():
    losses = ce_loss(Tape(), Tensor(np.zeros((3, 4))), [0, 1, 3])
    np.testing.assert_allclose(losses.data, math.log(4.0), atol=1e-12)


def test_ce_confident_correct_is_near_zero():
    logits = np.zeros((2, 3))
    logits[0, 1] = 1000.0
    logits[1, 2] = 1000.0
    losses = ce_loss(Tape(), Tensor(logits), [1, 2])
    np.testing.assert_allclose(losses.data, 0.0, atol=1e-12)


def test_ce_rejects_bad_label():
    with pytest.raises(ParameterError):
        ce_loss(Tape(), Tensor(np.zeros((2, 3))), [0, 3])


def test_ce_mean_matches_per_sample_mean(rng):
    logits = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    tape = Tape()
    per = ce_loss(tape, Tensor(logits), labels)
    assert float(tape.mean(per).data) == pytest.approx(per.data.mean(), abs=1e-15)


def test_kl_identity_is_zero():
    assert kl_div([0.25, 0.25, 0.5], [0.25, 0.25, 0.5]) == 0.0


def test_kl_point_mass_value():
    assert kl_div([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2.0), abs=1e-15)


def test_kl_nonnegative_and_zero_iff_equal(rng):
    for _ in range(10_000):
        p = rng.dirichlet(np.ones(4))
        q = rng.dirichlet(np.ones(4))
        v = kl_div(p, q)
        assert v >= 0.0
        assert kl_div(p, p) == pytest.approx(0.0, abs=1e-9)
        if v < 1e-9:
            np.testing.assert_allclose(p, q, atol=1e-4)


def test_kl_rejects_non_distribution():
    with pytest.raises(ParameterError):
        kl_div([0.5, 0.6], [0.5, 0.5])


def test_logits_distill_zero_when_student_matches_teacher(rng):
    logits = rng.normal(size=(5, 4))
    teacher = np_softmax(logits, 3.0)
    val = logits_distill_loss(Tape(), Tensor(logits), teacher, 3.0)
    assert float(val.data) == pytest.approx(0.0, abs=1e-12)


def test_logits_distill_t1_is_plain_kl(rng):
    logits = rng.normal(size=(4, 3))
    teacher = np.stack([rng.dirichlet(np.ones(3)) for _ in range(4)])
    val = float(logits_distill_loss(Tape(), Tensor(logits), teacher, 1.0).data)
    want = np.mean([kl_div(teacher[i], np_softmax(logits, 1.0)[i]) for i in range(4)])
    assert val == pytest.approx(want, abs=1e-12)


def test_logits_distill_frozen_instance():
    val = logits_distill_loss(Tape(), Tensor(DISTILL_LOGITS), DISTILL_TEACHER, 3.0)
    assert float(val.data) == pytest.approx(DISTILL_EXPECTED, abs=1e-12)


def test_logits_distill_gradient_finite_diff():
    def f(x):
        tape = Tape()
        return logits_distill_loss(tape, x, DISTILL_TEACHER, 3.0)

    assert finite_diff_check(f, Tensor(DISTILL_LOGITS)) < 1e-4


def test_cm_frozen_instance():
    val = cm_loss(Tape(), Tensor(CM_PROJECTED), CM_TEXT, CM_TEACHER,
                  gamma=5.0, temperature=2.0)
    assert float(val.data) == pytest.approx(CM_EXPECTED, abs=1e-12)


def test_cm_zero_at_alignment_fixed_point():
    # projected features equal the teacher image embeddings that generated
    # the soft targets (same scale and temperature)
    rng = np.random.default_rng(2)
    img = rng.normal(size=(4, 6))
    img /= np.linalg.norm(img, axis=1, keepdims=True)
    text = rng.normal(size=(3, 6))
    text /= np.linalg.norm(text, axis=1, keepdims=True)
    gamma, t = 8.0, 2.5
    teacher = np_softmax(gamma * img @ text.T, t)
    val = cm_loss(Tape(), Tensor(img), text, teacher, gamma=gamma, temperature=t)
    assert float(val.data) == pytest.approx(0.0, abs=1e-12)


def test_cm_tiny_gamma_approaches_uniform_kl():
    gamma = 1e-9
    val = cm_loss(Tape(), Tensor(CM_PROJECTED), CM_TEXT, CM_TEACHER,
                  gamma=gamma, temperature=2.0)
    uniform = np.full(3, 1 / 3)
    want = 4.0 * np.mean([kl_div(r, uniform) for r in CM_TEACHER])
    assert float(val.data) == pytest.approx(want, abs=1e-6)


def test_cm_rejects_non_unit_rows():
    with pytest.raises(ContractError):
        cm_loss(Tape(), Tensor(CM_PROJECTED * 1.1), CM_TEXT, CM_TEACHER,
                gamma=1.0, temperature=1.0)


def test_combined_reduces_to_erm():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(size=(5, 3)))
    labels = rng.integers(0, 3, size=5)
    w = LossWeights(lambda_kd=0.0, lambda_cm=0.0)
    tape = Tape()
    total, parts = combined_loss(tape, w, logits=logits, labels=labels)
    want = np_per_sample_ce(logits.data, labels).mean()
    assert float(total.data) == pytest.approx(want, abs=1e-12)
    assert parts["kd"] == 0.0 and parts["cm"] == 0.0


def test_combined_component_sum_matches_total(rng, small_teacher):
    b = 6
    logits = Tensor(rng.normal(size=(b, 3)))
    labels = rng.integers(0, 3, size=b)
    proj = rng.normal(size=(b, 8))
    proj = Tensor(proj / np.linalg.norm(proj, axis=1, keepdims=True))
    teacher_probs = np.stack([rng.dirichlet(np.ones(3)) for _ in range(b)])
    text = small_teacher.text_embeddings
    w = LossWeights(lambda_ce=1.0, lambda_kd=0.7, lambda_cm=0.3, temperature=2.0)
    total, parts = combined_loss(Tape(), w, logits=logits, labels=labels,
                                 teacher_probs=teacher_probs, projected=proj,
                                 text_embeddings=text, teacher_scale=5.0)
    want = parts["ce"] + 0.7 * parts["kd"] + 0.3 * parts["cm"]
    assert parts["total"] == pytest.approx(want, abs=1e-12)
    assert parts["total"] >= 0.0


def test_combined_selection_restricts_gradients(rng):
    # gradients on a selected subset match a run on just that subset
    logits_data = rng.normal(size=(6, 3))
    labels = rng.integers(0, 3, size=6)
    w = LossWeights(lambda_kd=0.0, lambda_cm=0.0)

    tape = Tape()
    full = Tensor(logits_data, requires_grad=True)
    total, _ = combined_loss(tape, w, logits=full, labels=labels,
                             selected=np.array([1, 4]))
    backward(total)
    grads = full.grad

    tape2 = Tape()
    sub = Tensor(logits_data[[1, 4]], requires_grad=True)
    total2, _ = combined_loss(tape2, w, logits=sub, labels=labels[[1, 4]])
    backward(total2)

    np.testing.assert_allclose(grads[[1, 4]], sub.grad, atol=1e-15)
    untouched = np.ones(6, dtype=bool)
    untouched[[1, 4]] = False
    np.testing.assert_array_equal(grads[untouched], 0.0)


def test_score_focal_gamma_zero_equals_ce(rng):
    logits = rng.normal(size=(8, 4))
    labels = rng.integers(0, 4, size=8)
    ce = np_per_sample_ce(logits, labels)
    focal = np_focal(logits, labels, 0.0)
    np.testing.assert_allclose(focal, ce, atol=1e-12)


def test_score_none_is_constant():
    sel = SelectionConfig(strategy="none")
    s = score_samples(sel, LossWeights(), batch_size=5)
    assert (s == s[0]).all()


def test_score_distill_reduces_to_ce_when_weights_zero(rng):
    ce = rng.uniform(size=6)
    sel = SelectionConfig(strategy="distill")
    w = LossWeights(lambda_ce=1.0, lambda_kd=0.0, lambda_cm=0.0)
    np.testing.assert_allclose(score_samples(sel, w, ce=ce), ce, atol=1e-15)


def test_score_ce_ordering_invariant_to_logit_shift(rng):
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    shifted = logits + rng.normal(size=(5, 1)) * 10.0
    a = np_per_sample_ce(logits, labels)
    b = np_per_sample_ce(shifted, labels)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_score_missing_inputs_raise():
    with pytest.raises(ParameterError):
        score_samples(SelectionConfig(strategy="kl"), LossWeights(), ce=np.ones(3))


def test_select_hard_top1():
    np.testing.assert_array_equal(select_hard([0.1, 0.5, 2.0, 1.2], 0.25), [2])


def test_select_hard_tie_break_prefers_low_index():
    np.testing.assert_array_equal(select_hard([1.0, 1.0, 1.0, 1.0], 0.5), [0, 1])


def test_select_hard_brute_force(rng):
    for _ in range(10_000):
        b = int(rng.integers(1, 12))
        scores = rng.normal(size=b)
        rho = float(rng.uniform(0.05, 1.0))
        sel = select_hard(scores, rho)
        assert len(sel) == math.ceil(rho * b)
        assert (np.diff(sel) > 0).all() or len(sel) == 1
        unselected = np.setdiff1d(np.arange(b), sel)
        if len(unselected):
            assert scores[sel].min() >= scores[unselected].max()


def test_select_hard_full_when_rho_one(rng):
    scores = rng.normal(size=7)
    np.testing.assert_array_equal(select_hard(scores, 1.0), np.arange(7))


def test_schedule_kappa_zero_never_full_batch():
    sched = ScheduleConfig(total_steps=50, kappa=0.0)
    assert not any(is_full_batch_step(t, sched) for t in range(50))


def test_schedule_quarter_tail():
    sched = ScheduleConfig(total_steps=100, kappa=0.25)
    flags = [is_full_batch_step(t, sched) for t in range(100)]
    assert flags[74] is False and flags[75] is True and flags[99] is True
    assert sum(flags) == 25


def test_schedule_count_identity(rng):
    for _ in range(100):
        total = int(rng.integers(1, 500))
        kappa = float(rng.uniform(0.0, 0.999))
        sched = ScheduleConfig(total_steps=total, kappa=kappa)
        count = sum(is_full_batch_step(t, sched) for t in range(total))
        assert count == total - math.ceil((1.0 - kappa) * total)


def test_per_sample_kl_matches_kl_div(rng):
    logits = rng.normal(size=(4, 3))
    teacher = np.stack([rng.dirichlet(np.ones(3)) for _ in range(4)])
    got = np_per_sample_kl(teacher, logits, 2.0)
    want = [kl_div(teacher[i], np_softmax(logits, 2.0)[i]) for i in range(4)]
    np.testing.assert_allclose(got, want, atol=1e-12)
