import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daret import numerics as nm
from daret import objectives as obj

SEEDED_POINTS = 20


def _rng(tag):
    return nm.stream_rng(2024, tag)


# ---------------------------------------------------------------- schedule


def test_lambda_schedule_halves_at_half_life():
    sched = obj.LambdaSchedule(lambda0=0.4, half_life_steps=250)
    assert obj.lambda_at(sched, 0) == pytest.approx(0.4, abs=1e-15)
    assert obj.lambda_at(sched, 250) == pytest.approx(0.2, abs=1e-12)
    assert obj.lambda_at(sched, 500) == pytest.approx(0.1, abs=1e-12)
    assert obj.lambda_at(sched, 125) == pytest.approx(0.4 / math.sqrt(2.0))


def test_lambda_schedule_validation():
    with pytest.raises(ValueError):
        obj.LambdaSchedule(lambda0=-0.1, half_life_steps=10)
    with pytest.raises(ValueError):
        obj.LambdaSchedule(lambda0=0.1, half_life_steps=0)
    sched = obj.LambdaSchedule(lambda0=0.1, half_life_steps=10)
    with pytest.raises(ValueError):
        obj.lambda_at(sched, -1)


def test_lambda_schedule_is_monotone_nonincreasing():
    sched = obj.LambdaSchedule(lambda0=1.0, half_life_steps=7)
    vals = [obj.lambda_at(sched, t) for t in range(60)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] > 0.0


# ---------------------------------------------------------------- ranking


def test_ranking_loss_analytic_value():
    # -ln(e / (e + 2 e^0)) = ln(e + 2) - 1
    loss, dpos, dnegs = obj.ranking_loss(1.0, [0.0, 0.0])
    assert loss == pytest.approx(math.log(math.e + 2.0) - 1.0, abs=1e-9)
    p_pos = math.e / (math.e + 2.0)
    assert dpos == pytest.approx(p_pos - 1.0)
    assert dnegs == pytest.approx([1.0 / (math.e + 2.0)] * 2)


def test_ranking_loss_is_nonnegative_and_zero_only_in_limit():
    loss, _, _ = obj.ranking_loss(30.0, [-30.0])
    assert 0.0 <= loss < 1e-12
    loss, _, _ = obj.ranking_loss(0.0, [0.0])
    assert loss == pytest.approx(math.log(2.0))


def test_ranking_loss_rejects_empty_negatives():
    with pytest.raises(ValueError):
        obj.ranking_loss(1.0, [])


def test_ranking_loss_gradient_matches_finite_differences():
    rng = _rng("rank-grad")
    for _ in range(SEEDED_POINTS):
        n = int(rng.integers(1, 6))
        point = rng.normal(scale=2.0, size=n + 1)

        def fn(x):
            return obj.ranking_loss(x[0], x[1:])[0]

        loss, dpos, dnegs = obj.ranking_loss(point[0], point[1:])
        grad = np.concatenate(([dpos], dnegs))
        assert nm.check_gradient(fn, grad, point) < 1e-7


@given(st.floats(-20, 20), st.lists(st.floats(-20, 20), min_size=1, max_size=5))
@settings(max_examples=60, deadline=None)
def test_ranking_loss_gradient_sums_to_zero(pos, negs):
    # translation invariance of the softmax NLL
    _, dpos, dnegs = obj.ranking_loss(pos, negs)
    assert dpos + dnegs.sum() == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------- discrimination


def test_discrimination_loss_values():
    loss, dlogits = obj.discrimination_loss(0.8, obj.SOURCE)
    assert loss == pytest.approx(-math.log(0.8))
    assert dlogits == pytest.approx([0.8 - 1.0, 1.0 - 0.8])
    loss, dlogits = obj.discrimination_loss(0.8, obj.TARGET)
    assert loss == pytest.approx(-math.log(0.2))
    assert dlogits == pytest.approx([0.8, -0.8])
    with pytest.raises(ValueError):
        obj.discrimination_loss(0.5, "neither")


def test_discrimination_loss_is_finite_at_saturation():
    for p in (0.0, 1.0):
        for domain in (obj.SOURCE, obj.TARGET):
            loss, dlogits = obj.discrimination_loss(p, domain)
            assert np.isfinite(loss)
            assert np.all(np.isfinite(dlogits))
            # 1 - (1 - eps) is not exactly eps in float64, hence the slack
            assert loss <= -math.log(nm.PROB_EPS) + 1e-3


def test_discrimination_logit_gradient_matches_finite_differences():
    rng = _rng("disc-grad")
    for _ in range(SEEDED_POINTS):
        z = rng.normal(scale=3.0, size=2)
        domain = obj.SOURCE if rng.random() < 0.5 else obj.TARGET

        def fn(logits):
            return obj.discrimination_loss(nm.softmax2(logits)[0], domain)[0]

        _, dlogits = obj.discrimination_loss(nm.softmax2(z)[0], domain)
        assert nm.check_gradient(fn, dlogits, z) < 1e-7


# ---------------------------------------------------------------- adversarial


def test_confusion_minimum_is_two_log_two_on_grid():
    # value at 1/2 is exactly 2 ln 2 and the 99-point grid has no lower value
    loss_half, _, _ = obj.adversarial_loss(obj.CONFUSION, 0.5, 0.5, obj.SOURCE)
    assert loss_half == pytest.approx(2.0 * math.log(2.0), abs=1e-9)
    grid = [(i + 1) / 100.0 for i in range(99)]
    for pq in grid:
        for pd in (0.01, 0.5, 0.99):
            loss, _, _ = obj.adversarial_loss(obj.CONFUSION, pq, pd, obj.TARGET)
            assert loss >= loss_half - 1e-12


def test_confusion_is_domain_symmetric():
    a = obj.adversarial_loss(obj.CONFUSION, 0.3, 0.7, obj.SOURCE)
    b = obj.adversarial_loss(obj.CONFUSION, 0.3, 0.7, obj.TARGET)
    assert a == b


def test_minimax_negates_discrimination_loss():
    for pq, pd, domain in [(0.3, 0.8, obj.SOURCE), (0.6, 0.2, obj.TARGET)]:
        loss, _, _ = obj.adversarial_loss(obj.MINIMAX, pq, pd, domain)
        dq, _ = obj.discrimination_loss(pq, domain)
        dd, _ = obj.discrimination_loss(pd, domain)
        assert loss == pytest.approx(-(dq + dd))


def test_gan_source_pairs_contribute_exactly_zero():
    loss, dpq, dpd = obj.adversarial_loss(obj.GAN, 0.9, 0.1, obj.SOURCE)
    assert (loss, dpq, dpd) == (0.0, 0.0, 0.0)


def test_gan_target_value():
    loss, _, _ = obj.adversarial_loss(obj.GAN, 0.25, 0.5, obj.TARGET)
    assert loss == pytest.approx(-0.5 * (math.log(0.25) + math.log(0.5)))


def test_adversarial_loss_rejects_unknown_kind_and_domain():
    with pytest.raises(ValueError):
        obj.adversarial_loss("other", 0.5, 0.5, obj.SOURCE)
    with pytest.raises(ValueError):
        obj.adversarial_loss(obj.CONFUSION, 0.5, 0.5, "neither")


def _fused_dlogit0(kind, p, domain):
    loss, dpq, _ = obj.adversarial_loss(kind, p, p, domain)
    return obj.dprob_to_dlogits(p, dpq)[0]


def test_fused_logit_gradients_stay_bounded_at_saturation():
    # clamp consistency: dp * p(1-p) must reduce to the bounded closed forms
    for p in (0.0, 1e-9, 0.5, 1.0 - 1e-9, 1.0):
        cp = nm.clamp_prob(p)
        assert _fused_dlogit0(obj.CONFUSION, p, obj.SOURCE) == pytest.approx(cp - 0.5, abs=1e-9)
        assert _fused_dlogit0(obj.MINIMAX, p, obj.SOURCE) == pytest.approx(1.0 - cp, abs=1e-9)
        assert _fused_dlogit0(obj.MINIMAX, p, obj.TARGET) == pytest.approx(-cp, abs=1e-9)
        assert _fused_dlogit0(obj.GAN, p, obj.TARGET) == pytest.approx(-(1.0 - cp) / 2.0, abs=1e-9)


def test_minimax_balanced_aggregate_vanishes_only_at_half():
    # per-pair minimax gradients do not vanish at p = 1/2; a balanced
    # source+target aggregate does, which is the intended fixed point
    agg = _fused_dlogit0(obj.MINIMAX, 0.5, obj.SOURCE) + _fused_dlogit0(
        obj.MINIMAX, 0.5, obj.TARGET
    )
    assert agg == pytest.approx(0.0, abs=1e-12)
    assert _fused_dlogit0(obj.MINIMAX, 0.5, obj.SOURCE) == pytest.approx(0.5)
    skew = _fused_dlogit0(obj.MINIMAX, 0.7, obj.SOURCE) + _fused_dlogit0(
        obj.MINIMAX, 0.7, obj.TARGET
    )
    assert skew != pytest.approx(0.0, abs=1e-3)


def test_adversarial_probability_gradients_match_finite_differences():
    rng = _rng("adv-grad")
    kinds = (obj.CONFUSION, obj.MINIMAX, obj.GAN)
    for _ in range(SEEDED_POINTS):
        kind = kinds[int(rng.integers(0, 3))]
        domain = obj.SOURCE if rng.random() < 0.5 else obj.TARGET
        point = rng.uniform(0.05, 0.95, size=2)

        def fn(p):
            return obj.adversarial_loss(kind, p[0], p[1], domain)[0]

        _, dpq, dpd = obj.adversarial_loss(kind, point[0], point[1], domain)
        assert nm.check_gradient(fn, [dpq, dpd], point, eps=1e-6) < 1e-6


@given(
    st.sampled_from([obj.CONFUSION, obj.MINIMAX, obj.GAN]),
    st.floats(0, 1),
    st.floats(0, 1),
    st.sampled_from([obj.SOURCE, obj.TARGET]),
)
@settings(max_examples=120, deadline=None)
def test_adversarial_loss_always_finite(kind, pq, pd, domain):
    loss, dpq, dpd = obj.adversarial_loss(kind, pq, pd, domain)
    assert np.isfinite(loss) and np.isfinite(dpq) and np.isfinite(dpd)
    fused = obj.dprob_to_dlogits(pq, dpq)
    assert np.all(np.abs(fused) <= 1.5)


def test_dprob_to_dlogits_is_antisymmetric():
    d = obj.dprob_to_dlogits(0.3, 2.0)
    assert d[0] == pytest.approx(2.0 * 0.3 * 0.7)
    assert d[1] == -d[0]
