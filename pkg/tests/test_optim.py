import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mamlicl import autodiff as ad
from mamlicl.optim import OptHyper, OptimError, OptimizerPair, OptState, adamw_step, make_shared_pair, sgd_step, step
from mamlicl.params import Params
from mamlicl.verify import none_mode_resets, shared_trace_matches


def P(**kw):
    return Params.from_arrays({k: np.asarray(v, dtype=float) for k, v in kw.items()})


def G(**kw):
    return {k: ad.Tensor(np.asarray(v, dtype=float)) for k, v in kw.items()}


def test_defaults():
    h = OptHyper()
    assert (h.lr, h.beta1, h.beta2, h.eps, h.weight_decay) == (1e-5, 0.9, 0.999, 1e-8, 0.01)
    assert h.correction == "standard" and h.max_grad_norm == 0.0


@pytest.mark.parametrize("kw", [dict(beta1=1.0), dict(beta2=-0.1), dict(lr=-1.0), dict(kind="lion"),
                                dict(correction="late")])
def test_hyper_validation(kw):
    with pytest.raises(OptimError):
        OptHyper(**kw)


def test_first_step_correction_cancels():
    for corr in ("standard", "stored"):
        st_ = OptState()
        adamw_step(st_, P(w=[0.0]), G(w=[5.0]), OptHyper(correction=corr))
        m_hat = st_.m["w"] if corr == "stored" else st_.m["w"] / (1 - 0.9)
        assert m_hat[0] == pytest.approx(5.0, abs=1e-15)


def test_stored_correction_two_steps():
    st_ = OptState()
    h = OptHyper(correction="stored")
    p = P(w=[0.0])
    p, _ = adamw_step(st_, p, G(w=[1.0]), h)
    adamw_step(st_, p, G(w=[1.0]), h)
    assert st_.m["w"][0] == pytest.approx((0.9 * 1 + 0.1 * 1) / (1 - 0.81), abs=1e-12)
    assert st_.m["w"][0] == pytest.approx(5.263, abs=1e-3)


def test_standard_correction_stores_raw_moments():
    st_ = OptState()
    h = OptHyper()
    p = P(w=[0.0])
    p, _ = adamw_step(st_, p, G(w=[1.0]), h)
    adamw_step(st_, p, G(w=[1.0]), h)
    assert st_.m["w"][0] == pytest.approx(0.19, abs=1e-15)
    assert st_.t == 2


def test_adamw_first_step_magnitude_and_decay():
    h = OptHyper(lr=0.1, weight_decay=0.5)
    out, _ = adamw_step(OptState(), P(w=[2.0, -2.0]), G(w=[3.0, -0.5]), h)
    # |m̂/√v̂| = 1 on the first step
    np.testing.assert_allclose(out["w"].data, [2.0 - 0.1 - 0.1, -2.0 + 0.1 + 0.1], atol=1e-8)


def test_null_step_keeps_params():
    p = P(w=[1.0, -2.0])
    for h in (OptHyper(weight_decay=0.0), OptHyper("sgd", weight_decay=0.0)):
        out = step(OptState(), p, G(w=[0.0, 0.0]), h)
        assert np.array_equal(out["w"].data, p["w"].data)


def test_sgd_definition_and_identity():
    out, _ = sgd_step(OptState(), P(w=[1.0, 1.0]), G(w=[1.0, 2.0]), OptHyper("sgd", lr=0.1, weight_decay=0.0))
    np.testing.assert_allclose(out["w"].data, [0.9, 0.8], rtol=0, atol=1e-15)
    out, _ = sgd_step(OptState(), P(w=[1.0, 3.0]), G(w=[7.0, 2.0]), OptHyper("sgd", lr=0.0))
    assert np.array_equal(out["w"].data, [1.0, 3.0])


@given(theta=st.floats(-5, 5), target=st.floats(-5, 5))
def test_sgd_and_adamw_move_the_same_way(theta, target):
    if abs(theta - target) < 1e-3:
        return
    g = G(w=[2 * (theta - target)])
    a = step(OptState(), P(w=[theta]), g, OptHyper("sgd", lr=1e-3, weight_decay=0.0))["w"].data[0] - theta
    b = step(OptState(), P(w=[theta]), g, OptHyper(lr=1e-3, weight_decay=0.0))["w"].data[0] - theta
    assert np.sign(a) == np.sign(b) == -np.sign(theta - target)


def test_non_finite_gradient_leaves_state_alone():
    st_ = OptState()
    p = P(w=[1.0])
    adamw_step(st_, p, G(w=[1.0]), OptHyper())
    before = st_.copy()
    bad = {"w": ad.Tensor._wrap(np.array([np.inf]))}
    with pytest.raises(ad.NonFiniteError):
        adamw_step(st_, p, bad, OptHyper())
    assert st_.t == before.t and np.array_equal(st_.m["w"], before.m["w"])


def test_mismatched_gradients_rejected():
    with pytest.raises(OptimError, match="names"):
        sgd_step(OptState(), P(w=[1.0]), G(u=[1.0]), OptHyper("sgd"))
    with pytest.raises(OptimError, match="shape"):
        sgd_step(OptState(), P(w=[1.0]), G(w=[1.0, 2.0]), OptHyper("sgd"))


def test_gradient_norm_cap():
    h = OptHyper("sgd", lr=1.0, weight_decay=0.0, max_grad_norm=1.0)
    out, _ = sgd_step(OptState(), P(w=[0.0, 0.0]), G(w=[3.0, 4.0]), h)
    np.testing.assert_allclose(out["w"].data, [-0.6, -0.8], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20))
def test_second_moment_non_negative(gs):
    st_ = OptState()
    p = P(w=[0.5])
    for g in gs:
        p, _ = adamw_step(st_, p, G(w=[g]), OptHyper(lr=1e-2, correction="stored"))
        assert (st_.v["w"] >= 0).all()


def test_fixed_point_without_decay_or_gradient():
    st_ = OptState()
    p = P(w=[0.3, -4.0])
    for _ in range(5):
        p, _ = adamw_step(st_, p, G(w=[0.0, 0.0]), OptHyper(lr=0.1, weight_decay=0.0))
    assert np.array_equal(p["w"].data, [0.3, -4.0])


def test_sharing_needs_adaptive_optimizers():
    with pytest.raises(OptimError, match="adaptive"):
        make_shared_pair(OptHyper("sgd"), OptHyper(), "shared")
    with pytest.raises(OptimError):
        OptimizerPair(OptHyper(), OptHyper("sgd"), "copy")
    with pytest.raises(OptimError):
        OptimizerPair(OptHyper(), OptHyper(), "pooled")


def test_shared_store_single_counter():
    pair = make_shared_pair(OptHyper(), OptHyper(), "shared")
    assert pair.inner_state is pair.outer_state
    p = P(w=[1.0])
    for i in range(5):
        p = pair.inner_step(p, G(w=[1.0])) if i % 2 == 0 else pair.outer_step(p, G(w=[1.0]))
    assert pair.inner_state.t == 5


def test_shared_trace_bit_identical():
    assert shared_trace_matches()


@settings(max_examples=20, deadline=None)
@given(b1=st.floats(0, 0.999), b2=st.floats(0, 0.9999), seed=st.integers(0, 1000))
def test_shared_trace_property_over_betas(b1, b2, seed):
    rng = np.random.default_rng(seed)
    h = OptHyper(lr=1e-2, beta1=b1, beta2=b2)
    pair = make_shared_pair(h, h, "shared")
    single = OptState()
    p1 = p2 = P(w=rng.standard_normal(3))
    for i in range(6):
        g = G(w=rng.standard_normal(3))
        p1 = pair.inner_step(p1, g) if i % 2 == 0 else pair.outer_step(p1, g)
        p2, _ = adamw_step(single, p2, g, h)
        assert np.array_equal(pair.inner_state.m["w"], single.m["w"])
        assert np.array_equal(pair.inner_state.v["w"], single.v["w"])
    assert np.array_equal(p1["w"].data, p2["w"].data)


def test_none_mode_resets_every_adaptation():
    assert none_mode_resets()
    pair = OptimizerPair(OptHyper(), OptHyper(), "none")
    pair.inner_step(P(w=[1.0]), G(w=[1.0]))
    assert pair.inner_state.t == 1
    pair.begin_adaptation()
    assert pair.inner_state.is_zero() and pair.inner_state.t == 0


def test_copy_mode_round_trip():
    pair = OptimizerPair(OptHyper(), OptHyper(), "copy")
    p = pair.inner_step(P(w=[1.0]), G(w=[2.0]))
    pair.begin_adaptation()
    assert pair.inner_state.t == 1  # kept across adaptations
    p = pair.outer_step(p, G(w=[1.0]))
    assert pair.outer_state.t == 2 and pair.inner_state.t == 2
    assert pair.inner_state is not pair.outer_state
    assert np.array_equal(pair.inner_state.m["w"], pair.outer_state.m["w"])


@pytest.mark.parametrize("inner,outer,sharing", [("sgd", "sgd", "none"), ("sgd", "adamw", "none"),
                                                 ("adamw", "sgd", "none"), ("adamw", "adamw", "none"),
                                                 ("adamw", "adamw", "shared")])
def test_ablation_grid_constructible(inner, outer, sharing):
    pair = OptimizerPair(OptHyper(inner), OptHyper(outer), sharing)
    p = pair.outer_step(pair.inner_step(P(w=[1.0]), G(w=[1.0])), G(w=[1.0]))
    assert np.isfinite(p["w"].data).all()


def test_stateless_outer_keeps_no_moments():
    pair = OptimizerPair(OptHyper("adamw"), OptHyper("sgd"), "none")
    pair.outer_step(P(w=[1.0]), G(w=[1.0]))
    assert pair.outer_state.m == {} and pair.outer_state.v == {}


def test_adamw_is_differentiable_through_tape():
    tape = ad.Tape()
    w = tape.leaf(np.array([0.5, -1.0]))
    g = ad.grad(ad.sum_(w * w * w), w, create_graph=True)
    st_ = OptState()
    st_.m["w"], st_.v["w"], st_.t = np.array([0.1, 0.2]), np.array([0.3, 0.0]), 1
    out, _ = adamw_step(st_, {"w": w}, {"w": g}, OptHyper(lr=0.1))
    d = ad.grad(ad.sum_(out["w"]), w)
    assert np.isfinite(d.data).all() and d.shape == (2,)
