import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tilecascade.compose import (
    DEFAULT_LAMBDA_NEG,
    DEFAULT_NEGATIVE_PROMPT,
    ComposeError,
    GuidanceConfig,
    cfg_compose,
    guided_predict,
    negative_compose,
)
from tilecascade.denoise import AnalyticGaussianDenoiser, ConditioningBundle, LabelRouter
from tilecascade.schedule import make_schedule

finite = st.floats(-10, 10, allow_nan=False)


def test_negative_compose_examples():
    e = np.array([1.0])
    assert negative_compose(e, np.array([0.5]), 2.0)[0] == 2.0
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 5, 5, 4))
    assert negative_compose(a, b, 0.0).tobytes() == a.tobytes()
    assert np.array_equal(negative_compose(a, a, 3.7), a)


def test_compose_errors():
    with pytest.raises(ComposeError):
        negative_compose(np.zeros(3), np.zeros(4), 1.0)
    with pytest.raises(ComposeError):
        negative_compose(np.zeros(3), np.zeros(3), -1.0)
    with pytest.raises(ComposeError):
        cfg_compose(np.zeros(3), np.zeros((3, 1)), 1.0)
    with pytest.raises(ComposeError):
        GuidanceConfig(lambda_neg=-0.1)


def test_cfg_compose_endpoints():
    rng = np.random.default_rng(1)
    u, c = rng.standard_normal((2, 6, 6, 4))
    assert np.array_equal(cfg_compose(u, c, 1.0), c)
    assert np.array_equal(cfg_compose(u, c, 0.0), u)


def test_default_tables():
    assert [DEFAULT_LAMBDA_NEG[k] for k in ("10to12", "12to14", "14to16", "16to18", "18to20")] == [5, 2, 3, 3, 4]
    assert DEFAULT_NEGATIVE_PROMPT == "blurry, low res, low quality"


@settings(max_examples=50, deadline=None)
@given(
    e=arrays(np.float64, (4, 4, 2), elements=finite),
    n=arrays(np.float64, (4, 4, 2), elements=finite),
    lam=st.floats(0, 10),
)
def test_direction_identity(e, n, lam):
    out = negative_compose(e, n, lam)
    d = e - n
    assert np.allclose(out - e, lam * d, rtol=0, atol=1e-12)
    assert abs(np.vdot(out - e, d) - lam * np.vdot(d, d)) <= 1e-9 * max(1.0, lam * np.vdot(d, d))


@settings(max_examples=30, deadline=None)
@given(w=st.floats(0, 1), lam=st.floats(0, 8), seed=st.integers(0, 10_000))
def test_composition_commutes_with_convex_blend(w, lam, seed):
    rng = np.random.default_rng(seed)
    e1, e2, n1, n2 = rng.standard_normal((4, 3, 3, 2))
    lhs = negative_compose(w * e1 + (1 - w) * e2, w * n1 + (1 - w) * n2, lam)
    rhs = w * negative_compose(e1, n1, lam) + (1 - w) * negative_compose(e2, n2, lam)
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_guided_predict_end_to_end():
    sched = make_schedule()
    pos = AnalyticGaussianDenoiser(0.0, 1.0, sched)
    # a mean-shifted Gaussian stands in for the negatively conditioned model
    neg = AnalyticGaussianDenoiser(0.5, 1.0, sched)
    lab = AnalyticGaussianDenoiser(-0.5, 0.3, sched)
    router = LabelRouter(pos, {DEFAULT_NEGATIVE_PROMPT: neg, "forest": lab})
    z = np.random.default_rng(2).standard_normal((8, 8, 4))
    t = 400
    plain = pos.predict(z, t)
    assert guided_predict(router, z, t, None, None).tobytes() == plain.tobytes()
    assert guided_predict(router, z, t, None, GuidanceConfig(0.0)).tobytes() == plain.tobytes()
    got = guided_predict(router, z, t, None, GuidanceConfig(3.0))
    assert np.array_equal(got, negative_compose(plain, neg.predict(z, t), 3.0))
    both = guided_predict(router, z, t, ConditioningBundle(), GuidanceConfig(3.0, pos_label="forest", pos_weight=10.0))
    expected = negative_compose(cfg_compose(plain, lab.predict(z, t), 10.0), neg.predict(z, t), 3.0)
    assert np.array_equal(both, expected)
