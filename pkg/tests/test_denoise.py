import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilecascade.codec import LinearLatentCodec
from tilecascade.denoise import (
    AnalyticGaussianDenoiser,
    ConditioningBundle,
    ConsistencyDenoiser,
    DegenerateTimestepError,
    DenoiserError,
    GaussianMixtureDenoiser,
    IllConditionedError,
    LabelRouter,
    LinearDenoiser,
    StationaryGaussianDenoiser,
    _NormalEquations,
    analytic_predict,
    bucket_edges,
    noise_prediction_loss,
    sr_loss,
    train_linear_denoiser,
    train_sr_linear_denoiser,
    unconditional_on_pairs,
)
from tilecascade.schedule import forward_diffuse, make_schedule

SCHED = make_schedule("linear", 1000)


def _quadrature_eps(z, a, prior_logpdf, lo=-12.0, hi=12.0, n=200_001):
    # posterior mean of x0 by brute-force integration on a grid
    x = np.linspace(lo, hi, n)
    logw = prior_logpdf(x) - 0.5 * (z - math.sqrt(a) * x) ** 2 / (1 - a)
    w = np.exp(logw - logw.max())
    x0 = np.sum(w * x) / np.sum(w)
    return (z - math.sqrt(a) * x0) / math.sqrt(1 - a)


def test_analytic_trivial_cases():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((4, 4, 4))
    mu = rng.standard_normal((4, 4, 4))
    t = 300
    a = SCHED.alpha_bar[t]
    point = AnalyticGaussianDenoiser(mu, 0.0, SCHED)
    assert np.allclose(point.predict(z, t), (z - math.sqrt(a) * mu) / math.sqrt(1 - a), atol=1e-12)
    unit = AnalyticGaussianDenoiser(0.0, 1.0, SCHED)
    assert np.allclose(unit.predict(z, t), math.sqrt(1 - a) * z, atol=1e-12)
    assert np.array_equal(analytic_predict(unit, z, t), unit.predict(z, t))


@settings(max_examples=20, deadline=None)
@given(
    mu=st.floats(-2, 2),
    var=st.floats(0.05, 3.0),
    z=st.floats(-3, 3),
    t=st.integers(1, 1000),
)
def test_analytic_matches_quadrature(mu, var, z, t):
    a = SCHED.alpha_bar[t]
    expected = _quadrature_eps(z, a, lambda x: -0.5 * (x - mu) ** 2 / var)
    got = AnalyticGaussianDenoiser(mu, var, SCHED).predict(np.full((1, 1, 1), z), t)[0, 0, 0]
    assert got == pytest.approx(expected, abs=1e-6)


def test_mixture_matches_quadrature():
    w, mus, vs = [0.3, 0.7], [-1.5, 1.0], [0.2, 0.5]

    def logpdf(x):
        p = sum(wi * np.exp(-0.5 * (x - m) ** 2 / v) / math.sqrt(2 * math.pi * v) for wi, m, v in zip(w, mus, vs))
        return np.log(p)

    d = GaussianMixtureDenoiser(w, [np.full((1, 1, 1), m) for m in mus], [np.full((1, 1, 1), v) for v in vs], SCHED)
    for t in (50, 400, 900):
        for z in (-1.0, 0.2, 1.7):
            expected = _quadrature_eps(z, SCHED.alpha_bar[t], logpdf)
            assert d.predict(np.full((1, 1, 1), z), t)[0, 0, 0] == pytest.approx(expected, abs=1e-6)
    assert np.allclose(d.responsibilities(np.zeros((1, 1, 1)), 10).sum(0), 1.0)


def test_degenerate_timestep_and_validation():
    d = AnalyticGaussianDenoiser(0.0, 1.0, SCHED)
    with pytest.raises(DegenerateTimestepError):
        d.predict(np.zeros((2, 2, 1)), 0)
    with pytest.raises(DenoiserError):
        AnalyticGaussianDenoiser(0.0, -1.0, SCHED)
    with pytest.raises(DenoiserError):
        StationaryGaussianDenoiser(0.0, 1.0, SCHED, length_scale=0.0)


@pytest.mark.parametrize("ls,nugget", [(1.5, 0.0), (3.0, 0.0), (2.0, 0.3)])
def test_stationary_matches_dense_posterior(ls, nugget):
    h, w, c = 6, 5, 2
    var = np.array([0.7, 1.3])
    mean = np.array([0.1, -0.4])
    d = StationaryGaussianDenoiser(mean, var, SCHED, ls, nugget)
    rng = np.random.default_rng(1)
    z = rng.standard_normal((h, w, c))
    t = 250
    a = SCHED.alpha_bar[t]
    # dense covariance over row-major pixels
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pos = np.stack([yy.ravel(), xx.ravel()], 1).astype(float)
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    K = (1 - nugget) * np.exp(-d2 / (2 * ls**2)) + nugget * np.eye(h * w)
    x0 = d.predict_x0(z, t)
    for ch in range(c):
        S = var[ch] * K
        resid = z[..., ch].ravel() - math.sqrt(a) * mean[ch]
        post = mean[ch] + math.sqrt(a) * S @ np.linalg.solve(a * S + (1 - a) * np.eye(h * w), resid)
        assert np.max(np.abs(x0[..., ch].ravel() - post)) <= 1e-9


def test_stationary_prior_sample_covariance():
    d = StationaryGaussianDenoiser(0.0, 2.0, SCHED, 2.0)
    rng = np.random.default_rng(2)
    draws = np.stack([d.sample_prior((4, 4, 1), rng)[..., 0].ravel() for _ in range(20_000)])
    i = np.arange(4)
    yy, xx = np.meshgrid(i, i, indexing="ij")
    pos = np.stack([yy.ravel(), xx.ravel()], 1)
    K = 2.0 * np.exp(-((pos[:, None] - pos[None]) ** 2).sum(-1) / 8.0)
    assert np.max(np.abs(np.cov(draws.T) - K)) < 0.1


def test_consistency_denoiser_returns_upsampled_target():
    codec = LinearLatentCodec.mean_preserving(4)
    low = np.random.default_rng(3).integers(0, 256, (8, 8, 3), dtype=np.uint8)
    d = ConsistencyDenoiser(codec, SCHED)
    z = np.random.default_rng(4).standard_normal((8, 8, 4))
    t = 600
    a = SCHED.alpha_bar[t]
    eps = d.predict(z, t, ConditioningBundle(low_res=low))
    x0 = (z - math.sqrt(1 - a) * eps) / math.sqrt(a)
    up = np.repeat(np.repeat(low / 255.0, 4, 0), 4, 1)
    assert np.max(np.abs(codec.decode(x0) - up)) <= 1e-9
    with pytest.raises(DenoiserError):
        d.predict(z, t)


def test_label_router():
    a = AnalyticGaussianDenoiser(0.0, 1.0, SCHED)
    b = AnalyticGaussianDenoiser(1.0, 0.0, SCHED)
    r = LabelRouter(a, {"neg": b})
    z = np.ones((2, 2, 1))
    assert np.array_equal(r.predict(z, 10), a.predict(z, 10))
    assert np.array_equal(r.predict(z, 10, ConditioningBundle(label="neg")), b.predict(z, 10))
    assert np.array_equal(r.predict(z, 10, ConditioningBundle(label="other")), a.predict(z, 10))


def test_bucket_edges_partition():
    edges = bucket_edges(1000, 10)
    assert edges[0] == 0 and edges[-1] == 1000 and len(edges) == 11
    m = LinearDenoiser(np.zeros((10, 1, 1)), np.zeros((10, 1)), edges, 1, 1)
    buckets = [m.bucket(t) for t in range(1, 1001)]
    assert buckets == sorted(buckets) and set(buckets) == set(range(10))
    with pytest.raises(DenoiserError):
        m.bucket(0)


def test_constant_images_learn_point_mass_posterior():
    sched = make_schedule("linear", 20, beta_min=1e-2, beta_max=0.2)
    c = np.array([0.3, -0.5])
    data = np.broadcast_to(c, (4, 6, 6, 2))
    model = train_linear_denoiser(data, sched, buckets=20, window=1, ridge=1e-10, draws_per_bucket=32)
    oracle = AnalyticGaussianDenoiser(c, 0.0, sched)
    rng = np.random.default_rng(5)
    for t in range(1, 21):
        z = forward_diffuse(data[0], t, rng.standard_normal(data[0].shape), sched)
        assert np.max(np.abs(model.predict(z, t) - oracle.predict(z, t))) <= 1e-3


def test_pure_noise_data_learns_sqrt_one_minus_alpha_bar():
    sched = make_schedule("linear", 10, beta_min=0.05, beta_max=0.3)
    data = np.random.default_rng(6).standard_normal((64, 8, 8, 1))
    model = train_linear_denoiser(data, sched, buckets=10, window=1, ridge=1e-8, draws_per_bucket=400)
    for t in range(1, 11):
        assert model.weights[t - 1][0, 0] == pytest.approx(math.sqrt(1 - sched.alpha_bar[t]), abs=0.02)


def test_ridge_path_training_loss_monotone():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((500, 6))
    y = X @ rng.standard_normal((6, 2)) + 0.5 * rng.standard_normal((500, 2))
    ne = _NormalEquations.empty(6, 2)
    ne.add(X, y)
    losses = []
    for ridge in (1e3, 1e2, 10.0, 1.0, 0.1, 0.0):
        W, b = ne.solve(ridge)
        losses.append(float(np.sum((y - X @ W - b) ** 2)))
    assert all(l1 >= l2 for l1, l2 in zip(losses, losses[1:]))


def test_trained_model_beats_zero_predictor_and_round_trips(tmp_path):
    rng = np.random.default_rng(8)
    data = 0.2 + 0.5 * rng.standard_normal((32, 8, 8, 4))
    model = train_linear_denoiser(data, SCHED, buckets=5, window=3, draws_per_bucket=64)
    zero = LinearDenoiser(np.zeros_like(model.weights), np.zeros_like(model.bias), model.edges, 3, 4)
    assert noise_prediction_loss(model, data, SCHED, 300) < noise_prediction_loss(zero, data, SCHED, 300)
    model.save(tmp_path / "m.npz")
    back = LinearDenoiser.load(tmp_path / "m.npz")
    z = rng.standard_normal((8, 8, 4))
    assert np.array_equal(back.predict(z, 123), model.predict(z, 123))
    with pytest.raises(DenoiserError):
        train_linear_denoiser(data, SCHED, window=2)
    with pytest.raises(DenoiserError):
        train_linear_denoiser(np.zeros((0, 4, 4, 4)), SCHED)


def test_predict_is_pure_and_shape_preserving():
    data = np.random.default_rng(9).standard_normal((8, 8, 8, 4))
    model = train_linear_denoiser(data, SCHED, buckets=2, draws_per_bucket=8)
    z = np.random.default_rng(10).standard_normal((5, 7, 4))
    out = model.predict(z, 500)
    assert out.shape == z.shape
    assert np.array_equal(out, model.predict(z.copy(), 500))


def _nearest_pairs(n, side, rng):
    codec = LinearLatentCodec.mean_preserving(4)
    pairs = []
    for _ in range(n):
        low = rng.integers(0, 256, (side, side, 3), dtype=np.uint8)
        pairs.append((low, np.repeat(np.repeat(low, 4, 0), 4, 1)))
    return codec, pairs


def test_sr_conditioning_beats_unconditional_on_nearest_pairs():
    codec, pairs = _nearest_pairs(24, 8, np.random.default_rng(11))
    kw = dict(buckets=5, window=1, draws_per_bucket=64)
    cond = train_sr_linear_denoiser(pairs, codec, SCHED, **kw)
    uncond = unconditional_on_pairs(pairs, codec, SCHED, **kw)
    assert sr_loss(cond, pairs, codec, SCHED, 400) < noise_prediction_loss(
        uncond, [codec.encode(h) for _, h in pairs], SCHED, 400
    )


def test_sr_independent_pairs_shrink_conditioning_weights():
    rng = np.random.default_rng(12)
    codec = LinearLatentCodec.mean_preserving(4)
    pairs = [
        (rng.integers(0, 256, (8, 8, 3), dtype=np.uint8), rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
        for _ in range(64)
    ]
    model = train_sr_linear_denoiser(pairs, codec, SCHED, buckets=2, window=1, ridge=1e-8, draws_per_bucket=800)
    k = model.self_feature_count
    for b in range(2):
        assert np.linalg.norm(model.weights[b][k:]) <= 0.1 * np.linalg.norm(model.weights[b][:k])


def test_sr_pair_contracts():
    codec = LinearLatentCodec.mean_preserving(4)
    rng = np.random.default_rng(13)
    low = rng.integers(0, 256, (128, 128, 3), dtype=np.uint8)
    high = rng.integers(0, 256, (512, 512, 3), dtype=np.uint8)
    model = train_sr_linear_denoiser([(low, high)], codec, SCHED, buckets=1, window=1, draws_per_bucket=1)
    assert model.conditional
    with pytest.raises(DenoiserError):
        train_sr_linear_denoiser([(low, high[:256])], codec, SCHED)
    with pytest.raises(DenoiserError):
        model.predict(np.zeros((128, 128, 4)), 10)


def test_singular_normal_equations_without_ridge():
    codec = LinearLatentCodec.mean_preserving(4)
    flat = np.full((8, 8, 3), 100, np.uint8)
    pairs = [(flat, np.repeat(np.repeat(flat, 4, 0), 4, 1))] * 4
    with pytest.raises(IllConditionedError):
        train_sr_linear_denoiser(pairs, codec, SCHED, buckets=1, window=1, ridge=0.0, draws_per_bucket=8)
