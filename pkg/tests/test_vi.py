import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import elbo_fd_max_rel_error, random_frames, toy_model
from topocaps.errors import ConfigurationError, DimensionError, DomainError
from topocaps.model import TvaeModel, build_model
from topocaps.nn import MlpParams, mlp_zeros
from topocaps.topography import CapsuleLayout, TopographyConfig
from topocaps.vi import (
    DiagonalGaussian,
    Noise,
    bernoulli_nll,
    bernoulli_nll_grad,
    elbo_batch,
    elbo_sequence,
    importance_log_px,
    kl_std_normal,
    log_normal,
    logmeanexp,
    reparam_sample,
    window_indices,
)


def test_reparam_sample():
    g = DiagonalGaussian(np.array([1.0, -2.0]), np.array([0.3, -0.1]))
    assert np.array_equal(reparam_sample(g, np.zeros(2)), g.mean)
    n = np.array([0.4, -1.1])
    assert np.array_equal(reparam_sample(DiagonalGaussian(np.zeros(2), np.zeros(2)), n), n)
    draws = reparam_sample(
        DiagonalGaussian(np.full(100_000, 1.5), np.full(100_000, np.log(2.0))),
        np.random.default_rng(0).standard_normal(100_000),
    )
    assert abs(draws.mean() - 1.5) < 3 * 2.0 / np.sqrt(1e5)
    with pytest.raises(DimensionError):
        reparam_sample(g, np.zeros(3))


def test_kl_closed_form_and_monte_carlo():
    assert kl_std_normal(DiagonalGaussian(np.zeros(3), np.zeros(3))) == 0.0
    assert kl_std_normal(DiagonalGaussian(np.array([1.0]), np.array([0.0]))) == pytest.approx(0.5)
    g = DiagonalGaussian(np.array([0.7, -0.4]), np.array([-0.5, 0.3]))
    x = reparam_sample(
        DiagonalGaussian(np.broadcast_to(g.mean, (10**6, 2)), np.broadcast_to(g.log_std, (10**6, 2))),
        np.random.default_rng(1).standard_normal((10**6, 2)),
    )
    mc = np.mean(g.log_prob(x) - log_normal(x))
    assert mc == pytest.approx(float(kl_std_normal(g)), rel=0.01)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-3, 3)), min_size=1, max_size=5))
def test_kl_nonnegative(pairs):
    m, ls = map(np.array, zip(*pairs))
    assert kl_std_normal(DiagonalGaussian(m, ls)) >= -1e-12


def test_bernoulli_nll():
    assert bernoulli_nll(np.array([1.0]), np.array([800.0])) == pytest.approx(0.0, abs=1e-300)
    assert bernoulli_nll(np.full(4, 0.5), np.zeros(4)) == pytest.approx(4 * np.log(2))
    a = np.array([-3.0, 0.2, 5.0])
    x = np.array([0.0, 0.4, 1.0])
    assert np.allclose(bernoulli_nll_grad(x, a), 1 / (1 + np.exp(-a)) - x)
    direct = -np.sum(x * np.log(1 / (1 + np.exp(-a))) + (1 - x) * np.log(1 - 1 / (1 + np.exp(-a))))
    assert bernoulli_nll(x, a) == pytest.approx(direct)
    assert np.isfinite(bernoulli_nll(np.array([0.0]), np.array([1e4])))
    with pytest.raises(DomainError):
        bernoulli_nll(np.array([1.2]), np.zeros(1))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.floats(-1e4, 1e4))
def test_logmeanexp_shift(vals, c):
    a = np.array(vals)
    assert logmeanexp(a + c) == pytest.approx(logmeanexp(a) + c, abs=1e-9 * max(1.0, abs(c)))


def test_window_indices():
    topo = TopographyConfig(CapsuleLayout(1, 4), L=1)
    assert window_indices(3, topo).tolist() == [[2, 0, 1], [0, 1, 2], [1, 2, 0]]
    pad = topo.with_(boundary="linear-padded")
    assert window_indices(3, pad).tolist() == [[0, 0, 1], [0, 1, 2], [1, 2, 2]]
    assert window_indices(2, topo).shape == (2, 3)  # L = S/2 is allowed
    with pytest.raises(ConfigurationError, match="window exceeds sequence"):
        window_indices(1, topo)


def test_zero_network_elbo_baseline():
    S, N, n = 3, 4, 3
    topo = TopographyConfig(CapsuleLayout(1, n), variant="none")
    model = TvaeModel(mlp_zeros([N, 2 * n]), None, mlp_zeros([n, N]), np.array(0.0), topo)
    x = random_frames((1, S, N))
    res = elbo_batch(model, x, np.random.default_rng(0), with_grad=False)
    assert res.elbo[0] == pytest.approx(-S * N * np.log(2))
    assert res.kl_z[0] == 0.0


@pytest.mark.parametrize(
    "kw",
    [
        dict(variant="tvae", L=1, K=3),
        dict(variant="bubblevae", L=1, K=1),
        dict(variant="vae", L=0),
        dict(variant="tvae", L=1, K=1, boundary="linear-padded"),
        dict(variant="tvae", L=1, K=2, causal=True),
    ],
)
def test_elbo_gradient_finite_differences(kw):
    model = toy_model(seed=3, **kw)
    x = random_frames((2, 4, 16), seed=4)
    assert elbo_fd_max_rel_error(model, x, np.random.default_rng(5)) < 1e-4


def test_elbo_gradient_small_sequence():
    # 4-pixel frames, S=3, D=3
    model = toy_model(C=1, D=3, L=1, K=3, sizes=(4, 5), seed=1)
    x = random_frames((1, 3, 4), seed=2)
    assert elbo_fd_max_rel_error(model, x, np.random.default_rng(0)) < 1e-4


def test_elbo_sequence_matches_batch():
    model = toy_model()
    x = random_frames((4, 16))
    val, grad = elbo_sequence(model, x, np.random.default_rng(0))
    res = elbo_batch(model, x[None], np.random.default_rng(0))
    assert val == res.elbo[0]
    assert set(grad) == set(model.parameters())


def test_explicit_noise_is_used():
    model = toy_model()
    x = random_frames((1, 4, 16))
    noise = Noise(np.zeros((1, 4, 8)), np.zeros((1, 4, 8)))
    a = elbo_batch(model, x, noise, with_grad=False).elbo
    b = elbo_batch(model, x, None, with_grad=False).elbo
    assert np.array_equal(a, b)
    with pytest.raises(DimensionError):
        elbo_batch(model, x, Noise(np.zeros((1, 4, 7)), None))


def test_importance_sampling_single_sample_equals_elbo():
    model = toy_model(seed=2)
    x = random_frames((3, 4, 16), seed=1)
    rng = np.random.default_rng(9)
    reps = 4000
    a = np.mean([importance_log_px(model, x, 1, rng) for _ in range(reps)], axis=0)
    draws = np.array([elbo_batch(model, x, rng, with_grad=False).elbo for _ in range(reps)])
    b = draws.mean(axis=0)
    # the single-sample estimate uses sampled rather than analytic KL; equal in expectation
    assert np.all(np.abs(a - b) < 6 * draws.std(axis=0) / np.sqrt(reps))
    assert np.array_equal(importance_log_px(model, x, 3, 4), importance_log_px(model, x, 3, 4))
    with pytest.raises(ConfigurationError):
        importance_log_px(model, x, 0)


@pytest.mark.parametrize("weighting", ["sequence", "frame"])
def test_importance_sampling_monotone_in_expectation(weighting):
    model = toy_model(seed=2)
    x = random_frames((2, 4, 16), seed=1)
    rng = np.random.default_rng(0)
    one = np.mean([importance_log_px(model, x, 1, rng, weighting).mean() for _ in range(100)])
    ten = np.mean([importance_log_px(model, x, 10, rng, weighting).mean() for _ in range(100)])
    assert ten >= one


def _linear_gaussian_model(seed=0, n=3, N=5, sigma=0.5):
    """Linear decoder with orthogonal columns so the exact posterior is diagonal."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(N, n)))
    scales = np.array([1.5, 0.7, 2.0])[:n]
    W = Q * scales  # W^T W = diag(scales^2)
    b = rng.normal(size=N)
    prec = 1.0 + scales**2 / sigma**2
    post_var = 1.0 / prec
    A = (post_var[:, None] * W.T) / sigma**2  # posterior mean = A (x - b)
    enc_W = np.vstack([A, np.zeros((n, N))])
    enc_b = np.concatenate([-A @ b, 0.5 * np.log(post_var)])
    topo = TopographyConfig(CapsuleLayout(1, n), variant="none")
    model = TvaeModel(
        MlpParams([enc_W], [enc_b]), None, MlpParams([W], [b]), np.array(0.0), topo,
        likelihood="gaussian", obs_std=sigma,
    )
    cov = W @ W.T + sigma**2 * np.eye(N)
    return model, b, cov


def test_importance_sampling_exact_for_linear_gaussian():
    model, b, cov = _linear_gaussian_model()
    x = np.random.default_rng(3).normal(size=(2, 3, 5))
    _, logdet = np.linalg.slogdet(cov)
    inv = np.linalg.inv(cov)
    d = x - b
    exact = (-0.5 * (np.einsum("bsi,ij,bsj->bs", d, inv, d) + logdet + 5 * np.log(2 * np.pi))).sum(axis=1)
    for w in ("sequence", "frame"):
        est = importance_log_px(model, x, 10, np.random.default_rng(0), w)
        assert np.allclose(est, exact, atol=1e-8)


def test_variant_none_equivalence():
    topo = TopographyConfig(CapsuleLayout(2, 4))
    vae = build_model("vae", ("toy", [16, 8]), topo, 0)
    x = random_frames((2, 4, 16))
    a = elbo_batch(vae, x, np.random.default_rng(1), with_grad=False).elbo
    raw = build_model("none", ("toy", [16, 8]), topo, 0)
    b = elbo_batch(raw, x, np.random.default_rng(1), with_grad=False).elbo
    assert np.array_equal(a, b)
