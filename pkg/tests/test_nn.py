import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topocaps.errors import ConfigurationError, DimensionError, FormatError, UsageError
from topocaps.nn import (
    MlpParams,
    OptimizerState,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    mlp_init,
    mlp_zeros,
    save_checkpoint,
    sgd_momentum_step,
)


def loop_forward(params, x):
    """Scalar-loop re-evaluation used as an independent oracle."""
    h = [float(v) for v in x]
    n = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        out = []
        for i in range(w.shape[0]):
            s = float(b[i])
            for j in range(w.shape[1]):
                s += float(w[i, j]) * h[j]
            out.append(max(s, 0.0) if k < n - 1 else s)
        h = out
    return np.array(h)


def fd_check(params, x, grad_y, h=1e-5):
    """Max relative error of analytic vs central-difference gradients of <grad_y, f(x)>."""
    y, cache = mlp_forward(params, x)
    gp, gx = mlp_backward(params, cache, grad_y)

    def loss():
        return float(np.sum(grad_y * mlp_forward(params, x)[0]))

    worst = 0.0
    for arrs, garrs in ((params.weights, gp.weights), (params.biases, gp.biases), ([x], [gx])):
        for a, g in zip(arrs, garrs):
            flat, gflat = a.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                lp = loss()
                flat[i] = old - h
                lm = loss()
                flat[i] = old
                num = (lp - lm) / (2 * h)
                worst = max(worst, abs(num - gflat[i]) / max(1.0, abs(num), abs(gflat[i])))
    return worst


def test_init_preset_sizes_within_bound():
    p = mlp_init([2352, 972, 648, 648], seed=0)
    assert p.weights[0].shape == (972, 2352)
    b = 1 / np.sqrt(2352)
    assert np.all(np.abs(p.weights[0]) <= b)
    assert np.all(np.abs(p.biases[0]) <= b)
    assert p.sizes == [2352, 972, 648, 648]


def test_init_fan_in_one_and_determinism():
    p = mlp_init([1, 1], seed=3)
    assert p.weights[0].shape == (1, 1) and -1 <= p.weights[0][0, 0] <= 1
    a, b = mlp_init([5, 4, 3], 11), mlp_init([5, 4, 3], 11)
    for u, v in zip(a.weights + a.biases, b.weights + b.biases):
        assert np.array_equal(u, v)


@pytest.mark.parametrize("sizes", [[], [3], [3, 0], [2, -1, 3], [2.5, 3]])
def test_init_rejects_bad_sizes(sizes):
    with pytest.raises(ConfigurationError):
        mlp_init(sizes, 0)


def test_params_must_chain():
    with pytest.raises(DimensionError):
        MlpParams([np.zeros((3, 2)), np.zeros((4, 5))], [np.zeros(3), np.zeros(4)])
    with pytest.raises(DimensionError):
        MlpParams([np.zeros((3, 2))], [np.zeros(2)])


def test_forward_zero_and_identity():
    x = np.random.default_rng(0).normal(size=(4, 3))
    y, _ = mlp_forward(mlp_zeros([3, 5, 2]), x)
    assert np.all(y == 0)
    ident = MlpParams([np.eye(3)], [np.zeros(3)])
    assert np.array_equal(mlp_forward(ident, x)[0], x)


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(1)
    p = mlp_init([6, 7, 5, 3], 2)
    for _ in range(5):
        x = rng.normal(size=6)
        assert np.allclose(mlp_forward(p, x)[0], loop_forward(p, x), atol=1e-12, rtol=0)


def test_forward_shape_error():
    with pytest.raises(DimensionError):
        mlp_forward(mlp_init([3, 2], 0), np.zeros(4))


def test_backward_zero_and_linear_closed_form():
    rng = np.random.default_rng(2)
    p = mlp_init([4, 3], 0)
    x = rng.normal(size=(5, 4))
    y, cache = mlp_forward(p, x)
    gp, gx = mlp_backward(p, cache, np.zeros_like(y))
    assert all(np.all(g == 0) for g in gp.weights + gp.biases) and np.all(gx == 0)
    gp, gx = mlp_backward(p, cache, np.ones_like(y))
    assert np.allclose(gp.weights[0], np.ones((3, 5)) @ x)
    assert np.allclose(gp.biases[0], 5.0)
    assert np.allclose(gx, np.ones((5, 3)) @ p.weights[0])


def test_backward_finite_differences_random_nets():
    rng = np.random.default_rng(3)
    worst = 0.0
    for trial in range(100):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.choice([1, 2, 5, 16])) for _ in range(depth + 1)]
        p = mlp_init(sizes, trial)
        x = rng.normal(size=(2, sizes[0]))
        g = rng.normal(size=(2, sizes[-1]))
        worst = max(worst, fd_check(p, x, g))
    assert worst < 1e-4


def test_backward_stale_cache():
    p = mlp_init([3, 2], 0)
    y, cache = mlp_forward(p, np.ones(3))
    p.version += 1
    with pytest.raises(UsageError):
        mlp_backward(p, cache, np.ones_like(y))
    q = p.copy()
    _, cache = mlp_forward(p, np.ones(3))
    with pytest.raises(UsageError):
        mlp_backward(q, cache, np.ones(2))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 8), min_size=2, max_size=4), st.floats(-1e3, 1e3))
def test_no_nan_for_bounded_inputs(sizes, scale):
    p = mlp_init(sizes, 0)
    x = np.full((2, sizes[0]), scale)
    y, cache = mlp_forward(p, x)
    gp, gx = mlp_backward(p, cache, np.ones_like(y))
    assert np.all(np.isfinite(y)) and np.all(np.isfinite(gx))
    assert all(np.all(np.isfinite(g)) for g in gp.weights + gp.biases)


def test_sgd_plain_and_zero_gradient():
    p = {"w": np.array(1.0)}
    sgd_momentum_step(p, {"w": np.array(2.0)}, OptimizerState(0.1, 0.0))
    assert p["w"] == pytest.approx(0.8)
    q = {"w": np.array([1.0, -2.0])}
    sgd_momentum_step(q, {"w": np.zeros(2)}, OptimizerState(0.1, 0.9))
    assert np.array_equal(q["w"], [1.0, -2.0])


def test_sgd_momentum_hand_unroll():
    lr, m, g = 1e-4, 0.9, 3.0
    p = {"w": np.array(0.5)}
    st_ = OptimizerState(lr, m)
    sgd_momentum_step(p, {"w": np.array(g)}, st_)
    sgd_momentum_step(p, {"w": np.array(g)}, st_)
    v1 = -lr * g
    v2 = m * v1 - lr * g
    assert p["w"] == pytest.approx(0.5 + v1 + v2, abs=1e-15)
    assert st_.velocity["w"] == pytest.approx(v2, abs=1e-15)


def test_sgd_shape_errors():
    with pytest.raises(DimensionError):
        sgd_momentum_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState(0.1))
    with pytest.raises(DimensionError):
        sgd_momentum_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, OptimizerState(0.1))


def test_optimizer_state_validation():
    with pytest.raises(ConfigurationError):
        OptimizerState(-1.0)
    with pytest.raises(ConfigurationError):
        OptimizerState(0.1, 1.0)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)), "scalar": np.array(2.5), "b": rng.normal(size=7)}
    save_checkpoint(str(tmp_path), arrays, {"note": "x"})
    back, meta = load_checkpoint(str(tmp_path))
    assert meta == {"note": "x"}
    for k, v in arrays.items():
        assert back[k].shape == v.shape and np.array_equal(back[k], v)
    man = json.load(open(tmp_path / "manifest"))
    assert [e["name"] for e in man["params"]] == ["a", "scalar", "b"]
    assert os.path.getsize(tmp_path / "params.bin") == 8 * (12 + 1 + 7)


def test_checkpoint_format_errors(tmp_path):
    with pytest.raises(FormatError):
        load_checkpoint(str(tmp_path))
    save_checkpoint(str(tmp_path), {"a": np.ones(3)})
    with open(tmp_path / "params.bin", "ab") as f:
        f.write(b"\0" * 8)
    with pytest.raises(FormatError):
        load_checkpoint(str(tmp_path))
    (tmp_path / "manifest").write_text("{not json")
    with pytest.raises(FormatError):
        load_checkpoint(str(tmp_path))
