"""Dense ReLU networks with hand-written reverse mode and SGD with momentum.

Everything here works on plain numpy arrays. An MLP is a list of affine layers
with a rectifier between consecutive layers and no activation on the output.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, UsageError

CHECKPOINT_FORMAT = "topocaps-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    # bumped by every in-place update so stale caches can be detected
    version: int = 0

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise DimensionError("need one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise DimensionError(
                    f"layer {k} expects {w.shape[1]} inputs, previous layer gives {self.weights[k - 1].shape[0]}"
                )

    @property
    def sizes(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def named(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{k}"] = w
            out[f"{prefix}b{k}"] = b
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class MlpCache:
    inputs: np.ndarray
    pre: List[np.ndarray]
    params_id: int
    version: int


def mlp_init(layer_sizes: Sequence[int], seed: int, dtype=np.float64) -> MlpParams:
    """Uniform fan-in initialisation, U(-1/sqrt(m), 1/sqrt(m)) for weights and biases."""
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(s) != s or s <= 0 for s in sizes):
        raise ConfigurationError(f"layer_sizes must hold >= 2 positive ints, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        biases.append(rng.uniform(-bound, bound, size=fan_out).astype(dtype))
    return MlpParams(weights, biases)


def mlp_zeros(layer_sizes: Sequence[int], dtype=np.float64) -> MlpParams:
    sizes = list(layer_sizes)
    if len(sizes) < 2:
        raise ConfigurationError("layer_sizes must hold >= 2 entries")
    return MlpParams(
        [np.zeros((o, i), dtype=dtype) for i, o in zip(sizes[:-1], sizes[1:])],
        [np.zeros(o, dtype=dtype) for o in sizes[1:]],
    )


def mlp_forward(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
    x = np.asarray(x)
    if x.shape[-1] != params.n_in:
        raise DimensionError(f"input width {x.shape[-1]} != fan-in {params.n_in}")
    pre = []
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w.T + b
        pre.append(a)
        h = np.maximum(a, 0.0) if k < last else a
    return h, MlpCache(x, pre, id(params), params.version)


def mlp_backward(
    params: MlpParams, cache: MlpCache, grad_y: np.ndarray
) -> Tuple[MlpParams, np.ndarray]:
    """Gradients of a scalar whose gradient w.r.t. the network output is ``grad_y``.

    Leading (batch) axes are summed over for the parameter gradients.
    """
    if cache.params_id != id(params) or cache.version != params.version:
        raise UsageError("cache was produced by different or since-updated parameters")
    grad_y = np.asarray(grad_y)
    if grad_y.shape != cache.pre[-1].shape:
        raise DimensionError(f"grad_y shape {grad_y.shape} != output shape {cache.pre[-1].shape}")
    n = len(params.weights)
    gw: List[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: List[np.ndarray] = [None] * n  # type: ignore[list-item]
    g = grad_y
    for k in range(n - 1, -1, -1):
        h_in = cache.inputs if k == 0 else np.maximum(cache.pre[k - 1], 0.0)
        g2 = g.reshape(-1, g.shape[-1])
        gw[k] = g2.T @ h_in.reshape(-1, h_in.shape[-1])
        gb[k] = g2.sum(axis=0)
        g = g @ params.weights[k]
        if k > 0:
            g = g * (cache.pre[k - 1] > 0)
    return MlpParams(gw, gb), g


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")


def sgd_momentum_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> None:
    """Heavy-ball update applied in place: v <- m*v - lr*g ; p <- p + v.

    ``params`` and ``grads`` map names to arrays; 0-d arrays cover scalars such
    as the learned offset. Velocity slots are created lazily at zero.
    """
    if set(params) != set(grads):
        raise DimensionError(f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))}")
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise DimensionError(f"{name}: velocity shape {v.shape} != parameter shape {p.shape}")
        v *= state.momentum
        v -= state.learning_rate * g
        p += v


def save_checkpoint(path: str, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``manifest`` (JSON) and ``params.bin`` (little-endian float64) into ``path``."""
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        a = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "total_bytes": offset,
        "params": entries,
        "meta": meta or {},
    }
    tmp_bin = os.path.join(path, "params.bin.tmp")
    with open(tmp_bin, "wb") as f:
        for c in chunks:
            f.write(c)
    os.replace(tmp_bin, os.path.join(path, "params.bin"))
    tmp_man = os.path.join(path, "manifest.tmp")
    with open(tmp_man, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=False)
    os.replace(tmp_man, os.path.join(path, "manifest"))


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    man_path = os.path.join(path, "manifest")
    bin_path = os.path.join(path, "params.bin")
    try:
        with open(man_path, encoding="utf-8") as f:
            manifest = json.load(f)
        with open(bin_path, "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise FormatError(f"checkpoint incomplete: {e.filename} missing") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError("manifest has wrong format tag")
    if manifest.get("total_bytes") != len(blob):
        raise FormatError(f"params.bin has {len(blob)} bytes, manifest expects {manifest.get('total_bytes')}")
    arrays = {}
    for e in manifest["params"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start, stop = e["offset"], e["offset"] + 8 * count
        if stop > len(blob):
            raise FormatError(f"{e['name']}: extends past end of params.bin")
        arrays[e["name"]] = np.frombuffer(blob[start:stop], dtype="<f8").reshape(shape).astype(np.float64)
    return arrays, manifest.get("meta", {})
