"""Capsule topographies, the capsule Roll, and Topographic Product-of-Student's-t variables.

Latent vectors are flat arrays whose last axis holds ``C * D`` units, capsule
``c`` occupying the slice ``[c*D, (c+1)*D)``. ``Roll_k`` moves the entry at
capsule index ``i`` to index ``(i + k) mod D`` inside every capsule, so
``Roll_1([a, b, c]) == [c, a, b]``.

A temporal window of squared ``u`` vectors is stored oldest first: window
slot ``w`` holds timestep ``l + delta`` with ``delta = w - L``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError

VARIANTS = ("shifting", "stationary", "none", "torus2d")
BOUNDARIES = ("cyclic", "linear-padded")


@dataclass(frozen=True)
class CapsuleLayout:
    n_capsules: int
    capsule_dim: int

    def __post_init__(self):
        if self.n_capsules < 1 or self.capsule_dim < 1:
            raise ConfigurationError(
                f"capsule layout needs positive sizes, got C={self.n_capsules} D={self.capsule_dim}"
            )

    @property
    def n(self) -> int:
        return self.n_capsules * self.capsule_dim

    def split(self, v: np.ndarray) -> np.ndarray:
        """View ``(..., C*D)`` as ``(..., C, D)``."""
        v = np.asarray(v)
        if v.shape[-1] != self.n:
            raise DimensionError(f"latent length {v.shape[-1]} != C*D = {self.n}")
        return v.reshape(v.shape[:-1] + (self.n_capsules, self.capsule_dim))


@dataclass(frozen=True)
class TopographyConfig:
    layout: CapsuleLayout
    variant: str = "shifting"
    L: int = 0
    K: int = 1
    boundary: str = "cyclic"
    causal: bool = False
    nu: int = 1
    mu_init: float = 30.0
    epsilon: float = 1e-6
    torus_dims: Tuple[int, int] = (16, 16)

    def __post_init__(self):
        D = self.layout.capsule_dim
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.boundary not in BOUNDARIES:
            raise ConfigurationError(f"boundary must be one of {BOUNDARIES}, got {self.boundary!r}")
        if self.L < 0:
            raise ConfigurationError("L must be nonnegative")
        if self.K < 1:
            raise ConfigurationError("K must be positive")
        if self.nu < 1:
            raise ConfigurationError("nu must be positive")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be nonnegative")
        if self.variant == "none" and self.L != 0:
            raise ConfigurationError("variant 'none' requires L = 0")
        if self.variant == "torus2d":
            H, W = self.torus_dims
            if self.layout.n_capsules != 1 or H * W != D:
                raise ConfigurationError(
                    f"torus2d needs a single capsule with H*W = D, got C={self.layout.n_capsules}, "
                    f"D={D}, torus_dims={self.torus_dims}"
                )
            if self.L != 0:
                raise ConfigurationError("torus2d supports L = 0 only")
            if self.K > min(H, W):
                raise ConfigurationError("torus2d kernel exceeds grid")
            if self.boundary != "cyclic":
                raise ConfigurationError("torus2d is always cyclic")
        elif self.K > D:
            raise ConfigurationError(f"K={self.K} exceeds capsule_dim D={D}")

    @property
    def window(self) -> int:
        """Number of timesteps feeding one ``t_l``."""
        return self.L + 1 if self.causal else 2 * self.L + 1

    @property
    def deltas(self) -> np.ndarray:
        return np.arange(-self.L, 1 if self.causal else self.L + 1)

    @property
    def pad(self) -> int:
        return self.L if self.boundary == "linear-padded" else 0

    @property
    def u_capsule_dim(self) -> int:
        return self.layout.capsule_dim + 2 * self.pad

    @property
    def n_u(self) -> int:
        """Units of ``u`` per timestep (larger than ``n`` for padded capsules)."""
        return self.layout.n_capsules * self.u_capsule_dim

    @property
    def uses_u(self) -> bool:
        return self.variant != "none"

    def with_(self, **kw) -> "TopographyConfig":
        return replace(self, **kw)


def roll_capsules(v: np.ndarray, layout: CapsuleLayout, delta: int) -> np.ndarray:
    caps = layout.split(v)
    return np.roll(caps, int(delta), axis=-1).reshape(np.shape(v))


def partial_roll(v: np.ndarray, layout: CapsuleLayout, alpha: float) -> np.ndarray:
    """Linear interpolation between the identity and ``Roll_1``."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1], got {alpha}")
    caps = layout.split(v)
    out = alpha * np.roll(caps, 1, axis=-1) + (1.0 - alpha) * caps
    return out.reshape(np.shape(v))


def _shift_zero(a: np.ndarray, k: int) -> np.ndarray:
    """Non-cyclic version of ``np.roll(a, k, axis=-1)`` filling vacated slots with 0."""
    if k == 0:
        return a
    out = np.zeros_like(a)
    if abs(k) >= a.shape[-1]:
        return out
    if k > 0:
        out[..., k:] = a[..., :-k]
    else:
        out[..., :k] = a[..., -k:]
    return out


def _box_offsets(K: int) -> range:
    # centred for odd K; for even K the extra tap sits on the positive side
    return range(-(K // 2), K - K // 2)


def neighborhood_sum(u_sq_window: np.ndarray, config: TopographyConfig) -> np.ndarray:
    """Apply ``W`` to a window of squared ``u`` vectors.

    ``u_sq_window`` has shape ``(..., window, n_u)``. Returns ``(..., C*D)``.
    Shifting coherence rolls the slot at offset ``delta`` by ``-delta`` so the
    sum lines up when consecutive frames satisfy ``u_{l+1} = Roll_1(u_l)``.
    """
    u = np.asarray(u_sq_window, dtype=float)
    win = config.window if config.variant != "none" else 1
    if u.ndim < 2 or u.shape[-2] != win or u.shape[-1] != config.n_u:
        raise DimensionError(
            f"expected window of shape (..., {win}, {config.n_u}), got {u.shape}"
        )
    if np.any(u < 0):
        raise DomainError("squared u window has negative entries")

    lay = config.layout
    if config.variant == "torus2d":
        H, W = config.torus_dims
        grid = u[..., 0, :].reshape(u.shape[:-2] + (H, W))
        acc = np.zeros_like(grid)
        for dy in _box_offsets(config.K):
            for dx in _box_offsets(config.K):
                acc += np.roll(grid, (-dy, -dx), axis=(-2, -1))
        return acc.reshape(u.shape[:-2] + (H * W,))

    P = config.u_capsule_dim
    caps = u.reshape(u.shape[:-1] + (lay.n_capsules, P))
    cyclic = config.boundary == "cyclic"
    shift = (lambda a, k: np.roll(a, k, axis=-1)) if cyclic else _shift_zero

    acc = np.zeros(caps.shape[:-3] + caps.shape[-2:])
    deltas = config.deltas if config.variant != "none" else [0]
    for w, delta in enumerate(deltas):
        slot = caps[..., w, :, :]
        acc += shift(slot, -int(delta)) if config.variant == "shifting" else slot
    out = np.zeros_like(acc)
    for o in _box_offsets(config.K):
        out += shift(acc, -o)
    if not cyclic:
        out = out[..., config.pad : config.pad + lay.capsule_dim]
    return out.reshape(out.shape[:-2] + (lay.n,))


@lru_cache(maxsize=32)
def neighborhood_operator(config: TopographyConfig) -> np.ndarray:
    """Dense matrix form of :func:`neighborhood_sum`.

    Returns ``M`` of shape ``(window * n_u, n)`` with
    ``neighborhood_sum(x) == x.reshape(..., window*n_u) @ M``. Built by probing
    the direct implementation with basis vectors, which is exact since the map
    is linear.
    """
    win = config.window if config.variant != "none" else 1
    n_u = config.n_u
    blocks = []
    for w in range(win):
        probes = np.zeros((n_u, win, n_u))
        probes[:, w, :] = np.eye(n_u)
        blocks.append(neighborhood_sum(probes, config))
    M = np.concatenate(blocks, axis=0)
    M.setflags(write=False)
    return M


def construct_t(
    z: np.ndarray, u_window: np.ndarray, mu: float, config: TopographyConfig
) -> np.ndarray:
    """``t = (z - mu) / sqrt(W u^2 + epsilon)``; the identity on ``z`` for variant 'none'."""
    z = np.asarray(z, dtype=float)
    if config.variant == "none":
        return z.copy()
    if z.shape[-1] != config.layout.n:
        raise DimensionError(f"z has {z.shape[-1]} units, layout needs {config.layout.n}")
    A = neighborhood_sum(np.square(u_window), config)
    if A.shape != z.shape:
        raise DimensionError(f"z shape {z.shape} does not match window batch shape {A.shape}")
    return (z - mu) / np.sqrt(A + config.epsilon)


def construct_t_backward(z, u_window, mu, config: TopographyConfig, grad_t):
    """Gradients of ``sum(grad_t * construct_t(...))`` w.r.t. ``z``, ``u_window`` and ``mu``."""
    z = np.asarray(z, dtype=float)
    u_window = np.asarray(u_window, dtype=float)
    if config.variant == "none":
        return np.array(grad_t, dtype=float), np.zeros_like(u_window), 0.0
    M = neighborhood_operator(config)
    flat = np.square(u_window).reshape(u_window.shape[:-2] + (-1,))
    A = flat @ M + config.epsilon
    s = np.sqrt(A)
    t = (z - mu) / s
    gz = grad_t / s
    gmu = -float(np.sum(gz))
    gA = -0.5 * grad_t * t / A
    gu_sq = (gA @ M.T).reshape(u_window.shape)
    return gz, 2.0 * u_window * gu_sq, gmu


def neighbor_counts(config: TopographyConfig) -> np.ndarray:
    """How many distinct ``u`` slots feed each ``t`` unit, and the largest multiplicity."""
    M = neighborhood_operator(config)
    return (M > 0).sum(axis=0), M.max(axis=0)


def sample_tpot(
    config: TopographyConfig,
    n_samples: int,
    seed: int,
    classic_scaling: bool = True,
) -> np.ndarray:
    """Draw ``n_samples`` TPoT vectors from independent standard-normal ``Z`` and ``U``.

    With ``classic_scaling`` each unit is ``Z / sqrt(W U^2 / nu)``, whose
    marginal is Student-t(nu) when every unit pools exactly ``nu`` distinct U
    slots. Otherwise the model parameterisation with ``mu = mu_init`` is used.
    """
    if n_samples < 0:
        raise ConfigurationError("n_samples must be nonnegative")
    if config.variant == "none":
        raise ConfigurationError("variant 'none' has no topographic prior")
    if classic_scaling:
        counts, mult = neighbor_counts(config)
        if np.any(counts != config.nu) or np.any(mult != 1):
            raise ConfigurationError(
                f"classic scaling needs exactly nu={config.nu} distinct U per unit; "
                f"config pools {sorted(set(counts.tolist()))}"
            )
    rng = np.random.default_rng(seed)
    M = neighborhood_operator(config)
    n, n_in = config.layout.n, M.shape[0]
    out = np.empty((n_samples, n))
    chunk = max(1, 2_000_000 // max(n_in, 1))
    for start in range(0, n_samples, chunk):
        m = min(chunk, n_samples - start)
        z = rng.standard_normal((m, n))
        u = rng.standard_normal((m, n_in))
        A = np.square(u) @ M
        if classic_scaling:
            out[start : start + m] = z / np.sqrt(A / config.nu)
        else:
            out[start : start + m] = (z - config.mu_init) / np.sqrt(A + config.epsilon)
    return out
