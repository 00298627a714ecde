"""Gaussian posteriors, likelihoods, the sequence ELBO and importance-sampled log p(x).

The ELBO routines take a :class:`topocaps.model.TvaeModel` and evaluate a batch
of cyclic sequences ``x`` of shape ``(B, S, N)``. Gradients are computed by
hand through the decoder, the TPoT construction and both encoders.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Union

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError
from .nn import mlp_backward, mlp_forward
from .topography import neighborhood_operator

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class DiagonalGaussian:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.log_std):
            raise DimensionError(f"mean {np.shape(self.mean)} vs log_std {np.shape(self.log_std)}")

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        """Log density summed over the last axis."""
        return log_normal(x, self.mean, self.log_std)

    @classmethod
    def from_encoder_output(cls, h: np.ndarray) -> "DiagonalGaussian":
        half = h.shape[-1] // 2
        return cls(h[..., :half], h[..., half:])


def log_normal(x, mean=0.0, log_std=0.0) -> np.ndarray:
    x, mean, log_std = np.broadcast_arrays(np.asarray(x, float), mean, log_std)
    r = (x - mean) * np.exp(-log_std)
    return np.sum(-0.5 * r * r - log_std - 0.5 * LOG_2PI, axis=-1)


def reparam_sample(g: DiagonalGaussian, noise: np.ndarray) -> np.ndarray:
    noise = np.asarray(noise, dtype=float)
    if noise.shape != np.shape(g.mean):
        raise DimensionError(f"noise shape {noise.shape} != posterior shape {np.shape(g.mean)}")
    return g.mean + np.exp(g.log_std) * noise


def kl_std_normal(g: DiagonalGaussian) -> np.ndarray:
    """KL(q || N(0, I)) summed over the last axis."""
    m, ls = np.asarray(g.mean, float), np.asarray(g.log_std, float)
    return np.sum(0.5 * (m * m + np.exp(2.0 * ls) - 2.0 * ls - 1.0), axis=-1)


def bernoulli_nll(x: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Binary cross-entropy with logits, summed over the last axis.

    Uses ``max(a, 0) - a*x + log1p(exp(-|a|))`` so large logits never overflow.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(x > 1):
        raise DomainError("Bernoulli targets must lie in [0, 1]")
    a = np.asarray(logits, dtype=float)
    return np.sum(np.maximum(a, 0.0) - a * x + np.log1p(np.exp(-np.abs(a))), axis=-1)


def bernoulli_nll_grad(x: np.ndarray, logits: np.ndarray) -> np.ndarray:
    return sigmoid(logits) - x


def gaussian_nll(x: np.ndarray, mean: np.ndarray, std: float) -> np.ndarray:
    return -log_normal(x, mean, np.log(std))


def sigmoid(a):
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logmeanexp(a: np.ndarray, axis: int = 0) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.mean(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


class Noise(NamedTuple):
    """Standard-normal draws for one pass: ``z`` is (B, S, n), ``u`` is (B, S, n_u) or None."""

    z: np.ndarray
    u: Optional[np.ndarray]


NoiseSource = Union[np.random.Generator, Noise, None]


def draw_noise(model, B: int, S: int, source: NoiseSource) -> Noise:
    topo = model.topo
    if isinstance(source, Noise):
        if source.z.shape != (B, S, topo.layout.n):
            raise DimensionError(f"z noise shape {source.z.shape} != {(B, S, topo.layout.n)}")
        if topo.uses_u and (source.u is None or source.u.shape != (B, S, topo.n_u)):
            raise DimensionError("u noise missing or misshapen")
        return source
    if source is None:  # deterministic: posterior means
        return Noise(
            np.zeros((B, S, topo.layout.n)),
            np.zeros((B, S, topo.n_u)) if topo.uses_u else None,
        )
    z = source.standard_normal((B, S, topo.layout.n))
    u = source.standard_normal((B, S, topo.n_u)) if topo.uses_u else None
    return Noise(z, u)


def window_indices(S: int, topo) -> np.ndarray:
    """``idx[l, w]`` is the frame feeding window slot ``w`` of ``t_l``.

    Cyclic sequences wrap modulo ``S``; padded (non-cyclic) capsules replicate
    the first and last frames instead.
    """
    if topo.variant == "none":
        return np.arange(S)[:, None]
    if 2 * topo.L > S:
        raise ConfigurationError(f"window exceeds sequence: L={topo.L} > S/2 with S={S}")
    idx = np.arange(S)[:, None] + topo.deltas[None, :]
    if topo.boundary == "linear-padded":
        return np.clip(idx, 0, S - 1)
    return np.mod(idx, S)


def _as_batch(x: np.ndarray, n_in: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != n_in:
        raise DimensionError(f"expected (B, S, {n_in}) sequences, got {x.shape}")
    return x


@dataclass
class ForwardPass:
    x: np.ndarray
    qz: DiagonalGaussian
    qu: Optional[DiagonalGaussian]
    noise: Noise
    z: np.ndarray
    u: Optional[np.ndarray]
    idx: np.ndarray
    A: Optional[np.ndarray]
    t: np.ndarray
    out: np.ndarray
    caches: dict


def forward(model, x: np.ndarray, noise: NoiseSource) -> ForwardPass:
    """Encode, sample, build ``t`` for every frame, and decode."""
    x = _as_batch(x, model.n_in)
    B, S, N = x.shape
    topo = model.topo
    idx = window_indices(S, topo)
    noise = draw_noise(model, B, S, noise)
    flat = x.reshape(B * S, N)
    hz, cz = mlp_forward(model.encoder_z, flat)
    qz = DiagonalGaussian.from_encoder_output(hz.reshape(B, S, -1))
    z = reparam_sample(qz, noise.z)
    caches = {"z": cz}
    if topo.uses_u:
        hu, cu = mlp_forward(model.encoder_u, flat)
        caches["u"] = cu
        qu = DiagonalGaussian.from_encoder_output(hu.reshape(B, S, -1))
        u = reparam_sample(qu, noise.u)
        M = neighborhood_operator(topo)
        uw = u[:, idx, :].reshape(B, S, -1)
        A = np.square(uw) @ M + topo.epsilon
        t = (z - model.mu_value) / np.sqrt(A)
    else:
        qu, u, A = None, None, None
        t = z
    out, cd = mlp_forward(model.decoder, t.reshape(B * S, -1))
    caches["dec"] = cd
    return ForwardPass(x, qz, qu, noise, z, u, idx, A, t, out.reshape(B, S, N), caches)


def frame_log_lik(model, x: np.ndarray, out: np.ndarray) -> np.ndarray:
    if model.likelihood == "bernoulli":
        return -bernoulli_nll(x, out)
    return -gaussian_nll(x, out, model.obs_std)


def _frame_log_lik_grad(model, x, out):
    if model.likelihood == "bernoulli":
        return x - sigmoid(out)
    return (x - out) / model.obs_std**2


@dataclass
class ElboResult:
    elbo: np.ndarray  # per sequence, shape (B,)
    recon: np.ndarray  # per sequence negative log-likelihood
    kl_z: np.ndarray
    kl_u: np.ndarray
    grad: Optional[Dict[str, np.ndarray]] = None  # d mean(elbo) / d theta


def elbo_batch(
    model, x: np.ndarray, noise: NoiseSource, with_grad: bool = True, kl_weight: float = 1.0
) -> ElboResult:
    """Single-sample sequence ELBO for every sequence in ``x`` (B, S, N).

    Gradients are those of the batch mean of the per-sequence ELBO. A
    ``kl_weight`` below 1 scales the KL terms in the gradient only (warm-up);
    the returned values are always the true ELBO.
    """
    fp = forward(model, x, noise)
    B, S, _ = fp.x.shape
    ll = frame_log_lik(model, fp.x, fp.out)  # (B, S)
    kz = kl_std_normal(fp.qz)
    ku = kl_std_normal(fp.qu) if fp.qu is not None else np.zeros((B, S))
    res = ElboResult(
        elbo=(ll - kz - ku).sum(axis=1),
        recon=-ll.sum(axis=1),
        kl_z=kz.sum(axis=1),
        kl_u=ku.sum(axis=1),
    )
    if with_grad:
        res.grad = _elbo_backward(model, fp, kl_weight)
    return res


def _encoder_grad(enc, cache, q: DiagonalGaussian, eps, g_sample, B, kl_weight):
    std = np.exp(q.log_std)
    g_mean = g_sample - kl_weight * q.mean / B
    g_ls = g_sample * std * eps - kl_weight * (std * std - 1.0) / B
    g_h = np.concatenate([g_mean, g_ls], axis=-1)
    gp, _ = mlp_backward(enc, cache, g_h.reshape(-1, g_h.shape[-1]))
    return gp


def _elbo_backward(model, fp: ForwardPass, kl_weight: float = 1.0) -> Dict[str, np.ndarray]:
    B, S, N = fp.x.shape
    topo = model.topo
    g_out = _frame_log_lik_grad(model, fp.x, fp.out) / B
    gdec, g_t = mlp_backward(model.decoder, fp.caches["dec"], g_out.reshape(B * S, N))
    g_t = g_t.reshape(fp.t.shape)
    grads = dict(gdec.named("decoder/"))
    if topo.uses_u:
        s = np.sqrt(fp.A)
        g_z = g_t / s
        grads["mu"] = np.asarray(-np.sum(g_z))
        g_A = -0.5 * g_t * fp.t / fp.A
        M = neighborhood_operator(topo)
        g_uw = (g_A @ M.T).reshape(B, S, fp.idx.shape[1], topo.n_u)
        g_usq = np.zeros((B, S, topo.n_u))
        for w in range(fp.idx.shape[1]):
            np.add.at(g_usq, (slice(None), fp.idx[:, w]), g_uw[:, :, w, :])
        g_u = 2.0 * fp.u * g_usq
        gu = _encoder_grad(model.encoder_u, fp.caches["u"], fp.qu, fp.noise.u, g_u, B, kl_weight)
        grads.update(gu.named("encoder_u/"))
    else:
        g_z = g_t
    gz = _encoder_grad(model.encoder_z, fp.caches["z"], fp.qz, fp.noise.z, g_z, B, kl_weight)
    grads.update(gz.named("encoder_z/"))
    return grads


def elbo_sequence(model, x_seq: np.ndarray, noise: NoiseSource = None, with_grad: bool = True):
    """ELBO of one sequence (S, N) and its parameter gradients."""
    res = elbo_batch(model, np.asarray(x_seq)[None], noise, with_grad)
    return float(res.elbo[0]), res.grad


def importance_log_px(
    model,
    x: np.ndarray,
    n_samples: int = 10,
    noise: NoiseSource = None,
    weighting: str = "sequence",
) -> np.ndarray:
    """Importance-sampled estimate of log p(x) for each sequence, with q as proposal.

    ``weighting='sequence'`` weights whole sequences jointly, which is a
    proper lower bound on log p(x_1..x_S) and reduces to the ELBO at
    ``n_samples=1``. ``weighting='frame'`` applies log-mean-exp per frame
    using the window of u's feeding that frame.
    """
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    if weighting not in ("sequence", "frame"):
        raise ConfigurationError(f"unknown weighting {weighting!r}")
    # an int seeds a fresh generator; None means seed 0 so the estimate is reproducible
    if not isinstance(noise, np.random.Generator):
        noise = np.random.default_rng(0 if noise is None else noise)
    rng = noise
    x = _as_batch(x, model.n_in)
    logw = []
    for _ in range(n_samples):
        fp = forward(model, x, rng)
        ll = frame_log_lik(model, fp.x, fp.out)
        lw = ll + log_normal(fp.z) - fp.qz.log_prob(fp.z)
        if fp.u is not None:
            lu = log_normal(fp.u) - fp.qu.log_prob(fp.u)  # (B, S)
            if weighting == "sequence":
                lw = lw + lu
            else:
                lw = lw + lu[:, fp.idx].sum(axis=-1)
        logw.append(lw.sum(axis=1) if weighting == "sequence" else lw)
    logw = np.stack(logw)
    est = logmeanexp(logw, axis=0)
    return est if weighting == "sequence" else est.sum(axis=1)
