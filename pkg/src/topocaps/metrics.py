"""Equivariance error, observed capsule roll and CapCorr."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError, UndefinedCorrelationError
from .topography import CapsuleLayout, partial_roll


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise DimensionError("pearson needs two equal-length 1-d inputs with >= 2 entries")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def _normalize(t: np.ndarray, layout: CapsuleLayout, per_capsule: bool) -> np.ndarray:
    if per_capsule:
        caps = layout.split(t)
        norms = np.linalg.norm(caps, axis=-1, keepdims=True)
        if np.any(norms == 0):
            raise DegenerateInputError("zero-norm capsule")
        return (caps / norms).reshape(t.shape)
    norms = np.linalg.norm(t, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("zero-norm latent vector")
    return t / norms


def equivariance_error(t_seq: np.ndarray, layout: CapsuleLayout, per_capsule: bool = False) -> float:
    """Sum over ``l < m`` of ``|| Roll_{m-l}(t_l/|t_l|) - t_m/|t_m| ||_1``."""
    t = np.asarray(t_seq, dtype=float)
    if t.ndim != 2 or t.shape[0] < 2:
        raise DimensionError("equivariance_error needs an (S >= 2, C*D) sequence")
    th = layout.split(_normalize(t, layout, per_capsule))  # (S, C, D)
    S = th.shape[0]
    total = 0.0
    for delta in range(1, S):
        rolled = np.roll(th[: S - delta], delta, axis=-1)
        total += float(np.abs(rolled - th[delta:]).sum())
    return total


def capsule_rolls(t_a: np.ndarray, t_b: np.ndarray, layout: CapsuleLayout) -> np.ndarray:
    """Per-capsule ``argmax_k <a_c, Roll_k(b_c)>`` (smallest ``k`` on ties)."""
    a = layout.split(np.asarray(t_a, dtype=float))
    b = layout.split(np.asarray(t_b, dtype=float))
    if a.shape != b.shape:
        raise DimensionError("latent shapes differ")
    D = layout.capsule_dim
    # scores[..., c, k] = sum_i a[i] * b[(i - k) mod D]
    scores = np.stack([np.sum(a * np.roll(b, k, axis=-1), axis=-1) for k in range(D)], axis=-1)
    return np.argmax(scores, axis=-1)


def _mode(values: np.ndarray, D: int) -> int:
    return int(np.argmax(np.bincount(values, minlength=D)))


def observed_roll(t_a: np.ndarray, t_b: np.ndarray, layout: CapsuleLayout) -> int:
    """Shift ``k`` for which ``Roll_k(t_b)`` best matches ``t_a``: mode over capsules."""
    return _mode(capsule_rolls(t_a, t_b, layout).ravel(), layout.capsule_dim)


def observed_partial_roll(t_a, t_b, layout: CapsuleLayout, alpha: float) -> float:
    """Like :func:`observed_roll` but searching shifts ``0, alpha, 2 alpha, ..., D - alpha``.

    Partial rolls smooth and shrink vectors, so candidates are scored by
    per-capsule cosine similarity rather than the raw inner product.
    """
    n_steps = int(round(layout.capsule_dim / alpha))
    a = layout.split(np.asarray(t_a, dtype=float))
    a_norm = np.linalg.norm(a, axis=-1)
    cur = np.asarray(t_b, dtype=float)
    scores = []
    for _ in range(n_steps):
        c = layout.split(cur)
        denom = np.maximum(a_norm * np.linalg.norm(c, axis=-1), 1e-300)
        scores.append(np.sum(a * c, axis=-1) / denom)
        cur = partial_roll(cur, layout, alpha)
    best = np.argmax(np.stack(scores, axis=-1), axis=-1).ravel()
    return _mode(best, n_steps) * alpha


def capcorr(latent_pairs, factor_pairs, layout: CapsuleLayout) -> float:
    """Pearson correlation of observed capsule roll with ``|y_omega - y_0|`` over a dataset.

    ``latent_pairs`` holds ``(t_omega, t_0)``; the roll measured is the one
    taking ``t_omega`` back to ``t_0``, i.e. ``observed_roll(t_0, t_omega)``.
    """
    if len(latent_pairs) != len(factor_pairs) or len(latent_pairs) < 2:
        raise DimensionError("capcorr needs >= 2 aligned latent/factor pairs")
    rolls = [observed_roll(t0, tw, layout) for tw, t0 in latent_pairs]
    shifts = [abs(yw - y0) for yw, y0 in factor_pairs]
    return pearson(rolls, shifts)


def select_omega(t_seq, y_seq, layout: CapsuleLayout, canonical: Sequence[int]) -> int:
    """Timestep with canonical factor value; ties resolved by closest roll/shift agreement."""
    y_seq = np.asarray(y_seq)
    cands = [int(l) for l in np.flatnonzero(np.isin(y_seq, canonical))]
    if not cands:
        raise DegenerateInputError("sequence never visits a canonical factor value")
    if len(cands) == 1:
        return cands[0]
    gaps = [
        abs(abs(int(y_seq[l]) - int(y_seq[0])) - observed_roll(t_seq[0], t_seq[l], layout))
        for l in cands
    ]
    return cands[int(np.argmin(gaps))]


def capcorr_sequences(t_seqs, y_seqs, layout: CapsuleLayout, canonical: Sequence[int] = (0,)) -> float:
    pairs, factors = [], []
    for t, y in zip(t_seqs, y_seqs):
        om = select_omega(t, y, layout, canonical)
        pairs.append((t[om], t[0]))
        factors.append((int(y[om]), int(y[0])))
    return capcorr(pairs, factors, layout)


@dataclass
class MetricsReport:
    eq_error: float
    capcorr: Dict[str, float]
    n_sequences: int
    aggregation: str = "mean-per-sequence"
    extras: Dict[str, float] = field(default_factory=dict)


def evaluate_latents(
    t_seqs: np.ndarray,
    y_seqs: np.ndarray,
    kinds: Sequence[str],
    layout: CapsuleLayout,
    canonical_fn: Optional[Callable[[str, int], Sequence[int]]] = None,
    per_capsule: bool = False,
) -> MetricsReport:
    """E_eq averaged over sequences and CapCorr for each transform kind present."""
    t_seqs = np.asarray(t_seqs, dtype=float)
    S = t_seqs.shape[1]
    errs = [equivariance_error(t, layout, per_capsule) for t in t_seqs]
    kinds = list(kinds)
    cc = {}
    for kind in sorted(set(kinds)):
        sel = [i for i, k in enumerate(kinds) if k == kind]
        canonical = canonical_fn(kind, S) if canonical_fn else (0,)
        try:
            cc[kind] = capcorr_sequences(t_seqs[sel], np.asarray(y_seqs)[sel], layout, canonical)
        except (UndefinedCorrelationError, DimensionError):
            cc[kind] = float("nan")
    return MetricsReport(float(np.mean(errs)), cc, len(t_seqs))


def write_metrics_csv(path: str, rows: List[dict]) -> None:
    """Write rows with a header; the column set is the union of the row keys."""
    fixed = ["variant", "L", "K", "eq_error"]
    extra_cc = sorted({k for r in rows for k in r if k.startswith("capcorr_")})
    tail = ["n_sequences", "seed"]
    others = sorted({k for r in rows for k in r} - set(fixed) - set(extra_cc) - set(tail))
    cols = fixed + extra_cc + others + tail
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in cols})
