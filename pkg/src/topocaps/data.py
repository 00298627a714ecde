"""Datasets of cyclic transformation sequences.

Three sources are supported: MNIST read from IDX files (rotation / hue /
scale sequences), a procedural sprites grid standing in for dSprites, and a
small toy set of 16x16 sprites used for desk-scale experiments.
"""

from __future__ import annotations

import colorsys
import gzip
import os
import struct
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, FormatError, UsageError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

MNIST_KINDS = ("rotation", "hue", "scale")
SPRITE_KINDS = ("x", "y", "orientation", "scale")
TOY_KINDS = ("shift", "rotation")
SHAPES = ("square", "ellipse", "heart")

SPRITE_GRID = (3, 5, 15, 15, 15)  # shape, scale, orientation, x, y
SPRITE_SCALES = (0.6, 0.7, 0.8, 0.9, 1.0)


# --- IDX ---------------------------------------------------------------------------------


def load_idx(payload: bytes) -> np.ndarray:
    """Parse an IDX payload (optionally gzip-compressed).

    Image files come back as float64 in [0, 1], label files as uint8.
    """
    if payload[:2] == b"\x1f\x8b":
        payload = gzip.decompress(payload)
    if len(payload) < 8:
        raise FormatError("IDX payload shorter than its header")
    (magic,) = struct.unpack(">I", payload[:4])
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise FormatError(f"unsupported IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(payload) < header:
        raise FormatError("IDX header truncated")
    dims = struct.unpack(">" + "I" * ndim, payload[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(payload) != expected:
        raise FormatError(f"IDX payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=np.uint8, offset=header).reshape(dims)
    if magic == IDX_IMAGES:
        return data.astype(np.float64) / 255.0
    return data.copy()


def load_idx_file(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return load_idx(f.read())


def find_mnist(root: Optional[str] = None, split: str = "train") -> Tuple[str, str]:
    root = root or os.environ.get("TOPOCAPS_DATA_DIR", "data")
    stem = "train" if split == "train" else "t10k"
    found = []
    for base in (f"{stem}-images-idx3-ubyte", f"{stem}-labels-idx1-ubyte"):
        for cand in (base, base + ".gz", base.replace("-idx", ".idx")):
            p = os.path.join(root, cand)
            if os.path.exists(p):
                found.append(p)
                break
        else:
            raise FileNotFoundError(f"no {base}[.gz] under {root}")
    return found[0], found[1]


# --- image transforms ---------------------------------------------------------------------


def _center_affine(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Resample ``img`` so output pixel ``o`` reads input ``c + matrix @ (o - c)``; bilinear, zero fill."""
    c = (np.array(img.shape[:2]) - 1) / 2.0
    offset = c - matrix @ c
    return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="constant", cval=0.0)


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Counter-clockwise rotation about the image centre (rows point down)."""
    th = np.deg2rad(degrees)
    # output (r, c) samples input rotated back by -th
    m = np.array([[np.cos(th), np.sin(th)], [-np.sin(th), np.cos(th)]])
    return _center_affine(img, m)


def zoom(img: np.ndarray, factor: float) -> np.ndarray:
    return _center_affine(img, np.eye(2) / factor)


def keystone(img: np.ndarray, amount: float) -> np.ndarray:
    """Horizontal keystone: rows are squeezed or stretched linearly with height."""
    H, W = img.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    rr, cc = np.mgrid[0:H, 0:W].astype(float)
    width_scale = 1.0 + amount * (rr - cy) / max(cy, 1.0)
    src_c = cx + (cc - cx) / width_scale
    return ndimage.map_coordinates(img, [rr, src_c], order=1, mode="constant", cval=0.0)


def colorize(gray: np.ndarray, hue_degrees: Optional[float]) -> np.ndarray:
    """HSV colouring with full saturation and value = intensity; ``None`` gives grey RGB."""
    if hue_degrees is None:
        rgb = np.ones(3)
    else:
        rgb = np.array(colorsys.hsv_to_rgb((hue_degrees / 360.0) % 1.0, 1.0, 1.0))
    return gray[..., None] * rgb


def _scale_factor(step: int) -> float:
    return 0.60 + 0.0366 * step


def transform_frame(img: np.ndarray, kind: str, step: int, S: int = 18) -> np.ndarray:
    """One MNIST-style frame: grey ``img`` transformed ``step`` increments, returned as RGB.

    ``kind`` is rotation, hue, scale, perspective, or two of them joined with
    '+' (e.g. ``'hue+rotation'``) sharing the same step.
    """
    if not 0 <= step < S:
        raise UsageError(f"step {step} outside [0, {S})")
    parts = kind.split("+")
    out = np.asarray(img, dtype=float)
    hue = None
    for part in parts:
        if part == "rotation":
            out = rotate(out, 20.0 * step)
        elif part == "scale":
            out = zoom(out, _scale_factor(step))
        elif part == "perspective":
            out = keystone(out, 0.5 * np.sin(2 * np.pi * step / S))
        elif part == "hue":
            hue = 20.0 * step
        else:
            raise ConfigurationError(f"unknown transform kind {part!r}")
    return np.clip(colorize(out, hue), 0.0, 1.0)


def make_cyclic_sequence(img, kind: str, S: int, random_start: int, frame_fn=None):
    """Frames ``frame_fn(img, kind, (start + j) % S, S)`` for ``j < S`` and their factor trace."""
    frame_fn = frame_fn or transform_frame
    y = (int(random_start) + np.arange(S)) % S
    frames = np.stack([frame_fn(img, kind, int(k), S) for k in y])
    return frames, y


def toy_frame(img: np.ndarray, kind: str, step: int, S: int) -> np.ndarray:
    """Toy transforms: wrap-around horizontal shift by ``W/S`` px per step, or rotation by 360/S."""
    if not 0 <= step < S:
        raise UsageError(f"step {step} outside [0, {S})")
    if kind == "shift":
        W = img.shape[1]
        if W % S:
            raise ConfigurationError(f"shift transform needs width {W} divisible by S={S}")
        return np.roll(img, step * (W // S), axis=1)
    if kind == "rotation":
        return np.clip(rotate(img, 360.0 * step / S), 0.0, 1.0)
    raise ConfigurationError(f"unknown toy transform {kind!r}")


# --- sprites ------------------------------------------------------------------------------


@dataclass(frozen=True)
class SpriteSpec:
    shape: str
    scale: int
    orientation: int
    x: int
    y: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigurationError(f"shape must be one of {SHAPES}")
        for name, hi in (("scale", 5), ("x", 15), ("y", 15)):
            v = getattr(self, name)
            if not 0 <= v < hi:
                raise ConfigurationError(f"{name} index {v} outside [0, {hi})")

    @classmethod
    def from_index(cls, i: int) -> "SpriteSpec":
        s, sc, o, x, y = np.unravel_index(i, SPRITE_GRID)
        return cls(SHAPES[s], int(sc), int(o), int(x), int(y))


def _inside(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u, v in units of the sprite radius; v points up
    if shape == "square":
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    if shape == "ellipse":
        return (u / 1.0) ** 2 + (v / 0.5) ** 2 <= 1.0
    hu, hv = u * 1.25, v * 1.25 + 0.15
    return (hu * hu + hv * hv - 1.0) ** 3 - hu * hu * hv**3 <= 0.0


def sprites_render(spec: SpriteSpec, resolution: int = 64, supersample: int = 4) -> np.ndarray:
    """Anti-aliased filled sprite; pixel values are coverage fractions in [0, 1]."""
    px = resolution / 64.0  # grid index 7 sits on the image centre
    cx = (14.5 + 2.5 * spec.x) * px - 0.5
    cy = (14.5 + 2.5 * spec.y) * px - 0.5
    radius = 9.0 * px * SPRITE_SCALES[spec.scale]
    theta = 2 * np.pi * (spec.orientation % 15) / 15.0
    n = resolution * supersample
    coords = (np.arange(n) + 0.5) / supersample - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = (xx - cx) / radius, (cy - yy) / radius
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    mask = _inside(spec.shape, u, v).astype(float)
    return mask.reshape(resolution, supersample, resolution, supersample).mean(axis=(1, 3))


def sprites_sequence(spec: SpriteSpec, kind: str, S: int = 15, random_start: int = 0, resolution: int = 64):
    """Vary one factor of ``spec`` cyclically; scale sequences loop the 5 scales S/5 times."""
    if kind not in SPRITE_KINDS:
        raise ConfigurationError(f"sprite kind must be one of {SPRITE_KINDS}")
    y = (int(random_start) + np.arange(S)) % S
    frames = []
    for k in y:
        if kind == "scale":
            s = SpriteSpec(spec.shape, int(k) % 5, spec.orientation, spec.x, spec.y)
        else:
            s = SpriteSpec(**{**spec.__dict__, kind: int(k) % 15})
        frames.append(sprites_render(s, resolution))
    return np.stack(frames), y


def canonical_steps(kind: str, S: int) -> np.ndarray:
    """Factor-trace values that count as the canonical pose for ``kind``."""
    if kind == "scale" and S == 15:
        return np.arange(0, S, 5)
    return np.array([0])


# --- datasets ----------------------------------------------------------------------------


@dataclass
class SequenceBatch:
    frames: np.ndarray  # (B, S, N) in [0, 1]
    kinds: List[str]
    y: np.ndarray  # (B, S) ground-truth transform index

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class DatasetSpec:
    source: str = "toy"  # toy | sprites | mnist
    n_base: int = 500
    seq_len: int = 8
    kinds: Tuple[str, ...] = ("shift",)
    resolution: int = 16
    seed: int = 0
    split: str = "train"
    data_dir: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("toy", "sprites", "mnist"):
            raise ConfigurationError(f"data source must be toy, sprites or mnist, got {self.source!r}")
        allowed = {"toy": TOY_KINDS, "sprites": SPRITE_KINDS}.get(self.source)
        for k in self.kinds:
            if allowed is not None and k not in allowed:
                raise ConfigurationError(f"transform {k!r} not available for {self.source}")
            if allowed is None:
                for part in k.split("+"):
                    if part not in MNIST_KINDS + ("perspective",):
                        raise ConfigurationError(f"transform {k!r} not available for mnist")
        if self.n_base < 1 or self.seq_len < 1:
            raise ConfigurationError("n_base and seq_len must be positive")


def random_toy_images(n: int, resolution: int, seed: int) -> np.ndarray:
    """``n`` distinct random sprites rendered at ``resolution``."""
    rng = np.random.default_rng(seed)
    total = int(np.prod(SPRITE_GRID))
    idx = rng.choice(total, size=n, replace=n > total)
    return np.stack([sprites_render(SpriteSpec.from_index(int(i)), resolution) for i in idx])


class SequenceDataset:
    """Base items plus a frame function; sequences are generated per epoch."""

    def __init__(self, spec: DatasetSpec, base=None):
        self.spec = spec
        if base is None:
            base = self._load_base(spec)
        self.base = base
        self._cache = {}
        self._cacheable = spec.source != "sprites" and (
            len(base) * len(spec.kinds) * spec.seq_len * self.frame_size < 5e7
        )

    @staticmethod
    def _load_base(spec: DatasetSpec):
        if spec.source == "toy":
            return random_toy_images(spec.n_base, spec.resolution, spec.seed)
        if spec.source == "sprites":
            rng = np.random.default_rng(spec.seed)
            total = int(np.prod(SPRITE_GRID))
            idx = rng.choice(total, size=min(spec.n_base, total), replace=False)
            return [SpriteSpec.from_index(int(i)) for i in idx]
        img_path, _ = find_mnist(spec.data_dir, spec.split)
        return load_idx_file(img_path)[: spec.n_base]

    def __len__(self):
        return len(self.base)

    @property
    def frame_size(self) -> int:
        if self.spec.source == "mnist":
            return 28 * 28 * 3
        if self.spec.source == "sprites":
            return 64 * 64
        return self.spec.resolution**2

    def full_sequence(self, i: int, kind: str) -> np.ndarray:
        """All S frames of item ``i`` starting from step 0, flattened to (S, N)."""
        key = (i, kind)
        if key in self._cache:
            return self._cache[key]
        S = self.spec.seq_len
        item = self.base[i]
        if self.spec.source == "sprites":
            frames, _ = sprites_sequence(item, kind, S, 0)
        elif self.spec.source == "mnist":
            frames, _ = make_cyclic_sequence(item, kind, S, 0)
        else:
            frames, _ = make_cyclic_sequence(item, kind, S, 0, frame_fn=toy_frame)
        frames = frames.reshape(S, -1)
        if self._cacheable:
            self._cache[key] = frames
        return frames

    def sequence(self, i: int, kind: str, start: int):
        S = self.spec.seq_len
        y = (start + np.arange(S)) % S
        return self.full_sequence(i, kind)[y], y

    def batches(self, batch_size: int, seed: int, epoch: int = 0) -> Iterator[SequenceBatch]:
        """One epoch: every base item once in shuffled order; incomplete tail dropped."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 104729]))
        order = rng.permutation(len(self.base))
        kinds = rng.integers(len(self.spec.kinds), size=len(order))
        starts = rng.integers(self.spec.seq_len, size=len(order))
        for b in range(len(order) // batch_size):
            sl = slice(b * batch_size, (b + 1) * batch_size)
            seqs, ys, ks = [], [], []
            for i, k, s in zip(order[sl], kinds[sl], starts[sl]):
                f, y = self.sequence(int(i), self.spec.kinds[k], int(s))
                seqs.append(f)
                ys.append(y)
                ks.append(self.spec.kinds[k])
            yield SequenceBatch(np.stack(seqs), ks, np.stack(ys))

    def all_sequences(self, seed: int) -> SequenceBatch:
        """Every base item as one sequence with random start and kind (for evaluation)."""
        return next(self.batches(len(self.base), seed, 0))


def batch_iterator(dataset, batch_size: int, seed: int, epochs: Optional[int] = None) -> Iterator[SequenceBatch]:
    """Stream of batches over successive reshuffled epochs (endless if ``epochs`` is None)."""
    if isinstance(dataset, DatasetSpec):
        dataset = SequenceDataset(dataset)
    epoch = 0
    while epochs is None or epoch < epochs:
        yield from dataset.batches(batch_size, seed, epoch)
        epoch += 1
