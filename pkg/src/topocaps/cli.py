"""Command-line interface: ``train``, ``eval``, ``traverse`` and ``sample``.

Configuration is an INI file with sections ``model``, ``topo``, ``data``,
``train`` and ``eval``. Every written file is announced on stdout. Exit codes:
0 success, 1 run directory locked, 2 configuration error, 3 data or format error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data import DatasetSpec, SequenceDataset, canonical_steps
from .errors import ConfigurationError, DegenerateInputError, FormatError, TopocapsError
from .metrics import evaluate_latents, write_metrics_csv
from .model import (
    HISTORY_COLUMNS,
    VARIANT_ALIASES,
    TrainConfig,
    TvaeModel,
    build_model,
    decode,
    infer_t_sequence,
    load_model,
    max_activating_images,
    save_model,
    _parse_arch,
    train,
    write_history_csv,
)
from .nn import OptimizerState
from .topography import CapsuleLayout, TopographyConfig, neighborhood_operator, roll_capsules
from .vi import elbo_batch, importance_log_px

log = logging.getLogger("topocaps")

EXIT_OK, EXIT_LOCKED, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


class RunLockedError(TopocapsError):
    pass


# --- configuration -------------------------------------------------------------------------

# section -> key -> (type, default)
SCHEMA: Dict[str, Dict[str, Tuple[type, object]]] = {
    "model": {
        "variant": (str, "tvae"),
        "arch": (str, "toy(256,192,128)"),
        "likelihood": (str, "bernoulli"),
        "obs_std": (float, 1.0),
    },
    "topo": {
        "capsules": (int, 8),
        "capsule_dim": (int, 8),
        "L": (int, 4),
        "K": (int, 1),
        "boundary": (str, "cyclic"),
        "causal": (bool, False),
        "nu": (int, 1),
        "mu_init": (float, 30.0),
        "epsilon": (float, 1e-6),
        "torus_dims": (tuple, (16, 16)),
    },
    "data": {
        "source": (str, "toy"),
        "n_base": (int, 500),
        "seq_len": (int, 8),
        "kinds": (list, ["shift"]),
        "resolution": (int, 16),
        "seed": (int, 0),
        "data_dir": (str, ""),
    },
    "train": {
        "learning_rate": (float, 1e-3),
        "momentum": (float, 0.9),
        "batch_size": (int, 8),
        "epochs": (int, 150),
        "seed": (int, 0),
        "grad_clip": (float, 20.0),
        "kl_warmup_epochs": (float, 30.0),
        "checkpoint_every": (int, 1),
    },
    "eval": {
        "n_base": (int, 200),
        "seed": (int, 1),
        "data_seed": (int, 99),
        "is_samples": (int, 10),
        "batch_size": (int, 8),
        "n_examples": (int, 4),
        "n_samples": (int, 16),
    },
}


def _convert(kind: type, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is list:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if not items:
                raise ValueError(raw)
            return items
        if kind is tuple:
            return tuple(int(s) for s in raw.replace("x", ",").split(","))
        return kind(raw)
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(path: Optional[str]) -> Dict[str, dict]:
    """Read an INI file over the defaults; unknown sections or keys are errors."""
    cfg = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keys are case sensitive (L, K)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} not found") from None
    except configparser.Error as e:
        raise ConfigurationError(f"config file {path}: {e}") from None
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigurationError(f"unknown config section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigurationError(f"{sec}.{key}: unknown key")
            cfg[sec][key] = _convert(SCHEMA[sec][key][0], raw, f"{sec}.{key}")
    return cfg


@dataclass
class RunSpec:
    variant: str
    arch: str
    likelihood: str
    obs_std: float
    topo: TopographyConfig
    data: DatasetSpec
    train: TrainConfig
    checkpoint_every: int


def _wrap(where: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ConfigurationError as e:
        raise ConfigurationError(f"{where}: {e}") from None


def build_run_spec(cfg: Dict[str, dict], seed: Optional[int] = None) -> RunSpec:
    m, t, d, tr = cfg["model"], cfg["topo"], cfg["data"], cfg["train"]
    if m["variant"] not in VARIANT_ALIASES:
        raise ConfigurationError(f"model.variant: unknown variant {m['variant']!r}")
    _wrap("model.arch", _parse_arch, m["arch"])
    layout = _wrap("topo.capsules", CapsuleLayout, t["capsules"], t["capsule_dim"])
    if 2 * t["L"] > d["seq_len"]:
        raise ConfigurationError(
            f"topo.L: window exceeds sequence (2L = {2 * t['L']} > data.seq_len = {d['seq_len']})"
        )
    topo = _wrap(
        "topo",
        TopographyConfig,
        layout,
        L=t["L"],
        K=t["K"],
        boundary=t["boundary"],
        causal=t["causal"],
        nu=t["nu"],
        mu_init=t["mu_init"],
        epsilon=t["epsilon"],
        torus_dims=tuple(t["torus_dims"]),
    )
    data = _wrap(
        "data",
        DatasetSpec,
        source=d["source"],
        n_base=d["n_base"],
        seq_len=d["seq_len"],
        kinds=tuple(d["kinds"]),
        resolution=d["resolution"],
        seed=d["seed"],
        data_dir=d["data_dir"] or None,
    )
    train_cfg = _wrap(
        "train",
        TrainConfig,
        learning_rate=tr["learning_rate"],
        momentum=tr["momentum"],
        batch_size=tr["batch_size"],
        epochs=tr["epochs"],
        seed=tr["seed"] if seed is None else seed,
        likelihood=m["likelihood"],
        grad_clip=tr["grad_clip"],
        kl_warmup_epochs=tr["kl_warmup_epochs"],
    )
    if tr["checkpoint_every"] < 1:
        raise ConfigurationError("train.checkpoint_every: must be positive")
    return RunSpec(
        m["variant"], m["arch"], m["likelihood"], m["obs_std"], topo, data, train_cfg, tr["checkpoint_every"]
    )


def image_shape(source: str, resolution: int) -> List[int]:
    if source == "mnist":
        return [28, 28, 3]
    if source == "sprites":
        return [64, 64]
    return [resolution, resolution]


# --- file helpers --------------------------------------------------------------------------


def announce(path: str) -> None:
    print(f"wrote {path}", flush=True)


@contextmanager
def run_lock(run_dir: str):
    """Exclusive lock file so that at most one process writes into ``run_dir``."""
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"{run_dir} is locked by another process ({path} exists)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(path)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_grid(path: str, rows: List[np.ndarray], shape: List[int]) -> None:
    """Tile ``rows`` (each a list of flat frames) into a binary PGM (gray) or PPM (RGB)."""
    color = len(shape) == 3
    h, w = shape[0], shape[1]
    n_rows = len(rows)
    n_cols = max((len(r) for r in rows), default=0)
    chans = 3 if color else 1
    canvas = np.zeros((n_rows * h, n_cols * w, chans), dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, frame in enumerate(row):
            canvas[i * h : (i + 1) * h, j * w : (j + 1) * w] = to_uint8(np.asarray(frame)).reshape(h, w, chans)
    magic = b"P6" if color else b"P5"
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (canvas.shape[1], canvas.shape[0]))
        f.write(canvas.tobytes())
    os.replace(tmp, path)
    announce(path)


def _fingerprint(spec_meta: dict) -> str:
    return hashlib.sha256(json.dumps(spec_meta, sort_keys=True).encode()).hexdigest()[:16]


def _run_meta(spec: RunSpec) -> dict:
    data = asdict(spec.data)
    data["kinds"] = list(spec.data.kinds)
    return {
        "variant": spec.variant,
        "data": data,
        "train": asdict(spec.train),
        "image_shape": image_shape(spec.data.source, spec.data.resolution),
    }


# --- commands ------------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    spec = build_run_spec(cfg, args.seed)
    run_dir = args.out or os.path.join("runs", _config_stem(args.config))
    run_meta = _run_meta(spec)
    # the epoch budget may grow between invocations; anything else must match to resume
    fixed = {**run_meta, "train": {k: v for k, v in run_meta["train"].items() if k != "epochs"}}
    fp = _fingerprint({**fixed, "arch": spec.arch, "topo": str(spec.topo), "obs_std": spec.obs_std})
    dataset = SequenceDataset(spec.data)
    with run_lock(run_dir):
        model, state, history, start = None, None, [], 0
        if os.path.exists(os.path.join(run_dir, "manifest")):
            model, rest, meta = load_model(run_dir)
            if meta.get("fingerprint") != fp:
                raise ConfigurationError(
                    f"{run_dir} holds a run with a different configuration; choose another --out"
                )
            state = OptimizerState(spec.train.learning_rate, spec.train.momentum)
            state.velocity = {k[len("velocity/"):]: v for k, v in rest.items() if k.startswith("velocity/")}
            history = meta.get("history", [])
            start = int(meta.get("next_epoch", 0))
            log.info("resuming %s at epoch %d", run_dir, start)
        else:
            model = build_model(
                spec.variant, spec.arch, spec.topo, spec.train.seed, spec.likelihood, spec.obs_std
            )
        if model.n_in != dataset.frame_size:
            raise ConfigurationError(
                f"model.arch: input width {model.n_in} does not match frame size {dataset.frame_size}"
            )
        hist_path = os.path.join(run_dir, "history.csv")

        def save(next_epoch, st):
            extra = {f"velocity/{k}": v for k, v in (st.velocity if st else {}).items()}
            meta = {**run_meta, "fingerprint": fp, "next_epoch": next_epoch, "history": history}
            save_model(run_dir, model, extra, meta)
            write_history_csv(hist_path, history)

        def on_epoch(epoch, row, st):
            history.append({k: float(row[k]) if k != "epoch" else int(row[k]) for k in HISTORY_COLUMNS})
            if (epoch + 1) % spec.checkpoint_every == 0 or epoch + 1 == spec.train.epochs:
                save(epoch + 1, st)

        if start == 0 and not history:
            save(0, state)
        train(model, dataset, spec.train, state=state, start_epoch=start, on_epoch=on_epoch)
        if start >= spec.train.epochs:
            write_history_csv(hist_path, history)
    announce(os.path.join(run_dir, "manifest"))
    announce(os.path.join(run_dir, "params.bin"))
    announce(hist_path)
    return EXIT_OK


def _config_stem(path: Optional[str]) -> str:
    if not path:
        return "default"
    return os.path.splitext(os.path.basename(path))[0]


def _load(args) -> Tuple[TvaeModel, dict]:
    if not args.checkpoint:
        raise ConfigurationError("--checkpoint is required")
    model, _, meta = load_model(args.checkpoint)
    return model, meta


def _eval_settings(args, meta: dict) -> Tuple[DatasetSpec, dict]:
    """Held-out dataset: the training data recipe with the eval section's size and seed."""
    cfg = parse_config(args.config)
    ev = cfg["eval"]
    if args.seed is not None:
        ev["seed"] = args.seed
    if args.config and _has_section(args.config, "data"):
        base = build_run_spec(cfg).data
    else:
        try:
            d = dict(meta["data"])
            d["kinds"] = tuple(d["kinds"])
            base = DatasetSpec(**d)
        except (KeyError, TypeError) as e:
            raise FormatError(f"checkpoint manifest lacks a usable data description: {e}") from None
    spec = DatasetSpec(
        source=base.source,
        n_base=ev["n_base"],
        seq_len=base.seq_len,
        kinds=base.kinds,
        resolution=base.resolution,
        seed=ev["data_seed"],
        split="test",
        data_dir=base.data_dir,
    )
    return spec, ev


def _has_section(path: str, section: str) -> bool:
    p = configparser.ConfigParser(interpolation=None)
    p.read(path, encoding="utf-8")
    return p.has_section(section)


def _latents(model: TvaeModel, frames: np.ndarray, deterministic: bool, seed: int) -> np.ndarray:
    if deterministic:
        return infer_t_sequence(model, frames, deterministic=True)
    return infer_t_sequence(model, frames, noise=np.random.default_rng(seed))


def perfect_latents(y: np.ndarray, layout: CapsuleLayout, seed: int) -> np.ndarray:
    """Synthetic equivariant latents ``t_l = Roll_{y_l}(v)`` for calibrating the metrics."""
    rng = np.random.default_rng(seed)
    B, S = y.shape
    out = np.empty((B, S, layout.n))
    for b in range(B):
        v = rng.standard_normal(layout.n)
        for l in range(S):
            out[b, l] = roll_capsules(v, layout, int(y[b, l]))
    return out


def cmd_eval(args) -> int:
    model, meta = _load(args)
    spec, ev = _eval_settings(args, meta)
    dataset = SequenceDataset(spec)
    batch = dataset.all_sequences(ev["seed"])
    if args.debug_perfect_latents:
        t = perfect_latents(batch.y, model.layout, ev["seed"])
    else:
        # metrics read posterior summaries; sampling noise would only blur the roll structure
        t = _latents(model, batch.frames, True, ev["seed"])
    report = evaluate_latents(
        t, batch.y, batch.kinds, model.layout, canonical_fn=lambda k, S: canonical_steps(k, S)
    )
    rng = np.random.default_rng(np.random.SeedSequence([ev["seed"], 31337]))
    lp, el = [], []
    for b in dataset.batches(ev["batch_size"], ev["seed"], 0):
        lp.append(importance_log_px(model, b.frames, ev["is_samples"], rng))
        el.append(elbo_batch(model, b.frames, rng, with_grad=False).elbo)
    if not lp:
        raise DegenerateInputError("evaluation set smaller than one batch")
    row = {
        "variant": meta.get("variant", model.topo.variant),
        "L": model.topo.L,
        "K": model.topo.K,
        "eq_error": report.eq_error,
        "is_log_px": float(np.mean(np.concatenate(lp))),
        "elbo": float(np.mean(np.concatenate(el))),
        # per-sequence sums above, per-frame averages here
        "is_log_px_per_frame": float(np.mean(np.concatenate(lp))) / spec.seq_len,
        "elbo_per_frame": float(np.mean(np.concatenate(el))) / spec.seq_len,
        "n_sequences": report.n_sequences,
        "seed": meta.get("train", {}).get("seed", ""),
    }
    for kind, v in report.capcorr.items():
        row[f"capcorr_{kind}"] = v
    out_dir = args.out or args.checkpoint
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(path, [row])
    announce(path)
    return EXIT_OK


def decode_frames(model: TvaeModel, t: np.ndarray) -> np.ndarray:
    # one latent per call so identical latents decode to identical bits
    return np.stack([decode(model, v[None])[0] for v in np.asarray(t)])


def cmd_traverse(args) -> int:
    model, meta = _load(args)
    spec, ev = _eval_settings(args, meta)
    shape = meta.get("image_shape") or image_shape(spec.source, spec.resolution)
    n = ev["n_examples"] if args.n_examples is None else args.n_examples
    dataset = SequenceDataset(spec)
    batch = dataset.all_sequences(ev["seed"])
    out_dir = args.out or os.path.join(args.checkpoint, "traversals")
    os.makedirs(out_dir, exist_ok=True)
    ext = "ppm" if len(shape) == 3 else "pgm"
    S = spec.seq_len
    for i in range(min(n, len(batch.frames))):
        frames = batch.frames[i]
        t = _latents(model, frames, args.deterministic, ev["seed"] + i)
        rolled = np.stack([roll_capsules(t[0], model.layout, l) for l in range(S)])
        rows = [frames, decode_frames(model, t), decode_frames(model, rolled)]
        write_grid(os.path.join(out_dir, f"traverse_{i:03d}.{ext}"), rows, shape)
    if args.max_activating:
        imgs = batch.frames[:, 0, :]
        idx = max_activating_images(model, imgs).reshape(model.layout.n_capsules, model.layout.capsule_dim)
        write_grid(os.path.join(out_dir, f"max_activating.{ext}"), [imgs[r] for r in idx], shape)
    return EXIT_OK


def sample_prior_t(model: TvaeModel, n: int, seed: int) -> np.ndarray:
    """``t`` from standard-normal ``z`` and a window of standard-normal ``u`` draws."""
    rng = np.random.default_rng(seed)
    topo = model.topo
    z = rng.standard_normal((n, topo.layout.n))
    if not topo.uses_u:
        return z
    M = neighborhood_operator(topo)
    u = rng.standard_normal((n, M.shape[0]))
    return (z - model.mu_value) / np.sqrt(np.square(u) @ M + topo.epsilon)


def cmd_sample(args) -> int:
    model, meta = _load(args)
    cfg = parse_config(args.config)
    n = cfg["eval"]["n_samples"] if args.n is None else args.n
    if n < 0:
        raise ConfigurationError("--n must be nonnegative")
    seed = 0 if args.seed is None else args.seed
    d = meta.get("data", {})
    shape = meta.get("image_shape") or image_shape(d.get("source", "toy"), d.get("resolution", 16))
    imgs = decode_frames(model, sample_prior_t(model, n, seed)) if n else np.zeros((0, 1))
    cols = min(n, 8)
    rows = [imgs[i : i + cols] for i in range(0, n, cols)] if n else []
    out_dir = args.out or args.checkpoint
    os.makedirs(out_dir, exist_ok=True)
    ext = "ppm" if len(shape) == 3 else "pgm"
    write_grid(os.path.join(out_dir, f"samples.{ext}"), rows, shape)
    return EXIT_OK


# --- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topocaps", description="Topographic VAE toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--seed", type=int, help="override the run or evaluation seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--checkpoint", help="checkpoint directory")
        sp.add_argument(
            "--deterministic",
            action="store_true",
            help="traverse: use posterior summaries instead of sampled latents (metrics always do)",
        )
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("train", help="train a model"))
    e = sub.add_parser("eval", help="equivariance, CapCorr and likelihood metrics")
    common(e)
    e.add_argument("--debug-perfect-latents", action="store_true", help=argparse.SUPPRESS)
    t = sub.add_parser("traverse", help="input / reconstruction / traversal grids")
    common(t)
    t.add_argument("--n-examples", type=int)
    t.add_argument("--max-activating", action="store_true", help="also write a max-activating image grid")
    s = sub.add_parser("sample", help="decode samples from the prior")
    common(s)
    s.add_argument("--n", type=int)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "traverse": cmd_traverse, "sample": cmd_sample}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RunLockedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_LOCKED
    except (TopocapsError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
