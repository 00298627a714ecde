"""TVAE / BubbleVAE / VAE assembly, training loop, traversals and probes."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, UsageError
from .nn import (
    MlpParams,
    OptimizerState,
    load_checkpoint,
    mlp_forward,
    mlp_init,
    save_checkpoint,
    sgd_momentum_step,
)
from .topography import CapsuleLayout, TopographyConfig, neighborhood_operator, roll_capsules
from .vi import DiagonalGaussian, elbo_batch, forward, sigmoid, window_indices

log = logging.getLogger(__name__)

VARIANT_ALIASES = {
    "tvae": "shifting",
    "bubblevae": "stationary",
    "bubble": "stationary",
    "vae": "none",
    "tvae2d": "torus2d",
    "shifting": "shifting",
    "stationary": "stationary",
    "none": "none",
    "torus2d": "torus2d",
}

PRESETS = {
    # name: (encoder hidden widths, decoder hidden widths, input width, (C, D))
    "mnist": ((972, 648), (648, 972), 2352, (18, 18)),
    "dsprites": ((674, 450), (450, 675), 4096, (15, 15)),
}


@dataclass
class TvaeModel:
    encoder_z: MlpParams
    encoder_u: Optional[MlpParams]
    decoder: MlpParams
    mu: np.ndarray  # 0-d array so the optimizer can update it in place
    topo: TopographyConfig
    arch: str = "toy"
    likelihood: str = "bernoulli"
    obs_std: float = 1.0

    def __post_init__(self):
        n = self.topo.layout.n
        if self.encoder_z.n_out != 2 * n:
            raise ConfigurationError(f"z-encoder emits {self.encoder_z.n_out} units, need 2*{n}")
        if self.topo.uses_u:
            if self.encoder_u is None or self.encoder_u.n_out != 2 * self.topo.n_u:
                raise ConfigurationError(f"u-encoder must emit 2*{self.topo.n_u} units")
        elif self.encoder_u is not None:
            raise ConfigurationError("variant 'none' has no u-encoder")
        if self.decoder.n_in != n or self.decoder.n_out != self.encoder_z.n_in:
            raise ConfigurationError("decoder widths do not match latent/input sizes")
        if self.likelihood not in ("bernoulli", "gaussian"):
            raise ConfigurationError(f"likelihood must be bernoulli or gaussian, got {self.likelihood!r}")

    @property
    def n_in(self) -> int:
        return self.encoder_z.n_in

    @property
    def layout(self) -> CapsuleLayout:
        return self.topo.layout

    @property
    def mu_value(self) -> float:
        return float(self.mu) if self.topo.uses_u else 0.0

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable arrays by name; the same keys as the gradients from :func:`elbo_batch`."""
        p = dict(self.decoder.named("decoder/"))
        p.update(self.encoder_z.named("encoder_z/"))
        if self.topo.uses_u:
            p.update(self.encoder_u.named("encoder_u/"))
            p["mu"] = self.mu
        return p

    def bump_version(self):
        for net in (self.encoder_z, self.encoder_u, self.decoder):
            if net is not None:
                net.version += 1


def _parse_arch(arch_preset) -> Tuple[str, List[int]]:
    if isinstance(arch_preset, str):
        if arch_preset in PRESETS:
            return arch_preset, []
        if arch_preset.startswith("toy"):
            body = arch_preset[3:].strip("():[] ")
            sizes = [int(s) for s in body.replace(",", " ").split()]
            return "toy", sizes
        raise ConfigurationError(f"unknown arch preset {arch_preset!r}")
    name, sizes = arch_preset
    return name, list(sizes)


def arch_string(name: str, sizes: Sequence[int]) -> str:
    return name if name in PRESETS else "toy(" + ",".join(str(s) for s in sizes) + ")"


def build_model(
    variant: str,
    arch_preset,
    topo: TopographyConfig,
    seed: int,
    likelihood: str = "bernoulli",
    obs_std: float = 1.0,
) -> TvaeModel:
    """Initialise a model.

    ``variant`` is one of tvae / bubblevae / vae / tvae2d (or the raw topography
    variant names). ``arch_preset`` is ``'mnist'``, ``'dsprites'`` or
    ``('toy', [n_in, h1, h2, ...])``; toy encoders are ``[n_in, h1, ..., 2n]``
    and the decoder mirrors them.
    """
    if variant not in VARIANT_ALIASES:
        raise ConfigurationError(f"unknown variant {variant!r}")
    kind = VARIANT_ALIASES[variant]
    if kind == "none" and topo.L != 0:
        raise ConfigurationError("the VAE baseline requires L = 0")
    topo = topo.with_(variant=kind)
    name, sizes = _parse_arch(arch_preset)
    n = topo.layout.n
    if name in PRESETS:
        enc_h, dec_h, n_in, (C, D) = PRESETS[name]
        if (topo.layout.n_capsules, topo.layout.capsule_dim) != (C, D):
            raise ConfigurationError(
                f"preset {name} expects {C}x{D} capsules, got "
                f"{topo.layout.n_capsules}x{topo.layout.capsule_dim}"
            )
        enc_sizes = [n_in, *enc_h, 2 * n]
        dec_sizes = [n, *dec_h, n_in]
    else:
        if len(sizes) < 1:
            raise ConfigurationError("toy preset needs at least the input width")
        n_in, hidden = sizes[0], sizes[1:]
        enc_sizes = [n_in, *hidden, 2 * n]
        dec_sizes = [n, *reversed(hidden), n_in]
    enc_u_sizes = [enc_sizes[0], *enc_sizes[1:-1], 2 * topo.n_u]
    seeds = np.random.SeedSequence(seed).generate_state(3)
    model = TvaeModel(
        encoder_z=mlp_init(enc_sizes, int(seeds[0])),
        encoder_u=mlp_init(enc_u_sizes, int(seeds[1])) if topo.uses_u else None,
        decoder=mlp_init(dec_sizes, int(seeds[2])),
        mu=np.array(float(topo.mu_init) if topo.uses_u else 0.0),
        topo=topo,
        arch=arch_string(name, sizes),
        likelihood=likelihood,
        obs_std=obs_std,
    )
    return model


def encode(model: TvaeModel, x: np.ndarray) -> Tuple[DiagonalGaussian, Optional[DiagonalGaussian]]:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.n_in:
        raise DimensionError(f"input width {x.shape[-1]} != {model.n_in}")
    hz, _ = mlp_forward(model.encoder_z, x)
    qz = DiagonalGaussian.from_encoder_output(hz)
    qu = None
    if model.encoder_u is not None:
        hu, _ = mlp_forward(model.encoder_u, x)
        qu = DiagonalGaussian.from_encoder_output(hu)
    return qz, qu


def infer_t_sequence(model: TvaeModel, x_seq: np.ndarray, noise=None, deterministic: bool = False):
    """Latents ``t_l`` for each frame of one sequence (S, N) or a batch (B, S, N).

    ``deterministic=True`` uses the posterior mean of ``z`` and the posterior
    expectation of ``u^2`` (a sampled-free summary); otherwise ``noise`` is a
    Generator or explicit :class:`topocaps.vi.Noise`.
    """
    x_seq = np.asarray(x_seq, dtype=float)
    single = x_seq.ndim == 2
    if deterministic:
        t = _moment_t(model, x_seq if not single else x_seq[None])
        return t[0] if single else t
    if noise is None:
        raise UsageError("stochastic inference needs a noise source")
    fp = forward(model, x_seq, noise)
    return fp.t[0] if single else fp.t


def _moment_t(model: TvaeModel, x: np.ndarray) -> np.ndarray:
    # z at its posterior mean, u^2 at its posterior expectation m^2 + s^2
    B, S, N = x.shape
    qz, qu = encode(model, x.reshape(B * S, N))
    zm = qz.mean.reshape(B, S, -1)
    if qu is None:
        return zm
    topo = model.topo
    usq = (np.square(qu.mean) + np.square(qu.std)).reshape(B, S, -1)
    idx = window_indices(S, topo)
    A = usq[:, idx, :].reshape(B, S, -1) @ neighborhood_operator(topo) + topo.epsilon
    return (zm - model.mu_value) / np.sqrt(A)


def decode(model: TvaeModel, t: np.ndarray) -> np.ndarray:
    """Decoder output mapped to pixel space (Bernoulli means or Gaussian means)."""
    out, _ = mlp_forward(model.decoder, np.asarray(t, dtype=float))
    return sigmoid(out) if model.likelihood == "bernoulli" else out


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    likelihood: str = "bernoulli"
    grad_clip: float = 0.0  # 0 disables; global L2 norm bound
    kl_warmup_epochs: float = 0.0  # linear KL weight ramp in the gradient; 0 disables

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.grad_clip < 0 or self.kl_warmup_epochs < 0:
            raise ConfigurationError("grad_clip and kl_warmup_epochs must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be positive and epochs nonnegative")
        if self.likelihood not in ("bernoulli", "gaussian"):
            raise ConfigurationError(f"unknown likelihood {self.likelihood!r}")


HISTORY_COLUMNS = ("epoch", "elbo", "recon", "kl_z", "kl_u")


def train(
    model: TvaeModel,
    dataset,
    cfg: TrainConfig,
    state: Optional[OptimizerState] = None,
    start_epoch: int = 0,
    on_epoch=None,
) -> List[dict]:
    """Maximise the mean per-sequence ELBO with SGD + momentum, updating ``model`` in place.

    ``dataset`` must provide ``batches(batch_size, seed, epoch)`` yielding
    :class:`topocaps.data.SequenceBatch` objects. History rows hold per-epoch
    means of the per-sequence ELBO, reconstruction NLL and KL terms.
    """
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    if state is None:
        state = OptimizerState(cfg.learning_rate, cfg.momentum)
    params = model.parameters()
    steps_per_epoch = max(1, len(dataset) // cfg.batch_size)
    warm_steps = cfg.kl_warmup_epochs * steps_per_epoch
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        # fresh generator per epoch so resuming reproduces an uninterrupted run
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919, epoch]))
        sums = np.zeros(4)
        count = 0
        t0 = time.perf_counter()
        for step, batch in enumerate(dataset.batches(cfg.batch_size, cfg.seed, epoch)):
            global_step = epoch * steps_per_epoch + step
            beta = min(1.0, (global_step + 1) / warm_steps) if warm_steps > 0 else 1.0
            res = elbo_batch(model, batch.frames, rng, kl_weight=beta)
            neg = {k: -g for k, g in res.grad.items()}
            if cfg.grad_clip > 0:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in neg.values()))
                if norm > cfg.grad_clip:
                    neg = {k: g * (cfg.grad_clip / norm) for k, g in neg.items()}
            sgd_momentum_step(params, neg, state)
            model.bump_version()
            b = len(res.elbo)
            sums += b * np.array([res.elbo.mean(), res.recon.mean(), res.kl_z.mean(), res.kl_u.mean()])
            count += b
        row = dict(zip(HISTORY_COLUMNS, [epoch, *(sums / max(count, 1))]))
        history.append(row)
        log.info(
            "epoch %d elbo %.3f recon %.3f kl_z %.3f kl_u %.3f (%.2fs)",
            epoch, row["elbo"], row["recon"], row["kl_z"], row["kl_u"], time.perf_counter() - t0,
        )
        if on_epoch is not None:
            on_epoch(epoch, row, state)
    return history


def write_history_csv(path: str, history: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_COLUMNS})


def read_history_csv(path: str) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(f)
        ]


def t0_from_sequence(model: TvaeModel, frames: np.ndarray) -> np.ndarray:
    """Deterministic ``t`` of the first frame, its u-window wrapping around ``frames``."""
    frames = np.asarray(frames, dtype=float)
    P = frames.shape[0]
    if 2 * model.topo.L > P:
        raise ConfigurationError(f"partial sequence of {P} frames is shorter than window 2L={2 * model.topo.L}")
    return infer_t_sequence(model, frames, deterministic=True)[0]


def capsule_traversal(model: TvaeModel, x_partial_seq: np.ndarray, n_steps: Optional[int] = None) -> np.ndarray:
    """Decode ``Roll_l(t_0)`` for ``l = 0..n_steps-1`` (default: capsule size)."""
    t0 = t0_from_sequence(model, x_partial_seq)
    steps = model.layout.capsule_dim if n_steps is None else n_steps
    rolled = np.stack([roll_capsules(t0, model.layout, l) for l in range(steps)])
    return decode(model, rolled)


def reconstruct_sequence(model: TvaeModel, frames: np.ndarray) -> np.ndarray:
    return decode(model, infer_t_sequence(model, frames, deterministic=True))


def static_t(model: TvaeModel, images: np.ndarray) -> np.ndarray:
    """Deterministic ``t`` for single images, each treated as a constant sequence."""
    images = np.asarray(images, dtype=float)
    topo = model.topo
    qz, qu = encode(model, images)
    if qu is None:
        return qz.mean
    M = neighborhood_operator(topo)
    win = topo.window
    usq = np.tile(np.square(qu.mean) + np.square(qu.std), (1, win))
    return (qz.mean - model.mu_value) / np.sqrt(usq @ M + topo.epsilon)


def max_activating_images(model: TvaeModel, images: np.ndarray) -> np.ndarray:
    """Index of the image maximising each latent unit (lowest index on ties)."""
    images = np.asarray(images, dtype=float)
    if images.shape[0] == 0:
        raise UsageError("dataset is empty")
    return np.argmax(static_t(model, images), axis=0)


# --- checkpoints ---------------------------------------------------------------------------


def topo_to_dict(topo: TopographyConfig) -> dict:
    d = asdict(topo)
    d["layout"] = [topo.layout.n_capsules, topo.layout.capsule_dim]
    d["torus_dims"] = list(topo.torus_dims)
    return d


def topo_from_dict(d: dict) -> TopographyConfig:
    d = dict(d)
    C, D = d.pop("layout")
    d["torus_dims"] = tuple(d.get("torus_dims", (16, 16)))
    return TopographyConfig(CapsuleLayout(int(C), int(D)), **d)


def model_arrays(model: TvaeModel) -> Dict[str, np.ndarray]:
    return {k: np.asarray(v) for k, v in model.parameters().items()}


def save_model(path: str, model: TvaeModel, extra_arrays=None, meta=None) -> None:
    arrays = model_arrays(model)
    if extra_arrays:
        arrays.update(extra_arrays)
    m = {
        "topo": topo_to_dict(model.topo),
        "arch": model.arch,
        "likelihood": model.likelihood,
        "obs_std": model.obs_std,
        "sizes": {
            "encoder_z": model.encoder_z.sizes,
            "encoder_u": model.encoder_u.sizes if model.encoder_u is not None else None,
            "decoder": model.decoder.sizes,
        },
    }
    m.update(meta or {})
    save_checkpoint(path, arrays, m)


def _mlp_from_arrays(arrays, prefix, sizes) -> MlpParams:
    n = len(sizes) - 1
    try:
        ws = [arrays[f"{prefix}W{k}"].copy() for k in range(n)]
        bs = [arrays[f"{prefix}b{k}"].copy() for k in range(n)]
    except KeyError as e:
        raise FormatError(f"checkpoint lacks parameter {e.args[0]}") from e
    for k, (w, b) in enumerate(zip(ws, bs)):
        if w.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
            raise FormatError(f"{prefix}W{k}: shape {w.shape} disagrees with manifest sizes")
    return MlpParams(ws, bs)


def load_model(path: str) -> Tuple[TvaeModel, Dict[str, np.ndarray], dict]:
    """Returns the model, the remaining (non-model) arrays, and the manifest metadata."""
    arrays, meta = load_checkpoint(path)
    try:
        topo = topo_from_dict(meta["topo"])
        sizes = meta["sizes"]
        model = TvaeModel(
            encoder_z=_mlp_from_arrays(arrays, "encoder_z/", sizes["encoder_z"]),
            encoder_u=_mlp_from_arrays(arrays, "encoder_u/", sizes["encoder_u"]) if sizes["encoder_u"] else None,
            decoder=_mlp_from_arrays(arrays, "decoder/", sizes["decoder"]),
            mu=np.array(float(arrays["mu"])) if "mu" in arrays else np.array(0.0),
            topo=topo,
            arch=meta.get("arch", "toy"),
            likelihood=meta.get("likelihood", "bernoulli"),
            obs_std=float(meta.get("obs_std", 1.0)),
        )
    except (KeyError, TypeError, ConfigurationError) as e:
        raise FormatError(f"checkpoint manifest inconsistent: {e}") from e
    used = set(model.parameters())
    rest = {k: v for k, v in arrays.items() if k not in used}
    return model, rest, meta
