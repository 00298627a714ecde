import numpy as np
import pytest

from topocaps.model import build_model
from topocaps.topography import CapsuleLayout, TopographyConfig


def toy_model(variant="tvae", C=2, D=4, L=1, K=1, sizes=(16, 8, 8), seed=0, **topo_kw):
    topo = TopographyConfig(CapsuleLayout(C, D), L=L, K=K, **topo_kw)
    return build_model(variant, ("toy", list(sizes)), topo, seed)


def random_frames(shape, seed=0):
    return np.random.default_rng(seed).random(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def elbo_fd_max_rel_error(model, x, noise, h=1e-5):
    """Worst relative error between analytic ELBO gradients and central differences."""
    from topocaps.vi import draw_noise, elbo_batch

    x = np.asarray(x, dtype=float)
    noise = draw_noise(model, x.shape[0], x.shape[1], noise)  # freeze the draw
    grads = elbo_batch(model, x, noise).grad
    params = model.parameters()
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        g = np.asarray(grads[name]).reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = elbo_batch(model, x, noise, with_grad=False).elbo.mean()
            flat[i] = old - h
            lm = elbo_batch(model, x, noise, with_grad=False).elbo.mean()
            flat[i] = old
            num = (lp - lm) / (2 * h)
            worst = max(worst, abs(num - g[i]) / max(1.0, abs(num), abs(g[i])))
    return worst


# --- desk-scale toy runs shared by the acceptance checks ---------------------------------

TOY_ARCH = ("toy", [256, 192, 128])
TOY_SEEDS = (0, 1, 2)
# name -> (variant, L, K)
TOY_VARIANTS = {
    "tvae": ("tvae", 4, 1),
    "bubblevae": ("bubblevae", 2, 3),
    "vae": ("vae", 0, 1),
    "isa": ("tvae", 0, 8),
}


def toy_train_config(seed):
    from topocaps.model import TrainConfig

    return TrainConfig(learning_rate=1e-3, momentum=0.9, batch_size=8, epochs=151, seed=seed,
                       grad_clip=20.0, kl_warmup_epochs=30)


@pytest.fixture(scope="session")
def toy_train_data():
    from topocaps.data import DatasetSpec, SequenceDataset

    return SequenceDataset(DatasetSpec("toy", 500, 8, ("shift",), 16, seed=0))


@pytest.fixture(scope="session")
def toy_heldout():
    from topocaps.data import DatasetSpec, SequenceDataset

    return SequenceDataset(DatasetSpec("toy", 400, 8, ("shift",), 16, seed=99))


@pytest.fixture(scope="session")
def toy_runs(toy_train_data):
    """(name, seed) -> (model, history); ISA only for the first seed."""
    from topocaps.model import train

    runs = {}
    for name, (variant, L, K) in TOY_VARIANTS.items():
        for seed in TOY_SEEDS if name != "isa" else TOY_SEEDS[:1]:
            topo = TopographyConfig(CapsuleLayout(8, 8), L=L, K=K, mu_init=30.0)
            model = build_model(variant, TOY_ARCH, topo, seed)
            hist = train(model, toy_train_data, toy_train_config(seed))
            runs[name, seed] = (model, hist)
    return runs


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
