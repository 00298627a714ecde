"""Desk-scale checks of the command outputs on the shared toy runs."""

import numpy as np

from conftest import TOY_ARCH
from topocaps.cli import decode_frames, sample_prior_t
from topocaps.metrics import evaluate_latents
from topocaps.model import build_model, capsule_traversal, infer_t_sequence
from topocaps.topography import CapsuleLayout, TopographyConfig
from topocaps.vi import bernoulli_nll


def _eq_error(model, heldout):
    b = heldout.all_sequences(1)
    return evaluate_latents(infer_t_sequence(model, b.frames, deterministic=True), b.y, b.kinds, model.layout).eq_error


def test_untrained_vae_far_above_trained_tvae(toy_runs, toy_heldout):
    untrained = build_model("vae", TOY_ARCH, TopographyConfig(CapsuleLayout(8, 8), variant="none"), 0)
    assert _eq_error(untrained, toy_heldout) > 4 * _eq_error(toy_runs["tvae", 0][0], toy_heldout)


def _traversal_bce(model, heldout, n=50):
    b = heldout.all_sequences(1)
    out = []
    for i in range(n):
        p = np.clip(capsule_traversal(model, b.frames[i]), 1e-12, 1 - 1e-12)
        out.append(bernoulli_nll(b.frames[i], np.log(p) - np.log1p(-p)))
    return float(np.mean(out))


def test_traversal_tracks_ground_truth_better_than_vae(toy_runs, toy_heldout):
    assert _traversal_bce(toy_runs["tvae", 0][0], toy_heldout) < _traversal_bce(toy_runs["vae", 0][0], toy_heldout)


def test_prior_samples_match_training_intensity(toy_runs, toy_train_data):
    frames = toy_train_data.all_sequences(0).frames
    per_image = frames.mean(axis=2).ravel()
    for name in ("tvae", "vae"):
        model = toy_runs[name, 0][0]
        samples = decode_frames(model, sample_prior_t(model, 500, 0)).mean(axis=1)
        assert abs(samples.mean() - per_image.mean()) < 2 * per_image.std()
