"""Shared fixtures: tiny corpora, miniature model configs, and a central
finite-difference gradient checker used by the gradient suites."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from prosodykit import pipeline as pl
from prosodykit.corpus import SynthSpec, generate_synthetic_corpus, save_corpus


def tiny_synth_spec(**overrides) -> SynthSpec:
    base = dict(
        n_speakers=2,
        n_utterances=8,
        words_per_utterance=(3, 5),
        phonemes_per_word=(2, 4),
        mel_bins=16,
        n_phoneme_types=10,
        n_word_types=8,
        speaker_rates=(0.8, 1.3),
        noise_level=0.01,
        seed=5,
    )
    base.update(overrides)
    return SynthSpec(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    corpus, truth = generate_synthetic_corpus(tiny_synth_spec())
    return corpus, truth


@pytest.fixture()
def tiny_corpus_dir(tmp_path, tiny_corpus):
    corpus, truth = tiny_corpus
    return save_corpus(corpus, tmp_path / "corpus", prosody_truth=truth)


def mini_run_config(corpus_dir: str, **overrides) -> pl.RunConfig:
    base = dict(
        corpus_dir=str(corpus_dir),
        mel_bins=16,
        phoneme_dim=8,
        speaker_dim=4,
        acoustic_latent_dim=2,
        duration_latent_dim=2,
        context_dim=6,
        ref_hidden=8,
        ref_layers=2,
        decoder_hidden=8,
        decoder_layers=2,
        decoder_kernel=3,
        duration_hidden=8,
        predictor_hidden=8,
        anneal_start=0,
        anneal_end=100,
        learning_rate=1e-3,
        batch_size=4,
        steps=5,
        stage2_steps=5,
        seed=3,
        log_every=1,
    )
    base.update(overrides)
    return pl.RunConfig(**base)


def miniature_utterances(n: int = 2, bins: int = 8, seed: int = 0):
    """Hand-built miniature items (P=4, W=2, T=8, M=8) for gradient checks."""
    from prosodykit.corpus import Utterance

    rng = np.random.default_rng(seed)
    utts = []
    for i in range(n):
        durations = np.array([2, 2, 2, 2])
        utts.append(
            Utterance(
                id=f"mini-{i}",
                speaker_id=f"spk{i % 2}",
                text="ab cd",
                phonemes=["p0", "p1", "p2", "p3"],
                word_spans=[(0, 2), (2, 4)],
                durations=durations,
                mel=rng.normal(0.5, 0.5, size=(8, bins)).astype(np.float32),
            ).validate()
        )
    phoneme_index = {f"p{j}": j for j in range(4)}
    speaker_index = {"spk0": 0, "spk1": 1}
    return utts, phoneme_index, speaker_index


def miniature_acoustic(seed: int = 11):
    from prosodykit.acoustic import AcousticModel

    torch.manual_seed(seed)
    return AcousticModel(
        n_phonemes=4, mel_bins=8, phoneme_dim=6, speaker_dim=4, latent_dim=2,
        ref_hidden=6, ref_layers=2, decoder_hidden=6, decoder_layers=2,
        decoder_kernel=3,
    ).double()


def miniature_duration(seed: int = 21):
    from prosodykit.duration import DurationModel

    torch.manual_seed(seed)
    return DurationModel(
        n_phonemes=4, mel_bins=8, phoneme_dim=6, speaker_dim=4, latent_dim=2,
        ref_hidden=6, ref_layers=2, regressor_hidden=6,
    ).double()


def finite_difference_grads(loss_fn, params, eps: float = 1e-5):
    """Central finite differences of a scalar loss over each parameter tensor."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.data.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            lp = float(loss_fn())
            flat[i] = orig - eps
            lm = float(loss_fn())
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * eps)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol: float, atol: float = 1e-7):
    for a, n in zip(analytic, numeric):
        a = torch.zeros_like(n) if a is None else a
        diff = (a - n).abs()
        bound = rtol * torch.maximum(a.abs(), n.abs()) + atol
        worst = (diff - bound).max()
        assert bool((diff <= bound).all()), (
            f"gradient mismatch: worst excess {float(worst):.3e}, "
            f"max |analytic|={float(a.abs().max()):.3e}, max |fd|={float(n.abs().max()):.3e}"
        )
