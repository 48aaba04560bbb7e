"""Duration model tests: positivity, quantization, loss composition, and
gradient checks on the miniature configuration."""

import numpy as np
import pytest
import torch

from prosodykit.batching import collate
from prosodykit.corpus import generate_synthetic_corpus
from prosodykit.distributions import AnnealSchedule
from prosodykit.duration import DurationModel, duration_loss, quantize_durations

from conftest import (
    assert_grads_close,
    finite_difference_grads,
    miniature_duration,
    miniature_utterances,
    tiny_synth_spec,
)


def make_model(seed=0, **kw):
    args = dict(
        n_phonemes=11,
        mel_bins=16,
        phoneme_dim=8,
        speaker_dim=4,
        latent_dim=2,
        ref_hidden=8,
        ref_layers=2,
        regressor_hidden=8,
    )
    args.update(kw)
    torch.manual_seed(seed)
    return DurationModel(**args)


@pytest.fixture(scope="module")
def corpus():
    c, _ = generate_synthetic_corpus(tiny_synth_spec())
    return c


def encode_and_predict(model, batch, spk, latents=None):
    enc = model.encode_phonemes(batch.phoneme_ids, batch.phoneme_lengths, batch.phoneme_mask)
    if latents is None:
        latents = torch.zeros(batch.size, batch.max_words, model.latent_dim)
    return model.predict_durations(enc, latents, spk, batch.word_of_phoneme, batch.phoneme_mask)


class TestPredictDurations:
    def test_shape_and_positivity(self, corpus):
        model = make_model()
        batch = collate([corpus.utterances[0]], corpus.phoneme_index(), corpus.speaker_index())
        out = encode_and_predict(model, batch, torch.zeros(1, 4))
        u = corpus.utterances[0]
        assert out.shape == (1, batch.phoneme_ids.shape[1])
        assert bool((out[0, : u.n_phonemes] > 0).all())

    def test_positive_for_arbitrary_inputs(self, corpus):
        # exp head forces positivity whatever the parameters and latents are
        for seed in range(5):
            model = make_model(seed=seed)
            batch = collate(
                corpus.utterances[:3], corpus.phoneme_index(), corpus.speaker_index()
            )
            gen = torch.Generator().manual_seed(seed)
            z = 10 * torch.randn(3, batch.max_words, 2, generator=gen)
            spk = 10 * torch.randn(3, 4, generator=gen)
            out = encode_and_predict(model, batch, spk, z)
            assert bool((out[batch.phoneme_mask] > 0).all())

    def test_latent_word_count_mismatch(self, corpus):
        model = make_model()
        batch = collate([corpus.utterances[0]], corpus.phoneme_index(), corpus.speaker_index())
        bad = torch.zeros(1, 1, 2)  # utterance has more than one word
        with pytest.raises(ValueError, match="word"):
            encode_and_predict(model, batch, torch.zeros(1, 4), bad)

    def test_deterministic(self, corpus):
        model = make_model(seed=2)
        batch = collate([corpus.utterances[1]], corpus.phoneme_index(), corpus.speaker_index())
        a = encode_and_predict(model, batch, torch.zeros(1, 4))
        b = encode_and_predict(model, batch, torch.zeros(1, 4))
        assert torch.equal(a, b)


class TestQuantize:
    def test_rounding_rule(self):
        np.testing.assert_array_equal(quantize_durations([1.4, 2.6]), [1, 3])

    def test_minimum_clamp(self):
        np.testing.assert_array_equal(quantize_durations([0.2]), [1])

    def test_half_away_from_zero(self):
        np.testing.assert_array_equal(quantize_durations([2.5]), [3])
        np.testing.assert_array_equal(quantize_durations([0.5, 1.5]), [1, 2])

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError, match="positive"):
            quantize_durations([1.0, 0.0])
        with pytest.raises(ValueError, match="positive"):
            quantize_durations([-2.0])

    def test_accepts_tensor(self):
        np.testing.assert_array_equal(
            quantize_durations(torch.tensor([0.7, 3.49])), [1, 3]
        )


class TestDurationLoss:
    def test_exact_predictions_zero_recon(self, corpus, monkeypatch):
        model = make_model()
        batch = collate([corpus.utterances[0]], corpus.phoneme_index(), corpus.speaker_index())

        def exact(encodings, latents, spk, word_of_phoneme, mask):
            # log-domain head that reproduces the target durations exactly
            return torch.log(batch.durations.to(torch.float32).clamp_min(1e-9)) * mask

        monkeypatch.setattr(model, "predict_log_durations", exact)
        parts = duration_loss(
            model, torch.zeros(1, 4), batch, 0, AnnealSchedule(0, 10),
            torch.zeros(1, batch.max_words, 2),
        )
        assert float(parts.recon) == pytest.approx(0.0, abs=1e-10)

    def test_forced_standard_posterior_zeroes_kl(self, corpus, monkeypatch):
        model = make_model()
        batch = collate([corpus.utterances[0]], corpus.phoneme_index(), corpus.speaker_index())

        def forced(mel, ups, spk, frame_mask, word_of_frame, max_words):
            return torch.zeros(1, max_words, 2), torch.ones(1, max_words, 2)

        monkeypatch.setattr(model, "encode_reference", forced)
        parts = duration_loss(
            model, torch.zeros(1, 4), batch, 100, AnnealSchedule(0, 10),
            torch.zeros(1, batch.max_words, 2),
        )
        assert float(parts.kl) == pytest.approx(0.0, abs=1e-12)

    def test_composition_identity(self, corpus):
        sched = AnnealSchedule(0, 80)
        for seed in range(4):
            model = make_model(seed=seed)
            batch = collate(
                corpus.utterances[:3], corpus.phoneme_index(), corpus.speaker_index()
            )
            gen = torch.Generator().manual_seed(seed)
            spk = torch.randn(3, 4, generator=gen)
            noise = torch.randn(3, batch.max_words, 2, generator=gen)
            step = 20 * (seed + 1)
            parts = duration_loss(model, spk, batch, step, sched, noise)
            residual = float((parts.total - parts.recon - parts.alpha * parts.kl).detach())
            assert residual == pytest.approx(0.0, abs=1e-5)

    def test_batched_matches_single(self, corpus):
        model = make_model(seed=7).double()
        utts = corpus.utterances[:3]
        batch = collate(utts, corpus.phoneme_index(), corpus.speaker_index(),
                        dtype=torch.float64)
        gen = torch.Generator().manual_seed(5)
        spk = torch.randn(3, 4, generator=gen, dtype=torch.float64)
        noise = torch.randn(3, batch.max_words, 2, generator=gen, dtype=torch.float64)
        sched = AnnealSchedule(0, 10)
        batched = duration_loss(model, spk, batch, 3, sched, noise)
        singles = []
        for i, u in enumerate(utts):
            b1 = collate([u], corpus.phoneme_index(), corpus.speaker_index(),
                         dtype=torch.float64)
            parts = duration_loss(
                model, spk[i : i + 1], b1, 3, sched, noise[i : i + 1, : u.n_words]
            )
            singles.append(float(parts.total))
        assert float(batched.total) == pytest.approx(np.mean(singles), rel=1e-12)


class TestGradientCheck:
    def test_duration_loss_gradients_match_finite_differences(self):
        utts, pidx, sidx = miniature_utterances()
        model = miniature_duration()
        batch = collate(utts, pidx, sidx, dtype=torch.float64)
        torch.manual_seed(31)
        spk_table = torch.nn.Embedding(2, 4).double()
        noise = torch.randn(2, batch.max_words, 2, dtype=torch.float64,
                            generator=torch.Generator().manual_seed(32))
        sched = AnnealSchedule(0, 10)

        def loss_fn():
            spk = spk_table(batch.speaker_idx)
            return duration_loss(model, spk, batch, 5, sched, noise).total

        params = list(model.parameters()) + list(spk_table.parameters())
        analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
        numeric = finite_difference_grads(loss_fn, params)
        assert_grads_close(analytic, numeric, rtol=1e-3)


def test_short_training_reduces_duration_recon(tmp_path, tiny_corpus_dir):
    # a quick smoke check; the full overfit property runs in acceptance
    from prosodykit import pipeline as pl
    from conftest import mini_run_config

    cfg = mini_run_config(tiny_corpus_dir, steps=120, batch_size=8, log_every=20,
                          learning_rate=3e-3)
    logs = []
    pl.train_stage1(cfg, on_step=logs.append)
    first = np.mean([l.duration_recon for l in logs[:10]])
    last = np.mean([l.duration_recon for l in logs[-10:]])
    assert last < first
