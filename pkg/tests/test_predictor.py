"""Prosody predictor tests: embedders, pooling, the four-head predictor,
loss contracts, the target store format, and target dumping."""

import numpy as np
import pytest
import torch

from prosodykit.corpus import generate_synthetic_corpus
from prosodykit.distributions import DiagGaussianSeq
from prosodykit.predictor import (
    ContextEmbeddings,
    HashTextEmbedder,
    PretrainedTextEmbedder,
    ProsodyPredictor,
    ProsodyTargetStore,
    TargetEntry,
    dump_targets,
    embed_context,
    pool_to_words,
    predictor_loss,
)

from conftest import (
    assert_grads_close,
    finite_difference_grads,
    tiny_synth_spec,
)


class TestHashEmbedder:
    def test_deterministic_across_instances(self):
        a = HashTextEmbedder(dim=16)("hello word prosody")
        b = HashTextEmbedder(dim=16)("hello word prosody")
        np.testing.assert_array_equal(a.embeddings, b.embeddings)
        assert a.token_to_word == b.token_to_word

    def test_three_words_cover_all_indices(self):
        ce = HashTextEmbedder(dim=8)("one two three")
        assert set(ce.token_to_word) == {0, 1, 2}
        assert ce.n_words == 3

    def test_long_word_yields_two_tokens_one_word(self):
        ce = HashTextEmbedder(dim=8)("extraordinary")
        assert len(ce.token_to_word) == 2
        assert ce.token_to_word == [0, 0]

    def test_same_token_same_vector(self):
        ce = HashTextEmbedder(dim=8)("abc abc")
        np.testing.assert_array_equal(ce.embeddings[0], ce.embeddings[1])
        assert ce.token_to_word == [0, 1]


class TestContextEmbeddings:
    def test_non_decreasing_required(self):
        with pytest.raises(ValueError, match="non-decreasing"):
            ContextEmbeddings(np.zeros((2, 4), dtype=np.float32), [1, 0])

    def test_every_word_needs_a_token(self):
        with pytest.raises(ValueError, match="cover"):
            ContextEmbeddings(np.zeros((2, 4), dtype=np.float32), [0, 2])

    def test_word_count_mismatch_raises(self):
        emb = HashTextEmbedder(dim=8)
        with pytest.raises(ValueError, match="words"):
            embed_context("one two", emb, expected_words=3)
        ce = embed_context("one two", emb, expected_words=2)
        assert ce.n_words == 2


class TestPoolToWords:
    def test_single_token_words_identity(self):
        emb = np.arange(12, dtype=np.float32).reshape(3, 4)
        pooled = pool_to_words(ContextEmbeddings(emb, [0, 1, 2]))
        np.testing.assert_allclose(pooled.numpy(), emb)

    def test_mean_of_equal_tokens(self):
        v = np.ones((2, 4), dtype=np.float32) * 3.5
        pooled = pool_to_words(ContextEmbeddings(v, [0, 0]))
        np.testing.assert_allclose(pooled.numpy(), v[:1])

    def test_mean_of_zero_and_double(self):
        u = np.array([1.0, -2.0, 0.5, 3.0], dtype=np.float32)
        emb = np.stack([np.zeros(4, dtype=np.float32), 2 * u])
        pooled = pool_to_words(ContextEmbeddings(emb, [0, 0]))
        np.testing.assert_allclose(pooled.numpy()[0], u)


class TestPretrainedAdapter:
    def test_maps_word_ids_and_drops_specials(self):
        class FakeEncoding(dict):
            def word_ids(self):
                return [None, 0, 0, 1, None]

        class FakeTokenizer:
            def __call__(self, text, return_tensors=None):
                return FakeEncoding(input_ids=torch.tensor([[101, 5, 6, 7, 102]]))

        class FakeOutput:
            def __init__(self, hidden):
                self.last_hidden_state = hidden

        class FakeModel:
            def __call__(self, **enc):
                ids = enc["input_ids"]
                hidden = ids.unsqueeze(-1).float().expand(-1, -1, 4).clone()
                return FakeOutput(hidden)

        embedder = PretrainedTextEmbedder(FakeTokenizer(), FakeModel(), dim=4)
        ce = embedder("two words")
        assert ce.token_to_word == [0, 0, 1]
        np.testing.assert_allclose(ce.embeddings[:, 0], [5.0, 6.0, 7.0])


def make_predictor(seed=0, context_dim=6, hidden=8):
    torch.manual_seed(seed)
    return ProsodyPredictor(
        context_dim=context_dim, speaker_dim=4, acoustic_latent_dim=3,
        duration_latent_dim=2, hidden=hidden,
    )


class TestProsodyPredictor:
    def test_shapes_and_positive_variances(self):
        model = make_predictor()
        embs = torch.randn(2, 5, 6, generator=torch.Generator().manual_seed(1))
        spk = torch.randn(2, 4, generator=torch.Generator().manual_seed(2))
        ga, gd = model(embs, spk, torch.tensor([5, 3]))
        assert ga.mean.shape == (2, 5, 3) and gd.mean.shape == (2, 5, 2)
        assert bool((ga.var > 0).all()) and bool((gd.var > 0).all())

    def test_variances_positive_for_random_parameters(self):
        for seed in range(4):
            model = make_predictor(seed=seed)
            with torch.no_grad():
                for p in model.parameters():
                    p.add_(torch.randn_like(p) * 3)
            embs = torch.randn(1, 4, 6, generator=torch.Generator().manual_seed(seed))
            ga, gd = model(embs, torch.zeros(1, 4), torch.tensor([4]))
            assert bool((ga.var > 0).all()) and bool((gd.var > 0).all())

    def test_context_dim_checked(self):
        model = make_predictor()
        with pytest.raises(ValueError, match="context dim"):
            model(torch.zeros(1, 3, 9), torch.zeros(1, 4), torch.tensor([3]))


class TestPredictorLoss:
    def _pair(self, mean_a, var_a, mean_d, var_d):
        return (
            DiagGaussianSeq(torch.tensor(mean_a), torch.tensor(var_a)),
            DiagGaussianSeq(torch.tensor(mean_d), torch.tensor(var_d)),
        )

    def test_zero_iff_equal(self):
        pred = self._pair([[0.3, -1.0]], [[1.2, 0.5]], [[0.1]], [[2.0]])
        tgt = self._pair([[0.3, -1.0]], [[1.2, 0.5]], [[0.1]], [[2.0]])
        assert float(predictor_loss(pred, tgt)) == pytest.approx(0.0, abs=1e-12)

    def test_composition_matches_kl_sum(self):
        from prosodykit.distributions import kl_diag_gaussians

        gen = torch.Generator().manual_seed(3)
        pa = DiagGaussianSeq(torch.randn(4, 3, generator=gen), torch.rand(4, 3, generator=gen) + 0.1)
        pd = DiagGaussianSeq(torch.randn(4, 2, generator=gen), torch.rand(4, 2, generator=gen) + 0.1)
        ta = DiagGaussianSeq(torch.randn(4, 3, generator=gen), torch.rand(4, 3, generator=gen) + 0.1)
        td = DiagGaussianSeq(torch.randn(4, 2, generator=gen), torch.rand(4, 2, generator=gen) + 0.1)
        expected = float(kl_diag_gaussians(pa, ta).sum() + kl_diag_gaussians(pd, td).sum())
        assert float(predictor_loss((pa, pd), (ta, td))) == pytest.approx(expected, rel=1e-6)

    def test_frozen_quadrature_value(self):
        # both streams N(0,2) vs N(0,1): 2 x 0.15342640972 = 0.30685281944
        pred = self._pair([[0.0]], [[2.0]], [[0.0]], [[2.0]])
        tgt = self._pair([[0.0]], [[1.0]], [[0.0]], [[1.0]])
        assert float(predictor_loss(pred, tgt)) == pytest.approx(0.30685281944005454, abs=1e-7)

    def test_word_count_mismatch(self):
        pred = self._pair([[0.0], [0.0]], [[1.0], [1.0]], [[0.0], [0.0]], [[1.0], [1.0]])
        tgt = self._pair([[0.0]], [[1.0]], [[0.0]], [[1.0]])
        with pytest.raises(ValueError, match="word count"):
            predictor_loss(pred, tgt)

    def test_gradients_through_predictor(self):
        model = make_predictor(seed=4).double()
        embs = torch.randn(1, 3, 6, dtype=torch.float64,
                           generator=torch.Generator().manual_seed(5))
        spk = torch.randn(1, 4, dtype=torch.float64,
                          generator=torch.Generator().manual_seed(6))
        gen = torch.Generator().manual_seed(7)
        tgt_a = DiagGaussianSeq(
            torch.randn(1, 3, 3, generator=gen, dtype=torch.float64),
            torch.rand(1, 3, 3, generator=gen, dtype=torch.float64) + 0.3,
        )
        tgt_d = DiagGaussianSeq(
            torch.randn(1, 3, 2, generator=gen, dtype=torch.float64),
            torch.rand(1, 3, 2, generator=gen, dtype=torch.float64) + 0.3,
        )

        def loss_fn():
            ga, gd = model(embs, spk, torch.tensor([3]))
            return predictor_loss((ga, gd), (tgt_a, tgt_d))

        params = list(model.parameters())
        analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
        numeric = finite_difference_grads(loss_fn, params)
        assert_grads_close(analytic, numeric, rtol=1e-3)


class TestTargetStore:
    def _store(self, seed=0):
        rng = np.random.default_rng(seed)
        entries = {}
        for i, w in enumerate((3, 5, 2)):
            entries[f"utt-{i}"] = TargetEntry(
                speaker_id=f"spk{i % 2}",
                acoustic_mean=rng.normal(size=(w, 4)).astype(np.float32),
                acoustic_var=rng.uniform(0.1, 2, size=(w, 4)).astype(np.float32),
                duration_mean=rng.normal(size=(w, 2)).astype(np.float32),
                duration_var=rng.uniform(0.1, 2, size=(w, 2)).astype(np.float32),
            )
        return ProsodyTargetStore(entries)

    def test_round_trip_bit_identical(self, tmp_path):
        store = self._store()
        path = store.save(tmp_path / "targets.bin")
        loaded = ProsodyTargetStore.load(path)
        assert loaded.ids() == store.ids()
        for uid, entry in store.items():
            other = loaded[uid]
            assert other.speaker_id == entry.speaker_id
            for name in ("acoustic_mean", "acoustic_var", "duration_mean", "duration_var"):
                np.testing.assert_array_equal(getattr(other, name), getattr(entry, name))
        # a second save produces byte-identical files
        path2 = store.save(tmp_path / "targets2.bin")
        assert path.read_bytes() == path2.read_bytes()

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError, match="positive"):
            TargetEntry(
                speaker_id="s",
                acoustic_mean=np.zeros((2, 3), dtype=np.float32),
                acoustic_var=np.zeros((2, 3), dtype=np.float32),
                duration_mean=np.zeros((2, 2), dtype=np.float32),
                duration_var=np.ones((2, 2), dtype=np.float32),
            )


class TestDumpTargets:
    @pytest.fixture(scope="class")
    def setup(self):
        from prosodykit import pipeline as pl

        corpus, _ = generate_synthetic_corpus(tiny_synth_spec())
        cfg = pl.RunConfig(
            corpus_dir="unused", mel_bins=16, phoneme_dim=8, speaker_dim=4,
            acoustic_latent_dim=2, duration_latent_dim=2, ref_hidden=8,
            decoder_hidden=8, decoder_layers=2, decoder_kernel=3,
            duration_hidden=8, predictor_hidden=8, context_dim=6,
        )
        torch.manual_seed(0)
        system = pl.Stage1System(cfg, len(corpus.phoneme_inventory), len(corpus.speakers))
        return corpus, system

    def test_one_entry_per_utterance_with_matching_word_counts(self, setup):
        corpus, system = setup
        store = dump_targets(corpus, system.acoustic, system.duration, system.speaker_table)
        assert len(store) == len(corpus)
        for u in corpus:
            assert store[u.id].n_words == u.n_words
            assert store[u.id].speaker_id == u.speaker_id

    def test_dump_twice_identical(self, setup):
        corpus, system = setup
        s1 = dump_targets(corpus, system.acoustic, system.duration, system.speaker_table)
        s2 = dump_targets(corpus, system.acoustic, system.duration, system.speaker_table)
        for uid, e in s1.items():
            np.testing.assert_array_equal(e.acoustic_mean, s2[uid].acoustic_mean)
            np.testing.assert_array_equal(e.duration_var, s2[uid].duration_var)

    def test_failure_names_utterance(self, setup, monkeypatch):
        corpus, system = setup

        def boom(*a, **k):
            raise RuntimeError("synthetic failure")

        monkeypatch.setattr(system.acoustic, "encode_reference", boom)
        with pytest.raises(RuntimeError, match=corpus.utterances[0].id):
            dump_targets(corpus, system.acoustic, system.duration, system.speaker_table)
