#!/usr/bin/env python3
"""Calibration for the 10-utterance overfit regime: recon drop, posterior
vs prior reconstruction, and duration fit accuracy."""

import argparse
import json
import time
from pathlib import Path

import numpy as np
import torch

from prosodykit import pipeline as pl
from prosodykit.acoustic import upsample_padded
from prosodykit.batching import collate
from prosodykit.corpus import SynthSpec, generate_synthetic_corpus, save_corpus
from prosodykit.duration import quantize_durations


def build_corpus(workdir: Path, seed: int = 23):
    spec = SynthSpec(
        n_speakers=2,
        n_utterances=10,
        words_per_utterance=(3, 3),
        phonemes_per_word=(2, 4),
        mel_bins=16,
        n_word_types=1,
        n_phoneme_types=8,
        speaker_rates=(0.8, 1.3),
        energy_spread=0.5,
        pitch_spread=1.2,
        rate_spread=0.0,
        energy_noise=0.35,
        pitch_noise=0.3,
        rate_noise=0.0,
        silence_prob=0.0,
        noise_level=0.01,
        seed=seed,
    )
    corpus, truth = generate_synthetic_corpus(spec)
    save_corpus(corpus, workdir / "corpus", prosody_truth=truth)
    return corpus, truth


def duration_fit(corpus, models):
    """Fraction of phonemes whose rounded self-prediction is within 1 frame."""
    hits = total = 0
    system = models.system
    with torch.no_grad():
        for u in corpus:
            batch = collate([u], models.phoneme_index(), models.speaker_index())
            spk = system.duration_table()(batch.speaker_idx)
            enc = system.duration.encode_phonemes(
                batch.phoneme_ids, batch.phoneme_lengths, batch.phoneme_mask
            )
            ups = upsample_padded(enc, batch.durations, batch.mel.shape[1])
            mu, _ = system.duration.encode_reference(
                batch.mel, ups, spk, batch.frame_mask, batch.word_of_frame, batch.max_words
            )
            real = system.duration.predict_durations(
                enc, mu, spk, batch.word_of_phoneme, batch.phoneme_mask
            )
            pred = quantize_durations(real[0])
            hits += int((np.abs(pred - u.durations) <= 1).sum())
            total += u.n_phonemes
    return hits / total


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", type=Path, required=True)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--anneal-start", type=int, default=2000)
    ap.add_argument("--anneal-end", type=int, default=12_000)
    ap.add_argument("--dur-anneal-end", type=int, default=12_000)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--tag", default="overfit")
    args = ap.parse_args()
    args.workdir.mkdir(parents=True, exist_ok=True)

    corpus, truth = build_corpus(args.workdir)
    cfg = pl.RunConfig(
        corpus_dir=str(args.workdir / "corpus"),
        mel_bins=16,
        phoneme_dim=32,
        speaker_dim=8,
        acoustic_latent_dim=8,
        duration_latent_dim=4,
        context_dim=16,
        ref_hidden=32,
        decoder_hidden=40,
        decoder_layers=3,
        duration_hidden=32,
        predictor_hidden=32,
        anneal_start=args.anneal_start,
        anneal_end=args.anneal_end,
        duration_anneal_start=args.anneal_start,
        duration_anneal_end=args.dur_anneal_end,
        learning_rate=args.lr,
        batch_size=10,
        steps=args.steps,
        seed=2,
        log_every=100,
    )
    logs = []
    t0 = time.time()
    ckpt = pl.train_stage1(cfg, on_step=logs.append)
    minutes = (time.time() - t0) / 60
    models = pl.load_models(ckpt)

    initial_recon = np.mean([l.acoustic_recon for l in logs[:20]])
    final_recon = np.mean([l.acoustic_recon for l in logs[-20:]])
    initial_dur = np.mean([l.duration_recon for l in logs[:20]])
    final_dur = np.mean([l.duration_recon for l in logs[-20:]])

    gen = torch.Generator().manual_seed(0)
    wins = 0
    post_list, prior_list = [], []
    for u in corpus:
        pm = pl.reconstruct_utterance(models, u, "posterior_mean")
        pr = pl.reconstruct_utterance(models, u, "prior_sample", generator=gen)
        mp = float(((pm - u.mel) ** 2).mean())
        mq = float(((pr - u.mel) ** 2).mean())
        post_list.append(mp)
        prior_list.append(mq)
        wins += mp < mq

    out = {
        "tag": args.tag,
        "minutes": minutes,
        "acoustic_recon_first": float(initial_recon),
        "acoustic_recon_last": float(final_recon),
        "acoustic_ratio": float(final_recon / initial_recon),
        "duration_recon_first": float(initial_dur),
        "duration_recon_last": float(final_dur),
        "duration_ratio": float(final_dur / initial_dur),
        "kl_last": logs[-1].acoustic_kl,
        "dur_kl_last": logs[-1].duration_kl,
        "posterior_wins": wins,
        "posterior_mse": post_list,
        "prior_mse": prior_list,
        "duration_fit_within_1": duration_fit(corpus, models),
    }
    (args.workdir / f"{args.tag}_report.json").write_text(json.dumps(out, indent=2))
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
