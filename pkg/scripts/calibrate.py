#!/usr/bin/env python3
"""Calibration harness: trains Stage I/II on a synthetic corpus and reports
the acceptance-style metrics, so schedule/size choices can be tuned before
freezing the acceptance configuration."""

import argparse
import json
import time
from pathlib import Path

import numpy as np
import torch

from prosodykit import pipeline as pl
from prosodykit.corpus import SynthSpec, generate_synthetic_corpus, save_corpus
from prosodykit.evalkit import pearson, prosody_correlation, speaker_probe


def build_corpus(workdir: Path, seed: int = 11):
    spec = SynthSpec(
        n_speakers=4,
        n_utterances=200,
        words_per_utterance=(4, 7),
        phonemes_per_word=(2, 4),
        mel_bins=20,
        speaker_rates=(0.6, 0.9, 1.2, 1.5),
        energy_spread=0.7,
        pitch_spread=1.5,
        word_rate_choices=(1.0, 2.0),
        energy_noise=0.02,
        pitch_noise=0.05,
        rate_noise=0.12,
        noise_level=0.02,
        seed=seed,
    )
    corpus, truth = generate_synthetic_corpus(spec)
    save_corpus(corpus, workdir / "corpus", prosody_truth=truth)
    return corpus, truth


def stage1_config(workdir: Path, steps: int, anneal_end: int, dur_anneal_end: int, anneal_start: int = 3000):
    return pl.RunConfig(
        corpus_dir=str(workdir / "corpus"),
        mel_bins=20,
        phoneme_dim=32,
        speaker_dim=8,
        acoustic_latent_dim=8,
        duration_latent_dim=4,
        context_dim=16,
        ref_hidden=32,
        ref_layers=2,
        decoder_hidden=40,
        decoder_layers=3,
        decoder_kernel=5,
        duration_hidden=32,
        predictor_hidden=48,
        anneal_start=anneal_start,
        anneal_end=anneal_end,
        duration_anneal_start=anneal_start,
        duration_anneal_end=dur_anneal_end,
        learning_rate=1.5e-3,
        stage2_learning_rate=2e-3,
        batch_size=16,
        steps=steps,
        stage2_steps=3000,
        seed=1,
        log_every=200,
    )


def type_rate_estimates(corpus, truth):
    """Geometric-mean instance rate per word type name, from the sidecar."""
    sums, counts = {}, {}
    for u in corpus:
        for name, rate in zip(u.text.split(), truth[u.id]["rate_multiplier"]):
            sums[name] = sums.get(name, 0.0) + np.log(rate)
            counts[name] = counts.get(name, 0) + 1
    return {name: np.exp(sums[name] / counts[name]) for name in sums}


def rhythm_metrics(corpus, truth, models, n_pairs=40):
    speakers = models.speakers
    mean_dur = {
        s: float(np.mean(np.concatenate([u.durations for u in corpus if u.speaker_id == s])))
        for s in speakers
    }
    type_rates = type_rate_estimates(corpus, truth)
    pairs = [(a, b) for a in speakers for b in speakers if a != b]
    cursor = {p: 0 for p in pairs}
    rs, closer, energy_rs, resid_gen, resid_true = [], [], [], [], []
    count = 0
    while count < n_pairs:
        for a, b in pairs:
            if count >= n_pairs:
                break
            pool = [u for u in corpus if u.speaker_id == a and u.n_words >= 3]
            ref = pool[cursor[(a, b)] % len(pool)]
            cursor[(a, b)] += 1
            mel, dur = pl.infer_fpt(ref, b, models)
            corr = prosody_correlation(ref, mel, dur)
            if corr["duration_r"] is not None:
                rs.append(corr["duration_r"])
            if corr["energy_r"] is not None:
                energy_rs.append(corr["energy_r"])
            # residual rhythm: does the transfer carry the reference's
            # per-instance rate deviation from its word type's mean rate?
            rates = truth[ref.id]["rate_multiplier"]
            names = ref.text.split()
            for w, (s_, e_) in enumerate(ref.word_spans):
                gen_mean_dur = float(np.mean(dur[s_:e_]))
                resid_gen.append(np.log(gen_mean_dur) - np.log(type_rates[names[w]]))
                resid_true.append(np.log(rates[w]) - np.log(type_rates[names[w]]))
            gen_mean = float(np.mean(dur))
            closer.append(abs(gen_mean - mean_dur[b]) < abs(gen_mean - mean_dur[a]))
            count += 1
    return {
        "duration_r_mean": float(np.mean(rs)),
        "duration_r_min": float(np.min(rs)),
        "energy_r_mean": float(np.mean(energy_rs)),
        "instance_rate_residual_r": pearson(resid_gen, resid_true),
        "closer_to_target_frac": float(np.mean(closer)),
    }


def probe_metrics(corpus, truth, models):
    targets = pl.dump_targets(corpus, models)
    feats, labels, rate_feats, rate_vals = [], [], [], []
    for uid, e in targets.items():
        feats.append(e.acoustic_mean)
        labels.extend([e.speaker_id] * e.n_words)
        r = truth[uid]["rate_multiplier"]
        for w in range(e.n_words):
            rate_feats.append(e.duration_mean[w])
            rate_vals.append(r[w])
    feats = np.vstack(feats)
    probe = speaker_probe(feats, labels, seed=0)
    rate_feats = np.vstack(rate_feats)
    rate_vals = np.asarray(rate_vals)
    # bimodal word-type rates (1.0 vs 2.0): threshold at the geometric mid
    rate_cls = np.where(rate_vals > np.sqrt(2.0), "fast", "slow")
    rate_probe = speaker_probe(rate_feats, rate_cls, seed=0, min_per_speaker=50)
    return {
        "speaker_probe_acc": probe["accuracy"],
        "speaker_chance": probe["chance"],
        "rate_split_acc": rate_probe["accuracy"],
    }, targets


def recon_quality(corpus, models, n=24):
    gen = torch.Generator().manual_seed(0)
    post, prior, wins = [], [], 0
    for u in corpus.utterances[:n]:
        pm = pl.reconstruct_utterance(models, u, "posterior_mean")
        pr = pl.reconstruct_utterance(models, u, "prior_sample", generator=gen)
        mp = float(((pm - u.mel) ** 2).mean())
        mq = float(((pr - u.mel) ** 2).mean())
        post.append(mp)
        prior.append(mq)
        wins += mp < mq
    return {
        "posterior_mse": float(np.mean(post)),
        "prior_mse": float(np.mean(prior)),
        "posterior_wins": wins,
        "n": n,
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", type=Path, required=True)
    ap.add_argument("--steps", type=int, default=4000)
    ap.add_argument("--anneal-start", type=int, default=3000)
    ap.add_argument("--anneal-end", type=int, default=60_000)
    ap.add_argument("--dur-anneal-end", type=int, default=2_000_000)
    ap.add_argument("--stage2", action="store_true")
    ap.add_argument("--tag", default="run")
    args = ap.parse_args()
    args.workdir.mkdir(parents=True, exist_ok=True)

    corpus, truth = build_corpus(args.workdir)
    cfg = stage1_config(args.workdir, args.steps, args.anneal_end, args.dur_anneal_end, args.anneal_start)
    logs = []
    t0 = time.time()
    ckpt = pl.train_stage1(cfg, on_step=lambda l: logs.append(l) if l.step % 100 == 0 else None)
    t1 = time.time()
    models = pl.load_models(ckpt)
    pl.save_checkpoint(ckpt, args.workdir / f"{args.tag}_stage1.pt")

    out = {
        "tag": args.tag,
        "steps": args.steps,
        "anneal_end": args.anneal_end,
        "dur_anneal_end": args.dur_anneal_end,
        "train_minutes": (t1 - t0) / 60,
        "loss_first": logs[0].__dict__,
        "loss_last": logs[-1].__dict__,
    }
    out["rhythm"] = rhythm_metrics(corpus, truth, models)
    probes, targets = probe_metrics(corpus, truth, models)
    out["probes"] = probes
    out["recon"] = recon_quality(corpus, models)

    if args.stage2:
        s2_logs = []
        ck2 = pl.train_stage2(cfg, ckpt, targets=targets, on_step=s2_logs.append)
        losses = [l.loss for l in s2_logs]
        k = 100
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        out["stage2"] = {
            "initial": losses[0],
            "final_smooth": float(smooth[-1]),
            "initial_smooth": float(smooth[0]),
            "ratio": float(smooth[-1] / smooth[0]),
            "monotone_violations": int((np.diff(smooth) > 1e-9).sum()),
        }
        models2 = pl.load_models(ck2)
        tts_mse, copy_mse = [], []
        for u in corpus.utterances[:24]:
            tm = pl.reconstruct_with_predicted_prosody(models2, u)
            cm = pl.reconstruct_utterance(models2, u, "posterior_mean")
            tts_mse.append(float(((tm - u.mel) ** 2).mean()))
            copy_mse.append(float(((cm - u.mel) ** 2).mean()))
        out["stage2"]["tts_mse"] = float(np.mean(tts_mse))
        out["stage2"]["copy_mse"] = float(np.mean(copy_mse))
        out["stage2"]["tts_over_copy"] = float(np.mean(tts_mse) / np.mean(copy_mse))

    report_path = args.workdir / f"{args.tag}_report.json"
    report_path.write_text(json.dumps(out, indent=2))
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
