"""Objective evaluation: reconstruction error, prosody-transfer correlation,
a linear speaker-leakage probe, and machine-readable reports with optional
box-plot figures and a per-sample CSV next to the JSON."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Utterance, word_frame_spans


@dataclass
class MetricSummary:
    name: str
    value: float
    per_speaker: dict[str, float]
    n: int

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError(f"metric {self.name!r} reported with no samples")


@dataclass
class EvalReport:
    """Aggregated metrics plus fingerprints of what produced them."""

    metrics: list[MetricSummary]
    config_fingerprint: str
    checkpoint_fingerprint: str
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "metrics": [asdict(m) for m in self.metrics],
            "config_fingerprint": self.config_fingerprint,
            "checkpoint_fingerprint": self.checkpoint_fingerprint,
            "extra": self.extra,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        payload = json.loads(text)
        return cls(
            metrics=[MetricSummary(**m) for m in payload["metrics"]],
            config_fingerprint=payload["config_fingerprint"],
            checkpoint_fingerprint=payload["checkpoint_fingerprint"],
            extra=payload.get("extra", {}),
        )


def fingerprint(obj) -> str:
    """Stable SHA-256 hex digest of a JSON-serializable object."""
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()[:16]


def recon_metrics(pred: np.ndarray, ref: np.ndarray) -> dict:
    """Mean squared error overall and per mel band."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    sq = (pred - ref) ** 2
    return {"mse": float(sq.mean()), "per_band_mse": sq.mean(axis=0).tolist()}


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Pearson r, or None when either side has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("correlation inputs must have equal length")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float((xc**2).sum()) * float((yc**2).sum()))
    if denom == 0.0:
        return None
    return float((xc * yc).sum() / denom)


def per_word_durations(word_spans, durations) -> np.ndarray:
    """Total frames per word."""
    return np.array(
        [int(np.sum(np.asarray(durations)[s:e])) for s, e in word_spans], dtype=np.int64
    )


def per_word_energy(mel: np.ndarray, word_spans, durations) -> np.ndarray:
    """Mean mel magnitude per word (over that word's frames and all bins)."""
    out = np.empty(len(word_spans), dtype=np.float64)
    for w, (lo, hi) in enumerate(word_frame_spans(word_spans, durations)):
        out[w] = float(np.abs(mel[lo:hi]).mean()) if hi > lo else 0.0
    return out


def prosody_correlation(
    reference: Utterance,
    generated_mel: np.ndarray,
    generated_durations: np.ndarray,
    word_spans=None,
) -> dict:
    """Per-word correlation of rhythm (total durations) and loudness (mean
    energy) between a reference utterance and a generated one.

    Zero-variance sides yield None values (undefined, not an error).
    Requires at least 3 words for the correlation to mean anything.
    """
    spans = word_spans if word_spans is not None else reference.word_spans
    if len(spans) < 3:
        raise ValueError(f"need >= 3 words for correlations, got {len(spans)}")
    ref_dur = per_word_durations(reference.word_spans, reference.durations)
    gen_dur = per_word_durations(spans, generated_durations)
    if len(ref_dur) != len(gen_dur):
        raise ValueError("reference and generated word counts differ")
    ref_energy = per_word_energy(reference.mel, reference.word_spans, reference.durations)
    gen_energy = per_word_energy(generated_mel, spans, generated_durations)
    return {
        "duration_r": pearson(ref_dur, gen_dur),
        "energy_r": pearson(ref_energy, gen_energy),
    }


def speaker_probe(
    features: np.ndarray,
    labels: Sequence[str],
    seed: int = 0,
    train_fraction: float = 0.8,
    min_per_speaker: int = 100,
) -> dict:
    """Linear (multinomial logistic) probe for speaker identity.

    Trains on a deterministic 80/20 split of per-word feature rows and
    reports held-out accuracy next to chance (1 / n_speakers). The probe is
    deliberately linear: it measures linearly decodable leakage only.
    """
    from sklearn.linear_model import LogisticRegression

    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError("features must be [n_samples, dim] aligned with labels")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError(f"need >= 2 speakers, got {len(classes)}")
    short = {str(c): int(n) for c, n in zip(classes, counts) if n < min_per_speaker}
    if short:
        raise ValueError(
            f"need >= {min_per_speaker} words per speaker; short: {short}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    cut = int(round(train_fraction * len(labels)))
    train_idx, test_idx = order[:cut], order[cut:]
    clf = LogisticRegression(max_iter=2000)
    clf.fit(features[train_idx], labels[train_idx])
    accuracy = float(clf.score(features[test_idx], labels[test_idx]))
    return {
        "accuracy": accuracy,
        "chance": 1.0 / len(classes),
        "n_train": int(len(train_idx)),
        "n_test": int(len(test_idx)),
    }


def write_samples_csv(rows: list[dict], path: str | Path) -> Path:
    """Per-sample metric rows as CSV (the delimited side of the report)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return path
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def evaluate_checkpoint(
    ckpt,
    corpus,
    seed: int = 0,
    max_fpt_pairs: int = 40,
    probe_min_per_speaker: int = 100,
    targets=None,
) -> tuple[EvalReport, list[dict], dict]:
    """Compute the standard metric battery for a checkpoint on a corpus.

    Returns (report, tidy per-sample rows for CSV, per-speaker sample lists
    for box plots). Copy-synthesis and TTS reconstruction both decode with
    teacher durations so errors are computed frame-aligned against the
    ground-truth mel; prosody transfer runs the full duration-prediction
    path. The leakage probe runs on dumped word-level posterior means, with
    a positive control probing the speaker embeddings themselves.
    """
    import torch

    from . import pipeline as pl

    models = pl._ensure_models(ckpt)
    speakers = models.speakers
    rows: list[dict] = []
    samples: dict[str, dict[str, list[float]]] = {}
    metrics: list[MetricSummary] = []
    extra: dict = {}

    def add_sample(metric: str, speaker: str, value: float, utt_id: str, kind: str):
        rows.append(
            {"kind": kind, "utterance": utt_id, "speaker": speaker,
             "metric": metric, "value": value}
        )
        samples.setdefault(metric, {}).setdefault(speaker, []).append(value)

    def summarize(metric: str):
        by_speaker = samples.get(metric, {})
        values = [v for vs in by_speaker.values() for v in vs]
        if values:
            metrics.append(
                MetricSummary(
                    name=metric,
                    value=float(np.mean(values)),
                    per_speaker={s: float(np.mean(vs)) for s, vs in by_speaker.items()},
                    n=len(values),
                )
            )

    # Copy-synthesis and TTS reconstruction, frame-aligned.
    for utt in corpus:
        copy_mel = pl.reconstruct_utterance(models, utt, z_source="posterior_mean")
        copy_mse = recon_metrics(copy_mel, utt.mel)["mse"]
        add_sample("copy_synthesis_mse", utt.speaker_id, copy_mse, utt.id, "copy_synthesis")
        if models.predictor is not None:
            tts_mel = pl.reconstruct_with_predicted_prosody(models, utt)
            tts_mse = recon_metrics(tts_mel, utt.mel)["mse"]
            add_sample("tts_mse", utt.speaker_id, tts_mse, utt.id, "tts")
    summarize("copy_synthesis_mse")
    summarize("tts_mse")

    # Cross-speaker prosody transfer correlations.
    if len(speakers) >= 2:
        by_speaker_utts = {s: [u for u in corpus if u.speaker_id == s] for s in speakers}
        pairs = [(a, b) for a in speakers for b in speakers if a != b]
        rng = np.random.default_rng(seed)
        count = 0
        pair_cursor = {p: 0 for p in pairs}
        while count < max_fpt_pairs:
            progressed = False
            for a, b in pairs:
                if count >= max_fpt_pairs:
                    break
                pool = [u for u in by_speaker_utts[a] if u.n_words >= 3]
                if not pool:
                    continue
                ref = pool[pair_cursor[(a, b)] % len(pool)]
                pair_cursor[(a, b)] += 1
                gen_mel, gen_dur = pl.infer_fpt(ref, b, models)
                corr = prosody_correlation(ref, gen_mel, gen_dur)
                if corr["duration_r"] is not None:
                    add_sample("fpt_duration_r", b, corr["duration_r"], ref.id, "fpt")
                if corr["energy_r"] is not None:
                    add_sample("fpt_energy_r", b, corr["energy_r"], ref.id, "fpt")
                count += 1
                progressed = True
            if not progressed:
                break
        summarize("fpt_duration_r")
        summarize("fpt_energy_r")

    # Speaker-leakage probe on dumped acoustic posterior means, plus the
    # speaker-embedding positive control that validates the probe itself.
    if targets is None:
        targets = pl.dump_targets(corpus, models)
    features, labels = [], []
    for uid, entry in targets.items():
        features.append(entry.acoustic_mean)
        labels.extend([entry.speaker_id] * entry.n_words)
    features = np.vstack(features) if features else np.zeros((0, 1))
    try:
        probe = speaker_probe(
            features, labels, seed=seed, min_per_speaker=probe_min_per_speaker
        )
        sidx = models.speaker_index()
        with torch.no_grad():
            table = models.system.speaker_table.weight.cpu().numpy()
        control_features = np.vstack([table[sidx[lab]] for lab in labels])
        control = speaker_probe(
            control_features, labels, seed=seed, min_per_speaker=probe_min_per_speaker
        )
        metrics.append(
            MetricSummary("speaker_probe_accuracy", probe["accuracy"], {}, probe["n_test"])
        )
        metrics.append(
            MetricSummary("speaker_probe_chance", probe["chance"], {}, probe["n_test"])
        )
        metrics.append(
            MetricSummary(
                "speaker_probe_control_accuracy", control["accuracy"], {}, control["n_test"]
            )
        )
        if control["accuracy"] <= 0.95:
            extra["probe_warning"] = (
                "positive control accuracy <= 0.95; leakage numbers are void"
            )
    except ValueError as exc:
        extra["probe_skipped"] = str(exc)

    report = EvalReport(
        metrics=metrics,
        config_fingerprint=fingerprint(asdict(models.config)),
        checkpoint_fingerprint=pl.parameter_checksum(models.system),
        extra=extra,
    )
    return report, rows, samples


def emit_report(
    report: EvalReport,
    path: str | Path,
    plots: bool = False,
    samples_per_speaker: dict[str, dict[str, list[float]]] | None = None,
) -> Path:
    """Write the JSON report; with ``plots``, also render one box-plot image
    per metric that has per-speaker samples, next to the report."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n")
    if plots and samples_per_speaker:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for metric_name, by_speaker in samples_per_speaker.items():
            speakers = sorted(by_speaker)
            data = [by_speaker[s] for s in speakers]
            if not any(len(d) for d in data):
                continue
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.boxplot(data, tick_labels=speakers)
            ax.set_title(metric_name)
            ax.set_xlabel("speaker")
            ax.set_ylabel(metric_name)
            fig.tight_layout()
            fig.savefig(path.parent / f"{path.stem}_{metric_name}.png", dpi=120)
            plt.close(fig)
    return path
