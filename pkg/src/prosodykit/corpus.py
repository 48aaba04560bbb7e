"""Corpus data model, on-disk format, and a controllable synthetic corpus.

A corpus directory holds ``manifest.jsonl`` (one JSON object per utterance)
plus per-utterance mel files as raw little-endian float32, row-major
(frame, bin), no header. The synthetic generator additionally writes
``prosody_truth.jsonl`` with the per-word factors it used, so evaluation can
compare learned representations against known ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MANIFEST_NAME = "manifest.jsonl"
TRUTH_NAME = "prosody_truth.jsonl"
MEL_DIR = "mels"

# Synthetic mel band layout: a couple of low bins carry phoneme-onset
# markers, the middle band carries the spectral template, and the top bins
# carry a movable pitch-proxy bump.
N_ONSET_BINS = 2
N_PITCH_BINS = 6
MIN_MEL_BINS = 16


class CorpusError(Exception):
    """Corpus could not be read (missing files, malformed manifest)."""


class ValidationError(CorpusError):
    """A data invariant was violated; the message names the utterance and rule."""


def build_word_spans(word_lengths: Sequence[int]) -> list[tuple[int, int]]:
    """Turn per-word phoneme counts into contiguous (start, end) spans."""
    spans = []
    start = 0
    for i, n in enumerate(word_lengths):
        if n < 1:
            raise ValueError(f"word {i} has length {n}; every word needs >= 1 phoneme")
        spans.append((start, start + int(n)))
        start += int(n)
    return spans


def word_lengths_from_spans(word_spans: Sequence[tuple[int, int]]) -> list[int]:
    return [end - start for start, end in word_spans]


def word_frame_spans(
    word_spans: Sequence[tuple[int, int]], durations: Sequence[int]
) -> list[tuple[int, int]]:
    """Frame ranges per word, derived from phoneme spans and frame counts."""
    cum = np.concatenate([[0], np.cumsum(np.asarray(durations, dtype=np.int64))])
    return [(int(cum[s]), int(cum[e])) for s, e in word_spans]


def word_index_per_frame(
    word_spans: Sequence[tuple[int, int]], durations: Sequence[int]
) -> np.ndarray:
    """Word id owning each frame, length sum(durations)."""
    out = np.empty(int(np.sum(durations)), dtype=np.int64)
    for w, (lo, hi) in enumerate(word_frame_spans(word_spans, durations)):
        out[lo:hi] = w
    return out


def word_index_per_phoneme(word_spans: Sequence[tuple[int, int]]) -> np.ndarray:
    """Word id owning each phoneme index."""
    n = word_spans[-1][1] if word_spans else 0
    out = np.empty(n, dtype=np.int64)
    for w, (lo, hi) in enumerate(word_spans):
        out[lo:hi] = w
    return out


@dataclass
class Utterance:
    """One training or inference item.

    ``durations`` are integer frame counts per phoneme and must sum to the
    mel frame count; ``word_spans`` partition the phoneme index range.
    """

    id: str
    speaker_id: str
    text: str
    phonemes: list[str]
    word_spans: list[tuple[int, int]]
    durations: np.ndarray
    mel: np.ndarray

    def __post_init__(self):
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.mel = np.asarray(self.mel, dtype=np.float32)
        self.word_spans = [(int(a), int(b)) for a, b in self.word_spans]

    @property
    def n_phonemes(self) -> int:
        return len(self.phonemes)

    @property
    def n_words(self) -> int:
        return len(self.word_spans)

    @property
    def n_frames(self) -> int:
        return int(self.mel.shape[0])

    @property
    def n_bins(self) -> int:
        return int(self.mel.shape[1])

    def word_lengths(self) -> list[int]:
        return word_lengths_from_spans(self.word_spans)

    def word_frame_spans(self) -> list[tuple[int, int]]:
        return word_frame_spans(self.word_spans, self.durations)

    def validate(self) -> "Utterance":
        def bad(rule: str):
            raise ValidationError(f"utterance {self.id!r}: {rule}")

        if self.mel.ndim != 2:
            bad(f"mel must be 2-D (frames, bins), got shape {self.mel.shape}")
        if len(self.durations) != len(self.phonemes):
            bad(
                f"durations length {len(self.durations)} != phoneme count {len(self.phonemes)}"
            )
        if (self.durations < 0).any():
            bad("negative phoneme duration")
        if int(self.durations.sum()) != self.n_frames:
            bad(
                f"sum(durations)={int(self.durations.sum())} does not match "
                f"mel frame count T={self.n_frames}"
            )
        if not self.word_spans:
            bad("no word spans")
        prev_end = 0
        for w, (start, end) in enumerate(self.word_spans):
            if start != prev_end:
                bad(f"word span {w} starts at {start}, expected {prev_end} (spans must be contiguous)")
            if end <= start:
                bad(f"word span {w} is empty ({start}, {end})")
            prev_end = end
        if prev_end != len(self.phonemes):
            bad(
                f"word spans cover [0, {prev_end}) but there are {len(self.phonemes)} phonemes"
            )
        for w, (start, end) in enumerate(self.word_spans):
            if int(self.durations[start:end].sum()) < 1:
                bad(f"word {w} owns zero frames; every word needs >= 1 frame")
        if not np.isfinite(self.mel).all():
            bad("non-finite mel values")
        return self


@dataclass
class Corpus:
    """Immutable-after-load collection of utterances plus id inventories."""

    utterances: list[Utterance]
    speakers: list[str]
    phoneme_inventory: list[str]
    _by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {u.id: u for u in self.utterances}

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def by_id(self, utterance_id: str) -> Utterance:
        try:
            return self._by_id[utterance_id]
        except KeyError:
            raise KeyError(f"no utterance with id {utterance_id!r}") from None

    def speaker_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.speakers)}

    def phoneme_index(self) -> dict[str, int]:
        return {p: i for i, p in enumerate(self.phoneme_inventory)}

    def validate(self) -> "Corpus":
        speakers = set(self.speakers)
        inventory = set(self.phoneme_inventory)
        ids = [u.id for u in self.utterances]
        if ids != sorted(ids):
            raise ValidationError("utterances are not ordered by id")
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate utterance ids")
        for u in self.utterances:
            u.validate()
            if u.speaker_id not in speakers:
                raise ValidationError(
                    f"utterance {u.id!r}: speaker {u.speaker_id!r} not in corpus speakers"
                )
            missing = set(u.phonemes) - inventory
            if missing:
                raise ValidationError(
                    f"utterance {u.id!r}: phonemes {sorted(missing)} not in inventory"
                )
        return self


def _derive_corpus(utterances: list[Utterance]) -> Corpus:
    utterances = sorted(utterances, key=lambda u: u.id)
    speakers = sorted({u.speaker_id for u in utterances})
    inventory = sorted({p for u in utterances for p in u.phonemes})
    return Corpus(utterances, speakers, inventory)


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def save_corpus(corpus: Corpus, path: str | Path, prosody_truth: dict | None = None) -> Path:
    """Write a corpus directory (manifest + raw-float mel files).

    `prosody_truth`, when given, is written to the sidecar keyed by
    utterance id.
    """
    path = Path(path)
    (path / MEL_DIR).mkdir(parents=True, exist_ok=True)
    lines = []
    for u in sorted(corpus.utterances, key=lambda u: u.id):
        mel_rel = f"{MEL_DIR}/{u.id}.f32"
        (path / mel_rel).write_bytes(np.ascontiguousarray(u.mel, dtype="<f4").tobytes())
        lines.append(
            json.dumps(
                {
                    "id": u.id,
                    "speaker_id": u.speaker_id,
                    "text": u.text,
                    "phonemes": u.phonemes,
                    "word_lengths": u.word_lengths(),
                    "durations": [int(d) for d in u.durations],
                    "mel_file": mel_rel,
                    "n_frames": u.n_frames,
                    "n_bins": u.n_bins,
                },
                sort_keys=True,
            )
        )
    (path / MANIFEST_NAME).write_text("\n".join(lines) + ("\n" if lines else ""))
    if prosody_truth is not None:
        truth_lines = [
            json.dumps({"id": uid, **prosody_truth[uid]}, sort_keys=True)
            for uid in sorted(prosody_truth)
        ]
        (path / TRUTH_NAME).write_text("\n".join(truth_lines) + ("\n" if truth_lines else ""))
    return path


def load_corpus(path: str | Path) -> Corpus:
    """Load and validate a corpus directory; utterances come back sorted by id."""
    path = Path(path)
    manifest = path / MANIFEST_NAME
    if not manifest.exists():
        raise CorpusError(f"missing corpus manifest: {manifest}")
    utterances = []
    for line_no, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{manifest}:{line_no}: malformed JSON: {exc}") from exc
        mel_path = path / rec["mel_file"]
        if not mel_path.exists():
            raise CorpusError(f"utterance {rec['id']!r}: missing mel file {mel_path}")
        raw = mel_path.read_bytes()
        n_frames, n_bins = int(rec["n_frames"]), int(rec["n_bins"])
        expected = n_frames * n_bins * 4
        if len(raw) != expected:
            raise ValidationError(
                f"utterance {rec['id']!r}: mel file holds {len(raw)} bytes, "
                f"expected {expected} for {n_frames}x{n_bins} float32"
            )
        mel = np.frombuffer(raw, dtype="<f4").reshape(n_frames, n_bins)
        utt = Utterance(
            id=rec["id"],
            speaker_id=rec["speaker_id"],
            text=rec["text"],
            phonemes=list(rec["phonemes"]),
            word_spans=build_word_spans(rec["word_lengths"]),
            durations=np.asarray(rec["durations"], dtype=np.int64),
            mel=mel.copy(),
        )
        utt.validate()
        utterances.append(utt)
    return _derive_corpus(utterances).validate()


def load_prosody_truth(path: str | Path) -> dict[str, dict]:
    """Read the synthetic ground-truth sidecar, keyed by utterance id."""
    path = Path(path)
    if path.is_dir():
        path = path / TRUTH_NAME
    if not path.exists():
        raise CorpusError(f"missing prosody truth sidecar: {path}")
    truth = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        truth[rec.pop("id")] = rec
    return truth


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a deterministic multi-speaker corpus with known prosody.

    Word-level prosody factors (energy gain, pitch-proxy band offset, rate
    multiplier) have a word-type component (drawn once per lexicon entry, so
    text carries a learnable prosody signal) plus per-instance jitter whose
    magnitude is controlled per factor; the instance part is irreducible
    from text alone. Speaker tempo multipliers give each speaker a distinct
    duration distribution.
    """

    n_speakers: int = 4
    n_utterances: int = 200
    words_per_utterance: tuple[int, int] = (5, 9)
    phonemes_per_word: tuple[int, int] = (2, 5)
    mel_bins: int = 80
    n_phoneme_types: int = 24
    n_word_types: int = 40
    speaker_rates: tuple[float, ...] | None = None
    timbre_strength: float = 0.12
    energy_spread: float = 0.5
    pitch_spread: float = 1.5
    rate_spread: float = 0.3
    word_rate_choices: tuple[float, ...] | None = None
    energy_noise: float = 0.05
    pitch_noise: float = 0.05
    rate_noise: float = 0.2
    silence_prob: float = 0.2
    noise_level: float = 0.02
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.n_speakers < 1 or self.n_utterances < 1:
            raise ValueError("n_speakers and n_utterances must be positive")
        for name, (lo, hi) in (
            ("words_per_utterance", self.words_per_utterance),
            ("phonemes_per_word", self.phonemes_per_word),
        ):
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} range ({lo}, {hi}) is empty or non-positive")
        if self.mel_bins < MIN_MEL_BINS:
            raise ValueError(f"mel_bins must be >= {MIN_MEL_BINS}, got {self.mel_bins}")
        if self.n_phoneme_types < 2 or self.n_word_types < 1:
            raise ValueError("need at least 2 phoneme types and 1 word type")
        if self.speaker_rates is not None:
            if len(self.speaker_rates) != self.n_speakers:
                raise ValueError("speaker_rates length must equal n_speakers")
            if any(r <= 0 for r in self.speaker_rates):
                raise ValueError("speaker rate multipliers must be > 0")
        if self.word_rate_choices is not None and (
            not self.word_rate_choices or any(r <= 0 for r in self.word_rate_choices)
        ):
            raise ValueError("word_rate_choices must be non-empty and > 0")
        levels = (
            self.energy_spread, self.rate_spread, self.energy_noise,
            self.pitch_noise, self.rate_noise, self.noise_level,
        )
        if min(levels) < 0:
            raise ValueError("spreads and noise levels must be >= 0")
        return self


def band_layout(n_bins: int) -> tuple[slice, slice, slice]:
    """(onset, template, pitch) bin slices of a synthetic mel."""
    if n_bins < MIN_MEL_BINS:
        raise ValueError(f"need at least {MIN_MEL_BINS} mel bins, got {n_bins}")
    return (
        slice(0, N_ONSET_BINS),
        slice(N_ONSET_BINS, n_bins - N_PITCH_BINS),
        slice(n_bins - N_PITCH_BINS, n_bins),
    )


_BASE_DURATION_RANGE = (2, 7)  # integers, upper exclusive
_ONSET_AMPLITUDE = 1.2
_PITCH_AMPLITUDE = 1.5
_PITCH_SIGMA = 0.7


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def generate_synthetic_corpus(spec: SynthSpec) -> tuple[Corpus, dict[str, dict]]:
    """Generate a corpus plus its per-word ground-truth factor sidecar.

    Deterministic for a given spec (including seed). Per frame, the mel is
    a per-speaker spectral template scaled by the word's energy gain, with
    a pitch-proxy bump at a band position shifted by the word's pitch
    offset, an onset marker on each phoneme's first frame, and optional
    additive noise.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    m = spec.mel_bins
    onset_band, template_band, pitch_band = band_layout(m)
    template_bins = np.arange(template_band.start, template_band.stop)
    n_template = len(template_bins)

    # Phoneme prototypes on the template band, normalized to mean 1 there so
    # per-word mean template energy equals the word's energy gain exactly.
    phoneme_names = [f"p{j:02d}" for j in range(spec.n_phoneme_types)] + ["sil"]
    n_ph = len(phoneme_names)
    centers = rng.uniform(template_band.start + 1, template_band.stop - 2, size=n_ph)
    widths = rng.uniform(0.8, 2.5, size=n_ph)
    centers2 = rng.uniform(template_band.start + 1, template_band.stop - 2, size=n_ph)
    protos = np.zeros((n_ph, m), dtype=np.float64)
    for j in range(n_ph):
        shape = (
            0.25
            + np.exp(-0.5 * ((template_bins - centers[j]) / widths[j]) ** 2)
            + 0.4 * np.exp(-0.5 * ((template_bins - centers2[j]) / (widths[j] + 0.5)) ** 2)
        )
        protos[j, template_band] = shape / shape.mean()
    base_durations = rng.integers(*_BASE_DURATION_RANGE, size=n_ph)

    # Speaker traits: a zero-mean timbre curve on the template band (keeps
    # the gain-recovery identity intact), a pitch-proxy base position, and a
    # tempo multiplier.
    speaker_ids = [f"spk{s}" for s in range(spec.n_speakers)]
    timbre_freq = rng.integers(1, 3, size=spec.n_speakers)
    timbre_phase = rng.uniform(0, 2 * math.pi, size=spec.n_speakers)
    # Speaker pitch bases cluster near the band center: word offsets, not
    # speaker identity, dominate the bump position.
    pitch_center = (pitch_band.start + pitch_band.stop - 1) / 2
    pitch_base = rng.uniform(pitch_center - 0.5, pitch_center + 0.5, size=spec.n_speakers)
    timbres = np.zeros((spec.n_speakers, m), dtype=np.float64)
    for s in range(spec.n_speakers):
        curve = spec.timbre_strength * np.sin(
            2 * math.pi * timbre_freq[s] * np.arange(n_template) / n_template + timbre_phase[s]
        )
        timbres[s, template_band] = curve - curve.mean()
    if spec.speaker_rates is not None:
        speaker_rates = np.asarray(spec.speaker_rates, dtype=np.float64)
    elif spec.n_speakers == 1:
        speaker_rates = np.ones(1)
    else:
        speaker_rates = np.linspace(0.7, 1.45, spec.n_speakers)

    # Word lexicon: phoneme sequence and type-level prosody factors.
    w_lo, w_hi = spec.words_per_utterance
    p_lo, p_hi = spec.phonemes_per_word
    lexicon = []
    for t in range(spec.n_word_types):
        n = int(rng.integers(p_lo, p_hi + 1))
        seq = rng.integers(0, spec.n_phoneme_types, size=n).tolist()
        lexicon.append(seq)
    type_energy = np.exp(rng.normal(0.0, spec.energy_spread, size=spec.n_word_types))
    type_pitch = rng.uniform(-spec.pitch_spread, spec.pitch_spread, size=spec.n_word_types)
    if spec.word_rate_choices is not None:
        type_rate = rng.choice(np.asarray(spec.word_rate_choices, dtype=np.float64),
                               size=spec.n_word_types)
    else:
        type_rate = np.exp(rng.normal(0.0, spec.rate_spread, size=spec.n_word_types))

    sil_index = n_ph - 1
    pad = len(str(max(spec.n_utterances - 1, 1)))
    id_width = max(4, pad)
    utterances = []
    truth: dict[str, dict] = {}
    for u in range(spec.n_utterances):
        s = u % spec.n_speakers
        n_words = int(rng.integers(w_lo, w_hi + 1))
        types = rng.integers(0, spec.n_word_types, size=n_words)
        gains = type_energy[types] * np.exp(rng.normal(0.0, spec.energy_noise, size=n_words))
        offsets = type_pitch[types] + rng.normal(0.0, spec.pitch_noise, size=n_words)
        rates = type_rate[types] * np.exp(rng.normal(0.0, spec.rate_noise, size=n_words))
        with_sil = rng.random(size=n_words) < spec.silence_prob

        phoneme_idx: list[int] = []
        word_lengths = []
        for w in range(n_words):
            seq = list(lexicon[types[w]])
            if with_sil[w]:
                seq = seq + [sil_index]
            phoneme_idx.extend(seq)
            word_lengths.append(len(seq))
        spans = build_word_spans(word_lengths)

        durations = np.empty(len(phoneme_idx), dtype=np.int64)
        for w, (lo, hi) in enumerate(spans):
            scaled = base_durations[phoneme_idx[lo:hi]] * speaker_rates[s] * rates[w]
            durations[lo:hi] = np.maximum(_round_half_away(scaled), 1)

        frames = np.zeros((int(durations.sum()), m), dtype=np.float64)
        t = 0
        for w, (lo, hi) in enumerate(spans):
            center = float(np.clip(pitch_base[s] + offsets[w], pitch_band.start + 0.8,
                                   pitch_band.stop - 1 - 0.8))
            pitch_bump = np.zeros(m)
            pb = np.arange(pitch_band.start, pitch_band.stop)
            pitch_bump[pitch_band] = _PITCH_AMPLITUDE * np.exp(
                -0.5 * ((pb - center) / _PITCH_SIGMA) ** 2
            )
            for p in range(lo, hi):
                base = protos[phoneme_idx[p]] + timbres[s] + pitch_bump
                block = np.tile(base, (durations[p], 1))
                block[0, onset_band] += _ONSET_AMPLITUDE
                frames[t : t + durations[p]] = gains[w] * block
                t += int(durations[p])
        if spec.noise_level > 0:
            frames = frames + rng.normal(0.0, spec.noise_level, size=frames.shape)

        uid = f"utt-{u:0{id_width}d}"
        words_text = " ".join(f"w{types[w]:02d}" for w in range(n_words))
        utt = Utterance(
            id=uid,
            speaker_id=speaker_ids[s],
            text=words_text,
            phonemes=[phoneme_names[j] for j in phoneme_idx],
            word_spans=spans,
            durations=durations,
            mel=frames.astype(np.float32),
        )
        utt.validate()
        utterances.append(utt)
        truth[uid] = {
            "speaker_rate": float(speaker_rates[s]),
            "energy_gain": [float(g) for g in gains],
            "pitch_offset": [float(o) for o in offsets],
            "rate_multiplier": [float(r) for r in rates],
        }

    corpus = _derive_corpus(utterances)
    corpus.validate()
    return corpus, truth
