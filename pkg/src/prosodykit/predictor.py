"""Prosody predictor: maps text context plus speaker embedding to per-word
Gaussian parameters for the acoustic and duration latents, trained against
posteriors dumped from the trained reference encoders."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Protocol

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .acoustic import LOGVAR_RANGE, upsample_padded
from .batching import collate
from .corpus import Corpus, Utterance
from .distributions import DiagGaussianSeq, kl_diag_gaussians


@dataclass
class ContextEmbeddings:
    """Per-token contextual embeddings plus the token-to-word assignment.

    ``token_to_word`` must be non-decreasing and cover every word index in
    [0, n_words) at least once.
    """

    embeddings: np.ndarray  # [N_tokens, D] float32
    token_to_word: list[int]

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.token_to_word):
            raise ValueError("one embedding row per token is required")
        if any(b < a for a, b in zip(self.token_to_word, self.token_to_word[1:])):
            raise ValueError("token_to_word must be non-decreasing")
        if self.token_to_word:
            covered = set(self.token_to_word)
            if covered != set(range(max(covered) + 1)):
                raise ValueError("token_to_word must cover every word index")

    @property
    def n_words(self) -> int:
        return self.token_to_word[-1] + 1 if self.token_to_word else 0

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])


class TextEmbedder(Protocol):
    """Anything that maps raw text to ContextEmbeddings."""

    dim: int

    def __call__(self, text: str) -> ContextEmbeddings: ...


class HashTextEmbedder:
    """Deterministic, training-free embedder for hermetic runs.

    Words are split on whitespace; words longer than four characters yield
    two sub-tokens. Each token's vector is seeded from a stable hash of the
    token string, so identical tokens embed identically across processes.
    """

    def __init__(self, dim: int = 32):
        if dim < 1:
            raise ValueError("embedding dim must be positive")
        self.dim = dim

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        seed = int.from_bytes(digest, "little")
        rng = np.random.default_rng(seed)
        return (rng.standard_normal(self.dim) / np.sqrt(self.dim)).astype(np.float32)

    def __call__(self, text: str) -> ContextEmbeddings:
        words = text.split()
        vectors = []
        token_to_word = []
        for w, word in enumerate(words):
            if len(word) > 4:
                mid = (len(word) + 1) // 2
                tokens = [word[:mid], word[mid:]]
            else:
                tokens = [word]
            for tok in tokens:
                vectors.append(self._token_vector(tok))
                token_to_word.append(w)
        emb = np.stack(vectors) if vectors else np.zeros((0, self.dim), dtype=np.float32)
        return ContextEmbeddings(emb, token_to_word)


class PretrainedTextEmbedder:
    """Adapter for an external contextual embedder (tokenizer + encoder).

    Expects a fast tokenizer exposing ``word_ids()`` and a model returning
    ``last_hidden_state``, the transformers convention. The embedder is used
    frozen; nothing here fine-tunes it.
    """

    def __init__(self, tokenizer, model, dim: int | None = None):
        self.tokenizer = tokenizer
        self.model = model
        self.dim = dim if dim is not None else int(model.config.hidden_size)

    def __call__(self, text: str) -> ContextEmbeddings:
        enc = self.tokenizer(text, return_tensors="pt")
        with torch.no_grad():
            hidden = self.model(**enc).last_hidden_state[0]
        word_ids = enc.word_ids()
        keep = [i for i, w in enumerate(word_ids) if w is not None]
        token_to_word = [int(word_ids[i]) for i in keep]
        emb = hidden[keep].cpu().numpy().astype(np.float32)
        return ContextEmbeddings(emb, token_to_word)


def embed_context(
    text: str, embedder: TextEmbedder, expected_words: int | None = None
) -> ContextEmbeddings:
    """Run the embedder and check the word segmentation against the corpus."""
    ce = embedder(text)
    if expected_words is not None and ce.n_words != expected_words:
        raise ValueError(
            f"text yields {ce.n_words} words but the utterance has {expected_words}"
        )
    return ce


def pool_to_words(ce: ContextEmbeddings) -> Tensor:
    """Mean-pool token embeddings per word: [W, D]."""
    w = ce.n_words
    out = torch.zeros(w, ce.dim)
    counts = torch.zeros(w)
    idx = torch.tensor(ce.token_to_word, dtype=torch.long)
    if len(ce.token_to_word):
        out.index_add_(0, idx, torch.from_numpy(ce.embeddings))
        counts.index_add_(0, idx, torch.ones(len(ce.token_to_word)))
    return out / counts.clamp_min(1.0).unsqueeze(-1)


class ProsodyPredictor(nn.Module):
    """Four recurrent sequence heads over speaker-augmented word embeddings,
    one per predicted parameter tensor (acoustic mean / variance, duration
    mean / variance). Variance heads exponentiate a log-variance output."""

    def __init__(
        self,
        context_dim: int,
        speaker_dim: int,
        acoustic_latent_dim: int = 8,
        duration_latent_dim: int = 4,
        hidden: int = 64,
    ):
        super().__init__()
        self.in_proj = nn.Linear(context_dim + speaker_dim, hidden)
        self.heads = nn.ModuleDict(
            {
                name: nn.LSTM(hidden, hidden, batch_first=True)
                for name in ("acoustic_mean", "acoustic_logvar", "duration_mean", "duration_logvar")
            }
        )
        self.out = nn.ModuleDict(
            {
                "acoustic_mean": nn.Linear(hidden, acoustic_latent_dim),
                "acoustic_logvar": nn.Linear(hidden, acoustic_latent_dim),
                "duration_mean": nn.Linear(hidden, duration_latent_dim),
                "duration_logvar": nn.Linear(hidden, duration_latent_dim),
            }
        )
        self.context_dim = context_dim
        self.acoustic_latent_dim = acoustic_latent_dim
        self.duration_latent_dim = duration_latent_dim

    def forward(
        self, word_embeddings: Tensor, speaker: Tensor, n_words: Tensor
    ) -> tuple[DiagGaussianSeq, DiagGaussianSeq]:
        """[B, W, D_ctx] + [B, E] -> per-word Gaussians [B, W, H], [B, W, H_dur]."""
        if word_embeddings.shape[-1] != self.context_dim:
            raise ValueError(
                f"expected context dim {self.context_dim}, got {word_embeddings.shape[-1]}"
            )
        b, w, _ = word_embeddings.shape
        spk = speaker.unsqueeze(1).expand(b, w, -1)
        h = torch.tanh(self.in_proj(torch.cat([word_embeddings, spk], dim=-1)))
        outs = {}
        for name, lstm in self.heads.items():
            packed = pack_padded_sequence(
                h, n_words.cpu(), batch_first=True, enforce_sorted=False
            )
            seq, _ = lstm(packed)
            seq, _ = pad_packed_sequence(seq, batch_first=True, total_length=w)
            outs[name] = self.out[name](seq)
        acoustic = DiagGaussianSeq(
            outs["acoustic_mean"],
            torch.exp(torch.clamp(outs["acoustic_logvar"], *LOGVAR_RANGE)),
        )
        duration = DiagGaussianSeq(
            outs["duration_mean"],
            torch.exp(torch.clamp(outs["duration_logvar"], *LOGVAR_RANGE)),
        )
        return acoustic, duration


def predictor_loss(
    predicted: tuple[DiagGaussianSeq, DiagGaussianSeq],
    target: tuple[DiagGaussianSeq, DiagGaussianSeq],
) -> Tensor:
    """Sum over words of KL(predicted || target) for both latent streams.

    The predicted distribution is the first KL argument. Zero iff the
    predictions match the targets exactly.
    """
    pred_a, pred_d = predicted
    tgt_a, tgt_d = target
    if pred_a.mean.shape[-2] != tgt_a.mean.shape[-2] or pred_d.mean.shape[-2] != tgt_d.mean.shape[-2]:
        raise ValueError(
            f"word count mismatch: predicted {pred_a.mean.shape[-2]}/{pred_d.mean.shape[-2]} "
            f"vs target {tgt_a.mean.shape[-2]}/{tgt_d.mean.shape[-2]}"
        )
    return kl_diag_gaussians(pred_a, tgt_a).sum() + kl_diag_gaussians(pred_d, tgt_d).sum()


# ---------------------------------------------------------------------------
# Dumped posterior targets
# ---------------------------------------------------------------------------

@dataclass
class TargetEntry:
    """Per-utterance word-level posterior parameters from the trained
    reference encoders (acoustic and duration streams)."""

    speaker_id: str
    acoustic_mean: np.ndarray   # [W, H] float32
    acoustic_var: np.ndarray    # [W, H] float32
    duration_mean: np.ndarray   # [W, H_dur] float32
    duration_var: np.ndarray    # [W, H_dur] float32

    def __post_init__(self):
        for name in ("acoustic_mean", "acoustic_var", "duration_mean", "duration_var"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))
        if self.acoustic_mean.shape != self.acoustic_var.shape:
            raise ValueError("acoustic mean/var shapes differ")
        if self.duration_mean.shape != self.duration_var.shape:
            raise ValueError("duration mean/var shapes differ")
        if self.acoustic_mean.shape[0] != self.duration_mean.shape[0]:
            raise ValueError("acoustic and duration streams disagree on word count")
        if (self.acoustic_var <= 0).any() or (self.duration_var <= 0).any():
            raise ValueError("target variances must be positive")

    @property
    def n_words(self) -> int:
        return int(self.acoustic_mean.shape[0])

    def as_gaussians(self) -> tuple[DiagGaussianSeq, DiagGaussianSeq]:
        return (
            DiagGaussianSeq(torch.from_numpy(self.acoustic_mean), torch.from_numpy(self.acoustic_var)),
            DiagGaussianSeq(torch.from_numpy(self.duration_mean), torch.from_numpy(self.duration_var)),
        )


class ProsodyTargetStore:
    """Mapping of utterance id to dumped posterior parameters.

    File format: per record, one JSON header line (id, speaker_id, word
    count, latent widths) followed by four little-endian float32 matrices in
    row-major order.
    """

    def __init__(self, entries: dict[str, TargetEntry] | None = None):
        self._entries: dict[str, TargetEntry] = dict(entries or {})

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, utterance_id: str) -> bool:
        return utterance_id in self._entries

    def __getitem__(self, utterance_id: str) -> TargetEntry:
        return self._entries[utterance_id]

    def __setitem__(self, utterance_id: str, entry: TargetEntry):
        self._entries[utterance_id] = entry

    def ids(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> Iterator[tuple[str, TargetEntry]]:
        return ((uid, self._entries[uid]) for uid in self.ids())

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            for uid, e in self.items():
                header = {
                    "id": uid,
                    "speaker_id": e.speaker_id,
                    "n_words": e.n_words,
                    "acoustic_dim": int(e.acoustic_mean.shape[1]),
                    "duration_dim": int(e.duration_mean.shape[1]),
                }
                fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
                for arr in (e.acoustic_mean, e.acoustic_var, e.duration_mean, e.duration_var):
                    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ProsodyTargetStore":
        path = Path(path)
        entries = {}
        data = path.read_bytes()
        pos = 0
        while pos < len(data):
            nl = data.index(b"\n", pos)
            header = json.loads(data[pos:nl].decode("utf-8"))
            pos = nl + 1
            w, h, hd = header["n_words"], header["acoustic_dim"], header["duration_dim"]
            mats = []
            for cols in (h, h, hd, hd):
                nbytes = w * cols * 4
                mats.append(
                    np.frombuffer(data[pos : pos + nbytes], dtype="<f4").reshape(w, cols).copy()
                )
                pos += nbytes
            entries[header["id"]] = TargetEntry(header["speaker_id"], *mats)
        return cls(entries)


def dump_targets(
    corpus: Corpus,
    acoustic_model,
    duration_model,
    speaker_table: nn.Embedding,
    phoneme_index: dict[str, int] | None = None,
    speaker_index: dict[str, int] | None = None,
    duration_speaker_table: nn.Embedding | None = None,
) -> ProsodyTargetStore:
    """Run both reference encoders over the corpus and collect posteriors.

    Models are used read-only (eval mode, no gradients); dumping twice from
    the same parameters yields identical stores.
    """
    phoneme_index = phoneme_index or corpus.phoneme_index()
    speaker_index = speaker_index or corpus.speaker_index()
    dur_table = duration_speaker_table if duration_speaker_table is not None else speaker_table
    store = ProsodyTargetStore()
    was_training = (acoustic_model.training, duration_model.training)
    acoustic_model.eval()
    duration_model.eval()
    try:
        with torch.no_grad():
            for utt in corpus:
                try:
                    batch = collate([utt], phoneme_index, speaker_index)
                    spk_a = speaker_table(batch.speaker_idx)
                    spk_d = dur_table(batch.speaker_idx)
                    enc_a = acoustic_model.encode_phonemes(
                        batch.phoneme_ids, batch.phoneme_lengths, batch.phoneme_mask
                    )
                    ups_a = upsample_padded(enc_a, batch.durations, batch.mel.shape[1])
                    mu_a, var_a = acoustic_model.encode_reference(
                        batch.mel, ups_a, spk_a, batch.frame_mask,
                        batch.word_of_frame, batch.max_words,
                    )
                    enc_d = duration_model.encode_phonemes(
                        batch.phoneme_ids, batch.phoneme_lengths, batch.phoneme_mask
                    )
                    ups_d = upsample_padded(enc_d, batch.durations, batch.mel.shape[1])
                    mu_d, var_d = duration_model.encode_reference(
                        batch.mel, ups_d, spk_d, batch.frame_mask,
                        batch.word_of_frame, batch.max_words,
                    )
                except Exception as exc:
                    raise RuntimeError(f"target dump failed for utterance {utt.id!r}: {exc}") from exc
                w = utt.n_words
                store[utt.id] = TargetEntry(
                    speaker_id=utt.speaker_id,
                    acoustic_mean=mu_a[0, :w].numpy(),
                    acoustic_var=var_a[0, :w].numpy(),
                    duration_mean=mu_d[0, :w].numpy(),
                    duration_var=var_d[0, :w].numpy(),
                )
    finally:
        acoustic_model.train(was_training[0])
        duration_model.train(was_training[1])
    return store
