"""Padded-batch assembly: training and batched evaluation pad every sequence
to the batch maximum and carry masks so losses see only real positions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .corpus import Utterance, word_index_per_frame, word_index_per_phoneme


@dataclass
class Batch:
    """Padded tensors for a list of utterances.

    ``word_of_frame`` / ``word_of_phoneme`` map each frame / phoneme to its
    word index (0 on padding; consult the masks). Speaker ids are already
    resolved to table indices.
    """

    ids: list[str]
    phoneme_ids: Tensor      # [B, P] long
    phoneme_lengths: Tensor  # [B] long
    phoneme_mask: Tensor     # [B, P] bool
    durations: Tensor        # [B, P] long, 0 on padding
    mel: Tensor              # [B, T, M]
    frame_lengths: Tensor    # [B] long
    frame_mask: Tensor       # [B, T] bool
    word_of_frame: Tensor    # [B, T] long
    word_of_phoneme: Tensor  # [B, P] long
    n_words: Tensor          # [B] long
    word_mask: Tensor        # [B, W] bool
    speaker_idx: Tensor      # [B] long

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def max_words(self) -> int:
        return int(self.word_mask.shape[1])

    def to(self, dtype: torch.dtype) -> "Batch":
        out = Batch(**self.__dict__)
        out.mel = self.mel.to(dtype)
        return out


def collate(
    utterances: Sequence[Utterance],
    phoneme_index: dict[str, int],
    speaker_index: dict[str, int],
    dtype: torch.dtype = torch.float32,
) -> Batch:
    """Pad a list of utterances into one Batch.

    Raises KeyError if an utterance references a phoneme or speaker that is
    not in the supplied index maps.
    """
    if not utterances:
        raise ValueError("cannot collate an empty utterance list")
    b = len(utterances)
    p_max = max(u.n_phonemes for u in utterances)
    t_max = max(u.n_frames for u in utterances)
    w_max = max(u.n_words for u in utterances)
    m = utterances[0].n_bins

    phoneme_ids = torch.zeros(b, p_max, dtype=torch.long)
    durations = torch.zeros(b, p_max, dtype=torch.long)
    mel = torch.zeros(b, t_max, m, dtype=dtype)
    word_of_frame = torch.zeros(b, t_max, dtype=torch.long)
    word_of_phoneme = torch.zeros(b, p_max, dtype=torch.long)
    phoneme_lengths = torch.zeros(b, dtype=torch.long)
    frame_lengths = torch.zeros(b, dtype=torch.long)
    n_words = torch.zeros(b, dtype=torch.long)
    speaker_idx = torch.zeros(b, dtype=torch.long)

    for i, u in enumerate(utterances):
        ids = [phoneme_index[ph] for ph in u.phonemes]
        phoneme_ids[i, : u.n_phonemes] = torch.tensor(ids, dtype=torch.long)
        durations[i, : u.n_phonemes] = torch.from_numpy(np.asarray(u.durations))
        mel[i, : u.n_frames] = torch.from_numpy(u.mel).to(dtype)
        word_of_frame[i, : u.n_frames] = torch.from_numpy(
            word_index_per_frame(u.word_spans, u.durations)
        )
        word_of_phoneme[i, : u.n_phonemes] = torch.from_numpy(
            word_index_per_phoneme(u.word_spans)
        )
        phoneme_lengths[i] = u.n_phonemes
        frame_lengths[i] = u.n_frames
        n_words[i] = u.n_words
        speaker_idx[i] = speaker_index[u.speaker_id]

    arange_p = torch.arange(p_max)
    arange_t = torch.arange(t_max)
    arange_w = torch.arange(w_max)
    return Batch(
        ids=[u.id for u in utterances],
        phoneme_ids=phoneme_ids,
        phoneme_lengths=phoneme_lengths,
        phoneme_mask=arange_p.unsqueeze(0) < phoneme_lengths.unsqueeze(1),
        durations=durations,
        mel=mel,
        frame_lengths=frame_lengths,
        frame_mask=arange_t.unsqueeze(0) < frame_lengths.unsqueeze(1),
        word_of_frame=word_of_frame,
        word_of_phoneme=word_of_phoneme,
        n_words=n_words,
        word_mask=arange_w.unsqueeze(0) < n_words.unsqueeze(1),
        speaker_idx=speaker_idx,
    )


def masked_segment_mean(
    features: Tensor, segment_ids: Tensor, mask: Tensor, n_segments: int
) -> Tensor:
    """Mean of ``features`` [B, T, C] per segment id, honoring the mask.

    Returns [B, n_segments, C]; segments with no members come back zero.
    Uses index_add, which is deterministic on CPU.
    """
    b, _, c = features.shape
    flat_idx = (
        segment_ids + torch.arange(b, device=features.device).unsqueeze(1) * n_segments
    )[mask]
    sums = torch.zeros(b * n_segments, c, dtype=features.dtype, device=features.device)
    sums.index_add_(0, flat_idx, features[mask])
    counts = torch.zeros(b * n_segments, dtype=features.dtype, device=features.device)
    counts.index_add_(0, flat_idx, torch.ones_like(flat_idx, dtype=features.dtype))
    means = sums / counts.clamp_min(1.0).unsqueeze(-1)
    return means.view(b, n_segments, c)


def broadcast_words(word_values: Tensor, word_ids: Tensor, mask: Tensor) -> Tensor:
    """Spread per-word vectors [B, W, H] onto positions [B, N] -> [B, N, H].

    Padded positions receive word 0's vector; callers must apply the mask.
    """
    b, n = word_ids.shape
    idx = word_ids.clamp_min(0).unsqueeze(-1).expand(b, n, word_values.shape[-1])
    out = torch.gather(word_values, 1, idx)
    return out * mask.unsqueeze(-1).to(out.dtype)
