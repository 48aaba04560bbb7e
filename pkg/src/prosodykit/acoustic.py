"""Acoustic model: phoneme encoder, duration-replication upsampler, word-level
variational reference encoder, and a non-autoregressive conv decoder.

All forward passes are batched with masks; padded positions are re-zeroed
after every layer so a padded batch reproduces unpadded results exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .batching import Batch, broadcast_words, masked_segment_mean
from .distributions import (
    AnnealSchedule,
    DiagGaussianSeq,
    anneal_alpha,
    kl_to_standard_normal,
    sample_reparam,
)

# Log-variance head output is clamped to this range before exponentiation;
# generous enough that it never binds in normal training.
LOGVAR_RANGE = (-12.0, 8.0)


class LossComputationError(RuntimeError):
    """A training loss came out non-finite; message carries the breakdown."""


class MaskedConvStack(nn.Module):
    """Non-causal 1-D conv layers with tanh, re-masking after every layer."""

    def __init__(self, in_dim: int, hidden: int, n_layers: int = 2, kernel: int = 5):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd to keep frames aligned")
        dims = [in_dim] + [hidden] * n_layers
        self.convs = nn.ModuleList(
            nn.Conv1d(dims[i], dims[i + 1], kernel, padding=kernel // 2)
            for i in range(n_layers)
        )
        self.kernel = kernel

    @property
    def receptive_field(self) -> int:
        return 1 + len(self.convs) * (self.kernel - 1)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        # x: [B, T, C]; mask: [B, T]
        m = mask.unsqueeze(1).to(x.dtype)
        h = (x * mask.unsqueeze(-1).to(x.dtype)).transpose(1, 2)
        for conv in self.convs:
            h = torch.tanh(conv(h)) * m
        return h.transpose(1, 2)


class PhonemeEncoder(nn.Module):
    """Embedding, conv stack, and a BiLSTM over the phoneme sequence."""

    def __init__(self, n_phonemes: int, dim: int, n_conv: int = 2, kernel: int = 5):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("phoneme encoding width must be even (BiLSTM halves)")
        self.embedding = nn.Embedding(n_phonemes, dim)
        self.convs = MaskedConvStack(dim, dim, n_conv, kernel)
        self.lstm = nn.LSTM(dim, dim // 2, batch_first=True, bidirectional=True)
        self.n_phonemes = n_phonemes

    def forward(self, phoneme_ids: Tensor, lengths: Tensor, mask: Tensor) -> Tensor:
        # phoneme_ids: [B, P] long; returns [B, P, dim]
        if int(phoneme_ids.max()) >= self.n_phonemes or int(phoneme_ids.min()) < 0:
            raise ValueError(
                f"phoneme id out of range [0, {self.n_phonemes}): "
                f"min={int(phoneme_ids.min())}, max={int(phoneme_ids.max())}"
            )
        h = self.convs(self.embedding(phoneme_ids), mask)
        packed = pack_padded_sequence(
            h, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, _ = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=phoneme_ids.shape[1])
        return out * mask.unsqueeze(-1).to(out.dtype)


class ReferenceEncoder(nn.Module):
    """Frame-level conv features, masked mean-pooling per word, Gaussian heads.

    Produces one diagonal Gaussian per word. Variances come from an
    exponentiated log-variance head, so they are strictly positive.
    """

    def __init__(self, in_dim: int, hidden: int, latent_dim: int,
                 n_layers: int = 2, kernel: int = 5):
        super().__init__()
        self.features = MaskedConvStack(in_dim, hidden, n_layers, kernel)
        self.mean_head = nn.Linear(hidden, latent_dim)
        self.logvar_head = nn.Linear(hidden, latent_dim)
        # Start with small posterior variance so early reparameterized samples
        # stay close to the mean; the decoder then gets clean credit
        # assignment through the latent path instead of learning to ignore it.
        nn.init.constant_(self.logvar_head.bias, -2.0)
        self.latent_dim = latent_dim

    def forward(
        self,
        frames: Tensor,
        frame_mask: Tensor,
        word_of_frame: Tensor,
        max_words: int,
    ) -> tuple[Tensor, Tensor]:
        feats = self.features(frames, frame_mask)
        pooled = masked_segment_mean(feats, word_of_frame, frame_mask, max_words)
        mean = self.mean_head(pooled)
        logvar = torch.clamp(self.logvar_head(pooled), *LOGVAR_RANGE)
        return mean, torch.exp(logvar)


class MelDecoder(nn.Module):
    """Non-autoregressive conv decoder: every frame is produced in parallel
    from the frame-aligned inputs, with no dependence on other outputs.

    The word latents enter twice: concatenated into the frame inputs, and as
    a per-layer feature-wise scale/shift (FiLM) on each conv block, which
    gives the decoder direct multiplicative capacity for gain-like factors.
    """

    def __init__(self, in_dim: int, hidden: int, mel_bins: int,
                 n_layers: int = 3, kernel: int = 5, cond_dim: int = 0):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd to keep frames aligned")
        dims = [in_dim] + [hidden] * n_layers
        self.convs = nn.ModuleList(
            nn.Conv1d(dims[i], dims[i + 1], kernel, padding=kernel // 2)
            for i in range(n_layers)
        )
        self.films = (
            nn.ModuleList(nn.Linear(cond_dim, 2 * hidden) for _ in range(n_layers))
            if cond_dim > 0
            else None
        )
        self.out = nn.Linear(hidden, mel_bins)
        self.kernel = kernel
        self.mel_bins = mel_bins

    @property
    def receptive_field(self) -> int:
        """Frames of input context each output frame can see."""
        return 1 + len(self.convs) * (self.kernel - 1)

    def forward(self, frame_inputs: Tensor, frame_mask: Tensor,
                cond: Tensor | None = None) -> Tensor:
        m = frame_mask.unsqueeze(1).to(frame_inputs.dtype)
        h = (frame_inputs * frame_mask.unsqueeze(-1).to(frame_inputs.dtype)).transpose(1, 2)
        for i, conv in enumerate(self.convs):
            h = torch.tanh(conv(h))
            if self.films is not None and cond is not None:
                scale, shift = self.films[i](cond).transpose(1, 2).chunk(2, dim=1)
                h = h * (1.0 + scale) + shift
            h = h * m
        return self.out(h.transpose(1, 2)) * frame_mask.unsqueeze(-1).to(h.dtype)


def upsample(encodings: Tensor, durations: Tensor) -> Tensor:
    """Replicate phoneme encodings per the frame counts: [P, J] -> [T, J].

    Row i repeats durations[i] times; zero-duration phonemes are skipped.
    """
    encodings = torch.as_tensor(encodings)
    durations = torch.as_tensor(durations, dtype=torch.long)
    if durations.ndim != 1 or encodings.shape[0] != durations.shape[0]:
        raise ValueError(
            f"durations length {tuple(durations.shape)} does not match "
            f"{encodings.shape[0]} phoneme encodings"
        )
    if bool((durations < 0).any()):
        raise ValueError("durations must be >= 0")
    return torch.repeat_interleave(encodings, durations, dim=0)


def upsample_padded(encodings: Tensor, durations: Tensor, total_frames: int | None = None) -> Tensor:
    """Batched upsample: [B, P, J] + [B, P] -> [B, T_max, J], zero padded.

    Single repeat_interleave over the flattened batch plus one scatter, so
    no per-sample Python loop sits on the training path.
    """
    b, p, j = encodings.shape
    if durations.shape != (b, p):
        raise ValueError(
            f"durations shape {tuple(durations.shape)} does not match encodings "
            f"{tuple(encodings.shape[:2])}"
        )
    reps = durations.reshape(-1)
    rows = torch.repeat_interleave(encodings.reshape(b * p, j), reps, dim=0)
    frames_per_sample = durations.sum(dim=-1)
    t_max = total_frames if total_frames is not None else int(frames_per_sample.max())
    starts = torch.cumsum(frames_per_sample, 0) - frames_per_sample
    sample_of_row = torch.repeat_interleave(
        torch.arange(b, device=encodings.device), frames_per_sample
    )
    offset_within = (
        torch.arange(rows.shape[0], device=encodings.device)
        - torch.repeat_interleave(starts, frames_per_sample)
    )
    out = rows.new_zeros(b * t_max, j)
    out[sample_of_row * t_max + offset_within] = rows
    return out.view(b, t_max, j)


class AcousticModel(nn.Module):
    """Bundles the phoneme encoder, reference encoder, and mel decoder.

    The speaker embedding table lives outside this module (it is shared with
    the duration model); forwards accept resolved embedding vectors.
    """

    def __init__(
        self,
        n_phonemes: int,
        mel_bins: int,
        phoneme_dim: int = 64,
        speaker_dim: int = 16,
        latent_dim: int = 8,
        ref_hidden: int = 64,
        ref_layers: int = 2,
        decoder_hidden: int = 96,
        decoder_layers: int = 3,
        decoder_kernel: int = 5,
    ):
        super().__init__()
        self.phoneme_encoder = PhonemeEncoder(n_phonemes, phoneme_dim)
        self.reference_encoder = ReferenceEncoder(
            mel_bins + phoneme_dim + speaker_dim, ref_hidden, latent_dim, ref_layers
        )
        self.decoder = MelDecoder(
            phoneme_dim + latent_dim + speaker_dim,
            decoder_hidden,
            mel_bins,
            decoder_layers,
            decoder_kernel,
            cond_dim=latent_dim,
        )
        self.mel_bins = mel_bins
        self.latent_dim = latent_dim

    def encode_phonemes(self, phoneme_ids: Tensor, lengths: Tensor, mask: Tensor) -> Tensor:
        return self.phoneme_encoder(phoneme_ids, lengths, mask)

    def encode_reference(
        self,
        mel: Tensor,
        upsampled: Tensor,
        speaker: Tensor,
        frame_mask: Tensor,
        word_of_frame: Tensor,
        max_words: int,
    ) -> tuple[Tensor, Tensor]:
        """Posterior parameters per word from (mel, phoneme encodings, speaker)."""
        spk = speaker.unsqueeze(1).expand(-1, mel.shape[1], -1)
        frames = torch.cat([mel, upsampled, spk], dim=-1)
        return self.reference_encoder(frames, frame_mask, word_of_frame, max_words)

    def decode_frames(
        self,
        upsampled: Tensor,
        word_latents: Tensor,
        speaker: Tensor,
        frame_mask: Tensor,
        word_of_frame: Tensor,
    ) -> Tensor:
        """Decode mel frames from upsampled encodings, word latents, speaker."""
        z = broadcast_words(word_latents, word_of_frame, frame_mask)
        spk = speaker.unsqueeze(1).expand(-1, upsampled.shape[1], -1)
        inputs = torch.cat([upsampled, z, spk], dim=-1)
        return self.decoder(inputs, frame_mask, cond=z)


@dataclass
class LossParts:
    """One objective's components; ``total == recon + alpha * kl`` exactly."""

    total: Tensor
    recon: Tensor
    kl: Tensor
    alpha: float

    def detach_floats(self) -> tuple[float, float, float]:
        return float(self.total), float(self.recon), float(self.kl)


def _check_finite(name: str, parts: LossParts) -> LossParts:
    if not bool(torch.isfinite(parts.total)):
        raise LossComputationError(
            f"{name} loss is non-finite: recon={float(parts.recon)!r}, "
            f"kl={float(parts.kl)!r}, alpha={parts.alpha!r}"
        )
    return parts


def acoustic_loss(
    model: AcousticModel,
    speaker: Tensor,
    batch: Batch,
    step: int,
    sched: AnnealSchedule,
    noise: Tensor,
) -> LossParts:
    """Negated ELBO (up to constants) for a batch: recon MSE + alpha * KL.

    ``recon`` is the per-utterance mean squared error over real frames and
    bins, averaged over the batch; ``kl`` is the per-utterance sum of
    per-word KLs to N(0, I), averaged over the batch. For a single-utterance
    batch this is exactly the per-utterance objective.
    """
    enc = model.encode_phonemes(batch.phoneme_ids, batch.phoneme_lengths, batch.phoneme_mask)
    ups = upsample_padded(enc, batch.durations, batch.mel.shape[1])
    mean, var = model.encode_reference(
        batch.mel, ups, speaker, batch.frame_mask, batch.word_of_frame, batch.max_words
    )
    posterior = DiagGaussianSeq(mean, var)
    kl_words = kl_to_standard_normal(posterior) * batch.word_mask.to(mean.dtype)
    kl_per_utt = kl_words.sum(dim=-1)

    z = sample_reparam(posterior, noise)
    pred = model.decode_frames(ups, z, speaker, batch.frame_mask, batch.word_of_frame)
    sq = (pred - batch.mel).square() * batch.frame_mask.unsqueeze(-1).to(pred.dtype)
    denom = (batch.frame_lengths.to(pred.dtype) * batch.mel.shape[-1]).clamp_min(1.0)
    recon_per_utt = sq.sum(dim=(1, 2)) / denom

    alpha = anneal_alpha(step, sched)
    recon = recon_per_utt.mean()
    kl = kl_per_utt.mean()
    total = recon + alpha * kl
    return _check_finite("acoustic", LossParts(total, recon, kl, alpha))
