"""Duration model: predicts per-phoneme frame counts from phonemes, speaker,
and word-level duration latents learned by its own mel-conditioned
variational reference encoder."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .acoustic import (
    LossParts,
    PhonemeEncoder,
    ReferenceEncoder,
    _check_finite,
    upsample_padded,
)
from .batching import Batch, broadcast_words
from .distributions import (
    AnnealSchedule,
    DiagGaussianSeq,
    anneal_alpha,
    kl_to_standard_normal,
    sample_reparam,
)


class DurationModel(nn.Module):
    """Phoneme encoder (its own, not shared with the acoustic model), a
    word-level reference encoder over mels, and a per-phoneme regression
    head that predicts log-durations, so outputs are strictly positive."""

    def __init__(
        self,
        n_phonemes: int,
        mel_bins: int,
        phoneme_dim: int = 64,
        speaker_dim: int = 16,
        latent_dim: int = 4,
        ref_hidden: int = 64,
        ref_layers: int = 2,
        regressor_hidden: int = 64,
    ):
        super().__init__()
        self.phoneme_encoder = PhonemeEncoder(n_phonemes, phoneme_dim)
        self.reference_encoder = ReferenceEncoder(
            mel_bins + phoneme_dim + speaker_dim, ref_hidden, latent_dim, ref_layers
        )
        self.regressor = nn.Sequential(
            nn.Linear(phoneme_dim + latent_dim + speaker_dim, regressor_hidden),
            nn.Tanh(),
            nn.Linear(regressor_hidden, regressor_hidden),
            nn.Tanh(),
            nn.Linear(regressor_hidden, 1),
        )
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
        spk = speaker.unsqueeze(1).expand(-1, mel.shape[1], -1)
        frames = torch.cat([mel, upsampled, spk], dim=-1)
        return self.reference_encoder(frames, frame_mask, word_of_frame, max_words)

    def predict_log_durations(
        self,
        encodings: Tensor,
        word_latents: Tensor,
        speaker: Tensor,
        word_of_phoneme: Tensor,
        phoneme_mask: Tensor,
    ) -> Tensor:
        """Log-domain duration predictions per phoneme: [B, P]."""
        if word_latents.shape[1] <= int(word_of_phoneme.max()):
            raise ValueError(
                f"{word_latents.shape[1]} word latents cannot cover word index "
                f"{int(word_of_phoneme.max())}"
            )
        z = broadcast_words(word_latents, word_of_phoneme, phoneme_mask)
        spk = speaker.unsqueeze(1).expand(-1, encodings.shape[1], -1)
        inputs = torch.cat([encodings, z, spk], dim=-1)
        out = self.regressor(inputs).squeeze(-1)
        return out * phoneme_mask.to(out.dtype)

    def predict_durations(
        self,
        encodings: Tensor,
        word_latents: Tensor,
        speaker: Tensor,
        word_of_phoneme: Tensor,
        phoneme_mask: Tensor,
    ) -> Tensor:
        """Strictly positive real-valued durations per phoneme."""
        return torch.exp(
            self.predict_log_durations(
                encodings, word_latents, speaker, word_of_phoneme, phoneme_mask
            )
        )


def duration_loss(
    model: DurationModel,
    speaker: Tensor,
    batch: Batch,
    step: int,
    sched: AnnealSchedule,
    noise: Tensor,
) -> LossParts:
    """Duration objective: squared error in the log(1+d) domain plus
    alpha-weighted KL of the word-level duration posterior to N(0, I).

    Like the acoustic loss, recon is per-utterance mean over real phonemes
    and KL is a per-utterance sum over words, each averaged over the batch.
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
    log_pred = model.predict_log_durations(
        enc, z, speaker, batch.word_of_phoneme, batch.phoneme_mask
    )
    # log1p(exp(u)) == softplus(u): the log(1+d) of the predicted duration.
    log1p_pred = F.softplus(log_pred)
    log1p_target = torch.log1p(batch.durations.to(log_pred.dtype))
    sq = (log1p_pred - log1p_target).square() * batch.phoneme_mask.to(log_pred.dtype)
    recon_per_utt = sq.sum(dim=-1) / batch.phoneme_lengths.to(log_pred.dtype).clamp_min(1.0)

    alpha = anneal_alpha(step, sched)
    recon = recon_per_utt.mean()
    kl = kl_per_utt.mean()
    total = recon + alpha * kl
    return _check_finite("duration", LossParts(total, recon, kl, alpha))


def quantize_durations(real_durations) -> np.ndarray:
    """Round positive real durations half-away-from-zero, minimum 1 frame."""
    arr = np.asarray(
        real_durations.detach().cpu().numpy()
        if isinstance(real_durations, Tensor)
        else real_durations,
        dtype=np.float64,
    )
    if arr.size and (arr <= 0).any():
        raise ValueError("durations to quantize must be positive")
    return np.maximum(np.floor(arr + 0.5).astype(np.int64), 1)
