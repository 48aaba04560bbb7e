"""Word-level prosody representation learning for multi-speaker TTS and
fine-grained prosody transfer, terminating at mel-spectrograms.

Stage I trains an acoustic model and a duration model, each with a
word-level conditional variational reference encoder, on multi-speaker
data. Stage II trains a predictor that maps text context and speaker
identity to the word-level prosody distributions, enabling TTS without
reference audio. The same trained components serve both transfer and TTS.
"""

from .corpus import (
    Corpus,
    SynthSpec,
    Utterance,
    build_word_spans,
    generate_synthetic_corpus,
    load_corpus,
    load_prosody_truth,
    save_corpus,
)
from .distributions import (
    AnnealSchedule,
    DiagGaussianSeq,
    anneal_alpha,
    kl_diag_gaussians,
    kl_to_standard_normal,
    recon_nll,
    sample_reparam,
)
from .pipeline import (
    Checkpoint,
    RunConfig,
    infer_fpt,
    infer_tts,
    load_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage2,
)
from .predictor import HashTextEmbedder, ProsodyTargetStore

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule",
    "Checkpoint",
    "Corpus",
    "DiagGaussianSeq",
    "HashTextEmbedder",
    "ProsodyTargetStore",
    "RunConfig",
    "SynthSpec",
    "Utterance",
    "anneal_alpha",
    "build_word_spans",
    "generate_synthetic_corpus",
    "infer_fpt",
    "infer_tts",
    "kl_diag_gaussians",
    "kl_to_standard_normal",
    "load_checkpoint",
    "load_corpus",
    "load_prosody_truth",
    "recon_nll",
    "sample_reparam",
    "save_checkpoint",
    "save_corpus",
    "train_stage1",
    "train_stage2",
    "__version__",
]
