"""Orchestration: run configuration, two-stage training, checkpointing, and
the two inference modes (prosody transfer from a reference, and plain TTS).

Determinism contract: given (config, seed), logged losses and mean-mode
inference outputs are bit-identical across runs on one platform. Per-step
randomness (batch choice, reparameterization noise) is derived statelessly
from (seed, step), which also makes resumed runs match uninterrupted ones.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .acoustic import AcousticModel, LossComputationError, acoustic_loss, upsample, upsample_padded
from .batching import collate
from .corpus import (
    Corpus,
    Utterance,
    build_word_spans,
    load_corpus,
    word_index_per_frame,
    word_index_per_phoneme,
)
from .distributions import AnnealSchedule, DiagGaussianSeq, kl_diag_gaussians, sample_reparam
from .duration import DurationModel, duration_loss, quantize_durations
from .predictor import (
    HashTextEmbedder,
    ProsodyPredictor,
    ProsodyTargetStore,
    embed_context,
    pool_to_words,
    predictor_loss,
)
from .predictor import dump_targets as _dump_targets_from_models

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

_STRUCTURAL_FIELDS = (
    "mel_bins",
    "phoneme_dim",
    "speaker_dim",
    "acoustic_latent_dim",
    "duration_latent_dim",
    "context_dim",
    "ref_hidden",
    "ref_layers",
    "decoder_hidden",
    "decoder_layers",
    "decoder_kernel",
    "duration_hidden",
    "predictor_hidden",
    "separate_speaker_tables",
)


class CheckpointError(Exception):
    """Checkpoint file is unreadable, wrong version, or structurally wrong."""


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, step: int, last_good: "Checkpoint | None"):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


@dataclass
class RunConfig:
    """Everything a training run needs; see README for the file format."""

    corpus_dir: str = "corpus"
    # model dimensions
    mel_bins: int = 80
    phoneme_dim: int = 64
    speaker_dim: int = 16
    acoustic_latent_dim: int = 8
    duration_latent_dim: int = 4
    context_dim: int = 32
    ref_hidden: int = 64
    ref_layers: int = 2
    decoder_hidden: int = 96
    decoder_layers: int = 3
    decoder_kernel: int = 5
    duration_hidden: int = 64
    predictor_hidden: int = 64
    separate_speaker_tables: bool = False
    # KL annealing (duration model falls back to the acoustic schedule when
    # its fields are left at -1)
    anneal_start: int = 0
    anneal_end: int = 10_000
    duration_anneal_start: int = -1
    duration_anneal_end: int = -1
    # optimization
    learning_rate: float = 1e-3
    stage2_learning_rate: float = 1e-3
    batch_size: int = 16
    steps: int = 20_000
    stage2_steps: int = 5_000
    grad_clip: float = 0.0
    seed: int = 0
    log_every: int = 50
    embedder: str = "hash"

    def validate(self) -> "RunConfig":
        positive = (
            "mel_bins", "phoneme_dim", "speaker_dim", "acoustic_latent_dim",
            "duration_latent_dim", "context_dim", "ref_hidden", "ref_layers",
            "decoder_hidden", "decoder_layers", "decoder_kernel",
            "duration_hidden", "predictor_hidden", "batch_size", "steps",
            "stage2_steps",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"config field {name} must be positive")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        self.acoustic_schedule()
        self.duration_schedule()
        return self

    def acoustic_schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.anneal_start, self.anneal_end)

    def duration_schedule(self) -> AnnealSchedule:
        start = self.duration_anneal_start
        end = self.duration_anneal_end
        if start < 0:
            start = self.anneal_start
        if end < 0:
            end = self.anneal_end
        return AnnealSchedule(start, end)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        """Parse a key = value config file (one pair per line, # comments)."""
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{line_no}: unknown config key {key!r}")
            kwargs[key] = _parse_value(value, known[key], key)
        return cls(**kwargs).validate()


def _parse_value(text: str, type_name: str, key: str):
    t = str(type_name)
    if "bool" in t:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r}: expected true/false, got {text!r}")
    if "int" in t:
        return int(text)
    if "float" in t:
        return float(text)
    return text


@dataclass
class StepLog:
    """Per-step Stage I training record (floats, detached)."""

    step: int
    acoustic_total: float
    acoustic_recon: float
    acoustic_kl: float
    acoustic_alpha: float
    duration_total: float
    duration_recon: float
    duration_kl: float
    duration_alpha: float


@dataclass
class Stage2StepLog:
    step: int
    loss: float


class Stage1System(nn.Module):
    """Speaker table plus the acoustic and duration models.

    The speaker table is shared across both models by default; a separate
    duration-side table can be configured.
    """

    def __init__(self, config: RunConfig, n_phonemes: int, n_speakers: int):
        super().__init__()
        self.speaker_table = nn.Embedding(n_speakers, config.speaker_dim)
        if config.separate_speaker_tables:
            self.duration_speaker_table = nn.Embedding(n_speakers, config.speaker_dim)
        else:
            self.duration_speaker_table = None
        self.acoustic = AcousticModel(
            n_phonemes=n_phonemes,
            mel_bins=config.mel_bins,
            phoneme_dim=config.phoneme_dim,
            speaker_dim=config.speaker_dim,
            latent_dim=config.acoustic_latent_dim,
            ref_hidden=config.ref_hidden,
            ref_layers=config.ref_layers,
            decoder_hidden=config.decoder_hidden,
            decoder_layers=config.decoder_layers,
            decoder_kernel=config.decoder_kernel,
        )
        self.duration = DurationModel(
            n_phonemes=n_phonemes,
            mel_bins=config.mel_bins,
            phoneme_dim=config.phoneme_dim,
            speaker_dim=config.speaker_dim,
            latent_dim=config.duration_latent_dim,
            ref_hidden=config.ref_hidden,
            ref_layers=config.ref_layers,
            regressor_hidden=config.duration_hidden,
        )

    def duration_table(self) -> nn.Embedding:
        return self.duration_speaker_table if self.duration_speaker_table is not None else self.speaker_table


@dataclass
class Checkpoint:
    """Serialized training state: config snapshot, step, parameter blobs,
    optimizer state, speaker table contents, and RNG state."""

    kind: str  # "stage1" or "stage2"
    config: RunConfig
    step: int
    speakers: list[str]
    phoneme_inventory: list[str]
    model_state: dict
    optim_state: dict
    torch_rng: torch.Tensor

    @property
    def has_predictor(self) -> bool:
        return "predictor" in self.model_state


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Atomic write: serialize to a temp file, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": ckpt.kind,
        "config": asdict(ckpt.config),
        "step": ckpt.step,
        "speakers": list(ckpt.speakers),
        "phoneme_inventory": list(ckpt.phoneme_inventory),
        "model_state": ckpt.model_state,
        "optim_state": ckpt.optim_state,
        "torch_rng": ckpt.torch_rng,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload.get('version')!r} in {path} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    try:
        config = RunConfig(**payload["config"]).validate()
        return Checkpoint(
            kind=payload["kind"],
            config=config,
            step=int(payload["step"]),
            speakers=list(payload["speakers"]),
            phoneme_inventory=list(payload["phoneme_inventory"]),
            model_state=payload["model_state"],
            optim_state=payload["optim_state"],
            torch_rng=payload["torch_rng"],
        )
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} is missing fields: {exc}") from exc


@dataclass
class LoadedModels:
    """A checkpoint materialized into modules (eval mode, ready to run)."""

    config: RunConfig
    speakers: list[str]
    phoneme_inventory: list[str]
    system: Stage1System
    predictor: ProsodyPredictor | None

    def speaker_index(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.speakers)}

    def phoneme_index(self) -> dict[str, int]:
        return {p: i for i, p in enumerate(self.phoneme_inventory)}


def _build_predictor(config: RunConfig) -> ProsodyPredictor:
    return ProsodyPredictor(
        context_dim=config.context_dim,
        speaker_dim=config.speaker_dim,
        acoustic_latent_dim=config.acoustic_latent_dim,
        duration_latent_dim=config.duration_latent_dim,
        hidden=config.predictor_hidden,
    )


def load_models(ckpt: Checkpoint) -> LoadedModels:
    """Rebuild modules from a checkpoint; rejects dimension mismatches."""
    with torch.random.fork_rng():
        torch.manual_seed(0)
        system = Stage1System(ckpt.config, len(ckpt.phoneme_inventory), len(ckpt.speakers))
        predictor = _build_predictor(ckpt.config) if ckpt.has_predictor else None
    try:
        system.speaker_table.load_state_dict(ckpt.model_state["speaker_table"])
        if system.duration_speaker_table is not None:
            system.duration_speaker_table.load_state_dict(
                ckpt.model_state["duration_speaker_table"]
            )
        system.acoustic.load_state_dict(ckpt.model_state["acoustic"])
        system.duration.load_state_dict(ckpt.model_state["duration"])
        if predictor is not None:
            predictor.load_state_dict(ckpt.model_state["predictor"])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint state incompatible with its config: {exc}") from exc
    system.eval()
    if predictor is not None:
        predictor.eval()
    return LoadedModels(
        config=ckpt.config,
        speakers=list(ckpt.speakers),
        phoneme_inventory=list(ckpt.phoneme_inventory),
        system=system,
        predictor=predictor,
    )


def _ensure_models(ckpt: "Checkpoint | LoadedModels") -> LoadedModels:
    return ckpt if isinstance(ckpt, LoadedModels) else load_models(ckpt)


def parameter_checksum(module_or_state) -> str:
    """SHA-256 over parameter names, shapes, and bytes; order-stable."""
    state = (
        module_or_state.state_dict()
        if isinstance(module_or_state, nn.Module)
        else module_or_state
    )
    digest = hashlib.sha256()
    for name in sorted(state):
        t = state[name]
        digest.update(name.encode("utf-8"))
        digest.update(str(tuple(t.shape)).encode("utf-8"))
        digest.update(t.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _mix(seed: int, salt: int) -> int:
    return (seed * 6364136223846793005 + salt * 1442695040888963407 + 1) % (2**63)


def _step_generator(seed: int, step: int, tag: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(_mix(seed, (step << 8) | tag))
    return gen


def _batch_indices(seed: int, step: int, n: int, batch_size: int, tag: int) -> np.ndarray:
    rng = np.random.default_rng([seed, tag, step])
    return rng.choice(n, size=min(batch_size, n), replace=False)


def _check_config_compatible(config: RunConfig, other: RunConfig, context: str):
    for name in _STRUCTURAL_FIELDS:
        if getattr(config, name) != getattr(other, name):
            raise CheckpointError(
                f"{context}: config mismatch on {name!r}: "
                f"{getattr(config, name)} vs {getattr(other, name)}"
            )


def _stage1_states(system: Stage1System) -> dict:
    state = {
        "speaker_table": copy.deepcopy(system.speaker_table.state_dict()),
        "acoustic": copy.deepcopy(system.acoustic.state_dict()),
        "duration": copy.deepcopy(system.duration.state_dict()),
    }
    if system.duration_speaker_table is not None:
        state["duration_speaker_table"] = copy.deepcopy(
            system.duration_speaker_table.state_dict()
        )
    return state


# ---------------------------------------------------------------------------
# Stage I training
# ---------------------------------------------------------------------------

def train_stage1(
    config: RunConfig,
    on_step: Callable[[StepLog], None] | None = None,
    resume_from: Checkpoint | None = None,
) -> Checkpoint:
    """Jointly-but-independently optimize the acoustic and duration models.

    The two models have separate optimizers (the shared speaker table rides
    with the acoustic one) and run in a single loop over shared batches.
    Raises TrainingDivergedError with the last good checkpoint if a loss
    goes non-finite.
    """
    config.validate()
    corpus = load_corpus(config.corpus_dir)
    if not corpus.utterances:
        raise ValueError(f"corpus at {config.corpus_dir!r} is empty; nothing to train on")
    if config.mel_bins != corpus.utterances[0].n_bins:
        raise ValueError(
            f"config mel_bins={config.mel_bins} but corpus has "
            f"{corpus.utterances[0].n_bins} bins"
        )
    pidx, sidx = corpus.phoneme_index(), corpus.speaker_index()

    if resume_from is not None:
        _check_config_compatible(config, resume_from.config, "resume")
        models = load_models(resume_from)
        system = models.system
        system.train()
        start_step = resume_from.step
    else:
        torch.manual_seed(config.seed)
        system = Stage1System(config, len(corpus.phoneme_inventory), len(corpus.speakers))
        start_step = 0

    acoustic_params = list(system.acoustic.parameters()) + list(system.speaker_table.parameters())
    duration_params = list(system.duration.parameters())
    if system.duration_speaker_table is not None:
        duration_params += list(system.duration_speaker_table.parameters())
    opt_a = torch.optim.Adam(acoustic_params, lr=config.learning_rate)
    opt_d = torch.optim.Adam(duration_params, lr=config.learning_rate)
    if resume_from is not None:
        opt_a.load_state_dict(resume_from.optim_state["acoustic"])
        opt_d.load_state_dict(resume_from.optim_state["duration"])

    sched_a = config.acoustic_schedule()
    sched_d = config.duration_schedule()
    h = config.acoustic_latent_dim
    hd = config.duration_latent_dim

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            kind="stage1",
            config=config,
            step=step,
            speakers=list(corpus.speakers),
            phoneme_inventory=list(corpus.phoneme_inventory),
            model_state=_stage1_states(system),
            optim_state={
                "acoustic": copy.deepcopy(opt_a.state_dict()),
                "duration": copy.deepcopy(opt_d.state_dict()),
            },
            torch_rng=torch.get_rng_state(),
        )

    last_good = snapshot(start_step)
    for step in range(start_step, config.steps):
        idx = _batch_indices(config.seed, step, len(corpus), config.batch_size, tag=1)
        batch = collate([corpus.utterances[i] for i in idx], pidx, sidx)
        gen = _step_generator(config.seed, step, tag=2)
        noise_a = torch.randn(batch.size, batch.max_words, h, generator=gen)
        noise_d = torch.randn(batch.size, batch.max_words, hd, generator=gen)
        spk_a = system.speaker_table(batch.speaker_idx)
        spk_d = system.duration_table()(batch.speaker_idx)
        try:
            a = acoustic_loss(system.acoustic, spk_a, batch, step, sched_a, noise_a)
            d = duration_loss(system.duration, spk_d, batch, step, sched_d, noise_d)
        except LossComputationError as exc:
            raise TrainingDivergedError(
                f"stage1 diverged at step {step}: {exc}", step=step, last_good=last_good
            ) from exc
        opt_a.zero_grad(set_to_none=True)
        opt_d.zero_grad(set_to_none=True)
        (a.total + d.total).backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(acoustic_params, config.grad_clip)
            torch.nn.utils.clip_grad_norm_(duration_params, config.grad_clip)
        opt_a.step()
        opt_d.step()

        if on_step is not None:
            on_step(
                StepLog(
                    step,
                    float(a.total.detach()), float(a.recon.detach()), float(a.kl.detach()), a.alpha,
                    float(d.total.detach()), float(d.recon.detach()), float(d.kl.detach()), d.alpha,
                )
            )
        if config.log_every and step % config.log_every == 0:
            logger.info(
                "stage1 step=%d acoustic: recon=%.5f kl=%.4f alpha=%.3f | "
                "duration: recon=%.5f kl=%.4f alpha=%.3f",
                step, float(a.recon.detach()), float(a.kl.detach()), a.alpha,
                float(d.recon.detach()), float(d.kl.detach()), d.alpha,
            )
            last_good = snapshot(step)
    return snapshot(config.steps)


# ---------------------------------------------------------------------------
# Target dumping and Stage II training
# ---------------------------------------------------------------------------

def dump_targets(corpus: Corpus, ckpt: "Checkpoint | LoadedModels") -> ProsodyTargetStore:
    """Run the trained reference encoders over a corpus, collecting per-word
    posterior parameters as Stage II targets. Read-only on the checkpoint."""
    models = _ensure_models(ckpt)
    return _dump_targets_from_models(
        corpus,
        models.system.acoustic,
        models.system.duration,
        models.system.speaker_table,
        phoneme_index=models.phoneme_index(),
        speaker_index=models.speaker_index(),
        duration_speaker_table=models.system.duration_speaker_table,
    )


def build_embedder(config: RunConfig):
    if config.embedder == "hash":
        return HashTextEmbedder(config.context_dim)
    raise ValueError(
        f"unknown embedder {config.embedder!r}; construct a custom embedder "
        "programmatically and pass it in instead"
    )


def train_stage2(
    config: RunConfig,
    stage1: Checkpoint,
    targets: ProsodyTargetStore | None = None,
    on_step: Callable[[Stage2StepLog], None] | None = None,
    embedder=None,
    resume_from: Checkpoint | None = None,
) -> Checkpoint:
    """Train the prosody predictor against dumped Stage I posteriors.

    Stage I parameters are frozen (never registered with the optimizer and
    gradient-disabled); the returned checkpoint carries them through so one
    file serves both inference modes.
    """
    config.validate()
    _check_config_compatible(config, stage1.config, "stage2")
    corpus = load_corpus(config.corpus_dir)
    models = _ensure_models(stage1)
    system = models.system
    for p in system.parameters():
        p.requires_grad_(False)
    if targets is None:
        targets = dump_targets(corpus, models)
    missing = [u.id for u in corpus if u.id not in targets]
    if missing:
        raise ValueError(f"target store lacks {len(missing)} utterances, e.g. {missing[0]!r}")

    embedder = embedder if embedder is not None else build_embedder(config)
    word_embs: dict[str, torch.Tensor] = {}
    for u in corpus:
        ce = embed_context(u.text, embedder, expected_words=u.n_words)
        word_embs[u.id] = pool_to_words(ce)

    sidx = models.speaker_index()
    if resume_from is not None:
        _check_config_compatible(config, resume_from.config, "stage2 resume")
        if not resume_from.has_predictor:
            raise CheckpointError("stage2 resume checkpoint has no predictor parameters")
        with torch.random.fork_rng():
            torch.manual_seed(0)
            predictor = _build_predictor(config)
        predictor.load_state_dict(resume_from.model_state["predictor"])
        start_step = resume_from.step
    else:
        torch.manual_seed(_mix(config.seed, 0x5747E2))
        predictor = _build_predictor(config)
        start_step = 0
    predictor.train()
    opt = torch.optim.Adam(predictor.parameters(), lr=config.stage2_learning_rate)
    if resume_from is not None:
        opt.load_state_dict(resume_from.optim_state["predictor"])

    utts = corpus.utterances
    h, hd = config.acoustic_latent_dim, config.duration_latent_dim

    def snapshot(step: int) -> Checkpoint:
        state = _stage1_states(system)
        state["predictor"] = copy.deepcopy(predictor.state_dict())
        return Checkpoint(
            kind="stage2",
            config=config,
            step=step,
            speakers=list(models.speakers),
            phoneme_inventory=list(models.phoneme_inventory),
            model_state=state,
            optim_state={"predictor": copy.deepcopy(opt.state_dict())},
            torch_rng=torch.get_rng_state(),
        )

    last_good = snapshot(start_step)
    for step in range(start_step, config.stage2_steps):
        idx = _batch_indices(config.seed, step, len(utts), config.batch_size, tag=3)
        chosen = [utts[i] for i in idx]
        b = len(chosen)
        w_max = max(u.n_words for u in chosen)
        embs = torch.zeros(b, w_max, config.context_dim)
        tgt_mu_a = torch.zeros(b, w_max, h)
        tgt_var_a = torch.ones(b, w_max, h)
        tgt_mu_d = torch.zeros(b, w_max, hd)
        tgt_var_d = torch.ones(b, w_max, hd)
        n_words = torch.zeros(b, dtype=torch.long)
        speaker_idx = torch.zeros(b, dtype=torch.long)
        for i, u in enumerate(chosen):
            w = u.n_words
            embs[i, :w] = word_embs[u.id]
            entry = targets[u.id]
            tgt_mu_a[i, :w] = torch.from_numpy(entry.acoustic_mean)
            tgt_var_a[i, :w] = torch.from_numpy(entry.acoustic_var)
            tgt_mu_d[i, :w] = torch.from_numpy(entry.duration_mean)
            tgt_var_d[i, :w] = torch.from_numpy(entry.duration_var)
            n_words[i] = w
            speaker_idx[i] = sidx[u.speaker_id]
        word_mask = torch.arange(w_max).unsqueeze(0) < n_words.unsqueeze(1)

        spk = system.speaker_table(speaker_idx).detach()
        pred_a, pred_d = predictor(embs, spk, n_words)
        kl_a = kl_diag_gaussians(pred_a, DiagGaussianSeq(tgt_mu_a, tgt_var_a))
        kl_d = kl_diag_gaussians(pred_d, DiagGaussianSeq(tgt_mu_d, tgt_var_d))
        mask = word_mask.to(kl_a.dtype)
        loss = ((kl_a * mask).sum(dim=-1) + (kl_d * mask).sum(dim=-1)).mean()
        loss_value = float(loss.detach())
        if not bool(torch.isfinite(loss)):
            raise TrainingDivergedError(
                f"stage2 diverged at step {step}: loss={loss_value!r}",
                step=step,
                last_good=last_good,
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(predictor.parameters(), config.grad_clip)
        opt.step()

        if on_step is not None:
            on_step(Stage2StepLog(step, loss_value))
        if config.log_every and step % config.log_every == 0:
            logger.info("stage2 step=%d predictor_loss=%.5f", step, loss_value)
            last_good = snapshot(step)
    return snapshot(config.stage2_steps)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _resolve_speaker(models: LoadedModels, speaker_id: str) -> int:
    try:
        return models.speaker_index()[speaker_id]
    except KeyError:
        raise ValueError(
            f"unknown speaker {speaker_id!r}; checkpoint knows {models.speakers}"
        ) from None


def _resolve_phonemes(models: LoadedModels, phonemes: Sequence[str]) -> torch.Tensor:
    pidx = models.phoneme_index()
    try:
        ids = [pidx[p] for p in phonemes]
    except KeyError as exc:
        raise ValueError(f"unknown phoneme {exc.args[0]!r}") from None
    return torch.tensor(ids, dtype=torch.long).unsqueeze(0)


def _decode_with_durations(
    models: LoadedModels,
    enc_acoustic: torch.Tensor,
    word_latents: torch.Tensor,
    speaker: torch.Tensor,
    word_spans: list[tuple[int, int]],
    durations: np.ndarray,
) -> np.ndarray:
    dur = torch.from_numpy(np.asarray(durations, dtype=np.int64))
    ups = upsample(enc_acoustic[0], dur).unsqueeze(0)
    t = ups.shape[1]
    frame_mask = torch.ones(1, t, dtype=torch.bool)
    wof = torch.from_numpy(word_index_per_frame(word_spans, durations)).unsqueeze(0)
    mel = models.system.acoustic.decode_frames(ups, word_latents, speaker, frame_mask, wof)
    return mel[0].cpu().numpy().astype(np.float32)


def infer_fpt(
    reference: Utterance,
    target_speaker_id: str,
    ckpt: "Checkpoint | LoadedModels",
) -> tuple[np.ndarray, np.ndarray]:
    """Fine-grained prosody transfer: reference prosody, target identity.

    Both reference encoders read the reference mel (conditioned on the
    reference's own speaker embedding); the duration regressor and the mel
    decoder see only the target speaker's embedding. Uses posterior means,
    so the transfer is deterministic. Never touches the prosody predictor
    or the reference text.
    """
    models = _ensure_models(ckpt)
    reference.validate()
    tgt_idx = _resolve_speaker(models, target_speaker_id)
    src_idx = _resolve_speaker(models, reference.speaker_id)
    batch = collate([reference], models.phoneme_index(), models.speaker_index())
    system = models.system
    with torch.no_grad():
        src_a = system.speaker_table(torch.tensor([src_idx]))
        tgt_a = system.speaker_table(torch.tensor([tgt_idx]))
        src_d = system.duration_table()(torch.tensor([src_idx]))
        tgt_d = system.duration_table()(torch.tensor([tgt_idx]))

        enc_d = system.duration.encode_phonemes(
            batch.phoneme_ids, batch.phoneme_lengths, batch.phoneme_mask
        )
        ups_d = upsample_padded(enc_d, batch.durations, batch.mel.shape[1])
        mu_d, _ = system.duration.encode_reference(
            batch.mel, ups_d, src_d, batch.frame_mask, batch.word_of_frame, batch.max_words
        )
        real_durations = system.duration.predict_durations(
            enc_d, mu_d, tgt_d, batch.word_of_phoneme, batch.phoneme_mask
        )
        durations = quantize_durations(real_durations[0])

        enc_a = system.acoustic.encode_phonemes(
            batch.phoneme_ids, batch.phoneme_lengths, batch.phoneme_mask
        )
        ups_a = upsample_padded(enc_a, batch.durations, batch.mel.shape[1])
        mu_a, _ = system.acoustic.encode_reference(
            batch.mel, ups_a, src_a, batch.frame_mask, batch.word_of_frame, batch.max_words
        )
        mel = _decode_with_durations(
            models, enc_a, mu_a, tgt_a, reference.word_spans, durations
        )
    return mel, durations


def infer_tts(
    text: str,
    phonemes: Sequence[str],
    word_lengths: Sequence[int],
    speaker_id: str,
    ckpt: "Checkpoint | LoadedModels",
    mode: str = "mean",
    temperature: float = 1.0,
    generator: torch.Generator | None = None,
    embedder=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Text-to-mel with predicted prosody; no reference audio involved.

    ``mode`` is "mean" (deterministic) or "sample" (temperature-scaled draws
    from the predicted Gaussians; temperature 0 reduces to mean mode).
    """
    models = _ensure_models(ckpt)
    if models.predictor is None:
        raise CheckpointError(
            "checkpoint has no prosody predictor; train stage 2 before TTS inference"
        )
    if mode not in ("mean", "sample"):
        raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")
    word_spans = build_word_spans(word_lengths)
    if word_spans[-1][1] != len(phonemes):
        raise ValueError(
            f"word_lengths cover {word_spans[-1][1]} phonemes but {len(phonemes)} given"
        )
    spk_idx = _resolve_speaker(models, speaker_id)
    embedder = embedder if embedder is not None else build_embedder(models.config)
    ce = embed_context(text, embedder, expected_words=len(word_spans))
    word_embs = pool_to_words(ce).unsqueeze(0)

    system = models.system
    with torch.no_grad():
        spk = system.speaker_table(torch.tensor([spk_idx]))
        spk_d = system.duration_table()(torch.tensor([spk_idx]))
        n_words = torch.tensor([len(word_spans)])
        pred_a, pred_d = models.predictor(word_embs, spk, n_words)
        if mode == "mean" or temperature == 0:
            z_a, z_d = pred_a.mean, pred_d.mean
        else:
            eps_a = torch.randn(pred_a.mean.shape, generator=generator)
            eps_d = torch.randn(pred_d.mean.shape, generator=generator)
            z_a = sample_reparam(pred_a, eps_a * temperature)
            z_d = sample_reparam(pred_d, eps_d * temperature)

        phoneme_ids = _resolve_phonemes(models, phonemes)
        lengths = torch.tensor([len(phonemes)])
        mask = torch.ones_like(phoneme_ids, dtype=torch.bool)
        wof_ph = torch.from_numpy(word_index_per_phoneme(word_spans)).unsqueeze(0)

        enc_d = system.duration.encode_phonemes(phoneme_ids, lengths, mask)
        real_durations = system.duration.predict_durations(enc_d, z_d, spk_d, wof_ph, mask)
        durations = quantize_durations(real_durations[0])

        enc_a = system.acoustic.encode_phonemes(phoneme_ids, lengths, mask)
        mel = _decode_with_durations(models, enc_a, z_a, spk, word_spans, durations)
    return mel, durations


def reconstruct_utterance(
    ckpt: "Checkpoint | LoadedModels",
    utterance: Utterance,
    z_source: str = "posterior_mean",
    generator: torch.Generator | None = None,
) -> np.ndarray:
    """Copy-synthesis style reconstruction with teacher durations.

    ``z_source``: "posterior_mean" (default), "posterior_sample", or
    "prior_sample" (word latents drawn from N(0, I)).
    """
    models = _ensure_models(ckpt)
    utterance.validate()
    batch = collate([utterance], models.phoneme_index(), models.speaker_index())
    system = models.system
    with torch.no_grad():
        spk = system.speaker_table(batch.speaker_idx)
        enc = system.acoustic.encode_phonemes(
            batch.phoneme_ids, batch.phoneme_lengths, batch.phoneme_mask
        )
        ups = upsample_padded(enc, batch.durations, batch.mel.shape[1])
        mu, var = system.acoustic.encode_reference(
            batch.mel, ups, spk, batch.frame_mask, batch.word_of_frame, batch.max_words
        )
        if z_source == "posterior_mean":
            z = mu
        elif z_source == "posterior_sample":
            z = sample_reparam(
                DiagGaussianSeq(mu, var), torch.randn(mu.shape, generator=generator)
            )
        elif z_source == "prior_sample":
            z = torch.randn(mu.shape, generator=generator)
        else:
            raise ValueError(f"unknown z_source {z_source!r}")
        mel = system.acoustic.decode_frames(
            ups, z, spk, batch.frame_mask, batch.word_of_frame
        )
    return mel[0].cpu().numpy().astype(np.float32)


def reconstruct_with_predicted_prosody(
    ckpt: "Checkpoint | LoadedModels",
    utterance: Utterance,
    embedder=None,
) -> np.ndarray:
    """TTS-predicted word latents decoded with teacher durations.

    Frame counts match the ground-truth mel, so reconstruction error is
    directly comparable with posterior-mean copy-synthesis.
    """
    models = _ensure_models(ckpt)
    if models.predictor is None:
        raise CheckpointError(
            "checkpoint has no prosody predictor; train stage 2 before TTS inference"
        )
    utterance.validate()
    embedder = embedder if embedder is not None else build_embedder(models.config)
    ce = embed_context(utterance.text, embedder, expected_words=utterance.n_words)
    word_embs = pool_to_words(ce).unsqueeze(0)
    batch = collate([utterance], models.phoneme_index(), models.speaker_index())
    system = models.system
    with torch.no_grad():
        spk = system.speaker_table(batch.speaker_idx)
        pred_a, _ = models.predictor(word_embs, spk, torch.tensor([utterance.n_words]))
        enc = system.acoustic.encode_phonemes(
            batch.phoneme_ids, batch.phoneme_lengths, batch.phoneme_mask
        )
        ups = upsample_padded(enc, batch.durations, batch.mel.shape[1])
        mel = system.acoustic.decode_frames(
            ups, pred_a.mean, spk, batch.frame_mask, batch.word_of_frame
        )
    return mel[0].cpu().numpy().astype(np.float32)
