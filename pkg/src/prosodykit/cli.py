"""Command-line interface: corpus generation, two-stage training, target
dumping, both inference modes, and evaluation reports."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import click
import numpy as np

from . import corpus as corpus_mod
from . import evalkit
from . import pipeline as pl

logger = logging.getLogger(__name__)


def _setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


def _load_synth_spec(path: Path) -> corpus_mod.SynthSpec:
    raw = json.loads(path.read_text())
    known = {f.name for f in fields(corpus_mod.SynthSpec)}
    unknown = set(raw) - known
    if unknown:
        raise click.ClickException(f"unknown synth spec keys: {sorted(unknown)}")
    for key in ("words_per_utterance", "phonemes_per_word", "speaker_rates"):
        if key in raw and raw[key] is not None:
            raw[key] = tuple(raw[key])
    return corpus_mod.SynthSpec(**raw)


def _write_mel_outputs(out_dir: Path, name: str, mel: np.ndarray, durations: np.ndarray, meta: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    mel_path = out_dir / f"{name}.f32"
    mel_path.write_bytes(np.ascontiguousarray(mel, dtype="<f4").tobytes())
    sidecar = {
        "mel_file": mel_path.name,
        "n_frames": int(mel.shape[0]),
        "n_bins": int(mel.shape[1]),
        "durations": [int(d) for d in durations],
        **meta,
    }
    (out_dir / f"{name}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose: bool):
    """Word-level prosody modeling: training, transfer, TTS, evaluation."""
    _setup_logging(verbose)


@main.command("gen-corpus")
@click.option("--spec", "spec_path", type=click.Path(exists=True, path_type=Path), required=True,
              help="JSON file with synthetic corpus settings.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
def gen_corpus(spec_path: Path, out_dir: Path):
    """Generate a synthetic corpus (with its prosody ground-truth sidecar)."""
    spec = _load_synth_spec(spec_path)
    corpus, truth = corpus_mod.generate_synthetic_corpus(spec)
    corpus_mod.save_corpus(corpus, out_dir, prosody_truth=truth)
    click.echo(
        f"wrote {len(corpus)} utterances, {len(corpus.speakers)} speakers to {out_dir}"
    )


@main.command("train-stage1")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True)
def train_stage1_cmd(config_path: Path, out_path: Path):
    """Train the acoustic and duration models (Stage I)."""
    config = pl.RunConfig.from_file(config_path)
    log_rows: list[dict] = []

    def on_step(log: pl.StepLog):
        if config.log_every and log.step % config.log_every == 0:
            log_rows.append(log.__dict__.copy())

    try:
        ckpt = pl.train_stage1(config, on_step=on_step)
    except pl.TrainingDivergedError as exc:
        rescue = out_path.with_suffix(out_path.suffix + ".diverged")
        if exc.last_good is not None:
            pl.save_checkpoint(exc.last_good, rescue)
        raise click.ClickException(f"{exc} (last good checkpoint: {rescue})") from exc
    pl.save_checkpoint(ckpt, out_path)
    losses_path = out_path.with_suffix(out_path.suffix + ".losses.jsonl")
    losses_path.write_text("\n".join(json.dumps(r) for r in log_rows) + "\n")
    click.echo(f"stage1 checkpoint written to {out_path} (loss log: {losses_path})")


@main.command("dump-targets")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True)
def dump_targets_cmd(ckpt_path: Path, corpus_dir: Path, out_path: Path):
    """Dump word-level posterior parameters as Stage II training targets."""
    ckpt = pl.load_checkpoint(ckpt_path)
    corpus = corpus_mod.load_corpus(corpus_dir)
    store = pl.dump_targets(corpus, ckpt)
    store.save(out_path)
    click.echo(f"dumped targets for {len(store)} utterances to {out_path}")


@main.command("train-stage2")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--stage1", "stage1_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--targets", "targets_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="Pre-dumped target store; dumped on the fly if omitted.")
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True)
def train_stage2_cmd(config_path: Path, stage1_path: Path, targets_path: Path | None, out_path: Path):
    """Train the prosody predictor (Stage II); Stage I stays frozen."""
    config = pl.RunConfig.from_file(config_path)
    stage1 = pl.load_checkpoint(stage1_path)
    targets = None
    if targets_path is not None:
        from .predictor import ProsodyTargetStore

        targets = ProsodyTargetStore.load(targets_path)
    log_rows: list[dict] = []

    def on_step(log: pl.Stage2StepLog):
        if config.log_every and log.step % config.log_every == 0:
            log_rows.append({"step": log.step, "loss": log.loss})

    try:
        ckpt = pl.train_stage2(config, stage1, targets=targets, on_step=on_step)
    except pl.TrainingDivergedError as exc:
        rescue = out_path.with_suffix(out_path.suffix + ".diverged")
        if exc.last_good is not None:
            pl.save_checkpoint(exc.last_good, rescue)
        raise click.ClickException(f"{exc} (last good checkpoint: {rescue})") from exc
    pl.save_checkpoint(ckpt, out_path)
    losses_path = out_path.with_suffix(out_path.suffix + ".losses.jsonl")
    losses_path.write_text("\n".join(json.dumps(r) for r in log_rows) + "\n")
    click.echo(f"stage2 checkpoint written to {out_path} (loss log: {losses_path})")


@main.command("infer-tts")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--input", "input_path", type=click.Path(exists=True, path_type=Path), required=True,
              help="JSONL: one {id, text, phonemes, word_lengths} object per line.")
@click.option("--speaker", required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--mode", type=click.Choice(["mean", "sample"]), default="mean")
@click.option("--temperature", type=float, default=1.0)
def infer_tts_cmd(ckpt_path: Path, input_path: Path, speaker: str, out_dir: Path,
                  mode: str, temperature: float):
    """Synthesize mels from text items for one target speaker."""
    ckpt = pl.load_checkpoint(ckpt_path)
    try:
        models = pl.load_models(ckpt)
        count = 0
        for line_no, line in enumerate(input_path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            item = json.loads(line)
            mel, durations = pl.infer_tts(
                item["text"], item["phonemes"], item["word_lengths"], speaker,
                models, mode=mode, temperature=temperature,
            )
            _write_mel_outputs(
                out_dir, item.get("id", f"item-{line_no:04d}"), mel, durations,
                {"speaker_id": speaker, "text": item["text"], "mode": mode},
            )
            count += 1
    except (pl.CheckpointError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"synthesized {count} items to {out_dir}")


@main.command("infer-fpt")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--reference", "reference_id", required=True, help="Utterance id in the corpus.")
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--speaker", required=True, help="Target speaker id.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
def infer_fpt_cmd(ckpt_path: Path, reference_id: str, corpus_dir: Path, speaker: str, out_dir: Path):
    """Transfer the reference utterance's prosody onto the target speaker."""
    ckpt = pl.load_checkpoint(ckpt_path)
    corpus = corpus_mod.load_corpus(corpus_dir)
    try:
        reference = corpus.by_id(reference_id)
    except KeyError as exc:
        raise click.ClickException(str(exc)) from exc
    try:
        mel, durations = pl.infer_fpt(reference, speaker, ckpt)
    except (pl.CheckpointError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    _write_mel_outputs(
        out_dir, f"{reference_id}__to__{speaker}", mel, durations,
        {"speaker_id": speaker, "reference_id": reference_id},
    )
    click.echo(f"transfer written to {out_dir}")


@main.command("eval")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--report", "report_path", type=click.Path(path_type=Path), required=True)
@click.option("--plots/--no-plots", default=True, help="Render per-metric box plots.")
@click.option("--max-fpt-pairs", type=int, default=40)
@click.option("--probe-min-per-speaker", type=int, default=100)
@click.option("--seed", type=int, default=0)
def eval_cmd(ckpt_path: Path, corpus_dir: Path, report_path: Path, plots: bool,
             max_fpt_pairs: int, probe_min_per_speaker: int, seed: int):
    """Evaluate a checkpoint: JSON report, per-sample CSV, optional figures."""
    ckpt = pl.load_checkpoint(ckpt_path)
    corpus = corpus_mod.load_corpus(corpus_dir)
    report, rows, samples = evalkit.evaluate_checkpoint(
        ckpt, corpus, seed=seed, max_fpt_pairs=max_fpt_pairs,
        probe_min_per_speaker=probe_min_per_speaker,
    )
    evalkit.emit_report(report, report_path, plots=plots, samples_per_speaker=samples)
    csv_path = report_path.with_suffix(".csv")
    evalkit.write_samples_csv(rows, csv_path)
    click.echo(f"report: {report_path}\nsamples: {csv_path}")
    for m in report.metrics:
        click.echo(f"  {m.name}: {m.value:.5f} (n={m.n})")


if __name__ == "__main__":
    main()
