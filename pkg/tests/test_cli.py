"""End-to-end CLI tests: every subcommand drives the real pipeline on a
tiny corpus."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from prosodykit.cli import main
from prosodykit.corpus import load_corpus, load_prosody_truth
from prosodykit.predictor import ProsodyTargetStore


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """gen-corpus + train-stage1 + dump-targets + train-stage2, chained."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()

    spec = {
        "n_speakers": 2,
        "n_utterances": 8,
        "words_per_utterance": [3, 5],
        "phonemes_per_word": [2, 3],
        "mel_bins": 16,
        "n_phoneme_types": 8,
        "n_word_types": 6,
        "speaker_rates": [0.8, 1.3],
        "noise_level": 0.01,
        "seed": 9,
    }
    spec_path = root / "synth.json"
    spec_path.write_text(json.dumps(spec))
    corpus_dir = root / "corpus"
    result = runner.invoke(main, ["gen-corpus", "--spec", str(spec_path), "--out", str(corpus_dir)])
    assert result.exit_code == 0, result.output

    config_path = root / "run.cfg"
    config_path.write_text(
        f"""
        corpus_dir = {corpus_dir}
        mel_bins = 16
        phoneme_dim = 8
        speaker_dim = 4
        acoustic_latent_dim = 2
        duration_latent_dim = 2
        context_dim = 6
        ref_hidden = 8
        decoder_hidden = 8
        decoder_layers = 2
        decoder_kernel = 3
        duration_hidden = 8
        predictor_hidden = 8
        batch_size = 4
        steps = 8
        stage2_steps = 8
        log_every = 2
        seed = 1
        """
    )
    stage1_path = root / "stage1.pt"
    result = runner.invoke(
        main, ["train-stage1", "--config", str(config_path), "--out", str(stage1_path)]
    )
    assert result.exit_code == 0, result.output

    targets_path = root / "targets.bin"
    result = runner.invoke(
        main,
        ["dump-targets", "--ckpt", str(stage1_path), "--corpus", str(corpus_dir),
         "--out", str(targets_path)],
    )
    assert result.exit_code == 0, result.output

    stage2_path = root / "stage2.pt"
    result = runner.invoke(
        main,
        ["train-stage2", "--config", str(config_path), "--stage1", str(stage1_path),
         "--targets", str(targets_path), "--out", str(stage2_path)],
    )
    assert result.exit_code == 0, result.output
    return {
        "root": root,
        "runner": runner,
        "corpus_dir": corpus_dir,
        "config": config_path,
        "stage1": stage1_path,
        "stage2": stage2_path,
        "targets": targets_path,
    }


def test_gen_corpus_outputs(cli_workspace):
    corpus = load_corpus(cli_workspace["corpus_dir"])
    assert len(corpus) == 8
    truth = load_prosody_truth(cli_workspace["corpus_dir"])
    assert set(truth) == {u.id for u in corpus}


def test_train_stage1_writes_loss_log(cli_workspace):
    losses = cli_workspace["root"] / "stage1.pt.losses.jsonl"
    rows = [json.loads(l) for l in losses.read_text().splitlines() if l.strip()]
    assert rows and rows[0]["step"] == 0
    assert {"acoustic_recon", "acoustic_kl", "duration_recon"} <= set(rows[0])


def test_dumped_targets_load(cli_workspace):
    store = ProsodyTargetStore.load(cli_workspace["targets"])
    corpus = load_corpus(cli_workspace["corpus_dir"])
    assert len(store) == len(corpus)


def test_infer_tts_writes_mel_and_sidecar(cli_workspace):
    corpus = load_corpus(cli_workspace["corpus_dir"])
    u = corpus.utterances[0]
    items = cli_workspace["root"] / "tts_items.jsonl"
    items.write_text(
        json.dumps(
            {"id": "demo", "text": u.text, "phonemes": u.phonemes,
             "word_lengths": u.word_lengths()}
        )
        + "\n"
    )
    out_dir = cli_workspace["root"] / "tts_out"
    result = cli_workspace["runner"].invoke(
        main,
        ["infer-tts", "--ckpt", str(cli_workspace["stage2"]), "--input", str(items),
         "--speaker", corpus.speakers[0], "--out", str(out_dir)],
    )
    assert result.exit_code == 0, result.output
    sidecar = json.loads((out_dir / "demo.json").read_text())
    mel = np.frombuffer((out_dir / "demo.f32").read_bytes(), dtype="<f4")
    assert mel.size == sidecar["n_frames"] * sidecar["n_bins"]
    assert sidecar["n_frames"] == sum(sidecar["durations"])


def test_infer_tts_on_stage1_checkpoint_fails_clearly(cli_workspace):
    corpus = load_corpus(cli_workspace["corpus_dir"])
    u = corpus.utterances[0]
    items = cli_workspace["root"] / "tts_items2.jsonl"
    items.write_text(
        json.dumps(
            {"id": "x", "text": u.text, "phonemes": u.phonemes,
             "word_lengths": u.word_lengths()}
        )
        + "\n"
    )
    result = cli_workspace["runner"].invoke(
        main,
        ["infer-tts", "--ckpt", str(cli_workspace["stage1"]), "--input", str(items),
         "--speaker", corpus.speakers[0], "--out", str(cli_workspace["root"] / "nope")],
    )
    assert result.exit_code != 0
    assert "stage 2" in result.output


def test_infer_fpt_outputs(cli_workspace):
    corpus = load_corpus(cli_workspace["corpus_dir"])
    u = corpus.utterances[0]
    target = corpus.speakers[1]
    out_dir = cli_workspace["root"] / "fpt_out"
    result = cli_workspace["runner"].invoke(
        main,
        ["infer-fpt", "--ckpt", str(cli_workspace["stage1"]), "--reference", u.id,
         "--corpus", str(cli_workspace["corpus_dir"]), "--speaker", target,
         "--out", str(out_dir)],
    )
    assert result.exit_code == 0, result.output
    name = f"{u.id}__to__{target}"
    sidecar = json.loads((out_dir / f"{name}.json").read_text())
    assert sidecar["speaker_id"] == target
    assert sidecar["n_frames"] == sum(sidecar["durations"])


def test_infer_fpt_unknown_reference(cli_workspace):
    result = cli_workspace["runner"].invoke(
        main,
        ["infer-fpt", "--ckpt", str(cli_workspace["stage1"]), "--reference", "nope",
         "--corpus", str(cli_workspace["corpus_dir"]), "--speaker", "spk0",
         "--out", str(cli_workspace["root"] / "unused")],
    )
    assert result.exit_code != 0
    assert "nope" in result.output


def test_eval_writes_report_csv_and_plots(cli_workspace):
    report_path = cli_workspace["root"] / "eval" / "report.json"
    result = cli_workspace["runner"].invoke(
        main,
        ["eval", "--ckpt", str(cli_workspace["stage2"]),
         "--corpus", str(cli_workspace["corpus_dir"]),
         "--report", str(report_path), "--max-fpt-pairs", "4",
         "--probe-min-per-speaker", "5"],
    )
    assert result.exit_code == 0, result.output
    report = json.loads(report_path.read_text())
    assert report["metrics"]
    csv_path = report_path.with_suffix(".csv")
    assert csv_path.exists() and csv_path.read_text().startswith("kind,")
    assert list(report_path.parent.glob("*.png")), "expected box-plot images"


def test_eval_no_plots_flag(cli_workspace):
    report_path = cli_workspace["root"] / "eval_noplots" / "report.json"
    result = cli_workspace["runner"].invoke(
        main,
        ["eval", "--ckpt", str(cli_workspace["stage1"]),
         "--corpus", str(cli_workspace["corpus_dir"]),
         "--report", str(report_path), "--no-plots", "--max-fpt-pairs", "2",
         "--probe-min-per-speaker", "5"],
    )
    assert result.exit_code == 0, result.output
    assert not list(report_path.parent.glob("*.png"))


def test_gen_corpus_rejects_unknown_keys(cli_workspace, tmp_path):
    bad_spec = tmp_path / "bad.json"
    bad_spec.write_text(json.dumps({"n_speakers": 2, "frobnicate": 1}))
    result = cli_workspace["runner"].invoke(
        main, ["gen-corpus", "--spec", str(bad_spec), "--out", str(tmp_path / "c")]
    )
    assert result.exit_code != 0
    assert "frobnicate" in result.output
