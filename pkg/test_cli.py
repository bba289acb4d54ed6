import json

import numpy as np
import pytest
from click.testing import CliRunner

from src import __version__
from src.alignment import LinearMap
from src.cli import cli, main
from src.utils import read_jsonl

SMALL_SETTINGS = """
features:
  sample_rate: 1000
  segment_seconds: 2.0
  label_rate: 10
  conv_channels: [4, 6, 5]
  pool_sizes: [10, 5, 2]
synthetic:
  vocab_size: 60
  speech_dim: 8
  text_dim: 8
  train_segments: 3
  dev_segments: 2
  heldout_pairs: 10
alignment:
  steps: 5
  hidden_size: 16
  batch_size: 8
  dictionary_size: 40
  eval_interval: 5
training:
  epochs: 1
  batch_size: 2
  shared_dim: 4
  hidden_size: 4
  sequence_length: 20
"""


@pytest.fixture
def settings(tmp_path):
    path = tmp_path / "settings.yaml"
    path.write_text(SMALL_SETTINGS, encoding="utf-8")
    return str(path)


@pytest.fixture
def corpus(tmp_path, settings):
    out = tmp_path / "corpus"
    assert main(["-s", settings, "gen-data", "--out", str(out), "--seed", "5"]) == 0
    return out


def test_version_option():
    result = CliRunner().invoke(cli, ["--version"])
    assert result.exit_code == 0
    assert __version__ in result.output


def test_gen_data_reports_corpus(tmp_path, settings):
    result = CliRunner().invoke(cli, ["-s", settings, "gen-data", "--out", str(tmp_path / "c"),
                                      "--vocab-size", "40"])
    assert result.exit_code == 0, result.output
    assert "40 words" in result.output
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["spec"]["vocab_size"] == 40


def test_align_refine_train_eval_pipeline(tmp_path, settings, corpus):
    adversarial = tmp_path / "adv.ckpt"
    refined = tmp_path / "refined.ckpt"
    run_dir = tmp_path / "run"
    scores_path = tmp_path / "scores.json"

    assert main(["-s", settings, "align", "-d", str(corpus), "-o", str(adversarial)]) == 0
    assert LinearMap.load(adversarial).W.shape == (8, 8)

    assert main(["-s", settings, "refine", "-d", str(corpus), "--map", str(adversarial),
                 "-o", str(refined)]) == 0
    assert LinearMap.load(refined).orthogonality_defect() < 1e-8

    assert main(["-s", settings, "train", "-d", str(corpus), "--map", str(refined),
                 "--checkpoint-dir", str(run_dir)]) == 0
    assert (run_dir / "best.ckpt").exists()

    assert main(["-s", settings, "eval", "--checkpoint", str(run_dir / "best.ckpt"), "-d", str(corpus),
                 "--json-out", str(scores_path)]) == 0
    scores = json.loads(scores_path.read_text(encoding="utf-8"))
    assert set(scores) >= {"arousal", "valence", "liking", "mean", "split", "epoch"}
    assert scores["split"] == "dev"


def test_json_config_sits_between_settings_and_flags(tmp_path, settings, corpus):
    config = tmp_path / "overrides.json"
    config.write_text(json.dumps({"training": {"epochs": 3, "semantic_source": "speech"}}), encoding="utf-8")
    run_dir = tmp_path / "run"
    assert main(["-s", settings, "-c", str(config), "train", "-d", str(corpus),
                 "--checkpoint-dir", str(run_dir), "--epochs", "2"]) == 0
    assert len(read_jsonl(run_dir / "metrics.jsonl")) == 2


def test_usage_errors_exit_with_one(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "-d", str(tmp_path)]) == 1
    assert main(["no-such-command"]) == 1


def test_runtime_errors_exit_with_two(tmp_path, settings):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["-s", settings, "train", "-d", str(empty)]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("training:\n  dropout: 1.5\n", encoding="utf-8")
    assert main(["-s", str(bad), "grad-check", "--cases", "1"]) == 2


def test_unknown_config_field_is_a_runtime_error(tmp_path, settings, corpus):
    config = tmp_path / "overrides.json"
    config.write_text(json.dumps({"training": {"epochz": 3}}), encoding="utf-8")
    assert main(["-s", settings, "-c", str(config), "train", "-d", str(corpus)]) == 2


def test_grad_check_passes_and_fails_on_tolerance():
    assert main(["grad-check", "--cases", "1"]) == 0
    assert main(["grad-check", "--cases", "1", "--tolerance", "0"]) == 2


def test_map_for_other_embedding_width_exits_with_two(tmp_path, settings, corpus):
    wrong = tmp_path / "wrong.ckpt"
    LinearMap(np.ones((8, 5))).save(wrong)
    assert main(["-s", settings, "train", "-d", str(corpus), "--map", str(wrong),
                 "--checkpoint-dir", str(tmp_path / "run")]) == 2
