import json
import logging
from pathlib import Path

import pytest

from composer_gar import cli, config, synth, train
from composer_gar.checkpoint import load_checkpoint
from composer_gar.config import CONFIG_KEYS
from composer_gar.dataset import load_dataset, load_manifest

GOLDEN = Path(__file__).resolve().parent / "golden"
FAST = ["--ablate", "epochs=1", "--ablate", "batch_size=8"]


def _run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "clips.ndjson"
    assert _run("synth-gen", "--out", path, "--n-clips", 16, "--T", 4, "--persons", 3) == 0
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data):
    out = tmp_path_factory.mktemp("run")
    assert _run("train", "--data", data, "--out", out, "--deterministic", *FAST) == 0
    return out


def _check_type(value, kind):
    if kind == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "number_or_null":
        return value is None or _check_type(value, "number")
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "int_matrix":
        return (isinstance(value, list) and all(isinstance(r, list) and len(r) == len(value) for r in value)
                and all(_check_type(x, "int") for r in value for x in r))
    if kind == "str_list":
        return isinstance(value, list) and all(isinstance(x, str) for x in value)
    raise AssertionError(f"unknown schema type {kind}")


class TestSynthGen:
    def test_writes_data_and_manifest(self, data):
        assert len(data.read_text().splitlines()) == 16
        manifest = json.loads((data.parent / "manifest.json").read_text())
        assert manifest["max_persons"] == 3 and manifest["T"] == 4

    def test_single_person_rejected(self, tmp_path, capsys):
        assert _run("synth-gen", "--out", tmp_path / "x.ndjson", "--persons", 1) == cli.EXIT_CONFIG
        assert "at least 2" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, run_dir):
        assert (run_dir / "metrics.csv").read_text().splitlines()[0] == ",".join(
            ["epoch", "loss_total", "loss_aux", "loss_last", "loss_person", "loss_cluster",
             "train_acc", "val_acc"])
        assert config.load(run_dir / "config.txt").epochs == 1
        assert (run_dir / "checkpoint" / "manifest.json").is_file()

    def test_deterministic_runs_identical_csv(self, run_dir, data, tmp_path):
        assert _run("train", "--data", data, "--out", tmp_path, "--deterministic", *FAST) == 0
        assert (tmp_path / "metrics.csv").read_text() == (run_dir / "metrics.csv").read_text()

    def test_seed_flag(self, data, tmp_path):
        assert _run("train", "--data", data, "--out", tmp_path, "--seed", 5, *FAST) == 0
        assert config.load(tmp_path / "config.txt").seed == 5

    def test_one_scale_token_counts(self, data, tmp_path, caplog):
        with caplog.at_level(logging.INFO, logger="composer_gar"):
            assert _run("train", "--data", data, "--out", tmp_path, "--ablate", "num_scales=1", *FAST) == 0
        # 3 persons x 17 keypoints plus [CLS] and one object
        assert "token counts per scale: 53" in caplog.text
        assert "token counts per scale: 53," not in caplog.text

    def test_four_scale_token_counts(self, data, tmp_path, caplog):
        with caplog.at_level(logging.INFO, logger="composer_gar"):
            assert _run("train", "--data", data, "--out", tmp_path, *FAST) == 0
        assert "token counts per scale: 53, 5, 8, 4" in caplog.text

    def test_missing_config_key(self, data, tmp_path, capsys):
        text = config.dumps(config.desk()).replace("model.d_type = 8\n", "")
        cfg_file = tmp_path / "cfg.txt"
        cfg_file.write_text(text)
        code = _run("train", "--data", data, "--out", tmp_path / "o", "--config", cfg_file)
        assert code == 2
        assert "model.d_type" in capsys.readouterr().err

    def test_unknown_ablation_key(self, data, tmp_path, capsys):
        assert _run("train", "--data", data, "--out", tmp_path, "--ablate", "warp=9") == 2
        assert "warp" in capsys.readouterr().err

    def test_missing_data(self, tmp_path):
        assert _run("train", "--data", tmp_path / "none.ndjson", "--out", tmp_path) == 2


class TestEval:
    def test_schema_matches_golden(self, run_dir, data, capsys):
        capsys.readouterr()
        assert _run("eval", "--checkpoint", run_dir / "checkpoint", "--data", data) == 0
        payload = json.loads(capsys.readouterr().out)
        schema = json.loads((GOLDEN / "eval_schema.json").read_text())
        assert set(payload) == set(schema)
        for key, kind in schema.items():
            assert _check_type(payload[key], kind), key
        assert len(payload["confusion"]) == len(payload["class_names"])

    def test_loaded_equals_in_memory(self, run_dir, data):
        # retrain in-process with the same split and seed as the train command
        ckpt = load_checkpoint(run_dir / "checkpoint")
        manifest = load_manifest(data.parent / "manifest.json")
        clips = load_dataset(data, manifest)
        cfg = config.load(run_dir / "config.txt")
        tr, val = synth.stratified_split(clips, 0.2, cfg.seed)
        res = train.fit(cfg, tr, manifest, val)
        in_memory = train.evaluate(res.model, clips, manifest, res.stats, cfg)
        loaded = cli.eval_json(ckpt, clips)
        assert loaded["confusion"] == in_memory.confusion
        assert loaded["accuracy"] == in_memory.accuracy
        assert loaded["person_accuracy"] == in_memory.person_accuracy

    def test_malformed_checkpoint(self, run_dir, data, tmp_path):
        bad = tmp_path / "ckpt"
        bad.mkdir()
        meta = json.loads((run_dir / "checkpoint" / "manifest.json").read_text())
        meta["format"] = "something-else"
        (bad / "manifest.json").write_text(json.dumps(meta))
        assert _run("eval", "--checkpoint", bad, "--data", data) == 3


class TestExportAttention:
    def test_rows_are_stochastic(self, run_dir, data, tmp_path):
        out = tmp_path / "att.json"
        clip_id = json.loads(data.read_text().splitlines()[0])["clip_id"]
        assert _run("export-attention", "--checkpoint", run_dir / "checkpoint", "--data", data,
                    "--clip-id", clip_id, "--out", out) == 0
        payload = json.loads(out.read_text())
        assert payload["clip_id"] == clip_id
        assert [b["block"] for b in payload["blocks"]] == [1, 2]
        for block in payload["blocks"]:
            assert [len(s["tokens"]) for s in block["scales"]] == [53, 5, 8, 4]
            for scale in block["scales"]:
                n = len(scale["tokens"])
                for head in scale["heads"]:
                    assert len(head) == n
                    assert all(abs(sum(row) - 1) <= 1e-6 and len(row) == n for row in head)
            assert block["scales"][0]["tokens"][0] == ["cls"]

    def test_unknown_clip(self, run_dir, data, tmp_path):
        assert _run("export-attention", "--checkpoint", run_dir / "checkpoint", "--data", data,
                    "--clip-id", "nope", "--out", tmp_path / "a.json") == 4


class TestGradcheck:
    def test_passes_and_lists_worst(self, capsys):
        assert _run("gradcheck", "--n-coords", 20, "--clips", 2) == 0
        out = capsys.readouterr().out
        assert "PASS" in out
        assert len([line for line in out.splitlines() if "rel=" in line]) == 10

    def test_failure_exit_code(self, capsys):
        assert _run("gradcheck", "--n-coords", 10, "--clips", 2, "--tol", 0) == 1
        assert "FAIL" in capsys.readouterr().out


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        _run("--help")
    text = capsys.readouterr().out
    for key in CONFIG_KEYS:
        assert key in text
    for command in ("train", "eval", "export-attention", "gradcheck", "synth-gen"):
        assert command in text


def test_train_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        _run("train", "--help")
    text = capsys.readouterr().out
    assert all(key in text for key in CONFIG_KEYS)
    assert "--deterministic" in text and "--seed" in text
