import csv
import subprocess
import sys
import time
from pathlib import Path

import pytest

from tamrl.cli import main
from tamrl.config import read_manifest

ROOT = Path(__file__).parents[1]
TINY = ROOT / "configs" / "tiny.yaml"
FLUX_TINY = ROOT / "configs" / "flux-tiny.yaml"
DATA = Path(__file__).parent / "data"


def run(*argv) -> int:
    return main([str(a) for a in argv])


def series_manifest(tmp_path, csv_path, extra=""):
    m = tmp_path / "series.yaml"
    m.write_text(
        "dataset:\n  kind: series\n"
        f"  path: {csv_path}\n"
        "schema:\n  drivers: [a, b]\n  response: y\n"
        "window:\n  length: 2\n  stride: 1\n" + extra
    )
    return m


def data_lines(path):
    return [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]


class TestExitCodes:
    def test_gradcheck_passes(self, capsys):
        assert run("gradcheck") == 0
        out = capsys.readouterr().out
        for name in ("mlp", "lstm", "bilstm", "film-pipeline", "joint"):
            assert name in out
        assert "FAIL" not in out

    def test_gradcheck_detects_corruption(self, capsys, caplog):
        assert run("gradcheck", "--corrupt", "lstm") == 1
        assert "lstm" in caplog.text and "gradient check failed" in caplog.text

    def test_unknown_manifest_key(self, tmp_path, caplog):
        m = tmp_path / "bad.yaml"
        m.write_text("model:\n  encodr_hidden: 4\n")
        assert run("synth-gen", "--manifest", m, "--out", tmp_path / "o") == 1
        assert "unknown config key 'model.encodr_hidden'" in caplog.text

    def test_bad_override(self, tmp_path, caplog):
        assert run("synth-gen", "--out", tmp_path, "adapt.stepz=3") == 1
        assert "adapt.stepz" in caplog.text

    @pytest.mark.parametrize("name, message", [
        ("missing_cell", "row 3: missing value in column 'a'"),
        ("duplicate_timestamp", "row 4: timestamp 2020-01-02 is not after previous 2020-01-02"),
        ("decreasing_timestamp", "row 3: timestamp 2020-01-02 is not after previous 2020-01-03"),
        ("unknown_column", "unknown column 'b'"),
    ])
    def test_malformed_series(self, tmp_path, caplog, name, message):
        m = series_manifest(tmp_path, DATA / "malformed" / f"{name}.csv")
        assert run("pretrain", "--manifest", m, "--out", tmp_path / "o") == 1
        assert message in caplog.text

    def test_numeric_failure_exits_2(self, tmp_path, caplog):
        code = run("train", "--manifest", TINY, "--out", tmp_path, "train.lr=1e100", "ensemble.size=1",
                   "train.pretrain_epochs=1", "train.joint_epochs=1")
        assert code == 2
        assert "numeric failure" in caplog.text

    def test_missing_checkpoint(self, tmp_path, caplog):
        assert run("eval", "--manifest", TINY, "--out", tmp_path) == 1
        assert "missing checkpoint" in caplog.text

    def test_report_without_results(self, tmp_path):
        assert run("report", "--out", tmp_path) == 1

    def test_installed_entry_point(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "tamrl.cli", "synth-gen", "--manifest", str(TINY), "--out",
                            str(tmp_path)], capture_output=True, text=True)
        assert r.returncode == 0
        assert "config" in r.stderr and "seed=0" in r.stderr


class TestArtifacts:
    def test_synth_gen_is_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert run("synth-gen", "--manifest", TINY, "--seed", 7, "--out", tmp_path / d) == 0
        for name in ("tasks-train.csv", "tasks-eval.csv", "episodes-train.csv", "episodes-eval.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        cfg = read_manifest(TINY).with_overrides({"seed": 7})
        first = (tmp_path / "a" / "tasks-train.csv").read_text().splitlines()[0]
        assert first == f"# tamrl config={cfg.hash()} seed=7"
        assert len(data_lines(tmp_path / "a" / "tasks-train.csv")) == 1 + 300

    def test_set_flag(self, tmp_path):
        assert run("synth-gen", "--manifest", TINY, "--set", 3, "--out", tmp_path) == 0
        fams = {r["family"] for r in csv.DictReader(data_lines(tmp_path / "tasks-eval.csv"))}
        assert fams == {"quadratic", "tanh", "l1norm"}

    def test_refuses_overwrite_without_force(self, tmp_path, caplog):
        assert run("synth-gen", "--manifest", TINY, "--out", tmp_path) == 0
        assert run("synth-gen", "--manifest", TINY, "--out", tmp_path) == 1
        assert "--force" in caplog.text
        assert run("synth-gen", "--manifest", TINY, "--out", tmp_path, "--force") == 0

    def test_tiny_smoke_and_report(self, tmp_path, capsys):
        t0 = time.perf_counter()
        assert run("ablate", "--manifest", TINY, "--out", tmp_path) == 0
        assert run("report", "--manifest", TINY, "--out", tmp_path) == 0
        assert time.perf_counter() - t0 < 60
        rows = list(csv.DictReader(data_lines(tmp_path / "report.csv")))
        models = [r["model"] for r in rows]
        assert sorted(models) == sorted(["tamrl", "tamrl-no-finetune", "tamrl-no-pretrain",
                                         "tamrl-no-finetune-no-pretrain", "base", "fomaml"])
        assert all(r["budget"] == "SET1" and int(r["n_entities"]) == 60 for r in rows)
        for p in tmp_path.glob("*.csv"):
            assert p.read_text().startswith("# tamrl config="), p.name

    def test_stage_by_stage(self, tmp_path):
        args = ("--manifest", TINY, "--out", tmp_path, "ensemble.size=1")
        for verb in ("pretrain", "train", "adapt", "eval", "export-embeddings"):
            assert run(verb, *args) == 0, verb
        trace = list(csv.DictReader(data_lines(tmp_path / "adapt-trace.csv")))
        assert {int(r["step"]) for r in trace} == set(range(6))
        emb = list(csv.DictReader(data_lines(tmp_path / "embeddings-seed0.csv")))
        assert len(emb) == 60 and {"entity_id", "budget", "family", "z_0"} <= set(emb[0])
        assert run("eval", *args, "--variant", "tamrl-no-finetune") == 0
        assert run("report", *args) == 0
        models = {r["model"] for r in csv.DictReader(data_lines(tmp_path / "report.csv"))}
        assert models == {"tamrl", "tamrl-no-finetune"}

    def test_checkpoint_config_mismatch(self, tmp_path, caplog):
        args = ("--manifest", TINY, "--out", tmp_path, "ensemble.size=1", "train.joint_epochs=1")
        assert run("train", *args) == 0
        assert run("eval", "--manifest", TINY, "--out", tmp_path, "ensemble.size=1", "train.joint_epochs=2") == 1
        assert "trained under config" in caplog.text
        # adaptation settings do not invalidate checkpoints
        assert run("eval", *args, "adapt.steps=2") == 0

    def test_series_pipeline(self, tmp_path):
        args = ("--manifest", FLUX_TINY, "--out", tmp_path, "ensemble.size=1")
        for verb in ("pretrain", "train", "adapt", "eval", "export-embeddings"):
            assert run(verb, *args) == 0, verb
        rows = list(csv.DictReader(data_lines(tmp_path / "results-tamrl.csv")))
        assert {r["budget"] for r in rows} == {"2", "6"}
        assert all(float(r["rmse"]) >= 0 for r in rows)
