import csv
import math

import pytest

from patchforge import cli
from patchforge.detector import DetectorConfig, MiniYOLO
from patchforge.evalkit import EvalReport


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """Small scenes and an untrained 32-px detector, shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--count", 6, "--seed", 7, "--image-size", 32, "--min-object-size", 8,
               "--max-object-size", 16, "--classes", "circle,square,triangle", "--out", root / "data") == 0
    model = MiniYOLO(DetectorConfig(image_size=32, S=4, C=3, anchors=((8, 8), (16, 16)), channels=(4, 6, 8, 8)), seed=1)
    model.save(root / "w.pft")
    return root


def test_gen_data_writes_scenes(tmp_path):
    assert run("gen-data", "--count", 100, "--seed", 7, "--out", tmp_path) == 0
    assert len(list(tmp_path.glob("img_*.png"))) == 100
    assert len((tmp_path / "labels.txt").read_text().splitlines()) == 100
    assert (tmp_path / "manifest.txt").exists() and (tmp_path / "config.txt").exists()


def test_unknown_flag_is_usage_error(tmp_path, capsys):
    assert run("gen-data", "--bogus", "--out", tmp_path) == 1
    assert "usage" in capsys.readouterr().err


def test_bad_choice_is_usage_error(tmp_path):
    assert run("attack", "--method", "fgsm", "--out", tmp_path) == 1
    cfg = tmp_path / "run.cfg"
    cfg.write_text("attack.method=fgsm\n")
    assert run("attack", "--config", cfg, "--out", tmp_path) == 1


def test_missing_subcommand_is_usage_error(capsys):
    assert run() == 1


def test_missing_required_option_is_usage_error(tmp_path, capsys):
    assert run("train", "--out", tmp_path) == 1
    assert "--data" in capsys.readouterr().err


def test_runtime_failure_exits_2(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nowhere", "--out", tmp_path / "o") == 2
    assert run("report", tmp_path / "empty") == 2


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# scenes\ndata.count=3\ndata.image_size=64\ndata.max_object_size=30\nseed=5\n")
    assert run("gen-data", "--config", cfg, "--count", 2, "--out", tmp_path / "d") == 0
    snap = dict(line.split("=", 1) for line in (tmp_path / "d" / "config.txt").read_text().splitlines())
    assert snap["data.count"] == "2" and snap["data.image_size"] == "64" and snap["seed"] == "5"
    # the snapshot reproduces the run byte for byte
    assert run("gen-data", "--config", tmp_path / "d" / "config.txt", "--out", tmp_path / "e") == 0
    for f in sorted((tmp_path / "d").glob("img_*.png")):
        assert f.read_bytes() == (tmp_path / "e" / f.name).read_bytes()


def test_bad_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("data.colour=red\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d") == 1


def test_eval_three_thresholds(tiny, tmp_path):
    assert run("eval", "--data", tiny / "data", "--weights", tiny / "w.pft", "--conf", 0.001, "--conf", 0.1,
               "--conf", 0.5, "--out", tmp_path) == 0
    names = sorted(p.name for p in tmp_path.glob("baseline_conf*.csv"))
    assert names == ["baseline_conf0.001.csv", "baseline_conf0.1.csv", "baseline_conf0.5.csv"]


def test_attack_then_eval_workflow(tiny, tmp_path):
    out = tmp_path / "atk"
    assert run("attack", "--data", tiny / "data", "--weights", tiny / "w.pft", "--method", "dpatch", "--no-clip",
               "--transform", "fixed", "--patch-size", 8, "--steps", 2, "--iterations", 2, "--restarts", 1,
               "--batch-size", 2, "--out", out) == 0
    for name in ("patch.pft", "patch.png", "history_r0.csv", "manifest.txt", "config.txt"):
        assert (out / name).exists()
    manifest = (out / "manifest.txt").read_text()
    assert "weights_sha256=" in manifest and "attack.clip=false" in manifest
    assert run("eval", "--data", tiny / "data", "--weights", tiny / "w.pft", "--patch", out / "patch.pft",
               "--placement", "fixed", "--label", "dpatch", "--out", tmp_path / "ev") == 0
    assert len(list((tmp_path / "ev").glob("dpatch_conf*.csv"))) == 3


def test_heatmap_command(tiny, tmp_path):
    assert run("heatmap", "--data", tiny / "data", "--weights", tiny / "w.pft", "--images", "0,3", "--out", tmp_path) == 0
    assert sorted(p.name for p in tmp_path.iterdir() if p.name.startswith("heatmap")) == [
        "heatmap_00000.csv", "heatmap_00000.png", "heatmap_00003.csv", "heatmap_00003.png"]
    assert run("heatmap", "--data", tiny / "data", "--weights", tiny / "w.pft", "--images", "99", "--out", tmp_path) == 1


def write_report(path, label, conf, aps):
    valid = [v for v in aps.values() if v is not None]
    EvalReport(conf, aps, sum(valid) / len(valid), 5, 5, []).to_csv(path / f"{label}_conf{conf:g}.csv")


def test_report_single_baseline(tmp_path, capsys):
    write_report(tmp_path, "baseline", 0.1, {"circle": 0.5, "square": 0.7})
    assert run("report", tmp_path) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and lines[1].startswith("Baseline")


def test_report_nine_rows_grouped(tmp_path, capsys):
    for label in ("ours", "dpatch", "baseline"):
        for conf in (0.001, 0.1, 0.5):
            write_report(tmp_path, label, conf, {"circle": 0.2, "square": 0.4, "star": None})
    assert run("report", tmp_path) == 0
    rows = capsys.readouterr().out.strip().splitlines()[1:]
    assert len(rows) == 9
    methods = [r.split()[0] for r in rows]
    assert methods == ["Baseline"] * 3 + ["Dpatch"] * 3 + ["Ours"] * 3


def test_report_extremes_match_csv(tmp_path):
    write_report(tmp_path, "ours", 0.5, {"circle": 0.3, "square": 0.05, "triangle": 0.9, "star": None})
    ((method, conf, mean, lo, hi),) = cli.report_rows(tmp_path)
    with open(tmp_path / "ours_conf0.5.csv") as fh:
        vals = {r["class"]: float(r["ap"]) for r in csv.DictReader(fh) if r["class"] != "mAP"}
    vals = {k: v for k, v in vals.items() if not math.isnan(v)}
    assert lo == (min(vals, key=vals.get), min(vals.values()))
    assert hi == (max(vals, key=vals.get), max(vals.values()))


def test_thread_cap_env(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv("PATCHFORGE_THREADS", "1")
    assert run("eval", "--data", tiny / "data", "--weights", tiny / "w.pft", "--conf", 0.1, "--out", tmp_path) == 0
    monkeypatch.setenv("PATCHFORGE_THREADS", "zero")
    assert run("eval", "--data", tiny / "data", "--weights", tiny / "w.pft", "--out", tmp_path) == 1
