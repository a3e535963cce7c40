import json
import subprocess
import sys
from pathlib import Path

import pytest

from soilref.cli import main
from soilref.raster_io import read_pgm
from soilref.tinynet import load_checkpoint

SMOKE_N = 12


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One shared gen -> train -> refine run, small enough to stay quick."""
    root = tmp_path_factory.mktemp("cli")
    ds, run, refined = root / "ds", root / "run", root / "refined"
    cfg = root / "tc.json"
    cfg.write_text(json.dumps({"epochs": 2, "batch_size": 4}))
    assert main(["gen", "--n", str(SMOKE_N), "--seed", "7", "--out", str(ds), "--quiet"]) == 0
    assert main([
        "train", "--data", str(ds), "--out", str(run),
        "--seed", "3", "--config", str(cfg), "--quiet",
    ]) == 0
    assert main([
        "refine", "--data", str(ds), "--checkpoint", str(run / "stage2.ckpt"),
        "--out", str(refined), "--quiet",
    ]) == 0
    return {"root": root, "ds": ds, "run": run, "refined": refined, "cfg": cfg}


def test_gen_writes_dataset_tree(pipeline):
    ds = pipeline["ds"]
    manifest = json.loads((ds / "manifest.json").read_text())
    assert manifest["n"] == SMOKE_N
    assert len(manifest["samples"]) == SMOKE_N
    assert (ds / "split.json").is_file()
    assert (ds / "run_manifest.json").is_file()


def test_gen_is_deterministic(pipeline, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["gen", "--n", "10", "--seed", "7", "--out", str(out), "--quiet"]) == 0
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    ra = json.loads((a / "run_manifest.json").read_text())
    rb = json.loads((b / "run_manifest.json").read_text())
    assert ra["run"]["artifacts"] == rb["run"]["artifacts"]


def test_gen_rejects_zero_n(tmp_path, capsys):
    assert main(["gen", "--n", "0", "--out", str(tmp_path / "x"), "--quiet"]) == 2
    assert "usage error" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_gen_requires_out(capsys):
    assert main(["gen", "--n", "10", "--quiet"]) == 2


def test_gen_rejects_bad_config(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text("[1, 2]")
    assert main(["gen", "--n", "10", "--config", str(cfg), "--out", str(tmp_path / "x"), "--quiet"]) == 2


def test_train_writes_two_checkpoints(pipeline):
    run = pipeline["run"]
    for name, kind in (("stage1.ckpt", "dual"), ("stage2.ckpt", "dual")):
        params = load_checkpoint(run / name)
        assert params.arch.kind == kind
    for name in ("stage1_report.json", "stage2_report.json", "train_config.json"):
        assert (run / name).is_file()


def test_train_fails_on_missing_dataset(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "ghost"), "--out", str(tmp_path / "run"), "--quiet"])
    assert rc == 1
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_refine_writes_one_pgm_per_test_sample(pipeline):
    split = json.loads((pipeline["ds"] / "split.json").read_text())
    pgms = sorted(p.name for p in pipeline["refined"].glob("*.pgm"))
    assert pgms == sorted(f"{i}.pgm" for i in split["test"])
    lab = read_pgm(pipeline["refined"] / pgms[0])
    assert lab.data.shape == (64, 64)


def test_refine_is_deterministic(pipeline, tmp_path):
    out2 = tmp_path / "refined2"
    assert main([
        "refine", "--data", str(pipeline["ds"]),
        "--checkpoint", str(pipeline["run"] / "stage2.ckpt"),
        "--out", str(out2), "--quiet",
    ]) == 0
    for p in pipeline["refined"].glob("*.pgm"):
        assert (out2 / p.name).read_bytes() == p.read_bytes()


def test_refine_missing_checkpoint(pipeline, tmp_path, capsys):
    rc = main([
        "refine", "--data", str(pipeline["ds"]),
        "--checkpoint", str(tmp_path / "nope.ckpt"),
        "--out", str(tmp_path / "r"), "--quiet",
    ])
    assert rc == 1
    assert "checkpoint" in capsys.readouterr().err


def _run_eval(pipeline, tmp_path) -> Path:
    out = tmp_path / "eval"
    # eval needs refined maps for every split it touches
    all_refined = tmp_path / "refined_all"
    assert main([
        "refine", "--data", str(pipeline["ds"]),
        "--checkpoint", str(pipeline["run"] / "stage2.ckpt"),
        "--split", "all", "--out", str(all_refined), "--quiet",
    ]) == 0
    assert main([
        "eval", "--data", str(pipeline["ds"]), "--refined", str(all_refined),
        "--out", str(out), "--seed", "3", "--config", str(pipeline["cfg"]), "--quiet",
    ]) == 0
    return out


def test_eval_emits_six_reports(pipeline, tmp_path):
    out = _run_eval(pipeline, tmp_path)
    doc = json.loads((out / "eval.json").read_text())
    reports = doc["reports"]
    assert len(reports) == 6
    assert {r["model"] for r in reports} == {"downstream-manual", "downstream-refined"}
    assert [r["variant"] for r in reports[:3]] == ["manual", "ensemble", "intersection"]
    assert (out / "eval.csv").is_file() and (out / "table.txt").is_file()


def test_report_renders_table(pipeline, tmp_path, capsys):
    out = _run_eval(pipeline, tmp_path)
    capsys.readouterr()
    assert main(["report", str(out / "eval.json")]) == 0
    text = capsys.readouterr().out
    assert "downstream-manual" in text and "intersection" in text
    assert text.strip() == (out / "table.txt").read_text().strip()


def _export_bundle(pipeline, tmp_path) -> Path:
    out = tmp_path / "bundle"
    assert main([
        "export-review", "--data", str(pipeline["ds"]), "--refined", str(pipeline["refined"]),
        "--out", str(out), "--seed", "11", "--fraction", "1.0", "--quiet",
    ]) == 0
    return out


def test_export_review_bundle(pipeline, tmp_path):
    out = _export_bundle(pipeline, tmp_path)
    manifest = json.loads((out / "manifest.json").read_text())
    split = json.loads((pipeline["ds"] / "split.json").read_text())
    assert len(manifest["items"]) == len(split["test"])
    for entry in manifest["items"]:
        for key in ("original", "overlay_a", "overlay_b"):
            assert (out / entry[key]).is_file()
    assert (out / "private" / "assignments.json").is_file()


def test_import_review_round_trip(pipeline, tmp_path, capsys):
    bundle = _export_bundle(pipeline, tmp_path)
    assignments = json.loads((bundle / "private" / "assignments.json").read_text())["items"]
    # reviewer always prefers the ensemble annotation, whatever the blinding
    recs = []
    for item_id, a_source in assignments.items():
        choice = "B" if a_source == "manual" else "A"
        recs.append({"item_id": item_id, "reviewer_id": "r9", "choice": choice,
                     "timestamp": "2026-08-17T10:00:00Z"})
    results = tmp_path / "r9.jsonl"
    results.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    out = tmp_path / "report"
    capsys.readouterr()
    assert main(["import-review", "--bundle", str(bundle), str(results), "--out", str(out)]) == 0
    doc = json.loads((out / "review_report.json").read_text())
    assert doc["average"]["ensemble_better_pct"] == 100.0
    assert doc["average"]["manual_better_pct"] == 0.0
    assert "r9" in capsys.readouterr().out


def test_import_review_unknown_item(pipeline, tmp_path, capsys):
    bundle = _export_bundle(pipeline, tmp_path)
    results = tmp_path / "bad.jsonl"
    results.write_text(json.dumps({
        "item_id": "ghost", "reviewer_id": "r1", "choice": "A",
        "timestamp": "2026-08-17T10:00:00Z",
    }) + "\n")
    assert main(["import-review", "--bundle", str(bundle), str(results), "--quiet"]) == 1
    assert "unknown item" in capsys.readouterr().err


def test_failed_command_leaves_no_partial_output(pipeline, tmp_path):
    out = tmp_path / "refined_bad"
    rc = main([
        "refine", "--data", str(pipeline["ds"]),
        "--checkpoint", str(pipeline["ds"] / "manifest.json"),  # not a checkpoint
        "--out", str(out), "--quiet",
    ])
    assert rc == 1
    assert not out.exists()
    assert not list(tmp_path.glob(".refined_bad.tmp-*"))


def test_rerun_replaces_output_atomically(pipeline, tmp_path):
    out = tmp_path / "ds2"
    for _ in range(2):
        assert main(["gen", "--n", "10", "--seed", "1", "--out", str(out), "--quiet"]) == 0
    assert (out / "manifest.json").is_file()
    assert not list(tmp_path.glob(".ds2.*"))


def test_quiet_suppresses_progress(tmp_path, capsys):
    assert main(["gen", "--n", "10", "--seed", "2", "--out", str(tmp_path / "q"), "--quiet"]) == 0
    assert capsys.readouterr().out == ""


def test_module_entry_point_help():
    proc = subprocess.run(
        [sys.executable, "-m", "soilref.cli", "--help"],
        capture_output=True, text=True, cwd=str(Path(__file__).resolve().parents[1]),
    )
    assert proc.returncode == 0
    for cmd in ("gen", "train", "refine", "eval", "report", "export-review", "import-review"):
        assert cmd in proc.stdout
