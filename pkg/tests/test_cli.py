import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np

from condhead.cli import EXIT_GATE, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from condhead.models import load_checkpoint, param_checksum

FIXTURES = Path(__file__).parent / "fixtures"
CONFIG = str(FIXTURES / "tiny_config.json")
DATA = str(FIXTURES / "tiny.jsonl")
GOLDEN_CKPT = FIXTURES / "tiny_condhead.ckpt.json"


def run(*argv):
    return main([str(a) for a in argv])


def _train(tmp_path, variant, *extra, name=None):
    out = tmp_path / (name or f"{variant}.json")
    assert run("train", "--config", CONFIG, "--data", DATA, "--variant", variant, "--out", out, *extra) == EXIT_OK
    return out


def test_gen_matches_golden_and_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run("gen", "--config", CONFIG, "--out", a) == EXIT_OK
    assert run("gen", "--config", CONFIG, "--out", b) == EXIT_OK
    assert a.read_bytes() == b.read_bytes() == Path(DATA).read_bytes()
    assert "checksum" in capsys.readouterr().out
    assert run("gen", "--config", CONFIG, "--seed", 6, "--out", b) == EXIT_OK
    assert a.read_bytes() != b.read_bytes()


def test_gen_rejects_bad_values(tmp_path, capsys):
    assert run("gen", "--rho", 1.5, "--out", tmp_path / "x.jsonl") == EXIT_USAGE
    assert "rho" in capsys.readouterr().err
    assert run("gen", "--n-base", 1, "--out", tmp_path / "x.jsonl") == EXIT_USAGE
    assert not (tmp_path / "x.jsonl").exists()


def test_train_matches_golden_checkpoint(tmp_path):
    out = _train(tmp_path, "condhead", "--report", tmp_path / "r.json")
    model, state = load_checkpoint(out)
    golden, _ = load_checkpoint(GOLDEN_CKPT)
    assert param_checksum(model) == param_checksum(golden)
    assert state["iteration"] == 12
    report = json.loads((tmp_path / "r.json").read_text())
    gold = json.loads((FIXTURES / "tiny_condhead.train.json").read_text())
    assert report["losses"] == gold["losses"] and report["checksum"] == gold["checksum"]
    assert report["provenance"]["config"]["train"]["head"]["feat_dim"] == 20


def test_resume_via_cli_matches_uninterrupted(tmp_path):
    full = _train(tmp_path, "classwise")
    part = _train(tmp_path, "classwise", "--stop-at", 5, name="part.json")
    assert load_checkpoint(part)[1]["iteration"] == 5
    resumed = _train(tmp_path, "classwise", "--resume", part, name="resumed.json")
    assert param_checksum(load_checkpoint(resumed)[0]) == param_checksum(load_checkpoint(full)[0])
    assert run("train", "--config", CONFIG, "--data", DATA, "--variant", "condhead", "--resume", part,
               "--out", tmp_path / "x.json") == EXIT_USAGE


def test_train_divergence_exits_numeric(tmp_path, capsys):
    with np.errstate(all="ignore"):
        code = run("train", "--config", CONFIG, "--data", DATA, "--variant", "agnostic", "--lr", 1e300,
                   "--out", tmp_path / "x.json")
    assert code == EXIT_NUMERIC
    assert "iteration" in capsys.readouterr().err
    assert not (tmp_path / "x.json").exists()


def test_eval_matches_golden_report(tmp_path):
    out = tmp_path / "e.json"
    assert run("eval", "--config", CONFIG, "--data", DATA, "--ckpt", GOLDEN_CKPT, "--out", out) == EXIT_OK
    doc = json.loads(out.read_text())
    gold = json.loads((FIXTURES / "tiny_condhead.eval.json").read_text())
    assert doc["format"] == "condhead-eval-v1"
    for key in ("splits", "per_category", "fingerprint", "flops", "variant"):
        assert doc[key] == gold[key], key
    assert doc["provenance"]["checkpoint_checksum"] == gold["provenance"]["checkpoint_checksum"]


def test_eval_errors(tmp_path, capsys):
    assert run("eval", "--data", DATA, "--ckpt", tmp_path / "missing.json") == EXIT_IO
    assert run("eval", "--data", tmp_path / "missing.jsonl", "--ckpt", GOLDEN_CKPT) == EXIT_IO
    bad = tmp_path / "bad.jsonl"
    bad.write_text(Path(DATA).read_text()[:500])
    assert run("eval", "--data", bad, "--ckpt", GOLDEN_CKPT) == EXIT_IO
    assert run("eval", "--data", DATA, "--ckpt", GOLDEN_CKPT, "--variant", "classwise") == EXIT_USAGE
    other = tmp_path / "other.jsonl"
    assert run("gen", "--config", CONFIG, "--feat-dim", 24, "--out", other) == EXIT_OK
    assert run("eval", "--data", other, "--ckpt", GOLDEN_CKPT) == EXIT_USAGE
    capsys.readouterr()


def test_compare_with_gates(tmp_path, capsys):
    ckpts = [_train(tmp_path, v, "--seed", s, name=f"{v}{s}.json")
             for v in ("agnostic", "condhead") for s in (5, 6)]
    out = tmp_path / "cmp.json"
    ok_gate = "condhead.novel.box_iou - agnostic.novel.box_iou >= -1"
    assert run("compare", "--data", DATA, "--ckpt", *ckpts, "--gate", ok_gate, "--out", out) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["format"] == "condhead-compare-v1" and doc["gates"][0]["passed"]
    assert "PASS" in capsys.readouterr().out
    assert run("compare", "--data", DATA, "--ckpt", *ckpts, "--gate", ok_gate,
               "--gate", "condhead.novel.mask_iou >= 2") == EXIT_GATE
    assert "FAIL" in capsys.readouterr().out
    assert run("compare", "--data", DATA, "--ckpt", *ckpts, "--gate", "__import__('os')") == EXIT_USAGE
    assert run("compare", "--data", DATA, "--ckpt", *ckpts, "--gate", "classwise.all.box_iou > 0") == EXIT_USAGE


def test_weights_output(tmp_path, capsys):
    ckpt = _train(tmp_path, "condhead", "--experts", 1)
    capsys.readouterr()
    out = tmp_path / "w.json"
    assert run("weights", "--data", DATA, "--ckpt", ckpt, "--out", out) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["format"] == "condhead-weights-v1"
    assert len(doc["box"]) == len(doc["families"]) == 5
    assert doc["box"] == [[1.0]] * 5 and doc["mask"] == [[1.0]] * 5
    assert len(capsys.readouterr().out.strip().splitlines()) == 5
    assert run("weights", "--data", DATA, "--ckpt", GOLDEN_CKPT, "--out", out) == EXIT_OK
    cos = np.array(json.loads(out.read_text())["box_cosine"])
    np.testing.assert_allclose(cos, cos.T, atol=1e-12)
    agn = _train(tmp_path, "agnostic")
    assert run("weights", "--data", DATA, "--ckpt", agn) == EXIT_USAGE


def test_gradcheck_command(tmp_path, capsys):
    out = tmp_path / "g.json"
    assert run("gradcheck", "--out", out) == EXIT_OK
    doc = json.loads(out.read_text())
    assert len(doc["results"]) >= 8 and all(r["passed"] for r in doc["results"])
    assert run("gradcheck", "--inject-sign-flip", "smooth_l1") == EXIT_NUMERIC
    assert "FAIL" in capsys.readouterr().out


def test_config_file_errors(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text("{oops")
    assert run("gen", "--config", bad, "--out", tmp_path / "x.jsonl") == EXIT_IO
    bad.write_text(json.dumps({"format": "other"}))
    assert run("gen", "--config", bad, "--out", tmp_path / "x.jsonl") == EXIT_USAGE
    bad.write_text(json.dumps({"format": "condhead-config-v1", "bench": {"nbase": 3}}))
    assert run("gen", "--config", bad, "--out", tmp_path / "x.jsonl") == EXIT_USAGE
    assert run("gen", "--config", tmp_path / "none.json", "--out", tmp_path / "x.jsonl") == EXIT_IO


def test_console_script_usage_error():
    exe = shutil.which("condhead")
    cmd = [exe] if exe else [sys.executable, "-m", "condhead.cli"]
    proc = subprocess.run(cmd + ["train"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    proc = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert proc.returncode == EXIT_OK and "gradcheck" in proc.stdout
