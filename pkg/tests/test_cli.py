import json
import re
import subprocess
import sys
import time

import pytest

from cgfdetr.cli import main

SMALL = {"height": 32, "width": 32, "stage_channels": [8, 16, 32], "neck_out": 12, "xfa_heads": 2}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def fields(line):
    return dict(tok.split("=", 1) for tok in line.split() if "=" in tok)


def test_check_trials1_passes_fast_and_deterministic(capsys):
    t0 = time.perf_counter()
    code, out, _ = run(capsys, "check", "--seed", "3", "--trials", "1")
    assert time.perf_counter() - t0 < 60
    assert code == 0, out
    suites = [fields(l) for l in out.splitlines() if l.startswith("suite=")]
    assert len(suites) == 10 and all(s["passed"] == "true" for s in suites)
    code2, out2, _ = run(capsys, "check", "--seed", "3", "--trials", "1")
    assert code2 == 0 and out2 == out


def test_check_fault_injection_fails_fusion_suite(capsys):
    code, out, _ = run(capsys, "check", "--trials", "1", "--inject-fault", "fusion")
    assert code == 1
    status = {fields(l)["suite"]: fields(l)["passed"] for l in out.splitlines() if l.startswith("suite=")}
    assert status["gcfc3.invariants"] == "false"
    assert "summary suites=10 failed=1" in out


def test_gradcheck_lines(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seeds", "1", "--block", "gcfc3")
    assert code == 0
    lines = out.splitlines()
    assert lines and all(l.startswith("block=gcfc3 seed=0 shape=") and "passed=true" in l for l in lines)
    names = {fields(l)["param"] for l in lines}
    assert "fuse.weight" in names and "branch0.bn0.gamma" in names and "input" in names


def test_init_fuse_forward_roundtrip(tmp_path, cfg_path, capsys):
    w, wf = str(tmp_path / "w.cgfw"), str(tmp_path / "wf.cgfw")
    assert run(capsys, "init", w, "--config", cfg_path)[0] == 0
    code, out, _ = run(capsys, "fuse", w, wf)
    assert code == 0
    diff = float(fields(out.splitlines()[0])["max_abs_diff"])
    assert diff <= 1e-10

    def outputs(*extra):
        code, out, _ = run(capsys, "forward", "--config", cfg_path, *extra)
        assert code == 0
        return {fields(l)["output"]: fields(l) for l in out.splitlines() if l.startswith("output=")}

    train = outputs("--weights", w)
    fused_file = outputs("--weights", wf)
    fused_flag = outputs("--weights", w, "--fused")
    assert train["P3"]["shape"] == "1x12x4x4" and train["P4"]["shape"] == "1x32x2x2"
    for other in (fused_file, fused_flag):
        assert abs(float(other["P3"]["mean"]) - float(train["P3"]["mean"])) <= 1e-10
        assert other["P4"]["sha256"] == train["P4"]["sha256"]


def test_fuse_errors_exit_2(tmp_path, cfg_path, capsys):
    w, wf = str(tmp_path / "w.cgfw"), str(tmp_path / "wf.cgfw")
    run(capsys, "init", w, "--config", cfg_path)
    run(capsys, "fuse", w, wf)
    code, _, err = run(capsys, "fuse", wf, str(tmp_path / "again.cgfw"))
    assert code == 2 and "no train-form branches found" in err
    code, _, err = run(capsys, "fuse", str(tmp_path / "missing.cgfw"), wf)
    assert code == 2 and "error" in err
    (tmp_path / "junk.cgfw").write_bytes(b"JUNKJUNKJUNKJUNK")
    code, _, err = run(capsys, "forward", "--config", cfg_path, "--weights", str(tmp_path / "junk.cgfw"))
    assert code == 2 and "magic" in err


def test_forward_trace_and_wrong_config(tmp_path, cfg_path, capsys):
    code, out, _ = run(capsys, "forward", "--config", cfg_path, "--trace", "--trace-rows", "1")
    assert code == 0
    trace = [l for l in out.splitlines() if l.startswith("spga ")]
    assert re.match(r"spga item=0 ratio=\S+ k=\d+$", trace[0]) and trace[1].startswith("spga item=0 row=0 support=")
    w = str(tmp_path / "w.cgfw")
    run(capsys, "init", w, "--config", cfg_path)
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**SMALL, "neck_out": 16}))
    code, _, err = run(capsys, "forward", "--config", str(other), "--weights", w)
    assert code == 2 and "gcfc3" in err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert run(capsys, "flops", "--config", str(bad))[0] == 2


def test_flops_report(cfg_path, capsys):
    code, out, _ = run(capsys, "flops", "--config", cfg_path)
    assert code == 0
    last = fields(out.splitlines()[-1])
    assert int(last["total_deploy"]) < int(last["total_train"])
    _, fused_out, _ = run(capsys, "flops", "--config", cfg_path, "--fused")
    assert "layer=gcfc3.0.fused" in fused_out and "branch0" not in fused_out


def test_bench_cli(cfg_path, capsys):
    code, out, _ = run(capsys, "bench", "--config", cfg_path, "--reps", "30", "--blocks", "gcfc3")
    assert code == 0
    rows = [fields(l) for l in out.splitlines() if l.startswith("label=")]
    assert [r["label"] for r in rows] == ["gcfc3.train", "gcfc3.deploy"] and all(r["reps"] == "30" for r in rows)
    assert "compare=gcfc3 deploy_over_train=" in out
    code, _, err = run(capsys, "bench", "--reps", "10")
    assert code == 2 and "reps" in err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cgfdetr", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("check", "gradcheck", "fuse", "bench", "forward", "flops"):
        assert sub in res.stdout
    res = subprocess.run([sys.executable, "-m", "cgfdetr", "frobnicate"], capture_output=True, text=True)
    assert res.returncode == 2
