import json
import subprocess
import sys

import pytest

from ustmix.cli import execute, main, replay
from ustmix.config import ConfigError


def run(capsys, *argv):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


def run_dir(err):
    return next(line.split("run: ", 1)[1] for line in err.splitlines() if line.startswith("run: "))


def test_macmahon_oracle(capsys, tmp_path):
    rc, out, _ = run(capsys, "oracle", "macmahon", "--a", 2, "--b", 2, "--c", 2, "--out", tmp_path)
    assert rc == 0 and out.strip() == "20"


def test_matrix_tree_oracle_on_the_two_grid(capsys, tmp_path):
    rc, out, _ = run(capsys, "oracle", "matrix-tree", "--grid", 2, "--out", tmp_path)
    assert rc == 0 and out.strip().endswith("192")


def test_sample_ust_is_reproducible_and_thread_independent(capsys, tmp_path):
    dirs = []
    for threads, root in ((1, "a"), (1, "b"), (3, "c")):
        rc, _, err = run(capsys, "sample-ust", "--grid", 4, "-n", 6, "--seed", 9, "--threads", threads, "--out", tmp_path / root)
        assert rc == 0
        dirs.append(run_dir(err))
    texts = [open(f"{d}/trees.csv").read() for d in dirs]
    assert texts[0] == texts[1] == texts[2]
    assert texts[0].splitlines()[0] == "tree,tail,head,edge"


def test_replay_is_byte_identical(capsys, tmp_path):
    rc, _, err = run(capsys, "sample-ust", "--grid", 3, "-n", 4, "--seed", 1, "--format", "json", "--out", tmp_path / "runs")
    manifest = f"{run_dir(err)}/manifest.json"
    rc, out, _ = run(capsys, "replay", manifest, "--out", tmp_path / "again", "--threads", 2)
    assert rc == 0 and out.strip() == "identical  trees.json"
    ok, diff, _ = replay(manifest, tmp_path / "third")
    assert ok and all(a == b for a, b in diff.values())


def test_manifest_records_identity(tmp_path):
    d, m, _ = execute("sample-ust", {"graph": {"grid": 2}, "n": 2}, seed=5, out_root=tmp_path)
    saved = json.loads((d / "manifest.json").read_text())
    assert saved["seed"] == 5 and saved["command"] == "sample-ust" and saved["key"] == m["key"]
    assert d.name == f"sample-ust-{m['key']}"
    assert set(saved["outputs"]) == {"trees.csv"}


def test_config_errors_name_the_field(capsys, tmp_path):
    rc, _, err = run(capsys, "sample-ust", "--grid", 2, "--set", "graph.bogus=1", "--out", tmp_path)
    assert rc == 2 and "graph.bogus" in err and "unknown key" in err
    rc, _, err = run(capsys, "sample-ust", "--set", "n=0", "--grid", 2, "--out", tmp_path)
    assert rc == 2 and "n:" in err
    with pytest.raises(ConfigError):
        execute("sample-ust", {"graph": {"grid": 2, "shape": {"kind": "disc", "radius": 1.0}}}, out_root=tmp_path)


def test_empty_sample_file_is_a_config_error(capsys, tmp_path):
    a = tmp_path / "a.txt"
    b = tmp_path / "b.txt"
    a.write_text("x\ny\nx\n")
    b.write_text("")
    rc, _, err = run(capsys, "rn-report", "--set", f'samples1="{a}"', "--set", f'samples2="{b}"', "--out", tmp_path)
    assert rc == 2 and "samples2" in err


def test_rn_report_from_files(capsys, tmp_path):
    a = tmp_path / "a.txt"
    b = tmp_path / "b.txt"
    a.write_text("x\ny\nx\n")
    b.write_text("x\ny\n")
    rc, _, err = run(capsys, "rn-report", "--set", f'samples1="{a}"', "--set", f'samples2="{b}"', "--out", tmp_path)
    assert rc == 0
    lines = open(f"{run_dir(err)}/rn_report.csv").read().splitlines()
    assert lines[0] == "label,C,captured1,captured2" and len(lines) > 2


def test_config_file_and_console_script(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("n = 2\n[graph]\ngrid = 2\n")
    res = subprocess.run([sys.executable, "-m", "ustmix.cli", "sample-dimer", "--config", str(cfg), "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "run: " in res.stderr
