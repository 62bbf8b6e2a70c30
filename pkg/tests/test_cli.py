import subprocess
import sys

import pytest

from graphblotto.cli import main
from graphblotto.formats import load_scenario


def run(*args):
    return subprocess.run([sys.executable, "-m", "graphblotto", *args], capture_output=True, text=True)


def test_check_numerics_exits_zero():
    r = run("check", "--module", "numerics")
    assert r.returncode == 0, r.stdout + r.stderr
    assert "FAIL" not in r.stdout


def test_unknown_flag_exits_two():
    assert run("eval", "--no-such-flag").returncode == 2


def test_bad_choice_reports_error(tmp_path):
    assert main(["--out", str(tmp_path), "eval", "--red", "oracle"]) == 1


def test_gen_writes_loadable_scenarios(tmp_path):
    assert main(["--out", str(tmp_path), "gen", "--sizes", "5,7", "--count", "2"]) == 0
    files = sorted(tmp_path.glob("*.txt"))
    assert len(files) == 4
    g, meta = load_scenario(files[0])
    assert g.n_nodes == 5 and meta["blue_budget"] == 25.0


def test_eval_writes_run_directory(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["--seed", "3", "--out", str(out), "eval", "--sizes", "6", "--instances", "2",
                 "--red-transfer", "myopic"]) == 0
    assert {"config.yaml", "metrics.csv", "instances.jsonl", "latency.csv", "latency.jsonl"} <= \
        {p.name for p in out.iterdir()}
    assert "greedy+myopic" in capsys.readouterr().out


def test_oracle_prints_csv(tmp_path, capsys):
    assert main(["--out", str(tmp_path / "o.csv"), "oracle", "--sizes", "5", "--count", "2", "--myopic"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("source,") and len(lines) == 3
    for line in lines[1:]:
        _, _, exact, greedy, sa = line.split(",")
        assert float(exact) >= float(greedy) - 1e-12 and float(exact) >= float(sa) - 1e-12
    assert (tmp_path / "o.myopic.jsonl").exists()


def test_phase_b_needs_planner_checkpoint(tmp_path):
    assert main(["--out", str(tmp_path), "train", "--phase", "b", "--iters", "1"]) == 1


@pytest.mark.slow
def test_train_phase_a_is_byte_identical(tmp_path):
    outs = []
    for d in ("a", "b"):
        r = run("--seed", "7", "--out", str(tmp_path / d), "train", "--phase", "a", "--iters", "50")
        assert r.returncode == 0, r.stderr
        outs.append(tmp_path / d)
    for name in ("curve.jsonl", "planner.ckpt", "config.yaml"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert (outs[0] / "timing.jsonl").exists()
