import json
import subprocess
import sys

import pytest

from ricciverify.cli import main, parse_args, read_config


def run(argv, capsys):
    rc = main(argv)
    return rc, capsys.readouterr()


def load(path):
    return json.loads(path.read_text())


@pytest.mark.parametrize("argv", [
    ["density", "--n-max", "12"],
    ["soliton", "--n", "5"],
    ["barrier", "--n", "6"],
    ["lgeo", "--model", "flat", "--tau", "1,10"],
    ["flow", "--preset", "sphere", "--refine", "2"],
])
def test_subcommands_pass_and_write_manifest(argv, tmp_path, capsys):
    rc, cap = run(argv + ["--out", str(tmp_path)], capsys)
    assert rc == 0, cap.out
    assert "PASS" in cap.out
    man = load(tmp_path / "manifest.json")
    assert man["passed"] is True and man["command"] == argv[0]
    assert "report.json" in man["outputs"]
    assert set(man["versions"]) == {"ricciverify", "numpy", "scipy", "python"}
    for name in man["outputs"]:
        assert (tmp_path / name).exists()


def test_failing_check_gives_exit_1(tmp_path, capsys):
    # far below the threshold the barrier is not a supersolution
    rc, cap = run(["barrier", "--n", "5", "--a", "40", "--out", str(tmp_path)], capsys)
    assert rc == 1
    assert "FAIL" in cap.out and "negativity" in cap.out
    assert load(tmp_path / "report.json")["passed"] is False


@pytest.mark.parametrize("argv", [
    ["density", "--n", "2"],
    ["lgeo", "--tau", "1,x"],
    ["lgeo", "--model", "torus"],
    ["soliton", "--tol", "-1"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        parse_args(argv)
    assert exc.value.code == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nn-max = 20\ntol=1e-9  # trailing\n")
    args = parse_args(["density", "--config", str(cfg)])
    assert args.n_max == 20 and args.tol == 1e-9
    args = parse_args(["density", "--config", str(cfg), "--n-max", "30"])
    assert args.n_max == 30


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model = flat\n")
    with pytest.raises(SystemExit) as exc:
        parse_args(["density", "--config", str(cfg)])
    assert exc.value.code == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_config_malformed_and_missing(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("just words\n")
    for path in (bad, tmp_path / "missing.cfg"):
        with pytest.raises(SystemExit) as exc:
            parse_args(["density", "--config", str(path)])
        assert exc.value.code == 2


def test_read_config_normalises_keys(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("--r-max=5\nfind-min-a = yes\n\n")
    assert read_config(p) == {"r_max": "5", "find_min_a": "yes"}


def test_reports_are_deterministic(tmp_path, capsys):
    outs = []
    for i in range(2):
        out = tmp_path / f"run{i}"
        run(["lgeo", "--model", "shrinking_cylinder", "--tau", "1,10", "--seed", "3",
             "--out", str(out)], capsys)
        outs.append(out)
    assert (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()
    a, b = load(outs[0] / "manifest.json"), load(outs[1] / "manifest.json")
    assert a["config_hash"] == b["config_hash"]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ricciverify.cli", "density", "--n-max", "5",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "density: PASS" in proc.stdout
