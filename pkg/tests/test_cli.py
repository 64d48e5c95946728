import json

import pytest

from pinchwsr import cli
from pinchwsr.harness import read_results


def test_sweep_then_plot(tmp_path, capsys):
    out = tmp_path / "res"
    assert cli.main(["--seed", "2", "sweep", "--algo", "ao", "--k", "1", "--m", "1", "--seeds", "2", "--iters", "2", "--out", str(out)]) == 0
    rows = read_results(out / "results.csv")
    assert {r["seed"] for r in rows} == {0, 1}
    assert json.loads((out / "run.json").read_text())["master_seed"] == 2
    assert "best_wsr=" in capsys.readouterr().out
    assert cli.main(["plot", "--in", str(out / "results.csv"), "--kind", "trace", "--out", str(tmp_path / "fig")]) == 0
    assert (tmp_path / "fig" / "trace.png").exists()


def test_run_from_spec(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"algorithm": "udb", "K": [1], "M": [2], "seeds": [0], "iters": 1, "out_dir": str(tmp_path / "o")}))
    assert cli.main(["run", "--spec", str(spec)]) == 0
    assert len(read_results(tmp_path / "o" / "results.csv")) == 1


def test_seed_changes_layout(tmp_path):
    for s in ("1", "2"):
        cli.main(["--seed", s, "sweep", "--algo", "udb", "--k", "1", "--m", "1", "--iters", "1", "--out", str(tmp_path / s)])
    a = read_results(tmp_path / "1" / "results.csv")[0]["wsr"]
    b = read_results(tmp_path / "2" / "results.csv")[0]["wsr"]
    assert a != b


def test_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "spec.json"
    bad.write_text(json.dumps({"algorithm": "nope"}))
    assert cli.main(["run", "--spec", str(bad)]) == 2
    assert cli.main(["run", "--spec", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["plot", "--in", str(tmp_path / "none.csv"), "--kind", "trace", "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_bad_arguments_exit_2():
    with pytest.raises(SystemExit) as e:
        cli.main(["sweep", "--algo", "ao", "--k", "x", "--out", "o"])
    assert e.value.code == 2


@pytest.mark.slow
def test_check_quick(capsys):
    assert cli.main(["check", "--quick"]) == 0
    assert "FAIL" not in capsys.readouterr().out
