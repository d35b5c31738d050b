import csv
import json
from fractions import Fraction
from pathlib import Path

import pytest

from scaleseer.cli import main, parse_relation, parse_sweep
from scaleseer.errors import UsageError

TINY_TRAIN = ["train", "two_layer_width_scan", "--replicas", "2", "--N1", "4,6", "--d", "4", "--P", "8",
              "--steps", "40", "--burn-in", "20", "--thin", "10", "--n-test", "1000"]


def _run(tmp_path, *argv):
    code = main(["--out", str(tmp_path), "--quiet", *argv])
    dirs = sorted(p for p in tmp_path.iterdir() if p.is_dir())
    return code, dirs


def _manifest(run_dir: Path) -> dict:
    return json.loads((run_dir / "manifest.json").read_text())


def test_parse_sweep():
    assert parse_sweep("20:160:x2") == [20, 40, 80, 160]
    assert parse_sweep("1:7:+3") == [1, 4, 7]
    for bad in ("20:10:x2", "1:5:x1", "a:b:c"):
        with pytest.raises(UsageError):
            parse_sweep(bad)


def test_parse_relation():
    rel, pivot = parse_relation("N1=N2=d")
    assert pivot == "d" and rel["N1"] == (1.0, 1) and rel["N2"] == (1.0, 1)
    rel, pivot = parse_relation("N=d^10, chi=N")
    assert pivot == "d" and rel["N"][1] == 10 and rel["chi"][1] == 10
    rel, _ = parse_relation("M=2*d^(1/2)")
    assert rel["M"] == (2.0, Fraction(1, 2))
    with pytest.raises(UsageError):
        parse_relation("N=d, M=L")


def test_predict_outputs_and_manifest(tmp_path):
    code, dirs = _run(tmp_path, "--no-figures", "predict", "--arch", "fcn3", "--m", "3")
    assert code == 0
    run = dirs[0]
    assert run.name.startswith("predict-")
    man = _manifest(run)
    assert man["command"] == "predict" and man["config"]["arch"] == "fcn3"
    assert {"results.csv", "results.json"} <= set(man["outputs"])
    rows = list(csv.DictReader((run / "results.csv").open()))
    assert [r["pattern"] for r in rows][0] == man["winner"]


@pytest.mark.parametrize("argv", [
    ["ldt", "--alpha", "1.5"],
    ["predict", "--arch", "rnn"],
    ["predict", "--arch", "fcn2", "--patterns", "Lazy"],
    ["train", "no_such_preset"],
    ["propagate", "wave"],
    ["ldt", "--sweep-d", "10:5:x2"],
])
def test_usage_errors_exit_2(tmp_path, capsys, argv):
    assert main(["--out", str(tmp_path), *argv]) == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    payload = json.loads(err)
    assert payload["exit_code"] == 2 and payload["message"]


def test_no_command_is_usage_error(tmp_path, capsys):
    assert main(["--out", str(tmp_path)]) == 2


def test_pattern_error_lists_candidates(tmp_path, capsys):
    main(["--out", str(tmp_path), "predict", "--arch", "fcn3", "--patterns", "Nope"])
    assert "GP-GP" in capsys.readouterr().err


def test_numeric_failure_exit_3(tmp_path, capsys):
    code, _ = _run(tmp_path, "--no-figures", *TINY_TRAIN, "--step", "50", "--steps", "400", "--burn-in", "10")
    assert code == 3


def test_train_manifest_round_trip_is_byte_identical(tmp_path):
    code, dirs = _run(tmp_path, "--no-figures", "--seed", "7", *TINY_TRAIN)
    assert code == 0
    first = dirs[0]
    code, dirs = _run(tmp_path, "--no-figures", "--from-manifest", str(first / "manifest.json"))
    assert code == 0
    second = [d for d in dirs if d != first][0]
    assert (first / "results.csv").read_bytes() == (second / "results.csv").read_bytes()
    assert _manifest(second)["seed"] == 7


def test_seed_after_subcommand_and_jobs_invariance(tmp_path):
    _, dirs = _run(tmp_path, "--no-figures", *TINY_TRAIN, "--seed", "3")
    _, dirs2 = _run(tmp_path, "--no-figures", "--jobs", "2", *TINY_TRAIN, "--seed", "3")
    a, b = dirs[0], [d for d in dirs2 if d != dirs[0]][0]
    assert _manifest(a)["seed"] == 3
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()


def test_seed_sources(tmp_path, monkeypatch):
    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = 11\n")
    monkeypatch.setenv("SCALESEER_SEED", "5")
    out = tmp_path / "o"
    out.mkdir()
    _, dirs = _run(out, "--no-figures", "propagate", "spike", "--M", "1,2", "--d", "6", "--N", "20",
                   "--Pprime", "40")
    assert _manifest(dirs[-1])["seed"] == 5
    _, dirs = _run(out, "--no-figures", "--config", str(cfg), "propagate", "spike", "--M", "1,2", "--d", "6",
                   "--N", "20", "--Pprime", "40")
    assert _manifest(dirs[-1])["seed"] == 11
    _, dirs = _run(out, "--no-figures", "--config", str(cfg), "--seed", "2", "propagate", "spike", "--M", "1",
                   "--d", "6", "--N", "20", "--Pprime", "40")
    assert _manifest(dirs[-1])["seed"] == 2
    monkeypatch.setenv("SCALESEER_SEED", "x")
    assert main(["--out", str(out), "--quiet", "propagate", "spike"]) == 2


def test_toml_table_below_cli_flags(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[ldt]\nd = 20\nalpha = 0.5\n\n[propagate.gfl]\nd = 9\n")
    out = tmp_path / "o"
    out.mkdir()
    _, dirs = _run(out, "--no-figures", "--config", str(cfg), "ldt", "--alpha", "0.8")
    c = _manifest(dirs[-1])["config"]
    assert c["d"] == 20 and c["alpha"] == 0.8 and c["kappa"] == 1.0
    _, dirs = _run(out, "--no-figures", "--config", str(cfg), "propagate", "gfl", "--D", "1,2", "--N1", "30",
                   "--N2", "30", "--Pprime", "60")
    c = _manifest(dirs[-1])["config"]
    assert c["d"] == 9 and c["N1"] == 30


def test_bad_toml_is_usage_error(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[ldt\n")
    assert main(["--out", str(tmp_path), "--config", str(cfg), "ldt"]) == 2


def test_figures_written_by_default_and_skippable(tmp_path):
    args = ["propagate", "spike", "--M", "1,2", "--d", "6", "--N", "20", "--Pprime", "40"]
    _, dirs = _run(tmp_path, *args)
    assert list(dirs[0].glob("*.png"))
    _, dirs2 = _run(tmp_path, "--no-figures", *args)
    other = [d for d in dirs2 if d != dirs[0]][0]
    assert not list(other.glob("*.png"))
    assert (dirs[0] / "results.csv").read_bytes() == (other / "results.csv").read_bytes()


def test_ldt_sweep_rows_and_profile(tmp_path):
    code, dirs = _run(tmp_path, "--no-figures", "ldt", "--sweep-d", "10:40:x2", "--profile")
    assert code == 0
    rows = list(csv.DictReader((dirs[0] / "results.csv").open()))
    assert [int(r["d"]) for r in rows] == [10, 20, 40]
    assert "p_star_slope" in _manifest(dirs[0])
