import json
import subprocess
import sys

import numpy as np
import pytest

from secgfd.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, run_command
from secgfd.data import load_report

SMALL = ["--synthetic", "default", "--n", "200", "--feature-dim", "6", "--mean-degree", "6",
         "--hidden-dim", "8"]


def files_in(d):
    return sorted(p.name for p in d.iterdir())


def write_graph(tmp_path, edges, labels):
    (tmp_path / "e.csv").write_text("".join(f"{u},{v}\n" for u, v in edges))
    (tmp_path / "y.csv").write_text("".join(f"{i},{y}\n" for i, y in labels))
    return ["--edges", str(tmp_path / "e.csv"), "--labels", str(tmp_path / "y.csv")]


# ------------------------------------------------------------------- train


def test_train_writes_report(tmp_path, capsys):
    out = tmp_path / "run.json"
    assert run_command(["train", "--synthetic", "default", "--seed", "7", "--out", str(out),
                        "--epochs", "3", "--hidden-dim", "8"]) == EXIT_OK
    rep = load_report(out)
    assert rep.seed == 7
    assert rep.config["model"]["hidden_dim"] == 8
    assert rep.config["train"]["epochs"] == 3
    assert rep.config["synthetic"]["seed"] == 7
    assert "f1_macro" in capsys.readouterr().out


def test_unknown_flag_writes_nothing(tmp_path, capsys):
    code = run_command(["train", *SMALL, "--bogus", "--out", str(tmp_path / "r.json")])
    assert code == EXIT_USAGE
    assert files_in(tmp_path) == []
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "bogus" in err


@pytest.mark.parametrize("argv", [
    [],
    ["fly"],
    ["train", "--out", "r.json"],
    ["train", *SMALL, "--alpha", "3", "--out", "r.json"],
    ["train", *SMALL, "--n", "10", "--out", "r.json"],
    ["clip-experiment", *SMALL, "--ratios", "1,0", "--out", "r.csv"],
    ["clip-experiment", *SMALL, "--ratios", "a,b", "--out", "r.csv"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run_command(argv) == EXIT_USAGE
    assert files_in(tmp_path) == []


def test_data_errors(tmp_path):
    args = write_graph(tmp_path, [(0, 1)], [(0, 0), (1, 1)])
    missing = ["--features", str(tmp_path / "nope.bin")]
    assert run_command(["train", *args, *missing, "--out", str(tmp_path / "r.json")]) == EXIT_DATA
    (tmp_path / "e.csv").write_text("0,1\n1,x\n")
    assert run_command(["diagnose", *args]) == EXIT_DATA
    assert run_command(["train", *SMALL, "--out", str(tmp_path / "no" / "r.json")]) == EXIT_DATA
    assert not (tmp_path / "r.json").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    out = tmp_path / "r.json"
    assert run_command(["train", *SMALL, "--lr", "1e308", "--epochs", "5", "--out", str(out)]) == EXIT_DIVERGED
    assert not out.exists()


# ------------------------------------------------------------------ config


def test_toml_precedence(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('seed = 3\n[model]\nhidden_dim = 4\nC = 3\n[train]\nepochs = 2\n'
                   '[data]\nsynthetic = "default"\n[synthetic]\nn = 200\nmean_degree = 6\n')
    out = tmp_path / "r.json"
    assert run_command(["train", "--config", str(cfg), "--C", "1", "--out", str(out)]) == EXIT_OK
    rep = load_report(out)
    assert rep.config["model"]["C"] == 1            # flag beats file
    assert rep.config["model"]["hidden_dim"] == 4   # file beats default
    assert rep.config["model"]["alpha"] == 0.8      # default
    assert rep.seed == 3 and len(rep.history["loss"]) == 2


@pytest.mark.parametrize("text", ['[model]\nwidth = 3\n', '[optim]\nlr = 1\n', '[train]\nseed = 2\n', 'model = 1\n',
                                  '[model\n'])
def test_toml_rejects_unknown(tmp_path, text):
    cfg = tmp_path / "c.toml"
    cfg.write_text(text)
    assert run_command(["train", *SMALL, "--config", str(cfg), "--out", str(tmp_path / "r.json")]) == EXIT_USAGE
    assert files_in(tmp_path) == ["c.toml"]


# ---------------------------------------------------------------- diagnose


def diagnose_json(argv, capsys):
    assert run_command(["diagnose", *argv]) == EXIT_OK
    return json.loads(capsys.readouterr().out)


def test_diagnose_all_normal(tmp_path, capsys):
    args = write_graph(tmp_path, [(0, 1), (1, 2)], [(0, 0), (1, 0), (2, 0)])
    d = diagnose_json(args, capsys)
    assert d["heterophily"] == 0.0
    assert d["class_counts"] == {"normal": 3, "anomaly": 0, "unknown": 0}
    assert d["rayleigh_quotient"]["unnormalized"] is None


def test_diagnose_star(tmp_path, capsys):
    args = write_graph(tmp_path, [(0, i) for i in range(1, 5)], [(0, 1)] + [(i, 0) for i in range(1, 5)])
    d = diagnose_json(args, capsys)
    assert d["heterophily"] == 1.0
    assert d["anomaly_heterophily"] == 1.0
    # centred signal x = (0.8, -0.2, ...): x^T (D - A) x / x^T x = 4 * 1 / 0.8
    assert d["rayleigh_quotient"]["unnormalized"] == pytest.approx(5.0)


def test_diagnose_synthetic_matches_generator(capsys):
    d = diagnose_json(["--synthetic", "default", "--n", "1000", "--seed", "2"], capsys)
    assert abs(d["anomaly_heterophily"] - 0.9) <= 0.1
    assert d["class_counts"]["anomaly"] == 50


def test_diagnose_profile(tmp_path, capsys):
    prof, out = tmp_path / "p.csv", tmp_path / "d.json"
    assert run_command(["diagnose", "--synthetic", "default", "--n", "100", "--mean-degree", "4",
                        "--profile", str(prof), "--out", str(out)]) == EXIT_OK
    rows = np.loadtxt(prof, delimiter=",", skiprows=1)
    assert rows.shape == (100, 2) and rows[-1, 1] == pytest.approx(1.0)
    d = json.loads(out.read_text())
    lam, eta = rows[:, 0], rows[:, 1]
    assert np.sum(lam * np.diff(np.concatenate([[0], eta]))) == \
        pytest.approx(d["rayleigh_quotient"]["sym_normalized"], rel=1e-8)
    capsys.readouterr()
    assert run_command(["diagnose", "--synthetic", "default", "--n", "100", "--mean-degree", "4",
                        "--cap", "50", "--profile", str(tmp_path / "q.csv")]) == EXIT_DATA
    assert not (tmp_path / "q.csv").exists()


def test_diagnose_unlabelled(tmp_path):
    (tmp_path / "e.csv").write_text("0,1\n")
    (tmp_path / "y.csv").write_text("")
    assert run_command(["diagnose", "--edges", str(tmp_path / "e.csv"),
                        "--labels", str(tmp_path / "y.csv")]) == EXIT_DATA


# ------------------------------------------------------- evaluate / synth


def test_synth_gen_then_train_and_evaluate(tmp_path):
    d = tmp_path / "data"
    assert run_command(["synth-gen", "--n", "200", "--mean-degree", "6", "--seed", "1", "--out-dir", str(d)]) == EXIT_OK
    assert files_in(d) == ["edges.csv", "features.bin", "labels.csv", "synthetic.json"]
    files = ["--edges", str(d / "edges.csv"), "--features", str(d / "features.bin"),
             "--labels", str(d / "labels.csv")]
    rep, model = tmp_path / "r.json", tmp_path / "m.npz"
    assert run_command(["train", *files, "--epochs", "4", "--hidden-dim", "8", "--out", str(rep),
                        "--save-model", str(model)]) == EXIT_OK
    ev = tmp_path / "ev.json"
    assert run_command(["evaluate", *files, "--model", str(model), "--out", str(ev)]) == EXIT_OK
    a, b = load_report(rep), load_report(ev)
    assert (a.f1_macro, a.auc) == (b.f1_macro, b.auc)
    assert run_command(["evaluate", *files, "--model", str(rep)]) == EXIT_DATA


# ------------------------------------------------------------- determinism


DETERMINISM_CASES = {
    "train": (["train", *SMALL, "--epochs", "5", "--seed", "4", "--out", "{d}/r.json",
               "--save-model", "{d}/m.npz"], ["r.json", "m.npz"]),
    "diagnose": (["diagnose", *SMALL[:-2], "--profile", "{d}/p.csv", "--out", "{d}/d.json"], ["p.csv", "d.json"]),
    "synth-gen": (["synth-gen", "--n", "200", "--csv", "--out-dir", "{d}/s"],
                  ["s/edges.csv", "s/features.csv", "s/labels.csv", "s/synthetic.json"]),
    "clip": (["clip-experiment", *SMALL, "--epochs", "2", "--ratios", "0,1", "--seeds", "0",
              "--out", "{d}/c.csv", "--summary", "{d}/c.json"], ["c.csv", "c.json"]),
    "sweep": (["sweep-order", *SMALL, "--epochs", "2", "--C-values", "1,2", "--seeds", "0,1",
               "--out", "{d}/o.csv"], ["o.csv"]),
    "ablate": (["ablate", *SMALL, "--epochs", "2", "--seeds", "0", "--out", "{d}/a.csv",
                "--summary", "{d}/a.json"], ["a.csv", "a.json"]),
}


@pytest.mark.parametrize("case", list(DETERMINISM_CASES))
def test_outputs_byte_identical(case, tmp_path, monkeypatch):
    monkeypatch.setenv("SEC_GFD_THREADS", "1")
    argv, outputs = DETERMINISM_CASES[case]
    blobs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        assert run_command([a.format(d=d) for a in argv]) == EXIT_OK
        blobs.append([(d / o).read_bytes() for o in outputs])
    assert blobs[0] == blobs[1]


def test_console_entry_point(tmp_path):
    out = tmp_path / "r.json"
    proc = subprocess.run([sys.executable, "-m", "secgfd.cli", "train", *SMALL, "--epochs", "2",
                           "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
    proc = subprocess.run([sys.executable, "-m", "secgfd.cli", "train", "--nope"], capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stderr.startswith("secgfd: error:")
