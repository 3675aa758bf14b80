import csv
import json
import os
from pathlib import Path

import pytest

from comlsim.cli import main
from comlsim.io import read_field

TINY = """
[run]
experiment_id = tiny
seed = 7
[problem]
n = 32
n_train = 6
n_test = 2
k_max = 5
[ae]
subdomain = 8
latent = 4
base_channels = 2
dense_width = 8
epochs = 2
[flux]
hidden = 16
bottleneck = 8
epochs = 3
[solve]
max_iters = 40
tol = 1e-3
[eval]
fcnn_epochs = 1
fcnn_channels = 2
robustness_n = 3
ood_n = 1
ood_k = 5
"""

PIPELINE = ["gen-data", "train-ae", "train-flux"]


def _run(cfg, out, *cmds, extra=()):
    codes = []
    for c in cmds:
        codes.append(main([c, "--config", str(cfg), "--out", str(out), *extra]))
    return codes


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    outs = []
    for name in ("a", "b"):
        out = root / name
        assert _run(cfg, out, *PIPELINE) == [0, 0, 0]
        outs.append(out)
    return cfg, outs


def _artifacts(out: Path):
    return sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file())


def _comparable_bytes(path: Path) -> bytes:
    if path.name.endswith("timing.json"):
        return b""
    if path.name.endswith("residuals.csv"):
        rows = list(csv.reader(path.read_text().splitlines()))
        assert rows[0] == ["iteration", "epsilon", "wall_ms"]
        return "\n".join(",".join(r[:2]) for r in rows).encode()
    return path.read_bytes()


def test_pipeline_layout(trained):
    _, (a, _) = trained
    assert (a / "data" / "train" / "manifest.json").exists()
    assert (a / "models" / "ae.cmlm").exists() and (a / "models" / "model.cmlm").exists()
    assert (a / "configs" / "train-flux.ini").exists()
    m = json.loads((a / "data" / "train" / "manifest.json").read_text())
    assert m["n"] == 6 and len(m["seeds"]) == 6


def test_solve_writes_fields_and_tables(trained):
    cfg, (a, _) = trained
    code = main(["solve", "--config", str(cfg), "--out", str(a), "--method", "gs"])
    assert code in (0, 3)
    f = read_field(a / "solve" / "case_0000_u.cmlf")
    assert f.values.shape == (32, 32)
    head = (a / "solve" / "results.csv").read_text().splitlines()[0]
    assert head == "experiment_id,case,metric,value"
    assert "gs" in (a / "configs" / "solve.ini").read_text()


@pytest.mark.parametrize("cmd_args", [
    ["eval"], ["stability"], ["evolve", "--snapshots", "5"],
])
def test_subcommands_run(trained, cmd_args):
    cfg, (a, _) = trained
    assert main([cmd_args[0], "--config", str(cfg), "--out", str(a), *cmd_args[1:]]) in (0, 3)


def test_evolve_snapshot_schedule(trained):
    cfg, (a, _) = trained
    main(["evolve", "--config", str(cfg), "--out", str(a), "--snapshots", "10", "--tol", "1e-30"])
    its = sorted(int(p.name[5:10]) for p in (a / "evolve").glob("iter_*_u.cmlf"))
    assert its == [0, 10, 20, 30, 40]
    assert (a / "evolve" / "iter_00010_u.pgm").exists()


def test_non_convergence_exit_code(trained):
    cfg, (a, _) = trained
    assert main(["solve", "--config", str(cfg), "--out", str(a), "--tol", "1e-30"]) == 3


def test_determinism_byte_identical(trained):
    cfg, (a, b) = trained
    for out in (a, b):
        _run(cfg, out, "solve", "evolve", "stability", "eval", extra=["--method", "pj", "--tol", "1e-30"])
    files = _artifacts(b)
    assert set(files) <= set(_artifacts(a)) and len(files) > 20
    for rel in files:
        assert _comparable_bytes(a / rel) == _comparable_bytes(b / rel), rel


def test_seed_override_changes_data(tmp_path, trained):
    cfg, (a, _) = trained
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path), "--seed", "8"]) == 0
    assert (tmp_path / "data/train/0000_source.cmlf").read_bytes() != \
        (a / "data/train/0000_source.cmlf").read_bytes()


def test_validation_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[solve]\nmethd = pj\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "solve.methd" in capsys.readouterr().err
    assert main(["solve", "--out", str(tmp_path / "empty")]) == 2
    assert main(["solve", "--method", "sor"]) == 2
    assert main(["nonsense"]) == 2
    assert main(["gen-data", "--out", str(tmp_path), "--tol", "-1"]) == 2
    assert main(["gen-data", "--out", str(tmp_path), "--config", str(tmp_path / "missing.ini")]) == 2


def test_thread_env_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("COMLSIM_THREADS", "zero")
    assert main(["gen-data", "--out", str(tmp_path)]) == 2
    monkeypatch.setenv("COMLSIM_THREADS", "0")
    assert main(["gen-data", "--out", str(tmp_path)]) == 2


def test_corrupt_model_rejected(trained, tmp_path):
    cfg, (a, _) = trained
    import shutil
    shutil.copytree(a / "data", tmp_path / "data")
    (tmp_path / "models").mkdir()
    raw = bytearray((a / "models" / "model.cmlm").read_bytes())
    raw[100] ^= 0xFF
    (tmp_path / "models" / "model.cmlm").write_bytes(bytes(raw))
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path)]) == 2
