import csv
import json

import pytest

from ella.cli import main
from ella.config import (
    ConfigError,
    build_run_config,
    default_config_text,
    default_settings,
    load_config,
)

FAST = [
    "--set", "optimizer.steps_per_task=40",
    "--set", "stream.samples_per_class=40",
    "--set", "stream.test_samples_per_class=20",
    "--set", "output.diag_batches=4",
]


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(default_config_text())
    return path


def test_default_config_roundtrip(cfg_path):
    assert load_config(cfg_path) == build_run_config(default_settings())


def test_schedule_length_mismatch(cfg_path):
    with pytest.raises(ConfigError, match="ella.lambda_schedule"):
        load_config(cfg_path, ["ella.lambda_schedule=[0, 5, 5]"])


def test_override_precedence(cfg_path):
    assert load_config(cfg_path).epsilon == 1e-8
    assert load_config(cfg_path, ["ella.epsilon=1e-6"]).epsilon == 1e-6


def test_unknown_key_rejected(cfg_path):
    with pytest.raises(ConfigError, match="unknown section"):
        load_config(cfg_path, ["modle.rank=2"])
    cfg_path.write_text(cfg_path.read_text().replace("rank = 4", "rnak = 4"))
    with pytest.raises(ConfigError, match="model.rnak"):
        load_config(cfg_path)


def test_missing_required_key(tmp_path):
    path = tmp_path / "min.cfg"
    path.write_text("[stream]\nkind = rotated-gaussians\ntasks = [0.0]\n")
    with pytest.raises(ConfigError, match="ella.lambda_schedule"):
        load_config(path)
    path.write_text(path.read_text() + "[ella]\nlambda_schedule = [0]  # first task\n")
    cfg = load_config(path)
    assert cfg.n_tasks == 1 and cfg.lambda_schedule == (0.0,)


def test_stream_order_and_kinds(cfg_path):
    cfg = load_config(cfg_path, ["stream.order=[1, 0]"])
    assert [t.params["angle"] for t in cfg.stream.tasks] == pytest.approx([1.5707963267948966, 0.0])
    assert [t.seed for t in cfg.stream.tasks] == [1, 0]
    cfg = load_config(cfg_path, ["stream.kind=label-remap", "stream.tasks=[3, 4]"])
    assert cfg.stream.tasks[1].params["remap_seed"] == 4
    with pytest.raises(ConfigError, match="stream.order"):
        load_config(cfg_path, ["stream.order=[0, 0]"])


def test_cli_verify(capsys):
    assert main(["verify", "--trials", "10000", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "0/10000 violations" in out and "all checks passed" in out


def test_cli_missing_config(capsys, tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) != 0
    assert "config not found" in capsys.readouterr().err


def test_cli_bad_override_names_key(cfg_path, capsys, tmp_path):
    assert main(["run", "--config", str(cfg_path), "--output", str(tmp_path / "o"), "--set", "ella.lamda=1"]) != 0
    assert "ella.lamda" in capsys.readouterr().err


def test_cli_unknown_flag(cfg_path):
    assert main(["run", "--config", str(cfg_path), "--bogus"]) != 0


def _masked_metrics(path):
    doc = json.loads(path.read_text())
    doc.pop("timestamp")
    return doc


def test_cli_run_is_deterministic(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg_path), "--output", str(a), "--seed", "3", *FAST]) == 0
    assert main(["run", "--config", str(cfg_path), "--output", str(b), "--seed", "3", *FAST]) == 0
    assert _masked_metrics(a / "metrics.json") == _masked_metrics(b / "metrics.json")
    for name in ("acc_matrix.csv", "diagnostics.csv", "state.npz"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    doc = json.loads((a / "metrics.json").read_text())
    assert doc["config"]["seed"] == 3


def test_cli_refuses_non_empty_output(cfg_path, tmp_path, capsys):
    out = tmp_path / "o"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert main(["run", "--config", str(cfg_path), "--output", str(out), *FAST]) != 0
    assert "not empty" in capsys.readouterr().err
    assert main(["run", "--config", str(cfg_path), "--output", str(out), "--force", *FAST]) == 0


def test_cli_env_output_dir(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("ELLA_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["baseline", "--config", str(cfg_path), *FAST]) == 0
    with open(tmp_path / "env" / "baseline.csv") as fh:
        assert len(list(csv.reader(fh))) == 3


def test_cli_sweep(cfg_path, tmp_path):
    out = tmp_path / "s"
    assert main(["sweep", "--config", str(cfg_path), "--output", str(out), "--lambdas", "1,0", *FAST]) == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["lambda"]) for r in rows] == [0.0, 1.0]


def test_cli_gen_config(tmp_path, capsys):
    path = tmp_path / "g.cfg"
    assert main(["gen-config", "--output", str(path)]) == 0
    assert path.read_text() == default_config_text()
    assert main(["gen-config", "--output", str(path)]) != 0
    assert main(["gen-config"]) == 0
    assert "[ella]" in capsys.readouterr().out
