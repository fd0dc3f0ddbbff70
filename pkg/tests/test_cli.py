import logging
import struct
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fedsikd import cli


def _idx(path, magic, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    path.write_bytes(struct.pack(">i", magic) + struct.pack(">" + "i" * arr.ndim, *arr.shape) + arr.tobytes())


@pytest.fixture(scope="module")
def fake_mnist(tmp_path_factory):
    """Tiny learnable MNIST look-alike: class c lights up one image band."""
    root = tmp_path_factory.mktemp("data")
    d = root / "mnist"
    d.mkdir()
    rng = np.random.default_rng(0)
    for split, n in (("train", 400), ("t10k", 100)):
        labels = rng.integers(0, 10, n)
        imgs = rng.integers(0, 60, size=(n, 28, 28))
        for i, c in enumerate(labels):
            imgs[i, 2 * c : 2 * c + 3, :] = 255
        _idx(d / f"{split}-images-idx3-ubyte", 2051, imgs)
        _idx(d / f"{split}-labels-idx1-ubyte", 2049, labels)
    return root


SMALL = ["clients=4", "rounds=2", "min_per_client=16", "batch_size=16", "k_max=3", "test_subset=50"]


def test_defaults_from_empty_file(tmp_path):
    f = tmp_path / "empty.cfg"
    f.write_text("# nothing here\n\n")
    cfg = cli.parse_config(f, ["dataset=mnist"])
    assert (cfg.clients, cfg.batch_size, cfg.rounds) == (40, 64, 70)
    assert cli.parse_config(None, ["dataset=har"]).rounds == 50
    assert cli.parse_config(None, ["dataset=har"]).min_per_client == 64


def test_precedence(tmp_path):
    f = tmp_path / "a.cfg"
    f.write_text("alpha = 0.1\nrounds = 9\nseed = 4\n")
    assert cli.parse_config(f).alpha == 0.1
    cfg = cli.parse_config(f, ["alpha=2.0"], seed=7, preset="smoke")
    assert cfg.alpha == 2.0  # command line beats file
    assert cfg.rounds == 9  # file beats preset
    assert cfg.seed == 7  # flag beats file
    assert cfg.clients == cli.PRESETS["smoke"]["clients"]  # preset beats defaults
    assert cli.parse_config(None, ["seed=3"], seed=7).seed == 3  # --set is applied last


def test_range_and_unknown_errors(tmp_path):
    with pytest.raises(cli.ConfigError, match=r"alpha: 0\.0 must be > 0 \(--set\)"):
        cli.parse_config(None, ["alpha=0"])
    f = tmp_path / "bad.cfg"
    f.write_text("rounds = 3\nflavour = mint\n")
    with pytest.raises(cli.ConfigError, match=r"unknown key 'flavour' \(.*bad.cfg:2\)"):
        cli.parse_config(f)
    f.write_text("kd_weight = 1.5\n")
    with pytest.raises(cli.ConfigError, match="kd_weight.*bad.cfg:1"):
        cli.parse_config(f)
    with pytest.raises(cli.ConfigError, match="strategy"):
        cli.parse_config(None, ["strategy=fedprox"])
    with pytest.raises(cli.ConfigError, match="rounds: cannot parse"):
        cli.parse_config(None, ["rounds=many"])


def test_missing_data_path(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDSIKD_DATA_ROOT", raising=False)
    with pytest.raises(cli.ConfigError, match="data_dir.*--set"):
        cli.parse_config(None, [f"data_dir={tmp_path / 'absent'}"], require_data=True)
    with pytest.raises(cli.ConfigError, match="data_dir: dataset path is missing"):
        cli.parse_config(None, ["data_dir="])


def test_duplicate_key_last_wins(tmp_path, caplog):
    f = tmp_path / "dup.cfg"
    f.write_text("alpha = 0.5\nalpha = 1.0\n")
    with caplog.at_level(logging.WARNING, logger="fedsikd"):
        cfg = cli.parse_config(f)
    assert cfg.alpha == 1.0
    assert "duplicate key 'alpha'" in caplog.text


def test_echo_reparses(tmp_path):
    cfg = cli.parse_config(None, ["alpha=0.3", "strategy=fl_hc", "weighted_global_mean=true"])
    f = tmp_path / "echo.cfg"
    f.write_text(cfg.to_text())
    assert cli.parse_config(f) == cfg


def test_run_writes_outputs_and_is_repeatable(fake_mnist, tmp_path, monkeypatch):
    monkeypatch.setenv("FEDSIKD_DATA_ROOT", str(fake_mnist))
    args = ["run", "--seed", "3"] + [x for s in SMALL for x in ("--set", s)]
    assert cli.main(args + ["--output-dir", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--output-dir", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert len((a / "metrics.csv").read_text().splitlines()) == 3
    # the echoed config reproduces the run
    echo = (a / "config.txt").read_text().replace(str(a), str(tmp_path / "c"))
    (tmp_path / "echo.cfg").write_text(echo)
    assert cli.main(["run", "--config", str(tmp_path / "echo.cfg")]) == 0
    assert (tmp_path / "c" / "metrics.csv").read_bytes() == (a / "metrics.csv").read_bytes()
    assert (a / "summary.json").exists()


def test_run_missing_data_exit_code(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("FEDSIKD_DATA_ROOT", raising=False)
    code = cli.main(["run", "--set", f"data_dir={tmp_path / 'nope'}", "--output-dir", str(tmp_path)])
    assert code == 2
    assert "data_dir" in capsys.readouterr().err


def test_grid_sixteen_cells(fake_mnist, tmp_path, monkeypatch):
    monkeypatch.setenv("FEDSIKD_DATA_ROOT", str(fake_mnist))
    args = ["grid", "--output-dir", str(tmp_path)] + [x for s in SMALL + ["rounds=1"] for x in ("--set", s)]
    assert cli.main(args) == 0
    csvs = sorted(tmp_path.glob("*/metrics.csv"))
    assert len(csvs) == 16
    assert {p.parent.name.split("_alpha")[0] for p in csvs} == {f"mnist_{s}" for s in cli.fed.STRATEGIES}


def test_grid_isolates_failures(fake_mnist, tmp_path, monkeypatch, caplog):
    monkeypatch.setenv("FEDSIKD_DATA_ROOT", str(fake_mnist))
    base = cli.parse_config(None, SMALL + ["rounds=1"], output_dir=str(tmp_path))
    cells = cli.expand_grid(base)
    cells[5] = replace(cells[5], data_dir=str(tmp_path / "missing"))
    with caplog.at_level(logging.ERROR, logger="fedsikd"):
        assert cli.run_grid(cells) == 1
    assert len(list(tmp_path.glob("*/metrics.csv"))) == 15
    assert cli.cell_name(cells[5]) in caplog.text
