"""Experiment runner.

Config files are plain ``key = value`` lines; ``#`` starts a comment and
blank lines are ignored. A key given twice keeps the last value (with a
warning). Values are resolved in this order, later wins: built-in
defaults, ``--preset``, the config file, ``--seed``/``--output-dir``, and
finally ``--set key=value`` overrides.

Relative ``data_dir`` values are looked up under ``$FEDSIKD_DATA_ROOT``
when that variable is set.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import federation as fed
from .data import DataLoadError, load_dataset, resolve_data_dir
from .metrics import ExperimentSummary, write_metrics, write_summary
from .seeds import derive_rng
from .tensor_nn import TrainConfig, reference_architectures

log = logging.getLogger("fedsikd")

GRID_ALPHAS = (2.0, 1.0, 0.5, 0.1)
DATASET_DEFAULTS = {
    "mnist": dict(rounds=70, min_per_client=128, data_dir="mnist"),
    "har": dict(rounds=50, min_per_client=64, data_dir="har"),
}
PRESETS = {
    "paper": {},
    "smoke": dict(clients=8, rounds=3, train_subset=2000, test_subset=500, k_max=4, teacher_epochs=1, min_per_client=64),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "mnist"
    strategy: str = "fedsikd"
    alpha: float = 0.5
    clients: int = 40
    rounds: int = 70
    batch_size: int = 64
    epochs: int = 1
    learning_rate: float = 0.01
    momentum: float = 0.0
    kd_temperature: float = 3.0
    kd_weight: float = 0.5
    teacher_epochs: int = 1
    student_data: str = "local"
    stats_mode: str = "per_feature"
    k_min: int = 2
    k_max: int = 0  # 0 -> min(10, clients - 1)
    fixed_k: int = 0  # 0 -> select K from the indices
    hc_threshold: float = 0.0  # 0 -> cut FL+HC at FedSiKD's K
    weighted_cluster_mean: bool = False
    weighted_global_mean: bool = False
    fedavg_weighted: bool = True
    min_per_client: int = 128
    allow_small_clients: bool = False
    conv_activation: str = "linear"
    train_subset: int = 0  # 0 -> full training split
    test_subset: int = 0
    seed: int = 0
    data_dir: str = "mnist"
    output_dir: str = "runs/default"
    record_wall_time: bool = False

    def federation_config(self) -> fed.FederationConfig:
        train = TrainConfig(
            batch_size=self.batch_size,
            local_epochs=self.epochs,
            learning_rate=self.learning_rate,
            kd_temperature=self.kd_temperature,
            kd_weight=self.kd_weight,
            momentum=self.momentum,
            allow_small_clients=self.allow_small_clients,
        )
        return fed.FederationConfig(
            strategy=self.strategy,
            rounds=self.rounds,
            client_count=self.clients,
            alpha=self.alpha,
            train=train,
            stats_mode=self.stats_mode,
            k_min=self.k_min,
            k_max=self.k_max or None,
            fixed_k=self.fixed_k or None,
            teacher_epochs=self.teacher_epochs,
            student_data=self.student_data,
            weighted_cluster_mean=self.weighted_cluster_mean,
            weighted_global_mean=self.weighted_global_mean,
            fedavg_weighted=self.fedavg_weighted,
            hc_threshold=self.hc_threshold or None,
            min_per_client=self.min_per_client,
            seed=self.seed,
        )

    def to_text(self) -> str:
        lines = ["# resolved experiment config; rerun with: fedsikd run --config <this file>"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_value(v)}")
        return "\n".join(lines) + "\n"


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}

CHOICES = {
    "dataset": ("mnist", "har"),
    "strategy": fed.STRATEGIES,
    "student_data": fed.STUDENT_DATA,
    "stats_mode": ("scalar", "per_feature"),
    "conv_activation": ("linear", "relu", "leaky_relu"),
}

# key -> (predicate, message)
RANGES = {
    "alpha": (lambda v: v > 0, "must be > 0"),
    "clients": (lambda v: v >= 2, "must be >= 2"),
    "rounds": (lambda v: v >= 1, "must be >= 1"),
    "batch_size": (lambda v: v >= 1, "must be >= 1"),
    "epochs": (lambda v: v >= 1, "must be >= 1"),
    "learning_rate": (lambda v: v >= 0, "must be >= 0"),
    "momentum": (lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "kd_temperature": (lambda v: v > 0, "must be > 0"),
    "kd_weight": (lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
    "teacher_epochs": (lambda v: v >= 0, "must be >= 0"),
    "k_min": (lambda v: v >= 2, "must be >= 2"),
    "k_max": (lambda v: v == 0 or v >= 2, "must be 0 (auto) or >= 2"),
    "fixed_k": (lambda v: v >= 0, "must be >= 0"),
    "hc_threshold": (lambda v: v >= 0, "must be >= 0"),
    "min_per_client": (lambda v: v >= 0, "must be >= 0"),
    "train_subset": (lambda v: v >= 0, "must be >= 0"),
    "test_subset": (lambda v: v >= 0, "must be >= 0"),
}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw: str, where: str):
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind} ({where})") from None
    return raw


def _read_pairs(path: Path) -> list[tuple[str, str, str]]:
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        pairs.append((key, value, f"{path}:{lineno}"))
    return pairs


def _split_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value (--set)")
    key, value = item.split("=", 1)
    return key.strip(), value.strip()


def parse_config(
    file: str | Path | None = None,
    overrides: Sequence[str] = (),
    preset: str | None = None,
    seed: int | None = None,
    output_dir: str | None = None,
    require_data: bool = False,
) -> ExperimentConfig:
    """Resolve an :class:`ExperimentConfig` from defaults, preset, file and overrides.

    Errors name the offending key and where its value came from.
    """
    raw: list[tuple[str, str, str]] = []
    if file is not None:
        raw += _read_pairs(Path(file))
    if seed is not None:
        raw.append(("seed", str(seed), "--seed"))
    if output_dir is not None:
        raw.append(("output_dir", output_dir, "--output-dir"))
    raw += [(*_split_override(item), "--set") for item in overrides]

    explicit: dict[str, tuple[str, str]] = {}
    for key, value, where in raw:
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r} ({where})")
        # a repeat within one source is a duplicate; a later source simply takes precedence
        if key in explicit and explicit[key][1].rsplit(":", 1)[0] == where.rsplit(":", 1)[0]:
            log.warning("duplicate key %r at %s overrides %s; last value wins", key, where, explicit[key][1])
        explicit[key] = (value, where)

    dataset = explicit.get("dataset", ("mnist", "default"))[0]
    if dataset not in CHOICES["dataset"]:
        raise ConfigError(f"dataset: {dataset!r} not in {CHOICES['dataset']} ({explicit.get('dataset', ('', 'default'))[1]})")

    values: dict[str, object] = {}
    sources: dict[str, str] = {}
    for key, value in DATASET_DEFAULTS[dataset].items():
        values[key], sources[key] = value, "default"
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for key, value in PRESETS[preset].items():
            values[key], sources[key] = value, f"preset {preset}"
    for key, (value, where) in explicit.items():
        values[key], sources[key] = _coerce(key, value, where), where

    cfg = replace(ExperimentConfig(), **values)
    for key, allowed in CHOICES.items():
        v = getattr(cfg, key)
        if v not in allowed:
            raise ConfigError(f"{key}: {v!r} not in {allowed} ({sources.get(key, 'default')})")
    for key, (ok, msg) in RANGES.items():
        v = getattr(cfg, key)
        if not ok(v):
            raise ConfigError(f"{key}: {v!r} {msg} ({sources.get(key, 'default')})")
    if cfg.k_max and cfg.k_max < cfg.k_min:
        raise ConfigError(f"k_max: {cfg.k_max} is below k_min {cfg.k_min} ({sources.get('k_max', 'default')})")
    if not cfg.data_dir:
        raise ConfigError(f"data_dir: dataset path is missing ({sources.get('data_dir', 'default')})")
    if require_data:
        try:
            resolve_data_dir(cfg.data_dir)
        except DataLoadError as exc:
            raise ConfigError(f"data_dir: {exc} ({sources.get('data_dir', 'default')})") from None
    return cfg


# ---------------------------------------------------------------- running


def _subset(ds, n, cfg: ExperimentConfig, tag: str):
    if not n or n >= len(ds):
        return ds
    idx = np.sort(derive_rng(cfg.seed, tag).permutation(len(ds))[:n])
    return ds.subset(idx)


def load_experiment_data(cfg: ExperimentConfig):
    train, test = load_dataset(cfg.dataset, cfg.data_dir)
    return _subset(train, cfg.train_subset, cfg, "train_subset"), _subset(test, cfg.test_subset, cfg, "test_subset")


def run_config(cfg: ExperimentConfig, data=None) -> fed.ExperimentResult:
    """Run one experiment and write ``config.txt``, ``metrics.csv`` and ``summary.json``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    train, test = data if data is not None else load_experiment_data(cfg)
    teacher, student = reference_architectures(cfg.dataset, cfg.conv_activation)
    t0 = time.perf_counter()
    result = fed.run_experiment(cfg.federation_config(), train, test, teacher, student)
    elapsed = time.perf_counter() - t0
    write_metrics(result.rounds, out / "metrics.csv", include_wall_time=cfg.record_wall_time)
    extra = {
        "k_star": result.k_star,
        "k_scores": [asdict(s) for s in result.k_scores],
        "cluster_labels": None if result.labels is None else [int(v) for v in result.labels],
        "client_sizes": [c.size for c in result.clients],
        "wall_seconds": elapsed,
        "round_wall_seconds": [r.wall_time for r in result.rounds],
    }
    write_summary(ExperimentSummary.from_rows(asdict(cfg), result.rounds, extra), out / "summary.json")
    return result


def cell_name(cfg: ExperimentConfig) -> str:
    return f"{cfg.dataset}_{cfg.strategy}_alpha{cfg.alpha:g}_seed{cfg.seed}"


def expand_grid(
    base: ExperimentConfig,
    strategies: Sequence[str] = fed.STRATEGIES,
    alphas: Sequence[float] = GRID_ALPHAS,
) -> list[ExperimentConfig]:
    """One config per (strategy, alpha), each writing to its own subdirectory."""
    cells = []
    for strategy in strategies:
        for alpha in alphas:
            cfg = replace(base, strategy=strategy, alpha=float(alpha))
            cells.append(replace(cfg, output_dir=str(Path(base.output_dir) / cell_name(cfg))))
    return cells


def run_grid(configs: Sequence[ExperimentConfig]) -> int:
    """Run every cell independently; non-zero exit status if any cell failed."""
    if not configs:
        raise ConfigError("grid has no cells")
    failures = []
    cache: dict[tuple, tuple] = {}
    for cfg in configs:
        name = cell_name(cfg)
        try:
            key = (cfg.dataset, cfg.data_dir, cfg.train_subset, cfg.test_subset, cfg.seed)
            if key not in cache:
                cache = {key: load_experiment_data(cfg)}
            result = run_config(cfg, cache[key])
            last = result.rounds[-1]
            log.info("cell %s done: final accuracy %.4f", name, last.test_accuracy)
        except Exception as exc:  # each cell is isolated
            log.error("cell %s failed: %s", name, exc)
            failures.append(name)
    if failures:
        log.error("%d of %d cells failed: %s", len(failures), len(configs), ", ".join(failures))
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsikd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "grid"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--output-dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--preset", choices=sorted(PRESETS))
        if name == "grid":
            p.add_argument("--strategies", default=",".join(fed.STRATEGIES))
            p.add_argument("--alphas", default=",".join(str(a) for a in GRID_ALPHAS))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    log.setLevel(logging.INFO)
    try:
        cfg = parse_config(
            args.config,
            args.overrides,
            preset=args.preset,
            seed=args.seed,
            output_dir=args.output_dir,
            require_data=args.command == "run",
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "run":
        try:
            result = run_config(cfg)
        except (DataLoadError, fed.FederationError, ValueError, RuntimeError) as exc:
            print(f"run failed: {exc}", file=sys.stderr)
            return 1
        for r in result.rounds:
            print(f"round {r.round:3d}  accuracy {r.test_accuracy:.4f}  loss {r.test_loss:.4f}")
        return 0
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    bad = [s for s in strategies if s not in fed.STRATEGIES]
    if bad:
        print(f"config error: unknown strategies {bad}", file=sys.stderr)
        return 2
    return run_grid(expand_grid(cfg, strategies, alphas))


if __name__ == "__main__":
    sys.exit(main())
