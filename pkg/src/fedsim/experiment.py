"""Experiment configuration, the setting x strategy grid runner and result persistence.

Output layout under ``output_dir``::

    series/<setting>__<strategy>.csv     one MetricsRecord row per round
    plots/<setting>.csv                  one panel per setting: iteration,strategy,accuracy,macro_f1,sim_time
    schedules/<setting>__<strategy>.json chunk schedules (with --dump-schedule)
    events/<setting>__<strategy>.jsonl   simulated event logs (with --dump-events)
    summary.json                         final metrics and total simulated time per cell
    manifest.json                        config echo, derived seeds, versions, timestamp

CSV series columns: strategy, setting, round, accuracy, macro_f1, sim_time, then
precision_c, recall_c, f1_c for every class c.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import platform
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .data import (MODES, SIZE_PROFILES, Dataset, PartitionSpec, label_histogram, load_idx_files, partition,
                   synth_blobs, train_test_split)
from .errors import ConfigurationError, FedSimError
from .metrics import MetricsRecord, evaluate
from .nn_core import ACTIVATIONS, init_model, mlp_specs
from .runtime import CostModel, build_world
from .strategies import KINDS, Strategy, StrategyConfig, run_training

log = logging.getLogger(__name__)

PLOT_COLUMNS = ("iteration", "strategy", "accuracy", "macro_f1", "sim_time")

SYNTH_DEFAULTS = {"kind": "synth", "num_classes": 3, "per_class": 600, "dim": 8, "separation": 6.0,
                  "noise_sigma": 1.0, "test_fraction": 0.2}
IDX_REQUIRED = ("train_images", "train_labels", "test_images", "test_labels")
IDX_OPTIONAL = {"num_classes": None, "train_limit": None, "test_limit": None}
MODEL_DEFAULTS = {"hidden": [200, 200], "activation": "relu"}
PARTITION_DEFAULTS = {"labels_per_client": 1, "size_profile": "paper_ratio", "alpha": 1.0}
SYNTH_CLIENT_COUNTS = (4, 10, 40)
IDX_CLIENT_COUNTS = (10, 100, 600)
TOP_LEVEL = {"dataset", "model", "grid", "partition", "strategies", "iterations", "master_seed",
             "output_dir", "cost_model", "reshuffle_chunks", "repetitions"}
REQUIRED_TOP = ("dataset",)


@dataclass(frozen=True)
class GridCell:
    mode: str
    n_clients: int

    @property
    def setting(self) -> str:
        return f"{self.mode}_n{self.n_clients}"


@dataclass
class ExperimentConfig:
    dataset: dict
    grid: list[GridCell]
    strategies: list[StrategyConfig]
    model: dict = field(default_factory=lambda: dict(MODEL_DEFAULTS))
    partition: dict = field(default_factory=lambda: dict(PARTITION_DEFAULTS))
    iterations: int = 5
    master_seed: int = 0
    output_dir: str = "results"
    cost_model: CostModel = field(default_factory=CostModel)
    reshuffle_chunks: bool = False
    repetitions: int = 1

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": self.model,
            "grid": [{"mode": g.mode, "n_clients": g.n_clients} for g in self.grid],
            "partition": self.partition,
            "strategies": [{k: v for k, v in asdict(s).items()} for s in self.strategies],
            "iterations": self.iterations,
            "master_seed": self.master_seed,
            "output_dir": self.output_dir,
            "cost_model": asdict(self.cost_model),
            "reshuffle_chunks": self.reshuffle_chunks,
            "repetitions": self.repetitions,
        }


# --- parsing -----------------------------------------------------------------

def _expect(value, types, path: str):
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ConfigurationError(f"expected {types}, got bool", path)
    if not isinstance(value, types):
        raise ConfigurationError(f"expected {getattr(types, '__name__', types)}, got {type(value).__name__}", path)
    return value


def _check_keys(obj: dict, allowed, path: str):
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigurationError(f"unknown key (allowed: {sorted(allowed)})", where)


def _parse_dataset(raw: Any) -> dict:
    _expect(raw, dict, "dataset")
    kind = raw.get("kind", "synth")
    if kind == "synth":
        _check_keys(raw, SYNTH_DEFAULTS, "dataset")
        ds = {**SYNTH_DEFAULTS, **raw}
        for key in ("num_classes", "per_class", "dim"):
            if _expect(ds[key], int, f"dataset.{key}") < 1:
                raise ConfigurationError("must be >= 1", f"dataset.{key}")
        for key in ("separation", "noise_sigma", "test_fraction"):
            ds[key] = float(_expect(ds[key], (int, float), f"dataset.{key}"))
        if ds["separation"] <= 0:
            raise ConfigurationError("must be > 0", "dataset.separation")
        if not 0 < ds["test_fraction"] < 1:
            raise ConfigurationError("must lie in (0, 1)", "dataset.test_fraction")
        return ds
    if kind == "idx":
        _check_keys(raw, {"kind", *IDX_REQUIRED, *IDX_OPTIONAL}, "dataset")
        missing = [k for k in IDX_REQUIRED if k not in raw]
        if missing:
            raise ConfigurationError(f"missing required keys {missing}", "dataset")
        return {**IDX_OPTIONAL, **raw}
    raise ConfigurationError(f"unknown dataset kind {kind!r}; expected 'synth' or 'idx'", "dataset.kind")


def _parse_strategy(raw: Any, i: int, iterations: int) -> StrategyConfig:
    path = f"strategies[{i}]"
    if isinstance(raw, str):
        raw = {"kind": raw}
    _expect(raw, dict, path)
    allowed = {f.name for f in fields(StrategyConfig)}
    _check_keys(raw, allowed, path)
    if "kind" not in raw:
        raise ConfigurationError("missing required key 'kind'", path)
    if raw["kind"] not in KINDS:
        raise ConfigurationError(f"invalid value {raw['kind']!r}; expected one of {list(KINDS)}", f"{path}.kind")
    args = {"iterations": iterations, **raw}
    try:
        return StrategyConfig(**args)
    except ConfigurationError as e:
        raise ConfigurationError(str(e).split(": ", 1)[-1], f"{path}.{e.path}" if e.path else path) from None
    except TypeError as e:
        raise ConfigurationError(str(e), path) from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse a JSON experiment document, fill defaults and validate every field."""
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"malformed JSON: {e}") from None
    _expect(raw, dict, "<root>")
    missing = [k for k in REQUIRED_TOP if k not in raw]
    if missing:
        raise ConfigurationError(f"missing required keys {missing}; required: {list(REQUIRED_TOP)}")
    _check_keys(raw, TOP_LEVEL, "")

    dataset = _parse_dataset(raw["dataset"])

    model = dict(MODEL_DEFAULTS)
    if "model" in raw:
        _expect(raw["model"], dict, "model")
        _check_keys(raw["model"], MODEL_DEFAULTS, "model")
        model.update(raw["model"])
    _expect(model["hidden"], list, "model.hidden")
    for j, h in enumerate(model["hidden"]):
        if _expect(h, int, f"model.hidden[{j}]") < 1:
            raise ConfigurationError("must be >= 1", f"model.hidden[{j}]")
    if model["activation"] not in ACTIVATIONS:
        raise ConfigurationError(f"invalid value {model['activation']!r}; expected one of {list(ACTIVATIONS)}",
                                 "model.activation")

    part = dict(PARTITION_DEFAULTS)
    if "partition" in raw:
        _expect(raw["partition"], dict, "partition")
        _check_keys(raw["partition"], PARTITION_DEFAULTS, "partition")
        part.update(raw["partition"])
    if part["size_profile"] not in SIZE_PROFILES:
        raise ConfigurationError(f"invalid value {part['size_profile']!r}; expected one of {list(SIZE_PROFILES)}",
                                 "partition.size_profile")
    if _expect(part["labels_per_client"], int, "partition.labels_per_client") < 1:
        raise ConfigurationError("must be >= 1", "partition.labels_per_client")
    part["alpha"] = float(_expect(part["alpha"], (int, float), "partition.alpha"))

    iterations = _expect(raw.get("iterations", 5), int, "iterations")
    if iterations < 0:
        raise ConfigurationError("must be >= 0", "iterations")
    master_seed = _expect(raw.get("master_seed", 0), int, "master_seed")
    repetitions = _expect(raw.get("repetitions", 1), int, "repetitions")
    if repetitions < 1:
        raise ConfigurationError("must be >= 1", "repetitions")

    if "grid" in raw:
        _expect(raw["grid"], list, "grid")
        if not raw["grid"]:
            raise ConfigurationError("grid must not be empty", "grid")
        grid = []
        for j, g in enumerate(raw["grid"]):
            _expect(g, dict, f"grid[{j}]")
            _check_keys(g, {"mode", "n_clients"}, f"grid[{j}]")
            if g.get("mode") not in MODES:
                raise ConfigurationError(f"invalid value {g.get('mode')!r}; expected one of {list(MODES)}",
                                         f"grid[{j}].mode")
            n = _expect(g.get("n_clients"), int, f"grid[{j}].n_clients")
            if n < 1:
                raise ConfigurationError("must be >= 1", f"grid[{j}].n_clients")
            grid.append(GridCell(g["mode"], n))
    else:
        counts = SYNTH_CLIENT_COUNTS if dataset["kind"] == "synth" else IDX_CLIENT_COUNTS
        grid = [GridCell(m, n) for m in MODES for n in counts]

    raw_strats = raw.get("strategies", list(KINDS))
    _expect(raw_strats, list, "strategies")
    if not raw_strats:
        raise ConfigurationError("strategies must not be empty", "strategies")
    strategies = [_parse_strategy(s, i, iterations) for i, s in enumerate(raw_strats)]
    labels = [s.label for s in strategies]
    for i, name in enumerate(labels):
        if labels.index(name) != i:
            raise ConfigurationError(f"duplicate strategy name {name!r}; give each a distinct 'name'",
                                     f"strategies[{i}].name")

    cost = CostModel()
    if "cost_model" in raw:
        _expect(raw["cost_model"], dict, "cost_model")
        _check_keys(raw["cost_model"], {f.name for f in fields(CostModel)}, "cost_model")
        for k, v in raw["cost_model"].items():
            if _expect(v, (int, float), f"cost_model.{k}") < 0:
                raise ConfigurationError("must be >= 0", f"cost_model.{k}")
        cost = CostModel(**{k: float(v) for k, v in raw["cost_model"].items()})

    return ExperimentConfig(
        dataset=dataset, grid=grid, strategies=strategies, model=model, partition=part,
        iterations=iterations, master_seed=master_seed,
        output_dir=_expect(raw.get("output_dir", "results"), str, "output_dir"),
        cost_model=cost, reshuffle_chunks=_expect(raw.get("reshuffle_chunks", False), bool, "reshuffle_chunks"),
        repetitions=repetitions)


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# --- seeds and data ----------------------------------------------------------

def derive_seed(master_seed: int, *keys: str | int) -> int:
    """Stable 32-bit seed from the master seed and a path of names."""
    entropy = [master_seed] + [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d["kind"] == "synth":
        full = synth_blobs(d["num_classes"], d["per_class"], d["dim"], d["separation"], d["noise_sigma"],
                           derive_seed(cfg.master_seed, "data"))
        return train_test_split(full, d["test_fraction"], derive_seed(cfg.master_seed, "split"))
    train = load_idx_files(d["train_images"], d["train_labels"], d["num_classes"])
    test = load_idx_files(d["test_images"], d["test_labels"], d["num_classes"])
    n_cls = max(train.num_classes, test.num_classes)
    train, test = Dataset(train.features, train.labels, n_cls), Dataset(test.features, test.labels, n_cls)
    if d.get("train_limit"):
        train = train.subset(np.arange(min(d["train_limit"], len(train))))
    if d.get("test_limit"):
        test = test.subset(np.arange(min(d["test_limit"], len(test))))
    return train, test


def partition_spec(cfg: ExperimentConfig, cell: GridCell, rep: int = 0) -> PartitionSpec:
    profile = "equal" if cell.mode == "balanced_iid" else cfg.partition["size_profile"]
    return PartitionSpec(cell.mode, cell.n_clients, cfg.partition["labels_per_client"], profile,
                         cfg.partition["alpha"], derive_seed(cfg.master_seed, cell.setting, "partition", rep))


# --- running -----------------------------------------------------------------

@dataclass
class CellResult:
    setting: str
    strategy: str
    repetition: int
    status: str
    records: list[MetricsRecord] = field(default_factory=list)
    error: str | None = None
    schedule: dict | None = None
    events_jsonl: str | None = None
    seeds: dict = field(default_factory=dict)

    @property
    def key(self) -> str:
        base = f"{self.setting}__{self.strategy}"
        return base if self.repetition == 0 else f"{base}__r{self.repetition}"


@dataclass
class ResultsBundle:
    output_dir: Path
    cells: list[CellResult]
    manifest: dict
    num_classes: int
    strategy_order: list[str] = field(default_factory=list)
    setting_order: list[str] = field(default_factory=list)

    @property
    def failed(self) -> list[CellResult]:
        return [c for c in self.cells if c.status != "ok"]


def run_cell(cfg: ExperimentConfig, train: Dataset, test: Dataset, cell: GridCell,
             strat: StrategyConfig, rep: int = 0, keep_events: bool = False) -> CellResult:
    seeds = {"partition": derive_seed(cfg.master_seed, cell.setting, "partition", rep),
             "init": derive_seed(cfg.master_seed, cell.setting, "init", rep),
             "strategy": derive_seed(cfg.master_seed, cell.setting, strat.label, rep)}
    result = CellResult(cell.setting, strat.label, rep, "ok", seeds=seeds)
    try:
        shards = partition(train, partition_spec(cfg, cell, rep))
        specs = mlp_specs(train.dim, cfg.model["hidden"], train.num_classes, cfg.model["activation"])
        model = init_model(specs, seeds["init"])
        world = build_world(shards, model, cfg.cost_model, reshuffle_chunks=cfg.reshuffle_chunks,
                            seed=seeds["strategy"])
        strategy = Strategy(strat)

        def hook(m, r, t):
            return evaluate(m, test, r, t, strat.label, cell.setting)

        result.records = run_training(strategy, world, strat.iterations, hook)
        if strategy.schedule is not None:
            result.schedule = strategy.schedule.to_dict(strategy.hosts)
        if keep_events:
            result.events_jsonl = world.log.to_jsonl()
    except (FedSimError, ValueError, ArithmeticError, OSError) as e:
        log.error("cell %s / %s failed: %s", cell.setting, strat.label, e)
        result.status, result.error = "failed", f"{type(e).__name__}: {e}"
    return result


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FEDSIM_THREADS", "1")))
    except ValueError:
        return 1


def run_grid(cfg: ExperimentConfig, dump_schedule: bool = False, dump_events: bool = False,
             workers: int | None = None) -> ResultsBundle:
    """Run every (setting, strategy) cell and persist the results.  A failing cell is
    recorded as failed in the summary and does not stop the others."""
    train, test = load_datasets(cfg)
    out = Path(cfg.output_dir)
    (out / "series").mkdir(parents=True, exist_ok=True)
    jobs = [(cell, strat, rep) for cell in cfg.grid for strat in cfg.strategies for rep in range(cfg.repetitions)]
    workers = workers or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(lambda j: run_cell(cfg, train, test, *j, keep_events=dump_events), jobs))
    else:
        cells = [run_cell(cfg, train, test, *j, keep_events=dump_events) for j in jobs]

    header = MetricsRecord.csv_header(train.num_classes)
    for c in cells:
        if c.status == "ok":
            _write_csv(out / "series" / f"{c.key}.csv", header, [r.csv_row() for r in c.records])
        if dump_schedule and c.schedule is not None:
            (out / "schedules").mkdir(exist_ok=True)
            (out / "schedules" / f"{c.key}.json").write_text(json.dumps(c.schedule) + "\n")
        if dump_events and c.events_jsonl is not None:
            (out / "events").mkdir(exist_ok=True)
            (out / "events" / f"{c.key}.jsonl").write_text(c.events_jsonl)

    summary = {"cells": [{
        "setting": c.setting, "strategy": c.strategy, "repetition": c.repetition, "status": c.status,
        "final_accuracy": c.records[-1].accuracy if c.records else None,
        "final_macro_f1": c.records[-1].macro_f1 if c.records else None,
        "total_sim_time": c.records[-1].sim_time if c.records else None,
        "error": c.error} for c in cells]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")

    manifest = {
        "fedsim_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created_unix": time.time(),
        "config": cfg.to_dict(),
        "seeds": {"data": derive_seed(cfg.master_seed, "data"), "split": derive_seed(cfg.master_seed, "split"),
                  "cells": {c.key: c.seeds for c in cells}},
        "train_rows": len(train),
        "test_rows": len(test),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return ResultsBundle(out, cells, manifest, train.num_classes,
                         [s.label for s in cfg.strategies], [g.setting for g in cfg.grid])


def emit_plot_data(bundle: ResultsBundle) -> list[Path]:
    """One CSV per setting panel with every strategy's per-round series (repetition 0)."""
    plots = bundle.output_dir / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    by_key = {(c.setting, c.strategy): c for c in bundle.cells if c.repetition == 0}
    written = []
    for setting in bundle.setting_order:
        missing = [s for s in bundle.strategy_order
                   if (setting, s) not in by_key or by_key[(setting, s)].status != "ok"]
        if missing:
            log.warning("panel %s: missing series for %s; panel skipped", setting, missing)
            continue
        rows = []
        for s in bundle.strategy_order:
            for r in by_key[(setting, s)].records:
                rows.append([str(r.round), s, repr(r.accuracy), repr(r.macro_f1), repr(r.sim_time)])
        path = plots / f"{setting}.csv"
        _write_csv(path, PLOT_COLUMNS, rows)
        written.append(path)
    return written


def partition_report(cfg: ExperimentConfig) -> str:
    train, _ = load_datasets(cfg)
    lines = []
    for cell in cfg.grid:
        lines.append(f"[{cell.setting}]")
        try:
            shards = partition(train, partition_spec(cfg, cell))
        except FedSimError as e:
            lines.append(f"  error: {e}")
            continue
        for s in shards:
            hist = label_histogram(s.labels, train.num_classes)
            lines.append(f"  client {s.client_id:>4}  size {s.size:>6}  labels {hist}")
    return "\n".join(lines)
