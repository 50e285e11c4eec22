import csv
import json

import pytest

from fedsim import cli
from fedsim.errors import ConfigurationError
from fedsim.experiment import (PLOT_COLUMNS, GridCell, derive_seed, emit_plot_data, load_datasets, parse_config,
                               partition_report, run_cell, run_grid)
from fedsim.strategies import KINDS

SMALL = {"dataset": {"kind": "synth", "num_classes": 3, "per_class": 60, "dim": 4},
         "model": {"hidden": [8]}, "iterations": 2,
         "strategies": ["fedavg", "wfedavg", "cycle", {"kind": "proposed", "batch_size": 30,
                                                       "parallel_window_size": 3}]}


def small_config(tmp_path, **overrides):
    doc = {**SMALL, "output_dir": str(tmp_path / "out"), **overrides}
    return parse_config(json.dumps(doc))


def read_dir(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*.csv"))}


# --- configuration -----------------------------------------------------------

def test_minimal_config_defaults():
    cfg = parse_config('{"dataset": {"kind": "synth"}}')
    assert cfg.iterations == 5 and cfg.master_seed == 0
    assert [s.kind for s in cfg.strategies] == list(KINDS)
    assert all(s.iterations == 5 for s in cfg.strategies)
    assert [g.setting for g in cfg.grid][:3] == ["balanced_iid_n4", "balanced_iid_n10", "balanced_iid_n40"]
    assert len(cfg.grid) == 9
    assert cfg.model == {"hidden": [200, 200], "activation": "relu"}
    assert cfg.dataset["per_class"] == 600


def test_window_divisibility_error():
    doc = {"dataset": {}, "strategies": [{"kind": "proposed", "batch_size": 100, "parallel_window_size": 3}]}
    with pytest.raises(ConfigurationError) as e:
        parse_config(json.dumps(doc))
    assert e.value.path == "strategies[0].parallel_window_size"


def test_empty_document_lists_required_keys():
    with pytest.raises(ConfigurationError, match=r"missing required keys \['dataset'\]"):
        parse_config("")
    with pytest.raises(ConfigurationError, match="dataset"):
        parse_config("{}")


@pytest.mark.parametrize("doc, path", [
    ({"dataset": {}, "colour": 1}, "colour"),
    ({"dataset": {"kind": "synth", "dims": 3}}, "dataset.dims"),
    ({"dataset": {}, "model": {"hidden": [0]}}, "model.hidden[0]"),
    ({"dataset": {}, "iterations": "5"}, "iterations"),
    ({"dataset": {}, "grid": [{"mode": "iid", "n_clients": 3}]}, "grid[0].mode"),
    ({"dataset": {}, "strategies": [{"kind": "fedavg", "lr": 1}]}, "strategies[0].lr"),
    ({"dataset": {}, "strategies": ["fedavg", "fedavg"]}, "strategies[1].name"),
    ({"dataset": {}, "cost_model": {"t_msg_fixed": -1}}, "cost_model.t_msg_fixed"),
])
def test_invalid_fields_name_their_path(doc, path):
    with pytest.raises(ConfigurationError) as e:
        parse_config(json.dumps(doc))
    assert e.value.path == path


def test_derive_seed_is_stable_and_keyed():
    assert derive_seed(0, "a", 1) == derive_seed(0, "a", 1)
    assert len({derive_seed(0, "a"), derive_seed(0, "b"), derive_seed(1, "a")}) == 3


# --- grid runs ---------------------------------------------------------------

def test_grid_emits_one_series_per_cell_and_reruns_identically(tmp_path):
    cfg = small_config(tmp_path)
    bundle = run_grid(cfg)
    assert not bundle.failed
    first = read_dir(tmp_path / "out" / "series")
    assert len(first) == 36
    cfg2 = small_config(tmp_path, output_dir=str(tmp_path / "again"))
    run_grid(cfg2)
    assert read_dir(tmp_path / "again" / "series") == first

    plots = emit_plot_data(bundle)
    assert len(plots) == 9
    with open(plots[0], newline="") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == PLOT_COLUMNS
    assert len(rows) == 1 + 4 * 3
    cell = next(c for c in bundle.cells if c.setting == "balanced_iid_n4" and c.strategy == "cycle")
    cycle_rows = [r for r in rows[1:] if r[1] == "cycle"]
    assert [float(r[2]) for r in cycle_rows] == [rec.accuracy for rec in cell.records]
    assert [float(r[4]) for r in cycle_rows] == [rec.sim_time for rec in cell.records]

    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert len(summary["cells"]) == 36 and {c["status"] for c in summary["cells"]} == {"ok"}
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["config"]["iterations"] == 2 and "created_unix" in manifest


def test_dropping_a_strategy_leaves_other_cells_unchanged(tmp_path):
    run_grid(small_config(tmp_path, output_dir=str(tmp_path / "all")))
    run_grid(small_config(tmp_path, output_dir=str(tmp_path / "some"), strategies=["cycle", "wfedavg"]))
    full, part = read_dir(tmp_path / "all" / "series"), read_dir(tmp_path / "some" / "series")
    assert len(part) == 18
    for name, data in part.items():
        assert full[name] == data


def test_single_cell_grid_is_a_single_run(tmp_path):
    cfg = small_config(tmp_path, grid=[{"mode": "imbalanced_noniid", "n_clients": 3}], strategies=["wfedavg"])
    bundle = run_grid(cfg)
    train, test = load_datasets(cfg)
    direct = run_cell(cfg, train, test, GridCell("imbalanced_noniid", 3), cfg.strategies[0])
    assert [r.csv_row() for r in bundle.cells[0].records] == [r.csv_row() for r in direct.records]


def test_failed_cell_is_recorded_and_others_continue(tmp_path):
    cfg = small_config(tmp_path, grid=[{"mode": "imbalanced_noniid", "n_clients": 2},
                                       {"mode": "balanced_iid", "n_clients": 2}], strategies=["fedavg"])
    bundle = run_grid(cfg)
    assert [c.status for c in bundle.cells] == ["failed", "ok"]
    assert "PartitionError" in bundle.cells[0].error
    assert emit_plot_data(bundle) == [tmp_path / "out" / "plots" / "balanced_iid_n2.csv"]


def test_partition_report_lists_every_cell(tmp_path):
    cfg = small_config(tmp_path, grid=[{"mode": "imbalanced_iid", "n_clients": 4}])
    text = partition_report(cfg)
    assert text.splitlines()[0] == "[imbalanced_iid_n4]"
    assert len(text.splitlines()) == 5


# --- command line ------------------------------------------------------------

def write_config(tmp_path, **overrides):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({**SMALL, **overrides}))
    return str(path)


def test_cli_run_success(tmp_path, capsys):
    path = write_config(tmp_path, strategies=["fedavg", {"kind": "proposed_semi", "batch_size": 30,
                                                         "cluster_window_size": 3}])
    out = tmp_path / "res"
    code = cli.main(["run", "--config", path, "--out", str(out), "--dump-schedule", "--dump-events",
                     "--grid-filter", "imbalanced_*", "--strategies", "proposed_semi"])
    assert code == 0
    schedules = {p.name for p in (out / "schedules").iterdir()}
    assert schedules == {f"imbalanced_{m}_n{n}__proposed_semi.json" for m in ("iid", "noniid") for n in (4, 10, 40)}
    sched = json.loads((out / "schedules" / "imbalanced_iid_n4__proposed_semi.json").read_text())
    assert sched["chunk_size"] == 10 and len(sched["hosts"]) == len(sched["steps"])
    assert len(list((out / "events").iterdir())) == 6
    assert len(capsys.readouterr().out.splitlines()) == 7


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"dataset": {}, "iterations": -1}')
    assert cli.main(["run", "--config", str(bad)]) == 1
    assert "iterations" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    assert cli.main(["run", "--config", write_config(tmp_path), "--strategies", "nope"]) == 1


def test_cli_failed_cell_exit_code(tmp_path):
    path = write_config(tmp_path, grid=[{"mode": "imbalanced_noniid", "n_clients": 2}], strategies=["fedavg"])
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "r")]) == 2


def test_cli_seed_override_changes_results(tmp_path):
    path = write_config(tmp_path, grid=[{"mode": "balanced_iid", "n_clients": 3}], strategies=["fedavg"])
    cli.main(["run", "--config", path, "--out", str(tmp_path / "a"), "--seed", "1"])
    cli.main(["run", "--config", path, "--out", str(tmp_path / "b"), "--seed", "2"])
    assert read_dir(tmp_path / "a" / "series") != read_dir(tmp_path / "b" / "series")


def test_cli_partition_report(tmp_path, capsys):
    path = write_config(tmp_path, grid=[{"mode": "imbalanced_noniid", "n_clients": 3}])
    assert cli.main(["partition-report", "--config", path]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "[imbalanced_noniid_n3]" and len(lines) == 4
