import filecmp
import json
from dataclasses import replace

import pytest

from rssguard.errors import ConfigError
from rssguard.experiment import (
    CLIENT_COLUMNS,
    DEFAULT_CLIENT_GRID,
    DEFAULT_EPS_GRID,
    DEFAULT_TAU_GRID,
    DEVICE_COLUMNS,
    ROUND_COLUMNS,
    SUMMARY_COLUMNS,
    BuildingSpec,
    ExperimentConfig,
    SweepSpec,
    TrainSpec,
    config_from_dict,
    linear_client_schedule,
    load_config,
    make_clients,
    make_floorplan,
    prepare_building,
    run_experiment,
    sweep_clients,
    sweep_epsilon,
    sweep_tau,
    write_sweep,
)


def tiny_config(**kw):
    base = ExperimentConfig(
        seed=3,
        buildings=[BuildingSpec("tiny", 10, 16)],
        clients=3,
        malicious=1,
        client_samples_per_rp=2,
        rounds=2,
        pretrain=TrainSpec(15, 1e-3),
        finetune=TrainSpec(1, 1e-4),
        sweeps=SweepSpec(tau_grid=[0.1, 0.5], epsilon_grid=[0.0, 0.5], client_grid=[[3, 0], [3, 1]],
                         attacks=["fgsm", "label_flip"]),
    )
    return replace(base, **kw).validate()


@pytest.fixture(scope="module")
def tiny_contexts():
    cfg = tiny_config()
    return {b.building_id: prepare_building(cfg, b) for b in cfg.buildings}


def test_report_headers_golden():
    assert ROUND_COLUMNS == (
        "building_id", "round", "aggregation", "mode", "tau",
        "mean_error_m", "best_error_m", "worst_error_m", "rce_mean", "rce_max", "denoise_total",
    )
    assert DEVICE_COLUMNS == ("building_id", "round", "device_id", "mean_error_m", "best_error_m", "worst_error_m")
    assert CLIENT_COLUMNS == (
        "building_id", "round", "client_id", "device_id", "malicious", "attack",
        "samples", "denoise_count", "trained_samples", "rce_mean", "rce_max",
    )
    assert SUMMARY_COLUMNS == (
        "building_id", "aggregation", "rounds", "initial_mean_error_m",
        "final_mean_error_m", "final_best_error_m", "final_worst_error_m",
    )


def test_written_headers_match(tmp_path):
    run_experiment(tiny_config(rounds=1), tmp_path)
    for name, cols in [("rounds.csv", ROUND_COLUMNS), ("devices.csv", DEVICE_COLUMNS),
                       ("clients.csv", CLIENT_COLUMNS), ("summary.csv", SUMMARY_COLUMNS)]:
        assert (tmp_path / name).read_text().splitlines()[0] == ",".join(cols)


def test_default_grids():
    assert DEFAULT_TAU_GRID == (0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5)
    assert len(DEFAULT_EPS_GRID) == 19
    assert DEFAULT_EPS_GRID[:3] == (0.01, 0.02, 0.03) and DEFAULT_EPS_GRID[-2:] == (0.9, 1.0)
    assert DEFAULT_CLIENT_GRID == ((6, 1), (12, 5), (18, 8), (24, 12))
    assert linear_client_schedule((6, 24)) == ((6, 1), (24, 12))


def test_rounds_zero(tmp_path):
    run_experiment(tiny_config(rounds=0), tmp_path)
    rows = (tmp_path / "rounds.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].split(",")[1] == "0"
    assert (tmp_path / "clients.csv").read_text().splitlines()[1:] == []


def test_rerun_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment(tiny_config(), a)
    run_experiment(tiny_config(), b)
    names = sorted(p.name for p in a.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors and len(match) == len(names)


def test_sweep_identical_across_worker_counts(tmp_path, tiny_contexts):
    cfg = tiny_config()
    serial = sweep_tau(cfg, contexts=tiny_contexts, workers=1)
    pooled = sweep_tau(cfg, contexts=tiny_contexts, workers=2)
    p1 = write_sweep(cfg, "tau", serial, tmp_path / "w1")
    p2 = write_sweep(replace(cfg, workers=2), "tau", pooled, tmp_path / "w2")
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "w1" / "sweep-tau.manifest.json").read_bytes() == (
        tmp_path / "w2" / "sweep-tau.manifest.json"
    ).read_bytes()


def test_tau_column_echoes_grid(tiny_contexts):
    t = sweep_tau(tiny_config(), [0.5, 0.1], contexts=tiny_contexts)
    assert t.column("tau") == [0.5, 0.1]
    assert t.header == ["tau", "fgsm", "label_flip", "mean_error_m"]


def test_eps_zero_matches_baseline(tiny_contexts):
    t = sweep_epsilon(tiny_config(), contexts=tiny_contexts)
    for row in t.rows:
        assert row[t.header.index("0")] == pytest.approx(row[-1], abs=1e-6)


def test_clients_sweep_shape(tiny_contexts):
    t = sweep_clients(tiny_config(), contexts=tiny_contexts)
    assert len(t.rows) == 2 and t.column("schedule") == ["linear", "linear"]


def test_clients_zero_poisoned_is_clean_baseline(tiny_contexts):
    cfg = tiny_config()
    t = sweep_clients(cfg, [[3, 0]], contexts=tiny_contexts)
    base = sweep_epsilon(cfg, [0.5], contexts=tiny_contexts).column("no_attack")[0]
    assert t.column("saliency_mean_error_m") == [base]


def test_malicious_are_highest_numbered():
    cfg = tiny_config(clients=4, malicious=2)
    fp = make_floorplan(cfg, cfg.buildings[0])
    clients = make_clients(cfg, fp, 4, 2, cfg.attack_spec())
    assert [c.client_id for c in clients if c.malicious] == ["client002", "client003"]


def test_manifest_contents(tmp_path):
    run_experiment(tiny_config(rounds=0), tmp_path)
    m = json.loads((tmp_path / "simulate.manifest.json").read_text())
    assert m["schema_version"] == 1 and m["seed"] == 3 and m["command"] == "simulate"
    assert "workers" not in m["config"] and "rounds.csv" in m["files"]


@pytest.mark.parametrize(
    "data",
    [
        {"schema_version": 2},
        {"malicious": 7},
        {"tau": -0.1},
        {"aggregation": "median"},
        {"mode": "halved"},
        {"flagged_policy": "ignore"},
        {"attack": {"kind": "backdoor"}},
        {"attack": {"epsilon": 2.0}},
        {"pretrain": {"epochs": 5, "learning_rate": 0}},
        {"sweeps": {"client_grid": [[2, 3]]}},
        {"buildings": [{"building_id": "a"}, {"building_id": "a"}]},
        {"train_device": "nokia"},
        {"unknown": 1},
        {"attack": {"strength": 1}},
    ],
)
def test_invalid_config_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1,\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_config(empty) == ExperimentConfig().validate()


def test_default_yaml_matches_defaults():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"
    assert load_config(path) == ExperimentConfig().validate()
