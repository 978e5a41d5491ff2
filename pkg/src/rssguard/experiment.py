"""Config-driven experiments, sweeps and report files.

Every random draw is derived from ``ExperimentConfig.seed`` and a label that
does not mention the swept variable, so sweep cells differ only in what is
being swept. Pre-training runs once per building and is shared across cells.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .attacks import ATTACK_KINDS, AttackSpec
from .data import (
    DEFAULT_DEVICES,
    DEFAULT_TRAIN_DEVICE,
    DeviceProfile,
    FingerprintSet,
    FloorplanConfig,
    generate_floorplan,
    split_train_test,
    synthesize_fingerprints,
)
from .errors import ConfigError
from .fl import AGGREGATIONS, FLAGGED_POLICIES, SALIENCY_MODES, ClientConfig, run_round
from .metrics import ErrorStats, RoundReport, evaluate
from .model import (
    DENOISE_WEIGHT,
    RECON_WEIGHT,
    FusedParams,
    PretrainResult,
    TrainConfig,
    save_checkpoint,
    server_pretrain,
)
from .seeding import derive_seed

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DEFAULT_TAU_GRID = tuple(round(0.05 * k, 2) for k in range(1, 11))
DEFAULT_EPS_GRID = tuple(round(0.01 * k, 2) for k in range(1, 10)) + tuple(round(0.1 * k, 1) for k in range(1, 11))


def linear_client_schedule(totals: Sequence[int] = (6, 12, 18, 24), first: int = 1, last: int = 12) -> tuple[tuple[int, int], ...]:
    """Poisoned-client counts rising linearly from ``first`` to ``last`` over ``totals``."""
    if len(totals) == 1:
        return ((totals[0], first),)
    lo, hi = totals[0], totals[-1]
    return tuple((t, int(math.floor(first + (t - lo) * (last - first) / (hi - lo) + 0.5))) for t in totals)


DEFAULT_CLIENT_GRID = linear_client_schedule()


@dataclass
class BuildingSpec:
    building_id: str = "building1"
    num_rps: int = 60
    num_aps: int = 203
    path_loss_exponent: float = 3.0
    ref_power_dbm: float = -40.0
    shadowing_sigma_db: float = 4.0
    shadowing_corr_m: float = 8.0
    ap_margin_m: float = 10.0


# RP/AP counts of the five surveyed buildings.
SURVEY_BUILDINGS = (
    BuildingSpec("building1", 60, 203),
    BuildingSpec("building2", 48, 201),
    BuildingSpec("building3", 70, 187),
    BuildingSpec("building4", 80, 135),
    BuildingSpec("building5", 90, 78),
)


@dataclass
class TrainSpec:
    epochs: int
    learning_rate: float
    batch_size: int = 32
    recon_weight: float = RECON_WEIGHT
    denoise_weight: float = DENOISE_WEIGHT

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            self.epochs, self.learning_rate, self.batch_size, seed,
            recon_weight=self.recon_weight, denoise_weight=self.denoise_weight,
        )


@dataclass
class AttackSettings:
    kind: str = "fgsm"
    epsilon: float = 0.5
    alpha: float = 0.9
    iterations: int = 10
    mask_fraction: float = 0.25


@dataclass
class SweepSpec:
    tau_grid: list[float] = field(default_factory=lambda: list(DEFAULT_TAU_GRID))
    epsilon_grid: list[float] = field(default_factory=lambda: list(DEFAULT_EPS_GRID))
    client_grid: list[list[int]] = field(default_factory=lambda: [list(p) for p in DEFAULT_CLIENT_GRID])
    attacks: list[str] = field(default_factory=lambda: list(ATTACK_KINDS))


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    buildings: list[BuildingSpec] = field(default_factory=lambda: [BuildingSpec()])
    devices: list[DeviceProfile] = field(default_factory=lambda: list(DEFAULT_DEVICES))
    train_device: str = DEFAULT_TRAIN_DEVICE
    clients: int = 6
    malicious: int = 1
    client_samples_per_rp: int = 5
    attack: AttackSettings = field(default_factory=AttackSettings)
    tau: float = 0.1
    flagged_policy: str = "exclude"
    aggregation: str = "saliency"
    mode: str = "normalized"
    rounds: int = 10
    pretrain: TrainSpec = field(default_factory=lambda: TrainSpec(200, 1e-3))
    finetune: TrainSpec = field(default_factory=lambda: TrainSpec(5, 1e-4))
    sweeps: SweepSpec = field(default_factory=SweepSpec)
    workers: int = 1
    save_checkpoints: bool = True
    output_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}; expected {SCHEMA_VERSION}")
        if not self.buildings:
            raise ConfigError("at least one building is required")
        ids = [b.building_id for b in self.buildings]
        if len(set(ids)) != len(ids):
            raise ConfigError("building ids must be unique")
        for b in self.buildings:
            if b.num_rps < 2 or b.num_aps < 1:
                raise ConfigError(f"{b.building_id}: need num_rps >= 2 and num_aps >= 1")
        dev_ids = [d.device_id for d in self.devices]
        if len(self.devices) < 2 or len(set(dev_ids)) != len(dev_ids):
            raise ConfigError("need at least two uniquely named devices")
        if self.train_device not in dev_ids:
            raise ConfigError(f"train_device {self.train_device!r} not in devices")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if not 0 <= self.malicious <= self.clients:
            raise ConfigError("malicious must lie in [0, clients]")
        if self.client_samples_per_rp < 1:
            raise ConfigError("client_samples_per_rp must be >= 1")
        self.attack_spec()
        if self.tau < 0:
            raise ConfigError("tau must be >= 0")
        if self.flagged_policy not in FLAGGED_POLICIES:
            raise ConfigError(f"flagged_policy must be one of {FLAGGED_POLICIES}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.mode not in SALIENCY_MODES:
            raise ConfigError(f"mode must be one of {SALIENCY_MODES}")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        for name in ("pretrain", "finetune"):
            getattr(self, name).train_config()
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for a in self.sweeps.attacks:
            if a not in ATTACK_KINDS:
                raise ConfigError(f"unknown sweep attack {a!r}")
        for total, poisoned in self.sweeps.client_grid:
            if total < 1 or not 0 <= poisoned <= total:
                raise ConfigError(f"client grid point ({total}, {poisoned}) invalid")
        return self

    def attack_spec(self, **overrides) -> AttackSpec:
        a = asdict(self.attack) | overrides
        return AttackSpec(seed=derive_seed(self.seed, "attack"), **a)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    nested = {
        "attack": AttackSettings,
        "pretrain": TrainSpec,
        "finetune": TrainSpec,
        "sweeps": SweepSpec,
    }
    for key, cls in nested.items():
        if key in data:
            data[key] = _build(cls, data[key], key)
    if "buildings" in data:
        data["buildings"] = [_build(BuildingSpec, b, f"buildings[{i}]") for i, b in enumerate(data["buildings"] or [])]
    if "devices" in data:
        data["devices"] = [_build(DeviceProfile, d, f"devices[{i}]") for i, d in enumerate(data["devices"] or [])]
    cfg = _build(ExperimentConfig, data, "config")
    return cfg.validate()


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(raw or {})


# ---------------------------------------------------------------------------
# building context and single runs


@dataclass
class BuildingContext:
    spec: BuildingSpec
    floorplan: FloorplanConfig
    train: FingerprintSet
    tests: list[FingerprintSet]
    pretrained: PretrainResult

    @property
    def gm(self) -> FusedParams:
        return self.pretrained.params


def make_floorplan(cfg: ExperimentConfig, b: BuildingSpec) -> FloorplanConfig:
    return generate_floorplan(
        b.building_id,
        b.num_rps,
        b.num_aps,
        derive_seed(cfg.seed, "floorplan", b.building_id),
        path_loss_exponent=b.path_loss_exponent,
        ref_power_dbm=b.ref_power_dbm,
        shadowing_sigma_db=b.shadowing_sigma_db,
        shadowing_corr_m=b.shadowing_corr_m,
        ap_margin_m=b.ap_margin_m,
    )


def make_datasets(cfg: ExperimentConfig, fp: FloorplanConfig) -> tuple[FingerprintSet, list[FingerprintSet]]:
    return split_train_test(fp, cfg.devices, cfg.train_device, derive_seed(cfg.seed, "split", fp.building_id))


def prepare_building(cfg: ExperimentConfig, b: BuildingSpec) -> BuildingContext:
    fp = make_floorplan(cfg, b)
    train, tests = make_datasets(cfg, fp)
    tc = cfg.pretrain.train_config(derive_seed(cfg.seed, "pretrain", b.building_id))
    log.info("pre-training %s for %d epochs", b.building_id, tc.epochs)
    return BuildingContext(b, fp, train, tests, server_pretrain(train, tc))


def make_clients(
    cfg: ExperimentConfig, fp: FloorplanConfig, total: int, poisoned: int, attack: AttackSpec | None
) -> list[ClientConfig]:
    """Clients cycle through the device list; the highest-numbered
    ``poisoned`` clients are malicious."""
    out = []
    for i in range(total):
        dev = cfg.devices[i % len(cfg.devices)]
        local = synthesize_fingerprints(fp, dev, cfg.client_samples_per_rp, derive_seed(cfg.seed, "client_data", fp.building_id, i))
        mal = attack is not None and i >= total - poisoned
        out.append(ClientConfig(f"client{i:03d}", dev.device_id, local, mal, attack if mal else None))
    return out


@dataclass
class RunResult:
    building_id: str
    reports: list[RoundReport]
    final_gm: FusedParams

    @property
    def final(self) -> RoundReport:
        return self.reports[-1]


def run_building(
    cfg: ExperimentConfig,
    ctx: BuildingContext,
    *,
    aggregation: str | None = None,
    tau: float | None = None,
    attack: AttackSpec | None | str = "config",
    total: int | None = None,
    poisoned: int | None = None,
) -> RunResult:
    """Pre-trained GM followed by ``cfg.rounds`` FL rounds on one building.

    ``attack="config"`` uses the configured attack; ``None`` runs without one.
    """
    aggregation = aggregation or cfg.aggregation
    tau = cfg.tau if tau is None else tau
    total = cfg.clients if total is None else total
    poisoned = cfg.malicious if poisoned is None else poisoned
    if attack == "config":
        attack = cfg.attack_spec()
    if poisoned == 0:
        attack = None
    clients = make_clients(cfg, ctx.floorplan, total, poisoned, attack)
    ft = cfg.finetune.train_config()
    gm = ctx.gm
    overall, per_dev = evaluate(gm, ctx.tests, tau)
    reports = [RoundReport(0, aggregation, overall, per_dev, [])]
    bid = ctx.spec.building_id
    for r in range(1, cfg.rounds + 1):
        gm, rep = run_round(
            gm, clients, aggregation, tau, derive_seed(cfg.seed, "round", bid, r), ctx.tests,
            mode=cfg.mode, finetune=ft, round_index=r, flagged=cfg.flagged_policy,
        )
        reports.append(rep)
    return RunResult(bid, reports, gm)


# ---------------------------------------------------------------------------
# report files

ROUND_COLUMNS = (
    "building_id", "round", "aggregation", "mode", "tau",
    "mean_error_m", "best_error_m", "worst_error_m",
    "rce_mean", "rce_max", "denoise_total",
)
DEVICE_COLUMNS = ("building_id", "round", "device_id", "mean_error_m", "best_error_m", "worst_error_m")
CLIENT_COLUMNS = (
    "building_id", "round", "client_id", "device_id", "malicious", "attack",
    "samples", "denoise_count", "trained_samples", "rce_mean", "rce_max",
)
SUMMARY_COLUMNS = (
    "building_id", "aggregation", "rounds", "initial_mean_error_m",
    "final_mean_error_m", "final_best_error_m", "final_worst_error_m",
)


def fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def write_table(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    path.write_text(buf.getvalue())


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


# Execution settings that cannot change any result; left out of manifests so
# reruns with another pool size or destination stay byte-identical.
NON_RESULT_KEYS = ("workers", "output_dir")


def write_manifest(
    out: Path, cfg: ExperimentConfig, command: str, files: Sequence[str], extra: dict | None = None
) -> Path:
    """Write ``<command>.manifest.json`` describing how ``files`` were made."""
    echo = {k: v for k, v in cfg.to_dict().items() if k not in NON_RESULT_KEYS}
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "package_version": __version__,
        "git_describe": git_describe(),
        "seed": cfg.seed,
        "files": sorted(files),
        "config": echo,
    }
    if extra:
        manifest.update(extra)
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _output_dir(cfg: ExperimentConfig, out_dir: str | Path | None) -> Path:
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> dict[str, RunResult]:
    """Pre-train, run the configured rounds per building and write reports."""
    cfg.validate()
    out = _output_dir(cfg, out_dir)
    results = {}
    for b in cfg.buildings:
        results[b.building_id] = run_building(cfg, prepare_building(cfg, b))
    round_rows, dev_rows, client_rows, summary_rows = [], [], [], []
    for bid, res in results.items():
        for rep in res.reports:
            round_rows.append([
                bid, rep.round_index, rep.aggregation, cfg.mode, cfg.tau,
                rep.mean_error_m, rep.best_error_m, rep.worst_error_m,
                rep.rce_mean, rep.rce_max, sum(rep.denoise_trigger_counts.values()),
            ])
            for dev, st in rep.per_device.items():
                dev_rows.append([bid, rep.round_index, dev, st.mean_m, st.best_m, st.worst_m])
            for c in rep.clients:
                client_rows.append([
                    bid, rep.round_index, c.client_id, c.device_id, c.malicious, c.attack or "none",
                    c.samples, c.denoise_count, c.trained_samples, c.rce_mean, c.rce_max,
                ])
        first, last = res.reports[0], res.final
        summary_rows.append([bid, cfg.aggregation, cfg.rounds, first.mean_error_m,
                             last.mean_error_m, last.best_error_m, last.worst_error_m])
    files = ["rounds.csv", "devices.csv", "clients.csv", "summary.csv"]
    write_table(out / "rounds.csv", ROUND_COLUMNS, round_rows)
    write_table(out / "devices.csv", DEVICE_COLUMNS, dev_rows)
    write_table(out / "clients.csv", CLIENT_COLUMNS, client_rows)
    write_table(out / "summary.csv", SUMMARY_COLUMNS, summary_rows)
    if cfg.save_checkpoints:
        for bid, res in results.items():
            name = f"gm_{bid}.ckpt"
            save_checkpoint(res.final_gm, out / name)
            files.append(name)
    write_manifest(out, cfg, "simulate", files)
    return results


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class Cell:
    key: tuple
    aggregation: str
    tau: float
    attack: AttackSpec | None
    total: int
    poisoned: int


def _run_cell(args: tuple[ExperimentConfig, dict[str, BuildingContext], Cell]) -> float:
    cfg, contexts, cell = args
    errs = [
        run_building(cfg, ctx, aggregation=cell.aggregation, tau=cell.tau, attack=cell.attack,
                     total=cell.total, poisoned=cell.poisoned).final.mean_error_m
        for ctx in contexts.values()
    ]
    return float(np.mean(errs))


def run_cells(cfg: ExperimentConfig, cells: Sequence[Cell], contexts: dict[str, BuildingContext] | None = None,
              workers: int | None = None) -> dict[tuple, float]:
    """Evaluate sweep cells, optionally in a process pool; results are keyed,
    so the pool size cannot affect them."""
    if contexts is None:
        contexts = {b.building_id: prepare_building(cfg, b) for b in cfg.buildings}
    workers = workers or cfg.workers
    jobs = [(cfg, contexts, c) for c in cells]
    if workers == 1:
        values = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(_run_cell, jobs))
    return {c.key: v for c, v in zip(cells, values)}


@dataclass
class Table:
    header: list[str]
    rows: list[list[Any]]

    def column(self, name: str) -> list[Any]:
        i = self.header.index(name)
        return [r[i] for r in self.rows]


def sweep_tau(cfg: ExperimentConfig, tau_grid: Sequence[float] | None = None, attacks: Sequence[str] | None = None,
              contexts=None, workers=None) -> Table:
    grid = list(cfg.sweeps.tau_grid if tau_grid is None else tau_grid)
    attacks = list(cfg.sweeps.attacks if attacks is None else attacks)
    if not grid or not attacks:
        raise ConfigError("tau sweep needs a nonempty tau grid and attack list")
    cells = [Cell(("tau", t, a), cfg.aggregation, t, cfg.attack_spec(kind=a), cfg.clients, cfg.malicious)
             for t in grid for a in attacks]
    res = run_cells(cfg, cells, contexts, workers)
    rows = []
    for t in grid:
        vals = [res[("tau", t, a)] for a in attacks]
        rows.append([t, *vals, float(np.mean(vals))])
    return Table(["tau", *attacks, "mean_error_m"], rows)


def sweep_epsilon(cfg: ExperimentConfig, eps_grid: Sequence[float] | None = None, attacks: Sequence[str] | None = None,
                  contexts=None, workers=None) -> Table:
    """Attack x epsilon heatmap; the last column is the no-attack baseline."""
    grid = list(cfg.sweeps.epsilon_grid if eps_grid is None else eps_grid)
    attacks = list(cfg.sweeps.attacks if attacks is None else attacks)
    if not grid or not attacks:
        raise ConfigError("epsilon sweep needs a nonempty epsilon grid and attack list")
    cells = [Cell(("eps", a, e), cfg.aggregation, cfg.tau, cfg.attack_spec(kind=a, epsilon=e), cfg.clients, cfg.malicious)
             for a in attacks for e in grid]
    cells.append(Cell(("baseline",), cfg.aggregation, cfg.tau, None, cfg.clients, 0))
    res = run_cells(cfg, cells, contexts, workers)
    base = res[("baseline",)]
    rows = [[a, *[res[("eps", a, e)] for e in grid], base] for a in attacks]
    return Table(["attack", *[f"{float(e):g}" for e in grid], "no_attack"], rows)


def sweep_clients(cfg: ExperimentConfig, grid: Sequence[Sequence[int]] | None = None, contexts=None, workers=None) -> Table:
    points = [tuple(p) for p in (cfg.sweeps.client_grid if grid is None else grid)]
    if not points:
        raise ConfigError("client sweep needs a nonempty grid")
    for total, poisoned in points:
        if total < 1 or not 0 <= poisoned <= total:
            raise ConfigError(f"client grid point ({total}, {poisoned}) invalid")
    attack = cfg.attack_spec()
    cells = [Cell(("clients", t, p, agg), agg, cfg.tau, attack, t, p) for t, p in points for agg in AGGREGATIONS]
    res = run_cells(cfg, cells, contexts, workers)
    rows = [[t, p, res[("clients", t, p, "saliency")], res[("clients", t, p, "fedavg")], "linear"] for t, p in points]
    return Table(["total_clients", "poisoned_clients", "saliency_mean_error_m", "fedavg_mean_error_m", "schedule"], rows)


SWEEP_FILES = {"tau": "tau_sweep.csv", "eps": "eps_sweep.csv", "clients": "clients_sweep.csv"}


def write_sweep(cfg: ExperimentConfig, which: str, table: Table, out_dir: str | Path | None = None) -> Path:
    out = _output_dir(cfg, out_dir)
    name = SWEEP_FILES[which]
    write_table(out / name, table.header, table.rows)
    write_manifest(out, cfg, f"sweep-{which}", [name])
    return out / name
