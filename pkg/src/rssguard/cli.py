"""Command-line entry point: ``rssguard <command> [options]``.

Exit codes: 0 success, 1 unexpected error, 2 bad config or usage, 3 malformed
input file, 4 dimension/label/protocol violation, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import export_csv
from .errors import EXIT_CODES, ConfigError, RssGuardError, SchemaError
from .experiment import (
    SWEEP_FILES,
    ExperimentConfig,
    fmt,
    load_config,
    make_clients,
    make_datasets,
    make_floorplan,
    prepare_building,
    run_experiment,
    sweep_clients,
    sweep_epsilon,
    sweep_tau,
    write_manifest,
    write_sweep,
    write_table,
)
from .model import parameter_count, route_and_classify, save_checkpoint

log = logging.getLogger("rssguard")

FULL_SCALE_EPOCHS = 700
MODE_CHOICES = {"normalized": "normalized", "paper-literal": "paper_literal"}
PRETRAIN_COLUMNS = (
    "building_id", "epochs", "parameter_count", "final_loss", "train_accuracy",
    "clean_rce_mean", "clean_rce_p95", "clean_rce_max",
)


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=_u64, help="master seed; overrides the config")
    common.add_argument("--out", type=Path, help="output directory; overrides the config")
    common.add_argument("--aggregation", choices=("saliency", "fedavg"))
    common.add_argument("--mode", choices=tuple(MODE_CHOICES), help="saliency combination rule")
    common.add_argument("--paper-scale", action="store_true", help=f"pre-train for {FULL_SCALE_EPOCHS} epochs")
    common.add_argument("--workers", type=int, help="parallel sweep cells (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="rssguard", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic fingerprint CSVs")
    sub.add_parser("pretrain", parents=[common], help="pre-train the global model and save checkpoints")
    sub.add_parser("simulate", parents=[common], help="run the federated rounds and write reports")
    sub.add_parser("sweep-tau", parents=[common], help="mean error across attacks for each tau")
    sub.add_parser("sweep-eps", parents=[common], help="attack x epsilon error table")
    sub.add_parser("sweep-clients", parents=[common], help="saliency vs fedavg over (total, poisoned) clients")
    rep = sub.add_parser("report", parents=[common], help="summarize one or more run directories")
    rep.add_argument("runs", nargs="+", type=Path, help="directories written by simulate")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    if args.aggregation:
        overrides["aggregation"] = args.aggregation
    if args.mode:
        overrides["mode"] = MODE_CHOICES[args.mode]
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.paper_scale:
        overrides["pretrain"] = replace(cfg.pretrain, epochs=FULL_SCALE_EPOCHS)
    return replace(cfg, **overrides).validate()


def cmd_gen_data(cfg: ExperimentConfig) -> list[Path]:
    out = Path(cfg.output_dir)
    written = []
    for b in cfg.buildings:
        fp = make_floorplan(cfg, b)
        train, tests = make_datasets(cfg, fp)
        folder = out / "data" / b.building_id
        folder.mkdir(parents=True, exist_ok=True)
        sets = [(f"train_{train.device_id}.csv", train)]
        sets += [(f"test_{t.device_id}.csv", t) for t in tests]
        sets += [(f"{c.client_id}.csv", c.local_data) for c in make_clients(cfg, fp, cfg.clients, 0, None)]
        for name, fs in sets:
            export_csv(fs, folder / name)
            written.append(folder / name)
    write_manifest(out, cfg, "gen-data", [str(p.relative_to(out)) for p in written])
    return written


def cmd_pretrain(cfg: ExperimentConfig) -> list[Path]:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, files = [], ["pretrain.csv"]
    for b in cfg.buildings:
        ctx = prepare_building(cfg, b)
        pre = ctx.pretrained
        acc = float(np.mean(route_and_classify(ctx.train.features, ctx.gm, cfg.tau).predictions == ctx.train.labels))
        rows.append([
            b.building_id, cfg.pretrain.epochs, parameter_count(ctx.gm),
            pre.loss_history[-1] if pre.loss_history else float("nan"), acc,
            float(pre.clean_rce.mean()), pre.rce_quantile(0.95), float(pre.clean_rce.max()),
        ])
        name = f"gm_{b.building_id}.ckpt"
        save_checkpoint(ctx.gm, out / name)
        files.append(name)
    write_table(out / "pretrain.csv", PRETRAIN_COLUMNS, rows)
    write_manifest(out, cfg, "pretrain", files)
    return [out / f for f in files]


def _read_rows(path: Path) -> list[dict[str, str]]:
    try:
        with path.open(newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def cmd_report(runs: Sequence[Path], out: Path | None) -> str:
    """Final-round error per building and aggregation, as mean and range over runs."""
    groups: dict[tuple[str, str], list[list[float]]] = {}
    for run in runs:
        rows = _read_rows(run / "summary.csv")
        if rows and "final_mean_error_m" not in rows[0]:
            raise SchemaError(f"{run / 'summary.csv'} is not a summary table")
        for r in rows:
            key = (r["building_id"], r["aggregation"])
            vals = [float(r[k]) for k in ("final_mean_error_m", "final_best_error_m", "final_worst_error_m")]
            groups.setdefault(key, []).append(vals)
    header = ["building_id", "aggregation", "runs", "mean_error_m", "mean_error_min_m", "mean_error_max_m",
              "best_error_m", "worst_error_m"]
    table = []
    for (bid, agg), vals in sorted(groups.items()):
        a = np.array(vals)
        table.append([bid, agg, len(a), a[:, 0].mean(), a[:, 0].min(), a[:, 0].max(), a[:, 1].min(), a[:, 2].max()])
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "report.csv", header, table)
    lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in table]
    for run in runs:
        for name in SWEEP_FILES.values():
            if (run / name).exists():
                lines.append(f"# {run / name}")
                lines.extend((run / name).read_text().splitlines())
    return "\n".join(lines)


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    if args.command == "report":
        print(cmd_report(args.runs, args.out))
        return 0
    cfg = resolve_config(args)
    if args.command == "gen-data":
        paths = cmd_gen_data(cfg)
        print(f"wrote {len(paths)} fingerprint files under {cfg.output_dir}")
    elif args.command == "pretrain":
        cmd_pretrain(cfg)
        print(f"wrote {Path(cfg.output_dir) / 'pretrain.csv'}")
    elif args.command == "simulate":
        results = run_experiment(cfg)
        for bid, res in results.items():
            print(f"{bid}: final mean error {res.final.mean_error_m:.4f} m ({cfg.aggregation})")
    else:
        which = args.command.removeprefix("sweep-")
        table = {"tau": sweep_tau, "eps": sweep_epsilon, "clients": sweep_clients}[which](cfg)
        print(f"wrote {write_sweep(cfg, which, table)}")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except RssGuardError as exc:
        print(f"rssguard: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except Exception as exc:  # noqa: BLE001 - last-resort categorization for the exit code
        log.debug("unexpected failure", exc_info=True)
        print(f"rssguard: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
