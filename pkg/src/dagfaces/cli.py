"""Command-line entry point.

One executable, six subcommands, one config file:

    dag gen-data  --config cfg.yaml          render the synthetic dataset
    dag pair      --config cfg.yaml          build aligned triplets + warps
    dag train     --config cfg.yaml          fit the network, write checkpoints
    dag eval      --config cfg.yaml          metrics, plots, retrieval sheets
    dag sweep     --config cfg.yaml          loss-weight grid sweep + heatmap
    dag gradcheck --config cfg.yaml          finite-difference gradient audit

All outputs land under <out_dir>/run-<hash>/ where the hash covers the
resolved configuration, so a rerun with the same config overwrites its own
files byte for byte. Timestamps appear only in run.log. Scalar settings can
be overridden per run with --set section.key=value. DAG_THREADS caps worker
threads for rendering.

Exit codes: 0 success, 1 internal error, 2 bad configuration, 3 missing
input, 4 gradient check failed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import traceback
from pathlib import Path

from .config import ConfigError, RunConfig, load_run_config
from .evaluate import (
    embed_records,
    evaluate_model,
    lambda_sweep,
    nearest_neighbor_gallery,
    retrieval_sheet,
    roc_svg,
    save_contact_sheet,
    sweep_heatmap_svg,
    training_curves_svg,
    write_report_csv,
    write_roc_csv,
    write_sweep_csv,
)
from .images import save_image, tile_grid
from .net import CheckpointError, ConfigurationError, NetParams, grad_check
from .synth import generate_dataset, load_dataset
from .tps import align_record
from .train import build_triplets, load_triplets, save_triplets, train

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_GRADCHECK = 4


class LockedRunError(RuntimeError):
    """Another invocation holds this run directory."""


class RunLock:
    """Exclusive advisory lock on a run directory (single process at a time)."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"
        self.fd: int | None = None

    def __enter__(self) -> "RunLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockedRunError(
                f"{self.path} exists; concurrent runs on one output directory are "
                "unsupported (remove the file if no other run is active)"
            ) from None
        os.write(self.fd, f"{os.getpid()}\n".encode("ascii"))
        return self

    def __exit__(self, *exc) -> None:
        if self.fd is not None:
            os.close(self.fd)
        self.path.unlink(missing_ok=True)


class _RunLogging:
    """Console without timestamps; run.log with timestamps (the only place)."""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.handlers: list[logging.Handler] = []

    def __enter__(self) -> "_RunLogging":
        root = logging.getLogger()
        root.setLevel(logging.INFO)
        console = logging.StreamHandler(sys.stderr)
        console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        file_handler = logging.FileHandler(self.run_dir / "run.log", encoding="utf-8")
        file_handler.setFormatter(
            logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
        )
        for h in (console, file_handler):
            root.addHandler(h)
            self.handlers.append(h)
        return self

    def __exit__(self, *exc) -> None:
        root = logging.getLogger()
        for h in self.handlers:
            root.removeHandler(h)
            h.close()


# ---------------------------------------------------------------------------
# Subcommands. Each receives the resolved config and its run directory.


def cmd_gen_data(cfg: RunConfig, run_dir: Path) -> int:
    ds = cfg.dataset
    manifest = generate_dataset(
        n_identities=ds["identities"],
        per_identity=ds["per_identity"],
        seed=cfg.seed,
        out_dir=run_dir / "dataset",
        image_size=ds["image_size"],
        noise_level=ds["noise_level"],
    )
    n_train = len(manifest.rows_for("train"))
    n_test = len(manifest.rows_for("test"))
    print(
        f"gen-data: {len(manifest.rows)} records "
        f"({n_train} train / {n_test} test) -> {manifest.root / 'manifest.csv'}"
    )
    return EXIT_OK


def cmd_pair(cfg: RunConfig, run_dir: Path) -> int:
    manifest = load_dataset(run_dir / "dataset")
    tset = build_triplets(manifest, cfg.train["pool_size"], cfg.seed)
    out = run_dir / "triplets"
    save_triplets(tset, out)
    n_rows = min(cfg.pair["sheet_rows"], len(tset.items))
    if n_rows > 0:
        sheet = tile_grid(
            [
                [t.query.image, t.neighbor.image, t.warped.image]
                for t in tset.items[:n_rows]
            ]
        )
        save_image(sheet, out / "pair_sheet.pgm")
    print(
        f"pair: {len(tset.items)} triplets ({tset.skipped} skipped) -> {out}"
        + (f"; sheet rows: {n_rows}" if n_rows else "")
    )
    return EXIT_OK


def cmd_train(cfg: RunConfig, run_dir: Path) -> int:
    triplets = load_triplets(run_dir / "triplets")
    train_cfg = cfg.train_config(n_classes=len(triplets.label_map()))
    out = run_dir / "train"
    result = train(train_cfg, triplets, out_dir=out)
    if result.log:
        training_curves_svg(result.log, out / "training_curves.svg")
        last = result.log[-1]
        print(
            f"train: {len(result.log)} epochs, final loss {last['loss_total']:.4f}, "
            f"train acc {last['train_acc']:.4f} (best epoch {result.best_epoch}) -> {out}"
        )
    else:
        print(f"train: 0 epochs, checkpoints hold the initialization -> {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, run_dir: Path) -> int:
    manifest = load_dataset(run_dir / "dataset")
    triplets = load_triplets(run_dir / "triplets")
    net_cfg = cfg.net_config(n_classes=len(triplets.label_map()))
    checkpoint = run_dir / "train" / "checkpoint_final.bin"
    if not checkpoint.exists():
        raise FileNotFoundError(f"no checkpoint at {checkpoint}; run `dag train` first")
    params = NetParams.load(checkpoint, net_cfg)

    tag = f"{cfg.run_hash()}_s{cfg.seed}"
    out = run_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_model(
        params,
        manifest,
        triplets.frame,
        seed=cfg.seed,
        config_hash=cfg.run_hash(),
        pool_size=cfg.train["pool_size"],
        probe_folds=cfg.eval["probe_folds"],
        verification_folds=cfg.eval["verification_folds"],
        attribute_epochs=cfg.eval["attribute_epochs"],
    )
    write_report_csv(report, out / f"metrics_{tag}.csv")
    write_roc_csv(report, out / f"roc_{tag}.csv")
    roc_svg(report, out / f"roc_{tag}.svg")

    test_records = manifest.load_records("test")
    aligned = [align_record(r, triplets.frame) for r in test_records]
    combined = embed_records(params, aligned)["combined"]
    probes = list(range(min(cfg.eval["sheet_probes"], len(aligned))))
    lists = nearest_neighbor_gallery(combined, probes, k=cfg.eval["neighbors_k"])
    save_contact_sheet(retrieval_sheet(aligned, lists), out / f"retrieval_{tag}.pgm")
    with open(out / f"retrieval_{tag}.csv", "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["probe_record_id", "rank", "neighbor_record_id"])
        for p, row in zip(probes, lists):
            for rank, j in enumerate(row):
                writer.writerow([aligned[p].record_id, rank, aligned[j].record_id])

    print(
        "eval: rank1(combined) "
        f"{report.rank1['combined']:.4f}, verification(combined) "
        f"{report.verification['combined']:.4f} -> {out}"
    )
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, run_dir: Path) -> int:
    manifest = load_dataset(run_dir / "dataset")
    n_hint = len(manifest.identities("train"))
    base = cfg.train_config(n_classes=n_hint)
    result = lambda_sweep(
        manifest,
        base,
        cfg.sweep["lambda_a"],
        cfg.sweep["lambda_g"],
        cfg.sweep["seeds"],
        verification_folds=cfg.eval["verification_folds"],
    )
    out = run_dir / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    tag = cfg.run_hash()
    write_sweep_csv(result, out / f"sweep_{tag}.csv")
    sweep_heatmap_svg(result, out / f"sweep_{tag}.svg")
    n_failed = sum(1 for c in result.cells if c.status != "ok")
    print(
        f"sweep: {len(result.cells)} cells "
        f"({n_failed} failed) over {len(result.seeds)} seeds -> {out}"
    )
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, run_dir: Path) -> int:
    gc = cfg.gradcheck
    report = grad_check(
        seed=cfg.seed,
        tolerance=gc["tolerance"],
        step=gc["step"],
        precision=gc["precision"],
    )
    with open(run_dir / "gradcheck_report.csv", "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["passed", "max_rel_error", "tolerance", "step", "worst_tensor",
             "n_parameters", "precision"]
        )
        writer.writerow(
            [int(report.passed), repr(report.max_rel_error), repr(report.tolerance),
             repr(report.step), report.worst_tensor, report.n_parameters, report.precision]
        )
    status = "PASS" if report.passed else "FAIL"
    print(
        f"gradcheck: {status} max rel error {report.max_rel_error:.3e} "
        f"(tolerance {report.tolerance:.1e}, {report.precision}, "
        f"{report.n_parameters} parameters)"
    )
    return EXIT_OK if report.passed else EXIT_GRADCHECK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pair": cmd_pair,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dag",
        description="Synthetic-face embedding pipeline: data, warps, training, metrics.",
        epilog="Set DAG_THREADS to cap rendering threads.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="path to the YAML config file")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override one scalar config entry (repeatable)",
        )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.set)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    run_dir = cfg.run_dir()
    try:
        with RunLock(run_dir):
            with _RunLogging(run_dir):
                log.info("command %s in %s", args.command, run_dir)
                try:
                    cfg.write_resolved(run_dir)
                    return _COMMANDS[args.command](cfg, run_dir)
                except FileNotFoundError as exc:
                    log.error("missing input: %s", exc)
                    print(f"error: {exc}", file=sys.stderr)
                    return EXIT_MISSING
                except (ConfigError, ConfigurationError, CheckpointError) as exc:
                    log.error("configuration problem: %s", exc)
                    print(f"config error: {exc}", file=sys.stderr)
                    return EXIT_CONFIG
                except Exception as exc:  # noqa: BLE001 - single exit boundary
                    log.error("internal error: %s\n%s", exc, traceback.format_exc())
                    print(f"internal error: {exc}", file=sys.stderr)
                    return EXIT_INTERNAL
    except LockedRunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
