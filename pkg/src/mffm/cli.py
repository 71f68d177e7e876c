"""Command-line entry point: ``mffm <subcommand> --config FILE``.

Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
runtime failures. Each invocation holds a lock file in the output directory.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import torch

from . import pipeline as pl
from .config import MATRIX_VARIANTS, VARIANTS, ConfigError, load_config
from .container import ContainerFormatError

LOCK_NAME = ".mffm.lock"


class UsageError(Exception):
    pass


@contextmanager
def output_lock(directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise pl.PipelineError(f"{directory} is locked by another invocation ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def configure_threads() -> None:
    """``MFFM_THREADS`` caps torch intra-op threads; 0 or unset leaves the default."""
    raw = os.environ.get("MFFM_THREADS", "").strip()
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MFFM_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("MFFM_THREADS must be >= 0")
    if n > 0:
        torch.set_num_threads(n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mffm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_text):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", required=True, help="experiment config file")
        return s

    cmd("gen-data", "generate the paired multi-resolution dataset")
    cmd("stats", "per-level residual variance of the training split")
    cmd("train-level", "pretrain a single level").add_argument("--level", type=int, required=True)
    cmd("train-all", "pretrain every level")
    cmd("finetune-e2e", "deterministic end-to-end fine-tuning")
    cmd("finetune-stochastic", "stochastic end-to-end fine-tuning")
    cmd("predict", "test-set prediction and NRMSE against bilinear")
    cmd("nfe-scan", "test NRMSE versus evaluations per level")
    cmd("uq-eval", "ensemble uncertainty metrics").add_argument("--samples", type=int, required=True)
    cmd("ablate", "train and evaluate an ablation variant").add_argument(
        "--variant", required=True, choices=list(VARIANTS) + ["all"])
    cmd("report", "collect results into report.csv")
    return p


def run(args) -> str:
    cfg = load_config(args.config)
    with output_lock(cfg.output_dir):
        if args.command == "gen-data":
            return f"dataset {pl.gen_data(cfg)} written to {Path(cfg.output_dir) / pl.DATA_FILE}"
        data = pl.load_dataset(cfg)
        if args.command == "stats":
            stats = pl.write_stats(cfg, data)
            return "mean residual variance: " + ", ".join(
                f"level {s.level}={s.sigma2.mean():.4g}" for s in stats)
        if args.command == "train-level":
            return f"wrote {pl.train_level(cfg, data, args.level)}"
        if args.command == "train-all":
            return f"wrote {pl.train_all(cfg, data)}"
        if args.command in ("finetune-e2e", "finetune-stochastic"):
            path, sel = pl.finetune_stage(cfg, data, args.command == "finetune-stochastic")
            return f"wrote {path} (epoch {sel['epoch']}, val NRMSE {sel['val_nrmse']:.5g})"
        if args.command == "predict":
            return "test NRMSE: " + pl.summarize(pl.predict(cfg, data))
        if args.command == "nfe-scan":
            rows = pl.nfe_stage(cfg, data)
            return "NRMSE by NFE: " + ", ".join(f"{r['nfe']}={r['nrmse']:.5g}" for r in rows)
        if args.command == "uq-eval":
            rep = pl.uq_stage(cfg, data, args.samples)
            return f"CRPS {rep.crps:.4g}, coverage90 {rep.coverage90:.3f}, cal_err {rep.cal_err:.3f}"
        if args.command == "ablate":
            if args.variant == "all":
                rows = pl.run_ablation_matrix(cfg, data, MATRIX_VARIANTS)
            else:
                rows = [pl.run_variant(cfg, data, args.variant)]
            return "ablation NRMSE: " + pl.summarize(rows)
        if args.command == "report":
            rows = pl.write_report(cfg)
            return f"wrote {Path(cfg.output_dir) / pl.REPORT_FILE} ({len(rows)} rows)"
    raise UsageError(f"unknown command {args.command}")  # pragma: no cover


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        configure_threads()
        print(f"{args.command}: {run(args)}")
        return 0
    except (UsageError, ConfigError) as exc:
        print(f"mffm: usage error: {exc}", file=sys.stderr)
        return 2
    except (pl.PipelineError, ContainerFormatError, OSError, RuntimeError, ValueError) as exc:
        print(f"mffm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
