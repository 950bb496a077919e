# Copyright (c) 2024 The DetVS Authors
#
# SPDX-License-Identifier: Apache-2.0

"""DetVS command line interface.

Usage: detvs [options] COMMAND [command options]

Commands: gen-data, train, eval, servo, gcw-table, degenerate.

Exit codes: 0 on success, -22 for usage and configuration errors,
1 when a run aborts.

Unit tests and examples: tests/test_detvs_cli.py
"""

from typing import (
    cast,
    Callable,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
)

import argparse
import contextlib
import logging
import os
import sys

from rich.console import Console
from rich.logging import RichHandler
from rich.progress import Progress

from detvs import __version__
from detvs.config import DetVSConfig
from detvs.dataset import DatasetFile
from detvs.errors import DetVSError
from detvs.harness import (
    ExperimentConfig,
    cmd_degenerate,
    cmd_eval,
    cmd_gcw_table,
    cmd_gen_data,
    cmd_servo,
    cmd_train,
)
from detvs.model import VARIANTS, CheckpointFile
from detvs.rich.theme import DetVSTheme
from detvs.rich.views import (
    HistogramView,
    ResultTableView,
    ServoSummaryView,
    TrainingView,
    fmt_rate,
    mk_console,
)


_LOG = logging.getLogger(__name__)

EXIT_USAGE = -22
EXIT_ABORT = 1


class DetVSCliArgv:
    """Command line arguments parser."""

    _parser: argparse.ArgumentParser
    _argv: argparse.Namespace

    def __init__(self, args: Optional[Sequence[str]] = None) -> None:
        self._parser = argparse.ArgumentParser(
            prog="detvs",
            description="distance estimation transformer visual servoing",
            allow_abbrev=False,
        )
        self._parser.add_argument(
            "--version", action="version", version=f"%(prog)s {__version__}"
        )

        grp_cfg = self._parser.add_argument_group("configuration")
        grp_cfg.add_argument(
            "--config",
            help="load additional configuration file",
            metavar="FILE",
        )
        grp_cfg.add_argument(
            "--seed", help="override the master seed", type=int, metavar="N"
        )
        grp_cfg.add_argument(
            "--run-dir", help="override the run directory", metavar="DIR"
        )
        grp_cfg.add_argument(
            "--workers", help="override worker processes", type=int, metavar="N"
        )
        grp_cfg.add_argument(
            "-u",
            "--user-files",
            help="initialize per-user configuration files and exit",
            action="store_true",
        )

        grp_out = self._parser.add_argument_group("output")
        grp_verb = grp_out.add_mutually_exclusive_group()
        grp_verb.add_argument(
            "-v", "--verbose", help="debug messages", action="store_true"
        )
        grp_verb.add_argument(
            "-q",
            "--quiet",
            help="warnings and errors only, no progress",
            action="store_true",
        )

        sub = self._parser.add_subparsers(dest="command", metavar="COMMAND")
        sub.add_parser("gen-data", help="generate the dataset")

        p_train = sub.add_parser("train", help="train a model variant")
        p_train.add_argument(
            "--variant", choices=VARIANTS, default="mph", help="model variant"
        )

        p_eval = sub.add_parser("eval", help="servo trials, result table")
        p_eval.add_argument(
            "--variant",
            choices=VARIANTS,
            action="append",
            help="evaluate the run directory checkpoint (may be repeated)",
        )
        p_eval.add_argument(
            "--trials", type=int, metavar="N", help="trials per tier"
        )
        p_eval.add_argument(
            "--oracle", action="store_true", help="add the oracle estimator"
        )
        p_eval.add_argument(
            "checkpoints", nargs="*", metavar="CKPT", help="checkpoint files"
        )

        p_servo = sub.add_parser("servo", help="servo trials with traces")
        grp_est = p_servo.add_mutually_exclusive_group(required=True)
        grp_est.add_argument(
            "--oracle", action="store_true", help="ground truth estimator"
        )
        grp_est.add_argument(
            "--noisy-oracle",
            action="store_true",
            help="ground truth plus Gaussian noise (servo.noise_sigma)",
        )
        grp_est.add_argument(
            "--checkpoint", metavar="CKPT", help="trained model checkpoint"
        )
        p_servo.add_argument("--trials", type=int, metavar="N")
        p_servo.add_argument("--tier", metavar="NAME", help="tolerance tier")

        sub.add_parser("gcw-table", help="GCW samples of the head bank")

        p_deg = sub.add_parser("degenerate", help="degenerate geometry runs")
        p_deg.add_argument("checkpoint", metavar="CKPT")
        p_deg.add_argument("--instances", type=int, metavar="N")

        self._argv = self._parser.parse_args(args)
        if not (self._argv.command or self._argv.user_files):
            self._parser.error("missing command")

    @property
    def command(self) -> str:
        """Subcommand name."""
        return cast(str, self._argv.command)

    @property
    def args(self) -> argparse.Namespace:
        """Parsed arguments."""
        return self._argv

    @property
    def user_files(self) -> bool:
        """Initialize user files and exit."""
        return bool(self._argv.user_files)

    @property
    def config(self) -> Optional[str]:
        """Additional configuration file."""
        return cast(Optional[str], self._argv.config)

    @property
    def log_level(self) -> int:
        """Root logger level."""
        if self._argv.verbose:
            return logging.DEBUG
        if self._argv.quiet:
            return logging.WARNING
        return logging.INFO

    @property
    def quiet(self) -> bool:
        """No progress bars."""
        return bool(self._argv.quiet)

    def overrides(self) -> List[Tuple[str, str]]:
        """Configuration options set on the command line."""
        opts: List[Tuple[str, str]] = []
        if self._argv.seed is not None:
            opts.append(("detvs.seed", str(self._argv.seed)))
        if self._argv.run_dir:
            opts.append(("detvs.run_dir", self._argv.run_dir))
        if self._argv.workers is not None:
            opts.append(("detvs.workers", str(self._argv.workers)))
        return opts


def _init_logging(level: int, console: Console) -> None:
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    root.addHandler(
        RichHandler(console=console, show_path=False, rich_tracebacks=False)
    )
    root.setLevel(level)


@contextlib.contextmanager
def _progress(
    description: str, total: int, quiet: bool, console: Console
) -> Iterator[Callable[[int], None]]:
    if quiet or total <= 0:
        yield lambda _: None
        return
    with Progress(console=console, transient=True) as progress:
        task = progress.add_task(description, total=total)
        yield lambda n: progress.update(task, completed=n)


def _load_config(argv: DetVSCliArgv) -> ExperimentConfig:
    cfg = DetVSConfig()
    if argv.config:
        cfg.load_ini_file(argv.config)
    for option, value in argv.overrides():
        cfg.set(option, value)
    return ExperimentConfig.from_config(cfg)


def _run_command(
    argv: DetVSCliArgv, xcfg: ExperimentConfig, console: Console
) -> int:
    args = argv.args
    quiet = argv.quiet

    if argv.command == "gen-data":
        with _progress("groups", xcfg.groups, quiet, console) as cb:
            gen = cmd_gen_data(xcfg, cb)
        console.print(HistogramView(xcfg.bank("mph"), gen.histogram))
        console.print(
            f"{gen.samples} samples: {gen.path}", style=DetVSTheme.STYLE_PATH
        )
        return 0

    if argv.command == "train":
        with _progress("epochs", xcfg.train.epochs, quiet, console) as cb:
            res = cmd_train(xcfg, args.variant, cb)
        console.print(TrainingView(res.history, res.variant))
        console.print(
            f"checkpoint: {res.checkpoint}", style=DetVSTheme.STYLE_PATH
        )
        return 0

    if argv.command == "eval":
        checkpoints = list(args.checkpoints)
        for variant in args.variant or ():
            checkpoints.append(xcfg.path("train.checkpoint", variant=variant))
        n_trials = xcfg.trials if args.trials is None else args.trials
        n_estimators = len(checkpoints) + int(args.oracle)
        total = n_trials * n_estimators * len(xcfg.tiers)
        with _progress("trials", total, quiet, console) as cb:
            table = cmd_eval(xcfg, checkpoints, n_trials, args.oracle, cb)
        console.print(ResultTableView(table))
        return 0

    if argv.command == "servo":
        if args.oracle:
            name = "oracle"
        elif args.noisy_oracle:
            name = "noisy-oracle"
        else:
            name = "model"
        n_trials = xcfg.trials if args.trials is None else args.trials
        with _progress("trials", n_trials, quiet, console) as cb:
            run = cmd_servo(
                xcfg, name, args.checkpoint, n_trials, args.tier, cb
            )
        console.print(
            ServoSummaryView(run.results, run.estimator, run.tolerance)
        )
        if run.traces:
            console.print(
                f"traces: {os.path.dirname(run.traces[0])}",
                style=DetVSTheme.STYLE_PATH,
            )
        return 0

    if argv.command == "gcw-table":
        path = cmd_gcw_table(xcfg)
        console.print(f"GCW table: {path}", style=DetVSTheme.STYLE_PATH)
        return 0

    if argv.command == "degenerate":
        deg = cmd_degenerate(xcfg, args.checkpoint, args.instances)
        console.print(
            f"degenerate geometry: {deg.successes}/{deg.instances} "
            f"({fmt_rate(deg.success_rate)}) within "
            f"{deg.tolerance * 1e3:g} mm"
        )
        return 0

    raise ValueError(f"unknown command: {argv.command}")


def _print_error(console: Console, msg: str) -> None:
    console.print(msg, style=DetVSTheme.STYLE_ERROR, markup=False)


def run(args: Optional[Sequence[str]] = None) -> None:
    """Parse the command line, run a subcommand and exit."""
    try:
        argv = DetVSCliArgv(args)
    except SystemExit as e:
        # argparse exits with 2 on usage errors.
        sys.exit(EXIT_USAGE if e.code == 2 else e.code)

    console = mk_console()
    err_console = mk_console(stderr=True)
    _init_logging(argv.log_level, err_console)

    if argv.user_files:
        sys.exit(DetVSConfig.getinstance().init_user_files())

    try:
        xcfg = _load_config(argv)
    except DetVSConfig.Error as e:
        _print_error(err_console, f"configuration error: {e}")
        sys.exit(EXIT_USAGE)

    try:
        ret = _run_command(argv, xcfg, console)
    except DetVSConfig.Error as e:
        _print_error(err_console, f"configuration error: {e}")
        sys.exit(EXIT_USAGE)
    except ValueError as e:
        _print_error(err_console, f"{argv.command}: {e}")
        sys.exit(EXIT_USAGE)
    except DetVSError as e:
        _print_error(err_console, f"{argv.command}: {e.msg}")
        sys.exit(EXIT_ABORT)
    except (DatasetFile.Error, CheckpointFile.Error, OSError) as e:
        _print_error(err_console, f"{argv.command}: {e}")
        sys.exit(EXIT_ABORT)
    sys.exit(ret)


if __name__ == "__main__":
    run()
