"""The `orthofcl` command line.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on runtime,
numerical or file format errors.
"""

import argparse
import json
import logging
import os
import statistics
import sys
from pathlib import Path
from typing import Sequence

from orthofcl import __VERSION__
from orthofcl.checkpoint import checkpoint_io
from orthofcl.config import (
    PRESETS,
    THREADS_ENV,
    ExperimentConfig,
    load_config,
    preset,
)
from orthofcl.data import build_schedule
from orthofcl.errors import ConfigError, OrthoFCLError
from orthofcl.federated import (
    ExperimentReport,
    load_dataset,
    run_centralized,
    run_experiment,
)
from orthofcl.metrics import AccuracyMatrix, faa
from orthofcl.model import gradcheck_instance
from orthofcl.partition import dirichlet_partition, mean_gini
from orthofcl.seeding import Stream, derive_seed

logger = logging.getLogger(__name__)

#: The largest finite difference error `gradcheck` accepts.
GRADCHECK_TOL = 1e-4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma separated seed list: {text!r}")


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--config", type=Path, help="INI config file")
    source.add_argument("--preset", choices=sorted(PRESETS), help="named preset")
    parser.add_argument("--seed", type=int, help="experiment seed")
    parser.add_argument("--beta", type=float, help="Dirichlet concentration")


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser.

    Returns
    -------
    argparse.ArgumentParser
        The parser with the run, partition, eval, gradcheck and version
        subcommands.
    """

    parser = _Parser(
        prog="orthofcl",
        description="Federated class-incremental learning with orthogonal "
        "low-rank adapters.",
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logs")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    commands = parser.add_subparsers(
        dest="command", required=True, parser_class=_Parser
    )

    run = commands.add_parser("run", help="run an experiment")
    _add_config_args(run)
    run.add_argument("--seeds", type=_seed_list, help="comma separated seeds")
    run.add_argument("--rank", type=int, help="adapter rank")
    run.add_argument("--output", type=Path, default=Path("."), help="output directory")
    run.add_argument("--checkpoint", type=Path, help="write the final state here")
    run.add_argument(
        "--centralized", action="store_true", help="train one sequential learner"
    )
    run.add_argument("--random-a", action="store_true", help="random adapter bases")
    run.add_argument(
        "--no-memory-update", action="store_true", help="never grow the memories"
    )
    run.add_argument(
        "--weighted-a-avg", action="store_true", help="n_k weighted basis average"
    )
    run.add_argument("--threads", type=int, help=f"worker threads (${THREADS_ENV})")

    part = commands.add_parser("partition", help="print per-client class histograms")
    _add_config_args(part)
    part.add_argument("--clients", type=int, help="number of clients")

    ev = commands.add_parser("eval", help="final average accuracy of a saved run")
    target = ev.add_mutually_exclusive_group(required=True)
    target.add_argument("csv", nargs="?", type=Path, help="accuracy matrix CSV")
    target.add_argument("--checkpoint", type=Path, help="checkpoint file")

    grad = commands.add_parser("gradcheck", help="finite difference gradient check")
    grad.add_argument("--dim", type=int, default=16)
    grad.add_argument("--layers", type=int, default=2)
    grad.add_argument("--rank", type=int, default=2)
    grad.add_argument("--tokens", type=int, default=4)
    grad.add_argument("--classes", type=int, default=3)
    grad.add_argument("--seed", type=int, default=0)

    commands.add_parser("version", help="print the version")

    return parser


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is not None:
        config = load_config(args.config)
    elif args.preset is not None:
        config = preset(args.preset)
    else:
        config = ExperimentConfig()

    changes: dict = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.beta is not None:
        changes["beta"] = args.beta
    if getattr(args, "rank", None) is not None:
        changes["memory__rank"] = args.rank
    if getattr(args, "clients", None) is not None:
        changes["round__num_clients"] = args.clients
    for flag in ("random_a", "no_memory_update", "weighted_a_avg"):
        if getattr(args, flag, False):
            changes[flag] = True

    return config.replace(**changes) if changes else config


def resolve_threads(requested: int | None) -> int:
    """The worker thread count.

    Parameters
    ----------
    requested : int | None
        The `--threads` value.

    Returns
    -------
    int
        `requested`, else the `DOLFIN_THREADS` variable, else 1.

    Raises
    ------
    ConfigError
        If the count is not a positive integer.
    """

    if requested is None:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            requested = int(raw)
        except ValueError:
            raise ConfigError(f"${THREADS_ENV} is not an integer: {raw!r}") from None

    if requested < 1:
        raise ConfigError("The thread count should be positive.")

    return requested


def write_report(report: ExperimentReport, output: Path, stem: str = "report") -> Path:
    """Write a report, its accuracy CSV and its timings sidecar.

    Parameters
    ----------
    report : ExperimentReport
        The report.
    output : Path
        The output directory, created if missing.
    stem : str, optional
        The report file stem, by default "report".

    Returns
    -------
    Path
        The report file.
    """

    output.mkdir(parents=True, exist_ok=True)
    path = output / f"{stem}.json"
    path.write_text(report.to_json())
    (output / f"{stem}.timings.json").write_text(
        json.dumps(report.timings, indent=2, sort_keys=True) + "\n"
    )
    csv_name = "accuracy.csv" if stem == "report" else f"{stem}.accuracy.csv"
    (output / csv_name).write_text(report.accuracy.to_csv())

    return path


def _cmd_run(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    threads = resolve_threads(args.threads)
    seeds = args.seeds or [config.seed]

    results = []
    for seed in seeds:
        cfg = config.replace(seed=seed)
        if args.centralized:
            report = run_centralized(cfg)
        else:
            report = run_experiment(cfg, threads)

        stem = "report" if len(seeds) == 1 else f"report-seed{seed}"
        path = write_report(report, args.output, stem)
        results.append(report.faa)
        print(f"seed {seed}: FAA {format(report.faa, '.10g')} ({path})")

        if args.checkpoint is not None:
            target = args.checkpoint
            if len(seeds) > 1:
                target = target.with_name(f"{target.stem}-seed{seed}{target.suffix}")
            checkpoint_io(
                target,
                "save",
                model=report.model,
                memories={c.client_id: c.memories for c in report.clients},
            )

    if len(results) > 1:
        print(
            f"mean FAA {format(statistics.fmean(results), '.10g')} "
            f"std {format(statistics.stdev(results), '.10g')}"
        )

    return 0


def _cmd_partition(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    dataset = load_dataset(config)
    schedule = build_schedule(
        dataset, config.num_tasks, derive_seed(config.seed, Stream.SCHEDULE)
    )
    _, labels = dataset.train()
    plan = dirichlet_partition(
        labels,
        config.round.num_clients,
        config.beta,
        derive_seed(config.seed, Stream.PARTITION),
        tasks=schedule.tasks,
    )

    print(f"beta {config.beta} seed {config.seed}")
    for t in range(plan.num_tasks):
        classes, counts = plan.histograms(labels, t)
        print(f"task {t}: classes {' '.join(str(int(c)) for c in classes)}")
        for k, row in enumerate(counts):
            print(f"  client {k}: {' '.join(str(int(n)) for n in row)}")
        print(f"  mean gini {mean_gini(plan, labels, t):.4f}")

    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    if args.checkpoint is not None:
        checkpoint = checkpoint_io(args.checkpoint, "load")
        assert checkpoint is not None
        print(f"task index {checkpoint.model.task_index}")
        for client_id, bank in sorted(checkpoint.memories.items()):
            dims = " ".join(
                f"{layer}.{p.value}={bank[(layer, p)].memory_dim}"
                for layer, p in bank.keys()
            )
            print(f"client {client_id}: {dims}")
        return 0

    matrix = AccuracyMatrix.load(args.csv)
    print(format(faa(matrix), ".10g"))
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    err = gradcheck_instance(
        dim=args.dim,
        layers=args.layers,
        rank=args.rank,
        tokens=args.tokens,
        classes=args.classes,
        seed=args.seed,
    )
    print(f"max relative error {err:.3e}")

    return 0 if err <= GRADCHECK_TOL else 2


_COMMANDS = {
    "run": _cmd_run,
    "partition": _cmd_partition,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
}


def run_cli(argv: Sequence[str] | None = None) -> int:
    """Run the command line.

    Parameters
    ----------
    argv : Sequence[str] | None, optional
        The arguments, by default None, which means `sys.argv[1:]`.

    Returns
    -------
    int
        The exit code.
    """

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)

    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING

    logging.basicConfig(
        level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )

    if args.command == "version":
        print(__VERSION__)
        return 0

    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        logger.error("%s", exc)
        return 1
    except (OrthoFCLError, OSError) as exc:
        logger.error("%s", exc)
        return 2


def main() -> None:
    sys.exit(run_cli())
