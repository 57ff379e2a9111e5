"""Command-line harness: dataset generation, single runs, comparisons and sweeps.

Every command writes ``config.echo.json`` with the resolved configuration and
an argv that reproduces the invocation. Exit codes: 0 success, 2 usage
error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controller import SnapshotError
from .graph import (
    DatasetBundle,
    DatasetError,
    GraphError,
    build_csr,
    gen_planted_features,
    gen_preferential_attachment,
    gen_sbm,
    load_dataset,
    random_splits,
    read_edge_list,
    save_dataset,
)
from .model import ModelError
from .sampler import SamplingError
from .trainer import (
    DEFAULT_SWEEP_CELLS,
    Comparison,
    ComparisonRow,
    RunReport,
    SweepCell,
    TrainConfig,
    Trainer,
    TrainingError,
    compare,
    sensitivity_sweep,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

CONVERGENCE_BASE = ["epoch", "cum_ms", "avg_loss", "val_f1"]
SUMMARY_HEADER = [
    "policy",
    "seed",
    "epoch_ms_median",
    "total_ms",
    "best_val_f1",
    "test_f1",
    "time_to_target_ms",
]
SWEEP_HEADER = ["delta_f", "epsilon", "total_ms", "f1"]

DESK_HIDDEN = 64
FULL_SCALE_HIDDEN = 256


@dataclass
class CliInvocation:
    subcommand: str
    out: Path
    dataset: Path | None = None
    config: TrainConfig | None = None
    options: dict = field(default_factory=dict)


# ======================================================================================
# Argument parsing
# ======================================================================================


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _probability(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {value}")
    return value


def _list_of(kind):
    def parse(text: str) -> list:
        try:
            return [kind(part) for part in text.split(",") if part.strip()]
        except argparse.ArgumentTypeError:
            raise
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None

    return parse


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", type=Path, required=True, help="dataset directory (see gen-data)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--policy", choices=("dafos", "fixed"), default="dafos")
    p.add_argument("--fanouts", type=_list_of(_positive_int), default=[10, 15],
                   help="initial per-layer fanouts, layer 1 first")
    p.add_argument("--delta-f", type=_positive_int, default=5)
    p.add_argument("--epsilon", type=_positive_float, default=0.01)
    p.add_argument("--delta", type=_positive_float, default=1e-2, help="early-stop F1 gain threshold")
    p.add_argument("--window", type=_positive_int, default=200, help="early-stop window in mini-batches")
    p.add_argument("--warmup-epochs", type=_non_negative_int, default=3)
    p.add_argument("--batch-size", type=_positive_int, default=1024)
    p.add_argument("--max-epochs", type=_positive_int, default=300)
    p.add_argument("--hidden-dim", type=_positive_int, default=None,
                   help=f"default {DESK_HIDDEN}, or {FULL_SCALE_HIDDEN} with --paper-scale")
    p.add_argument("--paper-scale", action="store_true")
    p.add_argument("--lr", type=_positive_float, default=0.01)
    p.add_argument("--aggregator", choices=("mean", "sum"), default="mean")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--seed", type=_non_negative_int, default=0, help="overridden by $DAFOS_SEED")
    p.add_argument("--eval-cap", type=_positive_int, default=2048)
    p.add_argument("--no-self-loop", action="store_true")
    p.add_argument("--fanout-cap", type=_positive_int, default=None)
    p.add_argument("--sampler-workers", type=_non_negative_int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dafos",
        description="Adaptive-fanout mini-batch GCN training and benchmarking.",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="subcommand", metavar="{gen-data,train,compare,sweep}")

    gen = sub.add_parser("gen-data", help="write a dataset directory", allow_abbrev=False)
    gen.add_argument("--kind", choices=("sbm", "pa", "edgelist"), required=True)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--nodes", type=_positive_int, default=2000)
    gen.add_argument("--blocks", type=_positive_int, default=4)
    gen.add_argument("--p-intra", type=_probability, default=0.02)
    gen.add_argument("--p-inter", type=_probability, default=0.002)
    gen.add_argument("--m", type=_positive_int, default=3, help="edges per arrival (pa)")
    gen.add_argument("--homophily", type=_probability, default=0.7, help="same-block draw probability (pa)")
    gen.add_argument("--feat-dim", type=_positive_int, default=16)
    gen.add_argument("--noise-sigma", type=float, default=1.0)
    gen.add_argument("--split", type=_list_of(float), default=[0.6, 0.2, 0.2])
    gen.add_argument("--seed", type=_non_negative_int, default=0)
    gen.add_argument("--edges", type=Path, help="edge list with arbitrary node tokens (edgelist)")
    gen.add_argument("--labels", type=Path, help="'<token> <class-id>' lines (edgelist)")
    gen.add_argument("--directed", action="store_true", help="do not symmetrize the edge list")

    train = sub.add_parser("train", help="one training run", allow_abbrev=False)
    _add_train_flags(train)
    train.add_argument("--checkpoint", type=Path, default=None, help="write a resumable checkpoint each epoch")
    train.add_argument("--resume", type=Path, default=None, help="continue from a checkpoint")

    cmp_ = sub.add_parser("compare", help="DAFOS vs fixed-fanout baseline over seeds", allow_abbrev=False)
    _add_train_flags(cmp_)
    cmp_.add_argument("--baseline-fanouts", type=_list_of(_positive_int), default=[25, 25])
    cmp_.add_argument("--seeds", type=_list_of(_non_negative_int), default=[0, 1, 2, 3, 4])
    cmp_.add_argument("--target-f1", type=_probability, default=0.85)

    sweep = sub.add_parser("sweep", help="delta_f x epsilon sensitivity grid", allow_abbrev=False)
    _add_train_flags(sweep)
    sweep.add_argument("--delta-f-values", type=_list_of(_positive_int), default=None)
    sweep.add_argument("--epsilon-values", type=_list_of(_positive_float), default=None)
    return parser


def _config_from(ns: argparse.Namespace) -> TrainConfig:
    hidden = ns.hidden_dim or (FULL_SCALE_HIDDEN if ns.paper_scale else DESK_HIDDEN)
    seed = ns.seed
    env_seed = os.environ.get("DAFOS_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise argparse.ArgumentTypeError(f"DAFOS_SEED must be an integer, got {env_seed!r}") from None
    return TrainConfig(
        policy=ns.policy,
        initial_fanouts=tuple(ns.fanouts),
        delta_f=ns.delta_f,
        epsilon=ns.epsilon,
        delta=ns.delta,
        window=ns.window,
        warmup_epochs=ns.warmup_epochs,
        batch_size=ns.batch_size,
        max_epochs=ns.max_epochs,
        hidden_dim=hidden,
        learning_rate=ns.lr,
        aggregator=ns.aggregator,
        seed=seed,
        eval_subsample_cap=ns.eval_cap,
        optimizer=ns.optimizer,
        self_loop=not ns.no_self_loop,
        fanout_cap=ns.fanout_cap,
        sampler_workers=ns.sampler_workers,
    )


def parse_args(argv: Sequence[str]) -> CliInvocation:
    """Parse argv. Usage problems raise SystemExit(2) after printing usage."""
    parser = build_parser()
    argv = list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        parser.exit(EXIT_USAGE, "dafos: error: a subcommand is required\n")
    ns = parser.parse_args(argv)
    if ns.subcommand is None:
        parser.error("a subcommand is required")

    if ns.subcommand == "gen-data":
        if ns.kind == "edgelist" and (ns.edges is None or ns.labels is None):
            parser.error("gen-data --kind edgelist needs --edges and --labels")
        if len(ns.split) != 3 or abs(sum(ns.split) - 1.0) > 1e-9 or min(ns.split) < 0:
            parser.error(f"--split must be three non-negative fractions summing to 1, got {ns.split}")
        if ns.noise_sigma < 0:
            parser.error("--noise-sigma must be >= 0")
        options = {k: v for k, v in vars(ns).items() if k not in ("subcommand", "out")}
        return CliInvocation("gen-data", out=ns.out, options=options)

    try:
        config = _config_from(ns)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        parser.error(str(exc))
    if ns.subcommand == "compare" and len(ns.baseline_fanouts) != len(ns.fanouts):
        parser.error("--baseline-fanouts must have one entry per layer, like --fanouts")
    if ns.subcommand == "compare" and not ns.seeds:
        parser.error("--seeds must list at least one seed")
    if ns.subcommand == "sweep" and (ns.delta_f_values is None) != (ns.epsilon_values is None):
        parser.error("give both --delta-f-values and --epsilon-values, or neither for the default grid")

    extra_keys = {
        "train": ("checkpoint", "resume"),
        "compare": ("baseline_fanouts", "seeds", "target_f1"),
        "sweep": ("delta_f_values", "epsilon_values"),
    }[ns.subcommand]
    options = {k: getattr(ns, k) for k in extra_keys}
    return CliInvocation(ns.subcommand, out=ns.out, dataset=ns.dataset, config=config, options=options)


def _join(values) -> str:
    return ",".join(str(v) for v in values)


def invocation_to_argv(inv: CliInvocation) -> list[str]:
    """Canonical argv that :func:`parse_args` maps back to ``inv``."""
    argv = [inv.subcommand]
    if inv.subcommand == "gen-data":
        o = inv.options
        argv += ["--kind", o["kind"], "--out", str(inv.out)]
        for key in ("nodes", "blocks", "p_intra", "p_inter", "m", "homophily", "feat_dim", "noise_sigma", "seed"):
            argv += ["--" + key.replace("_", "-"), repr(o[key]) if isinstance(o[key], float) else str(o[key])]
        argv += ["--split", _join(repr(x) for x in o["split"])]
        for key in ("edges", "labels"):
            if o.get(key) is not None:
                argv += ["--" + key, str(o[key])]
        if o.get("directed"):
            argv.append("--directed")
        return argv

    c = inv.config
    argv += [
        "--dataset", str(inv.dataset),
        "--out", str(inv.out),
        "--policy", c.policy,
        "--fanouts", _join(c.initial_fanouts),
        "--delta-f", str(c.delta_f),
        "--epsilon", repr(c.epsilon),
        "--delta", repr(c.delta),
        "--window", str(c.window),
        "--warmup-epochs", str(c.warmup_epochs),
        "--batch-size", str(c.batch_size),
        "--max-epochs", str(c.max_epochs),
        "--hidden-dim", str(c.hidden_dim),
        "--lr", repr(c.learning_rate),
        "--aggregator", c.aggregator,
        "--optimizer", c.optimizer,
        "--seed", str(c.seed),
        "--eval-cap", str(c.eval_subsample_cap),
        "--sampler-workers", str(c.sampler_workers),
    ]
    if not c.self_loop:
        argv.append("--no-self-loop")
    if c.fanout_cap is not None:
        argv += ["--fanout-cap", str(c.fanout_cap)]
    o = inv.options
    if inv.subcommand == "train":
        for key in ("checkpoint", "resume"):
            if o.get(key) is not None:
                argv += ["--" + key, str(o[key])]
    elif inv.subcommand == "compare":
        argv += [
            "--baseline-fanouts", _join(o["baseline_fanouts"]),
            "--seeds", _join(o["seeds"]),
            "--target-f1", repr(o["target_f1"]),
        ]
    elif inv.subcommand == "sweep" and o.get("delta_f_values") is not None:
        argv += [
            "--delta-f-values", _join(o["delta_f_values"]),
            "--epsilon-values", _join(repr(e) for e in o["epsilon_values"]),
        ]
    return argv


# ======================================================================================
# Report emission
# ======================================================================================


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([[_fmt(v) for v in row] for row in rows])


def write_convergence(report: RunReport, path: Path) -> None:
    """Per-epoch curve; ``cum_ms`` is cumulative training time with evaluation excluded."""
    layers = len(report.config["initial_fanouts"])
    header = CONVERGENCE_BASE + [f"fanout_l{i + 1}" for i in range(layers)]
    rows = [
        [e.epoch, e.cumulative_train_millis, e.avg_train_loss, e.val_f1, *e.fanouts]
        for e in report.epochs
    ]
    _write_csv(path, header, rows)


def _summary_row(r: ComparisonRow) -> list:
    return [r.policy, r.seed, r.epoch_ms_median, r.total_ms, r.best_val_f1, r.test_f1, r.time_to_target_ms]


def write_summary(aggregates: list[ComparisonRow], rows: list[ComparisonRow], path: Path) -> None:
    _write_csv(path, SUMMARY_HEADER, [_summary_row(r) for r in aggregates + rows])


def write_sweep(cells: list[SweepCell], path: Path) -> None:
    _write_csv(path, SWEEP_HEADER, [[c.delta_f, c.epsilon, c.total_ms, c.f1] for c in cells])


def _write_report_json(report: RunReport, path: Path) -> None:
    path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def emit_reports(
    out_dir: Path,
    report: RunReport | None = None,
    comparison: Comparison | None = None,
    sweep: list[SweepCell] | None = None,
    target_f1: float = 0.85,
) -> list[Path]:
    """Write the CSV outputs for whichever results are given; existing files are overwritten."""
    if report is None and comparison is None and not sweep:
        raise ValueError("nothing to emit")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if report is not None:
        write_convergence(report, out_dir / "convergence.csv")
        row = ComparisonRow.from_report(report.config["policy"], report, target_f1)
        write_summary([], [row], out_dir / "summary.csv")
        _write_report_json(report, out_dir / "report.json")
        written += [out_dir / "convergence.csv", out_dir / "summary.csv", out_dir / "report.json"]
    if comparison is not None:
        write_summary(comparison.aggregates, comparison.rows, out_dir / "summary.csv")
        written.append(out_dir / "summary.csv")
        for (label, seed), rep in comparison.reports.items():
            run_dir = out_dir / "runs" / f"{label}_seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            write_convergence(rep, run_dir / "convergence.csv")
            written.append(run_dir / "convergence.csv")
    if sweep:
        write_sweep(sweep, out_dir / "sweep.csv")
        written.append(out_dir / "sweep.csv")
        for cell in sweep:
            run_dir = out_dir / "runs" / f"df{cell.delta_f}_eps{cell.epsilon!r}"
            run_dir.mkdir(parents=True, exist_ok=True)
            write_convergence(cell.report, run_dir / "convergence.csv")
            written.append(run_dir / "convergence.csv")
    return written


def _write_echo(inv: CliInvocation) -> None:
    inv.out.mkdir(parents=True, exist_ok=True)
    echo = {
        "subcommand": inv.subcommand,
        "argv": invocation_to_argv(inv),
        "config": inv.config.to_dict() if inv.config else None,
        "options": {k: (str(v) if isinstance(v, Path) else v) for k, v in inv.options.items()},
    }
    (inv.out / "config.echo.json").write_text(json.dumps(echo, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ======================================================================================
# Commands
# ======================================================================================


def _read_label_file(path: Path, index: dict[str, int], num_nodes: int) -> np.ndarray:
    labels = np.full(num_nodes, -1, dtype=np.int64)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DatasetError(f"{path.name}:{lineno}: expected '<node> <class-id>', got {line!r}")
            if parts[0] not in index:
                continue
            try:
                labels[index[parts[0]]] = int(parts[1])
            except ValueError:
                raise DatasetError(f"{path.name}:{lineno}: non-integer class id {parts[1]!r}") from None
    missing = np.flatnonzero(labels < 0)
    if missing.size:
        raise DatasetError(f"{path.name}: no label for {missing.size} node(s), e.g. {list(index)[missing[0]]!r}")
    return labels


def cmd_gen_data(inv: CliInvocation) -> None:
    o = inv.options
    raw_ids = None
    if o["kind"] == "sbm":
        graph, blocks = gen_sbm(o["nodes"], o["blocks"], o["p_intra"], o["p_inter"], o["seed"])
    elif o["kind"] == "pa":
        graph, blocks = gen_preferential_attachment(
            o["nodes"], o["m"], o["seed"], num_blocks=o["blocks"], homophily=o["homophily"]
        )
    else:
        edges, raw_ids = read_edge_list(o["edges"])
        graph = build_csr(edges, len(raw_ids), symmetrize=not o["directed"])
        blocks = _read_label_file(o["labels"], {r: i for i, r in enumerate(raw_ids)}, len(raw_ids))
    features, labels = gen_planted_features(graph, blocks, o["feat_dim"], o["noise_sigma"], o["seed"] + 1)
    split = random_splits(graph.num_nodes, o["seed"] + 2, o["split"])
    save_dataset(DatasetBundle(graph, features, labels, split, raw_ids), inv.out)


def cmd_train(inv: CliInvocation) -> None:
    dataset = load_dataset(inv.dataset)
    resume = inv.options.get("resume")
    trainer = Trainer.resume(resume, dataset) if resume else Trainer(inv.config, dataset)
    checkpoint = inv.options.get("checkpoint")
    report = trainer.run(checkpoint_every=1 if checkpoint else 0, checkpoint_path=checkpoint)
    emit_reports(inv.out, report=report)


def cmd_compare(inv: CliInvocation) -> None:
    dataset = load_dataset(inv.dataset)
    o = inv.options
    dafos_cfg = inv.config.replace(policy="dafos")
    fixed_cfg = inv.config.replace(policy="fixed", initial_fanouts=tuple(o["baseline_fanouts"]))
    result = compare(dafos_cfg, fixed_cfg, dataset, o["seeds"], target_f1=o["target_f1"])
    emit_reports(inv.out, comparison=result)


def cmd_sweep(inv: CliInvocation) -> None:
    dataset = load_dataset(inv.dataset)
    o = inv.options
    if o["delta_f_values"] is None:
        cells = sensitivity_sweep(inv.config, dataset, cells=DEFAULT_SWEEP_CELLS)
    else:
        cells = sensitivity_sweep(inv.config, dataset, o["delta_f_values"], o["epsilon_values"])
    emit_reports(inv.out, sweep=cells)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "compare": cmd_compare, "sweep": cmd_sweep}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        inv = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        _write_echo(inv)
        COMMANDS[inv.subcommand](inv)
    except (
        DatasetError,
        GraphError,
        ModelError,
        SamplingError,
        SnapshotError,
        TrainingError,
        OSError,
        ValueError,
    ) as exc:
        print(f"dafos: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
