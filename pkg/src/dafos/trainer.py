"""Epoch loop, run reports, policy comparisons and sensitivity sweeps.

Two policies share one loop:

* ``dafos``: degree-ordered seeds during warmup, fanouts grown on loss
  plateaus at epoch boundaries.
* ``fixed``: shuffled seeds and static fanouts.

Both use the F1-window early stopper. Every random draw comes from a
substream keyed by (seed, purpose, epoch, batch, layer), so a run is
reproducible, resumable from an epoch checkpoint, and unaffected by
concurrent block sampling.
"""

from __future__ import annotations

import dataclasses
import statistics
import time
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controller import EarlyStopper, FanoutController
from .graph import DatasetBundle, node_scores
from .model import (
    AdamState,
    GcnParams,
    backward,
    cross_entropy,
    forward,
    init_params,
    load_checkpoint,
    micro_f1,
    optimizer_step,
    predict,
    save_checkpoint,
    sgd_step,
)
from .rng import substream
from .sampler import Block, SeedOrderPolicy, build_blocks, full_blocks, make_batches, order_seeds

__all__ = [
    "TrainingError",
    "TrainConfig",
    "EpochStats",
    "RunReport",
    "Trainer",
    "run",
    "compare",
    "ComparisonRow",
    "Comparison",
    "SweepCell",
    "sensitivity_sweep",
    "DEFAULT_SWEEP_CELLS",
    "replay_fanouts",
]

STOP_EARLY = "early-stop"
STOP_MAX_EPOCHS = "max-epochs"

# (delta_f, epsilon) cells of the default sensitivity grid
DEFAULT_SWEEP_CELLS: tuple[tuple[int, float], ...] = (
    (5, 0.0001),
    (5, 0.001),
    (5, 0.002),
    (5, 0.005),
    (3, 0.01),
    (5, 0.01),
    (7, 0.01),
    (9, 0.01),
)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    policy: str = "dafos"
    initial_fanouts: tuple[int, ...] = (10, 15)
    delta_f: int = 5
    epsilon: float = 0.01
    delta: float = 1e-2
    window: int = 200
    warmup_epochs: int = 3
    batch_size: int = 1024
    max_epochs: int = 300
    hidden_dim: int = 64
    learning_rate: float = 0.01
    aggregator: str = "mean"
    seed: int = 0
    eval_subsample_cap: int = 2048
    optimizer: str = "adam"
    self_loop: bool = True
    fanout_cap: int | None = None
    sampler_workers: int = 0

    def __post_init__(self) -> None:
        self.initial_fanouts = tuple(int(f) for f in self.initial_fanouts)
        self.validate()

    def validate(self) -> None:
        if self.policy not in ("dafos", "fixed"):
            raise ValueError(f"policy must be 'dafos' or 'fixed', got {self.policy!r}")
        if self.aggregator not in ("mean", "sum"):
            raise ValueError(f"aggregator must be 'mean' or 'sum', got {self.aggregator!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not self.initial_fanouts or min(self.initial_fanouts) < 1:
            raise ValueError(f"initial_fanouts must be positive, got {list(self.initial_fanouts)}")
        for name in ("delta_f", "window", "batch_size", "max_epochs", "hidden_dim", "eval_subsample_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("epsilon", "delta", "learning_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.warmup_epochs < 0 or self.seed < 0 or self.sampler_workers < 0:
            raise ValueError("warmup_epochs, seed and sampler_workers must be non-negative")

    @property
    def num_layers(self) -> int:
        return len(self.initial_fanouts)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["initial_fanouts"] = list(self.initial_fanouts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


@dataclass
class EpochStats:
    """
    One epoch's record. ``*_millis`` fields are wall-clock; ``eval_millis``
    is the evaluation share of ``wall_millis`` and ``cumulative_train_millis``
    sums the remainder.
    """

    epoch: int
    avg_train_loss: float
    val_f1: float
    fanouts: tuple[int, ...]
    minibatches_run: int
    wall_millis: float
    eval_millis: float
    cumulative_millis: float
    cumulative_train_millis: float
    batch_losses: list[float] = field(default_factory=list)
    batch_f1: list[float] = field(default_factory=list)

    @property
    def train_millis(self) -> float:
        return self.wall_millis - self.eval_millis

    def to_dict(self, timing: bool = True) -> dict:
        d = dataclasses.asdict(self)
        d["fanouts"] = list(self.fanouts)
        if not timing:
            for key in ("wall_millis", "eval_millis", "cumulative_millis", "cumulative_train_millis"):
                del d[key]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EpochStats:
        d = dict(d)
        d["fanouts"] = tuple(d["fanouts"])
        return cls(**d)


@dataclass
class RunReport:
    config: dict
    epochs: list[EpochStats]
    stop_reason: str
    best_val_f1: float
    best_epoch: int
    test_f1: float

    @property
    def total_millis(self) -> float:
        return self.epochs[-1].cumulative_millis if self.epochs else 0.0

    @property
    def total_train_millis(self) -> float:
        return self.epochs[-1].cumulative_train_millis if self.epochs else 0.0

    def epoch_train_millis_median(self) -> float:
        return statistics.median(e.train_millis for e in self.epochs) if self.epochs else 0.0

    def time_to_target(self, target_f1: float) -> float | None:
        """Training time (evaluation excluded) until validation F1 first reaches ``target_f1``."""
        for e in self.epochs:
            if e.val_f1 >= target_f1:
                return e.cumulative_train_millis
        return None

    def to_dict(self, timing: bool = True) -> dict:
        return {
            "config": self.config,
            "epochs": [e.to_dict(timing) for e in self.epochs],
            "stop_reason": self.stop_reason,
            "best_val_f1": self.best_val_f1,
            "best_epoch": self.best_epoch,
            "test_f1": self.test_f1,
        }


def replay_fanouts(
    initial_fanouts: Sequence[int],
    losses: Iterable[float],
    delta_f: int,
    epsilon: float,
) -> list[tuple[int, ...]]:
    """Fanouts in effect at each epoch given the per-epoch losses, by direct rule application."""
    current = list(initial_fanouts)
    prev = None
    out = []
    for loss in losses:
        out.append(tuple(current))
        if prev is not None and abs(loss - prev) < epsilon:
            current = [f + delta_f for f in current]
        prev = loss
    return out


class Trainer:
    """Single writer of model, optimizer and controller state for one run."""

    def __init__(self, config: TrainConfig, dataset: DatasetBundle):
        config.validate()
        self.config = config
        self.dataset = dataset
        self.train_ids = dataset.ids("train")
        self.val_ids = dataset.ids("val")
        self.test_ids = dataset.ids("test")
        for tag, ids in (("train", self.train_ids), ("val", self.val_ids), ("test", self.test_ids)):
            if ids.size == 0:
                raise TrainingError(f"dataset has an empty {tag} split")
        self.features = np.asarray(dataset.features, dtype=np.float64)
        self.labels = dataset.labels
        self.scores = node_scores(dataset.graph)

        dims = [self.features.shape[1]] + [config.hidden_dim] * (config.num_layers - 1) + [dataset.num_classes]
        self.params = init_params(dims, substream(config.seed, "init"))
        self.opt_state = AdamState.zeros_like(self.params)
        self.controller = FanoutController(
            config.initial_fanouts, config.delta_f, config.epsilon, config.fanout_cap
        )
        self.stopper = EarlyStopper(config.delta, config.window)
        self.seed_policy = SeedOrderPolicy(
            "score-warmup" if config.policy == "dafos" else "shuffle", config.warmup_epochs
        )

        if self.val_ids.size > config.eval_subsample_cap:
            picked = substream(config.seed, "monitor").choice(
                self.val_ids, size=config.eval_subsample_cap, replace=False
            )
            self.monitor_ids = np.sort(picked)
        else:
            self.monitor_ids = self.val_ids
        self._monitor_blocks = self._full_blocks(self.monitor_ids)
        self._val_blocks = (
            self._monitor_blocks if self.monitor_ids is self.val_ids else self._full_blocks(self.val_ids)
        )

        self.epoch = 0
        self.records: list[EpochStats] = []
        self.best_val_f1 = -1.0
        self.best_epoch = 0
        self.best_params = self.params.copy()
        self.stop_reason: str | None = None

    def _full_blocks(self, ids: np.ndarray) -> list[Block]:
        return full_blocks(self.dataset.graph, ids, self.config.num_layers, self.config.self_loop)

    def _evaluate(self, blocks: list[Block], ids: np.ndarray, params: GcnParams) -> float:
        preds = predict(blocks, self.features, params, self.config.aggregator)
        return micro_f1(preds, self.labels[ids])

    def _sample(self, epoch: int, index: int, seeds: np.ndarray, fanouts: tuple[int, ...]) -> list[Block]:
        seed = self.config.seed
        rngs = [substream(seed, "sample", epoch, index, layer) for layer in range(len(fanouts))]
        return build_blocks(self.dataset.graph, seeds, fanouts, rngs, self.config.self_loop)

    def _epoch_blocks(self, epoch: int, batches: list[np.ndarray], fanouts: tuple[int, ...]) -> Iterable[list[Block]]:
        if self.config.sampler_workers == 0:
            return (self._sample(epoch, b, seeds, fanouts) for b, seeds in enumerate(batches))
        pool = ThreadPoolExecutor(max_workers=self.config.sampler_workers)
        results = pool.map(lambda item: self._sample(epoch, item[0], item[1], fanouts), enumerate(batches))
        pool.shutdown(wait=False)
        return results

    @property
    def finished(self) -> bool:
        return self.stop_reason is not None

    def train_epoch(self) -> tuple[EpochStats, bool]:
        """Run the next epoch. Returns its stats and whether the stopper fired."""
        if self.finished:
            raise TrainingError(f"run already finished ({self.stop_reason})")
        cfg = self.config
        epoch = self.epoch + 1
        start = time.perf_counter()
        eval_seconds = 0.0

        order = order_seeds(
            self.scores, self.train_ids, epoch, self.seed_policy, substream(cfg.seed, "order", epoch)
        )
        batches = make_batches(order, cfg.batch_size)
        fanouts = tuple(self.controller.fanouts)
        step = optimizer_step if cfg.optimizer == "adam" else sgd_step

        losses: list[float] = []
        f1s: list[float] = []
        stop = False
        for index, blocks in enumerate(self._epoch_blocks(epoch, batches, fanouts)):
            seeds = batches[index]
            logits, cache = forward(blocks, self.features, self.params, cfg.aggregator)
            loss, _ = cross_entropy(logits, self.labels[seeds])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {index}")
            grads = backward(cache, self.labels[seeds])
            self.params, self.opt_state = step(self.params, grads, self.opt_state, cfg.learning_rate)
            losses.append(loss)

            t_eval = time.perf_counter()
            f1 = self._evaluate(self._monitor_blocks, self.monitor_ids, self.params)
            eval_seconds += time.perf_counter() - t_eval
            f1s.append(f1)
            if self.stopper.observe_f1(f1):
                stop = True
                break

        t_eval = time.perf_counter()
        if self._val_blocks is self._monitor_blocks:
            val_f1 = f1s[-1]
        else:
            val_f1 = self._evaluate(self._val_blocks, self.val_ids, self.params)
        eval_seconds += time.perf_counter() - t_eval

        avg_loss = float(np.mean(losses))
        if val_f1 > self.best_val_f1:
            self.best_val_f1 = val_f1
            self.best_epoch = epoch
            self.best_params = self.params.copy()
        if cfg.policy == "dafos" and not stop:
            self.controller.observe_epoch_loss(avg_loss)

        wall = (time.perf_counter() - start) * 1e3
        eval_ms = eval_seconds * 1e3
        prev = self.records[-1] if self.records else None
        stats = EpochStats(
            epoch=epoch,
            avg_train_loss=avg_loss,
            val_f1=val_f1,
            fanouts=fanouts,
            minibatches_run=len(losses),
            wall_millis=wall,
            eval_millis=eval_ms,
            cumulative_millis=(prev.cumulative_millis if prev else 0.0) + wall,
            cumulative_train_millis=(prev.cumulative_train_millis if prev else 0.0) + wall - eval_ms,
            batch_losses=losses,
            batch_f1=f1s,
        )
        self.records.append(stats)
        self.epoch = epoch
        if stop:
            self.stop_reason = STOP_EARLY
        elif epoch >= cfg.max_epochs:
            self.stop_reason = STOP_MAX_EPOCHS
        return stats, stop

    def run(self, checkpoint_every: int = 0, checkpoint_path: str | Path | None = None) -> RunReport:
        while not self.finished:
            self.train_epoch()
            if checkpoint_every and checkpoint_path and self.epoch % checkpoint_every == 0:
                self.save_checkpoint(checkpoint_path)
        return self.report()

    def report(self) -> RunReport:
        test_blocks = self._full_blocks(self.test_ids)
        return RunReport(
            config=self.config.to_dict(),
            epochs=list(self.records),
            stop_reason=self.stop_reason or "running",
            best_val_f1=self.best_val_f1,
            best_epoch=self.best_epoch,
            test_f1=self._evaluate(test_blocks, self.test_ids, self.best_params),
        )

    def save_checkpoint(self, path: str | Path) -> None:
        """Persist everything needed to continue the run from the next epoch."""
        extra = {
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "records": [r.to_dict() for r in self.records],
            "controller": self.controller.snapshot(),
            "stopper": self.stopper.snapshot(),
            "best_val_f1": self.best_val_f1,
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
        }
        arrays = {f"best{l}": w for l, w in enumerate(self.best_params.weights)}
        save_checkpoint(path, self.params, self.opt_state, extra, arrays)

    @classmethod
    def resume(cls, path: str | Path, dataset: DatasetBundle) -> Trainer:
        params, state, extra, arrays = load_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(extra["config"]), dataset)
        shapes = [w.shape for w in trainer.params.weights]
        if [w.shape for w in params.weights] != shapes:
            raise TrainingError(f"checkpoint weight shapes do not fit this dataset ({shapes})")
        trainer.params = params
        trainer.opt_state = state
        trainer.epoch = int(extra["epoch"])
        trainer.records = [EpochStats.from_dict(r) for r in extra["records"]]
        trainer.controller = FanoutController.restore(extra["controller"])
        trainer.stopper = EarlyStopper.restore(extra["stopper"])
        trainer.best_val_f1 = float(extra["best_val_f1"])
        trainer.best_epoch = int(extra["best_epoch"])
        trainer.best_params = GcnParams([arrays[f"best{l}"] for l in range(params.num_layers)])
        trainer.stop_reason = extra["stop_reason"]
        return trainer


def run(config: TrainConfig, dataset: DatasetBundle) -> RunReport:
    return Trainer(config, dataset).run()


# ======================================================================================
# Comparisons and sweeps
# ======================================================================================


@dataclass
class ComparisonRow:
    policy: str
    seed: str
    epoch_ms_median: float
    total_ms: float
    best_val_f1: float
    test_f1: float
    time_to_target_ms: float | None

    @classmethod
    def from_report(cls, label: str, report: RunReport, target_f1: float) -> ComparisonRow:
        return cls(
            policy=label,
            seed=str(report.config["seed"]),
            epoch_ms_median=report.epoch_train_millis_median(),
            total_ms=report.total_train_millis,
            best_val_f1=report.best_val_f1,
            test_f1=report.test_f1,
            time_to_target_ms=report.time_to_target(target_f1),
        )


@dataclass
class Comparison:
    aggregates: list[ComparisonRow]
    rows: list[ComparisonRow]
    reports: dict[tuple[str, int], RunReport]


def _median_or_none(values: list[float | None]) -> float | None:
    # a run that never reaches the target counts as infinitely slow
    if not values:
        return None
    med = statistics.median(float("inf") if v is None else v for v in values)
    return None if med == float("inf") else med


def compare(
    config_a: TrainConfig,
    config_b: TrainConfig,
    dataset: DatasetBundle,
    seeds: Sequence[int],
    target_f1: float = 0.85,
    labels: tuple[str, str] | None = None,
) -> Comparison:
    """
    Run both configs once per seed. Times exclude evaluation. Aggregate rows
    hold per-config medians over seeds.

    Runs alternate between the configs seed by seed so that slow drift in
    machine speed lands on both sides of the comparison alike.
    """
    if not seeds:
        raise ValueError("compare needs at least one seed")
    labels = labels or (config_a.policy, config_b.policy)
    if labels[0] == labels[1]:
        raise ValueError(f"both configs are labelled {labels[0]!r}; pass distinct labels")
    pairs = list(zip(labels, (config_a, config_b)))
    reports: dict[tuple[str, int], RunReport] = {}
    for seed in seeds:
        for label, cfg in pairs:
            reports[(label, int(seed))] = run(cfg.replace(seed=int(seed)), dataset)
    rows: list[ComparisonRow] = []
    aggregates: list[ComparisonRow] = []
    for label, _ in pairs:
        mine = [ComparisonRow.from_report(label, reports[(label, int(seed))], target_f1) for seed in seeds]
        rows.extend(mine)
        aggregates.append(
            ComparisonRow(
                policy=label,
                seed="median",
                epoch_ms_median=statistics.median(r.epoch_ms_median for r in mine),
                total_ms=statistics.median(r.total_ms for r in mine),
                best_val_f1=statistics.median(r.best_val_f1 for r in mine),
                test_f1=statistics.median(r.test_f1 for r in mine),
                time_to_target_ms=_median_or_none([r.time_to_target_ms for r in mine]),
            )
        )
    return Comparison(aggregates=aggregates, rows=rows, reports=reports)


@dataclass
class SweepCell:
    delta_f: int
    epsilon: float
    report: RunReport

    @property
    def total_ms(self) -> float:
        return self.report.total_train_millis

    @property
    def f1(self) -> float:
        return self.report.test_f1


def sensitivity_sweep(
    base_config: TrainConfig,
    dataset: DatasetBundle,
    delta_f_values: Sequence[int] | None = None,
    epsilon_values: Sequence[float] | None = None,
    cells: Sequence[tuple[int, float]] | None = None,
) -> list[SweepCell]:
    """
    One DAFOS run per (delta_f, epsilon) cell.

    Cells are the full cross product of the two value lists, or ``cells``
    verbatim, or by default the eight cells of DEFAULT_SWEEP_CELLS.
    """
    if cells is None:
        if delta_f_values is None and epsilon_values is None:
            cells = DEFAULT_SWEEP_CELLS
        else:
            if not delta_f_values or not epsilon_values:
                raise ValueError("sweep needs non-empty delta_f and epsilon value lists")
            cells = [(df, eps) for df in delta_f_values for eps in epsilon_values]
    if not cells:
        raise ValueError("sweep needs at least one cell")
    out = []
    for delta_f, epsilon in cells:
        cfg = base_config.replace(policy="dafos", delta_f=int(delta_f), epsilon=float(epsilon))
        out.append(SweepCell(int(delta_f), float(epsilon), run(cfg, dataset)))
    return out
