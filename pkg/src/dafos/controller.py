"""Training-loop control: loss-plateau fanout growth and F1-window early stopping."""

from __future__ import annotations

import math
from collections import deque
from collections.abc import Sequence

__all__ = ["SnapshotError", "FanoutController", "EarlyStopper", "SNAPSHOT_VERSION"]

SNAPSHOT_VERSION = 1


class SnapshotError(ValueError):
    """A snapshot could not be restored."""


def _check_snapshot(state: object, kind: str, keys: Sequence[str]) -> dict:
    if not isinstance(state, dict):
        raise SnapshotError(f"{kind} snapshot must be a mapping, got {type(state).__name__}")
    if state.get("kind") != kind:
        raise SnapshotError(f"expected a {kind} snapshot, got kind={state.get('kind')!r}")
    if state.get("version") != SNAPSHOT_VERSION:
        raise SnapshotError(f"{kind} snapshot version {state.get('version')!r} != {SNAPSHOT_VERSION}")
    missing = [k for k in keys if k not in state]
    if missing:
        raise SnapshotError(f"{kind} snapshot missing fields {missing}")
    return state


class FanoutController:
    """
    Grows every layer's fanout by ``delta_f`` when the epoch loss plateaus.

    A plateau is ``|loss - prev_loss| < epsilon`` (strict). The comparison
    uses the absolute difference, so a small loss increase also counts.
    ``cap`` optionally bounds each layer's fanout.
    """

    def __init__(
        self,
        initial_fanouts: Sequence[int],
        delta_f: int = 5,
        epsilon: float = 0.01,
        cap: int | None = None,
    ):
        fanouts = [int(f) for f in initial_fanouts]
        if not fanouts or any(f < 1 for f in fanouts):
            raise ValueError(f"initial fanouts must be >= 1, got {fanouts}")
        if delta_f < 1:
            raise ValueError(f"delta_f must be >= 1, got {delta_f}")
        if not epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        if cap is not None and cap < max(fanouts):
            raise ValueError(f"cap {cap} is below the initial fanouts {fanouts}")
        self.initial_fanouts = tuple(fanouts)
        self.fanouts = list(fanouts)
        self.delta_f = int(delta_f)
        self.epsilon = float(epsilon)
        self.cap = cap
        self.prev_loss: float | None = None

    def observe_epoch_loss(self, loss: float) -> bool:
        """Feed one epoch's mean training loss; return True if the fanouts grew."""
        if not math.isfinite(loss):
            raise ValueError(f"epoch loss must be finite, got {loss}")
        changed = False
        if self.prev_loss is not None and abs(loss - self.prev_loss) < self.epsilon:
            grown = [f + self.delta_f for f in self.fanouts]
            if self.cap is not None:
                grown = [min(f, self.cap) for f in grown]
            changed = grown != self.fanouts
            self.fanouts = grown
        self.prev_loss = float(loss)
        return changed

    def snapshot(self) -> dict:
        return {
            "kind": "fanout_controller",
            "version": SNAPSHOT_VERSION,
            "initial_fanouts": list(self.initial_fanouts),
            "fanouts": list(self.fanouts),
            "delta_f": self.delta_f,
            "epsilon": self.epsilon,
            "cap": self.cap,
            "prev_loss": self.prev_loss,
        }

    @classmethod
    def restore(cls, state: dict) -> FanoutController:
        s = _check_snapshot(
            state,
            "fanout_controller",
            ("initial_fanouts", "fanouts", "delta_f", "epsilon", "cap", "prev_loss"),
        )
        try:
            ctrl = cls(s["initial_fanouts"], s["delta_f"], s["epsilon"], s["cap"])
            fanouts = [int(f) for f in s["fanouts"]]
        except (TypeError, ValueError) as exc:
            raise SnapshotError(f"corrupt fanout_controller snapshot: {exc}") from exc
        if len(fanouts) != len(ctrl.initial_fanouts) or any(
            f < f0 for f, f0 in zip(fanouts, ctrl.initial_fanouts)
        ):
            raise SnapshotError(f"corrupt fanout_controller snapshot: fanouts {fanouts}")
        ctrl.fanouts = fanouts
        ctrl.prev_loss = None if s["prev_loss"] is None else float(s["prev_loss"])
        return ctrl


class EarlyStopper:
    """
    Stops when the F1 gain over a window of ``window`` mini-batches stays
    below ``delta`` for ``window`` consecutive mini-batches.

    With a constant F1 stream the first comparison happens at observation
    ``window + 1`` and the stop fires at observation ``2 * window``.
    """

    def __init__(self, delta: float = 1e-2, window: int = 200):
        if not delta > 0:
            raise ValueError(f"delta must be positive, got {delta}")
        if window < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        self.delta = float(delta)
        self.window = int(window)
        self.history: deque[float] = deque(maxlen=self.window + 1)
        self.consecutive_failures = 0
        self.observations = 0

    def observe_f1(self, f1: float) -> bool:
        if not 0.0 <= f1 <= 1.0:
            raise ValueError(f"F1 must lie in [0, 1], got {f1}")
        self.history.append(float(f1))
        self.observations += 1
        if len(self.history) == self.window + 1:
            improvement = self.history[-1] - self.history[0]
            if improvement < self.delta:
                self.consecutive_failures += 1
            else:
                self.consecutive_failures = 0
        return self.consecutive_failures >= self.window

    def snapshot(self) -> dict:
        return {
            "kind": "early_stopper",
            "version": SNAPSHOT_VERSION,
            "delta": self.delta,
            "window": self.window,
            "history": list(self.history),
            "consecutive_failures": self.consecutive_failures,
            "observations": self.observations,
        }

    @classmethod
    def restore(cls, state: dict) -> EarlyStopper:
        s = _check_snapshot(
            state,
            "early_stopper",
            ("delta", "window", "history", "consecutive_failures", "observations"),
        )
        try:
            stopper = cls(s["delta"], s["window"])
            history = [float(x) for x in s["history"]]
            failures = int(s["consecutive_failures"])
            observations = int(s["observations"])
        except (TypeError, ValueError) as exc:
            raise SnapshotError(f"corrupt early_stopper snapshot: {exc}") from exc
        if len(history) > stopper.window + 1 or not 0 <= failures <= stopper.window:
            raise SnapshotError("corrupt early_stopper snapshot: history/failure counts out of range")
        if observations < len(history):
            raise SnapshotError("corrupt early_stopper snapshot: fewer observations than history")
        stopper.history.extend(history)
        stopper.consecutive_failures = failures
        stopper.observations = observations
        return stopper
