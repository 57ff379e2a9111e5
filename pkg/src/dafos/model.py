"""Bias-free GCN over sampled blocks, with hand-written gradients.

Layer ``l`` aggregates the previous representations of each destination's
sources along block edges (``sum`` or ``mean``), multiplies by ``W[l]`` and
applies ReLU on every layer except the last, whose output is the logits.
All arithmetic is float64.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sampler import Block

__all__ = [
    "ModelError",
    "GcnParams",
    "ForwardCache",
    "AdamState",
    "init_params",
    "forward",
    "cross_entropy",
    "backward",
    "optimizer_step",
    "sgd_step",
    "micro_f1",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class GcnParams:
    weights: list[np.ndarray]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> GcnParams:
        return GcnParams([w.copy() for w in self.weights])


@dataclass
class ForwardCache:
    blocks: list[Block]
    aggregator: str
    weights: list[np.ndarray]
    inputs: list[np.ndarray] = field(default_factory=list)
    aggregated: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: GcnParams) -> AdamState:
        return cls(
            m=[np.zeros_like(w) for w in params.weights],
            v=[np.zeros_like(w) for w in params.weights],
        )

    def copy(self) -> AdamState:
        return AdamState(
            m=[a.copy() for a in self.m],
            v=[a.copy() for a in self.v],
            step=self.step,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )


def init_params(dims: Sequence[int], rng: np.random.Generator) -> GcnParams:
    """Glorot-uniform weights for layer widths ``dims = [in, hidden..., classes]``."""
    if len(dims) < 2:
        raise ModelError(f"need at least input and output widths, got {list(dims)}")
    weights = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    return GcnParams(weights)


def forward(
    blocks: Sequence[Block],
    features: np.ndarray,
    params: GcnParams,
    aggregator: str = "mean",
) -> tuple[np.ndarray, ForwardCache]:
    """
    Run the GCN over ``blocks`` (layer 1 first).

    ``features`` is indexed by global node id; rows for ``blocks[0].src_ids``
    are gathered. Returns logits for ``blocks[-1].dst_ids`` and the cache
    needed by :func:`backward`.
    """
    if len(blocks) != params.num_layers:
        raise ModelError(f"got {len(blocks)} blocks for a {params.num_layers}-layer model")
    cache = ForwardCache(blocks=list(blocks), aggregator=aggregator, weights=list(params.weights))
    h = np.asarray(features, dtype=np.float64)[blocks[0].src_ids]
    last = params.num_layers - 1
    for l, (block, w) in enumerate(zip(blocks, params.weights)):
        if h.shape[0] != block.num_src:
            raise ModelError(
                f"layer {l + 1}: {h.shape[0]} input rows for a block with {block.num_src} sources"
            )
        if h.shape[1] != w.shape[0]:
            raise ModelError(f"layer {l + 1}: input width {h.shape[1]} != weight rows {w.shape[0]}")
        agg = block.aggregation_matrix(aggregator) @ h
        z = agg @ w
        out = z if l == last else np.maximum(z, 0.0)
        cache.inputs.append(h)
        cache.aggregated.append(agg)
        cache.pre_activations.append(z)
        cache.outputs.append(out)
        h = out
    return h, cache


def _softmax(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    return np.exp(log_probs), log_probs


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and the class probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] != labels.shape[0]:
        raise ModelError(f"{logits.shape[0]} logit rows for {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ModelError(f"labels must lie in [0, {logits.shape[1]})")
    probs, log_probs = _softmax(logits)
    loss = -float(np.mean(log_probs[np.arange(labels.size), labels]))
    return loss, probs


def backward(cache: ForwardCache, labels: np.ndarray) -> list[np.ndarray]:
    """Gradient of :func:`cross_entropy` of the cached logits w.r.t. every weight matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    logits = cache.logits
    if labels.shape[0] != logits.shape[0]:
        raise ModelError(f"cache holds {logits.shape[0]} outputs but got {labels.shape[0]} labels")
    probs, _ = _softmax(logits)
    grad_out = probs
    grad_out[np.arange(labels.size), labels] -= 1.0
    grad_out /= labels.size

    num_layers = len(cache.blocks)
    grads: list[np.ndarray] = [None] * num_layers  # type: ignore[list-item]
    for l in reversed(range(num_layers)):
        if l == num_layers - 1:
            grad_z = grad_out
        else:
            grad_z = grad_out * (cache.pre_activations[l] > 0.0)
        grads[l] = cache.aggregated[l].T @ grad_z
        if l > 0:
            grad_agg = grad_z @ cache.weights[l].T
            grad_out = cache.blocks[l].aggregation_matrix(cache.aggregator).T @ grad_agg
    return grads


def optimizer_step(
    params: GcnParams,
    grads: Sequence[np.ndarray],
    state: AdamState,
    learning_rate: float,
) -> tuple[GcnParams, AdamState]:
    """One bias-corrected Adam update. Returns new params and state; inputs are not modified."""
    _check_grads(params, grads)
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_w, new_m, new_v = [], [], []
    for w, g, m, v in zip(params.weights, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_w.append(w - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return GcnParams(new_w), AdamState(new_m, new_v, step, b1, b2, state.eps)


def sgd_step(
    params: GcnParams,
    grads: Sequence[np.ndarray],
    state: AdamState,
    learning_rate: float,
) -> tuple[GcnParams, AdamState]:
    """Plain gradient descent; ``state`` only advances its step counter."""
    _check_grads(params, grads)
    new_state = state.copy()
    new_state.step += 1
    return GcnParams([w - learning_rate * g for w, g in zip(params.weights, grads)]), new_state


def _check_grads(params: GcnParams, grads: Sequence[np.ndarray]) -> None:
    if len(grads) != params.num_layers:
        raise ModelError(f"{len(grads)} gradients for {params.num_layers} weight matrices")
    for l, (w, g) in enumerate(zip(params.weights, grads)):
        if g.shape != w.shape:
            raise ModelError(f"layer {l + 1}: gradient shape {g.shape} != weight shape {w.shape}")
        if not np.all(np.isfinite(g)):
            raise ModelError(f"layer {l + 1}: non-finite gradient")


def predict(blocks: Sequence[Block], features: np.ndarray, params: GcnParams, aggregator: str) -> np.ndarray:
    logits, _ = forward(blocks, features, params, aggregator)
    return logits.argmax(axis=1)


def micro_f1(predictions: np.ndarray, labels: np.ndarray) -> float:
    """
    Micro-averaged F1 over classes.

    Summed over classes every wrong prediction is one false positive (for
    the predicted class) and one false negative (for the true class), so
    for single-label data this equals accuracy.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"shape mismatch: {predictions.shape} vs {labels.shape}")
    if labels.size == 0:
        raise ValueError("micro_f1 of an empty set is undefined")
    num_classes = int(max(predictions.max(), labels.max())) + 1
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    tp = np.trace(confusion)
    fp = confusion.sum(axis=0).sum() - tp
    fn = confusion.sum(axis=1).sum() - tp
    return float(2 * tp / (2 * tp + fp + fn))


# ======================================================================================
# Checkpoint container
# ======================================================================================


def save_checkpoint(
    path: str | Path,
    params: GcnParams,
    state: AdamState,
    extra: dict | None = None,
    arrays: dict[str, np.ndarray] | None = None,
) -> None:
    """
    Write params, optimizer state and arbitrary JSON metadata to one ``.npz``.

    Matrices are stored as raw float64 so the round trip is exact.
    """
    meta = {
        "version": CHECKPOINT_VERSION,
        "num_layers": params.num_layers,
        "shapes": [list(w.shape) for w in params.weights],
        "adam": {"step": state.step, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        "extra": extra or {},
    }
    payload = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for l, w in enumerate(params.weights):
        payload[f"W{l}"] = w
        payload[f"m{l}"] = state.m[l]
        payload[f"v{l}"] = state.v[l]
    for name, arr in (arrays or {}).items():
        payload[f"x_{name}"] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str | Path) -> tuple[GcnParams, AdamState, dict, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(data["meta"].tobytes().decode("utf-8"))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ModelError(
                    f"checkpoint version {meta.get('version')!r} not supported (expected {CHECKPOINT_VERSION})"
                )
            n = meta["num_layers"]
            weights = [data[f"W{l}"].copy() for l in range(n)]
            m = [data[f"m{l}"].copy() for l in range(n)]
            v = [data[f"v{l}"].copy() for l in range(n)]
            arrays = {k[2:]: data[k].copy() for k in data.files if k.startswith("x_")}
    except ModelError:
        raise
    except Exception as exc:  # zip, json and key errors all mean a broken file
        raise ModelError(f"unreadable checkpoint {path}: {exc}") from exc
    for w, shape in zip(weights, meta["shapes"]):
        if list(w.shape) != shape:
            raise ModelError(f"checkpoint shape mismatch: {w.shape} vs recorded {shape}")
    adam = meta["adam"]
    state = AdamState(m, v, adam["step"], adam["beta1"], adam["beta2"], adam["eps"])
    return GcnParams(weights), state, meta["extra"], arrays
