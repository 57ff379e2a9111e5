"""Seed ordering, batching and layered neighbor sampling.

A mini-batch of seed nodes is expanded outward one hop per GNN layer. Each
hop is materialized as a :class:`Block`: a bipartite graph from source nodes
(sampled neighbors plus the destinations themselves) to destination nodes.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import CsrGraph

__all__ = [
    "SamplingError",
    "Block",
    "SeedOrderPolicy",
    "check_fanouts",
    "sample_block",
    "build_blocks",
    "full_blocks",
    "order_seeds",
    "make_batches",
]


class SamplingError(ValueError):
    """Sampler contract violation."""


@dataclass(eq=False)
class Block:
    """
    One sampled hop.

    ``src_ids[:len(dst_ids)] == dst_ids``. Edge ``k`` connects local source
    ``edge_src[k]`` to local destination ``edge_dst[k]``.
    """

    src_ids: np.ndarray
    dst_ids: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    _agg_cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_src(self) -> int:
        return int(self.src_ids.shape[0])

    @property
    def num_dst(self) -> int:
        return int(self.dst_ids.shape[0])

    @property
    def edges(self) -> np.ndarray:
        return np.stack([self.edge_src, self.edge_dst], axis=1)

    def in_counts(self) -> np.ndarray:
        return np.bincount(self.edge_dst, minlength=self.num_dst)

    def aggregation_matrix(self, aggregator: str) -> sp.csr_matrix:
        """Sparse (num_dst x num_src) operator applying the aggregator along block edges."""
        mat = self._agg_cache.get(aggregator)
        if mat is not None:
            return mat
        if aggregator == "sum":
            weights = np.ones(self.edge_src.shape[0])
        elif aggregator == "mean":
            counts = self.in_counts()
            weights = 1.0 / np.maximum(counts, 1)[self.edge_dst]
        else:
            raise ValueError(f"unknown aggregator {aggregator!r}; expected 'mean' or 'sum'")
        # block edges are unique, so the CSR can be laid out directly without a COO pass
        order = np.argsort(self.edge_dst, kind="stable")
        indptr = np.zeros(self.num_dst + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.edge_dst, minlength=self.num_dst), out=indptr[1:])
        mat = sp.csr_matrix(
            (weights[order], self.edge_src[order], indptr), shape=(self.num_dst, self.num_src)
        )
        self._agg_cache[aggregator] = mat
        return mat


@dataclass(frozen=True)
class SeedOrderPolicy:
    mode: str = "score-warmup"
    warmup_epochs: int = 3

    def __post_init__(self) -> None:
        if self.mode not in ("score-warmup", "shuffle"):
            raise ValueError(f"unknown seed order mode {self.mode!r}")
        if self.warmup_epochs < 0:
            raise ValueError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")


def check_fanouts(fanouts: Sequence[int]) -> tuple[int, ...]:
    out = tuple(int(f) for f in fanouts)
    if not out:
        raise SamplingError("fanout schedule must have at least one layer")
    if any(f < 1 for f in out):
        raise SamplingError(f"fanouts must all be >= 1, got {list(out)}")
    return out


def _gather_ranges(values: np.ndarray, starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Concatenate values[starts[i]:starts[i]+lengths[i]] for all i."""
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, dtype=values.dtype)
    ends = np.cumsum(lengths)
    shift = np.repeat(starts - (ends - lengths), lengths)
    return values[np.arange(total, dtype=np.int64) + shift]


def sample_block(
    graph: CsrGraph,
    dst_ids: Sequence[int] | np.ndarray,
    fanout: int | None,
    rng: np.random.Generator | None,
    self_loop: bool = True,
) -> Block:
    """
    Sample up to ``fanout`` distinct neighbors of every destination node.

    Nodes with ``degree <= fanout`` keep their whole neighborhood. For the
    rest a partial Fisher-Yates shuffle over a copy of the neighbor slice
    picks ``fanout`` neighbors uniformly without replacement; the shuffle
    steps run vectorized across all such nodes. ``fanout=None`` means the
    full neighborhood and needs no ``rng``.
    """
    dst = np.asarray(dst_ids, dtype=np.int64)
    if dst.ndim != 1 or dst.size == 0:
        raise SamplingError("dst_ids must be a non-empty 1-D list of node ids")
    if fanout is not None and fanout < 1:
        raise SamplingError(f"fanout must be >= 1, got {fanout}")
    if np.unique(dst).size != dst.size:
        raise SamplingError("dst_ids contains duplicate node ids")

    starts = graph.offsets[dst]
    deg = graph.offsets[dst + 1] - starts
    take = deg if fanout is None else np.minimum(deg, fanout)

    whole = np.flatnonzero(take == deg)
    parts_nbr = [_gather_ranges(graph.targets, starts[whole], deg[whole])]
    parts_dst = [np.repeat(whole, deg[whole])]

    partial = np.flatnonzero(take < deg)
    if partial.size:
        if rng is None:
            raise SamplingError("an rng is required when fanout is below some degree")
        pdeg = deg[partial]
        base = np.cumsum(pdeg) - pdeg
        work = _gather_ranges(graph.targets, starts[partial], pdeg)
        for i in range(fanout):
            j = rng.integers(i, pdeg)
            a = base + i
            b = base + j
            work[a], work[b] = work[b], work[a].copy()
        picked = work[(base[:, None] + np.arange(fanout)).ravel()]
        parts_nbr.append(picked)
        parts_dst.append(np.repeat(partial, fanout))

    nbr = np.concatenate(parts_nbr)
    nbr_dst = np.concatenate(parts_dst)

    is_dst = np.zeros(graph.num_nodes, dtype=bool)
    is_dst[dst] = True
    extra = np.unique(nbr[~is_dst[nbr]])
    src_ids = np.concatenate([dst, extra])

    local = np.full(graph.num_nodes, -1, dtype=np.int64)
    local[src_ids] = np.arange(src_ids.size, dtype=np.int64)
    edge_src = local[nbr]
    edge_dst = nbr_dst
    if self_loop:
        own = np.arange(dst.size, dtype=np.int64)
        edge_src = np.concatenate([own, edge_src])
        edge_dst = np.concatenate([own, edge_dst])
    return Block(src_ids=src_ids, dst_ids=dst, edge_src=edge_src, edge_dst=edge_dst)


def build_blocks(
    graph: CsrGraph,
    seeds: Sequence[int] | np.ndarray,
    fanouts: Sequence[int],
    rng: np.random.Generator | Sequence[np.random.Generator],
    self_loop: bool = True,
) -> list[Block]:
    """
    Expand ``seeds`` through ``len(fanouts)`` hops.

    Blocks are sampled from the seeds outward (layer L first) and returned
    in forward order, layer 1 to layer L, so ``blocks[l].dst_ids`` equals
    ``blocks[l + 1].src_ids``. ``rng`` is either one generator shared by all
    layers or one generator per layer.
    """
    fanouts = check_fanouts(fanouts)
    rngs = [rng] * len(fanouts) if isinstance(rng, np.random.Generator) else list(rng)
    if len(rngs) != len(fanouts):
        raise SamplingError(f"need {len(fanouts)} layer generators, got {len(rngs)}")
    blocks: list[Block] = []
    frontier = np.asarray(seeds, dtype=np.int64)
    for layer in reversed(range(len(fanouts))):
        block = sample_block(graph, frontier, fanouts[layer], rngs[layer], self_loop=self_loop)
        blocks.append(block)
        frontier = block.src_ids
    blocks.reverse()
    return blocks


def full_blocks(
    graph: CsrGraph,
    seeds: Sequence[int] | np.ndarray,
    num_layers: int,
    self_loop: bool = True,
) -> list[Block]:
    """Unsampled blocks (every neighbor kept), used for inference."""
    blocks: list[Block] = []
    frontier = np.asarray(seeds, dtype=np.int64)
    for _ in range(num_layers):
        block = sample_block(graph, frontier, None, None, self_loop=self_loop)
        blocks.append(block)
        frontier = block.src_ids
    blocks.reverse()
    return blocks


def order_seeds(
    scores: np.ndarray,
    train_ids: Sequence[int] | np.ndarray,
    epoch: int,
    policy: SeedOrderPolicy,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Order training seeds for one epoch (epochs count from 1).

    During warmup under ``score-warmup`` the ids are sorted by score,
    highest first, ties by ascending id. Otherwise they are shuffled.
    """
    if epoch < 1:
        raise ValueError(f"epoch counts from 1, got {epoch}")
    ids = np.asarray(train_ids, dtype=np.int64)
    if policy.mode == "score-warmup" and epoch <= policy.warmup_epochs:
        return ids[np.lexsort((ids, -np.asarray(scores)[ids]))]
    return rng.permutation(ids)


def make_batches(ordered_ids: Sequence[int] | np.ndarray, batch_size: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    ids = np.asarray(ordered_ids, dtype=np.int64)
    return [ids[i : i + batch_size] for i in range(0, ids.size, batch_size)]
