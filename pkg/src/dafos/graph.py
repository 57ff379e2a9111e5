"""Graph storage, node scoring, synthetic generators and dataset I/O."""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GraphError",
    "DatasetError",
    "CsrGraph",
    "DatasetBundle",
    "SPLIT_TAGS",
    "build_csr",
    "degree",
    "node_scores",
    "SCORERS",
    "gen_sbm",
    "gen_preferential_attachment",
    "gen_planted_features",
    "random_splits",
    "read_edge_list",
    "save_dataset",
    "load_dataset",
]

SPLIT_TAGS = ("train", "val", "test")


class GraphError(ValueError):
    """Invalid graph construction input."""


class DatasetError(ValueError):
    """Malformed or inconsistent dataset directory."""


# ======================================================================================
# CSR container
# ======================================================================================


@dataclass(frozen=True, eq=False)
class CsrGraph:
    """
    Immutable compressed-sparse-row adjacency.

    Attributes
    ----------
    num_nodes : int
    offsets : int64 array, shape (num_nodes + 1,)
        Neighbors of ``v`` are ``targets[offsets[v]:offsets[v + 1]]``.
    targets : int64 array, shape (num_edges,)
        Concatenated out-neighbor lists, each sorted ascending and duplicate-free.

    Undirected graphs are stored with both arc directions.
    """

    num_nodes: int
    offsets: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.offsets.setflags(write=False)
        self.targets.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return int(self.targets.shape[0])

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors(self, v: int) -> np.ndarray:
        return self.targets[self.offsets[v] : self.offsets[v + 1]]

    def arcs(self) -> np.ndarray:
        """All stored arcs as an (num_edges, 2) array of (source, target)."""
        src = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees())
        return np.stack([src, self.targets], axis=1)

    def is_symmetric(self) -> bool:
        arcs = self.arcs()
        fwd = arcs[:, 0] * self.num_nodes + arcs[:, 1]
        rev = arcs[:, 1] * self.num_nodes + arcs[:, 0]
        return bool(np.array_equal(np.sort(fwd), np.sort(rev)))

    def same_as(self, other: CsrGraph) -> bool:
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.targets, other.targets)
        )


def build_csr(
    edges: Iterable[tuple[int, int]] | np.ndarray,
    num_nodes: int,
    symmetrize: bool = True,
) -> CsrGraph:
    """
    Build a CSR graph from an edge list.

    Duplicate edges and self-loops are dropped. With ``symmetrize`` every
    edge is stored in both directions.
    """
    if num_nodes < 0:
        raise GraphError(f"num_nodes must be non-negative, got {num_nodes}")
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GraphError(f"edges must be (u, v) pairs, got array of shape {arr.shape}")

    bad = np.flatnonzero((arr < 0).any(axis=1) | (arr >= num_nodes).any(axis=1))
    if bad.size:
        u, v = arr[bad[0]]
        raise GraphError(
            f"edge #{int(bad[0])} ({int(u)}, {int(v)}) has a node id outside [0, {num_nodes})"
        )

    if symmetrize:
        arr = np.concatenate([arr, arr[:, ::-1]], axis=0)
    arr = arr[arr[:, 0] != arr[:, 1]]
    keys = np.unique(arr[:, 0] * max(num_nodes, 1) + arr[:, 1])
    src = keys // max(num_nodes, 1)
    dst = keys % max(num_nodes, 1)

    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=num_nodes), out=offsets[1:])
    return CsrGraph(num_nodes=int(num_nodes), offsets=offsets, targets=dst.astype(np.int64))


def degree(graph: CsrGraph, v: int) -> int:
    if not 0 <= v < graph.num_nodes:
        raise IndexError(f"node {v} outside [0, {graph.num_nodes})")
    return int(graph.offsets[v + 1] - graph.offsets[v])


def _degree_scores(graph: CsrGraph) -> np.ndarray:
    return graph.degrees().astype(np.float64)


# Only degree scoring ships; the table is the extension point for richer scores.
SCORERS: dict[str, Callable[[CsrGraph], np.ndarray]] = {"degree": _degree_scores}


def node_scores(graph: CsrGraph, scorer: str = "degree") -> np.ndarray:
    """Per-node importance score; by default the node degree."""
    try:
        fn = SCORERS[scorer]
    except KeyError:
        raise ValueError(f"unknown scorer {scorer!r}; available: {sorted(SCORERS)}") from None
    return fn(graph)


# ======================================================================================
# Generators
# ======================================================================================


def _decode_triangular(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map linear indices over unordered pairs {j < i} to (j, i)."""
    i = np.floor((1.0 + np.sqrt(1.0 + 8.0 * t.astype(np.float64))) / 2.0).astype(np.int64)
    # fix float rounding at row boundaries
    i -= (i * (i - 1) // 2) > t
    i += ((i + 1) * i // 2) <= t
    j = t - i * (i - 1) // 2
    return j, i


def _check_prob(name: str, p: float) -> None:
    if not (0.0 <= p <= 1.0) or math.isnan(p):
        raise GraphError(f"{name} must lie in [0, 1], got {p}")


def gen_sbm(
    num_nodes: int,
    num_blocks: int,
    p_intra: float,
    p_inter: float,
    seed: int,
) -> tuple[CsrGraph, np.ndarray]:
    """
    Undirected stochastic block model.

    Nodes are split into ``num_blocks`` contiguous, near-equal blocks. Every
    unordered pair is an edge independently with probability ``p_intra``
    (same block) or ``p_inter`` (different blocks). Per block pair the edge
    count is drawn from the binomial and the edge set is a uniform subset of
    that size, which is the same distribution.

    Returns the graph and the block id of every node.
    """
    _check_prob("p_intra", p_intra)
    _check_prob("p_inter", p_inter)
    if p_inter > p_intra:
        raise GraphError(f"p_inter ({p_inter}) must not exceed p_intra ({p_intra})")
    if num_blocks < 1 or num_nodes < num_blocks:
        raise GraphError(f"need 1 <= num_blocks <= num_nodes, got {num_blocks} and {num_nodes}")

    rng = np.random.default_rng(seed)
    blocks = (np.arange(num_nodes, dtype=np.int64) * num_blocks) // num_nodes
    starts = np.searchsorted(blocks, np.arange(num_blocks + 1))
    chunks = []
    for a in range(num_blocks):
        for b in range(a, num_blocks):
            sa = int(starts[a + 1] - starts[a])
            sb = int(starts[b + 1] - starts[b])
            if a == b:
                pairs, p = sa * (sa - 1) // 2, p_intra
            else:
                pairs, p = sa * sb, p_inter
            if pairs == 0:
                continue
            k = int(rng.binomial(pairs, p))
            if k == 0:
                continue
            picked = np.sort(rng.choice(pairs, size=k, replace=False)).astype(np.int64)
            if a == b:
                u, v = _decode_triangular(picked)
            else:
                u, v = picked // sb, picked % sb
            chunks.append(np.stack([u + starts[a], v + starts[b]], axis=1))
    edges = np.concatenate(chunks) if chunks else np.zeros((0, 2), dtype=np.int64)
    return build_csr(edges, num_nodes, symmetrize=True), blocks


def gen_preferential_attachment(
    num_nodes: int,
    m: int,
    seed: int,
    num_blocks: int = 1,
    homophily: float = 0.0,
) -> tuple[CsrGraph, np.ndarray]:
    """
    Preferential-attachment graph grown from an (m+1)-clique.

    Each arriving node connects to ``m`` distinct existing nodes chosen with
    probability proportional to degree. Every node also gets a uniformly
    random block id; with probability ``homophily`` a single target draw is
    restricted to the arriving node's own block, which plants label/structure
    correlation while keeping the heavy-tailed degree profile. With the
    defaults this is the plain Barabási–Albert process.

    The undirected edge count is exactly ``m*(m+1)/2 + m*(num_nodes - m - 1)``.
    """
    if m < 1:
        raise GraphError(f"m must be >= 1, got {m}")
    if num_nodes <= m:
        raise GraphError(f"num_nodes must exceed m, got num_nodes={num_nodes}, m={m}")
    if num_blocks < 1:
        raise GraphError(f"num_blocks must be >= 1, got {num_blocks}")
    _check_prob("homophily", homophily)

    rng = np.random.default_rng(seed)
    blocks = rng.integers(0, num_blocks, size=num_nodes, dtype=np.int64)

    edges: list[tuple[int, int]] = [(u, v) for u in range(m + 1) for v in range(u + 1, m + 1)]
    endpoints: list[int] = []
    block_endpoints: list[list[int]] = [[] for _ in range(num_blocks)]
    block_members = np.zeros(num_blocks, dtype=np.int64)

    def _attach(u: int, times: int) -> None:
        endpoints.extend([u] * times)
        block_endpoints[blocks[u]].extend([u] * times)

    for u in range(m + 1):
        _attach(u, m)
        block_members[blocks[u]] += 1

    use_blocks = num_blocks > 1 and homophily > 0.0
    for v in range(m + 1, num_nodes):
        b = int(blocks[v])
        own = block_endpoints[b]
        can_restrict = use_blocks and block_members[b] >= m
        chosen: set[int] = set()
        while len(chosen) < m:
            if can_restrict and rng.random() < homophily:
                pool = own
            else:
                pool = endpoints
            chosen.add(pool[int(rng.integers(len(pool)))])
        for t in sorted(chosen):
            edges.append((t, v))
            _attach(t, 1)
        _attach(v, m)
        block_members[b] += 1

    return build_csr(edges, num_nodes, symmetrize=True), blocks


def gen_planted_features(
    graph: CsrGraph,
    blocks: np.ndarray,
    feat_dim: int,
    noise_sigma: float,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Class label = block id; features = unit-vector centroid of the class + Gaussian noise."""
    blocks = np.asarray(blocks, dtype=np.int64)
    if blocks.shape != (graph.num_nodes,):
        raise GraphError(f"need one block id per node ({graph.num_nodes}), got shape {blocks.shape}")
    num_blocks = int(blocks.max()) + 1 if blocks.size else 0
    if feat_dim < num_blocks:
        raise GraphError(f"feat_dim ({feat_dim}) must be >= number of blocks ({num_blocks})")
    if noise_sigma < 0:
        raise GraphError(f"noise_sigma must be non-negative, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    features = np.zeros((graph.num_nodes, feat_dim), dtype=np.float64)
    features[np.arange(graph.num_nodes), blocks] = 1.0
    if noise_sigma > 0:
        features += rng.normal(0.0, noise_sigma, size=features.shape)
    return features, blocks.copy()


def random_splits(
    num_nodes: int,
    seed: int,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
) -> np.ndarray:
    """Assign every node one of train/val/test, in the given proportions."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(num_nodes)
    n_train = int(round(fractions[0] * num_nodes))
    n_val = int(round(fractions[1] * num_nodes))
    split = np.empty(num_nodes, dtype="<U5")
    split[perm[:n_train]] = "train"
    split[perm[n_train : n_train + n_val]] = "val"
    split[perm[n_train + n_val :]] = "test"
    return split


# ======================================================================================
# Dataset bundle and directory format
# ======================================================================================


@dataclass(eq=False)
class DatasetBundle:
    graph: CsrGraph
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    raw_ids: list[str] | None = field(default=None)

    def __post_init__(self) -> None:
        n = self.graph.num_nodes
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DatasetError(f"features must have {n} rows, got shape {self.features.shape}")
        if self.labels.shape != (n,):
            raise DatasetError(f"labels must have {n} entries, got shape {self.labels.shape}")
        if self.split.shape != (n,):
            raise DatasetError(f"split must have {n} entries, got shape {self.split.shape}")
        unknown = set(np.unique(self.split).tolist()) - set(SPLIT_TAGS)
        if unknown:
            raise DatasetError(f"unknown split tags {sorted(unknown)}")
        if self.labels.size and self.labels.min() < 0:
            raise DatasetError("labels must be non-negative class ids")
        if self.raw_ids is not None and len(self.raw_ids) != n:
            raise DatasetError(f"raw_ids must have {n} entries, got {len(self.raw_ids)}")

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def ids(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.split == tag).astype(np.int64)

    def same_as(self, other: DatasetBundle) -> bool:
        return (
            self.graph.same_as(other.graph)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.split, other.split)
            and self.raw_ids == other.raw_ids
        )


def read_edge_list(path: str | Path) -> tuple[np.ndarray, list[str]]:
    """
    Read a whitespace-separated edge list with arbitrary node tokens.

    Tokens are remapped to dense ids in order of first appearance; the
    returned list maps dense id -> original token. ``#`` lines are skipped.
    """
    path = Path(path)
    index: dict[str, int] = {}
    edges: list[tuple[int, int]] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise DatasetError(f"{path.name}:{lineno}: expected two node tokens, got {line!r}")
            pair = []
            for tok in parts[:2]:
                if tok not in index:
                    index[tok] = len(index)
                pair.append(index[tok])
            edges.append((pair[0], pair[1]))
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2), list(index)


def save_dataset(bundle: DatasetBundle, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    graph = bundle.graph
    symmetric = graph.is_symmetric()
    arcs = graph.arcs()
    if symmetric:
        arcs = arcs[arcs[:, 0] < arcs[:, 1]]
    with (directory / "graph.edges").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# nodes={graph.num_nodes} symmetrize={int(symmetric)}\n")
        fh.writelines(f"{u}\t{v}\n" for u, v in arcs.tolist())
    with (directory / "features.csv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(",".join(map(repr, row)) + "\n" for row in bundle.features.tolist())
    with (directory / "labels.csv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{y}\n" for y in bundle.labels.tolist())
    with (directory / "splits.csv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{s}\n" for s in bundle.split.tolist())
    node_map = directory / "nodes.map"
    if bundle.raw_ids is not None:
        with node_map.open("w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(f"{i}\t{raw}\n" for i, raw in enumerate(bundle.raw_ids))
    elif node_map.exists():
        node_map.unlink()


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise DatasetError(f"missing dataset file: {path}")
    with path.open(encoding="utf-8") as fh:
        return fh.read().splitlines()


def _parse_header(line: str, path: Path) -> dict[str, int]:
    fields = {}
    for item in line.lstrip("#").split():
        key, sep, value = item.partition("=")
        if not sep or key not in ("nodes", "symmetrize"):
            raise DatasetError(f"{path.name}:1: malformed header item {item!r}")
        try:
            fields[key] = int(value)
        except ValueError:
            raise DatasetError(f"{path.name}:1: non-integer header value {item!r}") from None
    return fields


def load_dataset(directory: str | Path, symmetrize: bool | None = None) -> DatasetBundle:
    """
    Load a dataset directory written by :func:`save_dataset`.

    ``symmetrize`` overrides the graph header; without either, edges are
    treated as undirected.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory not found: {directory}")

    label_path = directory / "labels.csv"
    labels = []
    for lineno, line in enumerate(_read_lines(label_path), start=1):
        try:
            labels.append(int(line))
        except ValueError:
            raise DatasetError(f"{label_path.name}:{lineno}: expected an integer label, got {line!r}") from None
    labels_arr = np.asarray(labels, dtype=np.int64)

    edge_path = directory / "graph.edges"
    edge_lines = _read_lines(edge_path)
    header: dict[str, int] = {}
    if edge_lines and edge_lines[0].startswith("#"):
        header = _parse_header(edge_lines[0], edge_path)
    num_nodes = header.get("nodes", len(labels))
    if symmetrize is None:
        symmetrize = bool(header.get("symmetrize", 1))

    edges = []
    for lineno, line in enumerate(edge_lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        try:
            if len(parts) != 2:
                raise ValueError
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise DatasetError(f"{edge_path.name}:{lineno}: expected 'u<TAB>v', got {line!r}") from None
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise DatasetError(f"{edge_path.name}:{lineno}: node id outside [0, {num_nodes})")
        edges.append((u, v))
    graph = build_csr(np.asarray(edges, dtype=np.int64).reshape(-1, 2), num_nodes, symmetrize=symmetrize)

    feat_path = directory / "features.csv"
    rows = []
    width = None
    for lineno, line in enumerate(_read_lines(feat_path), start=1):
        try:
            row = [float(x) for x in line.split(",")]
        except ValueError:
            raise DatasetError(f"{feat_path.name}:{lineno}: non-numeric feature value in {line!r}") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DatasetError(f"{feat_path.name}:{lineno}: expected {width} columns, got {len(row)}")
        rows.append(row)
    features = np.asarray(rows, dtype=np.float64).reshape(len(rows), width or 0)

    split_path = directory / "splits.csv"
    split = []
    for lineno, line in enumerate(_read_lines(split_path), start=1):
        if line not in SPLIT_TAGS:
            raise DatasetError(f"{split_path.name}:{lineno}: unknown split tag {line!r}")
        split.append(line)

    for name, count in (
        ("features.csv", features.shape[0]),
        ("labels.csv", labels_arr.shape[0]),
        ("splits.csv", len(split)),
    ):
        if count != num_nodes:
            raise DatasetError(f"{name}: expected {num_nodes} rows, got {count}")

    raw_ids = None
    map_path = directory / "nodes.map"
    if map_path.exists():
        raw_ids = []
        for lineno, line in enumerate(_read_lines(map_path), start=1):
            idx, sep, raw = line.partition("\t")
            if not sep or idx != str(len(raw_ids)):
                raise DatasetError(f"{map_path.name}:{lineno}: expected '{len(raw_ids)}<TAB>raw-id'")
            raw_ids.append(raw)

    return DatasetBundle(
        graph=graph,
        features=features,
        labels=labels_arr,
        split=np.asarray(split, dtype="<U5"),
        raw_ids=raw_ids,
    )
