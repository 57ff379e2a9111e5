import itertools
import math

import numpy as np
import pytest
from scipy import stats

from conftest import random_edges
from dafos.graph import build_csr, gen_preferential_attachment, node_scores
from dafos.sampler import (
    SamplingError,
    SeedOrderPolicy,
    build_blocks,
    full_blocks,
    make_batches,
    order_seeds,
    sample_block,
)


def star(k):
    return build_csr([(0, i) for i in range(1, k + 1)], k + 1)


def edge_set(graph):
    return {(int(u), int(v)) for u, v in graph.arcs()}


def check_block(graph, block, fanout, self_loop=True):
    """Structural contracts of one block against the CSR."""
    arcs = edge_set(graph)
    assert np.array_equal(block.src_ids[: block.num_dst], block.dst_ids)
    assert np.unique(block.src_ids).size == block.num_src
    per_dst = {}
    for s, d in block.edges.tolist():
        sg, dg = int(block.src_ids[s]), int(block.dst_ids[d])
        if sg == dg:
            continue
        assert (dg, sg) in arcs  # sg is a neighbor of dg
        per_dst.setdefault(d, []).append(sg)
    for d, v in enumerate(block.dst_ids.tolist()):
        got = per_dst.get(d, [])
        deg = int(graph.offsets[v + 1] - graph.offsets[v])
        assert len(got) == min(deg, fanout)
        assert len(set(got)) == len(got)
    selfs = sum(1 for s, d in block.edges.tolist() if s == d)
    assert selfs == (block.num_dst if self_loop else 0)


class TestSampleBlock:
    def test_degree_below_fanout_takes_all(self):
        g = star(3)
        b = sample_block(g, [0], 5, np.random.default_rng(0))
        assert sorted(b.src_ids.tolist()) == [0, 1, 2, 3]
        assert b.edge_src.size == 4
        check_block(g, b, 5)

    def test_degree_above_fanout_takes_exactly_fanout(self):
        g = star(10)
        b = sample_block(g, [0], 5, np.random.default_rng(0))
        check_block(g, b, 5)
        assert b.num_src == 6

    def test_duplicate_dst_rejected(self):
        with pytest.raises(SamplingError):
            sample_block(star(3), [0, 1, 0], 2, np.random.default_rng(0))

    def test_bad_fanout_rejected(self):
        with pytest.raises(SamplingError):
            sample_block(star(3), [0], 0, np.random.default_rng(0))

    def test_no_self_loop(self):
        g = star(4)
        b = sample_block(g, [0, 1], 2, np.random.default_rng(1), self_loop=False)
        check_block(g, b, 2, self_loop=False)

    def test_contracts_on_random_graphs(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 60))
            g = build_csr(random_edges(rng, n, int(rng.integers(0, 300))), n)
            dst = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
            fanout = int(rng.integers(1, 12))
            check_block(g, sample_block(g, dst, fanout, rng), fanout)

    def test_uniform_selection_chi_square(self):
        d, f, draws = 20, 5, 100_000
        g = star(d)
        rng = np.random.default_rng(2024)
        counts = np.zeros(d + 1, dtype=np.int64)
        for _ in range(draws):
            b = sample_block(g, [0], f, rng)
            counts[b.src_ids[1:]] += 1
        counts = counts[1:]
        p = f / d
        assert np.allclose(counts / draws, p, atol=0.01)
        # Fixed-size subsets: counts sum to draws*f, cov = a (I - J/d), a = N p (1-p) d/(d-1)
        a = draws * p * (1 - p) * d / (d - 1)
        statistic = float(((counts - draws * p) ** 2).sum() / a)
        assert stats.chi2.sf(statistic, d - 1) > 1e-3


class TestBuildBlocks:
    def test_single_layer_ego_net(self):
        g = star(4)
        (b,) = build_blocks(g, [0], [10], np.random.default_rng(0))
        assert sorted(b.src_ids.tolist()) == [0, 1, 2, 3, 4]

    def test_two_hop_path(self):
        g = build_csr([(0, 1), (1, 2)], 3)
        blocks = build_blocks(g, [0], [2, 2], np.random.default_rng(0))
        # enumerate the 2-hop ego net of 0 directly
        hop1 = {0} | set(g.neighbors(0).tolist())
        hop2 = hop1 | {int(u) for v in hop1 for u in g.neighbors(v)}
        assert set(blocks[0].src_ids.tolist()) >= hop2 == {0, 1, 2}

    def test_layer_chaining(self):
        g, _ = gen_preferential_attachment(500, 3, seed=0)
        seeds = np.arange(0, 500, 7)
        blocks = build_blocks(g, seeds, [3, 4, 5], np.random.default_rng(3))
        assert np.array_equal(blocks[-1].dst_ids, seeds)
        for lo, hi in zip(blocks[:-1], blocks[1:]):
            assert np.array_equal(lo.dst_ids, hi.src_ids)
        assert set(seeds.tolist()) <= set(blocks[0].src_ids.tolist())
        for block, f in zip(blocks, [3, 4, 5]):
            check_block(g, block, f)

    def test_per_layer_generators(self):
        g, _ = gen_preferential_attachment(300, 3, seed=0)
        seeds = np.arange(20)
        a = build_blocks(g, seeds, [2, 2], [np.random.default_rng(1), np.random.default_rng(2)])
        b = build_blocks(g, seeds, [2, 2], [np.random.default_rng(1), np.random.default_rng(2)])
        for x, y in zip(a, b):
            assert np.array_equal(x.src_ids, y.src_ids)
            assert np.array_equal(x.edges, y.edges)
        with pytest.raises(SamplingError):
            build_blocks(g, seeds, [2, 2], [np.random.default_rng(1)])

    def test_sample_count_monotone_in_fanout(self):
        g, _ = gen_preferential_attachment(400, 3, seed=1)
        nodes = np.arange(400)
        counts = []
        for f in (1, 3, 8, 20, 1000):
            b = sample_block(g, nodes, f, np.random.default_rng(0), self_loop=False)
            counts.append(b.in_counts())
        for lo, hi in zip(counts[:-1], counts[1:]):
            assert np.all(hi >= lo)
        assert np.array_equal(counts[-1], g.degrees())

    def test_full_blocks_keep_everything(self):
        g, _ = gen_preferential_attachment(200, 2, seed=3)
        blocks = full_blocks(g, [0, 5], 2)
        check_block(g, blocks[0], 10**9)
        check_block(g, blocks[1], 10**9)


class TestOrderSeeds:
    def test_warmup_sort(self):
        policy = SeedOrderPolicy("score-warmup", 2)
        out = order_seeds(np.array([1.0, 5.0, 3.0]), [0, 1, 2], 1, policy, np.random.default_rng(0))
        assert out.tolist() == [1, 2, 0]

    def test_tie_break_ascending(self):
        policy = SeedOrderPolicy("score-warmup", 1)
        out = order_seeds(np.ones(6), [5, 3, 1, 4], 1, policy, np.random.default_rng(0))
        assert out.tolist() == [1, 3, 4, 5]

    def test_warmup_matches_degree_sort(self):
        g, _ = gen_preferential_attachment(1000, 2, seed=8)
        scores = node_scores(g)
        ids = np.arange(1000)
        out = order_seeds(scores, ids, 3, SeedOrderPolicy("score-warmup", 3), np.random.default_rng(0))
        expected = sorted(ids.tolist(), key=lambda v: (-g.degrees()[v], v))
        assert out.tolist() == expected

    def test_epoch_must_be_positive(self):
        with pytest.raises(ValueError):
            order_seeds(np.ones(3), [0, 1], 0, SeedOrderPolicy(), np.random.default_rng(0))

    @pytest.mark.parametrize("policy", [SeedOrderPolicy("score-warmup", 2), SeedOrderPolicy("shuffle", 5)])
    def test_after_warmup_uniform_permutations(self, policy):
        ids = [0, 1, 2, 3, 4]
        perms = {p: i for i, p in enumerate(itertools.permutations(ids))}
        counts = np.zeros(len(perms))
        rng = np.random.default_rng(11)
        epoch = 3 if policy.mode == "score-warmup" else 1
        for _ in range(10_000):
            counts[perms[tuple(order_seeds(np.arange(5.0), ids, epoch, policy, rng).tolist())]] += 1
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            SeedOrderPolicy("weighted", 1)
        with pytest.raises(ValueError):
            SeedOrderPolicy("shuffle", -1)


class TestMakeBatches:
    def test_sizes(self):
        assert [b.size for b in make_batches(np.arange(10), 4)] == [4, 4, 2]

    def test_single_batch(self):
        assert len(make_batches(np.arange(10), 10)) == 1
        assert len(make_batches(np.arange(10), 50)) == 1

    def test_partition(self):
        ids = np.random.default_rng(0).permutation(37)
        assert np.concatenate(make_batches(ids, 5)).tolist() == ids.tolist()

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            make_batches([1, 2], 0)
