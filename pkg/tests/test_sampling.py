import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pghash.lsh import HashFunction, HashKind, HashTable, build_table
from pghash.sampling import (
    NeuronSet,
    SamplingConfig,
    Strategy,
    brute_force_sample,
    hamming_sample,
    match_mask,
    sampled_softmax_select,
    vanilla_sample,
)


def stub_table(codes, k=3):
    f = HashFunction(HashKind.PGHASH, k, 4, seed=0)
    return HashTable(f, np.array(codes))


def random_tables(num_tables, n, k=3, c=4, seed=0):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((c, n))
    return [build_table(HashFunction(HashKind.PGHASH, k, c, seed=seed * 1000 + t), W) for t in range(num_tables)]


def random_queries(tables, batch, seed=1):
    X = np.random.default_rng(seed).standard_normal((tables[0].function.dim, batch))
    return np.stack([t.function.codes(X) for t in tables])


class TestVanilla:
    table = stub_table([0b101, 0b100, 0b101, 0b111])

    def test_exact_match(self):
        theta = vanilla_sample([[0b101]], [self.table], SamplingConfig(1.0, 1), n=4)
        assert theta.indices.tolist() == [0, 2]

    def test_cap_keeps_one_of_matches(self):
        picks = set()
        for seed in range(30):
            theta = vanilla_sample([[0b101]], [self.table], SamplingConfig(0.25, 1, seed=seed), n=4)
            assert len(theta) == 1
            picks.add(theta.indices[0])
        assert picks == {0, 2}

    def test_cap_is_seeded(self):
        cfg = SamplingConfig(0.25, 1, seed=7)
        a = vanilla_sample([[0b101]], [self.table], cfg, n=4)
        b = vanilla_sample([[0b101]], [self.table], cfg, n=4)
        assert a.indices.tolist() == b.indices.tolist()

    def test_no_match(self):
        assert len(vanilla_sample([[0b010]], [self.table], SamplingConfig(1.0, 1), n=4)) == 0

    def test_empty_batch(self):
        theta = vanilla_sample(np.zeros((1, 0), dtype=np.int64), [self.table], SamplingConfig(1.0, 1), n=4)
        assert len(theta) == 0

    def test_n_mismatch(self):
        with pytest.raises(ValueError):
            vanilla_sample([[0], [0]], [self.table, stub_table([0, 1])], SamplingConfig(), n=4)

    def test_early_return_at_table_boundary(self):
        t1 = stub_table([1, 1, 1, 0, 0, 0])
        t2 = stub_table([0, 0, 0, 1, 1, 1])
        cfg = SamplingConfig(0.5, 2, seed=3)
        theta = vanilla_sample([[1], [1]], [t1, t2], cfg, n=6)
        # table 1 adds three neurons, which equals the cap, so table 2 is consulted
        assert theta.tables_used == 2 and len(theta) == 3
        theta = vanilla_sample([[1], [1]], [t2, t1], SamplingConfig(1 / 3, 2, seed=3), n=6)
        assert theta.tables_used == 1 and set(theta) <= {3, 4, 5}

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
    def test_bucket_lookup_equals_linear_scan(self, tau, batch, seed):
        tables = random_tables(tau, 60, seed=seed)
        codes = random_queries(tables, batch, seed=seed + 1)
        theta = vanilla_sample(codes, tables, SamplingConfig(1.0, tau), n=60)
        np.testing.assert_array_equal(theta.indices, brute_force_sample(codes, tables, 60))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.02, 1.0), st.integers(1, 5), st.integers(0, 10_000))
    def test_never_exceeds_cap(self, cr, tau, seed):
        tables = random_tables(tau, 50, k=2, seed=seed)
        codes = random_queries(tables, 6, seed=seed)
        cfg = SamplingConfig(cr, tau, seed=seed)
        assert len(vanilla_sample(codes, tables, cfg, n=50)) <= cfg.cap(50)

    def test_monotone_in_tables(self):
        tables = random_tables(6, 80, k=4, seed=5)
        codes = random_queries(tables, 3, seed=9)
        prev = set()
        for tau in range(1, 7):
            cur = set(vanilla_sample(codes, tables[:tau], SamplingConfig(1.0, tau), n=80))
            assert prev <= cur
            prev = cur


class TestHamming:
    table = stub_table([0b101, 0b100, 0b101, 0b111])

    def test_threshold_zero_equals_vanilla(self):
        for seed in range(20):
            tables = random_tables(1, 40, k=2, seed=seed)
            codes = random_queries(tables, 5, seed=seed)
            for cr in (1.0, 0.2):
                v = vanilla_sample(codes, tables, SamplingConfig(cr, 1, seed=seed), n=40)
                h = hamming_sample(codes, tables, SamplingConfig(
                    cr, 1, Strategy.HAMMING_THRESHOLD, threshold=0.0, seed=seed), n=40)
                np.testing.assert_array_equal(v.indices, h.indices)

    def test_topk_all(self):
        cfg = SamplingConfig(1.0, 1, Strategy.HAMMING_TOPK, top_k=4)
        assert hamming_sample([[0b000]], [self.table], cfg, n=4).indices.tolist() == [0, 1, 2, 3]

    def test_topk_one_exact(self):
        table = stub_table([0b001, 0b110, 0b011, 0b111])
        cfg = SamplingConfig(1.0, 1, Strategy.HAMMING_TOPK, top_k=1)
        assert hamming_sample([[0b110]], [table], cfg, n=4).indices.tolist() == [1]

    def test_topk_tie_by_index(self):
        cfg = SamplingConfig(1.0, 1, Strategy.HAMMING_TOPK, top_k=1)
        assert hamming_sample([[0b101]], [self.table], cfg, n=4).indices.tolist() == [0]

    def test_threshold_averages_tables(self):
        t1 = stub_table([0b000, 0b011])
        t2 = stub_table([0b001, 0b000])
        cfg = SamplingConfig(1.0, 2, Strategy.HAMMING_THRESHOLD, threshold=0.5)
        # neuron 0: distances 0 and 1 -> 0.5; neuron 1: 2 and 0 -> 1.0
        assert hamming_sample([[0b000], [0b000]], [t1, t2], cfg, n=2).indices.tolist() == [0]

    def test_wta_rejected(self):
        f = HashFunction(HashKind.DWTA, 2, 4, seed=0)
        table = HashTable(f, np.array([0, 1]))
        with pytest.raises(TypeError):
            hamming_sample([[0]], [table], SamplingConfig(1.0, 1, Strategy.HAMMING_TOPK), n=2)


class TestSampledSoftmax:
    def test_full(self):
        assert sampled_softmax_select(7, 1.0, seed=0).indices.tolist() == list(range(7))

    def test_tenth(self):
        seen = {int(sampled_softmax_select(10, 0.1, seed=s).indices[0]) for s in range(200)}
        assert seen == set(range(10))

    def test_seeded(self):
        a = sampled_softmax_select(1000, 0.1, seed=3)
        b = sampled_softmax_select(1000, 0.1, seed=3)
        assert a.indices.tolist() == b.indices.tolist() and len(a) == 100

    def test_range(self):
        with pytest.raises(ValueError):
            sampled_softmax_select(10, 0.0, seed=0)


def test_neuron_set_dedups():
    s = NeuronSet([3, 1, 3, 2])
    assert s.indices.tolist() == [1, 2, 3] and 2 in s and 5 not in s


def test_match_mask_agrees_with_lookups():
    tables = random_tables(3, 30, k=2, seed=2)
    codes = random_queries(tables, 4, seed=3)
    cols = np.arange(30)
    mask = match_mask(codes, tables, cols, 3)
    for m in range(4):
        want = set()
        for t in range(3):
            want |= set(tables[t].lookup(codes[t, m]).tolist())
        assert set(np.flatnonzero(mask[m])) == want


def test_config_rejects_zero_cap():
    with pytest.raises(ValueError):
        SamplingConfig(0.01, 1).cap(10)
