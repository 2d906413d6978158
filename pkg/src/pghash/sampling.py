"""Neuron selection from hash tables.

``batch_codes`` is always a ``(num_tables, batch_size)`` integer array whose
row ``t`` holds the batch's codes under ``tables[t].function``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .lsh import SENTINEL, HashTable, hamming_many


class Strategy(enum.Enum):
    VANILLA = "vanilla"
    HAMMING_TOPK = "hamming-topk"
    HAMMING_THRESHOLD = "hamming-threshold"


@dataclass(frozen=True)
class SamplingConfig:
    compression_ratio: float = 1.0
    num_tables: int = 50
    strategy: Strategy = Strategy.VANILLA
    top_k: int = 1
    threshold: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.compression_ratio <= 1:
            raise ValueError(f"compression ratio must lie in (0, 1], got {self.compression_ratio}")
        if self.num_tables < 1:
            raise ValueError("need at least one hash table")
        if self.top_k < 1:
            raise ValueError("top_k must be positive")
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")

    def cap(self, n: int) -> int:
        cap = int(np.floor(self.compression_ratio * n + 1e-9))
        if cap < 1:
            raise ValueError(f"compression ratio {self.compression_ratio} selects no neuron out of {n}")
        return cap


@dataclass(frozen=True)
class NeuronSet:
    """Sorted, duplicate-free neuron indices.

    ``tables_used`` records how many tables were consulted before the
    selection stopped, so per-sample matches can be re-derived later.
    """

    indices: np.ndarray
    tables_used: int = 0

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    def __contains__(self, j):
        i = np.searchsorted(self.indices, j)
        return i < len(self.indices) and self.indices[i] == j

    def __iter__(self):
        return iter(self.indices.tolist())


def random_keep(indices: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly keep ``size`` of ``indices`` (which must be sorted)."""
    if len(indices) <= size:
        return indices
    keep = rng.choice(len(indices), size=size, replace=False)
    return np.sort(indices[keep])


def _check_tables(tables, n: int, batch_codes) -> np.ndarray:
    if len(tables) == 0:
        raise ValueError("need at least one table")
    for t in tables:
        if t.n != n:
            raise ValueError(f"table covers {t.n} neurons, expected {n}")
    codes = np.asarray(batch_codes, dtype=np.int64)
    if codes.ndim == 1:
        codes = codes[None, :]
    if codes.shape[0] < len(tables):
        raise ValueError(f"codes given for {codes.shape[0]} tables, have {len(tables)}")
    return codes


def vanilla_sample(batch_codes, tables: list[HashTable], cfg: SamplingConfig, n: int,
                   rng: np.random.Generator | None = None) -> NeuronSet:
    """Exact-match selection, table by table, stopping at the first table past the cap."""
    codes = _check_tables(tables, n, batch_codes)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    cap = cfg.cap(n)
    selected = np.zeros(n, dtype=bool)
    for t, table in enumerate(tables):
        for q in codes[t]:
            selected[table.lookup(q)] = True
        if selected.sum() > cap:
            return NeuronSet(random_keep(np.flatnonzero(selected), cap, rng), t + 1)
    return NeuronSet(np.flatnonzero(selected), len(tables))


def brute_force_sample(batch_codes, tables: list[HashTable], n: int, tables_used: int | None = None):
    """Linear-scan union of exact matches (no cap); a cross-check for bucket lookups."""
    codes = _check_tables(tables, n, batch_codes)
    used = len(tables) if tables_used is None else tables_used
    hit = np.zeros(n, dtype=bool)
    for t in range(used):
        for q in codes[t]:
            if q == SENTINEL and not tables[t].function.kind.is_bits:
                continue
            hit |= tables[t].codes == q
    return np.flatnonzero(hit)


def average_hamming(batch_codes, tables: list[HashTable]) -> np.ndarray:
    """``(batch_size, n)`` Hamming distance averaged over tables."""
    if not all(t.function.kind.is_bits for t in tables):
        raise TypeError("Hamming sampling needs sign-projection codes")
    codes = np.asarray(batch_codes, dtype=np.int64)
    total = np.zeros((codes.shape[1], tables[0].n))
    for t, table in enumerate(tables):
        total += hamming_many(codes[t][:, None], table.codes[None, :])
    return total / len(tables)


def hamming_sample(batch_codes, tables: list[HashTable], cfg: SamplingConfig, n: int,
                   rng: np.random.Generator | None = None) -> NeuronSet:
    """Selection by small Hamming distance averaged over all tables.

    ``HAMMING_TOPK`` keeps, per sample, the ``top_k`` closest neurons (ties by
    index); ``HAMMING_THRESHOLD`` keeps neurons within ``threshold``.  The
    batch union is then capped exactly as in vanilla sampling.
    """
    codes = _check_tables(tables, n, batch_codes)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    dist = average_hamming(codes[:len(tables)], tables)
    selected = np.zeros(n, dtype=bool)
    if cfg.strategy is Strategy.HAMMING_TOPK:
        k = min(cfg.top_k, n)
        for row in dist:
            selected[np.argsort(row, kind="stable")[:k]] = True
    elif cfg.strategy is Strategy.HAMMING_THRESHOLD:
        selected = np.any(dist <= cfg.threshold + 1e-12, axis=0) if len(dist) else selected
    else:
        raise ValueError(f"not a Hamming strategy: {cfg.strategy}")
    return NeuronSet(random_keep(np.flatnonzero(selected), cfg.cap(n), rng), len(tables))


def sample(batch_codes, tables, cfg: SamplingConfig, n: int, rng=None) -> NeuronSet:
    if cfg.strategy is Strategy.VANILLA:
        return vanilla_sample(batch_codes, tables, cfg, n, rng)
    return hamming_sample(batch_codes, tables, cfg, n, rng)


def sampled_softmax_select(n: int, fraction: float, seed=None,
                           rng: np.random.Generator | None = None) -> NeuronSet:
    """Uniform random subset of ``floor(fraction * n)`` neurons."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    size = int(np.floor(fraction * n + 1e-9))
    if rng is None:
        rng = np.random.default_rng(seed)
    return NeuronSet(np.sort(rng.choice(n, size=size, replace=False)))


def match_mask(batch_codes, tables: list[HashTable], columns: np.ndarray, tables_used: int) -> np.ndarray:
    """``(batch_size, len(columns))`` mask: did sample ``m`` match ``columns[j]`` in any used table?"""
    codes = np.asarray(batch_codes, dtype=np.int64)
    columns = np.asarray(columns, dtype=np.int64)
    mask = np.zeros((codes.shape[1], len(columns)), dtype=bool)
    for t in range(tables_used):
        col_codes = tables[t].codes[columns]
        hit = codes[t][:, None] == col_codes[None, :]
        if not tables[t].function.kind.is_bits:
            hit &= codes[t][:, None] != SENTINEL
        mask |= hit
    return mask
