"""Extreme-classification sparse files and synthetic multi-label data.

File format (one header line, then one line per point)::

    num_points num_features num_labels
    l1,l2,... i1:v1 i2:v2 ...

The label field may be empty, in which case the line starts with a space.
Files ending in ``.gz`` are read and written through gzip.
"""

from __future__ import annotations

import gzip
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class ParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class SparseExample:
    indices: tuple[int, ...]
    values: tuple[float, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.indices) != len(self.values):
            raise ValueError("feature indices and values differ in length")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("feature indices must be strictly increasing")
        if any(b <= a for a, b in zip(self.labels, self.labels[1:])):
            raise ValueError("labels must be sorted and unique")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("feature values must be finite")

    @property
    def features(self) -> list[tuple[int, float]]:
        return list(zip(self.indices, self.values))


@dataclass(frozen=True)
class DatasetMeta:
    num_points: int
    num_features: int
    num_labels: int
    avg_labels_per_point: float = 0.0


@dataclass
class Dataset:
    meta: DatasetMeta
    examples: list[SparseExample]
    _csr: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.examples)

    @property
    def num_features(self) -> int:
        return self.meta.num_features

    @property
    def num_labels(self) -> int:
        return self.meta.num_labels

    def features(self) -> sp.csr_matrix:
        """All points as a ``num_points x num_features`` CSR matrix (cached)."""
        if self._csr is None:
            self._csr = to_csr(self.examples, self.meta.num_features)
        return self._csr

    def labels(self, rows) -> list[tuple[int, ...]]:
        return [self.examples[i].labels for i in rows]

    def subset(self, rows) -> "Dataset":
        ex = [self.examples[i] for i in rows]
        return Dataset(make_meta(ex, self.meta.num_features, self.meta.num_labels), ex)


def make_meta(examples, num_features: int, num_labels: int) -> DatasetMeta:
    avg = sum(len(e.labels) for e in examples) / len(examples) if examples else 0.0
    return DatasetMeta(len(examples), num_features, num_labels, avg)


def to_csr(examples, num_features: int) -> sp.csr_matrix:
    indptr = np.zeros(len(examples) + 1, dtype=np.int64)
    for i, e in enumerate(examples):
        indptr[i + 1] = indptr[i] + len(e.indices)
    indices = np.fromiter((j for e in examples for j in e.indices), dtype=np.int64, count=indptr[-1])
    values = np.fromiter((v for e in examples for v in e.values), dtype=np.float64, count=indptr[-1])
    return sp.csr_matrix((values, indices, indptr), shape=(len(examples), num_features))


def _open(path, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="ascii")
    return open(path, mode, encoding="ascii")


def _parse_line(line: str, meta: DatasetMeta, path, lineno: int) -> SparseExample:
    line = line.rstrip("\r\n")
    head, _, rest = line.partition(" ")
    if ":" in head:
        # no label field and no leading space
        head, rest = "", line
    try:
        labels = [int(tok) for tok in head.split(",")] if head else []
    except ValueError:
        raise ParseError(path, lineno, f"non-numeric label in {head!r}") from None
    indices, values = [], []
    for tok in rest.split():
        idx, sep, val = tok.partition(":")
        if not sep:
            raise ParseError(path, lineno, f"expected index:value, got {tok!r}")
        try:
            indices.append(int(idx))
            values.append(float(val))
        except ValueError:
            raise ParseError(path, lineno, f"non-numeric feature {tok!r}") from None
    for j in indices:
        if not 0 <= j < meta.num_features:
            raise ParseError(path, lineno, f"feature index {j} outside [0, {meta.num_features})")
    for lab in labels:
        if not 0 <= lab < meta.num_labels:
            raise ParseError(path, lineno, f"label {lab} outside [0, {meta.num_labels})")
    if len(set(indices)) != len(indices):
        raise ParseError(path, lineno, "duplicate feature index")
    if not all(math.isfinite(v) for v in values):
        raise ParseError(path, lineno, "non-finite feature value")
    order = np.argsort(indices, kind="stable")
    return SparseExample(tuple(indices[i] for i in order), tuple(values[i] for i in order),
                         tuple(sorted(set(labels))))


def iter_xc(path):
    """Stream ``(meta, example)`` pairs from an extreme-classification file."""
    with _open(path, "r") as fh:
        header = fh.readline()
        try:
            n, f, l = (int(t) for t in header.split())
        except ValueError:
            raise ParseError(path, 1, f"bad header {header.strip()!r}; expected 'points features labels'") from None
        meta = DatasetMeta(n, f, l)
        for lineno, line in enumerate(fh, start=2):
            if not line.strip() and not line.startswith(" "):
                continue
            yield meta, _parse_line(line, meta, path, lineno)


def parse_xc(path) -> Dataset:
    examples = []
    meta = None
    for meta, ex in iter_xc(path):
        examples.append(ex)
    if meta is None:
        with _open(path, "r") as fh:
            header = fh.readline().split()
        if len(header) != 3:
            raise ParseError(path, 1, "missing header")
        meta = DatasetMeta(*(int(t) for t in header))
    if len(examples) != meta.num_points:
        raise ParseError(path, len(examples) + 1,
                         f"header declares {meta.num_points} points, file has {len(examples)}")
    return Dataset(make_meta(examples, meta.num_features, meta.num_labels), examples)


def write_xc(dataset: Dataset, path) -> None:
    m = dataset.meta
    with _open(path, "w") as fh:
        fh.write(f"{len(dataset)} {m.num_features} {m.num_labels}\n")
        for e in dataset.examples:
            labels = ",".join(str(lab) for lab in e.labels)
            feats = " ".join(f"{j}:{v!r}" for j, v in zip(e.indices, e.values))
            fh.write(f"{labels} {feats}\n")


def synth_dataset(num_points: int, num_features: int, num_labels: int, feats_per_point: int = 10,
                  labels_per_point: int = 1, signal_strength: float = 10.0, seed: int = 0) -> Dataset:
    """Synthetic extreme multi-label data with a learnable feature -> label map.

    Every label owns a random signature of ``feats_per_point`` features with
    weights in [0.5, 1].  A point superposes the signatures of its labels,
    adds ``|N(0, 1)| / signal_strength`` noise on as many random features,
    and keeps its ``feats_per_point`` largest entries.  ``signal_strength``
    may be ``inf`` for noise-free data.
    """
    if min(num_points, num_features, num_labels, feats_per_point, labels_per_point) < 1:
        raise ValueError("all sizes must be positive")
    if labels_per_point > num_labels:
        raise ValueError("labels_per_point exceeds num_labels")
    if feats_per_point > num_features:
        raise ValueError("feats_per_point exceeds num_features")
    if not signal_strength > 0:
        raise ValueError("signal_strength must be positive")
    rng = np.random.default_rng(seed)
    sig_idx = np.stack([rng.choice(num_features, feats_per_point, replace=False) for _ in range(num_labels)])
    sig_val = rng.uniform(0.5, 1.0, size=(num_labels, feats_per_point))
    noise_scale = 0.0 if math.isinf(signal_strength) else 1.0 / signal_strength
    examples = []
    for _ in range(num_points):
        labels = np.sort(rng.choice(num_labels, labels_per_point, replace=False))
        acc: dict[int, float] = {}
        for lab in labels:
            for j, v in zip(sig_idx[lab], sig_val[lab]):
                acc[int(j)] = acc.get(int(j), 0.0) + float(v)
        noise_idx = rng.choice(num_features, feats_per_point, replace=False)
        noise = np.abs(rng.standard_normal(feats_per_point)) * noise_scale
        if noise_scale:
            for j, v in zip(noise_idx, noise):
                acc[int(j)] = acc.get(int(j), 0.0) + float(v)
        items = sorted(acc.items(), key=lambda kv: (-kv[1], kv[0]))[:feats_per_point]
        items.sort()
        examples.append(SparseExample(tuple(j for j, _ in items), tuple(v for _, v in items),
                                      tuple(int(lab) for lab in labels)))
    return Dataset(make_meta(examples, num_features, num_labels), examples)


def train_test_split(dataset: Dataset, test_fraction: float = 0.1, seed: int = 0):
    """Seeded shuffle split (90/10 by default)."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_test = int(round(test_fraction * len(dataset)))
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))
