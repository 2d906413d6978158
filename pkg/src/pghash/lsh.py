"""Folding operators, hash families and hash tables.

Two kinds of code are produced:

* sign-projection codes (SimHash, PGHash): ``k`` bits packed into one
  integer, bit ``i`` set when the ``i``-th projection is strictly positive;
* winner-take-all codes (DWTA, PGHash-D): the position of the largest
  entry among ``k`` selected coordinates, or ``SENTINEL`` when every
  selected entry is zero.

Everything is a pure function of its inputs and a 64-bit seed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

SENTINEL = -1
MAX_BITS = 64


class FoldKind(enum.Enum):
    IDENTITY_TILING = "identity_tiling"
    PERMUTE_TRUNCATE = "permute_truncate"


class HashKind(enum.Enum):
    PGHASH = "pghash"
    SIMHASH = "simhash"
    DWTA = "dwta"
    PGHASH_D = "pghash-d"

    @property
    def is_bits(self) -> bool:
        return self in (HashKind.PGHASH, HashKind.SIMHASH)

    @property
    def is_folded(self) -> bool:
        return self in (HashKind.PGHASH, HashKind.PGHASH_D)


class ArgmaxRule(enum.Enum):
    ABS_MAX = "absmax"
    MAX = "max"


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.uint64(seed & 0xFFFF_FFFF_FFFF_FFFF))


# ---------------------------------------------------------------------------
# Folding
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FoldingOperator:
    """Structured ``c x d`` compression matrix.

    ``IDENTITY_TILING`` is ``[I_c | I_c | ... | I_c]``: coordinate ``i`` of the
    output sums ``x[i], x[i + c], x[i + 2c], ...``.  ``PERMUTE_TRUNCATE``
    keeps the first ``c`` entries of a permuted input, i.e. output ``i`` is
    ``x[permutation[i]]``.
    """

    input_dim: int
    sketch_dim: int
    kind: FoldKind = FoldKind.IDENTITY_TILING
    permutation: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        d, c = self.input_dim, self.sketch_dim
        if d < 1 or c < 1:
            raise ValueError(f"dimensions must be positive, got d={d}, c={c}")
        if c > d:
            raise ValueError(f"sketch_dim {c} exceeds input_dim {d}")
        if self.kind is FoldKind.IDENTITY_TILING:
            if d % c:
                raise ValueError(
                    f"sketch_dim {c} must divide input_dim {d}; zero-pad the input "
                    f"up to {pad_to_multiple(d, c)}"
                )
        else:
            perm = self.permutation
            if perm is None:
                raise ValueError("PERMUTE_TRUNCATE needs a permutation")
            perm = np.asarray(perm, dtype=np.int64)
            if perm.shape != (d,) or not np.array_equal(np.sort(perm), np.arange(d)):
                raise ValueError("permutation must be a bijection on range(input_dim)")
            perm.setflags(write=False)
            object.__setattr__(self, "permutation", perm)

    @classmethod
    def tiling(cls, d: int, c: int) -> "FoldingOperator":
        return cls(d, c, FoldKind.IDENTITY_TILING)

    @classmethod
    def permute_truncate(cls, d: int, c: int, seed: int | None = None,
                         permutation=None) -> "FoldingOperator":
        if permutation is None:
            if seed is None:
                raise ValueError("need a seed or an explicit permutation")
            permutation = _rng(seed).permutation(d)
        return cls(d, c, FoldKind.PERMUTE_TRUNCATE, np.asarray(permutation))

    @property
    def ratio(self) -> int:
        """Number of stacked identity blocks (``d / c``) for tiling folds."""
        return self.input_dim // self.sketch_dim

    def matrix(self) -> np.ndarray:
        """Dense ``c x d`` representation; meant for tests and small sizes."""
        d, c = self.input_dim, self.sketch_dim
        if self.kind is FoldKind.IDENTITY_TILING:
            return np.tile(np.eye(c), (1, d // c))
        B = np.zeros((c, d))
        B[np.arange(c), self.permutation[:c]] = 1.0
        return B

    def __call__(self, x):
        return fold(self, x)


def pad_to_multiple(d: int, c: int) -> int:
    return -(-d // c) * c


def fold(op: FoldingOperator, x) -> np.ndarray:
    """Apply ``op`` to a vector (length ``d``) or to the columns of a ``d x n`` matrix.

    Sparse inputs (scipy sparse vectors or matrices) are accepted and the
    output is always dense.
    """
    d, c = op.input_dim, op.sketch_dim
    if sp.issparse(x):
        return _fold_sparse(op, x)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != d or x.ndim not in (1, 2):
        raise ValueError(f"expected leading dimension {d}, got shape {x.shape}")
    if op.kind is FoldKind.IDENTITY_TILING:
        return x.reshape((d // c, c) + x.shape[1:]).sum(axis=0)
    return x[op.permutation[:c]].copy()


def _fold_sparse(op: FoldingOperator, x) -> np.ndarray:
    d, c = op.input_dim, op.sketch_dim
    coo = sp.coo_matrix(x)
    if d not in coo.shape:
        raise ValueError(f"sparse input of shape {coo.shape} has no axis of length {d}")
    # treat a 1 x d row as a vector
    vector = coo.shape[0] == 1 and coo.shape[1] == d and d != 1
    rows, cols = (coo.col, coo.row) if vector else (coo.row, coo.col)
    ncols = 1 if vector else coo.shape[1]
    if op.kind is FoldKind.IDENTITY_TILING:
        out_rows, keep = rows % c, np.ones(rows.shape, dtype=bool)
    else:
        inverse = np.full(d, -1, dtype=np.int64)
        inverse[op.permutation[:c]] = np.arange(c)
        out_rows = inverse[rows]
        keep = out_rows >= 0
    out = np.zeros((c, ncols))
    np.add.at(out, (out_rows[keep], cols[keep]), coo.data[keep])
    return out[:, 0] if vector else out


# ---------------------------------------------------------------------------
# Codes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HashCode:
    """A single code: packed bits for sign families, an index for WTA families."""

    value: int
    k: int
    is_index: bool = False

    @property
    def bits(self) -> list[int]:
        if self.is_index:
            raise TypeError("winner-take-all codes have no bit representation")
        return [(self.value >> i) & 1 for i in range(self.k)]

    def complement(self) -> "HashCode":
        if self.is_index:
            raise TypeError("winner-take-all codes have no complement")
        return HashCode(self.value ^ ((1 << self.k) - 1), self.k)


def hamming(a: HashCode, b: HashCode) -> int:
    if a.is_index or b.is_index:
        raise TypeError("Hamming distance is undefined for winner-take-all codes")
    if a.k != b.k:
        raise ValueError(f"code lengths differ: {a.k} vs {b.k}")
    return int(a.value ^ b.value).bit_count()


def hamming_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise popcount of ``a ^ b`` for integer code arrays (broadcasting)."""
    x = np.bitwise_xor(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64))
    return np.bitwise_count(x.astype(np.uint64)).astype(np.int64)


def pack_bits(projections: np.ndarray) -> np.ndarray:
    """Pack ``projections > 0`` along axis 0 into integers (bit ``i`` <- row ``i``)."""
    k = projections.shape[0]
    if k > MAX_BITS:
        raise ValueError(f"hash length {k} exceeds {MAX_BITS}")
    bits = (projections > 0).astype(np.uint64)
    weights = np.left_shift(np.uint64(1), np.arange(k, dtype=np.uint64))
    packed = np.tensordot(weights, bits, axes=(0, 0)) if bits.ndim > 1 else (weights * bits).sum()
    # codes are kept as int64; k == 64 wraps into the sign bit, which is harmless for equality
    return np.asarray(packed, dtype=np.uint64).view(np.int64)


def winner_take_all(window: np.ndarray, rule: ArgmaxRule = ArgmaxRule.ABS_MAX) -> np.ndarray:
    """Argmax over axis 0 with lowest-index tie-break; ``SENTINEL`` for all-zero windows."""
    scores = np.abs(window) if rule is ArgmaxRule.ABS_MAX else window
    idx = np.argmax(scores, axis=0).astype(np.int64)
    empty = ~np.any(window != 0, axis=0)
    return np.where(empty, SENTINEL, idx)


# ---------------------------------------------------------------------------
# Hash functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HashFunction:
    """One randomly drawn member of a hash family.

    ``dim`` is the length of the vectors the function is applied to: the
    sketch dimension ``c`` for PGHash / PGHash-D (inputs already folded) and
    the full dimension ``d`` for SimHash / DWTA.  ``projection`` is drawn
    from ``seed`` and reproduced bit-exactly on regeneration.
    """

    kind: HashKind
    k: int
    dim: int
    seed: int
    rule: ArgmaxRule = ArgmaxRule.ABS_MAX
    projection: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("hash length must be positive")
        if self.kind.is_bits and self.k > MAX_BITS:
            raise ValueError(f"hash length {self.k} exceeds {MAX_BITS}")
        if not self.kind.is_bits and self.k > self.dim:
            raise ValueError(f"cannot select {self.k} coordinates out of {self.dim}")
        rng = _rng(self.seed)
        if self.kind.is_bits:
            proj = rng.standard_normal((self.k, self.dim))
        else:
            proj = rng.choice(self.dim, size=self.k, replace=False).astype(np.int64)
        proj.setflags(write=False)
        object.__setattr__(self, "projection", proj)

    @classmethod
    def with_projection(cls, kind: HashKind, projection, dim: int | None = None,
                        seed: int = 0, rule: ArgmaxRule = ArgmaxRule.ABS_MAX) -> "HashFunction":
        """Build a function around an explicit projection (test stubs, tiled matrices)."""
        kind = HashKind(kind)
        projection = np.array(projection, dtype=np.float64 if kind.is_bits else np.int64)
        if kind.is_bits:
            k, dim = projection.shape
        else:
            k = len(projection)
            dim = int(projection.max()) + 1 if dim is None else dim
        f = cls(kind, k, dim, seed, rule)
        projection.setflags(write=False)
        object.__setattr__(f, "projection", projection)
        return f

    def codes(self, X) -> np.ndarray:
        """Codes for a vector (scalar result) or for every column of a matrix."""
        if sp.issparse(X):
            X = X.toarray()
        X = np.asarray(X, dtype=np.float64)
        if X.ndim not in (1, 2) or X.shape[0] != self.dim:
            raise ValueError(f"expected leading dimension {self.dim}, got {X.shape}")
        if self.kind.is_bits:
            return pack_bits(self.projection @ X)
        return winner_take_all(X[self.projection], self.rule)

    def code(self, x) -> HashCode:
        return _as_code(int(self.codes(x)), self)


def _as_code(value: int, f: HashFunction) -> HashCode:
    if f.kind.is_bits:
        return HashCode(value & ((1 << f.k) - 1), f.k)
    return HashCode(value, f.k, is_index=True)


def _check_kind(f: HashFunction, *kinds: HashKind):
    if f.kind not in kinds:
        names = ", ".join(k.value for k in kinds)
        raise ValueError(f"expected a {names} function, got {f.kind.value}")


def pghash_code(f: HashFunction, x_c) -> HashCode:
    """Sign code of an already-folded vector under a ``k x c`` Gaussian."""
    _check_kind(f, HashKind.PGHASH)
    x_c = np.asarray(x_c, dtype=np.float64)
    if x_c.shape != (f.dim,):
        raise ValueError(f"expected a folded vector of length {f.dim}, got {x_c.shape}")
    return f.code(x_c)


def simhash_code(f: HashFunction, x) -> HashCode:
    _check_kind(f, HashKind.SIMHASH)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (f.dim,):
        raise ValueError(f"expected a vector of length {f.dim}, got {x.shape}")
    return f.code(x)


def wta_code(f: HashFunction, v) -> HashCode:
    _check_kind(f, HashKind.DWTA, HashKind.PGHASH_D)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != f.dim:
        raise ValueError(f"expected a vector of length {f.dim}, got {v.shape}")
    return f.code(v)


def tile_projection(S: np.ndarray, ratio: int) -> np.ndarray:
    """Repeat a ``k x c`` projection ``ratio`` times horizontally (the periodic Gaussian)."""
    return np.tile(S, (1, ratio))


def make_family(kind: HashKind | str, k: int, dim: int, seeds) -> list[HashFunction]:
    kind = HashKind(kind)
    return [HashFunction(kind, k, dim, int(s)) for s in seeds]


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


class HashTable:
    """Per-neuron codes for one hash function plus a code -> neurons index."""

    def __init__(self, function: HashFunction, codes: np.ndarray):
        self.function = function
        self.codes = np.asarray(codes, dtype=np.int64)
        self.codes.setflags(write=False)
        order = np.argsort(self.codes, kind="stable")
        keys, starts = np.unique(self.codes[order], return_index=True)
        bounds = np.append(starts, len(order))
        self.bucket_index: dict[int, np.ndarray] = {
            int(key): order[bounds[i]:bounds[i + 1]] for i, key in enumerate(keys)
        }

    @property
    def n(self) -> int:
        return len(self.codes)

    def lookup(self, code) -> np.ndarray:
        """Neurons whose code equals ``code``; a ``SENTINEL`` query matches nothing."""
        if isinstance(code, HashCode):
            code = code.value
        code = int(code)
        if code >= 1 << 63:
            code -= 1 << 64
        if code == SENTINEL and not self.function.kind.is_bits:
            return np.empty(0, dtype=np.int64)
        return self.bucket_index.get(code, np.empty(0, dtype=np.int64))

    def code(self, j: int) -> HashCode:
        return _as_code(int(self.codes[j]), self.function)


def build_table(function: HashFunction, W_view) -> HashTable:
    """Hash every column of ``W_view`` (``c x n`` folded or ``d x n`` full)."""
    W_view = np.asarray(W_view, dtype=np.float64)
    if W_view.ndim != 2:
        raise ValueError("expected a 2-D weight view with one column per neuron")
    if W_view.shape[0] != function.dim:
        raise ValueError(f"weight view has {W_view.shape[0]} rows, function expects {function.dim}")
    return HashTable(function, function.codes(W_view))
