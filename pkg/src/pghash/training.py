"""Shared training machinery: run configuration, per-batch neuron selection,
and the single-machine trainer.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from . import net
from .data import Dataset
from .lsh import ArgmaxRule, FoldingOperator, HashFunction, HashKind, HashTable, build_table, fold
from .net import Adam, NetWeights
from .sampling import SamplingConfig, Strategy, match_mask, random_keep, sample, sampled_softmax_select

log = logging.getLogger(__name__)

LEDGER_HEADER = ["round", "method", "device_count", "bytes_down", "bytes_up",
                 "avg_active_frac", "loss", "p_at_1"]


class Method(enum.Enum):
    PGHASH = "pghash"
    PGHASH_D = "pghash-d"
    FEDSLIDE_SIMHASH = "slide-simhash"
    FEDSLIDE_DWTA = "slide-dwta"
    SAMPLED_SOFTMAX = "sampled-softmax"
    DENSE = "dense"

    @property
    def hash_kind(self) -> HashKind | None:
        return {
            Method.PGHASH: HashKind.PGHASH,
            Method.PGHASH_D: HashKind.PGHASH_D,
            Method.FEDSLIDE_SIMHASH: HashKind.SIMHASH,
            Method.FEDSLIDE_DWTA: HashKind.DWTA,
        }.get(self)

    @property
    def uses_sketch(self) -> bool:
        return self in (Method.PGHASH, Method.PGHASH_D)

    @property
    def is_hashed(self) -> bool:
        return self.hash_kind is not None


@dataclass(frozen=True)
class RunConfig:
    """Hyper-parameters of a training run (single machine or federated).

    Defaults are a typical federated setting: ``M=128``, one step per LSH,
    ``k=8``, ``c=8``, 50 tables, ``CR=1``.
    """

    method: Method = Method.PGHASH
    num_devices: int = 1
    total_steps: int = 100
    steps_per_lsh: int = 1
    batch_size: int = 128
    lr: float = 1e-4
    hidden: int = 128
    k: int = 8
    c: int = 8
    tables: int = 50
    cr: float = 1.0
    strategy: Strategy = Strategy.VANILLA
    top_k: int = 1
    threshold: float = 0.0
    sample_fraction: float = 0.1
    inject_labels: bool = True
    argmax: ArgmaxRule = ArgmaxRule.ABS_MAX
    eval_every: int = 0
    eval_size: int = 1000
    seed: int = 0
    device_seeds: tuple[int, ...] | None = None

    def __post_init__(self):
        for name in ("num_devices", "steps_per_lsh", "batch_size", "hidden", "k", "c", "tables"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if not 0 < self.cr <= 1:
            raise ValueError("cr must lie in (0, 1]")
        if not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must lie in (0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.device_seeds is not None and len(self.device_seeds) != self.num_devices:
            raise ValueError("need one device seed per device")
        if self.method.is_hashed and self.method.hash_kind.is_bits and self.k > 64:
            raise ValueError("k must be at most 64 for sign codes")

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        conv = {}
        for key, raw in values.items():
            conv[key] = _coerce(key, raw)
        return cls(**conv)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, enum.Enum) else (list(v) if isinstance(v, tuple) else v)
        return out

    def sampling(self, seed: int = 0) -> SamplingConfig:
        return SamplingConfig(self.cr, self.tables, self.strategy, self.top_k, self.threshold, seed)

    def device_seed(self, i: int) -> int:
        return self.device_seeds[i] if self.device_seeds is not None else self.seed

    @property
    def rounds(self) -> int:
        return -(-self.total_steps // self.steps_per_lsh)

    def steps_in_round(self, r: int) -> int:
        return min(self.steps_per_lsh, self.total_steps - r * self.steps_per_lsh)


_ENUMS = {"method": Method, "strategy": Strategy, "argmax": ArgmaxRule}
_INTS = {"num_devices", "total_steps", "steps_per_lsh", "batch_size", "hidden", "k", "c", "tables",
         "top_k", "eval_every", "eval_size", "seed"}
_FLOATS = {"lr", "cr", "threshold", "sample_fraction"}


def _coerce(key, raw):
    if key in _ENUMS:
        return raw if isinstance(raw, _ENUMS[key]) else _ENUMS[key](str(raw).strip().lower().replace("_", "-"))
    if key in _INTS:
        return int(raw)
    if key in _FLOATS:
        return float(raw)
    if key == "inject_labels":
        if isinstance(raw, bool):
            return raw
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    if key == "device_seeds":
        if raw is None or raw == "":
            return None
        if isinstance(raw, str):
            raw = [s for s in raw.replace(",", " ").split() if s]
        return tuple(int(s) for s in raw)
    raise ValueError(f"unknown config key {key}")


# ---------------------------------------------------------------------------
# Tables over an output layer view
# ---------------------------------------------------------------------------


@dataclass
class TableSet:
    """``tau`` tables over the output neurons plus the fold applied to inputs."""

    tables: list[HashTable]
    fold_op: FoldingOperator | None = None

    def batch_codes(self, hidden: np.ndarray) -> np.ndarray:
        V = hidden.T
        if self.fold_op is not None:
            V = fold(self.fold_op, V)
        return np.stack([t.function.codes(V) for t in self.tables]).reshape(len(self.tables), hidden.shape[0])


def input_fold(method: Method, hidden: int, c: int, permutation=None) -> FoldingOperator | None:
    if c > hidden and method.uses_sketch:
        raise ValueError(f"sketch dimension {c} exceeds hidden size {hidden}")
    if method is Method.PGHASH:
        return FoldingOperator.tiling(hidden, c)
    if method is Method.PGHASH_D:
        return FoldingOperator.permute_truncate(hidden, c, permutation=permutation)
    return None


def build_tableset(method: Method, view: np.ndarray, k: int, seeds, fold_op=None,
                   argmax: ArgmaxRule = ArgmaxRule.ABS_MAX) -> TableSet:
    """Hash every column of ``view`` (a ``c x n`` sketch or the full ``h x n`` layer)."""
    kind = method.hash_kind
    dim = view.shape[0]
    tables = [build_table(HashFunction(kind, k, dim, int(s), argmax), view) for s in seeds]
    return TableSet(tables, fold_op)


def with_labels(theta: np.ndarray, labels, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Union of ``theta`` and the batch's true labels, capped at ``cap`` with labels kept first."""
    labs = np.unique(np.fromiter((l for ls in labels for l in ls), dtype=np.int64))
    if len(labs) >= cap:
        return random_keep(labs, cap, rng)
    rest = np.setdiff1d(theta, labs, assume_unique=False)
    return np.union1d(labs, random_keep(rest, cap - len(labs), rng))


def sample_mask(columns: np.ndarray, labels, tableset: TableSet | None, codes, tables_used: int,
                inject: bool) -> np.ndarray | None:
    """Per-sample activity over ``columns``.

    A sample sees the neurons whose codes matched it in the consulted tables.
    With label injection every injected label neuron of the batch is visible
    to every sample (a sample's own labels as targets, the others as negatives).
    """
    if tableset is None:
        return None
    mask = match_mask(codes, tableset.tables, columns, tables_used)
    if inject:
        labs = np.fromiter((l for ls in labels for l in ls), dtype=np.int64)
        mask[:, np.isin(columns, labs)] = True
    return mask


def draw_batch(rows: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rows[rng.choice(len(rows), size=min(size, len(rows)), replace=False)])


def eval_rows(cfg: RunConfig, test: Dataset) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 7])
    n = min(cfg.eval_size, len(test))
    return np.sort(rng.choice(len(test), size=n, replace=False))


def evaluate(weights: NetWeights, test: Dataset, rows) -> float:
    X = test.features()[rows]
    return net.precision_at_1(net.scores(weights, X), test.labels(rows))


@dataclass
class LedgerRow:
    round: int
    method: str
    device_count: int
    bytes_down: int
    bytes_up: int
    avg_active_frac: float
    loss: float
    p_at_1: float | None = None

    def as_list(self):
        return [self.round, self.method, self.device_count, self.bytes_down, self.bytes_up,
                repr(self.avg_active_frac), repr(self.loss),
                "" if self.p_at_1 is None else repr(self.p_at_1)]


def write_ledger(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEDGER_HEADER)
        for r in rows:
            w.writerow(r.as_list())


@dataclass
class RunResult:
    weights: NetWeights
    ledger: list[LedgerRow]
    optimizer: Adam | None = None
    extra: dict = field(default_factory=dict)

    def final_p_at_1(self) -> float | None:
        vals = [r.p_at_1 for r in self.ledger if r.p_at_1 is not None]
        return vals[-1] if vals else None


# ---------------------------------------------------------------------------
# Single-machine training
# ---------------------------------------------------------------------------


def train(cfg: RunConfig, train_set: Dataset, test_set: Dataset | None = None,
          weights: NetWeights | None = None, counter: net.OpCounter | None = None) -> RunResult:
    """Train on one machine holding the full model.

    Hashed methods rebuild their tables from the current output layer every
    ``steps_per_lsh`` steps (fresh seeds each time) and select neurons for
    every batch.  Ledger rows group ``steps_per_lsh`` steps, like federated
    rounds.
    """
    n = train_set.num_labels
    if weights is None:
        weights = NetWeights.init(train_set.num_features, n, cfg.hidden, cfg.seed)
    h = weights.hidden
    opt = Adam(weights, lr=cfg.lr)
    rng = np.random.default_rng([cfg.device_seed(0), 0])
    rows = np.arange(len(train_set))
    X_all = train_set.features()
    cap = cfg.sampling().cap(n)
    test_rows = eval_rows(cfg, test_set) if test_set is not None else None
    method = cfg.method
    ledger: list[LedgerRow] = []
    tableset = None
    for r in range(cfg.rounds):
        losses, fracs = [], []
        for s in range(cfg.steps_in_round(r)):
            batch = draw_batch(rows, cfg.batch_size, rng)
            X = X_all[batch]
            labels = train_set.labels(batch)
            hidden = net.forward_hidden(weights.W1, weights.b1, X)
            mask = None
            if method is Method.DENSE:
                cols = np.arange(n)
            elif method is Method.SAMPLED_SOFTMAX:
                theta = sampled_softmax_select(n, cfg.sample_fraction, rng=rng).indices
                cols = with_labels(theta, labels, cap, rng) if cfg.inject_labels else theta
            else:
                if s == 0:
                    perm = rng.permutation(h) if method is Method.PGHASH_D else None
                    fold_op = input_fold(method, h, cfg.c, perm)
                    view = fold(fold_op, weights.W2) if fold_op is not None else weights.W2
                    seeds = rng.integers(0, 2**63, size=cfg.tables)
                    tableset = build_tableset(method, view, cfg.k, seeds, fold_op, cfg.argmax)
                codes = tableset.batch_codes(hidden)
                theta = sample(codes, tableset.tables, cfg.sampling(), n, rng)
                cols = with_labels(theta.indices, labels, cap, rng) if cfg.inject_labels else theta.indices
                mask = sample_mask(cols, labels, tableset, codes, theta.tables_used, cfg.inject_labels)
            logits = net.forward_active(weights.W2, weights.b2, hidden, cols, counter)
            rec = net.ActivationRecord(hidden, cols, logits)
            loss, grads = net.loss_and_grad(weights, X, labels, cols, mask, counter, rec)
            opt.step(weights, grads, sparse=True)
            losses.append(loss)
            fracs.append(1.0 if mask is None and method is Method.DENSE else
                         (len(cols) / n if mask is None else float(mask.sum(axis=1).mean()) / n))
        p1 = None
        if test_rows is not None and ((cfg.eval_every and (r + 1) % cfg.eval_every == 0) or r + 1 == cfg.rounds):
            p1 = evaluate(weights, test_set, test_rows)
        ledger.append(LedgerRow(r, method.value, 1, 0, 0, float(np.mean(fracs)), float(np.mean(losses)), p1))
    return RunResult(weights, ledger, opt)
