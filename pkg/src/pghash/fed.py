"""Single-process federated simulator: one server and ``N`` devices.

Each round the server broadcasts the shared weights plus a view of the
output layer (a ``c x n`` sketch for the PGHash methods, the full layer for
federated SLIDE and dense FedAvg).  Devices hash locally, request only the
output columns they selected, train for ``steps_per_lsh`` steps and send back
their updated weights.  The server averages every output column over the
devices that held it.

Upstream traffic is restricted to two message types, :class:`ColumnRequest`
and :class:`DeviceUpdate`; nothing else can reach the server.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import net
from .data import Dataset
from .lsh import FoldingOperator, fold
from .net import Adam, NetWeights
from .sampling import sample, sampled_softmax_select
from .training import (LedgerRow, Method, RunConfig, RunResult, TableSet, build_tableset, draw_batch,
                       eval_rows, evaluate, input_fold, sample_mask, with_labels, write_ledger)

log = logging.getLogger(__name__)

BYTES_PER_VALUE = 8


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Broadcast:
    """Server -> device at the start of a round."""

    W1: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    view: np.ndarray | None = None          # c x n sketch or full h x n layer
    permutation: np.ndarray | None = None   # PGHash-D only

    @property
    def nbytes(self) -> int:
        n = self.W1.size + self.b1.size + self.b2.size
        n += 0 if self.view is None else self.view.size
        n += 0 if self.permutation is None else self.permutation.size
        return BYTES_PER_VALUE * n


@dataclass(frozen=True)
class ColumnGrant:
    """Server -> device: the requested output columns."""

    indices: np.ndarray
    W2: np.ndarray

    @property
    def nbytes(self) -> int:
        return BYTES_PER_VALUE * self.W2.size


@dataclass(frozen=True)
class ColumnRequest:
    """Device -> server: which output columns the device needs."""

    indices: np.ndarray

    @property
    def nbytes(self) -> int:
        return BYTES_PER_VALUE * self.indices.size


@dataclass(frozen=True)
class DeviceUpdate:
    """Device -> server: locally trained weights for the columns it held."""

    W1: np.ndarray
    b1: np.ndarray
    indices: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def nbytes(self) -> int:
        return BYTES_PER_VALUE * (self.W1.size + self.b1.size + self.indices.size + self.W2.size + self.b2.size)


UPLINK_TYPES = (ColumnRequest, DeviceUpdate)


class Channel:
    """Counts bytes per device and enforces the uplink message types.

    ``observers`` are called with ``(device_id, direction, message)`` for
    every message; tests use them to audit information flow.
    """

    def __init__(self):
        self.observers: list[Callable] = []
        self.reset()

    def reset(self):
        self.down: dict[int, int] = {}
        self.up: dict[int, int] = {}

    def send_down(self, device_id: int, msg):
        self.down[device_id] = self.down.get(device_id, 0) + msg.nbytes
        for ob in self.observers:
            ob(device_id, "down", msg)
        return msg

    def send_up(self, device_id: int, msg):
        if not isinstance(msg, UPLINK_TYPES):
            raise TypeError(f"devices may not send {type(msg).__name__} upstream")
        self.up[device_id] = self.up.get(device_id, 0) + msg.nbytes
        for ob in self.observers:
            ob(device_id, "up", msg)
        return msg


class LeakDetector:
    """Information-flow test double.

    Devices report their private values (raw features, hidden activations,
    input hash codes, hash seeds) through :meth:`tap`; every uplink message
    is searched for any of them.
    """

    def __init__(self):
        self._rows: set[bytes] = set()
        self._ints: set[int] = set()
        self.leaks: list[str] = []
        self.messages = 0
        self.secrets = 0

    def tap(self, device_id: int, kind: str, value):
        self.secrets += 1
        if kind == "seed":
            self._ints.update(int(v) for v in np.atleast_1d(value))
            return
        arr = np.atleast_2d(np.asarray(value))
        for row in arr:
            if np.any(row):
                self._rows.add(np.ascontiguousarray(row).tobytes())

    def __call__(self, device_id: int, direction: str, msg):
        if direction != "up":
            return
        self.messages += 1
        if not isinstance(msg, UPLINK_TYPES):
            self.leaks.append(f"device {device_id}: unexpected {type(msg).__name__}")
            return
        for name, val in vars(msg).items():
            arr = np.asarray(val)
            if arr.dtype.kind in "iu" and self._ints.intersection(arr.ravel().tolist()):
                self.leaks.append(f"device {device_id}: seed in {name}")
            views = [arr] if arr.ndim < 2 else [arr, arr.T]
            for v in views:
                for row in np.atleast_2d(v):
                    for dtype in (np.float64, np.int64):
                        if np.ascontiguousarray(row.astype(dtype, copy=False)).tobytes() in self._rows:
                            self.leaks.append(f"device {device_id}: private values in {name}")
                            break


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def partition_iid(num_points: int, num_devices: int, seed: int = 0) -> list[np.ndarray]:
    """Shuffle and split into near-equal shards (sizes differ by at most one).

    Each shard is returned sorted, so a single device sees the data in its
    original order.
    """
    if num_devices < 1:
        raise ValueError("num_devices must be positive")
    order = np.random.default_rng([seed, 0xDA7A]).permutation(num_points)
    return [np.sort(part) for part in np.array_split(order, num_devices)]


# ---------------------------------------------------------------------------
# Device
# ---------------------------------------------------------------------------


class Device:
    """A device holding a data shard and, transiently, part of the model."""

    def __init__(self, device_id: int, rows: np.ndarray, data: Dataset, cfg: RunConfig,
                 tap: Callable | None = None):
        self.id = device_id
        self.rows = np.asarray(rows, dtype=np.int64)
        self.data = data
        self.cfg = cfg
        self.n = data.num_labels
        self.cap = cfg.sampling().cap(self.n)
        seed = cfg.device_seeds[device_id] if cfg.device_seeds is not None else cfg.seed
        self.rng = np.random.default_rng([seed, 0 if cfg.device_seeds is not None else device_id])
        self._tap = tap
        self.opt: Adam | None = None
        self.local: NetWeights | None = None
        self.held = np.empty(0, dtype=np.int64)
        self.mem_current = 0
        self.mem_peak = 0
        self.last_loss = 0.0
        self.last_active = 0.0

    def tap(self, kind, value):
        if self._tap is not None:
            self._tap(self.id, kind, value)

    def _alloc(self, reals: int):
        self.mem_current += reals
        self.mem_peak = max(self.mem_peak, self.mem_current)

    # -- round ----------------------------------------------------------

    def run_round(self, bc: Broadcast, server: "Server", channel: Channel, steps: int) -> DeviceUpdate:
        cfg, method, h = self.cfg, self.cfg.method, bc.W1.shape[1]
        X_all = self.data.features()
        batch = draw_batch(self.rows, cfg.batch_size, self.rng)
        X = X_all[batch]
        labels = self.data.labels(batch)
        self.tap("features", X.toarray())

        self.mem_current = 0
        if bc.view is not None:
            self._alloc(bc.view.size)

        tableset = None
        if method is Method.DENSE:
            held = np.arange(self.n)
            W2_held = bc.view
        else:
            hidden = net.forward_hidden(bc.W1, bc.b1, X)
            self.tap("hidden", hidden)
            if method is Method.SAMPLED_SOFTMAX:
                theta = sampled_softmax_select(self.n, cfg.sample_fraction, rng=self.rng).indices
            else:
                tableset = self.device_lsh(bc, h)
                codes = tableset.batch_codes(hidden)
                self.tap("codes", codes)
                theta = sample(codes, tableset.tables, cfg.sampling(), self.n, self.rng).indices
            held = with_labels(theta, labels, self.cap, self.rng) if cfg.inject_labels else theta
            if method.uses_sketch or method is Method.SAMPLED_SOFTMAX:
                channel.send_up(self.id, ColumnRequest(held.copy()))
                grant = channel.send_down(self.id, server.grant(held))
                W2_held = grant.W2
                self._alloc(W2_held.size)
                if bc.view is not None:
                    self.mem_current -= bc.view.size     # sketch no longer needed
            else:
                W2_held = bc.view[:, held]

        self._load(bc, held, W2_held)
        losses, fracs = [], []
        for s in range(steps):
            if s > 0:
                batch = draw_batch(self.rows, cfg.batch_size, self.rng)
                X = X_all[batch]
                labels = self.data.labels(batch)
                self.tap("features", X.toarray())
            loss, frac = self._step(X, labels, tableset)
            losses.append(loss)
            fracs.append(frac)
        self.last_loss = float(np.mean(losses)) if losses else 0.0
        self.last_active = float(np.mean(fracs)) if fracs else 0.0
        upd = DeviceUpdate(self.local.W1.copy(), self.local.b1.copy(), self.held.copy(),
                           self.local.W2.copy(), self.local.b2.copy())
        return channel.send_up(self.id, upd)

    def device_lsh(self, bc: Broadcast, h: int) -> TableSet:
        """Private hash functions over the received view (fresh seeds every call)."""
        cfg = self.cfg
        if cfg.method.uses_sketch and cfg.c > h:
            raise ValueError(f"sketch dimension {cfg.c} exceeds hidden size {h}")
        op = input_fold(cfg.method, h, cfg.c, bc.permutation)
        seeds = self.rng.integers(0, 2**63, size=cfg.tables)
        self.tap("seed", seeds)
        return build_tableset(cfg.method, bc.view, cfg.k, seeds, op, cfg.argmax)

    def _load(self, bc: Broadcast, held: np.ndarray, W2_held: np.ndarray):
        """Install the round's weights; Adam moments survive for columns held again."""
        local = NetWeights(bc.W1.copy(), bc.b1.copy(), np.array(W2_held, dtype=float), bc.b2[held].copy())
        if self.opt is None:
            self.opt = Adam(local, lr=self.cfg.lr)
        else:
            m_old, v_old = self.opt.m, self.opt.v
            opt = Adam(local, lr=self.cfg.lr)
            opt.step_count = self.opt.step_count
            for k in ("W1", "b1"):
                opt.m[k], opt.v[k] = m_old[k], v_old[k]
            _, old_pos, new_pos = np.intersect1d(self.held, held, assume_unique=True, return_indices=True)
            for k, sl_old, sl_new in (("W2", (slice(None), old_pos), (slice(None), new_pos)),
                                      ("b2", old_pos, new_pos)):
                opt.m[k][sl_new] = m_old[k][sl_old]
                opt.v[k][sl_new] = v_old[k][sl_old]
            self.opt = opt
        self.local = local
        self.held = held

    def _step(self, X, labels, tableset: TableSet | None):
        cfg, local = self.cfg, self.local
        hidden = net.forward_hidden(local.W1, local.b1, X)
        pos = np.arange(len(self.held))
        mask = None
        if tableset is not None:
            codes = tableset.batch_codes(hidden)
            theta = sample(codes, tableset.tables, cfg.sampling(), self.n, self.rng)
            cols = np.intersect1d(theta.indices, self.held)
            if cfg.inject_labels:
                labs = np.fromiter((l for ls in labels for l in ls), dtype=np.int64)
                cols = np.union1d(cols, np.intersect1d(labs, self.held))
            mask = np.zeros((X.shape[0], len(self.held)), dtype=bool)
            sub = sample_mask(cols, labels, tableset, codes, theta.tables_used, cfg.inject_labels)
            mask[:, np.searchsorted(self.held, cols)] = sub
        if len(self.held) == self.n:
            local_labels = labels
        else:
            where = {int(c): i for i, c in enumerate(self.held)}
            local_labels = [tuple(where[l] for l in ls if l in where) for ls in labels]
        logits = net.forward_active(local.W2, local.b2, hidden, pos)
        rec = net.ActivationRecord(hidden, pos, logits)
        loss, grads = net.loss_and_grad(local, X, local_labels, pos, mask, record=rec,
                                         warn_unlabeled=local_labels is labels)
        self.opt.step(local, grads, sparse=True)
        if cfg.method is Method.DENSE:
            frac = 1.0
        elif mask is None:
            frac = len(self.held) / self.n
        else:
            frac = float(mask.sum(axis=1).mean()) / self.n
        return loss, frac


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------


class Server:
    def __init__(self, weights: NetWeights, cfg: RunConfig):
        self.weights = weights
        self.cfg = cfg
        self.rng = np.random.default_rng([cfg.seed, 0x5E4])

    def broadcast(self) -> Broadcast:
        w, method, cfg = self.weights, self.cfg.method, self.cfg
        perm, view = None, None
        if method.uses_sketch:
            h = w.hidden
            if cfg.c > h:
                raise ValueError(f"sketch dimension {cfg.c} exceeds hidden size {h}")
            if method is Method.PGHASH_D:
                perm = self.rng.permutation(h)
                op = FoldingOperator.permute_truncate(h, cfg.c, permutation=perm)
            else:
                op = FoldingOperator.tiling(h, cfg.c)
            view = fold(op, w.W2)
        elif method is not Method.SAMPLED_SOFTMAX:
            view = w.W2.copy()
        return Broadcast(w.W1.copy(), w.b1.copy(), w.b2.copy(), view, perm)

    def grant(self, indices: np.ndarray) -> ColumnGrant:
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.weights.num_labels):
            raise ValueError("requested column out of range")
        return ColumnGrant(indices.copy(), self.weights.W2[:, indices].copy())

    def aggregate(self, updates: list[DeviceUpdate]):
        """Average W1/b1 over devices and each output column over the devices holding it."""
        if not updates:
            return
        w = self.weights
        w.W1 = np.mean(np.stack([u.W1 for u in updates]), axis=0)
        w.b1 = np.mean(np.stack([u.b1 for u in updates]), axis=0)
        W2_sum = np.zeros_like(w.W2)
        b2_sum = np.zeros_like(w.b2)
        count = np.zeros(w.num_labels)
        for u in updates:
            W2_sum[:, u.indices] += u.W2
            b2_sum[u.indices] += u.b2
            count[u.indices] += 1
        hit = count > 0
        w.W2[:, hit] = W2_sum[:, hit] / count[hit]
        w.b2[hit] = b2_sum[hit] / count[hit]


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass
class Federation:
    cfg: RunConfig
    server: Server
    devices: list[Device]
    channel: Channel = field(default_factory=Channel)

    def run_round(self, r: int) -> tuple[int, int, float, float]:
        self.channel.reset()
        steps = self.cfg.steps_in_round(r)
        updates, losses, fracs = [], [], []
        for dev in self.devices:
            bc = self.channel.send_down(dev.id, self.server.broadcast())
            updates.append(dev.run_round(bc, self.server, self.channel, steps))
            losses.append(dev.last_loss)
            fracs.append(dev.last_active)
        self.server.aggregate(updates)
        return (sum(self.channel.down.values()), sum(self.channel.up.values()),
                float(np.mean(fracs)), float(np.mean(losses)))


def build_federation(cfg: RunConfig, train_set: Dataset, weights: NetWeights | None = None,
                     tap: Callable | None = None, shards: list[np.ndarray] | None = None) -> Federation:
    if weights is None:
        weights = NetWeights.init(train_set.num_features, train_set.num_labels, cfg.hidden, cfg.seed)
    if cfg.method.uses_sketch and cfg.c > weights.hidden:
        raise ValueError(f"sketch dimension {cfg.c} exceeds hidden size {weights.hidden}")
    if shards is None:
        shards = partition_iid(len(train_set), cfg.num_devices, cfg.seed)
    if len(shards) != cfg.num_devices:
        raise ValueError("need one shard per device")
    devices = []
    for i, rows in enumerate(shards):
        if len(rows) == 0:
            log.warning("device %d has an empty shard and is excluded", i)
            continue
        devices.append(Device(i, rows, train_set, cfg, tap))
    if not devices:
        raise ValueError("every shard is empty")
    return Federation(cfg, Server(weights, cfg), devices)


def run_experiment(cfg: RunConfig, train_set: Dataset, test_set: Dataset | None = None,
                   out_dir=None, weights: NetWeights | None = None, tap: Callable | None = None,
                   observers=(), shards=None) -> RunResult:
    """Run ``cfg.rounds`` rounds and return the global weights and ledger.

    With ``out_dir`` the ledger is written to ``ledger.csv`` and the final
    model to ``checkpoint.npz``.
    """
    fed = build_federation(cfg, train_set, weights, tap, shards)
    fed.channel.observers.extend(observers)
    test_rows = eval_rows(cfg, test_set) if test_set is not None else None
    ledger: list[LedgerRow] = []
    for r in range(cfg.rounds):
        down, up, frac, loss = fed.run_round(r)
        p1 = None
        if test_rows is not None and ((cfg.eval_every and (r + 1) % cfg.eval_every == 0) or r + 1 == cfg.rounds):
            p1 = evaluate(fed.server.weights, test_set, test_rows)
        ledger.append(LedgerRow(r, cfg.method.value, len(fed.devices), down, up, frac, loss, p1))
        log.info("round %d loss %.4f active %.4f", r, loss, frac)
    result = RunResult(fed.server.weights, ledger, extra={
        "mem_peak": {d.id: d.mem_peak for d in fed.devices}, "federation": fed})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_ledger(ledger, out / "ledger.csv")
        net.save_checkpoint(out / "checkpoint.npz", fed.server.weights, round=len(ledger),
                            method=cfg.method.value)
    return result
