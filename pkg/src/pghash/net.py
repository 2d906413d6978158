"""Two-layer recommender network with a prunable output layer.

The hidden layer is ``relu(x W1 + b1)`` for sparse inputs ``x``; the output
layer ``W2`` (``h x n``, one column per label neuron) is only ever touched
on a subset of columns during training.  Shapes follow the convention
``batch x features``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass
class NetWeights:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, num_features: int, num_labels: int, hidden: int = 128, seed: int = 0) -> "NetWeights":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng([seed, 0x5EED])
        lim1 = np.sqrt(6.0 / (num_features + hidden))
        lim2 = np.sqrt(6.0 / (hidden + num_labels))
        return cls(rng.uniform(-lim1, lim1, (num_features, hidden)), np.zeros(hidden),
                   rng.uniform(-lim2, lim2, (hidden, num_labels)), np.zeros(num_labels))

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def num_labels(self) -> int:
        return self.W2.shape[1]

    def copy(self) -> "NetWeights":
        return NetWeights(*(getattr(self, k).copy() for k in PARAM_NAMES))

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def check_finite(self):
        for k in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, k))):
                raise FloatingPointError(f"non-finite entries in {k}")


@dataclass
class ActivationRecord:
    hidden: np.ndarray               # batch x h, post-ReLU
    columns: np.ndarray              # active output neurons
    active_logits: np.ndarray        # batch x len(columns)


class OpCounter:
    """Counts multiply-adds spent in the output layer."""

    def __init__(self):
        self.forward = 0
        self.backward = 0

    @property
    def total(self) -> int:
        return self.forward + self.backward


def _as_csr(X, num_features: int) -> sp.csr_matrix:
    X = sp.csr_matrix(X)
    if X.shape[1] != num_features:
        raise ValueError(f"inputs have {X.shape[1]} features, the network expects {num_features}")
    if X.nnz and (X.indices.min() < 0 or X.indices.max() >= num_features):
        raise ValueError("feature index out of range")
    return X


def forward_hidden(W1: np.ndarray, b1: np.ndarray, X) -> np.ndarray:
    """``relu(X W1 + b1)``; only the rows of ``W1`` for nonzero features are read."""
    X = _as_csr(X, W1.shape[0])
    pre = np.asarray(X @ W1) + b1
    return np.maximum(pre, 0.0)


def forward_active(W2: np.ndarray, b2: np.ndarray, hidden: np.ndarray, columns,
                   counter: OpCounter | None = None) -> np.ndarray:
    """Logits restricted to ``columns``: ``hidden @ W2[:, columns] + b2[columns]``."""
    columns = np.asarray(columns, dtype=np.int64)
    if columns.size and (columns.min() < 0 or columns.max() >= W2.shape[1]):
        raise ValueError("active neuron index out of range")
    if counter is not None:
        counter.forward += hidden.shape[0] * hidden.shape[1] * len(columns)
    return hidden @ W2[:, columns] + b2[columns]


@dataclass
class Gradients:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray                   # h x len(columns)
    b2: np.ndarray                   # len(columns)
    columns: np.ndarray
    used: int = 0                    # samples that contributed


def label_targets(labels, columns: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Uniform distribution over each sample's true labels among ``columns`` (rows may be zero)."""
    pos = {int(c): i for i, c in enumerate(columns)}
    T = np.zeros((len(labels), len(columns)))
    for m, labs in enumerate(labels):
        idx = [pos[lab] for lab in labs if lab in pos and (mask is None or mask[m, pos[lab]])]
        if idx:
            T[m, idx] = 1.0 / len(idx)
    return T


def loss_and_grad(weights: NetWeights, X, labels, columns, mask: np.ndarray | None = None,
                  counter: OpCounter | None = None, record: ActivationRecord | None = None,
                  warn_unlabeled: bool = True):
    """Softmax cross-entropy over each sample's active columns and its gradients.

    ``mask[m, j]`` says whether ``columns[j]`` is active for sample ``m``
    (all columns when ``mask`` is None).  The target is uniform over the
    sample's true labels inside its active set; samples without any such
    label are skipped.  Returns ``(mean loss, Gradients)``.
    """
    X = _as_csr(X, weights.W1.shape[0])
    columns = np.asarray(columns, dtype=np.int64)
    M = X.shape[0]
    if record is None:
        hidden = forward_hidden(weights.W1, weights.b1, X)
        logits = forward_active(weights.W2, weights.b2, hidden, columns, counter)
    else:
        hidden, logits = record.hidden, record.active_logits
    if mask is None:
        mask = np.ones((M, len(columns)), dtype=bool)
    T = label_targets(labels, columns, mask)
    valid = T.sum(axis=1) > 0
    skipped = [m for m in range(M) if not labels[m]]
    if skipped and warn_unlabeled:
        log.warning("skipping %d sample(s) without labels", len(skipped))
    used = int(valid.sum())

    with np.errstate(invalid="ignore"):
        zmax = np.max(np.where(mask, logits, -np.inf), axis=1, keepdims=True)
    z = logits - np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(np.where(mask, z, 0.0)), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    denom[denom == 0] = 1.0
    P = e / denom
    logP = np.where(mask, z - np.log(denom), 0.0)
    per_sample = -(T * logP).sum(axis=1)
    loss = float(per_sample[valid].mean()) if used else 0.0

    dZ = np.where(valid[:, None] & mask, P - T, 0.0) / max(used, 1)
    gW2 = hidden.T @ dZ
    gb2 = dZ.sum(axis=0)
    dH = dZ @ weights.W2[:, columns].T
    if counter is not None:
        counter.backward += 2 * M * hidden.shape[1] * len(columns)
    dH *= hidden > 0
    gW1 = np.asarray(X.T @ dH)
    gb1 = dH.sum(axis=0)
    return loss, Gradients(gW1, gb1, gW2, gb2, columns, used)


def full_loss(weights: NetWeights, X, labels) -> float:
    """Dense softmax cross-entropy over all neurons (used by finite-difference checks)."""
    return loss_and_grad(weights, X, labels, np.arange(weights.num_labels))[0]


class Adam:
    """Adam with bias correction; ``W2``/``b2`` may be updated on a column subset.

    A sparse step advances moments only for the given columns and leaves
    every other column untouched (lazy Adam).  The step counter is shared.
    """

    def __init__(self, weights: NetWeights, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in weights.params().items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.params().items()}

    def _update(self, name, param, grad, index=None):
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        m, v = self.m[name], self.v[name]
        t = self.step_count
        if index is None:
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad * grad
            mh = m / (1 - self.beta1 ** t)
            vh = v / (1 - self.beta2 ** t)
            param -= self.lr * mh / (np.sqrt(vh) + self.eps)
        else:
            mi = self.beta1 * m[index] + (1 - self.beta1) * grad
            vi = self.beta2 * v[index] + (1 - self.beta2) * grad * grad
            m[index], v[index] = mi, vi
            mh = mi / (1 - self.beta1 ** t)
            vh = vi / (1 - self.beta2 ** t)
            param[index] -= self.lr * mh / (np.sqrt(vh) + self.eps)

    def step(self, weights: NetWeights, grads: Gradients, sparse: bool = True):
        """Apply one update in place.  ``sparse=False`` scatters into a dense step."""
        self.step_count += 1
        self._update("W1", weights.W1, grads.W1)
        self._update("b1", weights.b1, grads.b1)
        cols = grads.columns
        if sparse:
            self._update("W2", weights.W2, grads.W2, (slice(None), cols))
            self._update("b2", weights.b2, grads.b2, cols)
        else:
            gW2 = np.zeros_like(weights.W2)
            gb2 = np.zeros_like(weights.b2)
            gW2[:, cols] = grads.W2
            gb2[cols] = grads.b2
            self._update("W2", weights.W2, gW2)
            self._update("b2", weights.b2, gb2)

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam_step": np.array(self.step_count)}
        for k in PARAM_NAMES:
            out[f"adam_m_{k}"] = self.m[k]
            out[f"adam_v_{k}"] = self.v[k]
        return out

    def load_state(self, state):
        self.step_count = int(state["adam_step"])
        for k in PARAM_NAMES:
            self.m[k] = np.array(state[f"adam_m_{k}"])
            self.v[k] = np.array(state[f"adam_v_{k}"])


def scores(weights: NetWeights, X, batch: int = 1024) -> np.ndarray:
    """Dense output logits for every input row."""
    X = _as_csr(X, weights.W1.shape[0])
    out = np.empty((X.shape[0], weights.num_labels))
    for s in range(0, X.shape[0], batch):
        h = forward_hidden(weights.W1, weights.b1, X[s:s + batch])
        out[s:s + batch] = h @ weights.W2 + weights.b2
    return out


def precision_at_1(scores: np.ndarray, labels) -> float:
    """Fraction of samples whose top-scoring label is a true label.

    Ties go to the lowest label index; samples with no labels are left out.
    """
    scores = np.asarray(scores)
    top = np.argmax(scores, axis=1)
    hits = [top[m] in set(labs) for m, labs in enumerate(labels) if labs]
    return float(np.mean(hits)) if hits else float("nan")


def save_checkpoint(path, weights: NetWeights, optimizer: Adam | None = None, **extra) -> None:
    """Write an ``.npz`` checkpoint; see the README for the layout."""
    payload = {"format_version": np.array(CHECKPOINT_VERSION)}
    payload.update(weights.params())
    if optimizer is not None:
        payload.update(optimizer.state())
    for k, v in extra.items():
        payload[f"meta_{k}"] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path, lr: float | None = None):
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        weights = NetWeights(*(np.array(z[k]) for k in PARAM_NAMES))
        opt = None
        if "adam_step" in z:
            opt = Adam(weights, lr=lr if lr is not None else 1e-4)
            opt.load_state(z)
    return weights, opt
