"""Monte-Carlo and numerical checks of the statistical behaviour of folded hashing.

Every randomized routine takes a ``seed``; trial ``i`` draws from
``default_rng([seed, i])`` so results do not depend on how trials are
scheduled or chunked.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as sps

from . import lsh
from .lsh import FoldingOperator, HashFunction, HashKind, hamming_many

_CHUNK = 50_000


def cosine(x, y) -> float:
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("angle undefined for a zero vector")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def angle(x, y) -> float:
    return math.acos(cosine(x, y))


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_unit(d: int, rng: np.random.Generator) -> np.ndarray:
    return unit(rng.standard_normal(d))


def vector_at_angle(x, target: float, rng: np.random.Generator) -> np.ndarray:
    """Unit ``y`` with ``angle(x, y) == target``, in a random 2-plane through ``x``."""
    x = unit(x)
    while True:
        p = rng.standard_normal(len(x))
        p -= np.dot(p, x) * x
        norm = np.linalg.norm(p)
        if norm > 1e-8:
            break
    return math.cos(target) * x + math.sin(target) * (p / norm)


# ---------------------------------------------------------------------------
# Fold / sign equivalence
# ---------------------------------------------------------------------------


@dataclass
class EquivalenceResult:
    instances: int
    bits_checked: int
    bits_skipped: int
    failures: int

    @property
    def passed(self) -> bool:
        return self.failures == 0


def fold_sign_equivalence(dims=((8, 2), (100, 25), (128, 16)), instances: int = 10_000,
                          k: int = 16, seed: int = 0, tol: float = 1e-12) -> EquivalenceResult:
    """Compare ``sgn(S fold(x))`` with ``sgn(tile(S) x)`` on random instances.

    Bits whose folded projection is within ``tol`` of zero are excluded,
    since summation order can flip them.
    """
    checked = skipped = failures = 0
    per_dim = [instances // len(dims) + (i < instances % len(dims)) for i in range(len(dims))]
    for (d, c), count in zip(dims, per_dim):
        op = FoldingOperator.tiling(d, c)
        rng = np.random.default_rng([seed, d, c])
        X = rng.standard_normal((d, count))
        S = rng.standard_normal((count, k, c))
        folded = lsh.fold(op, X)                      # c x count
        lhs = np.einsum("ikc,ci->ik", S, folded)
        rhs = np.einsum("ikd,di->ik", np.tile(S, (1, 1, d // c)), X)
        clear = np.abs(lhs) > tol
        checked += int(clear.sum())
        skipped += int((~clear).sum())
        failures += int(((lhs > 0) != (rhs > 0))[clear].sum())
    return EquivalenceResult(instances, checked, skipped, failures)


# ---------------------------------------------------------------------------
# Collision probability
# ---------------------------------------------------------------------------


@dataclass
class CollisionEstimate:
    empirical: float
    predicted: float
    stderr: float

    @property
    def z(self) -> float:
        return abs(self.empirical - self.predicted) / self.stderr if self.stderr > 0 else (
            0.0 if self.empirical == self.predicted else math.inf)


def _hash_views(x, y, family: HashKind, c: int | None):
    family = HashKind(family)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.linalg.norm(x) == 0 or np.linalg.norm(y) == 0:
        raise ValueError("angle undefined for a zero vector")
    if family is HashKind.PGHASH:
        if c is None:
            raise ValueError("PGHash needs a sketch dimension")
        op = FoldingOperator.tiling(len(x), c)
        x, y = lsh.fold(op, x), lsh.fold(op, y)
        if np.linalg.norm(x) == 0 or np.linalg.norm(y) == 0:
            raise ValueError("a vector vanishes under folding")
    elif family is not HashKind.SIMHASH:
        raise ValueError(f"collision estimates cover sign families only, got {family.value}")
    return x, y


def mismatch_counts(x, y, family, trials: int, seed, c: int | None = None) -> int:
    """Number of single-bit draws (out of ``trials``) on which ``x`` and ``y`` disagree."""
    if trials < 1:
        raise ValueError("need at least one trial")
    x, y = _hash_views(x, y, family, c)
    rng = np.random.default_rng(seed)
    pair = np.stack([x, y], axis=1)
    mismatches = 0
    for start in range(0, trials, _CHUNK):
        m = min(_CHUNK, trials - start)
        proj = rng.standard_normal((m, len(x))) @ pair
        mismatches += int(np.count_nonzero((proj[:, 0] > 0) != (proj[:, 1] > 0)))
    return mismatches


def predicted_match(x, y, family, c: int | None = None) -> float:
    x, y = _hash_views(x, y, family, c)
    return 1.0 - angle(x, y) / math.pi


def collision_estimate(x, y, family="simhash", trials: int = 20_000, seed: int = 0,
                       c: int | None = None) -> CollisionEstimate:
    """Empirical single-bit match rate against ``1 - angle/pi`` (of the folds, for PGHash)."""
    p = predicted_match(x, y, family, c)
    empirical = 1.0 - mismatch_counts(x, y, family, trials, seed, c) / trials
    return CollisionEstimate(empirical, p, math.sqrt(p * (1 - p) / trials))


def mismatch_batch_means(x, y, family, trials: int, batches: int, seed: int,
                         c: int | None = None) -> np.ndarray:
    """Mismatch rate of each of ``batches`` independent batches of ``trials`` draws."""
    return np.array([mismatch_counts(x, y, family, trials, [seed, b], c) / trials
                     for b in range(batches)])


def mismatch_mean_variance(theta: float, trials: int) -> float:
    """Variance of the mean of ``trials`` mismatch indicators at angle ``theta``."""
    q = theta / math.pi
    return q * (1 - q) / trials


# ---------------------------------------------------------------------------
# Angle distortion
# ---------------------------------------------------------------------------


LAMBDA_CONVENTIONS = ("sqrt", "linear")


def stretch_factor(d: int, c: int, convention: str) -> float:
    """Maximal stretch of the tiling fold: ``sqrt(d/c)`` (its top singular value) or ``d/c``."""
    if convention == "sqrt":
        return math.sqrt(d / c)
    if convention == "linear":
        return d / c
    raise ValueError(f"unknown convention {convention!r}")


def angle_bounds(theta: float, beta: float) -> tuple[float, float]:
    """The two critical-point values of ``cos(fold x, fold y)``, ordered ``(lo, hi)``."""
    t2 = math.tan(theta) ** 2
    b2 = beta ** 2
    a = (1 - b2 * t2) / (1 + b2 * t2)
    b = -(t2 - b2) / (t2 + b2) if t2 + b2 > 0 else 1.0
    return min(a, b), max(a, b)


@dataclass
class DistortionReport:
    theta: float
    alpha: float
    alpha_exact: float
    convention: str
    lam: float
    beta: float
    bound_lo: float
    bound_hi: float
    observed: float
    within_bounds: bool
    within: dict

    def as_dict(self) -> dict:
        return asdict(self)


def plane_basis(x, y) -> tuple[np.ndarray, np.ndarray]:
    w1 = unit(x)
    r = np.asarray(y, dtype=np.float64) - np.dot(y, w1) * w1
    nr = np.linalg.norm(r)
    if nr < 1e-12 * max(np.linalg.norm(y), 1.0):
        raise ValueError("x and y are parallel; their span is degenerate")
    return w1, r / nr


def circle_min_norm(op: FoldingOperator, w1, w2, grid_points: int) -> float:
    """Brute-force ``min ||fold(v)||`` over ``grid_points`` equally spaced unit ``v`` in span(w1, w2)."""
    t = np.linspace(0.0, 2 * math.pi, grid_points, endpoint=False)
    a, b = lsh.fold(op, w1), lsh.fold(op, w2)
    images = np.outer(np.cos(t), a) + np.outer(np.sin(t), b)
    return float(np.sqrt(np.min(np.einsum("ij,ij->i", images, images))))


def circle_norm_extremes(op: FoldingOperator, w1, w2) -> tuple[float, float]:
    """Exact (min, max) of ``||fold(v)||`` on the unit circle, from the 2x2 Gram matrix."""
    F = np.stack([lsh.fold(op, w1), lsh.fold(op, w2)], axis=1)
    ev = np.linalg.eigvalsh(F.T @ F)
    return float(math.sqrt(max(ev[0], 0.0))), float(math.sqrt(max(ev[1], 0.0)))


def distortion_bounds(x, y, c: int, grid_points: int = 10_000, convention: str = "sqrt",
                      tol: float = 1e-9) -> DistortionReport:
    """Locate ``cos(fold x, fold y)`` relative to the folding angle-distortion bounds.

    ``alpha`` comes from a circle scan; ``alpha_exact`` is the closed-form
    minimum for cross-checking.  Containment is evaluated under both stretch
    conventions (``within``); ``within_bounds`` reports the requested one.
    """
    x, y = unit(x), unit(y)
    d = len(x)
    op = FoldingOperator.tiling(d, c)
    fx, fy = lsh.fold(op, x), lsh.fold(op, y)
    if np.linalg.norm(fx) < 1e-12 or np.linalg.norm(fy) < 1e-12:
        raise ValueError("a vector vanishes under folding")
    if np.allclose(x, y, rtol=0, atol=1e-12):
        # identical directions: no distortion, both bounds collapse to 1
        a = float(np.linalg.norm(fx))
        lam = stretch_factor(d, c, convention)
        return DistortionReport(0.0, a, a, convention, lam, a / lam, 1.0, 1.0, 1.0, True,
                                {conv: True for conv in LAMBDA_CONVENTIONS})
    w1, w2 = plane_basis(x, y)
    theta = 0.5 * angle(x, y)
    alpha = circle_min_norm(op, w1, w2, grid_points)
    alpha_exact = circle_norm_extremes(op, w1, w2)[0]
    if alpha_exact <= 0:
        raise ValueError("the plane contains a null vector of the fold")
    observed = cosine(fx, fy)
    within = {}
    bounds = {}
    for conv in LAMBDA_CONVENTIONS:
        lam = stretch_factor(d, c, conv)
        lo, hi = angle_bounds(theta, alpha / lam)
        bounds[conv] = (lam, alpha / lam, lo, hi)
        within[conv] = bool(lo - tol <= observed <= hi + tol)
    lam, beta, lo, hi = bounds[convention]
    return DistortionReport(theta, alpha, alpha_exact, convention, lam, beta, lo, hi,
                            observed, within[convention], within)


def distortion_sweep(d: int, c: int, pairs: int, grid_points: int = 10_000, seed: int = 0):
    """Run ``distortion_bounds`` on random unit pairs; returns the reports of valid instances."""
    reports = []
    for i in range(pairs):
        rng = np.random.default_rng([seed, i])
        x, y = random_unit(d, rng), random_unit(d, rng)
        try:
            reports.append(distortion_bounds(x, y, c, grid_points))
        except ValueError:
            continue
    return reports


def choose_convention(reports) -> str:
    """Tightest stretch convention under which every report is contained."""
    for conv in LAMBDA_CONVENTIONS:
        if all(r.within[conv] for r in reports):
            return conv
    raise AssertionError("no stretch convention contains every observed angle")


# ---------------------------------------------------------------------------
# Folded norms
# ---------------------------------------------------------------------------


def folded_norm_samples(d: int, c: int, samples: int, seed: int = 0) -> np.ndarray:
    """``||fold(u)||^2`` for ``samples`` uniform unit vectors ``u`` in R^d."""
    op = FoldingOperator.tiling(d, c)
    rng = np.random.default_rng(seed)
    out = np.empty(samples)
    step = max(1, _CHUNK * 8 // d)
    for start in range(0, samples, step):
        m = min(step, samples - start)
        U = rng.standard_normal((d, m))
        U /= np.linalg.norm(U, axis=0)
        F = lsh.fold(op, U)
        out[start:start + m] = np.einsum("ij,ij->j", F, F)
    return out


def folded_norm_distribution(d: int, c: int):
    """The ``(d/c)``-scaled Beta(c/2, (d-c)/2) law of the squared folded norm."""
    return sps.beta(c / 2, (d - c) / 2, loc=0.0, scale=d / c)


def folded_norm_stats(d: int, c: int, samples: int, seed: int = 0):
    """Sample mean of ``||fold(u)||^2`` and its KS distance to the scaled Beta law.

    When ``c == d`` folding is the identity, every sample is 1 and the KS
    distance is reported as ``nan``.
    """
    if d % c:
        raise ValueError(f"{c} does not divide {d}")
    s = folded_norm_samples(d, c, samples, seed)
    if c == d:
        return float(s.mean()), float("nan")
    ks = sps.kstest(s, folded_norm_distribution(d, c).cdf).statistic
    return float(s.mean()), float(ks)


# ---------------------------------------------------------------------------
# Periodic projection bound
# ---------------------------------------------------------------------------


def periodic_cosine_slack(row: np.ndarray, x: np.ndarray, c: int) -> float:
    """``sqrt(c/d) ||fold x|| / ||x|| - |cos(tile(row), x)|``; non-negative when the bound holds."""
    d = len(x)
    op = FoldingOperator.tiling(d, c)
    periodic = np.tile(row, d // c)
    bound = math.sqrt(c / d) * np.linalg.norm(lsh.fold(op, x)) / np.linalg.norm(x)
    return bound - abs(cosine(periodic, x))


# ---------------------------------------------------------------------------
# Sensitivity scans
# ---------------------------------------------------------------------------


SCAN_HEADER = ["angle", "avg_hamming", "family", "tau", "k", "c", "d", "seed"]


@dataclass
class SensitivityScanRow:
    true_angle: float
    avg_hamming: float
    family: str
    tau: int
    k: int
    c: int
    d: int
    seed: int = 0


def scan_functions(family, d: int, k: int, c: int, tau: int, seed: int) -> tuple[list[HashFunction], FoldingOperator | None]:
    family = HashKind(family)
    if not family.is_bits:
        raise ValueError("sensitivity scans use Hamming distance and need a sign family")
    dim = c if family is HashKind.PGHASH else d
    fns = [HashFunction(family, k, dim, seed=(seed << 20) + t) for t in range(tau)]
    op = FoldingOperator.tiling(d, c) if family is HashKind.PGHASH else None
    return fns, op


def average_hamming_pair(fns, op, x, y) -> float:
    if op is not None:
        x, y = lsh.fold(op, x), lsh.fold(op, y)
    return float(np.mean([hamming_many(f.codes(x), f.codes(y)) for f in fns]))


def angle_hamming_scan(d: int = 100, k: int = 25, c: int = 25, tau: int = 10, angle_grid=None,
                       family="pghash", seed: int = 0) -> list[SensitivityScanRow]:
    """Average Hamming distance between a fixed unit ``x`` and vectors at prescribed angles.

    One set of ``tau`` hash functions is drawn; for each angle a fresh ``y``
    is placed in a random plane through ``x``.
    """
    if angle_grid is None:
        angle_grid = np.linspace(0, math.pi, 182)[1:-1]
    grid = np.asarray(angle_grid, dtype=np.float64)
    if np.any((grid <= 0) | (grid >= math.pi)):
        raise ValueError("scan angles must lie strictly between 0 and pi")
    fns, op = scan_functions(family, d, k, c, tau, seed)
    rng = np.random.default_rng([seed, 1])
    x = random_unit(d, rng)
    rows = []
    for a in grid:
        y = vector_at_angle(x, a, rng)
        rows.append(SensitivityScanRow(float(a), average_hamming_pair(fns, op, x, y),
                                       HashKind(family).value, tau, k, c, d, seed))
    return rows


def hamming_variance_at_angle(target: float, d: int, k: int, c: int, tau: int, repeats: int,
                              family="pghash", seed: int = 0) -> float:
    """Variance of the scan statistic at a fixed angle across independent table draws."""
    values = []
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        x = random_unit(d, rng)
        y = vector_at_angle(x, target, rng)
        fns, op = scan_functions(family, d, k, c, tau, seed=seed * 100_003 + r)
        values.append(average_hamming_pair(fns, op, x, y))
    return float(np.var(values, ddof=1))


def write_scan_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCAN_HEADER)
        for r in rows:
            w.writerow([repr(r.true_angle), repr(r.avg_hamming), r.family, r.tau, r.k, r.c, r.d, r.seed])
