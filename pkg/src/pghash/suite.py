"""Statistical verification checks, each returning a named pass/fail result."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import stats


@dataclass
class Check:
    name: str
    passed: bool
    summary: str
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.summary} ({self.seconds:.2f}s)"


def _timed(fn):
    def wrapper(*args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        out.seconds = time.perf_counter() - t0
        return out
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def fold_equivalence(instances: int = 10_000, seed: int = 0) -> Check:
    r = stats.fold_sign_equivalence(instances=instances, seed=seed)
    return Check("fold_sign_equivalence", r.passed,
                 f"{r.failures} mismatches over {r.bits_checked} bits ({r.bits_skipped} near-zero skipped)",
                 {"instances": r.instances, "bits_checked": r.bits_checked, "failures": r.failures})


@_timed
def collision(pairs: int = 100, trials: int = 20_000, batches: int = 50, d: int = 64, c: int = 8,
              seed: int = 0, min_within: int | None = None) -> Check:
    """Single-bit match rates against ``1 - angle/pi`` and the variance of batch means."""
    min_within = pairs - pairs // 100 if min_within is None else min_within
    within, ratios = 0, []
    for i in range(pairs):
        rng = np.random.default_rng([seed, i])
        x, y = stats.random_unit(d, rng), stats.random_unit(d, rng)
        est = stats.collision_estimate(x, y, "pghash", trials, seed=[seed, i, 1], c=c)
        within += est.z <= 4
        theta = math.pi * (1 - est.predicted)
        if batches:
            means = stats.mismatch_batch_means(x, y, "pghash", trials, batches, seed=seed * 7919 + i, c=c)
            ratios.append(float(np.var(means, ddof=1)) / stats.mismatch_mean_variance(theta, trials))
    ratios = np.array(ratios)
    var_ok = int(np.sum((ratios >= 0.5) & (ratios <= 2.0)))
    pooled = float(ratios.mean()) if batches else 1.0
    # each pair's ratio carries ~20% sampling noise at 50 batches, so the per-pair
    # count gets the same one-in-a-hundred allowance as the match rates
    passed = within >= min_within and (not batches or (0.5 <= pooled <= 2.0 and var_ok >= min_within))
    return Check("collision_probability", passed,
                 f"{within}/{pairs} pairs within 4 sigma; variance ratio pooled {pooled:.3f}, "
                 f"in [1/2, 2] for {var_ok}/{pairs}",
                 {"within": within, "pairs": pairs, "variance_ok": var_ok, "pooled_variance_ratio": pooled,
                  "min_variance_ratio": float(ratios.min()) if batches else 1.0,
                  "max_variance_ratio": float(ratios.max()) if batches else 1.0})


@_timed
def distortion(pairs: int = 1000, d: int = 64, c: int = 8, grid_points: int = 10_000, seed: int = 0) -> Check:
    reports = stats.distortion_sweep(d, c, pairs, grid_points, seed)
    contained = {conv: sum(r.within[conv] for r in reports) for conv in stats.LAMBDA_CONVENTIONS}
    try:
        conv = stats.choose_convention(reports)
    except AssertionError:
        conv = None
    passed = conv is not None and len(reports) > 0
    detail = ", ".join(f"{k}: {v}/{len(reports)}" for k, v in contained.items())
    return Check("angle_distortion_bounds", passed,
                 f"contained ({detail}); convention {conv or 'none'}",
                 {"valid": len(reports), "convention": conv, **{f"contained_{k}": v for k, v in contained.items()}})


@_timed
def folded_norms(d: int = 128, c: int = 16, samples: int = 100_000, seed: int = 0,
                 mean_tol: float = 0.01, ks_tol: float = 0.01) -> Check:
    s = stats.folded_norm_samples(d, c, samples, seed)
    mean = float(s.mean())
    ks = float(sps.kstest(s, stats.folded_norm_distribution(d, c).cdf).statistic) if c < d else float("nan")
    in_support = bool(s.min() >= 0 and s.max() <= d / c + 1e-12)
    passed = abs(mean - 1) < mean_tol and (c == d or ks < ks_tol) and in_support
    return Check("folded_norm_distribution", passed,
                 f"mean {mean:.5f}, KS {ks:.5f}, support ok={in_support}",
                 {"mean": mean, "ks": ks, "min": float(s.min()), "max": float(s.max())})


@_timed
def sensitivity(d: int = 100, k: int = 25, c: int = 25, tau: int = 100, tau_low: int = 10,
                points: int = 180, repeats: int = 40, seed: int = 0, min_rho: float = 0.95) -> Check:
    grid = np.linspace(0, math.pi, points + 2)[1:-1]
    rows = stats.angle_hamming_scan(d, k, c, tau, grid, "pghash", seed)
    rho = float(sps.spearmanr([r.true_angle for r in rows], [r.avg_hamming for r in rows]).statistic)
    v_low = stats.hamming_variance_at_angle(math.pi / 3, d, k, c, tau_low, repeats, seed=seed)
    v_high = stats.hamming_variance_at_angle(math.pi / 3, d, k, c, tau, repeats, seed=seed)
    passed = rho >= min_rho and v_high < v_low
    return Check("sensitivity_scan", passed,
                 f"Spearman {rho:.4f} at tau={tau}; variance {v_low:.4f} (tau={tau_low}) -> {v_high:.4f}",
                 {"spearman": rho, "var_low": v_low, "var_high": v_high})


def run_all(quick: bool = False, samples: int = 100_000, d: int = 128, c: int = 16, seed: int = 0) -> list[Check]:
    """The full suite; ``quick`` shrinks every sample count for smoke runs."""
    if quick:
        return [fold_equivalence(600, seed), collision(10, 4000, 10, seed=seed, min_within=10),
                distortion(50, grid_points=2000, seed=seed), folded_norms(d, c, min(samples, 20_000), seed, 0.03, 0.03),
                sensitivity(tau=20, points=40, repeats=10, seed=seed, min_rho=0.9)]
    return [fold_equivalence(seed=seed), collision(seed=seed), distortion(seed=seed),
            folded_norms(d, c, samples, seed), sensitivity(seed=seed)]


def write_report(checks: list[Check], text_path, csv_path) -> None:
    with open(text_path, "w") as fh:
        for ch in checks:
            fh.write(ch.line() + "\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "passed", "seconds", "metric", "value"])
        for ch in checks:
            for k, v in ch.metrics.items():
                w.writerow([ch.name, int(ch.passed), f"{ch.seconds:.3f}", k, v])
