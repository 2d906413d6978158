"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import time

import numpy as np
import pytest
import scipy.sparse as sp

from pghash import net, suite
from pghash.data import synth_dataset, train_test_split
from pghash.fed import LeakDetector, run_experiment
from pghash.training import Method, RunConfig, train


@pytest.fixture
def report(capsys):
    def emit(number, passed, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
        return passed
    return emit


def test_1_fold_sign_equivalence(report):
    ch = suite.fold_equivalence(instances=10_000, seed=0)
    ok = ch.metrics["failures"] == 0 and ch.metrics["instances"] == 10_000 and ch.seconds < 5
    assert report(1, ok, f"{ch.name}: {ch.summary} ({ch.seconds:.2f}s)")


def test_2_collision_probability(report):
    ch = suite.collision(pairs=100, trials=20_000, batches=50, seed=0)
    ok = ch.passed and ch.metrics["within"] >= 99 and ch.seconds < 30
    assert report(2, ok, f"{ch.name}: {ch.summary} ({ch.seconds:.2f}s)")


def test_3_angle_distortion(report, tmp_path):
    ch = suite.distortion(pairs=1000, d=64, c=8, grid_points=10_000, seed=0)
    suite.write_report([ch], tmp_path / "verify_report.txt", tmp_path / "verify_report.csv")
    recorded = f"convention {ch.metrics['convention']}" in (tmp_path / "verify_report.txt").read_text()
    conv = ch.metrics["convention"]
    ok = (conv is not None and ch.metrics[f"contained_{conv}"] == ch.metrics["valid"] > 0
          and recorded and ch.seconds < 60)
    assert report(3, ok, f"{ch.name}: {ch.summary} ({ch.seconds:.2f}s)")


def test_4_folded_norms(report):
    ch = suite.folded_norms(d=128, c=16, samples=100_000, seed=0)
    m = ch.metrics
    ok = abs(m["mean"] - 1) < 0.01 and m["ks"] < 0.01 and m["min"] >= 0 and m["max"] <= 8 and ch.seconds < 10
    assert report(4, ok, f"{ch.name}: {ch.summary} ({ch.seconds:.2f}s)")


def test_5_sensitivity_scan(report):
    ch = suite.sensitivity(d=100, k=25, c=25, tau=100, tau_low=10, points=180, seed=0)
    m = ch.metrics
    ok = m["spearman"] >= 0.95 and m["var_high"] < m["var_low"] and ch.seconds < 60
    assert report(5, ok, f"{ch.name}: {ch.summary} ({ch.seconds:.2f}s)")


@pytest.fixture(scope="module")
def desk_data():
    ds = synth_dataset(5500, 1000, 2000, feats_per_point=10, labels_per_point=2, signal_strength=10.0, seed=0)
    return train_test_split(ds, 500 / 5500, seed=0)


DESK = dict(total_steps=600, batch_size=64, lr=1e-3, hidden=128, eval_every=600, eval_size=500, seed=0)


def test_6_desk_training(report, desk_data):
    tr, te = desk_data
    assert (len(tr), len(te)) == (5000, 500)
    t0 = time.perf_counter()
    dense = train(RunConfig(method=Method.DENSE, **DESK), tr, te).final_p_at_1()
    pg = train(RunConfig(method=Method.PGHASH, cr=0.1, tables=8, k=6, c=8, **DESK), tr, te).final_p_at_1()
    ss = train(RunConfig(method=Method.SAMPLED_SOFTMAX, cr=0.1, sample_fraction=0.1, **DESK), tr, te).final_p_at_1()
    sparse_run = train(RunConfig(method=Method.PGHASH, cr=1.0, tables=8, k=6, c=8,
                                 **{**DESK, "total_steps": 200, "eval_every": 0}), tr, te)
    fracs = [r.avg_active_frac for r in sparse_run.ledger]
    elapsed = time.perf_counter() - t0
    parts = {
        "a": dense >= 0.8,
        "b": pg >= dense - 0.05,
        "c": pg >= ss,
        "d": min(fracs) < 0.2,
    }
    ok = all(parts.values()) and elapsed < 600
    detail = (f"dense P@1 {dense:.3f}, PGHash {pg:.3f}, sampled softmax {ss:.3f}, "
              f"CR=1 active fraction {fracs[0]:.3f} -> {min(fracs):.3f} within 200 steps; "
              f"parts {parts}; {elapsed:.1f}s")
    assert report(6, ok, detail)


def test_7_federated(report, desk_data):
    tr, te = desk_data
    t0 = time.perf_counter()
    base = dict(total_steps=20, batch_size=64, lr=1e-3, eval_every=10, eval_size=200, seed=0)
    c1 = RunConfig(method=Method.DENSE, num_devices=1, **base)
    single, fed1 = train(c1, tr, te), run_experiment(c1, tr, te)
    same_ledger = [(r.round, r.avg_active_frac, r.loss, r.p_at_1) for r in single.ledger] == \
                  [(r.round, r.avg_active_frac, r.loss, r.p_at_1) for r in fed1.ledger]
    same_weights = all(np.array_equal(getattr(single.weights, k), getattr(fed1.weights, k))
                       for k in net.PARAM_NAMES)

    det = LeakDetector()
    c4 = RunConfig(method=Method.PGHASH, num_devices=4, cr=0.1, tables=8, k=6, c=8, **base)
    pg = run_experiment(c4, tr, te, tap=det.tap, observers=[det])
    dense4 = run_experiment(RunConfig(method=Method.DENSE, num_devices=4, **base), tr, te)
    n, h, d = tr.num_labels, c4.hidden, tr.num_features
    cap = int(c4.cr * n)
    mem_ok = max(pg.extra["mem_peak"].values()) <= c4.c * n + cap * h
    per_device = 8 * (c4.c * n + d * h + h + n + cap * h)
    bytes_ok = all(r.bytes_down <= 4 * per_device and r.bytes_down < rd.bytes_down and r.bytes_up < rd.bytes_up
                   for r, rd in zip(pg.ledger, dense4.ledger))
    privacy_ok = det.leaks == [] and det.secrets > 0 and det.messages > 0
    elapsed = time.perf_counter() - t0
    ok = same_ledger and same_weights and privacy_ok and mem_ok and bytes_ok and elapsed < 300
    ratio = sum(r.bytes_down + r.bytes_up for r in pg.ledger) / sum(r.bytes_down + r.bytes_up for r in dense4.ledger)
    detail = (f"N=1 dense == single machine: ledger {same_ledger}, weights {same_weights}; "
              f"leaks {len(det.leaks)} over {det.messages} uplink messages; memory ok {mem_ok}; "
              f"bytes ok {bytes_ok} (PGHash/dense traffic {ratio:.3f}); {elapsed:.1f}s")
    assert report(7, ok, detail)


def _rel_err(a, b):
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def test_8_gradient_check(report):
    t0 = time.perf_counter()
    worst = 0.0
    eps = 1e-6
    for seed in range(100):
        rng = np.random.default_rng(seed)
        w = net.NetWeights(rng.standard_normal((5, 4)), rng.standard_normal(4) * 0.5,
                           rng.standard_normal((4, 6)), rng.standard_normal(6) * 0.5)
        X = sp.csr_matrix(rng.standard_normal((3, 5)) * (rng.random((3, 5)) < 0.6))
        cols = np.sort(rng.choice(6, size=rng.integers(2, 7), replace=False))
        labels = [tuple(sorted({int(cols[0])} | set(rng.choice(6, 1).tolist()))) for _ in range(3)]
        mask = rng.random((3, len(cols))) < 0.7
        mask[:, 0] = True
        _, g = net.loss_and_grad(w, X, labels, cols, mask)
        full = {"W1": g.W1, "b1": g.b1, "W2": np.zeros_like(w.W2), "b2": np.zeros_like(w.b2)}
        full["W2"][:, cols] = g.W2
        full["b2"][cols] = g.b2
        for name in net.PARAM_NAMES:
            p = getattr(w, name)
            num = np.zeros_like(p)
            for i in np.ndindex(p.shape):
                old = p[i]
                p[i] = old + eps
                lp = net.loss_and_grad(w, X, labels, cols, mask)[0]
                p[i] = old - eps
                lm = net.loss_and_grad(w, X, labels, cols, mask)[0]
                p[i] = old
                num[i] = (lp - lm) / (2 * eps)
            worst = max(worst, _rel_err(full[name], num))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 10
    assert report(8, ok, f"max relative error {worst:.2e} over 100 instances; {elapsed:.2f}s")
