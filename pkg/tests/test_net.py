import numpy as np
import pytest
import scipy.sparse as sp

from pghash import net
from pghash.net import Adam, NetWeights, OpCounter


def toy(d=5, h=4, n=6, M=3, seed=0, density=0.6):
    rng = np.random.default_rng(seed)
    w = NetWeights(rng.standard_normal((d, h)), rng.standard_normal(h) * 0.5,
                   rng.standard_normal((h, n)), rng.standard_normal(n) * 0.5)
    X = sp.random(M, d, density=density, random_state=seed, format="csr") * 2.0
    labels = [tuple(sorted(rng.choice(n, size=rng.integers(1, 3), replace=False).tolist())) for _ in range(M)]
    return w, X, labels


def numeric_grad(w, X, labels, columns, mask, eps=1e-6):
    out = {}
    for name in net.PARAM_NAMES:
        p = getattr(w, name)
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            lp = net.loss_and_grad(w, X, labels, columns, mask)[0]
            p[i] = old - eps
            lm = net.loss_and_grad(w, X, labels, columns, mask)[0]
            p[i] = old
            g[i] = (lp - lm) / (2 * eps)
        out[name] = g
    return out


def rel_err(a, b):
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else np.linalg.norm(a - b) / denom


class TestForward:
    def test_empty_example(self):
        w, _, _ = toy()
        h = net.forward_hidden(w.W1, w.b1, sp.csr_matrix((1, 5)))
        np.testing.assert_array_equal(h[0], np.maximum(w.b1, 0))

    def test_one_hot(self):
        w, _, _ = toy()
        x = sp.csr_matrix(([1.0], ([0], [3])), shape=(1, 5))
        np.testing.assert_array_equal(net.forward_hidden(w.W1, w.b1, x)[0], np.maximum(w.W1[3] + w.b1, 0))

    def test_sparse_matches_dense(self):
        w, X, _ = toy(d=50, h=16, M=20, density=0.1)
        dense = np.maximum(X.toarray() @ w.W1 + w.b1, 0)
        np.testing.assert_allclose(net.forward_hidden(w.W1, w.b1, X), dense, atol=1e-10)

    def test_out_of_range_feature(self):
        w, _, _ = toy()
        with pytest.raises(ValueError):
            net.forward_hidden(w.W1, w.b1, sp.csr_matrix((1, 7)))

    def test_full_theta_matches_dense(self):
        w, X, _ = toy()
        h = net.forward_hidden(w.W1, w.b1, X)
        np.testing.assert_allclose(net.forward_active(w.W2, w.b2, h, np.arange(6)), h @ w.W2 + w.b2, atol=1e-12)

    def test_single_column(self):
        w, X, _ = toy()
        h = net.forward_hidden(w.W1, w.b1, X)
        np.testing.assert_allclose(net.forward_active(w.W2, w.b2, h, [4])[:, 0], h @ w.W2[:, 4] + w.b2[4])

    def test_bad_column(self):
        w, X, _ = toy()
        with pytest.raises(ValueError):
            net.forward_active(w.W2, w.b2, np.ones((1, 4)), [6])

    def test_cost_linear_in_active_set(self):
        w, X, labels = toy(h=8, n=200, M=4)
        costs = []
        for size in (10, 20, 40, 80):
            c = OpCounter()
            cols = np.arange(size)
            net.loss_and_grad(w, X, [(0,)] * 4, cols, counter=c)
            costs.append(c.total)
            assert c.forward == 4 * 8 * size
            assert c.total <= 3 * 4 * 8 * size
        assert costs[1] == 2 * costs[0] and costs[3] == 8 * costs[0]


class TestLoss:
    def test_singleton_true_label(self):
        w, X, _ = toy(M=1)
        loss, g = net.loss_and_grad(w, X, [(2,)], [2])
        assert loss == 0.0
        assert np.all(g.W2 == 0)

    def test_batch_mean(self):
        w, X, labels = toy(M=2)
        cols = np.arange(6)
        l0 = net.loss_and_grad(w, X[0], labels[:1], cols)[0]
        l1 = net.loss_and_grad(w, X[1], labels[1:], cols)[0]
        assert net.loss_and_grad(w, X, labels, cols)[0] == pytest.approx((l0 + l1) / 2)

    def test_sample_without_labels_skipped(self, caplog):
        w, X, _ = toy(M=2)
        cols = np.arange(6)
        with caplog.at_level("WARNING"):
            both = net.loss_and_grad(w, X, [(1,), ()], cols)[0]
        assert "without labels" in caplog.text
        assert both == pytest.approx(net.loss_and_grad(w, X[0], [(1,)], cols)[0])

    def test_matches_explicit_formula(self):
        w, X, labels = toy(M=3)
        h = np.maximum(X.toarray() @ w.W1 + w.b1, 0)
        z = h @ w.W2 + w.b2
        logp = z - np.log(np.exp(z).sum(1, keepdims=True))
        want = np.mean([-np.mean(logp[m, list(labels[m])]) for m in range(3)])
        assert net.full_loss(w, X, labels) == pytest.approx(want, rel=1e-12)

    def test_finite_differences_toy(self):
        worst = 0.0
        for seed in range(100):
            w, X, labels = toy(seed=seed)
            rng = np.random.default_rng(seed)
            cols = np.sort(rng.choice(6, size=rng.integers(2, 7), replace=False))
            labels = [tuple(sorted(set(l) | {int(cols[0])})) for l in labels]
            mask = rng.random((3, len(cols))) < 0.7
            mask[:, 0] = True
            _, g = net.loss_and_grad(w, X, labels, cols, mask)
            num = numeric_grad(w, X, labels, cols, mask)
            gW2 = np.zeros_like(w.W2)
            gW2[:, cols] = g.W2
            gb2 = np.zeros_like(w.b2)
            gb2[cols] = g.b2
            for name, a in (("W1", g.W1), ("b1", g.b1), ("W2", gW2), ("b2", gb2)):
                worst = max(worst, rel_err(a, num[name]))
        assert worst < 1e-4

    def test_masked_columns_get_no_gradient(self):
        w, X, labels = toy(M=2)
        cols = np.arange(6)
        mask = np.ones((2, 6), dtype=bool)
        mask[:, 5] = False
        labels = [(0,), (1,)]
        _, g = net.loss_and_grad(w, X, labels, cols, mask)
        assert np.all(g.W2[:, 5] == 0) and g.b2[5] == 0


class TestAdam:
    def test_zero_gradient(self):
        w, X, labels = toy()
        before = w.copy()
        opt = Adam(w, lr=1e-2)
        z = net.Gradients(np.zeros_like(w.W1), np.zeros_like(w.b1), np.zeros((4, 6)), np.zeros(6), np.arange(6))
        opt.step(w, z)
        assert opt.step_count == 1
        for k in net.PARAM_NAMES:
            np.testing.assert_array_equal(getattr(w, k), getattr(before, k))

    def test_first_step_magnitude(self):
        w = NetWeights(np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)), np.zeros(1))
        opt = Adam(w, lr=1e-3)
        g = net.Gradients(np.ones((1, 1)), np.zeros(1), np.zeros((1, 1)), np.zeros(1), np.arange(1))
        opt.step(w, g)
        assert w.W1[0, 0] == pytest.approx(-1e-3 / (1 + 1e-8))
        for _ in range(5):
            opt.step(w, g)
        assert w.W1[0, 0] == pytest.approx(-6e-3, rel=1e-6)

    def test_sparse_leaves_inactive_columns(self):
        w, X, labels = toy(n=10, M=4)
        opt = Adam(w, lr=1e-2)
        rng = np.random.default_rng(1)
        untouched = (w.W2[:, 7:].copy(), w.b2[7:].copy())
        for _ in range(5):
            cols = np.sort(rng.choice(7, size=4, replace=False))
            _, g = net.loss_and_grad(w, X, [(int(cols[0]),)] * 4, cols)
            opt.step(w, g, sparse=True)
        np.testing.assert_array_equal(w.W2[:, 7:], untouched[0])
        np.testing.assert_array_equal(w.b2[7:], untouched[1])
        assert np.all(opt.m["W2"][:, 7:] == 0)

    def test_single_sparse_step_matches_dense(self):
        w, X, labels = toy(n=10, M=4)
        wd, ws = w.copy(), w.copy()
        cols = np.array([1, 4, 8])
        _, g = net.loss_and_grad(w, X, [(4,)] * 4, cols)
        Adam(ws, lr=1e-2).step(ws, g, sparse=True)
        Adam(wd, lr=1e-2).step(wd, g, sparse=False)
        for k in net.PARAM_NAMES:
            np.testing.assert_allclose(getattr(ws, k), getattr(wd, k), atol=1e-15)

    def test_nan_gradient(self):
        w, X, labels = toy()
        g = net.Gradients(np.full_like(w.W1, np.nan), w.b1, np.zeros((4, 6)), np.zeros(6), np.arange(6))
        with pytest.raises(FloatingPointError):
            Adam(w).step(w, g)

    def test_loss_decreases_on_separable_toy(self):
        n, d = 8, 16
        X = sp.csr_matrix(np.eye(d)[:n] * 3.0)
        labels = [(i,) for i in range(n)]
        w = NetWeights.init(d, n, hidden=12, seed=1)
        opt = Adam(w, lr=1e-2)
        losses = []
        for _ in range(100):
            loss, g = net.loss_and_grad(w, X, labels, np.arange(n))
            losses.append(loss)
            opt.step(w, g)
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
        assert net.precision_at_1(net.scores(w, X), labels) == 1.0


class TestPrecision:
    def test_hit(self):
        assert net.precision_at_1(np.array([[0.1, 0.9, 0.0]]), [(1,)]) == 1.0

    def test_miss(self):
        assert net.precision_at_1(np.array([[0.1, 0.2, 5.0, 0.0, 0.3]]), [(0, 1, 3)]) == 0.0

    def test_ties_lowest_index(self):
        s = np.array([[1.0, 3.0, 3.0]])
        assert net.precision_at_1(s, [(1,)]) == 1.0
        assert net.precision_at_1(s, [(2,)]) == 0.0

    def test_empty_labels_excluded(self):
        s = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert net.precision_at_1(s, [(0,), ()]) == 1.0


def test_checkpoint_roundtrip(tmp_path):
    w, X, labels = toy()
    opt = Adam(w, lr=1e-3)
    _, g = net.loss_and_grad(w, X, labels, np.arange(6))
    opt.step(w, g)
    path = tmp_path / "ck.npz"
    net.save_checkpoint(path, w, opt, round=3)
    w2, opt2 = net.load_checkpoint(path, lr=1e-3)
    for k in net.PARAM_NAMES:
        np.testing.assert_array_equal(getattr(w, k), getattr(w2, k))
        np.testing.assert_array_equal(opt.m[k], opt2.m[k])
    assert opt2.step_count == 1
