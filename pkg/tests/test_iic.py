import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fuselet.errors import DataError
from fuselet.iic import (
    ClusterHead,
    ClusterTree,
    HeadConfig,
    PerturbationConfig,
    SegmentationMap,
    TreeConfig,
    compose_label,
    decompose_label,
    head_forward,
    head_loss_grad,
    iic_loss,
    iic_loss_grad,
    predict_map,
    softmax,
    train_head,
    train_tree,
)
from fuselet.raster import GeoGrid, Raster
from fuselet.rbm import CdConfig, train_dbn
from fuselet.sampling import extract_neighborhoods, fit_stats, standardize

from oracles import brute_joint, brute_mutual_information

FD_STEP = 1e-5


def rel_err(a, n, floor=1e-6):
    """Entry-wise |a - n| / max(|a|, |n|, floor); the floor guards near-zero entries."""
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def random_probs(rng, B, C, temp=1.0):
    return softmax(rng.normal(0, temp, (B, C)))


class TestSoftmax:
    def test_zero_head_uniform(self):
        head = ClusterHead(np.zeros((4, 5)), np.zeros(5))
        assert np.allclose(head_forward(head, np.ones(4)), 0.2, rtol=0, atol=1e-15)

    def test_closed_form(self):
        head = ClusterHead(np.zeros((3, 2)), np.array([math.log(2), 0.0]))
        p = head_forward(head, np.zeros(3))
        assert abs(p[0] - 2 / 3) < 1e-15 and abs(p[1] - 1 / 3) < 1e-15

    def test_scalar_oracle(self):
        rng = np.random.default_rng(0)
        head = ClusterHead.init(6, 4, rng)
        z = rng.random(6)
        p = head_forward(head, z)
        logits = [sum(z[i] * head.weights[i, k] for i in range(6)) + head.bias[k] for k in range(4)]
        m = max(logits)
        e = [math.exp(x - m) for x in logits]
        assert np.abs(p - np.array(e) / sum(e)).max() < 1e-12

    def test_shift_invariance_and_rows(self):
        rng = np.random.default_rng(1)
        x = rng.normal(0, 30, (50, 7))
        p = softmax(x)
        q = softmax(x + 1234.5)
        assert np.abs(p.sum(1) - 1).max() < 1e-9
        assert np.allclose(p, q, rtol=0, atol=1e-12) and np.array_equal(p.argmax(1), q.argmax(1))

    def test_dim_mismatch(self):
        with pytest.raises(DataError):
            head_forward(ClusterHead(np.zeros((4, 2)), np.zeros(2)), np.zeros(3))


class TestLoss:
    @pytest.mark.parametrize("C", [1, 2, 3, 8, 16])
    def test_perfect_clustering(self, C):
        p = np.eye(C)
        loss, J = iic_loss(p, p)
        assert abs(loss + math.log(C)) < 1e-12
        assert np.array_equal(J, np.eye(C) / C)

    @pytest.mark.parametrize("C", [2, 5, 8])
    def test_uniform(self, C):
        p = np.full((9, C), 1.0 / C)
        assert abs(iic_loss(p, p)[0]) < 1e-12

    def test_brute_force_b7_c3(self):
        rng = np.random.default_rng(2)
        a, b = random_probs(rng, 7, 3), random_probs(rng, 7, 3)
        loss, J = iic_loss(a, b)
        S = brute_joint(a.tolist(), b.tolist())
        assert np.abs(J - np.array(S)).max() < 1e-15
        assert abs(loss + brute_mutual_information(S)) < 1e-10

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetric_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        B, C = int(rng.integers(1, 17)), int(rng.integers(1, 9))
        a, b = random_probs(rng, B, C, 3.0), random_probs(rng, B, C, 3.0)
        lab, _ = iic_loss(a, b)
        lba, _ = iic_loss(b, a)
        assert abs(lab - lba) < 1e-12
        assert -1e-12 <= -lab <= math.log(C) + 1e-12

    def test_row_sum_check(self):
        a = np.array([[0.5, 0.6]])
        with pytest.raises(DataError):
            iic_loss(a, a)
        with pytest.raises(DataError):
            iic_loss(np.eye(2), np.eye(3)[:2])

    def test_probability_gradient_fd(self):
        # the loss as a function of raw probability entries, floor handled exactly
        rng = np.random.default_rng(3)
        a, b = random_probs(rng, 6, 4), random_probs(rng, 6, 4)
        _, dA, dB = iic_loss_grad(a, b)

        def loss_of(x, y):
            from fuselet.iic import _joint, _mutual_information_terms

            return _mutual_information_terms(_joint(x, y))[2]

        for base, grad, first in ((a, dA, True), (b, dB, False)):
            num = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                e = np.zeros_like(base)
                e[idx] = FD_STEP
                hi = loss_of(base + e, b) if first else loss_of(a, base + e)
                lo = loss_of(base - e, b) if first else loss_of(a, base - e)
                num[idx] = (hi - lo) / (2 * FD_STEP)
            assert rel_err(grad, num) < 1e-4


def fd_head_check(head, z, zp):
    _, grads = head_loss_grad(head, z, zp)
    worst = 0.0
    for name, p in head.params().items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            for sign in (1, -1):
                q = {k: v.copy() for k, v in head.params().items()}
                q[name][idx] += sign * FD_STEP
                num[idx] += sign * head_loss_grad(head.with_params(q), z, zp)[0]
        num /= 2 * FD_STEP
        worst = max(worst, rel_err(grads[name], num))
    return worst


class TestHeadGradient:
    def test_small_batch_fixed_noise(self):
        rng = np.random.default_rng(0)
        head = ClusterHead.init(5, 3, rng, scale=2.0)
        z = rng.random((4, 5))
        zp = z + rng.normal(0, 0.05, z.shape)
        assert fd_head_check(head, z, zp) < 1e-4

    def test_random_configurations(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for trial in range(100):
            B, C, d = int(rng.integers(2, 17)), int(rng.integers(2, 9)), int(rng.integers(2, 7))
            hidden = int(rng.integers(2, 6)) if trial % 3 == 0 else 0
            head = ClusterHead.init(d, C, rng, hidden_dim=hidden, scale=2.0)
            z = rng.random((B, d))
            zp = z + rng.normal(0, rng.uniform(0.01, 0.3), z.shape)
            worst = max(worst, fd_head_check(head, z, zp))
        assert worst < 1e-4


def blobs(rng, n=400):
    a = rng.normal(0.2, 0.02, (n, 4))
    b = rng.normal(0.8, 0.02, (n, 4))
    return np.vstack([a, b])


class TestTrainHead:
    def test_zero_lr_unchanged(self):
        rng = np.random.default_rng(0)
        z = rng.random((64, 5))
        cfg = HeadConfig(n_classes=3, epochs=3, batch_size=16, learning_rate=0.0)
        trained = train_head(z, cfg, np.random.default_rng(5))
        init = ClusterHead.init(5, 3, np.random.default_rng(5))
        assert trained.equals(init) and len(trained.loss_log) == 3

    def test_separates_blobs(self):
        rng = np.random.default_rng(1)
        z = blobs(rng)
        cfg = HeadConfig(n_classes=2, epochs=30, batch_size=128, learning_rate=1e-2,
                         perturbation=PerturbationConfig(noise_sigma=0.01, seed=3))
        head = train_head(z, cfg)
        lab = head_forward(head, z).argmax(1)
        assert len(set(lab[:400])) == 1 and len(set(lab[400:])) == 1 and lab[0] != lab[-1]
        assert head.loss_log[-1] < head.loss_log[0]

    def test_seeded(self):
        z = np.random.default_rng(2).random((100, 3))
        cfg = HeadConfig(n_classes=4, epochs=2, batch_size=32)
        assert train_head(z, cfg).equals(train_head(z, cfg))

    def test_too_few(self):
        with pytest.raises(DataError):
            train_head(np.zeros((1, 3)), HeadConfig(n_classes=2))


class TestTree:
    def test_compose(self):
        assert compose_label(5, 17, 100) == 517 and decompose_label(517, 100) == (5, 17)
        assert compose_label(3, 0, 100) == 300

    def test_identical_embeddings(self):
        z = np.full((300, 4), 0.5)
        tree = train_tree(z, TreeConfig(c_root=6, c_child=3, min_child_samples=50, epochs=2, batch_size=64))
        assert len(tree.routing_counts) == 1 and len(tree.children) <= 1

    def test_routing_partition(self):
        rng = np.random.default_rng(3)
        z = np.vstack([rng.normal(m, 0.03, (150, 3)) for m in (0.1, 0.5, 0.9)])
        cfg = TreeConfig(c_root=4, c_child=3, min_child_samples=40, epochs=15, batch_size=64,
                         learning_rate=1e-2, init_scale=4.0)
        tree = train_tree(z, cfg)
        routed = head_forward(tree.root, z).argmax(1)
        counts = np.bincount(routed, minlength=4)
        assert tree.routing_counts == {int(k): int(counts[k]) for k in np.flatnonzero(counts)}
        assert sum(tree.routing_counts.values()) == len(z)
        assert set(tree.children) == {k for k, n in tree.routing_counts.items() if n >= 40}
        labels = tree.predict(z)
        for k in range(4):
            if k not in tree.children:
                assert (labels[routed == k] == k * 3).all()
        assert (labels // 3 == routed).all()

    def test_child_trains_on_routed_samples_only(self):
        rng = np.random.default_rng(4)
        z = np.vstack([rng.normal(m, 0.05, (200, 3)) for m in (0.2, 0.8)])
        cfg = TreeConfig(c_root=2, c_child=2, min_child_samples=10, epochs=10, batch_size=64,
                         learning_rate=1e-2, init_scale=4.0, seed=1)
        tree = train_tree(z, cfg)
        routed = head_forward(tree.root, z).argmax(1)
        hc = cfg.head_config(2, cfg.epochs)
        for label, child in tree.children.items():
            ref = train_head(z[routed == label], hc, np.random.default_rng([cfg.seed, label + 1]))
            assert child.equals(ref)

    def test_threads_do_not_change_result(self):
        rng = np.random.default_rng(5)
        z = np.vstack([rng.normal(m, 0.05, (120, 3)) for m in (0.2, 0.5, 0.8)])
        cfg = TreeConfig(c_root=3, c_child=2, min_child_samples=10, epochs=5, batch_size=64, init_scale=4.0)
        assert train_tree(z, cfg, threads=1).equals(train_tree(z, cfg, threads=3))

    def test_save_load(self, tmp_path):
        rng = np.random.default_rng(6)
        z = rng.random((200, 3))
        tree = train_tree(z, TreeConfig(c_root=3, c_child=2, min_child_samples=20, epochs=2, batch_size=50))
        tree.save(tmp_path / "t.bin")
        back = ClusterTree.load(tmp_path / "t.bin")
        assert back.equals(tree) and back.routing_counts == tree.routing_counts
        assert np.array_equal(back.predict(z), tree.predict(z))

    def test_too_few(self):
        with pytest.raises(DataError):
            train_tree(np.zeros((5, 2)), TreeConfig(min_child_samples=10))


class TestPredictMap:
    def setup_model(self):
        rng = np.random.default_rng(7)
        g = GeoGrid(0.0, 1.0, 0.1, 0.1, 10, 12)
        values = rng.normal(size=(2, 10, 12))
        valid = np.ones((10, 12), bool)
        valid[4, 5] = False
        r = Raster(g, values, valid)
        s = extract_neighborhoods(r)
        stats = fit_stats(s)
        z = standardize(s, stats)
        dbn = train_dbn(z, [20], CdConfig(epochs=1))
        from fuselet.rbm import embed

        tree = train_tree(embed(dbn, z), TreeConfig(c_root=3, c_child=2, min_child_samples=5, epochs=2, batch_size=16))
        return r, stats, dbn, tree

    def test_map(self, tmp_path):
        r, stats, dbn, tree = self.setup_model()
        m = predict_map(tree, dbn, r, stats)
        # border and the 3x3 block around the invalid pixel are undefined
        assert m.valid.sum() == 8 * 10 - 9
        assert not m.valid[0].any() and not m.valid[3:6, 4:7].any()
        again = predict_map(tree, dbn, r, stats)
        assert np.array_equal(m.labels, again.labels)
        m.save(tmp_path / "seg.img")
        back = SegmentationMap.load(tmp_path / "seg.img")
        assert back.c_child == 2 and np.array_equal(back.labels[m.valid], m.labels[m.valid])
        assert np.array_equal(back.valid, m.valid)

    def test_dim_mismatch(self):
        r, stats, dbn, tree = self.setup_model()
        bad = Raster(r.grid, np.zeros((3, 10, 12)), r.valid)
        with pytest.raises(DataError):
            predict_map(tree, dbn, bad, stats)
