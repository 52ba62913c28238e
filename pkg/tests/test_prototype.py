import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from centerseg import tensor as T
from centerseg.errors import DataError, DimensionError, NumericError
from centerseg.prototype import (IGNORE_INDEX, AssignmentMatrix, ClassCenters, PrototypeBank, assign_all, batch_prototypes,
                                 downsample_labels, extract_centers, gumbel_assign, init_bank, momentum_update,
                                 reassemble_patches, sample_gumbel, split_patches)
from centerseg.tensor import Tensor


class TestDownsample:
    def test_uniform(self):
        y = downsample_labels(np.full((4, 4), 2), 3, 2)
        np.testing.assert_array_equal(y.fractions[2], 1.0)
        np.testing.assert_array_equal(y.fractions[[0, 1]], 0.0)

    def test_half_half(self):
        y = downsample_labels(np.array([[0, 0], [1, 1]]), 2, 2)
        assert y.fractions[0, 0, 0] == 0.5 and y.fractions[1, 0, 0] == 0.5

    def test_ignore(self):
        y = downsample_labels(np.array([[0, IGNORE_INDEX], [0, IGNORE_INDEX]]), 2, 2)
        assert y.fractions[0, 0, 0] == 0.5 and y.ignore[0, 0] == 0.5

    def test_bad_label(self):
        with pytest.raises(DataError):
            downsample_labels(np.array([[0, 3]]), 3, 1)

    def test_indivisible(self):
        with pytest.raises(DimensionError):
            downsample_labels(np.zeros((3, 4), dtype=int), 2, 2)

    @given(hnp.arrays(np.int64, (2, 8, 8), elements=st.sampled_from([0, 1, 2, IGNORE_INDEX])))
    def test_fractions_sum_to_one(self, labels):
        y = downsample_labels(labels, 3, 4)
        np.testing.assert_allclose(y.fractions.sum(axis=1) + y.ignore, 1.0, atol=1e-5)


class TestSplit:
    def test_identity_tiling(self, rng):
        f = rng.normal(size=(3, 4, 4))
        y = downsample_labels(rng.integers(0, 2, (4, 4)), 2, 1)
        f_l, y_l = split_patches(f, y, 4, 4)
        assert f_l.shape == (1, 3, 16)
        np.testing.assert_array_equal(f_l.data[0], f.reshape(3, 16))

    def test_raster_order(self):
        f = np.arange(64.0).reshape(1, 8, 8)
        y = downsample_labels(np.zeros((8, 8), dtype=int), 2, 1)
        f_l, _ = split_patches(f, y, 4, 4)
        assert f_l.shape == (4, 1, 16)
        assert [f_l.data[p, 0, 0] for p in range(4)] == [0, 4, 32, 36]

    @given(st.sampled_from([(1, 1), (2, 2), (2, 4), (4, 1)]), st.integers(1, 3))
    def test_round_trip(self, patch, batch):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(batch, 3, 8, 4)) if batch > 1 else rng.normal(size=(3, 8, 4))
        y = downsample_labels(np.zeros(f.shape[:-3] + (8, 4), dtype=int), 2, 1)
        with T.default_dtype(np.float64):
            f_l, _ = split_patches(f, y, *patch)
        np.testing.assert_array_equal(reassemble_patches(f_l, 8, 4, *patch), f)

    def test_indivisible(self):
        y = downsample_labels(np.zeros((6, 6), dtype=int), 2, 1)
        with pytest.raises(DimensionError):
            split_patches(np.zeros((2, 6, 6)), y, 4, 4)


def masked_mean_oracle(f_l, y_l):
    n, c, p = f_l.shape
    k = y_l.shape[1]
    out = np.zeros((k, n, c))
    for j in range(n):
        for cls in range(k):
            mass = sum(y_l[j, cls, q] for q in range(p))
            if mass > 0:
                out[cls, j] = sum(y_l[j, cls, q] * f_l[j, :, q] for q in range(p)) / mass
    return out


class TestCenters:
    def test_constant_patch(self):
        f = np.tile(np.array([1.0, -2.0, 3.0])[:, None], (1, 1, 4))
        y = np.zeros((1, 2, 4))
        y[0, 1] = 1.0
        c = extract_centers(f, y)
        np.testing.assert_allclose(c.centers.data[1, 0], [1, -2, 3])
        assert not c.valid[0, 0]
        np.testing.assert_array_equal(c.centers.data[0, 0], 0.0)

    def test_oracle(self, rng, f64):
        labels = rng.choice([0, 1, 2, IGNORE_INDEX], size=(8, 8))
        mask = downsample_labels(labels, 3, 2)
        f = rng.normal(size=(5, 4, 4))
        f_l, y_l = split_patches(f, mask, 2, 2)
        c = extract_centers(f_l, y_l)
        np.testing.assert_allclose(c.centers.data, masked_mean_oracle(f_l.data, y_l), atol=1e-6)
        assert c.num_patches == 4

    def test_differentiable(self, rng, f64):
        y = rng.random((3, 2, 6))
        err = T.finite_diff_check(lambda t: T.tsum(extract_centers(t, y).centers ** 2), rng.normal(size=(3, 4, 6)))
        assert err < 1e-4


class TestGumbel:
    def test_fixed_point(self):
        class U:
            def uniform(self, lo, hi, size):
                return np.full(size, 1 / np.e)
        np.testing.assert_allclose(sample_gumbel(U(), (3,)), 0.0, atol=1e-15)

    def test_mean(self):
        g = sample_gumbel(np.random.default_rng(0), 1_000_000)
        assert g.mean() == pytest.approx(np.euler_gamma, abs=0.01)

    def test_seeded(self):
        a = sample_gumbel(np.random.default_rng(5), 10)
        np.testing.assert_array_equal(a, sample_gumbel(np.random.default_rng(5), 10))

    def test_clamped(self):
        class U:
            def uniform(self, lo, hi, size):
                return np.array([0.0, 1.0])
        assert np.all(np.isfinite(sample_gumbel(U(), (2,))))


class TestAssign:
    def test_single_option(self, rng):
        a = gumbel_assign(rng.normal(size=(5, 3)), rng.normal(size=(1, 3)), rng)
        np.testing.assert_array_equal(a.hard.data, 1.0)

    def test_dominant_logit(self):
        protos = np.eye(3) * 5
        a = gumbel_assign(protos[[2, 0, 1]], protos, noise=False)
        np.testing.assert_array_equal(a.choices(), [2, 0, 1])

    @given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**16))
    def test_rows_one_hot(self, n, m, seed):
        rng = np.random.default_rng(seed)
        a = gumbel_assign(rng.normal(size=(n, 4)), rng.normal(size=(m, 4)), rng)
        h = a.hard.data
        assert set(np.unique(h)) <= {0.0, 1.0}
        np.testing.assert_array_equal(h.sum(axis=1), 1.0)
        np.testing.assert_array_equal(np.argmax(h, axis=1), np.argmax(a.soft.data, axis=1))

    def test_straight_through_grad(self, rng, f64):
        s, p = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
        w = rng.normal(size=(4, 2))
        grads = []
        for which in ("hard", "soft"):
            x = Tensor(s, requires_grad=True)
            a = gumbel_assign(x, p, np.random.default_rng(9))
            a.logits.retain_grad()
            T.tsum(getattr(a, which) * w).backward()
            grads.append(a.logits.grad)
        np.testing.assert_array_equal(grads[0], grads[1])

    def test_prototypes_get_no_grad(self, rng):
        p = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        T.tsum(gumbel_assign(x, p, rng).hard).backward()
        assert p.grad is None

    def test_non_finite(self):
        with pytest.raises(NumericError):
            gumbel_assign(np.array([[np.inf, 0.0]]), np.ones((2, 2)), noise=False)

    def test_empty(self):
        with pytest.raises(DimensionError):
            gumbel_assign(np.zeros((0, 2)), np.ones((2, 2)), noise=False)


def _fixed(hard):
    t = T.as_tensor(np.asarray(hard, dtype=np.float64))
    return AssignmentMatrix(t, t, t)


def _centers(rows):
    s = np.asarray(rows, dtype=np.float64)
    return ClassCenters(T.as_tensor(s), np.ones(s.shape[:2], bool), np.ones(s.shape[:2]))


class TestBatchPrototypes:
    def test_singleton(self, f64):
        c = _centers([[[1.0, 2.0]], [[3.0, 4.0]]])
        p_hat, counts = batch_prototypes([_fixed([[1.0]]), _fixed([[1.0]])], c, 1)
        np.testing.assert_array_equal(p_hat.data[:, 0], [[1, 2], [3, 4]])
        np.testing.assert_array_equal(counts, [[1], [1]])

    def test_two_point_mean(self, f64):
        c = _centers([[[1.0, 0.0], [3.0, 2.0]]])
        p_hat, counts = batch_prototypes([_fixed([[1, 0, 0], [1, 0, 0]])], c, 3)
        np.testing.assert_array_equal(p_hat.data[0, 0], [2.0, 1.0])
        np.testing.assert_array_equal(counts, [[2, 0, 0]])
        np.testing.assert_array_equal(p_hat.data[0, 1:], 0.0)

    @given(st.integers(0, 2**16))
    def test_group_by_oracle(self, seed):
        rng = np.random.default_rng(seed)
        k, n, m, c = 3, 5, 4, 2
        s = rng.normal(size=(k, n, c))
        valid = rng.random((k, n)) < 0.7
        s[~valid] = 0
        centers = ClassCenters(T.as_tensor(s), valid, valid.astype(float))
        choice = {kk: rng.integers(0, m, valid[kk].sum()) for kk in range(k)}
        assigns = [_fixed(np.eye(m)[choice[kk]]) if valid[kk].any() else None for kk in range(k)]
        with T.default_dtype(np.float64):
            p_hat, counts = batch_prototypes(assigns, centers, m)
        for kk in range(k):
            rows = s[kk][valid[kk]]
            for i in range(m):
                sel = rows[choice[kk] == i]
                assert counts[kk, i] == len(sel)
                expect = sel.mean(axis=0) if len(sel) else np.zeros(c)
                np.testing.assert_allclose(p_hat.data[kk, i], expect, atol=1e-6)


class TestMomentum:
    def test_mu_one(self, rng):
        bank = init_bank(2, 3, 4, rng, momentum=1.0)
        before = bank.prototypes.copy()
        momentum_update(bank, rng.normal(size=before.shape), np.ones((2, 3), int))
        np.testing.assert_array_equal(bank.prototypes, before)

    def test_single_step(self):
        bank = PrototypeBank(np.zeros((1, 1, 2)), 0.999)
        momentum_update(bank, np.array([[[1.0, -2.0]]]), np.array([[1]]))
        np.testing.assert_allclose(bank.prototypes, [[[0.001, -0.002]]], rtol=1e-12)
        assert bank.update_counts[0, 0] == 1

    def test_empty_slot_untouched(self, rng):
        bank = init_bank(1, 2, 3, rng)
        before = bank.prototypes.copy()
        momentum_update(bank, np.zeros((1, 2, 3)), np.array([[0, 1]]))
        np.testing.assert_array_equal(bank.prototypes[0, 0], before[0, 0])
        np.testing.assert_array_equal(bank.update_counts, [[0, 1]])

    def test_mu_zero_copies(self, rng):
        bank = PrototypeBank(rng.normal(size=(2, 2, 3)), 0.0)
        p_hat = rng.normal(size=(2, 2, 3))
        momentum_update(bank, p_hat, np.ones((2, 2), int))
        np.testing.assert_array_equal(bank.prototypes, p_hat)

    @given(st.floats(0, 1), st.integers(0, 2**16))
    def test_convex(self, mu, seed):
        rng = np.random.default_rng(seed)
        bank = PrototypeBank(rng.uniform(-1, 1, (2, 3, 4)), mu)
        momentum_update(bank, rng.uniform(-1, 1, (2, 3, 4)), rng.integers(0, 3, (2, 3)))
        assert np.all(bank.prototypes >= -1) and np.all(bank.prototypes <= 1)

    def test_shape_mismatch(self, rng):
        bank = init_bank(2, 2, 2, rng)
        with pytest.raises(DimensionError):
            momentum_update(bank, np.zeros((2, 2, 3)), np.ones((2, 2), int))

    def test_absent_class_rows_never_change(self, rng):
        bank = init_bank(3, 2, 4, rng, dtype=np.float64)
        before = bank.prototypes.copy()
        labels = rng.integers(0, 2, (8, 8))  # class 2 absent
        mask = downsample_labels(labels, 3, 1)
        f_l, y_l = split_patches(rng.normal(size=(4, 8, 8)), mask, 4, 4)
        centers = extract_centers(f_l, y_l)
        assigned = assign_all(centers, bank, rng)
        assert assigned[2] is None
        p_hat, counts = batch_prototypes(assigned, centers, 2)
        momentum_update(bank, p_hat, counts)
        np.testing.assert_array_equal(bank.prototypes[2], before[2])


class TestInitBank:
    def test_unit_rows(self, rng):
        bank = init_bank(6, 8, 32, rng)
        assert bank.prototypes.shape == (6, 8, 32)
        np.testing.assert_allclose(np.linalg.norm(bank.prototypes, axis=2), 1.0, atol=1e-6)

    def test_seeded(self):
        a = init_bank(2, 3, 4, np.random.default_rng(3)).prototypes
        np.testing.assert_array_equal(a, init_bank(2, 3, 4, np.random.default_rng(3)).prototypes)

    def test_owners(self, rng):
        np.testing.assert_array_equal(init_bank(2, 3, 4, rng).owners(), [0, 0, 0, 1, 1, 1])
