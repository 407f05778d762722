import math

import numpy as np
import pytest

from protoseg import numerics as nm
from protoseg.model import (SegModel, class_similarity, ema_update_teacher, extract_features, linear_posterior,
                            prototype_posterior)
from protoseg.protobank import PrototypeBank
from protoseg.testing import max_rel_error, numeric_grad


def _bank(protos, C):
    protos = np.asarray(protos, dtype=float)
    K = len(protos) // C
    return PrototypeBank(protos, np.repeat(np.arange(C), K), K)


def _brute_force_posterior(protos, class_of, x, C, T):
    """Loop over every prototype, keep the per-class best cosine, softmax."""
    out = np.zeros(x.shape[:-1] + (C,))
    for idx in np.ndindex(*x.shape[:-1]):
        v = x[idx]
        best = np.full(C, -np.inf)
        for p, c in zip(protos, class_of):
            nv, np_ = np.linalg.norm(v), np.linalg.norm(p)
            s = 0.0 if nv == 0 or np_ == 0 else float(v @ p) / (nv * np_)
            best[c] = max(best[c], s)
        e = np.exp((best - best.max()) / T)
        out[idx] = e / e.sum()
    return out


class TestFeatures:
    def test_zero_image_zero_projection(self):
        m = SegModel.create(4, 16, seed=0)
        m.params["proj.w"].data[:] = 0
        m.params["proj.b"].data[:] = 0
        f = m.features(np.zeros((1, 32, 32, 3)))
        assert np.all(f.data == 0)

    @pytest.mark.parametrize("hw", [32, 64])
    def test_output_resolution_matches_input(self, hw):
        m = SegModel.create(4, 16, seed=0)
        assert m.features(np.zeros((2, hw, hw, 3))).shape == (2, hw, hw, 16)

    def test_odd_sizes_resize_back(self):
        m = SegModel.create(3, 8, seed=0)
        assert m.features(np.zeros((1, 21, 19, 3))).shape == (1, 21, 19, 8)

    def test_wrong_channel_count(self):
        with pytest.raises(nm.ShapeError):
            SegModel.create(4).features(np.zeros((1, 16, 16, 4)))

    def test_deterministic(self):
        m = SegModel.create(4, 16, seed=1)
        x = np.random.default_rng(0).uniform(size=(2, 16, 16, 3))
        assert m.features(x).data.tobytes() == m.features(x).data.tobytes()

    def test_first_layer_gradient_matches_finite_differences(self):
        m = SegModel.create(4, 8, seed=2)
        x = np.random.default_rng(3).uniform(size=(1, 8, 8, 3))
        w = m.params["conv1.w"]
        m.features(x).sum().backward()
        arr = w.data.copy()

        def f():
            params = dict(m.params)
            params["conv1.w"] = nm.Tensor(arr)
            return extract_features(params, x).data.sum()

        assert max_rel_error(w.grad, numeric_grad(f, arr)) < 1e-3


class TestLinearPosterior:
    def test_zero_weights_uniform(self):
        p = linear_posterior(np.zeros((4, 6)), np.random.default_rng(0).normal(size=(3, 3, 6)))
        np.testing.assert_allclose(p.data, 0.25, atol=1e-15)

    def test_constructed_argmax(self):
        w = np.zeros((3, 3))
        w[0, 0] = 10.0
        f = np.array([[5.0, 0.1, 0.2], [0.1, 0.0, 0.0], [-1.0, 0.2, 0.3]])
        p = linear_posterior(w, f).data
        assert p[0].argmax() == 0 and p[1].argmax() == 0
        assert p[2].argmax() != 0

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(5, 7))
        f = rng.normal(size=(4, 4, 7))
        expected = np.zeros((4, 4, 5))
        for a in range(4):
            for b in range(4):
                z = np.array([sum(w[c, d] * f[a, b, d] for d in range(7)) for c in range(5)])
                e = np.exp(z - z.max())
                expected[a, b] = e / e.sum()
        np.testing.assert_allclose(linear_posterior(w, f).data, expected, atol=1e-9)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        p = linear_posterior(rng.normal(size=(4, 8)) * 5, rng.normal(size=(6, 6, 8))).data
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)


class TestPrototypePosterior:
    def test_exact_match_value(self):
        C, T = 4, 0.1
        bank = _bank(np.eye(C), C)
        p = prototype_posterior(bank, np.eye(C)[2][None], T).data[0]
        expected = math.exp(10) / (math.exp(10) + (C - 1) * math.exp(0))
        assert p[2] == pytest.approx(expected, rel=1e-12)

    def test_identical_prototypes_uniform(self):
        bank = _bank(np.tile([[1.0, 2.0, -1.0]], (6, 1)), 3)
        p = prototype_posterior(bank, np.random.default_rng(0).normal(size=(5, 3)), 0.1).data
        np.testing.assert_allclose(p, 1 / 3, atol=1e-15)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        C, K, D = 4, 3, 5
        bank = _bank(rng.normal(size=(C * K, D)), C)
        x = rng.normal(size=(3, 4, D))
        got = prototype_posterior(bank, x, 0.1).data
        ref = _brute_force_posterior(bank.prototypes, bank.class_of, x, C, 0.1)
        assert np.max(np.abs(got - ref)) <= 1e-12

    def test_scale_invariance_in_prototypes(self):
        rng = np.random.default_rng(7)
        protos = rng.normal(size=(8, 6))
        x = rng.normal(size=(10, 6))
        a = prototype_posterior(_bank(protos, 4), x).data
        protos[3] *= 7.3
        b = prototype_posterior(_bank(protos, 4), x).data
        assert np.max(np.abs(a - b)) <= 1e-9

    def test_zero_feature_scores_zero(self):
        bank = _bank(np.eye(3), 3)
        s = class_similarity(bank.prototypes, np.zeros((1, 3)), 3).data
        assert np.all(s == 0)

    def test_gradient_reaches_features_not_prototypes(self):
        rng = np.random.default_rng(8)
        bank = _bank(rng.normal(size=(6, 4)), 3)
        before = bank.prototypes.copy()
        x = nm.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        t = rng.integers(0, 3, size=5)
        nm.cross_entropy(prototype_posterior(bank, x, 0.1), t).sum().backward()
        assert x.grad is not None and np.any(x.grad != 0)
        assert np.array_equal(bank.prototypes, before)

    def test_feature_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        bank = _bank(rng.normal(size=(8, 4)), 4)
        x = rng.normal(size=(6, 4))
        t = rng.integers(0, 4, size=6)
        xt = nm.Tensor(x, requires_grad=True)
        nm.cross_entropy(prototype_posterior(bank, xt, 0.1), t).sum().backward()
        num = numeric_grad(lambda: nm.cross_entropy(prototype_posterior(bank, x, 0.1), t).sum().item(), x)
        assert max_rel_error(xt.grad, num) < 1e-3

    def test_distributions(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            bank = _bank(rng.normal(size=(12, 5)), 4)
            p = prototype_posterior(bank, rng.normal(size=(3, 3, 5)), 0.1).data
            assert np.all(p >= 0)
            np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)


class TestTeacherEma:
    def _pair(self):
        s = SegModel.create(3, 4, seed=0)
        t = SegModel.create(3, 4, seed=1).copy()
        return s, t

    def test_momentum_one_keeps_teacher(self):
        s, t = self._pair()
        before = t.checksum()
        ema_update_teacher(t, s, 1.0)
        assert t.checksum() == before

    def test_momentum_zero_copies_student(self):
        s, t = self._pair()
        ema_update_teacher(t, s, 0.0)
        assert t.checksum() == s.checksum()

    def test_arithmetic(self):
        s, t = self._pair()
        for p in t.params.values():
            p.data[:] = 1.0
        for p in s.params.values():
            p.data[:] = 0.0
        ema_update_teacher(t, s, 0.99)
        assert all(np.all(p.data == 0.99) for p in t.params.values())

    def test_geometric_convergence(self):
        s, t = self._pair()
        gap = [np.concatenate([(t.params[k].data - s.params[k].data).ravel() for k in sorted(t.params)])]
        for _ in range(50):
            ema_update_teacher(t, s, 0.9)
            gap.append(np.concatenate([(t.params[k].data - s.params[k].data).ravel() for k in sorted(t.params)]))
        for a, b in zip(gap, gap[1:]):
            assert np.linalg.norm(b) / np.linalg.norm(a) == pytest.approx(0.9, abs=1e-9)
