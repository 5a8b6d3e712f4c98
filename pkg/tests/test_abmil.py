import numpy as np
import pytest

from dtfdmil import abmil
from dtfdmil import diffcore as dc
from dtfdmil.abmil import (attention_scores, bag_embed, classify, forward_bag, init_params,
                           load_params, params_from_dict, params_to_dict, save_params)
from dtfdmil.diffcore import Tensor

F64 = np.float64


def params64(D=8, D_att=6, C=2, seed=0, **kw):
    return init_params(D, D_att, C, dc.make_rng(seed), dtype=F64, **kw)


class TestAttention:
    def test_singleton(self, rng):
        a = attention_scores(Tensor(rng.normal(size=(1, 8))), params64())
        np.testing.assert_array_equal(a.data, [[1.0]])

    def test_identical_instances_uniform(self, rng):
        h = rng.normal(size=(1, 8))
        a = attention_scores(Tensor(np.repeat(h, 3, axis=0)), params64())
        np.testing.assert_allclose(a.data, np.full((1, 3), 1 / 3), atol=1e-7)

    def test_permutation_equivariance(self, rng):
        H = rng.normal(size=(7, 8))
        p = params64()
        perm = rng.permutation(7)
        a = attention_scores(Tensor(H), p).data[0]
        b = attention_scores(Tensor(H[perm]), p).data[0]
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_matches_numpy_formula(self, rng):
        H = rng.normal(size=(5, 8))
        p = params64()
        V1, V2, w = p.V1.data, p.V2.data, p.w.data[0]
        z = np.array([w @ (np.tanh(V1 @ h) * (1 / (1 + np.exp(-V2 @ h)))) for h in H])
        expected = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        np.testing.assert_allclose(attention_scores(Tensor(H), p).data[0], expected, rtol=1e-12)

    def test_empty_bag(self):
        with pytest.raises(abmil.EmptyBagError):
            forward_bag(np.zeros((0, 8)), params64())

    def test_dim_mismatch(self, rng):
        with pytest.raises(dc.DimensionError):
            forward_bag(rng.normal(size=(3, 5)), params64())


class TestBagEmbed:
    def test_identical_instances(self, rng):
        h = rng.normal(size=(1, 4))
        a = rng.dirichlet(np.ones(5))
        F, _ = bag_embed(Tensor(np.repeat(h, 5, axis=0)), Tensor(a[None, :]))
        np.testing.assert_allclose(F.data, h, rtol=1e-12)

    def test_degenerate_weights(self, rng):
        H = rng.normal(size=(2, 4))
        F, h_hat = bag_embed(Tensor(H), Tensor(np.array([[1.0, 0.0]])))
        np.testing.assert_array_equal(F.data[0], H[0])
        np.testing.assert_array_equal(h_hat.data[1], np.zeros(4))

    @pytest.mark.parametrize("K", [1, 3, 40])
    def test_gap_identity(self, K, rng):
        H = rng.normal(size=(K, 6)).astype(np.float32)
        a = rng.dirichlet(np.ones(K)).astype(np.float32)
        F, h_hat = bag_embed(Tensor(H), Tensor(a[None, :]))
        np.testing.assert_allclose(h_hat.data.mean(axis=0), F.data[0], atol=1e-5)
        np.testing.assert_allclose(F.data[0], a @ H, atol=1e-5)
        np.testing.assert_allclose(h_hat.data, (a * K)[:, None] * H, rtol=1e-5)

    def test_length_mismatch(self, rng):
        with pytest.raises(dc.DimensionError):
            bag_embed(Tensor(rng.normal(size=(3, 4))), Tensor(np.array([[0.5, 0.5]])))

    def test_unnormalized_attention(self, rng):
        with pytest.raises(ValueError):
            bag_embed(Tensor(rng.normal(size=(2, 4))), Tensor(np.array([[0.5, 0.7]])))


class TestClassify:
    def test_zero_head(self):
        p = params64(D=4)
        p.Wc.data[:] = 0
        p.bc.data[:] = 0
        _, prob = classify(Tensor(np.ones((1, 4))), p)
        np.testing.assert_array_equal(prob.data, [[0.5, 0.5]])

    @pytest.mark.parametrize("c", [0, 1, 2])
    def test_identity_like_head(self, c):
        p = params64(D=3, C=3)
        p.Wc.data[:] = np.eye(3)
        p.bc.data[:] = 0
        F = np.zeros((1, 3))
        F[0, c] = 1.0
        _, prob = classify(Tensor(F), p)
        assert int(np.argmax(prob.data)) == c

    def test_probs_sum_to_one(self, rng):
        p = params64(D=8, C=4)
        for _ in range(20):
            _, prob = classify(Tensor(rng.normal(size=(1, 8)) * 5), p)
            assert abs(prob.data.sum() - 1) < 1e-9

    def test_no_bias(self, rng):
        p = params64(head_bias=False)
        F = rng.normal(size=(1, 8))
        s, _ = classify(Tensor(F), p)
        np.testing.assert_allclose(s.data, F @ p.Wc.data.T, rtol=1e-12)
        assert p.bc not in p.trainable()


class TestForward:
    @pytest.mark.parametrize("K", [1, 5, 50])
    @pytest.mark.parametrize("D", [8, 64])
    def test_invariants(self, K, D, rng):
        p = init_params(D, 16, 2, dc.make_rng(K + D))
        H = rng.normal(size=(K, D)).astype(np.float32)
        f = forward_bag(H, p)
        a = f.a.data[0].astype(F64)
        assert abs(a.sum() - 1) < 1e-6
        np.testing.assert_allclose(f.F.data[0], a @ H, atol=1e-5)
        np.testing.assert_allclose(f.h_hat.data.mean(axis=0), f.F.data[0], atol=1e-5)
        assert abs(f.p_bag.data.astype(F64).sum() - 1) < 1e-6
        assert f.K == K

    def test_permutation_invariance(self, rng):
        p = init_params(8, 16, 2, dc.make_rng(3))
        H = rng.normal(size=(20, 8)).astype(np.float32)
        perm = rng.permutation(20)
        f1, f2 = forward_bag(H, p), forward_bag(H[perm], p)
        np.testing.assert_allclose(f1.s.data, f2.s.data, atol=1e-5)
        np.testing.assert_allclose(f2.a.data[0], f1.a.data[0][perm], atol=1e-6)

    @pytest.mark.parametrize("y", [0, 1])
    @pytest.mark.parametrize("hidden", [0, 4])
    def test_param_gradcheck(self, y, hidden, rng):
        p = params64(D=8, D_att=5, head_hidden=hidden, seed=y + hidden)
        H = Tensor(rng.normal(size=(5, 8)))
        names = list(p.named())

        def loss(*tensors):
            q = abmil.AbmilParams(**{n: t for n, t in zip(names, tensors)}, head_bias=True)
            return dc.bce_loss(forward_bag(H, q).p_bag[0, 1], y)

        assert dc.grad_check(loss, list(p.named().values())) < 1e-5

    def test_grad_wrt_instances(self, rng):
        p = params64(D=8, D_att=5)
        err = dc.grad_check(lambda h: dc.bce_loss(forward_bag(h, p).p_bag[0, 1], 1),
                            Tensor(rng.normal(size=(5, 8))))
        assert err < 1e-5


class TestSerialization:
    def test_round_trip(self, tmp_path, rng):
        p = init_params(12, 7, 2, dc.make_rng(1))
        save_params(p, tmp_path / "p.json")
        q = load_params(tmp_path / "p.json")
        for name, t in p.named().items():
            np.testing.assert_allclose(q.named()[name].data, t.data, atol=1e-7)
        H = rng.normal(size=(4, 12)).astype(np.float32)
        np.testing.assert_allclose(forward_bag(H, p).s.data, forward_bag(H, q).s.data, atol=1e-6)

    def test_document_layout(self):
        p = init_params(3, 2, 2, dc.make_rng(1), head_bias=False)
        doc = params_to_dict(p)
        assert doc["format_version"] == 1
        assert doc["dims"] == {"D": 3, "D_att": 2, "C": 2, "head_hidden": 0}
        assert doc["tensors"]["V1"]["shape"] == [2, 3]
        assert doc["tensors"]["V1"]["values"] == p.V1.data.reshape(-1).tolist()
        assert doc["head_bias"] is False
        q = params_from_dict(doc)
        assert not q.head_bias and q.bc not in q.trainable()

    def test_bad_version(self):
        doc = params_to_dict(init_params(3, 2, 2, dc.make_rng(1)))
        doc["format_version"] = 99
        with pytest.raises(ValueError):
            params_from_dict(doc)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            init_params(3, 2, 1)
