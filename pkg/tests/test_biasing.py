import numpy as np
import pytest

from ctxasr import autodiff as ad
from ctxasr.biasing import AttentionOutput, CBConfig, CBParams, cb_attend


def make_params(cfg, seed=0):
    store = ad.Parameters()
    return store, CBParams(store, cfg, np.random.default_rng(seed), "cb")


class TestCbAttend:
    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError):
            CBConfig(width=6, n_heads=4)

    def test_no_bias_only_context(self):
        cfg = CBConfig(width=8, n_heads=1, use_output_proj=False)
        _, params = make_params(cfg)
        rng = np.random.default_rng(1)
        h = ad.Tensor(rng.standard_normal((5, 8)))
        ctx = ad.Tensor(rng.standard_normal((1, 8)))
        out = cb_attend(h, ctx, params)
        np.testing.assert_allclose(out.scores[0].data, np.ones((5, 1)), atol=0)
        projected = ctx.data @ params.w_v.data
        np.testing.assert_allclose(out.bias.data, np.repeat(projected, 5, axis=0), atol=1e-12)

    def test_identical_rows_share_weight(self):
        cfg = CBConfig(width=8, n_heads=2, use_output_proj=True)
        _, params = make_params(cfg, seed=2)
        rng = np.random.default_rng(3)
        ctx = rng.standard_normal((3, 8))
        ctx[2] = ctx[1]
        out = cb_attend(ad.Tensor(rng.standard_normal((4, 8))), ad.Tensor(ctx), params)
        for a in out.scores:
            np.testing.assert_allclose(a.data[:, 1], a.data[:, 2], atol=1e-12)

    def test_rows_sum_to_one(self):
        cfg = CBConfig(width=12, n_heads=4)
        _, params = make_params(cfg, seed=4)
        rng = np.random.default_rng(5)
        out = cb_attend(
            ad.Tensor(rng.standard_normal((7, 12))),
            ad.Tensor(rng.standard_normal((6, 12))),
            params,
        )
        for a in out.scores:
            np.testing.assert_allclose(a.data.sum(axis=-1), np.ones(7), atol=1e-9)

    def test_manual_single_head_oracle(self):
        cfg = CBConfig(width=2, n_heads=1, use_output_proj=False)
        store, params = make_params(cfg)
        wq = np.array([[1.0, 0.5], [-0.25, 0.75]])
        wk = np.array([[0.3, -0.6], [0.9, 0.1]])
        wv = np.array([[-0.2, 0.4], [0.7, -0.5]])
        store.load_values({"cb.Wq": wq, "cb.Wk": wk, "cb.Wv": wv})
        h = np.array([[0.6, -1.1]])
        ctx = np.array([[0.2, 0.3], [-0.7, 1.4]])
        out = cb_attend(ad.Tensor(h), ad.Tensor(ctx), params)

        logits = (h @ wq) @ (ctx @ wk).T / np.sqrt(2.0)
        weights = np.exp(logits - logits.max())
        weights = weights / weights.sum()
        expected_bias = weights @ (ctx @ wv)
        np.testing.assert_allclose(out.scores[0].data, weights, atol=1e-12)
        np.testing.assert_allclose(out.bias.data, expected_bias, atol=1e-12)
        np.testing.assert_allclose(out.fused.data, h + expected_bias, atol=1e-12)

    def test_zero_value_projection_is_exact_identity(self):
        cfg = CBConfig(width=8, n_heads=4, use_output_proj=True)
        store, params = make_params(cfg, seed=6)
        values = store.values_dict()
        values["cb.Wv"] = np.zeros((8, 8))
        store.load_values(values)
        rng = np.random.default_rng(7)
        h = ad.Tensor(rng.standard_normal((5, 8)))
        out = cb_attend(h, ad.Tensor(rng.standard_normal((3, 8))), params)
        np.testing.assert_array_equal(out.fused.data, h.data)

    def test_permuting_context_rows(self):
        cfg = CBConfig(width=8, n_heads=2)
        _, params = make_params(cfg, seed=8)
        rng = np.random.default_rng(9)
        h = ad.Tensor(rng.standard_normal((4, 8)))
        ctx = rng.standard_normal((5, 8))
        perm = np.array([0, 3, 1, 4, 2])  # keeps <no_bias> at index 0
        out1 = cb_attend(h, ad.Tensor(ctx), params)
        out2 = cb_attend(h, ad.Tensor(ctx[perm]), params)
        for a1, a2 in zip(out1.scores, out2.scores):
            np.testing.assert_allclose(a1.data[:, perm], a2.data, atol=1e-12)
        np.testing.assert_allclose(out1.fused.data, out2.fused.data, atol=1e-12)

    def test_width_mismatch_rejected(self):
        cfg = CBConfig(width=8, n_heads=2)
        _, params = make_params(cfg)
        with pytest.raises(ad.ShapeError):
            cb_attend(ad.Tensor(np.zeros((3, 4))), ad.Tensor(np.zeros((2, 8))), params)
        with pytest.raises(ad.ShapeError):
            cb_attend(ad.Tensor(np.zeros((3, 8))), ad.Tensor(np.zeros((2, 4))), params)

    def test_fresh_module_is_identity(self):
        cfg = CBConfig(width=8, n_heads=4, use_output_proj=True)
        _, params = make_params(cfg, seed=12)
        rng = np.random.default_rng(13)
        h = ad.Tensor(rng.standard_normal((5, 8)))
        out = cb_attend(h, ad.Tensor(rng.standard_normal((3, 8))), params)
        np.testing.assert_array_equal(out.fused.data, h.data)

    def test_unequal_context_width(self):
        cfg = CBConfig(width=6, n_heads=2, ctx_width=10)
        store, params = make_params(cfg, seed=14)
        rng = np.random.default_rng(15)
        values = store.values_dict()
        values["cb.Wv"] = rng.standard_normal((10, 6)) * 0.5
        store.load_values(values)
        h0 = rng.standard_normal((4, 6))
        ctx0 = rng.standard_normal((3, 10))
        out = cb_attend(ad.Tensor(h0), ad.Tensor(ctx0), params)
        assert out.fused.shape == (4, 6) and out.bias.shape == (4, 6)
        for a in out.scores:
            assert a.shape == (4, 3)
            np.testing.assert_allclose(a.data.sum(axis=-1), np.ones(4), atol=1e-9)
        weights = rng.standard_normal((4, 6))

        def loss(x):
            fused = cb_attend(x, ad.Tensor(ctx0), params).fused
            return ad.tsum(ad.mul(fused, ad.Tensor(weights)))

        assert ad.grad_check(loss, h0) < 1e-4
        for name in store.names():
            store.zero_grad()
            err = ad.grad_check_param(
                lambda: ad.tsum(
                    ad.mul(cb_attend(ad.Tensor(h0), ad.Tensor(ctx0), params).fused,
                           ad.Tensor(weights))
                ),
                store[name],
            )
            assert err < 1e-4, f"{name}: {err}"

    def test_gradients(self):
        cfg = CBConfig(width=4, n_heads=2, use_output_proj=True)
        store, params = make_params(cfg, seed=10)
        rng = np.random.default_rng(11)
        # move off the zero-value start so every projection sees gradient
        values = store.values_dict()
        values["cb.Wv"] = rng.standard_normal(values["cb.Wv"].shape) * 0.5
        store.load_values(values)
        h0 = rng.standard_normal((3, 4))
        ctx0 = rng.standard_normal((2, 4))
        weights = rng.standard_normal((3, 4))

        def loss_from(out: AttentionOutput):
            return ad.tsum(ad.mul(out.fused, ad.Tensor(weights)))

        assert (
            ad.grad_check(lambda x: loss_from(cb_attend(x, ad.Tensor(ctx0), params)), h0)
            < 1e-4
        )
        assert (
            ad.grad_check(lambda x: loss_from(cb_attend(ad.Tensor(h0), x, params)), ctx0)
            < 1e-4
        )
        for name in ("w_q", "w_k", "w_v", "w_o"):
            original = getattr(params, name)

            def f(x, name=name):
                setattr(params, name, x)
                return loss_from(cb_attend(ad.Tensor(h0), ad.Tensor(ctx0), params))

            try:
                assert ad.grad_check(f, original.data.copy()) < 1e-4
            finally:
                setattr(params, name, original)
