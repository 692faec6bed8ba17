import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from effqa import nn_core
from effqa.errors import (
    AllMasked,
    FormatError,
    IndexOutOfRange,
    NonFiniteGradient,
    ShapeMismatch,
)
from effqa.nn_core import AdamWConfig, AttentionParams, ParamGroup


def make_attention_params(rng, d):
    return AttentionParams(
        wq=ParamGroup("wq", rng.normal(size=(d, d)) * 0.5),
        wk=ParamGroup("wk", rng.normal(size=(d, d)) * 0.5),
        wv=ParamGroup("wv", rng.normal(size=(d, d)) * 0.5),
        wo=ParamGroup("wo", rng.normal(size=(d, d)) * 0.5),
        bq=ParamGroup("bq", rng.normal(size=(1, d)) * 0.1),
        bk=ParamGroup("bk", rng.normal(size=(1, d)) * 0.1),
        bv=ParamGroup("bv", rng.normal(size=(1, d)) * 0.1),
        bo=ParamGroup("bo", rng.normal(size=(1, d)) * 0.1),
    )


def probe_loss(forward):
    """Scalar loss <output, probe> used to drive finite-difference checks."""

    def make(probe):
        def loss_fn():
            y, back = forward()
            back(probe)
            return float((y * probe).sum())

        return loss_fn

    return make


class TestAffine:
    def test_identity(self):
        w = ParamGroup("w", np.eye(2))
        b = ParamGroup("b", np.zeros((1, 2)))
        y, _ = nn_core.affine(np.eye(2), w, b)
        np.testing.assert_array_equal(y, np.eye(2))

    def test_hand_sum(self):
        w = ParamGroup("w", np.array([[1.0], [1.0]]))
        b = ParamGroup("b", np.array([[3.0]]))
        y, _ = nn_core.affine(np.array([[1.0, 2.0]]), w, b)
        np.testing.assert_allclose(y, [[6.0]])

    def test_shape_mismatch(self):
        w = ParamGroup("w", np.eye(3))
        b = ParamGroup("b", np.zeros((1, 3)))
        with pytest.raises(ShapeMismatch):
            nn_core.affine(np.zeros((2, 2)), w, b)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        w = ParamGroup("w", rng.normal(size=(4, 3)))
        b = ParamGroup("b", rng.normal(size=(1, 3)))
        x = rng.normal(size=(3, 4))
        probe = rng.normal(size=(3, 3))
        loss_fn = probe_loss(lambda: nn_core.affine(x, w, b))(probe)
        assert nn_core.grad_check(loss_fn, [w, b], max_coords_per_group=15) < 1e-6


class TestLayerNorm:
    def test_constant_row(self):
        g = ParamGroup("g", np.ones((1, 3)))
        b = ParamGroup("b", np.zeros((1, 3)))
        y, _ = nn_core.layer_norm(np.array([[5.0, 5.0, 5.0]]), g, b)
        np.testing.assert_allclose(y, 0.0, atol=1e-12)

    def test_already_normalized(self):
        g = ParamGroup("g", np.ones((1, 2)))
        b = ParamGroup("b", np.zeros((1, 2)))
        y, _ = nn_core.layer_norm(np.array([[1.0, -1.0]]), g, b, eps=1e-12)
        np.testing.assert_allclose(y, [[1.0, -1.0]], atol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        g = ParamGroup("g", 1.0 + 0.1 * rng.normal(size=(1, 6)))
        b = ParamGroup("b", 0.1 * rng.normal(size=(1, 6)))
        x = rng.normal(size=(4, 6))
        probe = rng.normal(size=(4, 6))
        loss_fn = probe_loss(lambda: nn_core.layer_norm(x, g, b))(probe)
        assert nn_core.grad_check(loss_fn, [g, b], max_coords_per_group=12) < 1e-5


class TestGelu:
    def test_zero_fixed_point(self):
        y, _ = nn_core.gelu(np.zeros((1, 3)))
        np.testing.assert_array_equal(y, 0.0)

    def test_large_positive_identity(self):
        y, _ = nn_core.gelu(np.array([[10.0]]))
        assert y[0, 0] == pytest.approx(10.0, abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck_via_affine(self, seed):
        rng = np.random.default_rng(seed)
        w = ParamGroup("w", rng.normal(size=(3, 3)))
        b = ParamGroup("b", np.zeros((1, 3)))
        x = rng.normal(size=(2, 3))
        probe = rng.normal(size=(2, 3))

        def loss_fn():
            y1, back1 = nn_core.affine(x, w, b)
            y2, back2 = nn_core.gelu(y1)
            back1(back2(probe))
            return float((y2 * probe).sum())

        assert nn_core.grad_check(loss_fn, [w, b], max_coords_per_group=12) < 1e-5


class TestMultiHeadSelfAttention:
    def test_single_token_is_projected_value(self):
        rng = np.random.default_rng(0)
        d = 4
        p = make_attention_params(rng, d)
        x = rng.normal(size=(1, d))
        y, _ = nn_core.multi_head_self_attention(x, p, 2, [True])
        v = x @ p.wv.value + p.bv.value
        expected = v @ p.wo.value + p.bo.value
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_identical_tokens_half_weights(self):
        rng = np.random.default_rng(1)
        d = 4
        p = make_attention_params(rng, d)
        row = rng.normal(size=d)
        x = np.stack([row, row])
        _, _, attn = nn_core.multi_head_self_attention(
            x, p, 2, [True, True], return_attn=True
        )
        np.testing.assert_allclose(attn, 0.5, atol=1e-12)

    def test_all_masked_raises(self):
        rng = np.random.default_rng(2)
        p = make_attention_params(rng, 4)
        with pytest.raises(AllMasked):
            nn_core.multi_head_self_attention(
                np.zeros((2, 4)), p, 2, [False, False]
            )

    def test_masked_keys_get_no_weight(self):
        rng = np.random.default_rng(3)
        p = make_attention_params(rng, 4)
        x = rng.normal(size=(3, 4))
        _, _, attn = nn_core.multi_head_self_attention(
            x, p, 2, [True, True, False], return_attn=True
        )
        np.testing.assert_array_equal(attn[:, :, 2], 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        d, m = 8, 5
        p = make_attention_params(rng, d)
        x = rng.normal(size=(m, d))
        probe = rng.normal(size=(m, d))
        loss_fn = probe_loss(
            lambda: nn_core.multi_head_self_attention(x, p, 2, [True] * m)
        )(probe)
        assert nn_core.grad_check(loss_fn, p.groups(), max_coords_per_group=4) < 1e-4


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        for m in (1, 2, 7, 30):
            loss, _ = nn_core.softmax_cross_entropy(np.zeros(m), 0)
            assert loss == pytest.approx(math.log(m), abs=1e-12)

    def test_peaked_logits(self):
        # frozen: log(1 + exp(-20)) evaluated directly
        loss, _ = nn_core.softmax_cross_entropy(np.array([10.0, -10.0]), 0)
        assert loss == pytest.approx(2.061153620314381e-09, rel=1e-9)

    def test_grad_sums_to_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            z = rng.normal(size=9)
            _, grad = nn_core.softmax_cross_entropy(z, int(rng.integers(9)))
            assert abs(grad.sum()) < 1e-12

    def test_target_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            nn_core.softmax_cross_entropy(np.zeros(3), 3)

    def test_masked_logits_get_zero_mass(self):
        z = np.array([1.0, -np.inf, 0.0])
        loss, grad = nn_core.softmax_cross_entropy(z, 0)
        assert grad[1] == 0.0
        assert loss == pytest.approx(math.log(1 + math.exp(-1.0)))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=40))
    def test_softmax_sums_to_one(self, logits):
        assert abs(nn_core.softmax(np.array(logits)).sum() - 1.0) < 1e-12


class TestAdamW:
    def test_zero_grad_no_decay_unchanged(self):
        g = ParamGroup("g", np.array([[1.0, -2.0]]))
        nn_core.adamw_step([g], AdamWConfig(learning_rate=0.1, weight_decay=0.0))
        np.testing.assert_array_equal(g.value, [[1.0, -2.0]])

    def test_decoupled_decay(self):
        g = ParamGroup("g", np.array([[4.0, -8.0]]))
        nn_core.adamw_step([g], AdamWConfig(learning_rate=0.1, weight_decay=0.1))
        np.testing.assert_allclose(g.value, np.array([[4.0, -8.0]]) * (1 - 0.01), rtol=1e-15)

    def test_single_step_decreases_quadratic(self):
        w = ParamGroup("w", np.array([[1.0]]))
        w.grad[:] = 2.0 * w.value  # d/dw of w^2
        nn_core.adamw_step([w], AdamWConfig(learning_rate=0.05, weight_decay=0.0))
        assert w.value[0, 0] ** 2 < 1.0

    def test_non_finite_gradient(self):
        g = ParamGroup("g", np.ones((1, 2)))
        g.grad[0, 0] = np.nan
        with pytest.raises(NonFiniteGradient):
            nn_core.adamw_step([g], AdamWConfig())

    def test_grads_zeroed_after_step(self):
        g = ParamGroup("g", np.ones((2, 2)))
        g.grad[:] = 1.0
        nn_core.adamw_step([g], AdamWConfig())
        np.testing.assert_array_equal(g.grad, 0.0)

    def test_bit_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            g = ParamGroup("g", rng.normal(size=(3, 3)))
            for _ in range(10):
                g.grad[:] = rng.normal(size=(3, 3))
                nn_core.adamw_step([g], AdamWConfig(learning_rate=1e-3))
            return g.value.tobytes()

        assert run() == run()


class TestLinearLr:
    def test_no_warmup_decays_to_zero(self):
        lrs = [nn_core.linear_lr(1.0, t, 10) for t in range(10)]
        assert lrs[0] == 1.0
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert nn_core.linear_lr(1.0, 10, 10) == 0.0

    def test_warmup_ramps(self):
        lrs = [nn_core.linear_lr(1.0, t, 10, warmup_frac=0.5) for t in range(5)]
        np.testing.assert_allclose(lrs, [0.2, 0.4, 0.6, 0.8, 1.0])


class TestGradCheck:
    def test_affine_model_tight(self):
        rng = np.random.default_rng(9)
        w = ParamGroup("w", rng.normal(size=(5, 2)))
        b = ParamGroup("b", rng.normal(size=(1, 2)))
        x = rng.normal(size=(4, 5))
        t = rng.normal(size=(4, 2))

        def loss_fn():
            y, back = nn_core.affine(x, w, b)
            back(y - t)
            return float(0.5 * ((y - t) ** 2).sum())

        assert nn_core.grad_check(loss_fn, [w, b], max_coords_per_group=12) < 1e-7

    def test_constant_model_both_zero(self):
        w = ParamGroup("w", np.ones((2, 2)))

        def loss_fn():
            return 3.25  # independent of w; grads stay zero

        assert nn_core.grad_check(loss_fn, [w]) == 0.0


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        groups = [
            ParamGroup("enc.tok_emb", rng.normal(size=(7, 4))),
            ParamGroup("head.w", rng.normal(size=(4, 1))),
        ]
        p1 = tmp_path / "a.eqnn"
        p2 = tmp_path / "b.eqnn"
        nn_core.save_checkpoint(p1, groups)
        loaded = nn_core.load_checkpoint(p1)
        assert [g.name for g in loaded] == ["enc.tok_emb", "head.w"]
        nn_core.save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        for orig, back in zip(groups, loaded):
            np.testing.assert_array_equal(
                orig.value.astype(np.float32), back.value.astype(np.float32)
            )

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.eqnn"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            nn_core.load_checkpoint(p)

    def test_truncated(self, tmp_path):
        g = ParamGroup("w", np.ones((4, 4)))
        p = tmp_path / "t.eqnn"
        nn_core.save_checkpoint(p, [g])
        blob = p.read_bytes()
        p.write_bytes(blob[:-7])
        with pytest.raises(FormatError):
            nn_core.load_checkpoint(p)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_adamw_moment_shapes_preserved(seed):
    rng = np.random.default_rng(seed)
    g = ParamGroup("g", rng.normal(size=(2, 3)))
    g.grad[:] = rng.normal(size=(2, 3))
    nn_core.adamw_step([g], AdamWConfig())
    assert g.adam_m.shape == g.value.shape == g.adam_v.shape == g.grad.shape
    assert g.step == 1
