"""Fusion identities, attention normalization, and gradient oracles."""

import numpy as np
import pytest

from avss import fusion
from avss import tensor as T
from avss.errors import ShapeMismatch
from avss.gradcheck import check_gradients, rand_tensor
from avss.tensor import Tensor


def make_gen(rng, cond_dim=6, channels=5):
    return fusion.FilmGenerator(cond_dim, channels, rng)


class TestFilm:
    def test_identity_affine(self, rng):
        gen = make_gen(rng)
        gen.set_identity()
        f_v = Tensor(rng.normal(size=(5, 7)))
        f_m = Tensor(rng.normal(size=(6,)))
        out = fusion.film_modulate(f_v, f_m, gen)
        assert np.array_equal(out.data, f_v.data)

    def test_pure_bias(self, rng):
        gen = make_gen(rng)
        gen.gamma_layer.weight.data[:] = 0.0
        gen.gamma_layer.bias.data[:] = 0.0
        gen.beta_layer.weight.data[:] = 0.0
        gen.beta_layer.bias.data[:] = np.arange(5.0)
        f_v = Tensor(rng.normal(size=(5, 7)))
        f_m = Tensor(rng.normal(size=(6,)))
        out = fusion.film_modulate(f_v, f_m, gen)
        expect = np.tile(np.arange(5.0)[:, None], (1, 7))
        np.testing.assert_array_equal(out.data, expect)

    def test_dim_mismatch(self, rng):
        gen = make_gen(rng)
        with pytest.raises(ShapeMismatch):
            fusion.film_modulate(Tensor(np.zeros((5, 7))), Tensor(np.zeros(9)), gen)

    def test_grads_match_finite_differences(self, rng):
        gen = make_gen(rng)
        f_v = rand_tensor(rng, (2, 5, 7))
        f_m = rand_tensor(rng, (2, 6))
        params = [p for _, p in gen.named_parameters()]

        def loss():
            out = fusion.film_modulate(f_v, f_m, gen)
            return (out * out).sum()

        check_gradients(loss, params + [f_v, f_m], tol=1e-4)


class TestMotionDimMatcher:
    def test_flatten_layout_row_major(self, rng):
        matcher = fusion.MotionDimMatcher(2, 3, 6, rng)
        raw = Tensor(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        flat = matcher.flatten(raw)
        np.testing.assert_array_equal(flat.data, [1, 2, 3, 4, 5, 6])

    def test_identity_projection_is_flattening(self, rng):
        matcher = fusion.MotionDimMatcher(2, 3, 6, rng)
        matcher.proj.weight.data[:] = np.eye(6)
        matcher.proj.bias.data[:] = 0.0
        raw = Tensor(rng.normal(size=(2, 3)))
        out = matcher(raw)
        np.testing.assert_allclose(out.data, raw.data.reshape(-1), atol=1e-12)

    def test_flatten_reshape_round_trip(self, rng):
        x = rng.normal(size=(4, 5))
        assert np.array_equal(x.reshape(-1).reshape(4, 5), x)

    def test_shape_guard(self, rng):
        matcher = fusion.MotionDimMatcher(2, 3, 6, rng)
        with pytest.raises(ShapeMismatch):
            matcher(Tensor(np.zeros((3, 3))))


class TestTcn:
    def test_zero_kernels_identity_via_residual(self, rng):
        stack = fusion.TcnStack(4, 2, rng)
        for block in stack.blocks:
            block.conv.weight.data[:] = 0.0
            block.conv.bias.data[:] = 0.0
            block.bn.eval()
        stack.eval()
        x = Tensor(rng.normal(size=(4, 9)))
        out = stack(x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_centered_identity_kernel_hand_trace(self, rng):
        # identity kernel + identity BN: block output is x + relu(x), i.e. 2x
        # on positive inputs
        stack = fusion.TcnStack(3, 1, rng)
        block = stack.blocks[0]
        block.conv.weight.data[:] = 0.0
        for c in range(3):
            block.conv.weight.data[c, c, 1] = 1.0
        block.conv.bias.data[:] = 0.0
        stack.eval()
        x = Tensor(rng.uniform(0.1, 1.0, size=(3, 8)))
        out = stack(x)
        np.testing.assert_allclose(out.data, 2.0 * x.data, rtol=1e-4)

    def test_shape_preserved(self, rng):
        stack = fusion.TcnStack(6, 3, rng)
        stack.eval()
        x = Tensor(rng.normal(size=(2, 6, 11)))
        assert stack(x).shape == (2, 6, 11)

    def test_channel_mismatch(self, rng):
        stack = fusion.TcnStack(6, 1, rng)
        with pytest.raises(ShapeMismatch):
            stack(Tensor(np.zeros((4, 11))))

    def test_grad_through_two_blocks(self, rng):
        stack = fusion.TcnStack(3, 2, rng)
        x = rand_tensor(rng, (2, 3, 6))
        params = [p for _, p in stack.named_parameters()]

        def loss():
            out = stack(x)
            return (out * out).sum()

        check_gradients(loss, params + [x], tol=1e-4)


def make_cma(rng, kv=16, tv=8, c=8, fp=9, tp=12, dim=12, heads=1):
    return fusion.CmaLayer(kv, tv, c, fp * tp, dim, rng, heads=heads)


class TestCma:
    def test_lambda_zero_is_exact_residual(self, rng):
        layer = make_cma(rng)
        f_vm = Tensor(rng.normal(size=(16, 8)))
        f_a = Tensor(rng.normal(size=(8, 9, 12)))
        out = layer(f_vm, f_a)
        assert np.array_equal(out.data, f_vm.data)

    def test_single_token_softmax_degenerates(self, rng):
        layer = fusion.CmaLayer(6, 1, 4, 10, 8, rng)
        layer.lambda_gate.data = np.asarray(0.7)
        f_vm = Tensor(rng.normal(size=(6, 1)))
        f_a = Tensor(rng.normal(size=(4, 2, 5)))
        weights = layer.attention_weights(f_vm, f_a)
        np.testing.assert_allclose(weights.data, 1.0, atol=1e-12)
        out = layer(f_vm, f_a)
        direct = layer._attend(Tensor(f_vm.data[None]), Tensor(f_a.data[None]))[0]
        np.testing.assert_allclose(
            out.data, f_vm.data + 0.7 * direct.data[0], atol=1e-12
        )

    def test_attention_rows_sum_to_one(self, rng):
        layer = make_cma(rng)
        layer.lambda_gate.data = np.asarray(0.5)
        f_vm = Tensor(rng.normal(size=(16, 8)))
        f_a = Tensor(rng.normal(size=(8, 9, 12)))
        w = layer.attention_weights(f_vm, f_a).data
        assert np.all(w >= 0) and np.all(w <= 1)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)

    def test_shape_preserved(self, rng):
        layer = make_cma(rng)
        out = layer(Tensor(rng.normal(size=(2, 16, 8))),
                    Tensor(rng.normal(size=(2, 8, 9, 12))))
        assert out.shape == (2, 16, 8)

    def test_token_count_mismatch(self, rng):
        layer = make_cma(rng)
        with pytest.raises(ShapeMismatch):
            layer(Tensor(np.zeros((16, 8))), Tensor(np.zeros((8, 9, 11))))

    def test_audio_permutation_changes_output(self, rng):
        layer = make_cma(rng)
        layer.lambda_gate.data = np.asarray(0.9)
        f_vm = Tensor(rng.normal(size=(16, 8)))
        f_a = rng.normal(size=(8, 9, 12))
        out1 = layer(f_vm, Tensor(f_a)).data
        perm = rng.permutation(12)
        out2 = layer(f_vm, Tensor(f_a[:, :, perm])).data
        assert not np.allclose(out1, out2)
        # but with the gate closed the audio path is cut entirely
        layer.lambda_gate.data = np.asarray(0.0)
        np.testing.assert_array_equal(
            layer(f_vm, Tensor(f_a)).data, layer(f_vm, Tensor(f_a[:, :, perm])).data
        )

    def test_grads_match_finite_differences(self, rng):
        layer = fusion.CmaLayer(5, 4, 3, 6, 4, rng)
        layer.lambda_gate.data = np.asarray(0.3)
        f_vm = rand_tensor(rng, (2, 5, 4))
        f_a = rand_tensor(rng, (2, 3, 2, 3))
        params = [p for _, p in layer.named_parameters()]
        w = rng.normal(size=(2, 5, 4))

        def loss():
            out = layer(f_vm, f_a)
            return (out * Tensor(w)).sum()

        check_gradients(loss, params + [f_vm, f_a], tol=1e-4)

    def test_multihead_rows_still_normalized(self, rng):
        layer = make_cma(rng, dim=12, heads=3)
        f_vm = Tensor(rng.normal(size=(16, 8)))
        f_a = Tensor(rng.normal(size=(8, 9, 12)))
        w = layer.attention_weights(f_vm, f_a).data
        assert w.shape == (1, 3, 8, 8)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def make_fusion(rng, mode="cross_modal"):
    return fusion.CrossModalFusion(
        mode, visual_dim=6, visual_len=5, motion_channels=3, motion_steps=4,
        cond_dim=6, audio_ch=4, audio_freq=3, audio_len=7, attn_dim=6, rng=rng,
        tcn_depth=1,
    )


class TestFuse:
    def test_output_shape_contract(self, rng):
        fus = make_fusion(rng)
        fus.eval()
        out = fus(Tensor(rng.normal(size=(6, 5))), Tensor(rng.normal(size=(3, 4))),
                  Tensor(rng.normal(size=(4, 3, 7))))
        assert out.shape == (4 + 6, 3, 7)

    def test_addition_mode_keeps_audio_channels(self, rng):
        fus = make_fusion(rng, mode="addition")
        fus.eval()
        out = fus(Tensor(rng.normal(size=(6, 5))), Tensor(rng.normal(size=(3, 4))),
                  Tensor(rng.normal(size=(4, 3, 7))))
        assert out.shape == (4, 3, 7)

    def test_zero_visual_with_closed_gate_is_beta_deterministic(self, rng):
        # with zero lip input and zero conv kernels, the visual channels of the
        # fused map are decided by the FiLM bias path alone
        fus = make_fusion(rng)
        fus.eval()
        for block in fus.tcn.blocks:
            block.conv.weight.data[:] = 0.0
            block.conv.bias.data[:] = 0.0
        f_v = Tensor(np.zeros((6, 5)))
        f_m = Tensor(rng.normal(size=(3, 4)))
        f_a = Tensor(rng.normal(size=(4, 3, 7)))
        out = fus(f_v, f_m, f_a)
        beta = fus.film.beta_layer(fus.matcher(f_m))
        np.testing.assert_allclose(
            out.data[4:, 0, :], np.tile(beta.data[:, None], (1, 7)), atol=1e-12
        )

    def test_lip_only_ignores_motion(self, rng):
        fus = make_fusion(rng, mode="lip_only")
        fus.eval()
        out = fus(Tensor(rng.normal(size=(6, 5))), None,
                  Tensor(rng.normal(size=(4, 3, 7))))
        assert out.shape == (10, 3, 7)

    def test_end_to_end_grad(self, rng):
        fus = make_fusion(rng)
        fus.cma.lambda_gate.data = np.asarray(0.4)
        fus.eval()  # eval-mode BN keeps the check independent of batch stats
        f_v = rand_tensor(rng, (2, 6, 5))
        f_m = rand_tensor(rng, (2, 3, 4))
        f_a = rand_tensor(rng, (2, 4, 3, 7))
        params = [p for _, p in fus.named_parameters()]

        def loss():
            out = fus(f_v, f_m, f_a)
            return (out * out).sum()

        check_gradients(loss, params + [f_v, f_m, f_a], tol=1e-4)
