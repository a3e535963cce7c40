"""Network forward/backward, loss, optimizer, checkpoints.

Oracles are naive from-scratch reimplementations (explicit loops / einsum),
kept independent of the vectorized production path.
"""

import math

import numpy as np
import pytest

from soilref.core import IGNORE, ProbMap
from soilref.tinynet import (
    Architecture,
    NetParams,
    ShapeError,
    StaleCacheError,
    backward,
    conv2d_backward,
    conv2d_forward,
    decode_checkpoint,
    encode_checkpoint,
    forward,
    gradient_check,
    init_params,
    load_checkpoint,
    log_softmax,
    save_checkpoint,
    sgd_step,
    softmax_ce,
    softmax_probs,
    upsample2x,
    upsample2x_backward,
)

DUAL = Architecture(kind="dual")
SINGLE = Architecture(kind="single")


def rand_inputs(rng, n=1, h=8, w=8, dual=True):
    img = rng.random((n, 3, h, w))
    stack = rng.random((n, 36, h, w)) if dual else None
    targets = rng.integers(0, 4, size=(n, h, w))
    return img, stack, targets


def naive_conv(x, w, b, stride):
    """Direct loop convolution with 'same' zero padding (pad split low/high)."""
    n, cin, h, wid = x.shape
    cout, _, k, _ = w.shape
    oh = -(-h // stride)
    ow = -(-wid // stride)
    pad_h = max((oh - 1) * stride + k - h, 0)
    pad_w = max((ow - 1) * stride + k - wid, 0)
    lo_h, lo_w = pad_h // 2, pad_w // 2
    xp = np.zeros((n, cin, h + pad_h, wid + pad_w))
    xp[:, :, lo_h : lo_h + h, lo_w : lo_w + wid] = x
    out = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for dy in range(k):
                            for dx in range(k):
                                acc += (
                                    w[co, ci, dy, dx]
                                    * xp[ni, ci, i * stride + dy, j * stride + dx]
                                )
                    out[ni, co, i, j] = acc + b[co]
    return out


class TestConv:
    @pytest.mark.parametrize("stride,h,w", [(1, 5, 7), (1, 8, 8), (2, 8, 8), (2, 6, 10)])
    def test_matches_naive_loop(self, stride, h, w):
        rng = np.random.default_rng(stride * 100 + h)
        x = rng.standard_normal((2, 3, h, w))
        wgt = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        y, _ = conv2d_forward(x, wgt, b, stride)
        assert np.allclose(y, naive_conv(x, wgt, b, stride), atol=1e-12)

    def test_1x1_conv_is_channel_matmul(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 8, 4, 4))
        wgt = rng.standard_normal((4, 8, 1, 1))
        b = rng.standard_normal(4)
        y, _ = conv2d_forward(x, wgt, b, 1)
        oracle = np.einsum("oc,nchw->nohw", wgt[:, :, 0, 0], x) + b[None, :, None, None]
        assert np.allclose(y, oracle, atol=1e-12)

    def test_two_layer_composition_hand_rolled(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 4, 4))
        w1 = rng.standard_normal((3, 2, 1, 1))
        b1 = rng.standard_normal(3)
        w2 = rng.standard_normal((2, 3, 1, 1))
        b2 = rng.standard_normal(2)
        h1, _ = conv2d_forward(x, w1, b1, 1)
        h1 = np.maximum(h1, 0.0)
        y, _ = conv2d_forward(h1, w2, b2, 1)
        m1 = np.maximum(np.einsum("oc,nchw->nohw", w1[:, :, 0, 0], x) + b1[None, :, None, None], 0)
        oracle = np.einsum("oc,nchw->nohw", w2[:, :, 0, 0], m1) + b2[None, :, None, None]
        assert np.allclose(y, oracle, atol=1e-12)

    def test_backward_finite_difference(self):
        rng = np.random.default_rng(2)
        for stride in (1, 2):
            x = rng.standard_normal((1, 2, 6, 6))
            wgt = rng.standard_normal((3, 2, 3, 3))
            b = rng.standard_normal(3)
            y, cols = conv2d_forward(x, wgt, b, stride)
            dy = rng.standard_normal(y.shape)
            dx, dw, db = conv2d_backward(x.shape, cols, wgt, stride, dy)
            eps = 1e-6
            for arr, grad in ((x, dx), (wgt, dw), (b, db)):
                flat = arr.reshape(-1)
                gflat = grad.reshape(-1)
                for i in rng.choice(flat.size, size=min(12, flat.size), replace=False):
                    orig = flat[i]
                    flat[i] = orig + eps
                    lp = float((conv2d_forward(x, wgt, b, stride)[0] * dy).sum())
                    flat[i] = orig - eps
                    lm = float((conv2d_forward(x, wgt, b, stride)[0] * dy).sum())
                    flat[i] = orig
                    num = (lp - lm) / (2 * eps)
                    assert abs(num - gflat[i]) < 1e-5 * max(1.0, abs(num))


class TestUpsample:
    def test_repeats_pixels(self):
        x = np.arange(4.0).reshape(1, 1, 2, 2)
        y = upsample2x(x)
        assert y.shape == (1, 1, 4, 4)
        assert (y[0, 0, :2, :2] == x[0, 0, 0, 0]).all()
        assert (y[0, 0, 2:, 2:] == x[0, 0, 1, 1]).all()

    def test_backward_sums_blocks(self):
        rng = np.random.default_rng(3)
        dy = rng.standard_normal((2, 3, 4, 4))
        dx = upsample2x_backward(dy)
        assert dx.shape == (2, 3, 2, 2)
        assert np.allclose(dx[0, 0, 0, 0], dy[0, 0, :2, :2].sum())

    def test_adjointness(self):
        # <upsample(x), y> == <x, upsample_backward(y)>
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 2, 3, 3))
        y = rng.standard_normal((1, 2, 6, 6))
        assert np.isclose((upsample2x(x) * y).sum(), (x * upsample2x_backward(y)).sum())


class TestForward:
    def test_zero_head_gives_zero_logits(self):
        params = init_params(DUAL, seed=1)
        rng = np.random.default_rng(5)
        img, stack, _ = rand_inputs(rng)
        logits, _ = forward(params, img, stack)
        assert (logits == 0).all()

    @pytest.mark.parametrize("h,w", [(8, 8), (8, 16), (12, 20), (32, 32)])
    def test_output_spatial_shape_matches_input(self, h, w):
        params = init_params(DUAL, seed=2, zero_head=False)
        rng = np.random.default_rng(6)
        img, stack, _ = rand_inputs(rng, h=h, w=w)
        logits, _ = forward(params, img, stack)
        assert logits.shape == (1, 4, h, w)

    def test_full_net_matches_naive_composition(self):
        params = init_params(DUAL, seed=3, zero_head=False)
        rng = np.random.default_rng(7)
        img, stack, _ = rand_inputs(rng, h=8, w=8)
        logits, _ = forward(params, img, stack)

        t = params.tensors
        relu = lambda a: np.maximum(a, 0.0)
        a1 = relu(naive_conv(img, t["img_enc1_w"], t["img_enc1_b"], 1))
        a2 = relu(naive_conv(a1, t["img_enc2_w"], t["img_enc2_b"], 2))
        b1 = relu(naive_conv(stack, t["pl_enc1_w"], t["pl_enc1_b"], 1))
        b2 = relu(naive_conv(b1, t["pl_enc2_w"], t["pl_enc2_b"], 2))
        cat = np.concatenate([a2, b2], axis=1)
        d1 = relu(naive_conv(cat, t["dec1_w"], t["dec1_b"], 1))
        up = upsample2x(d1)
        d2 = relu(naive_conv(up, t["dec2_w"], t["dec2_b"], 1))
        oracle = naive_conv(d2, t["head_w"], t["head_b"], 1)
        assert np.allclose(logits, oracle, atol=1e-10)

    def test_single_variant_takes_no_stack(self):
        params = init_params(SINGLE, seed=4, zero_head=False)
        rng = np.random.default_rng(8)
        img, stack, _ = rand_inputs(rng)
        logits, _ = forward(params, img)
        assert logits.shape == (1, 4, 8, 8)
        with pytest.raises(ShapeError):
            forward(params, img, stack)

    def test_dual_variant_requires_stack(self):
        params = init_params(DUAL, seed=5)
        rng = np.random.default_rng(9)
        img, _, _ = rand_inputs(rng)
        with pytest.raises(ShapeError):
            forward(params, img)

    def test_dims_must_be_divisible_by_four(self):
        params = init_params(SINGLE, seed=6)
        with pytest.raises(ShapeError):
            forward(params, np.zeros((1, 3, 6, 8)))

    def test_forward_is_deterministic(self):
        params = init_params(DUAL, seed=7, zero_head=False)
        rng = np.random.default_rng(10)
        img, stack, _ = rand_inputs(rng)
        l1, _ = forward(params, img, stack)
        l2, _ = forward(params, img, stack)
        assert (l1 == l2).all()


class TestLoss:
    def test_zero_logits_any_target_is_ln4(self):
        rng = np.random.default_rng(11)
        targets = rng.integers(0, 4, size=(2, 8, 8))
        loss, _ = softmax_ce(np.zeros((2, 4, 8, 8)), targets)
        assert loss == pytest.approx(math.log(4.0), abs=1e-15)

    def test_saturated_correct_logit(self):
        targets = np.full((1, 4, 4), 2)
        logits = np.zeros((1, 4, 4, 4))
        logits[:, 2] = 1000.0
        loss, _ = softmax_ce(logits, targets)
        assert loss < 1e-6

    def test_matches_naive_formula(self):
        rng = np.random.default_rng(12)
        logits = rng.standard_normal((1, 4, 2, 2))
        targets = rng.integers(0, 4, size=(1, 2, 2))
        loss, _ = softmax_ce(logits, targets)
        acc = []
        for i in range(2):
            for j in range(2):
                x = logits[0, :, i, j]
                c = targets[0, i, j]
                acc.append(-math.log(math.exp(x[c]) / sum(math.exp(v) for v in x)))
        assert loss == pytest.approx(float(np.mean(acc)), abs=1e-10)

    def test_ignore_pixels_excluded(self):
        rng = np.random.default_rng(13)
        logits = rng.standard_normal((1, 4, 2, 2))
        targets = np.array([[[0, IGNORE], [IGNORE, IGNORE]]])
        loss, dlogits = softmax_ce(logits, targets)
        x = logits[0, :, 0, 0]
        expect = -math.log(math.exp(x[0]) / sum(math.exp(v) for v in x))
        assert loss == pytest.approx(expect, abs=1e-12)
        assert (dlogits[0, :, 0, 1] == 0).all()
        assert (dlogits[0, :, 1, :] == 0).all()

    def test_all_ignore_is_an_error(self):
        with pytest.raises(ValueError):
            softmax_ce(np.zeros((1, 4, 2, 2)), np.full((1, 2, 2), IGNORE))

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(14)
        logits = rng.standard_normal((1, 4, 3, 3))
        targets = rng.integers(0, 4, size=(1, 3, 3))
        _, dl = softmax_ce(logits, targets)
        eps = 1e-6
        for _ in range(20):
            n, c, i, j = 0, rng.integers(0, 4), rng.integers(0, 3), rng.integers(0, 3)
            pert = logits.copy()
            pert[n, c, i, j] += eps
            lp, _ = softmax_ce(pert, targets)
            pert[n, c, i, j] -= 2 * eps
            lm, _ = softmax_ce(pert, targets)
            assert abs((lp - lm) / (2 * eps) - dl[n, c, i, j]) < 1e-8

    def test_softmax_is_valid_probmap_at_extreme_logits(self):
        logits = np.array([[1e4, -1e4, 0.0, 5.0]]).reshape(1, 4, 1, 1)
        probs = softmax_probs(logits)
        hwc = np.transpose(probs[0], (1, 2, 0))
        pm = ProbMap(hwc)  # validates the sum-to-one invariant
        assert pm.data[0, 0, 0] == pytest.approx(1.0)
        big = np.full((1, 4, 4, 4), -1e4)
        big[:, 1] = 1e4
        ProbMap(np.transpose(softmax_probs(big)[0], (1, 2, 0)))

    def test_log_softmax_shift_invariance(self):
        rng = np.random.default_rng(15)
        logits = rng.standard_normal((1, 4, 2, 2))
        assert np.allclose(log_softmax(logits), log_softmax(logits + 100.0), atol=1e-12)


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        params = init_params(DUAL, seed=8, zero_head=False)
        rng = np.random.default_rng(16)
        img, stack, _ = rand_inputs(rng)
        logits, cache = forward(params, img, stack)
        grads = backward(params, cache, np.zeros_like(logits))
        assert all((g == 0).all() for g in grads.values())

    def test_duplicated_sample_doubles_summed_gradient(self):
        params = init_params(DUAL, seed=9, zero_head=False)
        rng = np.random.default_rng(17)
        img, stack, _ = rand_inputs(rng)
        logits, cache = forward(params, img, stack)
        dl = rng.standard_normal(logits.shape)
        g1 = backward(params, cache, dl)
        img2 = np.concatenate([img, img])
        stack2 = np.concatenate([stack, stack])
        logits2, cache2 = forward(params, img2, stack2)
        g2 = backward(params, cache2, np.concatenate([dl, dl]))
        for name in g1:
            assert np.allclose(g2[name], 2 * g1[name], atol=1e-10)

    def test_stale_cache_rejected(self):
        params = init_params(DUAL, seed=10, zero_head=False)
        rng = np.random.default_rng(18)
        img, stack, targets = rand_inputs(rng)
        logits, cache = forward(params, img, stack)
        _, dl = softmax_ce(logits, targets)
        grads = backward(params, cache, dl)
        new_params, _ = sgd_step(params, grads, lr=0.1)
        with pytest.raises(StaleCacheError):
            backward(new_params, cache, dl)

    def test_composed_network_spot_finite_difference(self):
        # full sweep runs in the acceptance suite; here a random subset
        params = init_params(DUAL, seed=11, zero_head=False)
        rng = np.random.default_rng(19)
        img, stack, targets = rand_inputs(rng, h=8, w=8)
        logits, cache = forward(params, img, stack)
        _, dl = softmax_ce(logits, targets)
        grads = backward(params, cache, dl)
        eps = 1e-5
        work = {k: v.copy() for k, v in params.tensors.items()}
        probe = NetParams(params.arch, work, params.seed)
        for name in ("img_enc1_w", "pl_enc1_w", "dec1_w", "head_w", "dec2_b"):
            flat = work[name].reshape(-1)
            gflat = grads[name].reshape(-1)
            for i in rng.choice(flat.size, size=8, replace=False):
                orig = flat[i]
                flat[i] = orig + eps
                lp, _ = softmax_ce(forward(probe, img, stack)[0], targets)
                flat[i] = orig - eps
                lm, _ = softmax_ce(forward(probe, img, stack)[0], targets)
                flat[i] = orig
                num = (lp - lm) / (2 * eps)
                assert abs(num - gflat[i]) < 1e-6 * max(1.0, abs(num))

    def test_gradient_check_helper_on_single_variant(self):
        # seed pinned away from relu-kink crossings, where central differences
        # are unreliable by construction rather than the gradients wrong
        params = init_params(SINGLE, seed=1, zero_head=False)
        rng = np.random.default_rng(20)
        img = rng.random((1, 3, 8, 8))
        targets = rng.integers(0, 4, size=(1, 8, 8))
        assert gradient_check(params, img, None, targets) < 1e-4


class TestSgd:
    def test_zero_lr_leaves_params_unchanged(self):
        params = init_params(DUAL, seed=13, zero_head=False)
        grads = {k: np.ones_like(v) for k, v in params.tensors.items()}
        new, _ = sgd_step(params, grads, lr=0.0)
        for name in params.tensors:
            assert (new.tensors[name] == params.tensors[name]).all()

    def test_plain_step_is_p_minus_lr_g(self):
        params = init_params(DUAL, seed=14, zero_head=False)
        rng = np.random.default_rng(21)
        grads = {k: rng.standard_normal(v.shape) for k, v in params.tensors.items()}
        new, _ = sgd_step(params, grads, lr=0.05, momentum=0.0)
        for name, p in params.tensors.items():
            assert np.array_equal(new.tensors[name], p - 0.05 * grads[name])

    def test_two_momentum_steps_match_hand_unroll(self):
        params = init_params(DUAL, seed=15, zero_head=False)
        rng = np.random.default_rng(22)
        g1 = {k: rng.standard_normal(v.shape) for k, v in params.tensors.items()}
        g2 = {k: rng.standard_normal(v.shape) for k, v in params.tensors.items()}
        lr, mom = 0.1, 0.9
        p1, st = sgd_step(params, g1, lr, mom)
        p2, _ = sgd_step(p1, g2, lr, mom, st)
        for name, p0 in params.tensors.items():
            v1 = g1[name]
            v2 = mom * v1 + g2[name]
            expect = p0 - lr * v1 - lr * v2
            assert np.allclose(p2.tensors[name], expect, atol=1e-12)

    def test_nonfinite_gradient_rejected(self):
        params = init_params(DUAL, seed=16)
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        grads["head_w"][0, 0, 0, 0] = np.nan
        with pytest.raises(FloatingPointError):
            sgd_step(params, grads, lr=0.1)

    def test_loss_non_increasing_over_50_small_steps(self):
        params = init_params(DUAL, seed=17)
        rng = np.random.default_rng(23)
        img, stack, targets = rand_inputs(rng, h=8, w=8)
        state = None
        prev = None
        for _ in range(50):
            logits, cache = forward(params, img, stack)
            loss, dl = softmax_ce(logits, targets)
            if prev is not None:
                assert loss <= prev + 1e-12
            prev = loss
            grads = backward(params, cache, dl)
            params, state = sgd_step(params, grads, lr=1e-3, state=state)


class TestCheckpoint:
    def test_round_trip_restores_everything(self):
        params = init_params(DUAL, seed=18, zero_head=False)
        back = decode_checkpoint(encode_checkpoint(params))
        assert back.arch == params.arch
        assert back.seed == params.seed
        for name, t in params.tensors.items():
            assert np.array_equal(back.tensors[name], t)

    def test_encoding_is_byte_stable(self):
        params = init_params(DUAL, seed=19, zero_head=False)
        raw1 = encode_checkpoint(params)
        raw2 = encode_checkpoint(decode_checkpoint(raw1))
        assert raw1 == raw2

    def test_file_round_trip(self, tmp_path):
        params = init_params(SINGLE, seed=20, zero_head=False)
        p = tmp_path / "net.ckpt"
        save_checkpoint(p, params)
        back = load_checkpoint(p)
        assert back.arch == params.arch
        for name, t in params.tensors.items():
            assert np.array_equal(back.tensors[name], t)

    def test_corrupt_magic_rejected(self):
        params = init_params(SINGLE, seed=21)
        raw = bytearray(encode_checkpoint(params))
        raw[0] ^= 0xFF
        with pytest.raises(ValueError):
            decode_checkpoint(bytes(raw))

    def test_same_seed_same_bytes(self):
        a = encode_checkpoint(init_params(DUAL, seed=22, zero_head=False))
        b = encode_checkpoint(init_params(DUAL, seed=22, zero_head=False))
        assert a == b

    def test_different_seed_different_weights(self):
        a = init_params(DUAL, seed=23, zero_head=False)
        b = init_params(DUAL, seed=24, zero_head=False)
        assert any(
            not np.array_equal(a.tensors[n], b.tensors[n]) for n in a.tensors
        )
