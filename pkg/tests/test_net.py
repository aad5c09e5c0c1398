import numpy as np
import pytest

from conftest import fd_input_grads, fd_param_grads, max_rel_err, sample_gradcheck_instance
from poseloop.errors import ConfigError, FormatError, ShapeError
from poseloop.net import (
    AdamState,
    ArchConfig,
    ConvLayer,
    ConvNetParams,
    adam_step,
    backward,
    forward,
    forward_batch,
    init_adam,
    init_params,
    load_checkpoint,
    save_checkpoint,
)


def naive_conv3(x, kernel, bias):
    """Nested-loop direct convolution oracle (same padding)."""
    c, h, w = x.shape
    o = kernel.shape[0]
    out = np.zeros((o, h, w), dtype=np.float64)
    for oo in range(o):
        for y in range(h):
            for xx in range(w):
                acc = float(bias[oo])
                for cc in range(c):
                    for ky in range(3):
                        for kx in range(3):
                            yy, xs = y + ky - 1, xx + kx - 1
                            if 0 <= yy < h and 0 <= xs < w:
                                acc += kernel[oo, cc, ky, kx] * x[cc, yy, xs]
                out[oo, y, xx] = acc
    return out


class TestInit:
    def test_deterministic(self):
        arch = ArchConfig(input_channels=11)
        a = init_params(arch, 5)
        b = init_params(arch, 5)
        for la, lb in zip(a.layers, b.layers):
            np.testing.assert_array_equal(la.kernel, lb.kernel)

    def test_default_layer_shapes(self):
        p = init_params(ArchConfig(input_channels=11), 0)
        shapes = [l.kernel.shape for l in p.layers]
        assert shapes == [(32, 11, 3, 3), (32, 32, 3, 3), (16, 32, 3, 3), (1, 16, 3, 3)]
        assert [l.activation for l in p.layers] == ["relu", "relu", "relu", "linear"]

    def test_he_variance(self):
        p = init_params(ArchConfig(input_channels=8, hidden_channels=(64, 64)), 3,
                        dtype=np.float64)
        k = p.layers[1].kernel  # 64 x 64 x 3 x 3 = 36864 draws
        fan_in = 64 * 9
        assert k.size > 10000
        assert np.var(k) == pytest.approx(2.0 / fan_in, rel=0.2)

    def test_channel_mismatch_rejected(self):
        kernel_a = np.zeros((4, 3, 3, 3))
        kernel_b = np.zeros((2, 5, 3, 3))  # expects 5 inputs, gets 4
        with pytest.raises(ConfigError):
            ConvNetParams([
                ConvLayer(kernel_a, np.zeros(4), "relu"),
                ConvLayer(kernel_b, np.zeros(2), "linear"),
            ])


class TestForward:
    def test_zero_weights_bias_only(self):
        kernel = np.zeros((1, 3, 3, 3))
        p = ConvNetParams([ConvLayer(kernel, np.array([1.25]), "linear")])
        out = forward(p, np.zeros((3, 8, 8)))
        np.testing.assert_allclose(out, 1.25)

    def test_identity_center_tap(self):
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        p = ConvNetParams([ConvLayer(kernel, np.zeros(1), "linear")])
        x = np.random.default_rng(0).standard_normal((1, 8, 8))
        np.testing.assert_allclose(forward(p, x), x[0], atol=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(11)
        kernel = rng.standard_normal((4, 3, 3, 3))
        bias = rng.standard_normal(4)
        x = rng.standard_normal((3, 10, 12))
        p = ConvNetParams([ConvLayer(kernel, bias, "linear")])
        out, _ = forward_batch(p, x[:, None])
        ref = naive_conv3(x, kernel, bias)
        assert np.abs(out[:, 0] - ref).max() < 1e-5

    def test_shape_preserved_and_deterministic(self):
        p = init_params(ArchConfig(input_channels=5), 1)
        x = np.random.default_rng(2).standard_normal((5, 12, 20)).astype(np.float32)
        a = forward(p, x)
        b = forward(p, x)
        assert a.shape == (12, 20)
        np.testing.assert_array_equal(a, b)

    def test_channel_mismatch(self):
        p = init_params(ArchConfig(input_channels=5), 1)
        with pytest.raises(ShapeError):
            forward(p, np.zeros((4, 8, 8)))


class TestBackward:
    def test_zero_grad_output(self):
        p, x, _ = sample_gradcheck_instance(0)
        grads, dx = backward(p, x, np.zeros((8, 8)))
        for gk, gb in grads:
            assert not gk.any()
            assert not gb.any()
        assert not dx.any()

    def test_param_grads_match_fd(self):
        p, x, go = sample_gradcheck_instance(1)
        grads, _ = backward(p, x, go)
        fd = fd_param_grads(p, x, go, h=1e-3)
        for (ak, ab), (nk, nb) in zip(grads, fd):
            assert max_rel_err(ak, nk) < 1e-4
            assert max_rel_err(ab, nb) < 1e-4

    def test_input_grads_match_fd(self):
        p, x, go = sample_gradcheck_instance(2)
        _, dx = backward(p, x, go)
        fd = fd_input_grads(p, x, go, h=1e-3)
        assert max_rel_err(dx, fd) < 1e-4

    def test_bad_grad_shape(self):
        p, x, _ = sample_gradcheck_instance(3)
        with pytest.raises(ShapeError):
            backward(p, x, np.zeros((2, 8, 8, 1)))


class TestAdam:
    def test_zero_grads_only_step_changes(self):
        p = init_params(ArchConfig(input_channels=3, hidden_channels=(4,)), 0)
        s = init_adam(p)
        before = [l.kernel.copy() for l in p.layers]
        adam_step(p, s, [(np.zeros_like(l.kernel), np.zeros_like(l.bias)) for l in p.layers])
        assert s.step == 1
        for l, b in zip(p.layers, before):
            np.testing.assert_array_equal(l.kernel, b)

    def test_first_step_closed_form(self):
        kernel = np.zeros((1, 1, 3, 3))
        p = ConvNetParams([ConvLayer(kernel, np.zeros(1), "linear")])
        s = init_adam(p, lr=0.001)
        gk = np.zeros_like(kernel)
        gk[0, 0, 1, 1] = 1.0
        adam_step(p, s, [(gk, np.zeros(1))])
        expected = -0.001 * (1.0 / (np.sqrt(1.0) + 1e-8))
        assert p.layers[0].kernel[0, 0, 1, 1] == pytest.approx(expected, rel=1e-9)

    def test_quadratic_loss_decreases(self):
        # single effective parameter w, loss (w - 3)^2 via its gradient
        kernel = np.zeros((1, 1, 3, 3))
        p = ConvNetParams([ConvLayer(kernel, np.zeros(1), "linear")])
        s = init_adam(p, lr=0.05)
        loss0 = (kernel[0, 0, 1, 1] - 3.0) ** 2
        for _ in range(100):
            gk = np.zeros_like(kernel)
            gk[0, 0, 1, 1] = 2 * (kernel[0, 0, 1, 1] - 3.0)
            adam_step(p, s, [(gk, np.zeros(1))])
        assert (kernel[0, 0, 1, 1] - 3.0) ** 2 < loss0

    def test_shape_mismatch(self):
        p = init_params(ArchConfig(input_channels=3, hidden_channels=(4,)), 0)
        s = init_adam(p)
        with pytest.raises(ShapeError):
            adam_step(p, s, [(np.zeros((1, 1)), np.zeros(1))] * len(p.layers))


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, tmp_path):
        p = init_params(ArchConfig(input_channels=5), 9)
        s = init_adam(p, lr=0.002)
        # dirty the optimizer state so the roundtrip is nontrivial
        grads = [(np.full_like(l.kernel, 0.1), np.full_like(l.bias, -0.2)) for l in p.layers]
        adam_step(p, s, grads)
        path = tmp_path / "net.ckpt"
        save_checkpoint(p, s, path)
        p2, s2 = load_checkpoint(path)
        assert s2.step == s.step
        assert s2.lr == s.lr
        for la, lb in zip(p.layers, p2.layers):
            assert np.array_equal(la.kernel.view(np.uint8), lb.kernel.view(np.uint8))
            assert np.array_equal(la.bias.view(np.uint8), lb.bias.view(np.uint8))
            assert la.activation == lb.activation
        for (ma, _), (mb, _) in zip(s.m, s2.m):
            assert np.array_equal(ma, mb)

    def test_forward_identical_after_roundtrip(self, tmp_path):
        p = init_params(ArchConfig(input_channels=4), 13)
        x = np.random.default_rng(1).standard_normal((4, 16, 16)).astype(np.float32)
        save_checkpoint(p, None, tmp_path / "n.ckpt")
        p2, s2 = load_checkpoint(tmp_path / "n.ckpt")
        assert s2 is None
        np.testing.assert_array_equal(forward(p, x), forward(p2, x))

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "n.ckpt"
        p = init_params(ArchConfig(input_channels=4), 13)
        save_checkpoint(p, None, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "n.ckpt"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 32)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)
