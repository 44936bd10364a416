import numpy as np
import pytest
import replay

from dynunet import functional as F
from dynunet.calib import DCC, DCD, DCU
from dynunet.gradcheck import _randomize_norms, prepare_deformable
from dynunet.tensor import Tensor, no_grad


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def window_oracle(f, m):
    """Per 2x2 window: sum(m * f) / sum(m), computed pixel by pixel."""
    n, c, h, w = f.shape
    out = np.empty((n, c, h // 2, w // 2))
    for a in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    mw = m[a, ch, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                    fw = f[a, ch, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                    out[a, ch, i, j] = (mw * fw).sum() / mw.sum()
    return out


class TestDCC:
    @pytest.fixture
    def layer(self, f64, rng):
        layer = DCC(3, 5, rng)
        _randomize_norms(layer, rng)
        return layer

    def test_shape(self, f64, rng):
        out = DCC(32, 64, rng)(t64(rng.standard_normal((1, 32, 16, 16))))
        assert out.shape == (1, 64, 16, 16)

    @pytest.mark.parametrize("h, w", [(8, 8), (4, 12)])
    def test_matches_replay(self, layer, rng, h, w):
        x = rng.standard_normal((2, 3, h, w))
        with no_grad():
            out = layer(t64(x)).data
        np.testing.assert_allclose(out, replay.dcc(layer, x), rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("h, w", [(6, 10), (3, 5), (1, 1)])
    def test_extents_not_divisible_by_four(self, layer, rng, h, w):
        assert layer(t64(rng.standard_normal((1, 3, h, w)))).shape == (1, 5, h, w)

    def test_gate_ranges(self, layer, rng):
        trace = {}
        layer(t64(rng.standard_normal((2, 3, 8, 8)) * 3), trace=trace)
        for key in ("t_s", "channel_scale"):
            assert np.all((trace[key].data > 0) & (trace[key].data < 1))

    def test_zero_calibration_weights(self, f64, rng):
        """With pixel, region and channel paths zeroed both gates equal one half."""
        layer = DCC(2, 3, rng)
        for conv in (layer.conv_pixel, layer.conv_region, layer.channel_linear):
            conv.weight.data[:] = 0
            conv.bias.data[:] = 0
        x = t64(rng.standard_normal((1, 2, 8, 8)))
        local = F.leaky_relu(layer.norm_local(layer.conv_local(x)))
        f1 = F.scale(local, 0.5)
        ref = 0.5 * F.leaky_relu(layer.norm_second(layer.conv_second(f1))).data
        np.testing.assert_allclose(layer(x).data, ref, rtol=1e-12)

    def test_zero_input_zero_output(self, f64, rng):
        layer = DCC(2, 3, rng)
        assert np.all(layer(t64(np.zeros((1, 2, 8, 8)))).data == 0)

    def test_input_channels_checked(self, layer):
        with pytest.raises(ValueError, match="DCC expects"):
            layer(t64(np.zeros((1, 4, 8, 8))))


class TestDCD:
    @pytest.fixture
    def layer(self, f64, rng):
        layer = DCD(3, rng)
        prepare_deformable(layer, rng)
        return layer

    def test_shape(self, f64, rng):
        assert DCD(64, rng)(t64(np.zeros((1, 64, 16, 16)))).shape == (1, 64, 8, 8)

    def test_window_oracle(self, layer, rng):
        f = rng.standard_normal((2, 3, 6, 8))
        trace = {}
        out = layer(t64(f), trace=trace).data
        ref = window_oracle(f, trace["allocation"].data)
        assert np.max(np.abs(out - ref) / np.abs(ref)) < 1e-6

    def test_matches_replay(self, layer, rng):
        f = rng.standard_normal((1, 3, 6, 8))
        np.testing.assert_allclose(layer(t64(f)).data, replay.dcd(layer, f), rtol=1e-10)

    def test_constant_allocation_is_avg_pool(self, f64, rng):
        layer = DCD(3, rng)
        layer.deform.weight.data[:] = 0
        layer.deform.bias.data[:] = 0
        f = t64(rng.standard_normal((2, 3, 8, 6)))
        diff = layer(f).data - F.avg_pool2d(f, 2, 2).data
        assert np.abs(diff).max() <= 1e-12

    def test_allocation_range(self, layer, rng):
        trace = {}
        layer(t64(rng.standard_normal((1, 3, 8, 8)) * 5), trace=trace)
        m = trace["allocation"].data
        assert np.all((m > 1) & (m < np.e))

    def test_convex_combination(self, layer, rng):
        f = rng.standard_normal((2, 3, 8, 8)) * 4
        out = layer(t64(f)).data
        win = f.reshape(2, 3, 4, 2, 4, 2)
        assert np.all(out >= win.min(axis=(3, 5)) - 1e-12)
        assert np.all(out <= win.max(axis=(3, 5)) + 1e-12)

    def test_odd_extent_rejected(self, layer):
        with pytest.raises(ValueError, match="even"):
            layer(t64(np.zeros((1, 3, 7, 8))))

    @pytest.mark.parametrize("size", [8, 16, 32, 64])
    def test_shape_contract_over_sizes(self, layer, rng, size):
        assert layer(t64(np.zeros((1, 3, size, size - 2)))).shape == (1, 3, size // 2, size // 2 - 1)


class TestDCU:
    @pytest.fixture
    def layer(self, f64, rng):
        layer = DCU(4, 2, rng)
        prepare_deformable(layer, rng)
        return layer

    def test_shape(self, f64, rng):
        out = DCU(128, 64, rng)(t64(np.zeros((1, 128, 8, 8))), t64(np.zeros((1, 64, 16, 16))))
        assert out.shape == (1, 64, 16, 16)

    def test_matches_replay(self, layer, rng):
        src, skip = rng.standard_normal((1, 4, 3, 4)), rng.standard_normal((1, 2, 6, 8))
        np.testing.assert_allclose(layer(t64(src), t64(skip)).data, replay.dcu(layer, src, skip), rtol=1e-10)

    def test_identity_degeneracy(self, f64, rng):
        layer = DCU(4, 3, rng)
        layer.unit_mask = True
        w = np.zeros_like(layer.deform.weight.data)
        w[np.arange(3), np.arange(3), 1, 1] = 1.0
        layer.deform.weight.data = w
        layer.deform.bias.data[:] = 0
        src, skip = t64(rng.standard_normal((2, 4, 4, 3))), t64(rng.standard_normal((2, 3, 8, 6)))
        ref = F.leaky_relu(layer.up(src)).data
        np.testing.assert_allclose(layer(src, skip).data, ref, rtol=0, atol=1e-14)

    def test_skip_receives_gradient(self, layer, rng):
        src = Tensor(rng.standard_normal((1, 4, 3, 4)), requires_grad=True)
        skip = Tensor(rng.standard_normal((1, 2, 6, 8)), requires_grad=True)
        F.sum(layer(src, skip)).backward()
        assert np.abs(skip.grad).max() > 0 and np.abs(src.grad).max() > 0

    def test_extent_mismatch(self, layer):
        with pytest.raises(ValueError, match="skip shape"):
            layer(t64(np.zeros((1, 4, 3, 4))), t64(np.zeros((1, 2, 6, 7))))
