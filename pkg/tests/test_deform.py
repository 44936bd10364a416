import numpy as np
import pytest

from dynunet import functional as F
from dynunet.deform import bilinear_sample, modulated_deform_conv2d
from dynunet.gradcheck import check_function
from dynunet.tensor import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


@pytest.fixture
def setup(rng):
    x = t64(rng.standard_normal((2, 3, 7, 6)))
    w = t64(rng.standard_normal((4, 3, 3, 3)))
    b = t64(rng.standard_normal(4))
    return x, w, b


class TestBilinearSample:
    @pytest.fixture
    def fmap(self, rng):
        return rng.standard_normal((2, 4, 5))

    def test_grid_point(self, fmap):
        np.testing.assert_array_equal(bilinear_sample(fmap, 2.0, 3.0), fmap[:, 2, 3])

    def test_horizontal_midpoint(self, fmap):
        np.testing.assert_allclose(bilinear_sample(fmap, 1.0, 2.5), (fmap[:, 1, 2] + fmap[:, 1, 3]) / 2)

    def test_far_outside(self, fmap):
        np.testing.assert_array_equal(bilinear_sample(fmap, -10.0, -10.0), 0.0)

    def test_partly_outside_weights_zero(self, fmap):
        np.testing.assert_allclose(bilinear_sample(fmap, -0.5, 0.0), 0.5 * fmap[:, 0, 0])


class TestModulatedDeformConv:
    def test_zero_offsets_unit_mask_is_conv(self, setup):
        x, w, b = setup
        off = t64(np.zeros((2, 18, 7, 6)))
        diff = modulated_deform_conv2d(x, w, b, off).data - F.conv2d(x, w, b, padding=1).data
        assert np.abs(diff).max() < 1e-12

    def test_zero_mask_logits_halve_conv(self, setup):
        x, w, b = setup
        out = modulated_deform_conv2d(x, w, b, t64(np.zeros((2, 18, 7, 6))), t64(np.zeros((2, 9, 7, 6))))
        ref = 0.5 * F.conv2d(x, w, None, padding=1).data + b.data[None, :, None, None]
        assert np.abs(out.data - ref).max() < 1e-12

    @pytest.mark.parametrize("dy, dx", [(0, 1), (1, 0), (-1, 1), (2, -1)])
    def test_integer_offset_is_shifted_conv(self, setup, dy, dx):
        x, w, b = setup
        off = np.zeros((2, 18, 7, 6))
        off[:, 0::2], off[:, 1::2] = dy, dx
        shifted = np.zeros_like(x.data)
        h, wd = x.shape[2:]
        src = x.data[:, :, max(dy, 0) : h + min(dy, 0), max(dx, 0) : wd + min(dx, 0)]
        shifted[:, :, max(-dy, 0) : h + min(-dy, 0), max(-dx, 0) : wd + min(-dx, 0)] = src
        out = modulated_deform_conv2d(x, w, b, t64(off)).data
        ref = F.conv2d(t64(shifted), w, b, padding=1).data
        # interior: all taps of both convs sample inside the map
        iy = slice(1 + max(-dy, 0), h - 1 - max(dy, 0))
        ix = slice(1 + max(-dx, 0), wd - 1 - max(dx, 0))
        assert np.abs(out[:, :, iy, ix] - ref[:, :, iy, ix]).max() < 1e-12

    def test_matches_scalar_oracle(self, setup, rng):
        x, w, b = setup
        off = rng.uniform(-2, 2, size=(2, 18, 7, 6))
        mask = rng.standard_normal((2, 9, 7, 6))
        out = modulated_deform_conv2d(x, w, b, t64(off), t64(mask)).data
        for n, i, j in [(0, 0, 0), (1, 3, 2), (0, 6, 5), (1, 2, 4)]:
            ref = b.data.copy()
            for t in range(9):
                ky, kx = divmod(t, 3)
                v = bilinear_sample(x.data[n], i + ky - 1 + off[n, 2 * t, i, j], j + kx - 1 + off[n, 2 * t + 1, i, j])
                ref += (1 / (1 + np.exp(-mask[n, t, i, j]))) * (w.data[:, :, ky, kx] @ v)
            np.testing.assert_allclose(out[n, :, i, j], ref, rtol=1e-12)

    def test_continuity_in_offsets(self, setup, rng):
        x, w, b = setup
        off = rng.uniform(-1, 1, size=(2, 18, 7, 6))
        eps = 1e-7
        bumped = off.copy()
        bumped[0, 4, 3, 3] += eps
        d = modulated_deform_conv2d(x, w, b, t64(bumped)).data - modulated_deform_conv2d(x, w, b, t64(off)).data
        bound = eps * np.abs(w.data).sum() * np.abs(x.data).max() * 2
        assert np.abs(d).max() <= bound

    def test_offset_channel_count_checked(self, setup):
        x, w, b = setup
        with pytest.raises(ValueError, match="18"):
            modulated_deform_conv2d(x, w, b, t64(np.zeros((2, 16, 7, 6))))

    def test_mask_channel_count_checked(self, setup):
        x, w, b = setup
        with pytest.raises(ValueError, match="9"):
            modulated_deform_conv2d(x, w, b, t64(np.zeros((2, 18, 7, 6))), t64(np.zeros((2, 8, 7, 6))))

    def test_gradients(self, setup, rng):
        x, w, b = setup
        ints = rng.integers(-2, 3, size=(2, 18, 7, 6))
        off = t64(ints + rng.uniform(0.2, 0.8, size=ints.shape))
        mask = t64(rng.standard_normal((2, 9, 7, 6)))
        tensors = {"x": x, "w": w, "b": b, "offsets": off, "mask": mask}
        report = check_function(lambda: modulated_deform_conv2d(x, w, b, off, mask), tensors, label="deform")
        assert report.passed, report.text()
