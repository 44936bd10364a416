import math

import numpy as np
import pytest

from dynunet import functional as F
from dynunet.gradcheck import (
    KINK_MARGIN,
    check_function,
    finite_diff_grad,
    kink_margin,
    network_check,
    run_suite,
)
from dynunet.tensor import Tensor


class TestFiniteDifference:
    def test_sum_of_squares(self, rng):
        x = rng.standard_normal(6)
        np.testing.assert_allclose(finite_diff_grad(lambda v: float(np.sum(v**2)), x), 2 * x, atol=1e-9)

    def test_sigmoid_at_zero(self):
        g = finite_diff_grad(lambda v: float(1 / (1 + math.exp(-v[0]))), np.zeros(1))
        assert abs(g[0] - 0.25) < 1e-9

    def test_index_subset(self):
        g = finite_diff_grad(lambda v: float(v.sum()), np.zeros(4), indices=[1])
        assert g[1] == pytest.approx(1.0) and np.isnan(g[0])


class TestCheckFunction:
    def test_correct_gradient_passes(self, f64, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        report = check_function(lambda: F.mul(x, x), {"x": x}, label="sq")
        assert report.passed and report.max_rel < 1e-6
        line = report.text()
        assert line.startswith("sq/x 3x4 ") and line.endswith(" PASS")
        name, shape, rel, err, status = line.split(" ")
        float(rel), float(err)

    def test_wrong_gradient_named(self, f64, rng):
        x = Tensor(rng.standard_normal(5))

        def broken():
            # Forward is x*x but the tape records x*stop(x), so the gradient halves.
            return F.mul(x, Tensor(x.data.copy()))

        report = check_function(broken, {"x": x}, label="bad")
        assert not report.passed
        line = report.text()
        assert "bad/x 5 " in line and "FAIL" in line and "analytic=" in line and "numeric=" in line

    def test_rejects_float32(self, rng):
        x = Tensor(rng.standard_normal(2).astype(np.float32))
        with pytest.raises(TypeError, match="float64"):
            check_function(lambda: x, {"x": x})


class TestKinks:
    def test_margin_of_leaky_relu(self, f64):
        x = Tensor(np.array([0.5, -2e-3, 3.0]), requires_grad=True)
        assert kink_margin(F.leaky_relu(x)) == pytest.approx(2e-3)

    def test_margin_without_kinks(self, f64):
        x = Tensor(np.ones(3), requires_grad=True)
        assert kink_margin(F.mul(x, x)) == math.inf


class TestSuite:
    def test_network_check_unet(self):
        report = network_check("unet", seed=0)
        assert report.passed, report.text()

    def test_primitives_five_seeds(self):
        reports = run_suite("primitives", seeds=range(5))
        failed = [r.text() for r in reports if not r.passed]
        assert not failed, failed

    def test_unknown_target(self):
        with pytest.raises(ValueError):
            run_suite("nope")

    def test_kink_margin_constant(self):
        assert KINK_MARGIN == 1e-4
