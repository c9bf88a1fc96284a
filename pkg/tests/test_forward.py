import numpy as np
import pytest

from dualspade.core import OutOfWindowError, Scene
from dualspade.forward import ForwardModel
from dualspade.optics import hg_intensity_fraction


@pytest.fixture(scope="module")
def ideal_dual_fm(ideal_dual, dual_layout):
    return ForwardModel(ideal_dual, dual_layout)


@pytest.fixture(scope="module")
def single_fm(aliased_single_model, single_layout):
    return ForwardModel(aliased_single_model, single_layout)


@pytest.fixture(scope="module")
def fitted_fm(dual_model, dual_layout):
    return ForwardModel(dual_model, dual_layout)


@pytest.fixture(scope="module")
def aliased_fm(aliased_dual_model, dual_layout):
    return ForwardModel(aliased_dual_model, dual_layout)


class TestMu:
    def test_single_demux_closed_form(self, single_fm):
        # mu for (d, c, p) = (0.2, 0, 0.5) is the average of two displaced
        # fundamental-overlap curves
        mu = single_fm.mu(Scene(0.2, 0.0, 0.5))
        want = [
            0.5 * (hg_intensity_fraction(n, -0.1) + hg_intensity_fraction(n, 0.1))
            for n in range(4)
        ]
        np.testing.assert_allclose(mu, want, atol=1e-7)

    def test_zero_separation_is_p_independent(self, ideal_dual_fm):
        mu_a = ideal_dual_fm.mu(Scene(0.0, 0.05, 0.2))
        mu_b = ideal_dual_fm.mu(Scene(0.0, 0.05, 0.8))
        np.testing.assert_allclose(mu_a, mu_b)

    def test_convex_mixture(self, ideal_dual_fm, ideal_dual):
        scene = Scene(0.16, -0.04, 0.3)
        want = 0.3 * ideal_dual.fractions(1, scene.x1) + 0.7 * ideal_dual.fractions(
            2, scene.x2
        )
        np.testing.assert_allclose(ideal_dual_fm.mu(scene), want)

    def test_swap_symmetry_exact_for_identical_curves(self, aliased_fm):
        # relabeling the two sources: (d, c, p) and (-d, c, 1-p) describe the
        # same physical scene when both sources share one response curve
        for d, c, p in [(0.12, 0.0, 0.3), (0.2, -0.06, 0.45), (0.05, 0.1, 0.7)]:
            np.testing.assert_allclose(
                aliased_fm.mu(Scene(d, c, p)),
                aliased_fm.mu(Scene(-d, c, 1.0 - p)),
                rtol=0,
                atol=5e-17,
            )

    def test_out_of_window(self, ideal_dual_fm):
        with pytest.raises(OutOfWindowError):
            ideal_dual_fm.mu(Scene(0.5, 0.45, 0.5))


class TestJacobian:
    @staticmethod
    def _fd_jacobian(fm, scene, h=1e-6):
        theta = scene.as_array()
        cols = []
        for k in range(3):
            hi = theta.copy()
            lo = theta.copy()
            hi[k] += h
            lo[k] -= h
            cols.append((fm.mu(Scene(*hi)) - fm.mu(Scene(*lo))) / (2 * h))
        return np.column_stack(cols)

    def test_finite_difference_fixed_scene(self, fitted_fm):
        scene = Scene(0.15, -0.05, 0.3)
        jac = fitted_fm.jacobian(scene)
        fd = self._fd_jacobian(fitted_fm, scene)
        np.testing.assert_allclose(jac, fd, rtol=1e-5, atol=1e-9)

    def test_finite_difference_random_scenes(self, fitted_fm):
        rng = np.random.default_rng(11)
        for _ in range(100):
            scene = Scene(
                rng.uniform(-0.3, 0.3), rng.uniform(-0.15, 0.15), rng.uniform(0.05, 0.95)
            )
            jac = fitted_fm.jacobian(scene)
            fd = self._fd_jacobian(fitted_fm, scene)
            np.testing.assert_allclose(jac, fd, rtol=1e-5, atol=5e-8)

    def test_mu_and_jacobian_consistent(self, fitted_fm):
        scene = Scene(0.1, 0.02, 0.6)
        mu, jac = fitted_fm.mu_and_jacobian(scene)
        np.testing.assert_array_equal(mu, fitted_fm.mu(scene))
        np.testing.assert_array_equal(jac, fitted_fm.jacobian(scene))

    def test_strict_window_for_derivatives(self, ideal_dual_fm):
        lo, hi = ideal_dual_fm.window
        edge = Scene(0.0, hi, 0.5)
        ideal_dual_fm.mu(edge)  # closed window: evaluation allowed
        with pytest.raises(OutOfWindowError):
            ideal_dual_fm.jacobian(edge)
