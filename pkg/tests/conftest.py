import math

import numpy as np
import pytest
from numpy.polynomial.hermite import hermval
from scipy import integrate

from dualspade.calibration import CalibrationScan, fit_scan
from dualspade.core import DemuxLayout
from dualspade.optics import IdealResponse


def hg_amplitude_oracle(order, x):
    """Normalized HG_{n,0} field with amplitude 1/e half-width w0 = 1."""
    coef = np.zeros(order + 1)
    coef[order] = 1.0
    return (
        (2.0 / np.pi) ** 0.25
        / math.sqrt(2.0**order * math.factorial(order))
        * hermval(np.sqrt(2.0) * x, coef)
        * np.exp(-x * x)
    )


def overlap_fraction_oracle(order, displacement):
    """Quadrature oracle: |<HG_n | HG_0 displaced>|^2, independent of any
    closed form."""
    amp, _ = integrate.quad(
        lambda t: hg_amplitude_oracle(order, t) * hg_amplitude_oracle(0, t - displacement),
        -12.0,
        12.0,
        limit=200,
    )
    return amp * amp


def fitted_model(response, layout, degree=12, points=61, span=0.35):
    """Polynomial response model fit from analytic curves (both sources)."""
    xs = np.linspace(-span, span, points)
    models = []
    for sid in (1, 2):
        fractions = np.array([response.fractions(sid, x) for x in xs])
        scan = CalibrationScan(sid, xs, fractions, layout.active_modes)
        models.append(fit_scan(scan, degree=degree))
    return models[0].merge(models[1])


@pytest.fixture(scope="session")
def dual_layout():
    return DemuxLayout.dual_default()


@pytest.fixture(scope="session")
def single_layout():
    return DemuxLayout.single()


@pytest.fixture(scope="session")
def ideal_dual(dual_layout):
    return IdealResponse(dual_layout)


@pytest.fixture(scope="session")
def ideal_single(single_layout):
    return IdealResponse(single_layout)


@pytest.fixture(scope="session")
def perturbed_dual(dual_layout):
    return IdealResponse.perturbed_twin(dual_layout)


@pytest.fixture(scope="session")
def dual_model(perturbed_dual, dual_layout):
    """Fitted distinguishable-source model over the default dual layout."""
    return fitted_model(perturbed_dual, dual_layout)


@pytest.fixture(scope="session")
def aliased_dual_model(ideal_dual, dual_layout):
    """Fitted indistinguishable-source model over the default dual layout."""
    return fitted_model(ideal_dual, dual_layout).aliased()


@pytest.fixture(scope="session")
def aliased_single_model(ideal_single, single_layout):
    return fitted_model(ideal_single, single_layout).aliased()
