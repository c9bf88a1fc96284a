"""Incoherent two-source mixing model mu(theta) and its Jacobian.

mu_i = p * I_{i,1}(c - d/2) + (1 - p) * I_{i,2}(c + d/2)

works over any response object exposing `window`, `fractions(source_id, x)`
and `fractions_derivative(source_id, x)` -- either the analytic ideal optics
or a fitted polynomial model.
"""
from __future__ import annotations

import numpy as np

from .core import OutOfWindowError, Scene


class ForwardModel:
    def __init__(self, response, layout):
        self.response = response
        self.layout = layout

    @property
    def window(self):
        return self.response.window

    @property
    def n_modes(self):
        return self.layout.n_modes

    def _check_positions(self, scene: Scene, strict=False):
        lo, hi = self.window
        for x in (scene.x1, scene.x2):
            inside = (lo < x < hi) if strict else (lo <= x <= hi)
            if not inside:
                raise OutOfWindowError(
                    f"source position {x} outside response window [{lo}, {hi}]"
                )

    def mu(self, scene: Scene):
        """Expected intensity-fraction vector for a scene."""
        self._check_positions(scene)
        f1 = self.response.fractions(1, scene.x1)
        f2 = self.response.fractions(2, scene.x2)
        return scene.p * f1 + (1.0 - scene.p) * f2

    def jacobian(self, scene: Scene):
        """(M, 3) matrix of d mu / d (d, c, p)."""
        self._check_positions(scene, strict=True)
        f1 = self.response.fractions(1, scene.x1)
        f2 = self.response.fractions(2, scene.x2)
        g1 = self.response.fractions_derivative(1, scene.x1)
        g2 = self.response.fractions_derivative(2, scene.x2)
        p = scene.p
        jac = np.empty((len(f1), 3))
        jac[:, 0] = -0.5 * p * g1 + 0.5 * (1.0 - p) * g2
        jac[:, 1] = p * g1 + (1.0 - p) * g2
        jac[:, 2] = f1 - f2
        return jac

    def mu_and_jacobian(self, scene: Scene):
        self._check_positions(scene, strict=True)
        f1 = self.response.fractions(1, scene.x1)
        f2 = self.response.fractions(2, scene.x2)
        g1 = self.response.fractions_derivative(1, scene.x1)
        g2 = self.response.fractions_derivative(2, scene.x2)
        p = scene.p
        mu = p * f1 + (1.0 - p) * f2
        jac = np.empty((len(f1), 3))
        jac[:, 0] = -0.5 * p * g1 + 0.5 * (1.0 - p) * g2
        jac[:, 1] = p * g1 + (1.0 - p) * g2
        jac[:, 2] = f1 - f2
        return mu, jac
