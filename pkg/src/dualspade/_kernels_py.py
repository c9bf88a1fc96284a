"""Pure-numpy fallback for the per-bin loss/gradient hot kernel.

Same contract as the compiled `_kernels` extension; selected at import time
by `_backend` when the extension is unavailable.
"""
from __future__ import annotations

import numpy as np

COMPILED = False


def poly_loss_grad(coeffs1, dcoeffs1, coeffs2, dcoeffs2, mid, halfspan, gamma_inv, y, d, c, p):
    """Fixed-covariance weighted-residual loss and its (d, c, p) gradient.

    coeffs*: (M, D+1) polynomial coefficients (lowest order first) of each
    source's response curves on the abscissa rescaled by (x - mid)/halfspan;
    dcoeffs*: their derivative coefficients in the rescaled variable.
    Values are clipped to [0, 1] with zero derivative where the clip is
    active.  Returns (loss, grad[3]).
    """
    t1 = (c - 0.5 * d - mid) / halfspan
    t2 = (c + 0.5 * d - mid) / halfspan

    v1 = np.polynomial.polynomial.polyval(t1, coeffs1.T)
    v2 = np.polynomial.polynomial.polyval(t2, coeffs2.T)
    g1 = np.polynomial.polynomial.polyval(t1, dcoeffs1.T) / halfspan
    g2 = np.polynomial.polynomial.polyval(t2, dcoeffs2.T) / halfspan
    clip1 = (v1 < 0.0) | (v1 > 1.0)
    clip2 = (v2 < 0.0) | (v2 > 1.0)
    v1 = np.clip(v1, 0.0, 1.0)
    v2 = np.clip(v2, 0.0, 1.0)
    g1 = np.where(clip1, 0.0, g1)
    g2 = np.where(clip2, 0.0, g2)

    mu = p * v1 + (1.0 - p) * v2
    jac = np.empty((mu.size, 3))
    jac[:, 0] = -0.5 * p * g1 + 0.5 * (1.0 - p) * g2
    jac[:, 1] = p * g1 + (1.0 - p) * g2
    jac[:, 2] = v1 - v2

    r = y - mu
    gr = gamma_inv @ r
    loss = float(r @ gr)
    grad = -2.0 * (jac.T @ gr)
    return loss, grad
