#!/usr/bin/env python3
"""Benchmark the compiled loss/gradient kernel against the numpy fallback.

Builds a fitted polynomial response model from the analytic optics, then
times `poly_loss_grad` — the hot kernel evaluated once per optimizer step —
under both backends on identical inputs, plus a full single-bin estimate
with each backend patched in.

Usage: python3 benchmarks/bench_kernels.py [--repeats 20000]
"""
from __future__ import annotations

import argparse
import sys
import timeit
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from dualspade import _backend
from dualspade import _kernels_py
from dualspade.core import DemuxLayout, Scene
from dualspade.estimator import NoiseCovariance, estimate
from dualspade.forward import ForwardModel
from dualspade.optics import IdealResponse

from conftest import fitted_model


def build_inputs():
    layout = DemuxLayout.dual_default()
    response = IdealResponse(layout)
    srm = fitted_model(response, layout)
    fm = ForwardModel(srm, layout)
    scene = Scene(0.17, 0.04, 0.45)
    y = fm.mu(scene) + 1e-4
    gamma_inv = np.eye(layout.n_modes) * 1e8
    args = (
        np.ascontiguousarray(srm.curves[1]),
        np.ascontiguousarray(srm._dcurves[1]),
        np.ascontiguousarray(srm.curves[2]),
        np.ascontiguousarray(srm._dcurves[2]),
        srm._mid,
        srm._halfspan,
        np.ascontiguousarray(gamma_inv),
        np.ascontiguousarray(y),
        scene.d,
        scene.c,
        scene.p,
    )
    return fm, y, gamma_inv, args


def time_kernel(fn, args, repeats):
    best = min(timeit.repeat(lambda: fn(*args), number=repeats, repeat=5))
    return best / repeats


def time_estimate(fm, y, gamma_inv, backend, repeats=5):
    from dualspade import estimator

    saved = estimator.kernels
    estimator.kernels = backend
    try:
        cov = NoiseCovariance.fixed(np.linalg.inv(gamma_inv), ridge=1e-30)
        best = min(timeit.repeat(lambda: estimate(fm, y, cov), number=1, repeat=repeats))
    finally:
        estimator.kernels = saved
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20000,
                        help="kernel calls per timing sample")
    opts = parser.parse_args()

    if not _backend.HAVE_COMPILED:
        print("compiled extension unavailable; benchmarking fallback only")

    fm, y, gamma_inv, args = build_inputs()

    loss_c, grad_c = _backend.kernels.poly_loss_grad(*args)
    loss_py, grad_py = _kernels_py.poly_loss_grad(*args)
    assert abs(loss_c - loss_py) <= 1e-13 * abs(loss_py)
    np.testing.assert_allclose(grad_c, grad_py, rtol=1e-12)

    t_py = time_kernel(_kernels_py.poly_loss_grad, args, opts.repeats)
    print(f"poly_loss_grad  numpy fallback : {t_py * 1e6:9.2f} us/call")
    if _backend.HAVE_COMPILED:
        t_c = time_kernel(_backend.kernels.poly_loss_grad, args, opts.repeats)
        print(f"poly_loss_grad  compiled       : {t_c * 1e6:9.2f} us/call")
        print(f"kernel speedup                 : {t_py / t_c:9.2f}x")

    e_py = time_estimate(fm, y, gamma_inv, _kernels_py)
    print(f"estimate()      numpy fallback : {e_py * 1e3:9.2f} ms/scene")
    if _backend.HAVE_COMPILED:
        from dualspade import _kernels

        e_c = time_estimate(fm, y, gamma_inv, _kernels)
        print(f"estimate()      compiled       : {e_c * 1e3:9.2f} ms/scene")
        print(f"end-to-end speedup             : {e_py / e_c:9.2f}x")


if __name__ == "__main__":
    main()
