"""Classical Fisher information matrices (shot-noise and Gaussian models),
Cramer-Rao bounds, ensemble sweeps over scene grids, and the quantum
benchmark comparison.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import DegenerateSceneError, DualSpadeError, PhotonBudget, Scene
from .estimator import NoiseCovariance, SingularCovarianceError
from .forward import ForwardModel

MU_FLOOR = 1e-15
CONDITION_LIMIT = 1e12
# Benchmark sigma_d bound for indistinguishable sources: 2.3e-6 w0 at
# N = 1e11 photons, scaled as 1/sqrt(N).  This is a stored constant, not a
# quantum-information computation.
QCRB_COEFF = 2.3e-6 * math.sqrt(1e11)

PARAMS = ("d", "c", "p")


@dataclass(frozen=True)
class FisherResult:
    scene: Scene
    fim: np.ndarray  # (3, 3)
    crb: np.ndarray  # (3,) sqrt of diagonal of F^-1; +inf where unidentifiable
    noise_model: str  # "shot_noise" | "gaussian"
    photon_budget: float | None
    condition_number: float
    flags: tuple = ()


def _n_total(n):
    return n.n_total if isinstance(n, PhotonBudget) else float(n)


def _crb_from_fim(fim, flags):
    fim = 0.5 * (fim + fim.T)
    evals, evecs = np.linalg.eigh(fim)
    lam_max = float(evals[-1])
    if lam_max <= 0:
        return fim, np.full(3, np.inf), np.inf, flags + ["singular_fim"]
    if evals[0] < -1e-10 * lam_max:
        flags = flags + ["negative_eigenvalue"]
    cond = lam_max / max(evals[0], 0.0) if evals[0] > 0 else np.inf
    small = evals < lam_max / CONDITION_LIMIT
    if not small.any():
        inv = np.linalg.inv(fim)
        crb = np.sqrt(np.diag(inv))
        return fim, crb, cond, flags
    # unidentifiable directions: report +inf for parameters overlapping the
    # near-null subspace; others from the well-conditioned subspace inverse
    flags = flags + ["ill_conditioned"]
    null_overlap = (evecs[:, small] ** 2).sum(axis=1)
    inv_ok = (evecs[:, ~small] / evals[~small]) @ evecs[:, ~small].T
    crb = np.sqrt(np.abs(np.diag(inv_ok)))
    crb[null_overlap > 1e-8] = np.inf
    return fim, crb, cond, flags


def fim_shot_noise(model: ForwardModel, scene: Scene, n) -> FisherResult:
    """Shot-noise (Poisson-counting) Fisher information at total budget N.

    F_ab = (N/2) * sum_i (1/mu_i) dmu_i/da dmu_i/db in the dual configuration
    (photons evenly distributed between the two demultiplexers), with the N/2
    prefactor replaced by N * split1 for a single demultiplexer.  mu are the
    forward-model intensity fractions.
    """
    n_total = _n_total(n)
    layout = model.layout
    prefactor = 0.5 * n_total if layout.dual else n_total * layout.split1
    mu, jac = model.mu_and_jacobian(scene)
    if np.max(np.abs(jac)) < 1e-14:
        raise DegenerateSceneError(f"all derivatives vanish at {scene}")
    flags = []
    fim = np.zeros((3, 3))
    for i in range(mu.size):
        if mu[i] < MU_FLOOR:
            if np.max(np.abs(jac[i])) < 1e-12:
                continue  # 0/0 limit contributes nothing
            flags.append(f"mode_{i}_excluded_zero_mu")
            continue
        fim += np.outer(jac[i], jac[i]) / mu[i]
    fim *= prefactor
    fim, crb, cond, flags = _crb_from_fim(fim, flags)
    return FisherResult(scene, fim, crb, "shot_noise", n_total, cond, tuple(flags))


def fim_gaussian(model: ForwardModel, scene: Scene, cov: NoiseCovariance) -> FisherResult:
    """Gaussian-channel Fisher information F = J' Gamma^-1 J (per time bin).

    For a parameter-dependent covariance, Gamma is evaluated at the scene and
    the derivative-of-Gamma term is omitted (Gamma varies slowly with theta).
    """
    _, jac = model.mu_and_jacobian(scene)
    gamma = cov.gamma_at(scene)
    try:
        chol = scipy.linalg.cholesky(gamma, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise SingularCovarianceError(str(exc)) from exc
    wjac = scipy.linalg.solve_triangular(chol, jac, lower=True)
    fim = wjac.T @ wjac
    fim, crb, cond, flags = _crb_from_fim(fim, [])
    return FisherResult(scene, fim, crb, "gaussian", None, cond, tuple(flags))


def qcrb_benchmark(n) -> float:
    """Benchmark sigma_d bound 2.3e-6 w0 at N = 1e11, scaled by 1/sqrt(N)."""
    n_total = _n_total(n)
    if n_total <= 0:
        raise DualSpadeError("photon budget must be positive")
    return QCRB_COEFF / math.sqrt(n_total)


@dataclass(frozen=True)
class EnsembleSweep:
    scenes: tuple
    results: tuple  # FisherResult or None per scene (None = failed, flagged)
    flags: tuple  # per-scene flag string ("" when ok)
    summary: dict  # param -> {d_values, mean, p05, p95}

    def sigma(self, param):
        """Per-scene CRB for one parameter (inf where flagged/failed)."""
        a = PARAMS.index(param)
        return np.array(
            [r.crb[a] if r is not None else np.inf for r in self.results]
        )


def crb_sweep(model: ForwardModel, scenes, noise_model="shot_noise", n=None, cov=None) -> EnsembleSweep:
    """Per-scene Fisher results plus mean and 90% band per parameter, grouped
    by separation.  Per-scene failures are flagged, never abort the sweep."""
    scenes = tuple(scenes)
    if not scenes:
        raise DualSpadeError("empty scene grid")
    results = []
    flags = []
    for scene in scenes:
        try:
            if noise_model == "shot_noise":
                res = fim_shot_noise(model, scene, n if n is not None else PhotonBudget())
            elif noise_model == "gaussian":
                res = fim_gaussian(model, scene, cov)
            else:
                raise DualSpadeError(f"unknown noise model {noise_model!r}")
            results.append(res)
            flags.append(";".join(res.flags))
        except DualSpadeError as exc:
            results.append(None)
            flags.append(f"failed:{type(exc).__name__}")

    d_all = np.array([s.d for s in scenes])
    d_values = np.unique(np.round(d_all, 12))
    summary = {}
    for a, param in enumerate(PARAMS):
        sig = np.array([r.crb[a] if r is not None else np.inf for r in results])
        mean, p05, p95 = [], [], []
        for d in d_values:
            group = sig[np.isclose(d_all, d, atol=1e-12)]
            finite = group[np.isfinite(group)]
            if finite.size:
                mean.append(float(finite.mean()))
                p05.append(float(np.percentile(finite, 5)))
                p95.append(float(np.percentile(finite, 95)))
            else:
                mean.append(np.inf)
                p05.append(np.inf)
                p95.append(np.inf)
        summary[param] = {
            "d_values": d_values.tolist(),
            "mean": mean,
            "p05": p05,
            "p95": p95,
        }
    return EnsembleSweep(scenes, tuple(results), tuple(flags), summary)


def fig1_grid(n_d=30, n_c=6, p=0.5):
    """Scene ensemble d in [0.01, 0.3], c in [-0.15, 0.15], fixed p.

    The default c grid is even-sized so it excludes c = 0 exactly: at c = 0 a
    single unshifted demux with identical even curves has exactly vanishing c
    and p derivatives (rank-1 FIM), which is a measure-zero pathology rather
    than representative of the ensemble."""
    d_vals = np.linspace(0.01, 0.3, n_d)
    c_vals = np.linspace(-0.15, 0.15, n_c)
    return [Scene(float(d), float(c), p) for d in d_vals for c in c_vals]


SWEEP_CSV_COLUMNS = (
    "d_ref", "c_ref", "p_ref", "noise_model", "config",
    "sigma_d_crb", "sigma_c_crb", "sigma_p_crb", "fim_cond", "flags",
)


def write_sweep_csv(path, sweep: EnsembleSweep, config_label="", length_scale=1.0):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_COLUMNS)
        for scene, res, flag in zip(sweep.scenes, sweep.results, sweep.flags):
            if res is None:
                row = [scene.d * length_scale, scene.c * length_scale, scene.p,
                       "", config_label, "inf", "inf", "inf", "inf", flag]
            else:
                row = [
                    scene.d * length_scale, scene.c * length_scale, scene.p,
                    res.noise_model, config_label,
                    res.crb[0] * length_scale, res.crb[1] * length_scale, res.crb[2],
                    res.condition_number, flag,
                ]
            writer.writerow(row)


def write_sweep_summary_json(path, sweeps: dict, length_scale=1.0):
    """Summary JSON: mean and 90% band arrays per parameter per labeled sweep."""
    doc = {}
    for label, sweep in sweeps.items():
        entry = {}
        for param, summ in sweep.summary.items():
            scale = length_scale if param in ("d", "c") else 1.0
            entry[param] = {
                "d_values": [v * length_scale for v in summ["d_values"]],
                "mean": [v * scale for v in summ["mean"]],
                "p05": [v * scale for v in summ["p05"]],
                "p95": [v * scale for v in summ["p95"]],
            }
        doc[label] = entry
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
