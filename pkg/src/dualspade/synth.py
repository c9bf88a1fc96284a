"""Synthetic time-binned observations under configurable noise models, and
emulation of indistinguishable-source scenes from single-source calibration
time series.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .core import DualSpadeError, ObservationSeries, Scene, validate_scene

POISSON_NORMAL_CROSSOVER = 30.0


class LengthMismatchError(DualSpadeError):
    pass


class SamePositionError(DualSpadeError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    """Noise configuration for synthetic bins; `seed` (with `stream`) fully
    determines the output."""

    kind: str = "shot"  # "shot" | "gaussian" | "combined"
    sigma: float = 0.0  # additive Gaussian std per mode (fraction units)
    seed: int = 0
    bins: int = 100
    photons: float = 1e11
    stream: int = 0

    def __post_init__(self):
        if self.kind not in ("shot", "gaussian", "combined"):
            raise DualSpadeError(f"unknown noise kind {self.kind!r}")
        if self.photons <= 0:
            raise DualSpadeError("photon budget must be positive")

    def substream(self, index):
        """Independent deterministic stream for parallel per-scene generation."""
        return replace(self, stream=int(index))

    def rng(self):
        return np.random.default_rng(np.random.SeedSequence((int(self.seed), int(self.stream))))


def _sample_fractions(rng, mu, spec: NoiseSpec):
    """(bins, M) noisy fraction samples around mu under the spec's noise."""
    n_bins = spec.bins
    out = np.tile(mu, (n_bins, 1))
    if spec.kind in ("shot", "combined"):
        lam = spec.photons * mu
        counts = np.empty((n_bins, len(mu)))
        small = lam < POISSON_NORMAL_CROSSOVER
        # exact inversion sampling at small means, normal approximation above
        # (relative error < 1e-5 there; exact sampling at N ~ 1e11 is pointless)
        if small.any():
            counts[:, small] = rng.poisson(lam[small], size=(n_bins, int(small.sum())))
        if (~small).any():
            big = lam[~small]
            counts[:, ~small] = rng.normal(big, np.sqrt(big), size=(n_bins, int((~small).sum())))
        out = counts / spec.photons
    if spec.kind in ("gaussian", "combined"):
        sigma = np.broadcast_to(np.asarray(spec.sigma, dtype=float), mu.shape)
        if np.any(sigma > 0):
            out = out + rng.normal(0.0, 1.0, size=out.shape) * sigma
    return np.clip(out, 0.0, 1.0)


def simulate_bins(model, scene: Scene, spec: NoiseSpec) -> ObservationSeries:
    """Time-binned observations of a two-source scene under the noise spec.

    Photon accounting matches the shot-noise Fisher information: of the total
    budget N, each demultiplexer of a dual layout receives N/2 (and a single
    demultiplexer receives N * split1), so per-mode counts are Poisson with
    mean N_eff * mu_i.
    """
    mu = model.mu(scene)
    layout = model.layout
    n_eff = spec.photons * (0.5 if layout.dual else layout.split1)
    bins = _sample_fractions(spec.rng(), mu, replace(spec, photons=n_eff))
    return ObservationSeries(bins, photon_budget=spec.photons)


@dataclass(frozen=True)
class SingleSourceTimeSeries:
    """Per-mode fraction time series of one source parked at `position`."""

    position: float
    series: np.ndarray  # (T, M)

    def __post_init__(self):
        series = np.asarray(self.series, dtype=float)
        if series.ndim != 2:
            raise DualSpadeError("series must be 2-D (T, M)")
        series = series.copy()
        series.setflags(write=False)
        object.__setattr__(self, "series", series)

    @property
    def mean(self):
        return self.series.mean(axis=0)

    @property
    def residual(self):
        return self.series - self.mean


def simulate_single_source(response, source_id, position, spec: NoiseSpec) -> SingleSourceTimeSeries:
    """Synthetic calibration time series of one source (stand-in for the
    p -> 1 limit, which Scene itself forbids)."""
    mu = response.fractions(source_id, position)
    series = _sample_fractions(spec.rng(), mu, spec)
    return SingleSourceTimeSeries(position, series)


def emulate_indistinguishable(ts1: SingleSourceTimeSeries, ts2: SingleSourceTimeSeries, p):
    """Two-source scene emulated from two single-source series of the SAME
    physical source.

    Per-bin observation = p*mean(ts1) + (1-p)*mean(ts2) + residual(ts1)
    + residual(ts2): both residual series are summed unweighted, which doubles
    the per-mode noise variance (a conservative estimate for electronic-noise
    limited channels).  The implied scene is d = x2 - x1, c = (x1 + x2)/2 (the
    geometric midpoint), p unchanged; if the series arrive in descending
    position order they are swapped and p is complemented so that p always
    belongs to the source at c - d/2.
    """
    if ts1.series.shape[0] != ts2.series.shape[0]:
        raise LengthMismatchError(
            f"series lengths differ: {ts1.series.shape[0]} vs {ts2.series.shape[0]}"
        )
    if ts1.position == ts2.position:
        raise SamePositionError(f"both series at position {ts1.position}")
    if ts1.position > ts2.position:
        ts1, ts2 = ts2, ts1
        p = 1.0 - p
    d = ts2.position - ts1.position
    c = 0.5 * (ts1.position + ts2.position)
    scene = Scene(d, c, float(p))
    bins = p * ts1.mean + (1.0 - p) * ts2.mean + ts1.residual + ts2.residual
    return ObservationSeries(np.clip(bins, 0.0, 1.0)), scene


def generate_table1_ensemble(which, layout=None):
    """Reference scene grids: 'distinguishable' (10 x 5 x 3 = 150 scenes with
    signed d) or 'indistinguishable' (5 x 5 x 3 = 75 scenes, d > 0)."""
    from .core import DemuxLayout

    layout = layout or DemuxLayout.dual_default()
    c_vals = np.linspace(-0.07, 0.07, 5)
    p_vals = (0.1, 0.3, 0.5)
    if which == "distinguishable":
        d_vals = np.linspace(-0.15, 0.15, 10)
    elif which == "indistinguishable":
        d_vals = np.linspace(0.05, 0.3, 5)
        layout = layout.with_symmetric()
    else:
        raise DualSpadeError(f"unknown ensemble {which!r}")
    return [
        validate_scene((d, c, p), layout)
        for d in d_vals
        for c in c_vals
        for p in p_vals
    ]


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def write_timeseries_csv(path, series_list, modes):
    """Single-source time series: position_w0, bin_index, modes..., total_power."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position_w0", "bin_index"] + [m.label for m in modes] + ["total_power"])
        for ts in series_list:
            for k, row in enumerate(ts.series):
                writer.writerow(
                    [repr(float(ts.position)), k] + [repr(float(v)) for v in row] + ["1.0"]
                )


def read_timeseries_csv(path):
    """Read single-source time series grouped by position."""
    from .calibration import _parse_mode_label

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["position_w0", "bin_index"] or header[-1] != "total_power":
            raise DualSpadeError(f"unexpected time-series CSV header in {path}")
        modes = tuple(_parse_mode_label(lbl) for lbl in header[2:-1])
        groups = {}
        for rec in reader:
            pos = float(rec[0])
            groups.setdefault(pos, []).append([float(v) for v in rec[2:-1]])
    series = [SingleSourceTimeSeries(pos, np.array(rows)) for pos, rows in sorted(groups.items())]
    return series, modes


def write_observation_csv(path, series: ObservationSeries, scene: Scene, modes):
    """Simulated scene bins: d_ref, c_ref, p_ref, bin_index, modes..., total_power."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["d_ref", "c_ref", "p_ref", "bin_index"] + [m.label for m in modes] + ["total_power"]
        )
        for k in range(series.n_bins):
            writer.writerow(
                [repr(float(scene.d)), repr(float(scene.c)), repr(float(scene.p)), k]
                + [repr(float(v)) for v in series.bins[k]]
                + ["1.0"]
            )


def read_observation_csv(path):
    from .calibration import _parse_mode_label

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["d_ref", "c_ref", "p_ref", "bin_index"]:
            raise DualSpadeError(f"unexpected observation CSV header in {path}")
        modes = tuple(_parse_mode_label(lbl) for lbl in header[4:-1])
        rows = []
        scene_ref = None
        for rec in reader:
            scene_ref = Scene(float(rec[0]), float(rec[1]), float(rec[2]))
            rows.append([float(v) for v in rec[4:-1]])
    return ObservationSeries(np.array(rows)), scene_ref, modes
