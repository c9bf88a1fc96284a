"""Polynomial calibration curves: fitting single-source scans and evaluating
the resulting per-mode, per-source intensity-fraction responses I_{i,j}(x).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .core import (
    EPS_NORM,
    DualSpadeError,
    ModeId,
    OutOfRangeError,
    OutOfWindowError,
)

DEFAULT_DEGREE = 12
RMS_GATE = 5e-4
MIN_SPAN = 0.3  # scans must cover at least [-0.3, 0.3]
CONDITION_LIMIT = 1e12


class InsufficientPointsError(DualSpadeError):
    pass


class IllConditionedError(DualSpadeError):
    pass


class MissingSourceError(DualSpadeError):
    pass


@dataclass(frozen=True)
class CalibrationScan:
    """One single-source position scan: normalized fractions per active mode."""

    source_id: int
    positions: np.ndarray
    fractions: np.ndarray
    modes: tuple[ModeId, ...]

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        frac = np.asarray(self.fractions, dtype=float)
        if self.source_id not in (1, 2):
            raise OutOfRangeError("source_id", self.source_id)
        if pos.ndim != 1 or np.any(np.diff(pos) <= 0):
            raise OutOfRangeError("positions", pos.shape, "positions must be strictly increasing")
        if frac.shape != (pos.size, len(self.modes)):
            raise OutOfRangeError("fractions", frac.shape, "fractions shape mismatch")
        if pos[0] > -MIN_SPAN or pos[-1] < MIN_SPAN:
            raise OutOfRangeError(
                "positions", (pos[0], pos[-1]), f"scan must span at least [-{MIN_SPAN}, {MIN_SPAN}]"
            )
        if np.any(frac < 0) or np.any(frac > 1 + EPS_NORM):
            raise OutOfRangeError("fractions", None, "fractions outside [0, 1]")
        pos = pos.copy()
        frac = frac.copy()
        pos.setflags(write=False)
        frac.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "fractions", frac)
        object.__setattr__(self, "modes", tuple(ModeId(*m) for m in self.modes))


class SourceResponseModel:
    """Fitted polynomial response curves for one or both sources.

    Coefficients live on the abscissa rescaled to [-1, 1] over the fit
    window.  Evaluations are clipped to [0, 1]; clip events are counted in
    `clip_count` for fit auditing.  Models are immutable after fitting apart
    from that counter.
    """

    def __init__(self, window, degree, modes, curves, residual_rms, flagged=None):
        self.window = (float(window[0]), float(window[1]))
        self.degree = int(degree)
        self.modes = tuple(ModeId(*m) for m in modes)
        # curves: {source_id: (M, degree+1) coefficient array, lowest order first}
        self.curves = {int(s): np.asarray(c, dtype=float) for s, c in curves.items()}
        self.residual_rms = {int(s): np.asarray(r, dtype=float) for s, r in residual_rms.items()}
        self.flagged = dict(flagged or {})
        self.clip_count = 0
        self._mid = 0.5 * (self.window[0] + self.window[1])
        self._halfspan = 0.5 * (self.window[1] - self.window[0])
        # derivative coefficients in the rescaled variable
        self._dcurves = {
            s: np.ascontiguousarray(c[:, 1:] * np.arange(1, c.shape[1]))
            for s, c in self.curves.items()
        }

    @property
    def sources(self):
        return tuple(sorted(self.curves))

    def _rescale(self, x):
        return (x - self._mid) / self._halfspan

    def _check_window(self, x, strict=False):
        lo, hi = self.window
        inside = (lo < x < hi) if strict else (lo <= x <= hi)
        if not inside:
            raise OutOfWindowError(f"position {x} outside fitted window [{lo}, {hi}]")

    def _coeffs(self, source_id):
        try:
            return self.curves[source_id]
        except KeyError:
            raise MissingSourceError(f"source {source_id} not fitted") from None

    def fractions(self, source_id, x):
        """Clipped polynomial response vector for one source at position x."""
        self._check_window(x)
        t = self._rescale(x)
        vals = np.polynomial.polynomial.polyval(t, self._coeffs(source_id).T)
        n_clipped = int(np.count_nonzero((vals < 0) | (vals > 1)))
        if n_clipped:
            self.clip_count += n_clipped
            vals = np.clip(vals, 0.0, 1.0)
        return vals

    def fractions_derivative(self, source_id, x):
        """d/dx of the response; 0 wherever the clip is active."""
        self._check_window(x, strict=True)
        t = self._rescale(x)
        raw = np.polynomial.polynomial.polyval(t, self._coeffs(source_id).T)
        dvals = np.polynomial.polynomial.polyval(t, self._dcurves[source_id].T) / self._halfspan
        clipped = (raw < 0) | (raw > 1)
        if np.any(clipped):
            self.clip_count += int(np.count_nonzero(clipped))
            dvals = np.where(clipped, 0.0, dvals)
        return np.atleast_1d(dvals)

    def merge(self, other: "SourceResponseModel") -> "SourceResponseModel":
        """Combine two single-source fits over the same window and modes."""
        if other.window != self.window or other.modes != self.modes or other.degree != self.degree:
            raise DualSpadeError("cannot merge models with different windows/modes/degree")
        curves = {**self.curves, **other.curves}
        rms = {**self.residual_rms, **other.residual_rms}
        flagged = {**self.flagged, **other.flagged}
        return SourceResponseModel(self.window, self.degree, self.modes, curves, rms, flagged)

    def aliased(self) -> "SourceResponseModel":
        """Indistinguishable-source model: source 2 curves alias source 1."""
        base = self._coeffs(1)
        return SourceResponseModel(
            self.window,
            self.degree,
            self.modes,
            {1: base, 2: base},
            {1: self.residual_rms[1], 2: self.residual_rms[1]},
            {1: self.flagged.get(1, []), 2: self.flagged.get(1, [])},
        )

    def to_json(self):
        return json.dumps(
            {
                "window": list(self.window),
                "degree": self.degree,
                "modes": [list(m) for m in self.modes],
                "curves": {str(s): c.tolist() for s, c in self.curves.items()},
                "residual_rms": {str(s): r.tolist() for s, r in self.residual_rms.items()},
                "flagged": {str(s): list(f) for s, f in self.flagged.items()},
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(
            tuple(doc["window"]),
            doc["degree"],
            [tuple(m) for m in doc["modes"]],
            {int(s): np.array(c) for s, c in doc["curves"].items()},
            {int(s): np.array(r) for s, r in doc["residual_rms"].items()},
            {int(s): list(f) for s, f in doc.get("flagged", {}).items()},
        )


def fit_scan(scan: CalibrationScan, degree=DEFAULT_DEGREE, rms_gate=RMS_GATE) -> SourceResponseModel:
    """Least-squares polynomial fit of one scan, per mode, on a rescaled abscissa."""
    n = scan.positions.size
    if n < degree + 5:
        raise InsufficientPointsError(f"{n} points for degree {degree} (need >= {degree + 5})")
    lo, hi = float(scan.positions[0]), float(scan.positions[-1])
    t = (scan.positions - 0.5 * (lo + hi)) / (0.5 * (hi - lo))
    vander = np.polynomial.polynomial.polyvander(t, degree)
    cond = np.linalg.cond(vander)
    if cond * cond > CONDITION_LIMIT:
        raise IllConditionedError(f"normal-system condition estimate {cond**2:.3e} exceeds {CONDITION_LIMIT:.0e}")
    coeffs, *_ = np.linalg.lstsq(vander, scan.fractions, rcond=None)
    resid = scan.fractions - vander @ coeffs
    rms = np.sqrt(np.mean(resid**2, axis=0))
    flagged = [scan.modes[i].label for i in np.flatnonzero(rms > rms_gate)]
    return SourceResponseModel(
        (lo, hi),
        degree,
        scan.modes,
        {scan.source_id: coeffs.T},
        {scan.source_id: rms},
        {scan.source_id: flagged},
    )


def eval_response(model: SourceResponseModel, source_id, mode_index, x):
    """Clipped fraction of one curve at position x (closed window)."""
    return float(model.fractions(source_id, x)[mode_index])


def eval_response_derivative(model: SourceResponseModel, source_id, mode_index, x):
    """Analytic d/dx of one curve at position x (open window)."""
    return float(model.fractions_derivative(source_id, x)[mode_index])


def visibility(model: SourceResponseModel, n_grid=2001):
    """Overlap measure between the two sources' curves: 1 for identical curves.

    Defined as 1 minus the largest per-mode L2-normalized curve difference on
    the common window, with each difference normalized by the mean of the two
    curve norms.
    """
    if 1 not in model.curves or 2 not in model.curves:
        raise MissingSourceError("visibility requires both sources fitted")
    xs = np.linspace(model.window[0], model.window[1], n_grid)
    t = model._rescale(xs)
    v1 = np.clip(np.polynomial.polynomial.polyval(t, model.curves[1].T), 0.0, 1.0)
    v2 = np.clip(np.polynomial.polynomial.polyval(t, model.curves[2].T), 0.0, 1.0)
    dx = xs[1] - xs[0]
    diff = np.sqrt(np.trapezoid((v1 - v2) ** 2, dx=dx, axis=-1))
    norm = 0.5 * (
        np.sqrt(np.trapezoid(v1**2, dx=dx, axis=-1)) + np.sqrt(np.trapezoid(v2**2, dx=dx, axis=-1))
    )
    rel = np.where(norm > 0, diff / np.where(norm > 0, norm, 1.0), 0.0)
    return float(1.0 - rel.max())


CSV_HEADER_PREFIX = ("source_id", "position_w0")


def write_scan_csv(path, scans):
    """Write calibration scans to CSV: source_id, position_w0, one column per mode."""
    scans = list(scans)
    modes = scans[0].modes
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(CSV_HEADER_PREFIX) + [m.label for m in modes])
        for scan in scans:
            if scan.modes != modes:
                raise DualSpadeError("all scans in one file must share the same mode set")
            for pos, row in zip(scan.positions, scan.fractions):
                writer.writerow([scan.source_id, repr(float(pos))] + [repr(float(v)) for v in row])


def read_scan_csv(path):
    """Read calibration scans from CSV, one CalibrationScan per source_id."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[:2]) != CSV_HEADER_PREFIX:
            raise DualSpadeError(f"unexpected calibration CSV header in {path}")
        modes = tuple(_parse_mode_label(lbl) for lbl in header[2:])
        rows = {}
        for rec in reader:
            sid = int(rec[0])
            rows.setdefault(sid, []).append([float(v) for v in rec[1:]])
    scans = []
    for sid in sorted(rows):
        data = np.array(rows[sid])
        order = np.argsort(data[:, 0])
        data = data[order]
        scans.append(CalibrationScan(sid, data[:, 0], data[:, 1:], modes))
    return scans


def _parse_mode_label(label):
    # "m1_hg30" -> ModeId(1, 3)
    try:
        demux = int(label[1])
        order = int(label.split("_hg")[1][:-1])
        return ModeId(demux, order)
    except (ValueError, IndexError):
        raise DualSpadeError(f"cannot parse mode column {label!r}") from None
