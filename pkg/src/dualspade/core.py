"""Shared domain vocabulary: scenes, demultiplexer layouts, observations.

All lengths are expressed in units of the fundamental mode waist w0. The
conversion to physical units (w0 = 320 um for the hardware this models)
happens only at the CLI boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

EPS_NORM = 1e-6


class DualSpadeError(Exception):
    """Base class for all typed errors raised by this package."""


class OutOfRangeError(DualSpadeError):
    def __init__(self, fieldname, value, message=None):
        self.fieldname = fieldname
        self.value = value
        super().__init__(message or f"{fieldname}={value!r} out of range")


class DegenerateSceneError(DualSpadeError):
    pass


class LayoutError(DualSpadeError):
    pass


class OutOfWindowError(DualSpadeError):
    pass


class ModeId(NamedTuple):
    """One measured output channel: HG_{order,0} of demultiplexer `demux`."""

    demux: int
    order: int

    @property
    def label(self):
        return f"m{self.demux}_hg{self.order}0"


# Four lowest horizontal modes of demux 1 plus HG10 of the shifted demux 2.
DEFAULT_ACTIVE_MODES = (
    ModeId(1, 0),
    ModeId(1, 1),
    ModeId(1, 2),
    ModeId(1, 3),
    ModeId(2, 1),
)


@dataclass(frozen=True)
class DemuxLayout:
    """Geometry and power split of one or two mode demultiplexers.

    `shift2` is the lateral shift of the second demultiplexer and `split1`
    the fraction of the total light sent to demux 1.  `symmetric` restricts
    scenes to d >= 0 (the indistinguishable-source convention, where the
    problem is rigorously symmetric under d -> -d).
    """

    waist: float = 1.0
    shift2: float = 0.3
    split1: float = 0.5
    active_modes: tuple[ModeId, ...] = DEFAULT_ACTIVE_MODES
    dual: bool = True
    d_max: float = 0.5
    c_max: float = 0.3
    symmetric: bool = False

    def __post_init__(self):
        if self.waist <= 0:
            raise LayoutError("waist must be positive")
        if not 0 < self.split1 <= 1:
            raise LayoutError(f"split1={self.split1} not in (0, 1]")
        if self.dual and self.split1 == 1.0:
            raise LayoutError("dual layout requires split1 < 1")
        if not self.dual and self.split1 != 1.0:
            raise LayoutError("single layout requires split1 = 1")
        modes = tuple(ModeId(*m) for m in self.active_modes)
        object.__setattr__(self, "active_modes", modes)
        if not modes:
            raise LayoutError("active_modes must be non-empty")
        if len(set(modes)) != len(modes):
            raise LayoutError("active_modes contains duplicates")
        for m in modes:
            if m.demux not in (1, 2):
                raise LayoutError(f"unknown demux index {m.demux}")
            if m.order < 0:
                raise LayoutError(f"negative mode order {m.order}")
            if m.demux == 2 and not self.dual:
                raise LayoutError("demux 2 mode in a single-demux layout")

    @classmethod
    def dual_default(cls, **kw):
        return cls(**kw)

    @classmethod
    def single(cls, orders=(0, 1, 2, 3), **kw):
        modes = tuple(ModeId(1, n) for n in orders)
        kw.setdefault("shift2", 0.0)
        kw.setdefault("split1", 1.0)
        return cls(active_modes=modes, dual=False, **kw)

    @property
    def split2(self):
        return 1.0 - self.split1

    @property
    def n_modes(self):
        return len(self.active_modes)

    @property
    def mode_labels(self):
        return tuple(m.label for m in self.active_modes)

    def mode_shift(self, mode: ModeId):
        return 0.0 if mode.demux == 1 else self.shift2

    def mode_split(self, mode: ModeId):
        return self.split1 if mode.demux == 1 else self.split2

    def with_symmetric(self, symmetric=True):
        return replace(self, symmetric=symmetric)

    def to_dict(self):
        return {
            "waist": self.waist,
            "shift2": self.shift2,
            "split1": self.split1,
            "active_modes": [list(m) for m in self.active_modes],
            "dual": self.dual,
            "d_max": self.d_max,
            "c_max": self.c_max,
            "symmetric": self.symmetric,
        }

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        doc["active_modes"] = tuple(ModeId(*m) for m in doc["active_modes"])
        return cls(**doc)


@dataclass(frozen=True)
class Scene:
    """Two incoherent sources at positions c -/+ d/2 with brightness p, 1-p.

    p is the brightness of the source at c - d/2.  All values in w0 units.
    """

    d: float
    c: float
    p: float

    def as_array(self):
        return np.array([self.d, self.c, self.p], dtype=float)

    @property
    def x1(self):
        return self.c - self.d / 2.0

    @property
    def x2(self):
        return self.c + self.d / 2.0

    def to_dict(self):
        return {"d": self.d, "c": self.c, "p": self.p}

    @classmethod
    def from_dict(cls, doc):
        return cls(float(doc["d"]), float(doc["c"]), float(doc["p"]))


def validate_scene(raw, layout: DemuxLayout) -> Scene:
    """Build a Scene from a (d, c, p) triple, enforcing all invariants."""
    d, c, p = (float(v) for v in raw)
    if not (math.isfinite(d) and math.isfinite(c) and math.isfinite(p)):
        raise OutOfRangeError("theta", raw, "non-finite scene parameter")
    if not 0.0 < p < 1.0:
        raise DegenerateSceneError(
            f"p={p} degenerates to a one-source scene (p must be strictly inside (0, 1))"
        )
    if abs(d) > layout.d_max:
        raise OutOfRangeError("d", d, f"|d| exceeds d_max={layout.d_max}")
    if layout.symmetric and d < 0:
        raise OutOfRangeError("d", d, "negative d in symmetric (d >= 0) mode")
    if abs(c) > layout.c_max:
        raise OutOfRangeError("c", c, f"|c| exceeds c_max={layout.c_max}")
    return Scene(d, c, p)


@dataclass(frozen=True)
class PhotonBudget:
    """Expected number of signal photons per time bin."""

    n_total: float = 1e11

    def __post_init__(self):
        if not self.n_total > 0:
            raise OutOfRangeError("n_total", self.n_total)


@dataclass(frozen=True)
class ObservationSeries:
    """Time-binned normalized intensity-fraction vectors.

    `bins` has shape (n_bins, M).  Entries are fractions of total measured
    power; rows need not sum to 1 (most photons can sit in unmeasured modes,
    notably HG00 of the shifted demux).
    """

    bins: np.ndarray
    bin_duration: float = 1e-4
    photon_budget: float = 1e11

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=float)
        if bins.ndim != 2:
            raise OutOfRangeError("bins", bins.shape, "bins must be 2-D (n_bins, M)")
        if np.any(bins < 0):
            raise OutOfRangeError("bins", float(bins.min()), "negative fraction")
        if np.any(bins > 1.0 + EPS_NORM):
            raise OutOfRangeError("bins", float(bins.max()), "fraction exceeds 1")
        bins = bins.copy()
        bins.setflags(write=False)
        object.__setattr__(self, "bins", bins)

    @property
    def n_bins(self):
        return self.bins.shape[0]

    @property
    def n_modes(self):
        return self.bins.shape[1]
