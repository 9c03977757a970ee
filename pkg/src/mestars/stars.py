"""Element movement modes, ES coefficients and spacing feasibility.

Element positions are stored as local in-plane offsets ``(x_m, z_m)`` from
the surface centre; the surface lies in the plane ``y = centre.y``.

Free coordinates per mode (the PSO encoding):

* ``RB``: ``[x_1, z_1, ..., x_M, z_M]``, both in ``[-A/2, A/2]``
* ``HB``: ``[x_1, ..., x_M]``; ``z_m`` fixed by the element's horizontal track
* ``VB``: ``[z_1, ..., z_M]``; ``x_m`` fixed by the element's vertical track
* ``DB``: ``[x_1, ..., x_M]``; ``z_m = x_m + delta_m`` on diagonal track ``m``
* ``FP``: none (positions are immutable)
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .config import SystemConfig, ValidationError


class Mode(str, enum.Enum):
    RB = "RB"
    HB = "HB"
    VB = "VB"
    DB = "DB"
    FP = "FP"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValidationError("layout.mode", f"unknown mode {value!r}") from None


class LayoutError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ElementLayout:
    """Movement mode plus per-element offsets and track parameters.

    ``track_index`` / ``track_count`` / ``track_spacing`` describe the
    horizontal (HB) or vertical (VB) slides; ``diag_offsets`` holds the
    per-element diagonal constants for DB.
    """

    mode: Mode
    offsets: np.ndarray
    aperture: float
    track_index: tuple[int, ...] | None = None
    track_count: int | None = None
    track_spacing: float | None = None
    diag_offsets: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        off = _frozen(self.offsets)
        if off.ndim != 2 or off.shape[1] != 2:
            raise LayoutError(f"offsets must have shape (M, 2), got {off.shape}")
        object.__setattr__(self, "offsets", off)
        half = self.aperture / 2
        if np.any(np.abs(off) > half * (1 + 1e-12)):
            raise LayoutError("element offset outside the square aperture")
        if self.mode in (Mode.HB, Mode.VB):
            if self.track_index is None or self.track_count is None or self.track_spacing is None:
                raise LayoutError(f"{self.mode.value} layout needs track parameters")
            fixed = self._track_coordinate()
            col = 1 if self.mode is Mode.HB else 0
            if not np.array_equal(off[:, col], fixed):
                raise LayoutError("offsets do not lie on their tracks")
        if self.mode is Mode.DB:
            if self.diag_offsets is None or len(self.diag_offsets) != len(off):
                raise LayoutError("DB layout needs one diagonal offset per element")
            if not np.array_equal(off[:, 1], off[:, 0] + np.asarray(self.diag_offsets)):
                raise LayoutError("offsets do not lie on their diagonal tracks")

    @property
    def n_elements(self) -> int:
        return len(self.offsets)

    def _track_coordinate(self) -> np.ndarray:
        idx = np.asarray(self.track_index, dtype=float)
        return (idx - (self.track_count + 1) / 2) * self.track_spacing

    def free_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-coordinate lower/upper bounds of the free coordinates."""
        half = self.aperture / 2
        m = self.n_elements
        if self.mode is Mode.RB:
            return np.full(2 * m, -half), np.full(2 * m, half)
        if self.mode in (Mode.HB, Mode.VB):
            return np.full(m, -half), np.full(m, half)
        if self.mode is Mode.DB:
            d = np.asarray(self.diag_offsets)
            return np.maximum(-half, -half - d), np.minimum(half, half - d)
        return np.empty(0), np.empty(0)

    def encoding(self) -> np.ndarray:
        if self.mode is Mode.RB:
            return self.offsets.reshape(-1).copy()
        if self.mode in (Mode.HB, Mode.DB):
            return self.offsets[:, 0].copy()
        if self.mode is Mode.VB:
            return self.offsets[:, 1].copy()
        return np.empty(0)

    def positions(self, center) -> np.ndarray:
        """Global (M, 3) element coordinates for a surface centred at ``center``."""
        c = np.asarray(center, dtype=float)
        out = np.empty((self.n_elements, 3))
        out[:, 0] = c[0] + self.offsets[:, 0]
        out[:, 1] = c[1]
        out[:, 2] = c[2] + self.offsets[:, 1]
        return out

    def to_dict(self) -> dict:
        d = {"mode": self.mode.value, "offsets": self.offsets.tolist()}
        if self.mode in (Mode.HB, Mode.VB):
            d["track_count"] = self.track_count
            d["track_index"] = list(self.track_index)
            d["track_spacing"] = self.track_spacing
        if self.mode is Mode.DB:
            d["diag_offsets"] = list(self.diag_offsets)
        return d

    @classmethod
    def from_dict(cls, d: dict, aperture: float) -> "ElementLayout":
        def opt_tuple(key, conv):
            v = d.get(key)
            return None if v is None else tuple(conv(x) for x in v)

        return cls(
            mode=Mode.parse(d["mode"]),
            offsets=np.asarray(d["offsets"], dtype=float),
            aperture=aperture,
            track_index=opt_tuple("track_index", int),
            track_count=d.get("track_count"),
            track_spacing=d.get("track_spacing"),
            diag_offsets=opt_tuple("diag_offsets", float),
        )


def _grid_shape(m: int) -> tuple[int, int]:
    rows = max(r for r in range(1, math.isqrt(m) + 1) if m % r == 0)
    return rows, m // rows


GRID_PITCH_WAVELENGTHS = 2.0


def default_layout(mode, cfg: SystemConfig, pitch: float | None = None) -> ElementLayout:
    """Initial layout of a mode.

    RB and FP use a centred rectangular grid at ``pitch`` (default two
    centre-frequency wavelengths, see ``GRID_PITCH_WAVELENGTHS``); HB/VB
    put one element on each of ``M`` equally spaced tracks (spacing ``A/M``)
    at the track centre; DB puts one element at the midpoint of each of
    ``M`` parallel diagonals whose offsets are spaced ``A/M`` apart.
    """
    mode = Mode.parse(mode)
    m, a = cfg.n_elements, cfg.aperture_m
    ticks = (np.arange(1, m + 1) - (m + 1) / 2) * (a / m)
    if mode in (Mode.RB, Mode.FP):
        rows, cols = _grid_shape(m)
        pitch = GRID_PITCH_WAVELENGTHS * cfg.wavelength if pitch is None else float(pitch)
        if max(rows - 1, cols - 1) * pitch > a:
            raise LayoutError(f"{m} elements at pitch {pitch:.4g} m do not fit in A={a} m")
        xs = (np.arange(cols) - (cols - 1) / 2) * pitch
        zs = (np.arange(rows) - (rows - 1) / 2) * pitch
        xx, zz = np.meshgrid(xs, zs)
        layout = ElementLayout(mode, np.column_stack([xx.ravel(), zz.ravel()]), a)
    elif mode is Mode.HB:
        layout = ElementLayout(mode, np.column_stack([np.zeros(m), ticks]), a,
                               tuple(range(1, m + 1)), m, a / m)
    elif mode is Mode.VB:
        layout = ElementLayout(mode, np.column_stack([ticks, np.zeros(m)]), a,
                               tuple(range(1, m + 1)), m, a / m)
    else:
        x = -ticks / 2
        layout = ElementLayout(mode, np.column_stack([x, x + ticks]), a,
                               diag_offsets=tuple(ticks))
    if min_distance_violations(layout.offsets, cfg.min_spacing_m):
        raise LayoutError(f"default {mode.value} layout violates d_min={cfg.min_spacing_m}")
    return layout


def clamp_to_mode(layout: ElementLayout, proposed) -> ElementLayout:
    """Project proposed free coordinates onto the mode's feasible set."""
    if layout.mode is Mode.FP:
        raise LayoutError("FP elements are immovable")
    p = np.asarray(proposed, dtype=float).reshape(-1)
    lo, hi = layout.free_bounds()
    if p.shape != lo.shape:
        raise LayoutError(f"{layout.mode.value} expects {lo.size} free coordinates, got {p.size}")
    p = np.clip(p, lo, hi)
    off = np.array(layout.offsets)
    if layout.mode is Mode.RB:
        off = p.reshape(-1, 2)
    elif layout.mode is Mode.HB:
        off[:, 0] = p
    elif layout.mode is Mode.VB:
        off[:, 1] = p
    else:
        off[:, 0] = p
        off[:, 1] = p + np.asarray(layout.diag_offsets)
    return ElementLayout(layout.mode, off, layout.aperture, layout.track_index,
                         layout.track_count, layout.track_spacing, layout.diag_offsets)


def min_distance_violations(positions, d_min: float) -> int:
    """Number of unordered element pairs closer than ``d_min`` (strict)."""
    p = np.asarray(positions, dtype=float)
    if len(p) < 2:
        return 0
    return int(np.count_nonzero(pdist(p) < d_min))


def wrap_phase(theta) -> np.ndarray:
    """Reduce to ``[0, 2pi)``; ``np.mod`` alone maps tiny negatives to ``2pi``."""
    t = np.mod(np.asarray(theta, dtype=float), 2 * np.pi)
    return np.where(t >= 2 * np.pi, 0.0, t)


@dataclass(frozen=True, eq=False)
class StarsCoefficients:
    """ES-protocol coefficients: amplitudes sqrt(beta) and phases in [0, 2pi)."""

    amp_t: np.ndarray
    amp_r: np.ndarray
    phase_t: np.ndarray
    phase_r: np.ndarray

    def __post_init__(self):
        for name in ("amp_t", "amp_r"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        for name in ("phase_t", "phase_r"):
            object.__setattr__(self, name, _frozen(wrap_phase(getattr(self, name))))
        if np.any(self.amp_t < 0) or np.any(self.amp_r < 0) or np.any(self.amp_t > 1 + 1e-12) \
                or np.any(self.amp_r > 1 + 1e-12):
            raise ValueError("amplitudes must lie in [0, 1]")
        energy = self.amp_t ** 2 + self.amp_r ** 2
        if np.max(np.abs(energy - 1), initial=0.0) > 1e-9:
            raise ValueError("ES violated: amp_t^2 + amp_r^2 != 1")

    @property
    def n_elements(self) -> int:
        return len(self.amp_t)

    @classmethod
    def from_vectors(cls, u_t, u_r) -> "StarsCoefficients":
        u_t, u_r = np.asarray(u_t), np.asarray(u_r)
        return cls(np.abs(u_t), np.abs(u_r), np.angle(u_t), np.angle(u_r))

    def vectors(self) -> tuple[np.ndarray, np.ndarray]:
        """Tuning vectors ``u_t``, ``u_r`` (entries sqrt(beta) e^{j theta})."""
        return self.amp_t * np.exp(1j * self.phase_t), self.amp_r * np.exp(1j * self.phase_r)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("amp_t", "amp_r", "phase_t", "phase_r")}

    @classmethod
    def from_dict(cls, d: dict) -> "StarsCoefficients":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("amp_t", "amp_r", "phase_t", "phase_r")))


def coefficient_matrices(coeffs: StarsCoefficients) -> tuple[np.ndarray, np.ndarray]:
    u_t, u_r = coeffs.vectors()
    return np.diag(u_t), np.diag(u_r)
