"""Normalized array gain and beam-squint sweeps.

The frequency-independent residual of element ``m`` for a user at ``p`` is

    r_m = ||p - s_m|| + x_m sin(phi_A) sin(psi_A) + z_m cos(psi_A)

and the gain at frequency ``f`` with phases ``theta`` is
``|sum_m exp(-j 2 pi f r_m / c) exp(j theta_m)| / M``. Phases designed at
``f_c`` cancel the exponent there, so the gain elsewhere depends only on
``(f_c - f) r_m``. Amplitudes play no role here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import element_positions
from .config import SPEED_OF_LIGHT
from .scenario import IncidenceAngles, Scenario, subcarrier_grid
from .stars import ElementLayout, wrap_phase


def _user_position(user) -> np.ndarray:
    return np.asarray(getattr(user, "position", user), dtype=float)


def residuals(offsets, user, center, angles: IncidenceAngles) -> np.ndarray:
    """Per-element residual path lengths (meters)."""
    off = np.asarray(offsets, dtype=float)
    d = np.linalg.norm(_user_position(user) - element_positions(off, center), axis=1)
    return d + off[:, 0] * angles.x_factor + off[:, 1] * angles.z_factor


def residual_phase(offset_m, user, center, angles: IncidenceAngles) -> float:
    return float(residuals(np.reshape(offset_m, (1, 2)), user, center, angles)[0])


def center_frequency_phase_design(offsets, user, center, angles: IncidenceAngles, fc: float) -> np.ndarray:
    r = residuals(offsets, user, center, angles)
    return wrap_phase(2 * np.pi * fc / SPEED_OF_LIGHT * r)


def normalized_array_gain(offsets, phases, user, center, angles: IncidenceAngles, f):
    """Gain at one frequency (float) or at each of an array of frequencies."""
    r = residuals(offsets, user, center, angles)
    phases = np.asarray(phases, dtype=float)
    if phases.shape != r.shape:
        raise ValueError(f"need {r.size} phases, got {phases.size}")
    f_arr = np.asarray(f, dtype=float)
    expo = -2j * np.pi * np.multiply.outer(f_arr, r) / SPEED_OF_LIGHT + 1j * phases
    g = np.abs(np.exp(expo).sum(axis=-1)) / r.size
    return g if f_arr.ndim else float(g)


def band_gains(offsets, user, center, angles: IncidenceAngles, freqs, fc: float) -> np.ndarray:
    """Gains over ``freqs`` for phases designed at ``fc``."""
    phases = center_frequency_phase_design(offsets, user, center, angles, fc)
    return normalized_array_gain(offsets, phases, user, center, angles, freqs)


@dataclass
class GainCurve:
    frequencies: np.ndarray
    gains: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.gains = np.asarray(self.gains, dtype=float)
        if self.frequencies.shape != self.gains.shape:
            raise ValueError("frequencies and gains differ in length")
        if np.any(self.gains < 0) or np.any(self.gains > 1 + 1e-9):
            raise ValueError("gain outside [0, 1]")

    @property
    def min_gain(self) -> float:
        return float(self.gains.min())

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["freq_hz", "gain"])
            for f, g in zip(self.frequencies, self.gains):
                w.writerow([repr(float(f)), repr(float(g))])
        return path

    @classmethod
    def from_csv(cls, path, meta=None) -> "GainCurve":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], dict(meta or {}))


def squint_sweep(scenario: Scenario, layout: ElementLayout, user: int, bandwidths,
                 n_points: int = 101) -> list[GainCurve]:
    """One gain curve per bandwidth, phases designed at the centre frequency."""
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    fc = scenario.system.center_freq_hz
    angles = scenario.angles
    center = scenario.geometry.stars_center
    u = scenario.geometry.users[user]
    curves = []
    for bw in bandwidths:
        freqs = subcarrier_grid(fc, float(bw), n_points)
        gains = band_gains(layout.offsets, u, center, angles, freqs, fc)
        curves.append(GainCurve(freqs, np.minimum(gains, 1.0),
                                {"user": user, "mode": layout.mode.value, "bandwidth_hz": float(bw)}))
    return curves
