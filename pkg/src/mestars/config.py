"""Scalar configuration records shared by every layer of the toolkit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class ValidationError(ValueError):
    """Invalid configuration or scenario content.

    ``path`` is a dotted field path (``geometry.users[2].region``) so that
    callers can point at the offending entry of a scenario file.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    return 10.0 * math.log10(watts) + 30.0


@dataclass(frozen=True)
class AbsorptionTable:
    """Piecewise-constant medium absorption factor K_abs(f).

    ``edges`` are ascending start frequencies; the value at ``f`` is the
    entry of the last edge not above ``f`` and zero below the first edge.
    The empty table is zero everywhere.
    """

    edges: tuple[float, ...] = ()
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.edges) != len(self.values):
            raise ValidationError("system.absorption", "edges and values differ in length")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValidationError("system.absorption", "edges must be strictly increasing")
        if any(v < 0 for v in self.values):
            raise ValidationError("system.absorption", "absorption must be non-negative")

    @classmethod
    def from_pairs(cls, pairs: Sequence[Sequence[float]]) -> "AbsorptionTable":
        pairs = sorted((float(f), float(k)) for f, k in pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    def to_pairs(self) -> list[list[float]]:
        return [[f, k] for f, k in zip(self.edges, self.values)]

    def __call__(self, f):
        f_arr = np.asarray(f, dtype=float)
        if not self.edges:
            return np.zeros_like(f_arr) if f_arr.ndim else 0.0
        vals = np.concatenate([[0.0], self.values])
        idx = np.searchsorted(self.edges, f_arr, side="right")
        out = vals[idx]
        return out if f_arr.ndim else float(out)


@dataclass(frozen=True)
class SystemConfig:
    n_antennas: int
    n_elements: int
    n_users: int
    n_subcarriers: int
    center_freq_hz: float
    bandwidth_hz: float
    max_power_w: float
    noise_power_w: float
    aperture_m: float
    min_spacing_m: float
    bs_antenna_spacing_m: float
    absorption: AbsorptionTable = field(default_factory=AbsorptionTable)

    def __post_init__(self):
        for name in ("n_antennas", "n_elements", "n_users", "n_subcarriers"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValidationError(f"system.{name}", f"must be an integer >= 1, got {v!r}")
        if not self.bandwidth_hz >= 0:
            raise ValidationError("system.bandwidth_hz", "must be non-negative")
        if not self.center_freq_hz > self.bandwidth_hz / 2:
            raise ValidationError("system.center_freq_hz", "must exceed half the bandwidth")
        for name in ("max_power_w", "noise_power_w", "aperture_m", "bs_antenna_spacing_m"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"system.{name}", "must be positive")
        if not self.min_spacing_m >= 0:
            raise ValidationError("system.min_spacing_m", "must be non-negative")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.center_freq_hz

    @property
    def power_per_subcarrier(self) -> float:
        return self.max_power_w / self.n_subcarriers


@dataclass(frozen=True)
class BcdConfig:
    """Inner-layer settings: convergence threshold, randomizations, iteration cap."""

    convergence_eps: float = 1e-3
    n_randomizations: int = 200
    max_outer_bcd_iters: int = 50
    sdp_tol: float = 1e-7

    def __post_init__(self):
        if not self.convergence_eps > 0:
            raise ValidationError("bcd.convergence_eps", "must be positive")
        if self.n_randomizations < 1:
            raise ValidationError("bcd.n_randomizations", "must be >= 1")
        if self.max_outer_bcd_iters < 1:
            raise ValidationError("bcd.max_outer_bcd_iters", "must be >= 1")


@dataclass(frozen=True)
class SwarmConfig:
    """Outer-layer PSO settings.

    ``penalty_weight=None`` means "100 times a pilot rate estimate", resolved
    at run time. ``bcd_iters_cap`` bounds the inner iterations spent on each
    fitness call; the final global best is re-solved without the cap.
    """

    n_particles: int = 20
    max_iters: int = 100
    c1: float = 2.0
    c2: float = 2.0
    omega_max: float = 1.0
    omega_min: float = 0.2
    penalty_weight: float | None = None
    seed: int = 0
    bcd_iters_cap: int = 20
    synchronous: bool = False

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValidationError("swarm.n_particles", "must be >= 1")
        if self.max_iters < 1:
            raise ValidationError("swarm.max_iters", "must be >= 1")
        if not self.omega_max >= self.omega_min >= 0:
            raise ValidationError("swarm.omega_max", "need omega_max >= omega_min >= 0")
        if self.penalty_weight is not None and not self.penalty_weight > 0:
            raise ValidationError("swarm.penalty_weight", "must be positive")
        if self.bcd_iters_cap < 1:
            raise ValidationError("swarm.bcd_iters_cap", "must be >= 1")
