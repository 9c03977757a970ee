"""LoS wideband channels: far-field BS-to-surface, near-field surface-to-user.

``F_l = sqrt(MN) alpha_0 a_S a_B^H`` keeps the 1/sqrt(M), 1/sqrt(N) factors
inside the steering vectors, so every entry of ``F_l`` has modulus
``alpha_0``. User channels take their amplitude from the centre distance and
their phases from the exact per-element distances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .config import SPEED_OF_LIGHT, AbsorptionTable, SystemConfig
from .scenario import Geometry, IncidenceAngles, Scenario, UserSpec, incidence_angles

_ZERO_ABSORPTION = AbsorptionTable()


def path_gain(f, dist, absorption: AbsorptionTable | None = None):
    """Free-space amplitude c/(4 pi f d) times exp(-K_abs(f) d / 2)."""
    f = np.asarray(f, dtype=float)
    dist = np.asarray(dist, dtype=float)
    if np.any(dist <= 0):
        raise ValueError("path_gain needs a positive distance")
    if np.any(f <= 0):
        raise ValueError("path_gain needs a positive frequency")
    k_abs = (absorption or _ZERO_ABSORPTION)(f)
    out = SPEED_OF_LIGHT / (4 * np.pi * f * dist) * np.exp(-0.5 * k_abs * dist)
    return out if out.ndim else float(out)


def bs_steering(phi_d: float, f: float, n: int, spacing: float) -> np.ndarray:
    i = np.arange(n)
    return np.exp(-2j * np.pi * f * spacing / SPEED_OF_LIGHT * i * np.sin(phi_d)) / np.sqrt(n)


def stars_steering(offsets, angles: IncidenceAngles, f: float) -> np.ndarray:
    """Planar-array response for local offsets ``(x_m, z_m)``."""
    off = np.asarray(offsets, dtype=float)
    proj = off[:, 0] * angles.x_factor + off[:, 1] * angles.z_factor
    return np.exp(-2j * np.pi * f / SPEED_OF_LIGHT * proj) / np.sqrt(len(off))


def element_positions(offsets, center) -> np.ndarray:
    off = np.asarray(offsets, dtype=float)
    c = np.asarray(center, dtype=float)
    return np.column_stack([c[0] + off[:, 0], np.full(len(off), c[1]), c[2] + off[:, 1]])


def bs_to_stars_channel(geom: Geometry, offsets, f: float, cfg: SystemConfig,
                        angles: IncidenceAngles | None = None) -> np.ndarray:
    angles = angles or incidence_angles(geom)
    d_bs = float(np.linalg.norm(np.subtract(geom.bs_position, geom.stars_center)))
    m = len(offsets)
    a_s = stars_steering(offsets, angles, f)
    a_b = bs_steering(angles.departure_rad, f, cfg.n_antennas, cfg.bs_antenna_spacing_m)
    alpha0 = path_gain(f, d_bs, cfg.absorption)
    return np.sqrt(m * cfg.n_antennas) * alpha0 * np.outer(a_s, a_b.conj())


def stars_to_user_channel(offsets, user: UserSpec, center, f: float, cfg: SystemConfig) -> np.ndarray:
    p = np.asarray(user.position, dtype=float)
    dists = np.linalg.norm(p - element_positions(offsets, center), axis=1)
    if np.any(dists == 0):
        raise ValueError("user coincides with a surface element")
    alpha = path_gain(f, float(np.linalg.norm(p - np.asarray(center, dtype=float))), cfg.absorption)
    return alpha * np.exp(-2j * np.pi * f / SPEED_OF_LIGHT * dists)


@dataclass(frozen=True, eq=False)
class ChannelSet:
    """Per-subcarrier channels.

    Shapes: ``bs_to_stars`` (L, M, N), ``stars_to_user`` (L, K, M),
    ``cascaded`` (L, K, M, N) with ``cascaded[l, k] = diag(h_lk) F_l``.
    ``transmission`` flags users served by the transmission coefficients.
    """

    frequencies: np.ndarray
    bs_to_stars: np.ndarray
    stars_to_user: np.ndarray
    transmission: np.ndarray

    @property
    def cascaded(self) -> np.ndarray:
        return self.stars_to_user[:, :, :, None] * self.bs_to_stars[:, None, :, :]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        """(L, K, M, N)."""
        l, k, m = self.stars_to_user.shape
        return l, k, m, self.bs_to_stars.shape[2]

    def check(self, rtol: float = 1e-12):
        casc = self.cascaded
        for l in range(casc.shape[0]):
            for k in range(casc.shape[1]):
                ref = np.diag(self.stars_to_user[l, k]) @ self.bs_to_stars[l]
                scale = np.max(np.abs(ref))
                if np.max(np.abs(casc[l, k] - ref)) > rtol * scale:
                    raise AssertionError(f"cascaded[{l}][{k}] != diag(h) F")
        for name in ("bs_to_stars", "stars_to_user"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise AssertionError(f"{name} has non-finite entries")

    def to_json(self) -> str:
        """Debug dump; complex arrays become ``[..., [re, im]]`` nested lists."""
        def interleave(a):
            return np.stack([a.real, a.imag], axis=-1).tolist()

        return json.dumps({
            "frequencies": self.frequencies.tolist(),
            "bs_to_stars": interleave(self.bs_to_stars),
            "stars_to_user": interleave(self.stars_to_user),
            "transmission": self.transmission.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "ChannelSet":
        d = json.loads(text)

        def join(a):
            a = np.asarray(a, dtype=float)
            return a[..., 0] + 1j * a[..., 1]

        return cls(np.asarray(d["frequencies"]), join(d["bs_to_stars"]), join(d["stars_to_user"]),
                   np.asarray(d["transmission"], dtype=bool))


def assemble_channels(scenario: Scenario, offsets=None) -> ChannelSet:
    """All per-subcarrier channels for the given (or the scenario's) element offsets."""
    offsets = scenario.layout.offsets if offsets is None else np.asarray(offsets, dtype=float)
    cfg = scenario.system
    geom = scenario.geometry
    angles = incidence_angles(geom)
    freqs = scenario.frequencies
    center = np.asarray(geom.stars_center, dtype=float)
    m, n = len(offsets), cfg.n_antennas

    # F_l for all l at once
    proj = offsets[:, 0] * angles.x_factor + offsets[:, 1] * angles.z_factor
    k0 = 2 * np.pi * freqs / SPEED_OF_LIGHT
    a_s = np.exp(-1j * k0[:, None] * proj[None, :]) / np.sqrt(m)
    a_b = np.exp(-1j * k0[:, None] * cfg.bs_antenna_spacing_m * np.arange(n)[None, :]
                 * np.sin(angles.departure_rad)) / np.sqrt(n)
    d_bs = float(np.linalg.norm(np.subtract(geom.bs_position, center)))
    alpha0 = np.atleast_1d(path_gain(freqs, d_bs, cfg.absorption))
    f_mats = np.sqrt(m * n) * alpha0[:, None, None] * a_s[:, :, None] * a_b.conj()[:, None, :]

    elems = element_positions(offsets, center)
    users = np.array([u.position for u in geom.users], dtype=float)
    dists = np.linalg.norm(users[:, None, :] - elems[None, :, :], axis=2)
    if np.any(dists == 0):
        raise ValueError("a user coincides with a surface element")
    d_center = np.linalg.norm(users - center, axis=1)
    alpha = path_gain(freqs[:, None], d_center[None, :], cfg.absorption)
    h = alpha[:, :, None] * np.exp(-1j * k0[:, None, None] * dists[None, :, :])
    transmission = np.array([u.is_transmission for u in geom.users], dtype=bool)
    return ChannelSet(freqs, f_mats, h, transmission)
