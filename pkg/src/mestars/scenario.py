"""Scenario geometry, subcarrier grid and scenario-file ingestion.

Angle convention
----------------
The surface lies in the x-z plane. With ``kappa`` the unit vector from the
surface centre toward the BS, the arrival angles are chosen so that

    sin(phi_A) * sin(psi_A) = kappa_x,    cos(psi_A) = kappa_z,

which makes the per-element plane-wave phase term
``x_m sin(phi_A) sin(psi_A) + z_m cos(psi_A)`` equal to the projection of
the element offset onto ``kappa``. Concretely ``psi_A = arccos(kappa_z)``
and ``phi_A = atan2(kappa_x, kappa_y) mod 2 pi``. Because ``psi_A`` must
stay in ``[-pi/2, pi/2]`` the BS may not sit below the surface centre.

The BS array is a ULA along the global z axis; ``phi_D`` is the angle
between the BS-to-surface direction and the array broadside plane.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .config import (
    SPEED_OF_LIGHT,
    AbsorptionTable,
    BcdConfig,
    SwarmConfig,
    SystemConfig,
    ValidationError,
    dbm_to_watts,
)
from .stars import ElementLayout, LayoutError, default_layout

TRANSMISSION = "transmission"
REFLECTION = "reflection"


class NearFieldWarning(UserWarning):
    pass


@dataclass(frozen=True)
class UserSpec:
    position: tuple[float, float, float]
    region: str

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        if self.region not in (TRANSMISSION, REFLECTION):
            raise ValidationError("region", f"must be {TRANSMISSION!r} or {REFLECTION!r}")

    @property
    def is_transmission(self) -> bool:
        return self.region == TRANSMISSION


@dataclass(frozen=True)
class UserDrop:
    """Uniform random placement in two half-discs around the surface centre.

    Users are drawn at the centre's height, uniformly in area over the
    annular half-disc ``min_radius_m <= r <= radius_m`` on each side.
    """

    n_transmission: int
    n_reflection: int
    radius_m: float = 2.0
    min_radius_m: float = 0.5

    def __post_init__(self):
        if self.n_transmission < 0 or self.n_reflection < 0 or self.n_transmission + self.n_reflection < 1:
            raise ValidationError("geometry.user_drop", "need at least one user")
        if not 0 < self.min_radius_m < self.radius_m:
            raise ValidationError("geometry.user_drop", "need 0 < min_radius_m < radius_m")


@dataclass(frozen=True)
class Geometry:
    bs_position: tuple[float, float, float]
    stars_center: tuple[float, float, float]
    users: tuple[UserSpec, ...]
    user_drop: UserDrop | None = None

    def __post_init__(self):
        object.__setattr__(self, "bs_position", tuple(float(v) for v in self.bs_position))
        object.__setattr__(self, "stars_center", tuple(float(v) for v in self.stars_center))
        object.__setattr__(self, "users", tuple(self.users))

    @property
    def reflection_sign(self) -> float:
        """Sign of ``y - centre.y`` on the BS (reflection) side."""
        return math.copysign(1.0, self.bs_position[1] - self.stars_center[1])

    def region_of(self, position) -> str:
        dy = position[1] - self.stars_center[1]
        return REFLECTION if dy * self.reflection_sign > 0 else TRANSMISSION

    def validate(self):
        b = np.asarray(self.bs_position)
        c = np.asarray(self.stars_center)
        if np.array_equal(b, c):
            raise ValidationError("geometry.bs_position", "coincides with stars_center")
        if b[1] == c[1]:
            raise ValidationError("geometry.bs_position", "BS lies in the surface plane")
        if b[2] < c[2]:
            raise ValidationError("geometry.bs_position",
                                  "BS below the surface centre has no elevation angle in [-pi/2, pi/2]")
        if not self.users:
            raise ValidationError("geometry.users", "at least one user is required")
        for i, u in enumerate(self.users):
            p = np.asarray(u.position)
            if np.array_equal(p, c):
                raise ValidationError(f"geometry.users[{i}].position", "coincides with stars_center")
            if p[1] == c[1]:
                raise ValidationError(f"geometry.users[{i}].position", "user lies in the surface plane")
            if self.region_of(p) != u.region:
                raise ValidationError(
                    f"geometry.users[{i}].region",
                    f"tagged {u.region!r} but the position is on the {self.region_of(p)} side",
                )


@dataclass(frozen=True)
class IncidenceAngles:
    azimuth_arrival_rad: float
    elevation_arrival_rad: float
    departure_rad: float

    @property
    def x_factor(self) -> float:
        """sin(phi_A) sin(psi_A): phase slope along the local x axis."""
        return math.sin(self.azimuth_arrival_rad) * math.sin(self.elevation_arrival_rad)

    @property
    def z_factor(self) -> float:
        """cos(psi_A): phase slope along the local z axis."""
        return math.cos(self.elevation_arrival_rad)


def incidence_angles(geometry: Geometry) -> IncidenceAngles:
    b = np.asarray(geometry.bs_position, dtype=float)
    c = np.asarray(geometry.stars_center, dtype=float)
    kappa = (b - c) / np.linalg.norm(b - c)
    if kappa[2] < 0:
        raise ValidationError("geometry.bs_position",
                              "BS below the surface centre has no elevation angle in [-pi/2, pi/2]")
    psi = math.acos(min(1.0, kappa[2]))
    if math.hypot(kappa[0], kappa[1]) < 1e-15:
        phi = 0.0
    else:
        phi = math.atan2(kappa[0], kappa[1]) % (2 * math.pi)
    phi_d = math.asin(max(-1.0, min(1.0, -kappa[2])))
    return IncidenceAngles(phi, psi, phi_d)


def subcarrier_grid(center_freq_hz: float, bandwidth_hz: float, n: int) -> np.ndarray:
    l = np.arange(1, n + 1)
    return center_freq_hz + (bandwidth_hz / n) * (l - (n + 1) / 2)


def subcarrier_frequencies(cfg: SystemConfig) -> np.ndarray:
    return subcarrier_grid(cfg.center_freq_hz, cfg.bandwidth_hz, cfg.n_subcarriers)


def rayleigh_distance(cfg: SystemConfig) -> float:
    """2 D^2 / lambda_c with D the diagonal of the square aperture."""
    d = cfg.aperture_m * math.sqrt(2.0)
    return 2.0 * d * d / cfg.wavelength


@dataclass(frozen=True)
class Scenario:
    system: SystemConfig
    geometry: Geometry
    layout: ElementLayout
    swarm: SwarmConfig = field(default_factory=SwarmConfig)
    bcd: BcdConfig = field(default_factory=BcdConfig)

    def validate(self, warn: bool = True) -> "Scenario":
        self.geometry.validate()
        if len(self.geometry.users) != self.system.n_users:
            raise ValidationError("system.n_users",
                                  f"is {self.system.n_users} but {len(self.geometry.users)} users are listed")
        if self.layout.n_elements != self.system.n_elements:
            raise ValidationError("layout.offsets",
                                  f"has {self.layout.n_elements} elements, system.n_elements is {self.system.n_elements}")
        if not math.isclose(self.layout.aperture, self.system.aperture_m):
            raise ValidationError("layout", "aperture differs from system.aperture_m")
        if warn:
            limit = rayleigh_distance(self.system)
            c = np.asarray(self.geometry.stars_center)
            for i, u in enumerate(self.geometry.users):
                dist = float(np.linalg.norm(np.asarray(u.position) - c))
                if dist > limit:
                    warnings.warn(f"user {i} at {dist:.1f} m is beyond the Rayleigh distance "
                                  f"{limit:.1f} m", NearFieldWarning, stacklevel=2)
        return self

    @property
    def angles(self) -> IncidenceAngles:
        return incidence_angles(self.geometry)

    @property
    def frequencies(self) -> np.ndarray:
        return subcarrier_frequencies(self.system)

    def with_layout(self, layout: ElementLayout) -> "Scenario":
        return dataclasses.replace(self, layout=layout)

    def with_mode(self, mode) -> "Scenario":
        return self.with_layout(default_layout(mode, self.system))

    def resized(self, **system_changes) -> "Scenario":
        """Copy with changed system fields; the layout is rebuilt when M or A change."""
        system = dataclasses.replace(self.system, **system_changes)
        layout = self.layout
        if system.n_elements != self.system.n_elements or system.aperture_m != self.system.aperture_m:
            layout = default_layout(self.layout.mode, system)
        return dataclasses.replace(self, system=system, layout=layout)

    def with_users(self, users) -> "Scenario":
        geometry = dataclasses.replace(self.geometry, users=tuple(users))
        system = dataclasses.replace(self.system, n_users=len(geometry.users))
        return dataclasses.replace(self, geometry=geometry, system=system)

    def with_random_users(self, seed: int, drop: UserDrop | None = None) -> "Scenario":
        drop = drop or self.geometry.user_drop
        if drop is None:
            raise ValidationError("geometry.user_drop", "no user drop defined")
        return self.with_users(drop_users(self.geometry, drop, seed))

    def to_dict(self) -> dict:
        return scenario_to_dict(self)

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps_scenario(self).encode()).hexdigest()


def drop_users(geometry: Geometry, drop: UserDrop, seed: int) -> list[UserSpec]:
    rng = np.random.default_rng(seed)
    c = np.asarray(geometry.stars_center)
    refl = geometry.reflection_sign
    users = []
    for region, count in ((TRANSMISSION, drop.n_transmission), (REFLECTION, drop.n_reflection)):
        side = refl if region == REFLECTION else -refl
        for _ in range(count):
            r = math.sqrt(rng.uniform(drop.min_radius_m ** 2, drop.radius_m ** 2))
            theta = rng.uniform(0.0, math.pi)
            pos = c + np.array([r * math.cos(theta), side * r * math.sin(theta), 0.0])
            users.append(UserSpec(tuple(pos), region))
    return users


# -- serialization ----------------------------------------------------------

def _vec3(value, path):
    try:
        v = [float(x) for x in value]
    except (TypeError, ValueError):
        raise ValidationError(path, "expected three numbers") from None
    if len(v) != 3 or not all(math.isfinite(x) for x in v):
        raise ValidationError(path, "expected three finite numbers")
    return tuple(v)


def _power(section: dict, stem: str, path: str) -> float:
    if f"{stem}_w" in section and f"{stem}_dbm" in section:
        raise ValidationError(f"{path}.{stem}_w", f"give either {stem}_w or {stem}_dbm")
    if f"{stem}_w" in section:
        return float(section[f"{stem}_w"])
    if f"{stem}_dbm" in section:
        return dbm_to_watts(float(section[f"{stem}_dbm"]))
    raise ValidationError(f"{path}.{stem}_w", "missing")


_SYSTEM_KEYS = {"n_antennas", "n_elements", "n_users", "n_subcarriers", "center_freq_hz",
                "bandwidth_hz", "max_power_w", "max_power_dbm", "noise_power_w",
                "noise_power_dbm", "aperture_m", "min_spacing_m", "bs_antenna_spacing_m",
                "absorption"}


def _check_keys(d, allowed, path):
    if not isinstance(d, dict):
        raise ValidationError(path, "expected an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ValidationError(f"{path}.{unknown[0]}", "unknown key")


def _parse_system(d: dict, n_listed_users: int) -> SystemConfig:
    _check_keys(d, _SYSTEM_KEYS, "system")
    for key in ("n_antennas", "n_elements", "n_subcarriers", "center_freq_hz",
                "bandwidth_hz", "aperture_m"):
        if key not in d:
            raise ValidationError(f"system.{key}", "missing")
    fc = float(d["center_freq_hz"])
    if not fc > 0:
        raise ValidationError("system.center_freq_hz", "must be positive")
    half_wave = SPEED_OF_LIGHT / fc / 2
    try:
        absorption = AbsorptionTable.from_pairs(d.get("absorption", []))
    except ValidationError:
        raise
    except (TypeError, ValueError):
        raise ValidationError("system.absorption", "expected a list of [freq_hz, k_abs] pairs") from None
    min_spacing = d.get("min_spacing_m")
    bs_spacing = d.get("bs_antenna_spacing_m")
    return SystemConfig(
        n_antennas=d["n_antennas"],
        n_elements=d["n_elements"],
        n_users=d.get("n_users", n_listed_users),
        n_subcarriers=d["n_subcarriers"],
        center_freq_hz=fc,
        bandwidth_hz=float(d["bandwidth_hz"]),
        max_power_w=_power(d, "max_power", "system"),
        noise_power_w=_power(d, "noise_power", "system"),
        aperture_m=float(d["aperture_m"]),
        min_spacing_m=half_wave if min_spacing is None else float(min_spacing),
        bs_antenna_spacing_m=half_wave if bs_spacing is None else float(bs_spacing),
        absorption=absorption,
    )


def _parse_geometry(d: dict) -> Geometry:
    _check_keys(d, {"bs_position", "stars_center", "users", "user_drop"}, "geometry")
    for key in ("bs_position", "stars_center"):
        if key not in d:
            raise ValidationError(f"geometry.{key}", "missing")
    users = []
    raw_users = d.get("users", [])
    if not isinstance(raw_users, list):
        raise ValidationError("geometry.users", "expected a list")
    for i, u in enumerate(raw_users):
        path = f"geometry.users[{i}]"
        _check_keys(u, {"position", "region"}, path)
        if "position" not in u or "region" not in u:
            raise ValidationError(path, "needs position and region")
        try:
            users.append(UserSpec(_vec3(u["position"], f"{path}.position"), u["region"]))
        except ValidationError as exc:
            if exc.path == "region":
                raise ValidationError(f"{path}.region", exc.message) from None
            raise
    drop = None
    if d.get("user_drop") is not None:
        dd = d["user_drop"]
        _check_keys(dd, {f.name for f in dataclasses.fields(UserDrop)}, "geometry.user_drop")
        try:
            drop = UserDrop(**dd)
        except TypeError as exc:
            raise ValidationError("geometry.user_drop", str(exc)) from None
    return Geometry(_vec3(d["bs_position"], "geometry.bs_position"),
                    _vec3(d["stars_center"], "geometry.stars_center"), tuple(users), drop)


def _parse_dataclass(cls, d, path):
    if d is None:
        return cls()
    _check_keys(d, {f.name for f in dataclasses.fields(cls)}, path)
    return cls(**d)


def scenario_from_dict(doc: dict) -> Scenario:
    """Build and validate a scenario from its JSON document form."""
    _check_keys(doc, {"system", "geometry", "layout", "swarm", "bcd"}, "")
    for key in ("system", "geometry"):
        if key not in doc:
            raise ValidationError(key, "missing section")
    geometry = _parse_geometry(doc["geometry"])
    if not geometry.users and geometry.user_drop is not None:
        geometry = dataclasses.replace(geometry, users=tuple(drop_users(geometry, geometry.user_drop, 0)))
    geometry.validate()
    system = _parse_system(doc["system"], len(geometry.users))
    lay = doc.get("layout") or {"mode": "FP"}
    _check_keys(lay, {"mode", "offsets", "track_index", "track_count", "track_spacing",
                      "diag_offsets"}, "layout")
    try:
        if lay.get("offsets") is None:
            layout = default_layout(lay.get("mode", "FP"), system)
        else:
            layout = ElementLayout.from_dict(lay, system.aperture_m)
    except (LayoutError, KeyError, TypeError) as exc:
        raise ValidationError("layout", str(exc)) from None
    scenario = Scenario(system, geometry, layout,
                        _parse_dataclass(SwarmConfig, doc.get("swarm"), "swarm"),
                        _parse_dataclass(BcdConfig, doc.get("bcd"), "bcd"))
    return scenario.validate()


def scenario_to_dict(scenario: Scenario) -> dict:
    """Canonical document form: powers in watts, every default spelled out."""
    s = scenario.system
    g = scenario.geometry
    geometry = {
        "bs_position": list(g.bs_position),
        "stars_center": list(g.stars_center),
        "users": [{"position": list(u.position), "region": u.region} for u in g.users],
    }
    if g.user_drop is not None:
        geometry["user_drop"] = dataclasses.asdict(g.user_drop)
    return {
        "system": {
            "n_antennas": s.n_antennas,
            "n_elements": s.n_elements,
            "n_users": s.n_users,
            "n_subcarriers": s.n_subcarriers,
            "center_freq_hz": s.center_freq_hz,
            "bandwidth_hz": s.bandwidth_hz,
            "max_power_w": s.max_power_w,
            "noise_power_w": s.noise_power_w,
            "aperture_m": s.aperture_m,
            "min_spacing_m": s.min_spacing_m,
            "bs_antenna_spacing_m": s.bs_antenna_spacing_m,
            "absorption": s.absorption.to_pairs(),
        },
        "geometry": geometry,
        "layout": scenario.layout.to_dict(),
        "swarm": dataclasses.asdict(scenario.swarm),
        "bcd": dataclasses.asdict(scenario.bcd),
    }


def dumps_scenario(scenario: Scenario) -> str:
    return json.dumps(scenario_to_dict(scenario), indent=2, sort_keys=True) + "\n"


def loads_scenario(text: str, source: str = "<string>") -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(source, f"JSON parse error at line {exc.lineno}: {exc.msg}") from None
    try:
        return scenario_from_dict(doc)
    except TypeError as exc:
        raise ValidationError(source, str(exc)) from None


def load_scenario(path) -> Scenario:
    path = Path(path)
    return loads_scenario(path.read_text(), str(path))


def save_scenario(scenario: Scenario, path) -> Path:
    path = Path(path)
    path.write_text(dumps_scenario(scenario))
    return path


def paper_setup_path() -> Path:
    return Path(str(resources.files("mestars") / "data" / "paper_setup.json"))


def paper_setup() -> Scenario:
    return load_scenario(paper_setup_path())


DESK_SCALE = {"n_elements": 8, "n_subcarriers": 5}


def desk_setup(seed: int = 0, mode=None, base: Scenario | None = None) -> Scenario:
    """Reduced instance for quick runs: M=8, L=5 and one user per region
    drawn with ``seed``; swarm shrunk to 10 particles x 30 iterations and
    seeded with ``seed`` as well."""
    s = (base or paper_setup()).resized(**DESK_SCALE)
    drop = dataclasses.replace(s.geometry.user_drop or UserDrop(1, 1), n_transmission=1, n_reflection=1)
    s = s.with_random_users(seed, drop)
    s = dataclasses.replace(s, geometry=dataclasses.replace(s.geometry, user_drop=drop),
                            swarm=dataclasses.replace(s.swarm, n_particles=10, max_iters=30, seed=seed))
    return s if mode is None else s.with_mode(mode)
