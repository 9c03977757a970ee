import cmath
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mestars.channel import (
    ChannelSet,
    assemble_channels,
    bs_steering,
    bs_to_stars_channel,
    path_gain,
    stars_steering,
    stars_to_user_channel,
)
from mestars.config import SPEED_OF_LIGHT, AbsorptionTable
from mestars.scenario import IncidenceAngles, UserSpec, incidence_angles, rayleigh_distance

C = SPEED_OF_LIGHT


def test_path_gain_frozen():
    d = math.sqrt(100 ** 2 + 25 ** 2 + 4 ** 2)
    assert path_gain(40e9, d) == pytest.approx(5.786e-6, rel=1e-3)
    assert path_gain(40e9, d) == pytest.approx(5.781754219138664e-06, rel=1e-12)


@given(st.floats(1e9, 1e11), st.floats(0.1, 1e3))
def test_path_gain_reciprocity(f, d):
    assert path_gain(f, d) * f * d == pytest.approx(C / (4 * math.pi), rel=1e-12)


def test_path_gain_absorption_squares():
    one = AbsorptionTable((1.0,), (0.2,))
    two = AbsorptionTable((1.0,), (0.4,))
    free = path_gain(40e9, 10.0)
    assert path_gain(40e9, 10.0, two) / free == pytest.approx((path_gain(40e9, 10.0, one) / free) ** 2)
    with pytest.raises(ValueError):
        path_gain(40e9, 0.0)


def test_bs_steering_oracle():
    lam = C / 40e9
    a = bs_steering(math.pi / 6, 40e9, 4, lam / 2)
    ref = [cmath.exp(-1j * math.pi * i * math.sin(math.pi / 6)) / 2 for i in range(4)]
    assert np.allclose(a, ref, atol=1e-12)
    assert np.allclose(bs_steering(0.0, 40e9, 5, lam / 2), 1 / math.sqrt(5))
    assert np.allclose(bs_steering(0.3, 40e9, 1, lam / 2), [1.0])


def test_stars_steering_oracle(rng, full):
    angles = full.angles
    off = rng.uniform(-0.25, 0.25, (8, 2))
    a = stars_steering(off, angles, 38e9)
    sx = math.sin(angles.azimuth_arrival_rad) * math.sin(angles.elevation_arrival_rad)
    cz = math.cos(angles.elevation_arrival_rad)
    for m in range(8):
        ref = cmath.exp(-2j * math.pi * 38e9 / C * (off[m, 0] * sx + off[m, 1] * cz)) / math.sqrt(8)
        assert abs(a[m] - ref) < 1e-12
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)


def test_stars_steering_trivial_cases():
    ang = IncidenceAngles(math.pi / 2, math.pi / 2, 0.0)     # x_factor 1, z_factor 0
    assert np.allclose(stars_steering(np.zeros((3, 2)), ang, 40e9), 1 / math.sqrt(3))
    lam = C / 40e9
    v = stars_steering([[lam / 2, 0.0]], ang, 40e9)
    assert cmath.phase(v[0]) == pytest.approx(math.pi, abs=1e-9) or cmath.phase(v[0]) == pytest.approx(-math.pi, abs=1e-9)


def test_bs_to_stars_rank_one_and_norm(full):
    f = bs_to_stars_channel(full.geometry, full.layout.offsets, 40e9, full.system)
    sv = np.linalg.svd(f, compute_uv=False)
    assert sv[1] < 1e-10 * sv[0]
    d = np.linalg.norm(np.subtract(full.geometry.bs_position, full.geometry.stars_center))
    closed = math.sqrt(16 * 4) * C / (4 * math.pi * 40e9 * d)
    assert np.linalg.norm(f) == pytest.approx(closed, rel=1e-12)


def test_stars_to_user_oracle(rng, full):
    off = rng.uniform(-0.25, 0.25, (8, 2))
    user = UserSpec((1.0, 1.0, 1.0), "reflection")
    centre = full.geometry.stars_center
    h = stars_to_user_channel(off, user, centre, 41e9, full.system)
    amp = C / (4 * math.pi * 41e9 * math.dist(user.position, centre))
    for m in range(8):
        s = (centre[0] + off[m, 0], centre[1], centre[2] + off[m, 1])
        ref = amp * cmath.exp(-2j * math.pi * 41e9 / C * math.dist(user.position, s))
        assert abs(h[m] - ref) < 1e-12 * amp
    assert np.allclose(np.abs(h), amp, rtol=1e-12)


def test_user_on_normal_phase(full):
    centre = full.geometry.stars_center
    off = np.array([[0.1, -0.05], [0.0, 0.0]])
    user = UserSpec((centre[0] + 0.1, 0.7, centre[2] - 0.05), "reflection")
    h = stars_to_user_channel(off, user, centre, 40e9, full.system)
    want = -2 * math.pi * 40e9 / C * 0.7
    assert cmath.phase(h[0] * cmath.exp(-1j * want)) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        stars_to_user_channel([[0.1, -0.05]], UserSpec((centre[0] + 0.1, centre[1], centre[2] - 0.05),
                                                       "reflection"), centre, 40e9, full.system)


def test_assemble_invariants(full):
    ch = assemble_channels(full)
    ch.check()
    l, k, m, n = ch.shape
    assert (l, k, m, n) == (11, 4, 16, 4)
    assert np.all(np.isfinite(ch.bs_to_stars)) and np.all(np.isfinite(ch.stars_to_user))
    assert ch.bs_to_stars.size + ch.stars_to_user.size * n // n == l * m * n + l * k * m
    for f in ch.bs_to_stars:
        sv = np.linalg.svd(f, compute_uv=False)
        assert sv[1] < 1e-10 * sv[0]
    # per-subcarrier slices agree with the single-frequency builders
    for i in (0, 5, 10):
        ref = bs_to_stars_channel(full.geometry, full.layout.offsets, ch.frequencies[i], full.system)
        assert np.allclose(ch.bs_to_stars[i], ref, rtol=0, atol=1e-12 * np.abs(ref).max())


def test_assemble_locality(full):
    off = np.array(full.layout.offsets)
    a = assemble_channels(full, off)
    off[3] += [0.01, -0.02]
    b = assemble_channels(full, off)
    changed = ~np.isclose(a.stars_to_user, b.stars_to_user)
    assert changed[:, :, 3].all() and not changed[:, :, np.arange(16) != 3].any()
    rows = ~np.isclose(a.bs_to_stars, b.bs_to_stars).all(axis=2)
    assert rows[:, 3].all() and not rows[:, np.arange(16) != 3].any()


def test_json_roundtrip(desk):
    ch = assemble_channels(desk)
    back = ChannelSet.from_json(ch.to_json())
    assert np.array_equal(back.cascaded, ch.cascaded)
    assert np.array_equal(back.transmission, ch.transmission)


def test_far_user_becomes_planar(full):
    centre = np.asarray(full.geometry.stars_center)
    direction = np.array([0.3, 0.8, 0.2])
    direction /= np.linalg.norm(direction)
    far = centre + 10 * rayleigh_distance(full.system) * direction
    off = full.layout.offsets
    h = stars_to_user_channel(off, UserSpec(tuple(far), "reflection"), centre, 40e9, full.system)
    phase = np.unwrap(np.angle(h / h[0]))
    design = np.column_stack([np.ones(len(off)), off])
    coef, *_ = np.linalg.lstsq(design, phase, rcond=None)
    assert np.max(np.abs(design @ coef - phase)) < 0.05
