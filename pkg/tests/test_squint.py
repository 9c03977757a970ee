import cmath
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mestars.config import SPEED_OF_LIGHT
from mestars.scenario import IncidenceAngles, UserSpec
from mestars.squint import (
    GainCurve,
    band_gains,
    center_frequency_phase_design,
    normalized_array_gain,
    residual_phase,
    residuals,
    squint_sweep,
)
from mestars.stars import default_layout

C = SPEED_OF_LIGHT
FC = 40e9


def _target(s):
    return next(i for i, u in enumerate(s.geometry.users) if u.region == "reflection")


def _setup(full, m=8):
    s = full.resized(n_elements=m).with_mode("FP")
    return s, s.geometry.users[_target(s)], s.geometry.stars_center, s.angles


def test_phase_design_oracle(full):
    s, user, centre, ang = _setup(full)
    off = s.layout.offsets
    th = center_frequency_phase_design(off, user, centre, ang, FC)
    sx = math.sin(ang.azimuth_arrival_rad) * math.sin(ang.elevation_arrival_rad)
    cz = math.cos(ang.elevation_arrival_rad)
    for m in range(len(off)):
        pos = (centre[0] + off[m, 0], centre[1], centre[2] + off[m, 1])
        ref = (2 * math.pi * FC / C * (math.dist(user.position, pos) + off[m, 0] * sx + off[m, 1] * cz)) % (2 * math.pi)
        assert cmath.exp(1j * th[m]) == pytest.approx(cmath.exp(1j * ref), abs=1e-9)


def test_gain_off_centre_matches_residual_sum(full):
    s, user, centre, ang = _setup(full)
    off = s.layout.offsets
    th = center_frequency_phase_design(off, user, centre, ang, FC)
    f = FC + 5e9
    r = residuals(off, user, centre, ang)
    oracle = abs(sum(cmath.exp(2j * math.pi * (FC - f) * rm / C) for rm in r)) / len(r)
    assert normalized_array_gain(off, th, user, centre, ang, f) == pytest.approx(oracle, abs=1e-9)


def test_destructive_pair():
    ang = IncidenceAngles(0.0, math.pi / 2, 0.0)          # both angle terms vanish
    lam = C / FC
    user = UserSpec((0.0, 1.0, 0.0), "reflection")
    # second element sits so that its distance is lam/2 longer
    d0 = 1.0
    x1 = math.sqrt((d0 + lam / 2) ** 2 - d0 ** 2)
    g = normalized_array_gain([[0, 0], [x1, 0]], [0, 0], user, (0, 0, 0), ang, FC)
    assert g == pytest.approx(0.0, abs=1e-9)


def test_single_element_flat(full):
    _, user, centre, ang = _setup(full)
    off = [[0.03, -0.1]]
    th = center_frequency_phase_design(off, user, centre, ang, FC)
    g = normalized_array_gain(off, th, user, centre, ang, np.linspace(30e9, 50e9, 9))
    assert np.allclose(g, 1.0, atol=1e-12)


@given(st.integers(0, 2 ** 31), st.floats(-np.pi, np.pi))
def test_gain_invariances(seed, common):
    rng = np.random.default_rng(seed)
    ang = IncidenceAngles(rng.uniform(0, 2 * np.pi), rng.uniform(0, np.pi / 2), 0.0)
    user = UserSpec(tuple(rng.uniform(-1, 1, 3) + [0, 2, 0]), "reflection")
    off = rng.uniform(-0.25, 0.25, (6, 2))
    th = rng.uniform(0, 2 * np.pi, 6)
    f = rng.uniform(35e9, 45e9)
    g = normalized_array_gain(off, th, user, (0, 0, 0), ang, f)
    assert 0 <= g <= 1 + 1e-12
    assert normalized_array_gain(off, th + common, user, (0, 0, 0), ang, f) == pytest.approx(g, abs=1e-12)
    perm = rng.permutation(6)
    assert normalized_array_gain(off[perm], th[perm], user, (0, 0, 0), ang, f) == pytest.approx(g, abs=1e-12)
    design = center_frequency_phase_design(off, user, (0, 0, 0), ang, FC)
    assert normalized_array_gain(off, design, user, (0, 0, 0), ang, FC) == pytest.approx(1.0, abs=1e-12)


def test_residual_broadside_and_slope():
    ang = IncidenceAngles(0.0, math.pi / 2, 0.0)
    user = UserSpec((0.2, 1.5, 0.1), "reflection")
    assert residual_phase([0.0, 0.0], user, (0, 0, 0), ang) == pytest.approx(math.dist(user.position, (0, 0, 0)))
    ang = IncidenceAngles(1.1, 0.7, 0.0)
    xs = np.linspace(-0.25, 0.25, 201)
    r = np.array([residual_phase([x, 0.05], user, (0, 0, 0), ang) for x in xs])
    assert np.max(np.abs(np.diff(r))) < 0.01                 # continuous along the track
    h = 1e-6
    for x in (-0.2, 0.0, 0.17):
        fd = (residual_phase([x + h, 0.05], user, (0, 0, 0), ang) - residual_phase([x - h, 0.05], user, (0, 0, 0), ang)) / (2 * h)
        dist_slope = (x - user.position[0]) / math.dist(user.position, (x, 0, 0.05))
        assert fd == pytest.approx(dist_slope + ang.x_factor, abs=1e-6)


def test_sweep_curves(full, tmp_path):
    s, _, _, _ = _setup(full)
    curves = squint_sweep(s, s.layout, _target(s), [1e9, 2e9, 4e9, 8e9, 10e9])
    assert len(curves) == 5
    for c in curves:
        assert len(c.frequencies) == 101
        assert c.gains[50] == pytest.approx(1.0, abs=1e-12)
    mins = [c.min_gain for c in curves]
    assert all(a >= b for a, b in zip(mins, mins[1:]))
    assert curves[4].gains[0] < curves[2].gains[0]
    back = GainCurve.from_csv(curves[0].to_csv(tmp_path / "c.csv"))
    assert np.array_equal(back.gains, curves[0].gains)
    with pytest.raises(ValueError):
        squint_sweep(s, s.layout, 0, [1e9], n_points=1)


def test_gain_curve_rejects_out_of_range():
    with pytest.raises(ValueError):
        GainCurve([1.0, 2.0], [0.5, 1.5])
    with pytest.raises(ValueError):
        GainCurve([1.0], [0.5, 0.4])


def test_band_gains_equals_pointwise(full):
    s, user, centre, ang = _setup(full)
    off = default_layout("DB", s.system).offsets
    freqs = np.linspace(36e9, 44e9, 7)
    th = center_frequency_phase_design(off, user, centre, ang, FC)
    pointwise = [normalized_array_gain(off, th, user, centre, ang, f) for f in freqs]
    assert np.allclose(band_gains(off, user, centre, ang, freqs, FC), pointwise, atol=1e-12)
