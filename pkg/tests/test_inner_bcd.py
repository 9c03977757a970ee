import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mestars.channel import ChannelSet, assemble_channels
from mestars.inner_bcd import (
    AuxiliaryState,
    bcd_loop,
    effective_channels,
    gaussian_randomization,
    init_beamforming,
    init_precoding,
    sinr,
    solve_bs_precoding,
    solve_stars_beamforming,
    sum_rate,
    taylor_bound,
)

NOISE = 1e-3


def _random_channels(rng, l, k, m, n, transmission=None):
    cn = lambda *s: rng.standard_normal(s) + 1j * rng.standard_normal(s)
    t = np.array(transmission if transmission is not None else [i % 2 == 0 for i in range(k)])
    return ChannelSet(np.linspace(39e9, 41e9, l), cn(l, m, n), cn(l, k, m), t)


def _random_u(rng, m):
    beta = rng.uniform(0, 1, m)
    return (np.sqrt(beta) * np.exp(1j * rng.uniform(0, 6.3, m)),
            np.sqrt(1 - beta) * np.exp(1j * rng.uniform(0, 6.3, m)))


def _scalar(ch, w, ut, ur, l, k, i):
    u = ut if ch.transmission[k] else ur
    h = np.diag(ch.stars_to_user[l, k]) @ ch.bs_to_stars[l]
    return abs(np.conj(u) @ h @ w[l, i]) ** 2


def test_sinr_scalar_oracle(rng):
    ch = _random_channels(rng, 2, 2, 3, 2)
    w = rng.standard_normal((2, 2, 2)) + 1j * rng.standard_normal((2, 2, 2))
    ut, ur = _random_u(rng, 3)
    for l in range(2):
        for k in range(2):
            want = _scalar(ch, w, ut, ur, l, k, k) / (_scalar(ch, w, ut, ur, l, k, 1 - k) + NOISE)
            assert sinr(ch, w, ut, ur, l, k, NOISE) == pytest.approx(want, rel=1e-12)


def test_sinr_trivial_cases(rng):
    ch = _random_channels(rng, 1, 1, 3, 2)
    w = rng.standard_normal((1, 1, 2)) + 0j
    ut, ur = _random_u(rng, 3)
    assert sinr(ch, w, ut, ur, 0, 0, NOISE) == pytest.approx(_scalar(ch, w, ut, ur, 0, 0, 0) / NOISE)
    assert sinr(ch, np.zeros_like(w), ut, ur, 0, 0, NOISE) == 0.0


def test_sum_rate_term_by_term(rng):
    l, k, m, n = 3, 2, 4, 2
    ch = _random_channels(rng, l, k, m, n)
    w = rng.standard_normal((l, k, n)) + 1j * rng.standard_normal((l, k, n))
    ut, ur = _random_u(rng, m)
    total = 0.0
    for ll in range(l):
        for kk in range(k):
            s = _scalar(ch, w, ut, ur, ll, kk, kk)
            i = sum(_scalar(ch, w, ut, ur, ll, kk, j) for j in range(k) if j != kk)
            total += math.log2(1 + s / (i + NOISE))
    assert sum_rate(ch, w, ut, ur, NOISE) == pytest.approx(total, rel=1e-12)
    assert sum_rate(ch, np.zeros_like(w), ut, ur, NOISE) == 0.0
    assert sum_rate(ch, w, ut, ur, 2 * NOISE) <= sum_rate(ch, w, ut, ur, NOISE)
    batch = np.stack([ut, ut]), np.stack([ur, ur])
    assert np.allclose(sum_rate(ch, w, *batch, NOISE), total)


def test_effective_channel_definition(rng):
    ch = _random_channels(rng, 2, 3, 4, 2)
    ut, ur = _random_u(rng, 4)
    g = effective_channels(ch, ut, ur)
    for l in range(2):
        for k in range(3):
            u = ut if ch.transmission[k] else ur
            h = np.diag(ch.stars_to_user[l, k]) @ ch.bs_to_stars[l]
            assert np.allclose(g[l, k], h.conj().T @ u)


def test_taylor_exact_at_point():
    assert taylor_bound(0.3, 2.0, 0.3, 2.0) == pytest.approx(math.log2(1 + 1 / 0.6), rel=1e-15)


@given(st.floats(1e-3, 1e3), st.floats(1.0, 1e3))
def test_taylor_lower_bound_on_grid(c0, d0):
    scale = np.linspace(0.5, 2.0, 13)
    c, d = np.meshgrid(c0 * scale, d0 * scale)
    true = np.log2(1 + 1 / (c * d))
    assert np.all(taylor_bound(c, d, c0, d0) <= true + 1e-12 * np.abs(true).max())


@given(st.floats(1e-2, 1e2), st.floats(1.0, 1e2))
def test_taylor_gradient_matches_fd(c0, d0):
    f = lambda c, d: math.log1p(1 / (c * d)) / math.log(2)
    h = 1e-6
    fd_c = (f(c0 * (1 + h), d0) - f(c0 * (1 - h), d0)) / (2 * c0 * h)
    fd_d = (f(c0, d0 * (1 + h)) - f(c0, d0 * (1 - h))) / (2 * d0 * h)
    tc = (taylor_bound(c0 * (1 + h), d0, c0, d0) - taylor_bound(c0 * (1 - h), d0, c0, d0)) / (2 * c0 * h)
    td = (taylor_bound(c0, d0 * (1 + h), c0, d0) - taylor_bound(c0, d0 * (1 - h), c0, d0)) / (2 * d0 * h)
    assert tc == pytest.approx(fd_c, rel=1e-6)
    assert td == pytest.approx(fd_d, rel=1e-6)


def test_taylor_rejects_non_positive():
    with pytest.raises(ValueError):
        taylor_bound(0.0, 1.0, 1.0, 1.0)


def test_auxiliary_tight_at_iterate(desk, rng):
    ch = assemble_channels(desk)
    ut, ur = init_beamforming(8, rng).vectors()
    w = init_precoding(ch, ut, ur, desk.system.max_power_w)
    noise = desk.system.noise_power_w
    aux = AuxiliaryState.at(ch, w, ut, ur, noise)
    s = np.array([[sinr(ch, w, ut, ur, l, k, noise) for k in range(2)] for l in range(5)])
    assert np.allclose(1 / (aux.c * aux.d), s, rtol=1e-10)
    assert aux.surrogate() == pytest.approx(sum_rate(ch, w, ut, ur, noise), rel=1e-10)
    with pytest.raises(ValueError):
        AuxiliaryState(np.zeros(2), np.ones(2), np.ones(2), np.ones(2))


def test_single_user_precoding_is_matched_filter(rng):
    ch = _random_channels(rng, 1, 1, 3, 4, [False])
    ut, ur = _random_u(rng, 3)
    p_max = 2.0
    g = effective_channels(ch, ut, ur)[0, 0]
    w0 = np.ones((1, 1, 4), dtype=complex) * 0.1
    aux = AuxiliaryState.at(ch, w0, ut, ur, NOISE)
    pre, _ = solve_bs_precoding(ch, ut, ur, aux, p_max, NOISE, w_prev=w0)
    w = pre.w[0, 0]
    # eigen-oracle: top eigenvector of g g^H
    vals, vecs = np.linalg.eigh(np.outer(g, g.conj()))
    top = vecs[:, -1]
    assert abs(abs(np.vdot(top, w)) / np.linalg.norm(w) - 1) < 1e-6
    assert np.linalg.norm(w) ** 2 == pytest.approx(p_max, rel=1e-6)


def test_precoding_power_and_monotone_step(desk, rng):
    ch = assemble_channels(desk)
    ut, ur = init_beamforming(8, rng).vectors()
    noise = desk.system.noise_power_w
    w = init_precoding(ch, ut, ur, desk.system.max_power_w)
    aux = AuxiliaryState.at(ch, w, ut, ur, noise)
    pre, new_aux = solve_bs_precoding(ch, ut, ur, aux, desk.system.max_power_w, noise, w_prev=w)
    assert np.all(pre.powers() <= desk.system.power_per_subcarrier + 1e-8)
    assert pre.surrogate >= aux.surrogate() - 1e-6
    assert new_aux.surrogate() == pytest.approx(pre.surrogate)


def test_precoding_rank_one_selection_is_lossless(desk, rng):
    ch = assemble_channels(desk)
    ut, ur = init_beamforming(8, rng).vectors()
    noise = desk.system.noise_power_w
    w = init_precoding(ch, ut, ur, desk.system.max_power_w)
    pre, _ = solve_bs_precoding(ch, ut, ur, AuxiliaryState.at(ch, w, ut, ur, noise),
                                desk.system.max_power_w, noise, w_prev=w)
    assert np.allclose(pre.lifted, np.einsum("lkn,lkm->lknm", pre.w, pre.w.conj()))
    assert pre.rank_ratio <= 1e-12
    assert pre.surrogate == pytest.approx(pre.relaxed_surrogate, rel=1e-9)


def test_beamforming_diag_sum_and_monotone(desk, rng):
    ch = assemble_channels(desk)
    ut, ur = init_beamforming(8, rng).vectors()
    noise = desk.system.noise_power_w
    w = init_precoding(ch, ut, ur, desk.system.max_power_w)
    aux = AuxiliaryState.at(ch, w, ut, ur, noise)
    beam = solve_stars_beamforming(ch, w, aux, noise)
    assert np.allclose(np.real(np.diag(beam.lifted_t) + np.diag(beam.lifted_r)), 1, atol=1e-8)
    assert beam.surrogate >= aux.surrogate() - 1e-6


def test_single_element_beamforming_grid_oracle(desk):
    s = desk.resized(n_elements=1)
    ch = assemble_channels(s)
    noise = s.system.noise_power_w
    rng = np.random.default_rng(7)
    ut, ur = init_beamforming(1, rng).vectors()
    w = init_precoding(ch, ut, ur, s.system.max_power_w)
    aux = AuxiliaryState.at(ch, w, ut, ur, noise)
    beam = solve_stars_beamforming(ch, w, aux, noise)
    # the lifted variables are scalars beta_t, beta_r
    bt = np.linspace(1e-6, 1 - 1e-6, 200001)
    p = np.abs(np.einsum("lkmn,lin->lkim", ch.cascaded, w)[..., 0]) ** 2 / noise     # (L, K, K)
    t = ch.transmission
    beta = np.where(t[None, :], bt[:, None], 1 - bt[:, None])                           # (G, K)
    sig = np.einsum("lkk->lk", p)[None] * beta[:, None, :]
    intf = (p.sum(-1) - np.einsum("lkk->lk", p))[None] * beta[:, None, :]
    sur = taylor_bound(1 / sig, 1 + intf, aux.c0[None], aux.d0[None]).sum(axis=(1, 2))
    best = int(np.argmax(sur))
    assert beam.lifted_t.real[0, 0] + beam.lifted_r.real[0, 0] == pytest.approx(1, abs=1e-8)
    assert beam.lifted_t.real[0, 0] == pytest.approx(bt[best], abs=1e-4)
    assert beam.surrogate == pytest.approx(sur[best], rel=1e-4, abs=1e-4)


def test_randomization_exact_rank_one(rng):
    m = 5
    phase_t = rng.uniform(0, 2 * np.pi, m)
    phase_r = rng.uniform(0, 2 * np.pi, m)
    amp = np.full(m, math.sqrt(0.5))
    ut = amp * np.exp(1j * phase_t)
    ur = amp * np.exp(1j * phase_r)
    score = lambda a, b: -np.abs(a - ut).sum(-1)            # any evaluator
    got_t, got_r = gaussian_randomization(np.outer(ut, ut.conj()), np.outer(ur, ur.conj()), 10, score, rng)
    rel = got_t * np.conj(ut)
    assert np.allclose(rel / rel[0], 1, atol=1e-9)
    rel = got_r * np.conj(ur)
    assert np.allclose(rel / rel[0], 1, atol=1e-9)
    assert np.allclose(np.abs(got_t) ** 2 + np.abs(got_r) ** 2, 1)


def test_randomization_superset_and_reproducible(rng):
    m = 4
    a = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
    ut_l = a @ a.conj().T
    ut_l = ut_l / np.max(np.diag(ut_l).real) * 0.6
    ur_l = np.diag(1 - np.diag(ut_l).real).astype(complex)
    target = np.exp(1j * rng.uniform(0, 6.3, m))
    score = lambda x, y: np.abs(np.sum(x * target, axis=-1))
    one = gaussian_randomization(ut_l, ur_l, 1, score, 3)
    many = gaussian_randomization(ut_l, ur_l, 200, score, 3)
    assert score(many[0], many[1]) >= score(one[0], one[1])
    again = gaussian_randomization(ut_l, ur_l, 200, score, 3)
    assert np.array_equal(many[0], again[0]) and np.array_equal(many[1], again[1])
    with pytest.raises(ValueError):
        gaussian_randomization(ut_l, ur_l, 0, score, 3)


def test_init_beamforming():
    a = init_beamforming(6, 1)
    assert np.allclose(a.amp_t ** 2 + a.amp_r ** 2, 1)
    assert np.allclose(a.amp_t ** 2, 0.5)
    assert np.array_equal(a.phase_t, init_beamforming(6, 1).phase_t)
    assert not np.allclose(a.phase_t, init_beamforming(6, 2).phase_t)


def test_bcd_loop_contract(desk, tmp_path):
    res = bcd_loop(desk, rng=5)
    sur = [r.surrogate for r in res.trace]
    assert all(b >= a - 1e-6 for a, b in zip(sur, sur[1:]))
    assert res.iterations <= 50
    assert np.all(np.sum(np.abs(res.w) ** 2, axis=(1, 2)) <= desk.system.power_per_subcarrier + 1e-8)
    c = res.coefficients
    assert np.max(np.abs(c.amp_t ** 2 + c.amp_r ** 2 - 1)) <= 1e-9
    assert res.sum_rate == pytest.approx(res.trace[-1].sum_rate)
    again = bcd_loop(desk, rng=5)
    assert again.sum_rate == res.sum_rate and np.array_equal(again.w, res.w)
    lines = res.trace_to_csv(tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iter,surrogate,sum_rate" and len(lines) == res.iterations + 1


def test_full_setup_precoders_rank_one(full):
    ch = assemble_channels(full)
    ut, ur = init_beamforming(full.system.n_elements, 3).vectors()
    noise = full.system.noise_power_w
    w = init_precoding(ch, ut, ur, full.system.max_power_w)
    pre, _ = solve_bs_precoding(ch, ut, ur, AuxiliaryState.at(ch, w, ut, ur, noise),
                                full.system.max_power_w, noise, w_prev=w)
    for mat in pre.lifted.reshape(-1, *pre.lifted.shape[-2:]):
        vals = np.linalg.eigvalsh(mat)
        assert vals[-2] <= 1e-6 * vals[-1]
    assert pre.surrogate >= pre.relaxed_surrogate - 1e-9 * abs(pre.relaxed_surrogate)
