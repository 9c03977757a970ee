"""Inner layer: alternating BS precoding / STARS beamforming for fixed positions.

Rates use ``SINR_lk = |u^H H_lk w_lk|^2 / (sum_{i != k} |u^H H_lk w_li|^2 + s2)``
with ``u`` the transmission or reflection vector of user ``k``'s region.

Each block step maximises the first-order surrogate of
``log2(1 + 1/(C D))`` (``1/C`` a lower bound on the signal, ``D`` an upper
bound on interference plus noise) as an SDP. Powers are normalised so that
the SDPs are well scaled: precoders by ``P_max/L`` and signal/interference
terms by the noise power.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sdp
from .channel import ChannelSet, assemble_channels
from .config import BcdConfig
from .scenario import Scenario
from .stars import StarsCoefficients

LOG2E = 1.0 / math.log(2.0)


class BcdError(RuntimeError):
    """An SDP step failed; ``trace`` holds the iterations completed so far."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace or []


# Rate evaluation -------------------------------------------------------------

def _user_vectors(channels: ChannelSet, u_t, u_r) -> np.ndarray:
    """Per-user surface vectors, shape (..., K, M)."""
    u_t, u_r = np.asarray(u_t), np.asarray(u_r)
    t = channels.transmission
    return np.where(t[:, None], u_t[..., None, :], u_r[..., None, :])


def effective_channels(channels: ChannelSet, u_t, u_r) -> np.ndarray:
    """``g[..., l, k, :] = H_lk^H u_k`` so that ``u^H H_lk w = g^H w``; shape (..., L, K, N)."""
    u = _user_vectors(channels, u_t, u_r)                  # (..., K, M)
    h = channels.stars_to_user                            # (L, K, M)
    f = channels.bs_to_stars                              # (L, M, N)
    # u^H diag(h) F = (conj(u) * h) @ F
    row = np.conj(u)[..., None, :, :] * h                 # (..., L, K, M)
    return np.conj(np.einsum("...lkm,lmn->...lkn", row, f))


def _link_powers(channels: ChannelSet, w, u_t, u_r) -> np.ndarray:
    """``p[..., l, k, i] = |u_k^H H_lk w_li|^2``."""
    g = effective_channels(channels, u_t, u_r)
    s = np.einsum("...lkn,lin->...lki", np.conj(g), np.asarray(w))
    return np.abs(s) ** 2


def _sinr_all(channels: ChannelSet, w, u_t, u_r, noise: float) -> np.ndarray:
    p = _link_powers(channels, w, u_t, u_r)
    desired = np.diagonal(p, axis1=-2, axis2=-1)
    interference = p.sum(axis=-1) - desired
    return desired / (interference + noise)


def sinr(channels: ChannelSet, w, u_t, u_r, l: int, k: int, noise: float) -> float:
    """SINR of user ``k`` on subcarrier ``l``; ``w`` has shape (L, K, N)."""
    return float(_sinr_all(channels, w, u_t, u_r, noise)[l, k])


def sum_rate(channels: ChannelSet, w, u_t, u_r, noise: float):
    """Sum over users and subcarriers of log2(1 + SINR), bit/s/Hz.

    ``u_t``/``u_r`` may carry leading batch dimensions; the result then has
    the same leading shape.
    """
    s = _sinr_all(channels, w, u_t, u_r, noise)
    return np.log2(1.0 + s).sum(axis=(-2, -1))


def taylor_bound(c, d, c0, d0):
    """First-order expansion of ``log2(1 + 1/(C D))`` around ``(C0, D0)``.

    The function is jointly convex on the positive quadrant, so this is a
    global lower bound.
    """
    c, d, c0, d0 = (np.asarray(v, dtype=float) for v in (c, d, c0, d0))
    if np.any(c <= 0) or np.any(d <= 0) or np.any(c0 <= 0) or np.any(d0 <= 0):
        raise ValueError("taylor_bound needs positive arguments")
    base = 1.0 + c0 * d0
    out = np.log2(1.0 + 1.0 / (c0 * d0)) - LOG2E * (c - c0) / (c0 * base) - LOG2E * (d - d0) / (d0 * base)
    return out if out.ndim else float(out)


def _taylor_slopes(c0, d0):
    base = 1.0 + c0 * d0
    return LOG2E / (c0 * base), LOG2E / (d0 * base)


# Solution records ----------------------------------------------------------

@dataclass
class AuxiliaryState:
    """Signal lower bounds ``1/C`` and interference bounds ``D`` (noise-normalised)
    together with the local points ``C0``/``D0`` they were linearised around."""

    c: np.ndarray
    d: np.ndarray
    c0: np.ndarray
    d0: np.ndarray

    def __post_init__(self):
        for name in ("c", "d", "c0", "d0"):
            v = np.asarray(getattr(self, name), dtype=float)
            if np.any(~(v > 0)):
                raise ValueError(f"auxiliary variable {name} must be strictly positive")
            setattr(self, name, v)

    @classmethod
    def at(cls, channels: ChannelSet, w, u_t, u_r, noise: float) -> "AuxiliaryState":
        """Tight auxiliaries at an iterate: ``1/C`` = signal, ``D`` = interference + noise."""
        p = _link_powers(channels, w, u_t, u_r) / noise
        desired = np.diagonal(p, axis1=-2, axis2=-1)
        interference = p.sum(axis=-1) - desired
        c = 1.0 / desired
        d = 1.0 + interference
        return cls(c, d, c.copy(), d.copy())

    def surrogate(self) -> float:
        return float(np.sum(taylor_bound(self.c, self.d, self.c0, self.d0)))


@dataclass
class PrecodingSolution:
    w: np.ndarray                  # (L, K, N)
    lifted: np.ndarray             # (L, K, N, N)
    surrogate: float
    rank_ratio: float              # worst lambda_2 / lambda_1 over all lifted matrices
    regularized: bool = False
    solver_rank_ratio: float = 0.0        # same, for the solver's matrices before rank-one selection
    relaxed_surrogate: float = math.nan   # surrogate at the solver's matrices

    def powers(self) -> np.ndarray:
        return np.sum(np.abs(self.w) ** 2, axis=(1, 2))


@dataclass
class BeamformingSolution:
    lifted_t: np.ndarray
    lifted_r: np.ndarray
    surrogate: float
    u_t: np.ndarray | None = None
    u_r: np.ndarray | None = None
    regularized: bool = False

    @property
    def coefficients(self) -> StarsCoefficients:
        return StarsCoefficients.from_vectors(self.u_t, self.u_r)


# Precoding step --------------------------------------------------------------

_OFF = np.array([[0.0, 0.5], [0.5, 0.0]])
_E00 = np.array([[1.0, 0.0], [0.0, 0.0]])
_E11 = np.array([[0.0, 0.0], [0.0, 1.0]])


def _fail(step: str, sol: sdp.ConeSolution) -> BcdError:
    where = sol.residuals.worst_constraint if sol.residuals else ""
    return BcdError(f"{step}: solver returned {sol.status}" + (f" (worst: {where})" if where else ""))


def solve_bs_precoding(channels: ChannelSet, u_t, u_r, aux: AuxiliaryState, max_power_w: float,
                       noise: float, tol: float = 1e-7, w_prev=None) -> tuple[PrecodingSolution, AuxiliaryState]:
    """Maximise the surrogate over lifted precoders.

    Blocks per subcarrier: ``W_k`` (N x N Hermitian, in units of ``P_max/L``)
    and ``[[C_k/C0_k, 1], [1, C0_k S_k]]`` (PSD iff ``C_k S_k >= 1``) with
    ``S_k <= Tr(W_k A_k)``; the ``C0`` scaling keeps both diagonal entries
    near one. Interference bounds ``D_k`` are substituted by their tight
    value. Each ``W_k`` is further scaled by the user's share of the power
    in ``w_prev`` (equal shares if omitted) so that users with very
    different powers give blocks of comparable size.

    Vectors are recovered as ``w = W g / sqrt(g^H W g)``, which is the exact
    factor of a rank-one ``W`` and otherwise keeps the signal while not
    increasing power or interference. The returned lifted forms are
    ``w w^H``: when the optimum is not unique (all effective channels of a
    subcarrier parallel and part of the budget useless) the interior point
    lands inside the optimal face at higher rank, and this picks its rank-one
    member. ``relaxed_surrogate`` records the value at the solver's matrices
    so the selection can be checked to lose nothing.
    """
    n_sub, n_users, _, n_ant = channels.cascaded.shape
    p_sub = max_power_w / n_sub
    g = effective_channels(channels, u_t, u_r)                   # (L, K, N)
    a_mats = (p_sub / noise) * np.einsum("lkn,lkm->lknm", g, np.conj(g))
    slope_c, slope_d = _taylor_slopes(aux.c0, aux.d0)
    if w_prev is None:
        share = np.full((n_sub, n_users), 1.0 / n_users)
    else:
        share = np.sum(np.abs(np.asarray(w_prev)) ** 2, axis=-1) / p_sub
    share = np.maximum(share, 1e-12)

    w = np.zeros((n_sub, n_users, n_ant), dtype=complex)
    lifted = np.zeros((n_sub, n_users, n_ant, n_ant), dtype=complex)
    solver_ratio = 0.0
    # the subcarriers decouple; they are stacked into one block-separable SDP
    per_sub = 2 * n_users
    blocks = ([n_ant] * n_users + [2] * n_users) * n_sub
    herm = ([True] * n_users + [False] * n_users) * n_sub
    obj = {}
    cons = []
    for l in range(n_sub):
        wb = [l * per_sub + k for k in range(n_users)]
        yb = [l * per_sub + n_users + k for k in range(n_users)]
        for k in range(n_users):
            obj[yb[k]] = -slope_c[l, k] * aux.c0[l, k] * _E00
            for i in range(n_users):
                if i != k:
                    obj[wb[i]] = obj.get(wb[i], 0) - slope_d[l, k] * share[l, i] * a_mats[l, k]
        cons.append(sdp.Constraint({wb[k]: share[l, k] * np.eye(n_ant) for k in range(n_users)}, "<=", 1.0,
                                   f"power[{l}]"))
        for k in range(n_users):
            cons.append(sdp.Constraint({yb[k]: _OFF}, "=", 1.0, f"aux[{l},{k}]"))
            cons.append(sdp.Constraint({yb[k]: _E11, wb[k]: -aux.c0[l, k] * share[l, k] * a_mats[l, k]},
                                       "<=", 0.0, f"signal[{l},{k}]"))
    sol = sdp.solve(sdp.ConeProblem(blocks, herm, obj, cons, "max"), tol=tol)
    if not sol.optimal:
        raise _fail("precoding", sol)
    for l in range(n_sub):
        for k in range(n_users):
            wk = sol.blocks[l * per_sub + k]
            lifted[l, k] = wk * (share[l, k] * p_sub)
            solver_ratio = max(solver_ratio, _rank_ratio(wk))
            wg = lifted[l, k] @ g[l, k]
            gain = np.real(np.vdot(g[l, k], wg))
            if gain > 0:
                w[l, k] = wg / math.sqrt(gain)
        total = np.sum(np.abs(w[l]) ** 2)
        if total > p_sub:
            w[l] *= math.sqrt(p_sub / total)
    # surrogate at the solver's matrices, auxiliaries tight
    p_raw = np.maximum(np.real(np.einsum("lkn,linm,lkm->lki", np.conj(g), lifted, g)), 0.0) / noise
    desired_raw = np.diagonal(p_raw, axis1=-2, axis2=-1)
    relaxed = float(np.sum(taylor_bound(1.0 / np.maximum(desired_raw, 1e-300),
                                        1.0 + p_raw.sum(axis=-1) - desired_raw, aux.c0, aux.d0)))
    lifted = np.einsum("lkn,lkm->lknm", w, np.conj(w))
    rank_ratio = max((_rank_ratio(x) for x in lifted.reshape(-1, n_ant, n_ant)), default=0.0)

    p = _link_powers(channels, w, u_t, u_r) / noise
    desired = np.diagonal(p, axis1=-2, axis2=-1)
    interference = p.sum(axis=-1) - desired
    new_aux = AuxiliaryState(1.0 / np.maximum(desired, 1e-300), 1.0 + interference, aux.c0, aux.d0)
    return PrecodingSolution(w, lifted, new_aux.surrogate(), rank_ratio, sol.regularized,
                             solver_ratio, relaxed), new_aux


def _rank_ratio(x) -> float:
    """``lambda_2 / lambda_1`` of a PSD matrix (0 for zero or 1 x 1 matrices)."""
    if len(x) < 2:
        return 0.0
    vals = np.linalg.eigvalsh((x + x.conj().T) / 2)
    top = max(vals[-1], 0.0)
    return max(vals[-2], 0.0) / top if top > 0 else 0.0


# Beamforming step --------------------------------------------------------------

def _trace_product(a, b) -> float:
    """``Re Tr(a b)``."""
    return float(np.real(np.sum(a.T * b)))


def solve_stars_beamforming(channels: ChannelSet, w, aux: AuxiliaryState, noise: float,
                            tol: float = 1e-7) -> BeamformingSolution:
    """Maximise the surrogate over lifted ``U_t``, ``U_r`` with
    ``diag(U_t) + diag(U_r) = 1``."""
    n_sub, n_users, m, _ = channels.cascaded.shape
    casc = channels.cascaded                                   # (L, K, M, N)
    a = np.einsum("lkmn,lin->lkim", casc, np.asarray(w))       # H_lk w_li, (L, K, K, M)
    q = np.einsum("lkim,lkij->lkimj", a, np.conj(a)) / noise   # (L, K, K, M, M)
    slope_c, slope_d = _taylor_slopes(aux.c0, aux.d0)
    region = [0 if t else 1 for t in channels.transmission]

    n_aux = n_sub * n_users
    blocks = [m, m] + [2] * n_aux
    herm = [True, True] + [False] * n_aux
    obj = {0: np.zeros((m, m), dtype=complex), 1: np.zeros((m, m), dtype=complex)}
    cons = []
    for mm in range(m):
        e = np.zeros((m, m))
        e[mm, mm] = 1.0
        cons.append(sdp.Constraint({0: e, 1: e}, "=", 1.0, f"energy[{mm}]"))
    for l in range(n_sub):
        for k in range(n_users):
            b = 2 + l * n_users + k
            s = region[k]
            obj[b] = -slope_c[l, k] * aux.c0[l, k] * _E00
            for i in range(n_users):
                if i != k:
                    obj[s] = obj[s] - slope_d[l, k] * q[l, k, i]
            cons.append(sdp.Constraint({b: _OFF}, "=", 1.0, f"aux[{l},{k}]"))
            cons.append(sdp.Constraint({b: _E11, s: -aux.c0[l, k] * q[l, k, k]}, "<=", 0.0, f"signal[{l},{k}]"))
    sol = sdp.solve(sdp.ConeProblem(blocks, herm, obj, cons, "max"), tol=tol)
    if not sol.optimal:
        raise _fail("beamforming", sol)
    # surrogate with the exact constant terms
    c = aux.c0 * np.array([[sol.blocks[2 + l * n_users + k][0, 0] for k in range(n_users)]
                           for l in range(n_sub)])
    signal = np.array([[_trace_product(q[l, k, k], sol.blocks[region[k]]) for k in range(n_users)]
                       for l in range(n_sub)])
    interf = np.array([[sum(_trace_product(q[l, k, i], sol.blocks[region[k]])
                            for i in range(n_users) if i != k) for k in range(n_users)] for l in range(n_sub)])
    c = np.maximum(c, 1.0 / np.maximum(signal, 1e-300))
    surrogate = float(np.sum(taylor_bound(c, 1.0 + np.maximum(interf, 0.0), aux.c0, aux.d0)))
    return BeamformingSolution(sol.blocks[0], sol.blocks[1], surrogate, regularized=sol.regularized)


def _amplitudes(u_t_lift, u_r_lift) -> tuple[np.ndarray, np.ndarray]:
    bt = np.clip(np.real(np.diag(u_t_lift)), 0.0, None)
    br = np.clip(np.real(np.diag(u_r_lift)), 0.0, None)
    total = bt + br
    total[total == 0] = 1.0
    return np.sqrt(bt / total), np.sqrt(br / total)


def gaussian_randomization(u_t_lift, u_r_lift, n_candidates: int, evaluator, rng=None,
                           extra_candidates=()) -> tuple[np.ndarray, np.ndarray]:
    """Recover ``(u_t, u_r)`` from relaxed ``U_t``, ``U_r``.

    Candidate phases are ``arg(X sqrt(S) r)`` with ``U = X S X^H`` and ``r``
    standard complex normal; amplitudes are ``sqrt(diag U)`` renormalised so
    every element satisfies ``|u_t|^2 + |u_r|^2 = 1``. The principal
    eigenvector phases are always a candidate, as is every entry of
    ``extra_candidates``. ``evaluator(u_t, u_r)`` receives (C, M) arrays and
    returns C scores; the best candidate (first on ties) is returned.
    """
    if n_candidates < 1:
        raise ValueError("need at least one randomization")
    rng = np.random.default_rng(rng)
    amp_t, amp_r = _amplitudes(u_t_lift, u_r_lift)
    m = len(amp_t)
    phases = []
    factors = []
    for lift in (u_t_lift, u_r_lift):
        vals, vecs = np.linalg.eigh((lift + lift.conj().T) / 2)
        vals = np.clip(vals, 0.0, None)
        phases.append(np.angle(vecs[:, -1]))
        factors.append(vecs * np.sqrt(vals))
    cand_t = [amp_t * np.exp(1j * phases[0])]
    cand_r = [amp_r * np.exp(1j * phases[1])]
    for et, er in extra_candidates:
        cand_t.append(np.asarray(et))
        cand_r.append(np.asarray(er))
    r = (rng.standard_normal((2, n_candidates, m)) + 1j * rng.standard_normal((2, n_candidates, m))) / math.sqrt(2)
    xt = r[0] @ factors[0].T
    xr = r[1] @ factors[1].T
    ut = np.concatenate([np.array(cand_t), amp_t * np.exp(1j * np.angle(xt))])
    ur = np.concatenate([np.array(cand_r), amp_r * np.exp(1j * np.angle(xr))])
    scores = np.asarray(evaluator(ut, ur), dtype=float)
    best = int(np.argmax(scores))
    return ut[best], ur[best]


def init_beamforming(m: int, rng=None) -> StarsCoefficients:
    """Equal split ``beta_t = beta_r = 1/2`` with uniform random phases."""
    if m < 1:
        raise ValueError("need at least one element")
    rng = np.random.default_rng(rng)
    amp = np.full(m, math.sqrt(0.5))
    phase_t = rng.uniform(0.0, 2 * np.pi, m)
    phase_r = rng.uniform(0.0, 2 * np.pi, m)
    return StarsCoefficients(amp, amp.copy(), phase_t, phase_r)


def init_precoding(channels: ChannelSet, u_t, u_r, max_power_w: float) -> np.ndarray:
    """Per-subcarrier matched filters, each user at ``P_max / (L K)``."""
    n_sub, n_users, _, n_ant = channels.cascaded.shape
    g = effective_channels(channels, u_t, u_r)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    w = np.where(norms > 0, g / np.where(norms > 0, norms, 1.0), 1.0 / math.sqrt(n_ant))
    return w * math.sqrt(max_power_w / (n_sub * n_users))


# Alternating loop -------------------------------------------------------------

@dataclass
class TraceRow:
    iteration: int
    surrogate: float
    sum_rate: float


@dataclass
class BcdResult:
    w: np.ndarray
    coefficients: StarsCoefficients
    sum_rate: float
    trace: list[TraceRow]
    converged: bool
    max_rank_ratio: float
    regularized: bool = False
    max_solver_rank_ratio: float = 0.0
    max_selection_loss: float = 0.0    # worst relative surrogate lost by the rank-one selection
    channels: ChannelSet | None = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return len(self.trace)

    def trace_to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["iter", "surrogate", "sum_rate"])
            for row in self.trace:
                out.writerow([row.iteration, repr(float(row.surrogate)), repr(float(row.sum_rate))])
        return path


def bcd_loop(scenario: Scenario, offsets=None, cfg: BcdConfig | None = None, rng=None,
             max_iters: int | None = None, channels: ChannelSet | None = None) -> BcdResult:
    """Alternate precoding and beamforming steps until the relative surrogate
    improvement drops below ``cfg.convergence_eps`` or the iteration cap.

    ``rng`` seeds the initial phases and the randomizations.
    """
    cfg = cfg or scenario.bcd
    rng = np.random.default_rng(rng)
    system = scenario.system
    noise = system.noise_power_w
    if channels is None:
        channels = assemble_channels(scenario, offsets)
    cap = cfg.max_outer_bcd_iters if max_iters is None else min(max_iters, cfg.max_outer_bcd_iters)

    def evaluate(ut, ur):
        return sum_rate(channels, w, ut, ur, noise)

    u_t, u_r = init_beamforming(channels.shape[2], rng).vectors()
    w = init_precoding(channels, u_t, u_r, system.max_power_w)
    trace: list[TraceRow] = []
    rank_ratio = solver_ratio = loss = 0.0
    regularized = False
    converged = False
    prev = None
    for it in range(1, cap + 1):
        try:
            aux = AuxiliaryState.at(channels, w, u_t, u_r, noise)
            pre, _ = solve_bs_precoding(channels, u_t, u_r, aux, system.max_power_w, noise, cfg.sdp_tol, w)
            w = pre.w
            rank_ratio = max(rank_ratio, pre.rank_ratio)
            solver_ratio = max(solver_ratio, pre.solver_rank_ratio)
            loss = max(loss, (pre.relaxed_surrogate - pre.surrogate) / max(abs(pre.relaxed_surrogate), 1.0))
            aux = AuxiliaryState.at(channels, w, u_t, u_r, noise)
            beam = solve_stars_beamforming(channels, w, aux, noise, cfg.sdp_tol)
        except (BcdError, np.linalg.LinAlgError, ValueError) as exc:
            raise BcdError(f"iteration {it}: {exc}", trace) from exc
        regularized |= pre.regularized or beam.regularized
        u_t, u_r = gaussian_randomization(beam.lifted_t, beam.lifted_r, cfg.n_randomizations, evaluate,
                                          rng, extra_candidates=[(u_t, u_r)])
        rate = float(sum_rate(channels, w, u_t, u_r, noise))
        trace.append(TraceRow(it, pre.surrogate, rate))
        if prev is not None and (pre.surrogate - prev) <= cfg.convergence_eps * max(abs(prev), 1e-12):
            converged = True
            break
        prev = pre.surrogate
    return BcdResult(w, StarsCoefficients.from_vectors(u_t, u_r), float(sum_rate(channels, w, u_t, u_r, noise)),
                     trace, converged, rank_ratio, regularized, solver_ratio, loss, channels)
