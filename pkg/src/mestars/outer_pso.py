"""Outer layer: penalised particle-swarm search over element positions.

Particles carry the mode's free coordinates (see :mod:`mestars.stars`).
The fitness of a layout is its objective (sum rate from the inner layer, or
a band-mean array gain) minus ``eta`` times the number of element pairs
closer than ``d_min``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import BcdConfig, SwarmConfig
from .inner_bcd import BcdError, BcdResult, bcd_loop
from .report import OptimizationReport, SwarmTraceRow
from .scenario import Scenario, subcarrier_grid
from .squint import band_gains
from .stars import ElementLayout, Mode, clamp_to_mode, default_layout, min_distance_violations

VELOCITY_FRACTION = 0.1
DEFAULT_PENALTY_SCALE = 100.0


@dataclass
class Evaluation:
    """Objective value of one layout plus whatever the objective wants kept."""

    value: float
    payload: object = None


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    fitness: float = -math.inf
    best_position: np.ndarray | None = None
    best_fitness: float = -math.inf
    best_violations: int = 0
    best_key: tuple[int, int] | None = None    # (t, i) of the evaluation that set the personal best

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        if self.best_position is None:
            self.best_position = self.position.copy()


@dataclass
class SwarmState:
    particles: list[Particle]
    global_best: np.ndarray
    global_best_fitness: float
    iteration: int = 0
    history: list[float] = field(default_factory=list)
    violations_history: list[int] = field(default_factory=list)
    global_best_violations: int = 0
    global_best_key: tuple[int, int] | None = None


# Objectives ------------------------------------------------------------------

class RateObjective:
    """Sum rate from the inner layer; ``payload`` is the :class:`BcdResult`."""

    name = "sum_rate"

    def __init__(self, scenario: Scenario, bcd_cfg: BcdConfig | None = None, max_iters: int | None = None):
        self.scenario = scenario
        self.bcd_cfg = bcd_cfg or scenario.bcd
        self.max_iters = max_iters

    def __call__(self, layout: ElementLayout, rng, full: bool = False) -> Evaluation:
        result = bcd_loop(self.scenario, layout.offsets, self.bcd_cfg, rng,
                          max_iters=None if full else self.max_iters)
        return Evaluation(result.sum_rate, result)


class GainObjective:
    """Mean over the band of the centre-designed array gain of one user."""

    name = "array_gain"

    def __init__(self, scenario: Scenario, user: int, n_points: int = 101):
        self.scenario = scenario
        self.user = user
        fc = scenario.system.center_freq_hz
        self.freqs = subcarrier_grid(fc, scenario.system.bandwidth_hz, n_points)

    def gains(self, layout: ElementLayout) -> np.ndarray:
        s = self.scenario
        return band_gains(layout.offsets, s.geometry.users[self.user], s.geometry.stars_center,
                          s.angles, self.freqs, s.system.center_freq_hz)

    def __call__(self, layout: ElementLayout, rng, full: bool = False) -> Evaluation:
        g = self.gains(layout)
        return Evaluation(float(np.mean(g)), g)


# Swarm mechanics -------------------------------------------------------------

def inertia(t: int, cfg: SwarmConfig) -> float:
    """Linearly decreasing weight: ``omega_max`` at 0, ``omega_min`` at ``T``."""
    if not 0 <= t <= cfg.max_iters:
        raise ValueError(f"t={t} outside [0, {cfg.max_iters}]")
    return cfg.omega_max - (cfg.omega_max - cfg.omega_min) * t / cfg.max_iters


def update_velocity(particle: Particle, global_best, omega: float, cfg: SwarmConfig, rng) -> np.ndarray:
    """``omega V + c1 a1 (pbest - x) + c2 a2 (gbest - x)`` with scalar draws ``a1``, ``a2``."""
    a1, a2 = rng.uniform(0.0, 1.0, 2)
    x = particle.position
    return (omega * particle.velocity + cfg.c1 * a1 * (particle.best_position - x)
            + cfg.c2 * a2 * (np.asarray(global_best) - x))


def decode(template: ElementLayout, encoding) -> ElementLayout:
    """Layout for a free-coordinate vector, projected onto the mode's box."""
    return clamp_to_mode(template, encoding)


def update_position(particle: Particle, velocity, template: ElementLayout) -> np.ndarray:
    return decode(template, particle.position + np.asarray(velocity)).encoding()


def random_encoding(template: ElementLayout, rng) -> np.ndarray:
    lo, hi = template.free_bounds()
    return rng.uniform(lo, hi)


def _eval_rng(seed: int, t: int, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, t, i])


class _Evaluator:
    def __init__(self, objective, template: ElementLayout, d_min: float, eta: float, seed: int):
        self.objective = objective
        self.template = template
        self.d_min = d_min
        self.eta = eta
        self.seed = seed

    def __call__(self, encoding, t: int, i: int) -> tuple[float, int]:
        layout = decode(self.template, encoding)
        viol = min_distance_violations(layout.offsets, self.d_min)
        try:
            value = self.objective(layout, _eval_rng(self.seed, t, i)).value
        except (BcdError, np.linalg.LinAlgError):
            return -math.inf, viol
        if not math.isfinite(value):
            return -math.inf, viol
        return value - self.eta * viol, viol


def init_swarm(template: ElementLayout, cfg: SwarmConfig, evaluate: Callable, rng) -> SwarmState:
    """``I`` particles uniform in the free box, velocities uniform in
    ``[-A/10, A/10]``; the global best is the best initial particle."""
    vmax = VELOCITY_FRACTION * template.aperture
    particles = []
    for i in range(cfg.n_particles):
        pos = random_encoding(template, rng)
        vel = rng.uniform(-vmax, vmax, pos.shape)
        fit, viol = evaluate(pos, 0, i)
        particles.append(Particle(pos, vel, fit, pos.copy(), fit, viol, (0, i)))
    best = particles[int(np.argmax([p.best_fitness for p in particles]))]
    return SwarmState(particles, best.best_position.copy(), best.best_fitness, 0,
                      [best.best_fitness], [best.best_violations], best.best_violations, best.best_key)


def _promote(state: SwarmState, p: Particle):
    if p.best_fitness > state.global_best_fitness:
        state.global_best = p.best_position.copy()
        state.global_best_fitness = p.best_fitness
        state.global_best_violations = p.best_violations
        state.global_best_key = p.best_key


def pso_iterations(state: SwarmState, template: ElementLayout, cfg: SwarmConfig, evaluate: Callable,
                   rng) -> SwarmState:
    """Run iterations ``t = 1..T``; personal bests replace on strictly better
    fitness and the global best on a strictly better personal best.

    Asynchronous (default): the global best is refreshed after every particle.
    Synchronous: once per sweep, after all particles have moved.
    """
    state.global_best_violations = state.violations_history[-1]
    for t in range(1, cfg.max_iters + 1):
        omega = inertia(t, cfg)
        for i, p in enumerate(state.particles):
            p.velocity = update_velocity(p, state.global_best, omega, cfg, rng)
            p.position = update_position(p, p.velocity, template)
            p.fitness, viol = evaluate(p.position, t, i)
            if p.fitness > p.best_fitness:
                p.best_fitness = p.fitness
                p.best_position = p.position.copy()
                p.best_violations = viol
                p.best_key = (t, i)
            if not cfg.synchronous:
                _promote(state, p)
        if cfg.synchronous:
            for p in state.particles:
                _promote(state, p)
        state.iteration = t
        state.history.append(state.global_best_fitness)
        state.violations_history.append(state.global_best_violations)
    return state


def pilot_penalty_weight(scenario: Scenario, objective) -> float:
    """``100 x`` the objective of the FP layout (100 if that is zero)."""
    fp = default_layout(Mode.FP, scenario.system)
    try:
        value = objective(fp, np.random.default_rng([scenario.swarm.seed, 0, 2**31 - 1])).value
    except BcdError:
        value = 0.0
    value = abs(value)
    return DEFAULT_PENALTY_SCALE * (value if value > 0 else 1.0)


def fitness(layout: ElementLayout, objective, eta: float, d_min: float, rng=None) -> float:
    """Objective minus ``eta`` per element pair closer than ``d_min``."""
    value = objective(layout, np.random.default_rng(rng)).value
    return value - eta * min_distance_violations(layout.offsets, d_min)


def pso_loop(scenario: Scenario, mode=None, cfg: SwarmConfig | None = None, bcd_cfg: BcdConfig | None = None,
             objective=None) -> OptimizationReport:
    """Optimise element positions for ``mode`` and return the full report.

    ``objective`` defaults to the inner-layer sum rate (with the per-call BCD
    iteration cap of ``cfg.bcd_iters_cap``); the final global best is
    re-evaluated without the cap, replaying the random stream of the
    evaluation that made it the global best (so the re-solve continues that
    run instead of starting a different local search). FP layouts skip the
    swarm.
    """
    mode = Mode.parse(mode or scenario.layout.mode)
    cfg = cfg or scenario.swarm
    bcd_cfg = bcd_cfg or scenario.bcd
    if scenario.layout.mode is not mode:
        scenario = scenario.with_mode(mode)
    template = scenario.layout
    objective = objective or RateObjective(scenario, bcd_cfg, cfg.bcd_iters_cap)
    d_min = scenario.system.min_spacing_m
    timings = {}

    t0 = time.perf_counter()
    eta = cfg.penalty_weight if cfg.penalty_weight is not None else pilot_penalty_weight(scenario, objective)
    timings["pilot"] = time.perf_counter() - t0

    trace: list[SwarmTraceRow] = []
    t0 = time.perf_counter()
    final_rng = [cfg.seed, cfg.max_iters + 1, 0]
    if mode is Mode.FP:
        best_layout = template
    else:
        rng = np.random.default_rng(cfg.seed)
        evaluate = _Evaluator(objective, template, d_min, eta, cfg.seed)
        state = init_swarm(template, cfg, evaluate, rng)
        state = pso_iterations(state, template, cfg, evaluate, rng)
        if not math.isfinite(state.global_best_fitness):
            raise BcdError("every particle failed its inner solve")
        trace = [SwarmTraceRow(t, f, v) for t, (f, v) in
                 enumerate(zip(state.history, state.violations_history))]
        best_layout = decode(template, state.global_best)
        final_rng = [cfg.seed, *state.global_best_key]
    timings["swarm"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    final = objective(best_layout, np.random.default_rng(final_rng), full=True)
    timings["final"] = time.perf_counter() - t0
    viol = min_distance_violations(best_layout.offsets, d_min)
    report = OptimizationReport(
        fingerprint=scenario.fingerprint(),
        mode=mode.value,
        seed=int(cfg.seed),
        objective=objective.name,
        layout=best_layout.to_dict(),
        value=float(final.value),
        fitness=float(final.value - eta * viol),
        violations=viol,
        penalty_weight=float(eta),
        swarm_trace=trace,
        timings=timings,
    )
    payload = final.payload
    if isinstance(payload, BcdResult):
        report.sum_rate = payload.sum_rate
        report.precoders = payload.w
        report.coefficients = payload.coefficients.to_dict()
        report.bcd_trace = [(r.iteration, r.surrogate, r.sum_rate) for r in payload.trace]
        report.bcd_converged = payload.converged
        report.max_rank_ratio = payload.max_rank_ratio
        report.regularized = payload.regularized
    elif payload is not None:
        report.extra["gains"] = np.asarray(payload, dtype=float).tolist()
        report.extra["freq_hz"] = objective.freqs.tolist()
        report.extra["min_gain"] = float(np.min(payload))
    return report
