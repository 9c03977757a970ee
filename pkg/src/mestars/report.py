"""Optimization reports: one JSON document per (mode, sweep point, seed)."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


def complex_to_list(a) -> list:
    a = np.asarray(a, dtype=complex)
    return np.stack([a.real, a.imag], axis=-1).tolist()


def list_to_complex(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.size == 0:
        return np.zeros(a.shape[:-1], dtype=complex)
    return a[..., 0] + 1j * a[..., 1]


@dataclass
class SwarmTraceRow:
    iteration: int
    global_best_fitness: float
    violations_at_best: int


@dataclass
class OptimizationReport:
    """Outcome of one optimisation run.

    ``objective`` is ``"sum_rate"`` or ``"array_gain"``; ``value`` is the
    objective at the final layout (sum rate in bit/s/Hz, or the band-mean
    gain), ``fitness`` the penalised value the swarm maximised.
    ``timings`` holds wall-clock seconds per stage and is excluded from
    :meth:`comparable`.
    """

    fingerprint: str
    mode: str
    seed: int
    objective: str
    layout: dict
    value: float
    fitness: float
    violations: int
    penalty_weight: float
    sum_rate: float | None = None
    precoders: np.ndarray | None = None
    coefficients: dict | None = None
    bcd_trace: list = field(default_factory=list)
    swarm_trace: list[SwarmTraceRow] = field(default_factory=list)
    bcd_converged: bool | None = None
    max_rank_ratio: float | None = None
    regularized: bool = False
    extra: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "fingerprint": self.fingerprint,
            "mode": self.mode,
            "seed": int(self.seed),
            "objective": self.objective,
            "layout": self.layout,
            "value": float(self.value),
            "fitness": float(self.fitness),
            "violations": int(self.violations),
            "penalty_weight": float(self.penalty_weight),
            "sum_rate": None if self.sum_rate is None else float(self.sum_rate),
            "precoders": None if self.precoders is None else complex_to_list(self.precoders),
            "coefficients": self.coefficients,
            "bcd_trace": [[int(r[0]), float(r[1]), float(r[2])] for r in self.bcd_trace],
            "swarm_trace": [asdict(r) for r in self.swarm_trace],
            "bcd_converged": self.bcd_converged,
            "max_rank_ratio": None if self.max_rank_ratio is None else float(self.max_rank_ratio),
            "regularized": bool(self.regularized),
            "extra": self.extra,
            "timings": self.timings,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizationReport":
        d = dict(d)
        if d.get("precoders") is not None:
            d["precoders"] = list_to_complex(d["precoders"])
        d["bcd_trace"] = [tuple(r) for r in d.get("bcd_trace", [])]
        d["swarm_trace"] = [SwarmTraceRow(**r) for r in d.get("swarm_trace", [])]
        return cls(**d)

    def comparable(self) -> dict:
        """Everything except wall-clock timings (for determinism checks)."""
        d = self.to_dict()
        d.pop("timings")
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> "OptimizationReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def swarm_trace_to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["iter", "global_best_fitness", "violations_at_best"])
            for r in self.swarm_trace:
                out.writerow([r.iteration, repr(float(r.global_best_fitness)), r.violations_at_best])
        return path

    def bcd_trace_to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["iter", "surrogate", "sum_rate"])
            for it, sur, rate in self.bcd_trace:
                out.writerow([int(it), repr(float(sur)), repr(float(rate))])
        return path
