"""Experiment registry, result persistence and plot-data emission.

Results land in ``<out>/<experiment>/<mode>/<sweep>=<value>/seed=<s>/`` with
``scenario.json`` and ``report.json`` per cell (or ``failure.json`` when the
cell raised). ``plotdata`` merges a result tree into tidy CSV files.

Usage::

    mestars run gain_vs_mode --modes rb,fp --seeds 0,1,2 --out results
    mestars validate scenario.json
    mestars plotdata results/gain_vs_mode
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ValidationError
from .outer_pso import GainObjective, pso_loop
from .report import OptimizationReport
from .scenario import (REFLECTION, Scenario, desk_setup, load_scenario, paper_setup, save_scenario)
from .squint import GainCurve, band_gains
from .stars import ElementLayout, Mode, StarsCoefficients, clamp_to_mode, default_layout, min_distance_violations

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
NA = "NA"
GAIN_POINTS = 101
GAIN_ELEMENTS = 8


@dataclass(frozen=True)
class Experiment:
    """Registry entry. ``kind`` picks the cell runner and the plot-data layout."""

    sweep: str
    desk_values: tuple
    paper_values: tuple
    modes: tuple
    kind: str


ALL_MODES = ("RB", "DB", "VB", "HB", "FP")
ME_MODES = ("RB", "DB", "VB", "HB")

EXPERIMENTS = {
    "squint_vs_bandwidth": Experiment("bandwidth_hz", (1e9, 2e9, 4e9, 8e9, 10e9), (1e9, 2e9, 4e9, 8e9, 10e9),
                                      ("FP",), "squint"),
    "convergence": Experiment("n_elements", (8,), (16,), ME_MODES, "convergence"),
    "gain_vs_mode": Experiment("bandwidth_hz", (4e9, 10e9), (4e9, 10e9), ALL_MODES, "gain"),
    "rate_vs_elements": Experiment("n_elements", (4, 8), (8, 16, 24, 32), ALL_MODES, "rate"),
    "rate_vs_subcarriers": Experiment("n_subcarriers", (3, 5), (3, 7, 11, 15), ALL_MODES, "rate"),
}
DEFAULT_SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    scenario: str | None = None
    sweep: tuple = ()
    modes: tuple = ()
    seeds: tuple = DEFAULT_SEEDS
    paper_scale: bool = False
    particles: int | None = None
    iterations: int | None = None

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValidationError("experiment", f"unknown experiment {self.name!r}; "
                                                f"known: {', '.join(sorted(EXPERIMENTS))}")
        exp = EXPERIMENTS[self.name]
        if not self.sweep:
            object.__setattr__(self, "sweep", exp.paper_values if self.paper_scale else exp.desk_values)
        if not self.modes:
            object.__setattr__(self, "modes", exp.modes)
        object.__setattr__(self, "modes", tuple(Mode.parse(m).value for m in self.modes))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValidationError("seeds", "must be non-empty")
        if len(set(self.seeds)) != len(self.seeds) or len(set(self.modes)) != len(self.modes):
            raise ValidationError("seeds", "modes and seeds must not repeat")
        for name in ("particles", "iterations"):
            v = getattr(self, name)
            if v is not None and int(v) < 1:
                raise ValidationError(name, "must be >= 1")

    @property
    def experiment(self) -> Experiment:
        return EXPERIMENTS[self.name]

    def to_dict(self) -> dict:
        return {"name": self.name, "scenario": self.scenario, "sweep_key": self.experiment.sweep,
                "sweep": list(self.sweep), "modes": list(self.modes), "seeds": list(self.seeds),
                "paper_scale": self.paper_scale, "particles": self.particles, "iterations": self.iterations}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(d["name"], d.get("scenario"), tuple(d["sweep"]), tuple(d["modes"]), tuple(d["seeds"]),
                   bool(d.get("paper_scale", False)), d.get("particles"), d.get("iterations"))


def format_value(v) -> str:
    """Directory-safe, round-trippable rendering of a sweep value."""
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def cell_dir(out: Path, spec: ExperimentSpec, mode: str, value, seed: int) -> Path:
    return Path(out) / spec.name / mode / f"{spec.experiment.sweep}={format_value(value)}" / f"seed={seed}"


def base_scenario(spec: ExperimentSpec) -> Scenario:
    return load_scenario(spec.scenario) if spec.scenario else paper_setup()


def cell_scenario(spec: ExperimentSpec, mode: str, value, seed: int, base: Scenario | None = None) -> Scenario:
    """Scenario of one cell: users and swarm seeded by ``seed``, the sweep
    field set to ``value`` and the mode's initial layout."""
    base = base or base_scenario(spec)
    exp = spec.experiment
    if spec.paper_scale:
        s = base.with_random_users(seed) if base.geometry.user_drop is not None else base
        s = dataclasses.replace(s, swarm=dataclasses.replace(s.swarm, seed=seed))
    else:
        s = desk_setup(seed, base=base)
    if exp.kind in ("squint", "gain"):
        # gain fitness is cheap, so the swarm keeps the base settings at both scales
        s = dataclasses.replace(s, swarm=dataclasses.replace(base.swarm, seed=seed))
        if exp.sweep != "n_elements":
            s = s.resized(n_elements=GAIN_ELEMENTS)
    swarm = {}
    if spec.particles is not None:
        swarm["n_particles"] = int(spec.particles)
    if spec.iterations is not None:
        swarm["max_iters"] = int(spec.iterations)
    if swarm:
        s = dataclasses.replace(s, swarm=dataclasses.replace(s.swarm, **swarm))
    value = int(value) if exp.sweep in ("n_elements", "n_subcarriers") else float(value)
    s = s.resized(**{exp.sweep: value})
    return s.with_mode(mode)


def target_user(scenario: Scenario) -> int:
    """First reflection-region user (the gain experiments' single target)."""
    for i, u in enumerate(scenario.geometry.users):
        if u.region == REFLECTION:
            return i
    return 0


def _gain_report(scenario: Scenario, layout: ElementLayout, objective: GainObjective) -> OptimizationReport:
    g = objective.gains(layout)
    viol = min_distance_violations(layout.offsets, scenario.system.min_spacing_m)
    return OptimizationReport(
        fingerprint=scenario.fingerprint(), mode=layout.mode.value, seed=int(scenario.swarm.seed),
        objective=objective.name, layout=layout.to_dict(), value=float(np.mean(g)), fitness=float(np.mean(g)),
        violations=viol, penalty_weight=0.0,
        extra={"gains": g.tolist(), "freq_hz": objective.freqs.tolist(), "min_gain": float(np.min(g))})


def run_cell(spec: ExperimentSpec, mode: str, value, seed: int, out) -> dict:
    """Run one (mode, sweep point, seed) cell; never raises for module errors."""
    d = cell_dir(out, spec, mode, value, seed)
    d.mkdir(parents=True, exist_ok=True)
    for stale in ("report.json", "failure.json"):
        (d / stale).unlink(missing_ok=True)
    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scenario = cell_scenario(spec, mode, value, seed)
        save_scenario(scenario, d / "scenario.json")
        kind = spec.experiment.kind
        if kind in ("squint", "gain"):
            objective = GainObjective(scenario, target_user(scenario), GAIN_POINTS)
            if kind == "squint":
                report = _gain_report(scenario, scenario.layout, objective)
                report.timings = {"total": time.perf_counter() - t0}
            else:
                report = pso_loop(scenario, mode, objective=objective)
            report.extra["user"] = objective.user
            GainCurve(report.extra["freq_hz"], np.minimum(report.extra["gains"], 1.0),
                      {"mode": mode}).to_csv(d / "gain_curve.csv")
        else:
            report = pso_loop(scenario, mode)
            report.bcd_trace_to_csv(d / "bcd_trace.csv")
        report.swarm_trace_to_csv(d / "swarm_trace.csv")
        report.save(d / "report.json")
        return {"cell": str(d), "ok": True, "value": report.value}
    except Exception as exc:  # noqa: BLE001 - any module error aborts only this cell
        failure = {"mode": mode, "sweep": spec.experiment.sweep, "value": value, "seed": seed,
                   "error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()}
        (d / "failure.json").write_text(json.dumps(failure, indent=2, sort_keys=True) + "\n")
        return {"cell": str(d), "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def _run_cell_args(args):
    return run_cell(*args)


def thread_budget() -> int:
    raw = os.environ.get("STARS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError("STARS_THREADS", f"not an integer: {raw!r}") from None
    if n < 1:
        raise ValidationError("STARS_THREADS", "must be >= 1")
    return n


def write_curves(spec: ExperimentSpec, out) -> list[Path]:
    """Per-(mode, seed) curve over the sweep for rate experiments."""
    paths = []
    if spec.experiment.kind != "rate":
        return paths
    for mode in spec.modes:
        for seed in spec.seeds:
            path = Path(out) / spec.name / mode / f"curve_seed={seed}.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow([spec.experiment.sweep, "sum_rate"])
                for v in spec.sweep:
                    rep = _load_report(cell_dir(out, spec, mode, v, seed))
                    w.writerow([format_value(v), NA if rep is None else repr(float(rep.value))])
            paths.append(path)
    return paths


def run_experiment(spec: ExperimentSpec, out="results", workers: int | None = None) -> list[dict]:
    """Run every cell, persist results and per-curve CSVs; returns cell outcomes."""
    out = Path(out)
    root = out / spec.name
    root.mkdir(parents=True, exist_ok=True)
    base_scenario(spec).validate(warn=False)
    (root / "experiment.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    jobs = [(spec, m, v, s, out) for m in spec.modes for v in spec.sweep for s in spec.seeds]
    workers = workers or thread_budget()
    if workers == 1 or len(jobs) == 1:
        outcomes = [run_cell(*job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            outcomes = list(pool.map(_run_cell_args, jobs))
    write_curves(spec, out)
    return outcomes


# Report checks ---------------------------------------------------------------

def check_report(report: OptimizationReport, scenario: Scenario, tol: float = 1e-8) -> list[str]:
    """Problems found when re-checking a stored report against its scenario."""
    problems = []
    if report.fingerprint != scenario.fingerprint():
        problems.append("fingerprint does not match the stored scenario")
    layout = ElementLayout.from_dict(report.layout, scenario.system.aperture_m)
    if layout.mode is Mode.FP:
        moved = not np.allclose(default_layout(Mode.FP, scenario.system).offsets, layout.offsets, atol=1e-12)
    else:
        moved = not np.allclose(clamp_to_mode(layout, layout.encoding()).offsets, layout.offsets, atol=1e-12)
    if moved:
        problems.append("layout lies outside its mode's movable region")
    viol = min_distance_violations(layout.offsets, scenario.system.min_spacing_m)
    if viol != report.violations:
        problems.append(f"stored violations {report.violations} != recomputed {viol}")
    if report.coefficients is not None:
        try:
            c = StarsCoefficients.from_dict(report.coefficients)
        except ValueError as exc:
            problems.append(f"coefficients: {exc}")
        else:
            if np.max(np.abs(c.amp_t ** 2 + c.amp_r ** 2 - 1)) > tol:
                problems.append("energy splitting violated")
    if report.precoders is not None:
        p = np.sum(np.abs(report.precoders) ** 2, axis=tuple(range(1, report.precoders.ndim)))
        if np.any(p > scenario.system.power_per_subcarrier + tol):
            problems.append("per-subcarrier power budget exceeded")
    if report.objective == "array_gain" and "gains" in report.extra:
        g = band_gains(layout.offsets, scenario.geometry.users[report.extra.get("user", 0)],
                       scenario.geometry.stars_center, scenario.angles,
                       np.asarray(report.extra["freq_hz"]), scenario.system.center_freq_hz)
        if not np.allclose(g, report.extra["gains"], atol=1e-9):
            problems.append("stored gains differ from the recomputed ones")
    return problems


# Plot data -------------------------------------------------------------------

def _load_report(d: Path) -> OptimizationReport | None:
    path = d / "report.json"
    if not path.exists() or (d / "failure.json").exists():
        return None
    return OptimizationReport.load(path)


def _fmt(x) -> str:
    return NA if x is None or (isinstance(x, float) and not math.isfinite(x)) else repr(float(x))


def _experiment_dirs(path: Path) -> list[Path]:
    if (path / "experiment.json").exists():
        return [path]
    return sorted(p.parent for p in path.glob("*/experiment.json"))


def emit_plot_data(path) -> list[Path]:
    """Write ``plotdata.csv`` (one row per point) and ``summary.csv`` (seed
    means) into each experiment directory under ``path``. Missing or failed
    cells appear as rows of ``NA``."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"{path} is not a directory")
    dirs = _experiment_dirs(path)
    if not dirs:
        raise FileNotFoundError(f"no experiment results under {path}")
    written = []
    for root in dirs:
        spec = ExperimentSpec.from_dict(json.loads((root / "experiment.json").read_text()))
        kind, key = spec.experiment.kind, spec.experiment.sweep
        if kind in ("squint", "gain"):
            cols, summary_col = ["freq_hz", "gain"], "min_gain"
        elif kind == "convergence":
            cols, summary_col = ["iter", "global_best_fitness", "violations_at_best"], "final_fitness"
        else:
            cols, summary_col = ["sum_rate", "violations"], "sum_rate"
        rows, summary = [], []
        for mode in spec.modes:
            for v in spec.sweep:
                values = []
                for seed in spec.seeds:
                    rep = _load_report(cell_dir(path.parent if root == path else path, spec, mode, v, seed))
                    head = [mode, format_value(v), str(seed)]
                    if rep is None:
                        rows.append(head + [NA] * len(cols))
                        continue
                    if kind in ("squint", "gain"):
                        rows += [head + [_fmt(f), _fmt(g)] for f, g in zip(rep.extra["freq_hz"], rep.extra["gains"])]
                        values.append(rep.extra["min_gain"])
                    elif kind == "convergence":
                        rows += [head + [str(r.iteration), _fmt(r.global_best_fitness), str(r.violations_at_best)]
                                 for r in rep.swarm_trace]
                        values.append(rep.swarm_trace[-1].global_best_fitness if rep.swarm_trace else None)
                    else:
                        rows.append(head + [_fmt(rep.value), str(rep.violations)])
                        values.append(rep.value)
                ok = [x for x in values if x is not None and math.isfinite(x)]
                summary.append([mode, format_value(v), str(len(ok)), _fmt(float(np.mean(ok)) if ok else None)])
        plot = root / "plotdata.csv"
        with plot.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mode", key, "seed"] + cols)
            w.writerows(rows)
        summ = root / "summary.csv"
        with summ.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mode", key, "n_seeds", f"mean_{summary_col}"])
            w.writerows(summary)
        written += [plot, summ]
    return written


# Entry point -----------------------------------------------------------------

def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mestars", description="ME-STARS near-field wideband experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment sweep")
    r.add_argument("experiment", choices=sorted(EXPERIMENTS))
    r.add_argument("--scenario", help="scenario JSON (default: packaged paper_setup.json)")
    r.add_argument("--modes", type=_csv_list, help="comma list of rb,hb,vb,db,fp")
    r.add_argument("--seeds", type=_csv_list, default=[str(s) for s in DEFAULT_SEEDS],
                   help="comma list of integer seeds (default 0,1,2)")
    r.add_argument("--sweep", type=_csv_list, help="comma list of sweep values")
    r.add_argument("--paper-scale", action="store_true", help="use the scenario's full size and swarm")
    r.add_argument("--particles", type=int, help="override the swarm size")
    r.add_argument("--iterations", type=int, help="override the swarm iteration count")
    r.add_argument("--out", default="results", help="output root (default: results)")

    v = sub.add_parser("validate", help="validate a scenario file")
    v.add_argument("scenario")

    d = sub.add_parser("plotdata", help="merge a result directory into tidy CSV")
    d.add_argument("dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                s = load_scenario(args.scenario).validate()
        except (ValidationError, OSError, json.JSONDecodeError) as exc:
            print(f"invalid: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        print(f"ok {s.fingerprint()}")
        return EXIT_OK

    if args.command == "plotdata":
        try:
            paths = emit_plot_data(args.dir)
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        except Exception as exc:  # noqa: BLE001
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        for path in paths:
            print(path)
        return EXIT_OK

    try:
        spec = ExperimentSpec(args.experiment, args.scenario,
                              tuple(float(x) for x in args.sweep) if args.sweep else (),
                              tuple(args.modes or ()), tuple(int(s) for s in args.seeds), args.paper_scale,
                              args.particles, args.iterations)
        workers = thread_budget()
        base_scenario(spec).validate(warn=False)
    except (ValidationError, ValueError, OSError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    outcomes = run_experiment(spec, args.out, workers)
    failed = [o for o in outcomes if not o["ok"]]
    for o in outcomes:
        print(("ok   " if o["ok"] else "FAIL ") + o["cell"] + ("" if o["ok"] else f"  {o['error']}"))
    return EXIT_RUNTIME if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
