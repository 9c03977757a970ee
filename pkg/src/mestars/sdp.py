"""Small dense semidefinite programs.

A :class:`ConeProblem` has one or more matrix blocks ``X_b`` (real symmetric
or complex Hermitian, all constrained PSD), a linear objective
``sum_b Re Tr(C_b X_b)`` and affine constraints
``sum_b Re Tr(A_ib X_b) (<=|=|>=) bound_i``.

The numerical work is delegated to Clarabel. A Hermitian ``n x n`` block is
parameterised by its ``n^2`` real degrees of freedom and its PSD constraint
is imposed on the real embedding ``[[Re X, -Im X], [Im X, Re X]]``.
:func:`check_certificate` recomputes every residual from the returned
matrices and multipliers without using anything the solver reports.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import clarabel
import numpy as np
import scipy.sparse as sp

RELATIONS = ("<=", "=", ">=")
OPTIMAL, INFEASIBLE, MAX_ITER = "optimal", "infeasible", "max_iter"
REGULARIZATION = 1e-10
INNER_TOL_FACTOR = 1e-3
_SQRT2 = math.sqrt(2.0)


class SdpError(RuntimeError):
    pass


@dataclass(eq=False)
class Constraint:
    """``sum_b Re Tr(coeffs[b] X_b) relation bound``; absent blocks contribute 0."""

    coeffs: dict[int, np.ndarray]
    relation: str
    bound: float
    label: str = ""

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ValueError(f"relation must be one of {RELATIONS}, got {self.relation!r}")
        self.bound = float(self.bound)


@dataclass
class ConeProblem:
    """Linear objective over PSD blocks with affine constraints.

    ``blocks[b]`` is the dimension of block ``b``; ``hermitian[b]`` selects a
    complex Hermitian (True) or real symmetric (False) block. ``objective``
    maps block index to its coefficient matrix; ``sense`` is ``"min"`` or
    ``"max"``.
    """

    blocks: list[int]
    hermitian: list[bool]
    objective: dict[int, np.ndarray]
    constraints: list[Constraint] = field(default_factory=list)
    sense: str = "min"

    def __post_init__(self):
        if len(self.blocks) != len(self.hermitian):
            raise ValueError("blocks and hermitian flags differ in length")
        if not self.blocks:
            raise ValueError("problem has no blocks")
        if self.sense not in ("min", "max"):
            raise ValueError("sense must be 'min' or 'max'")
        if any(int(n) != n or n < 1 for n in self.blocks):
            raise ValueError("block dimensions must be positive integers")
        for where, coeffs in [("objective", self.objective)] + [
                (f"constraint {i}", c.coeffs) for i, c in enumerate(self.constraints)]:
            for b, mat in coeffs.items():
                self._check_coeff(where, b, mat)

    def _check_coeff(self, where, b, mat):
        if not 0 <= b < len(self.blocks):
            raise ValueError(f"{where}: no block {b}")
        n = self.blocks[b]
        mat = np.asarray(mat)
        if mat.shape != (n, n):
            raise ValueError(f"{where}: block {b} expects {n}x{n} coefficients, got {mat.shape}")
        if not self.hermitian[b] and np.iscomplexobj(mat) and np.any(mat.imag != 0):
            raise ValueError(f"{where}: complex coefficients on real block {b}")
        scale = max(1.0, float(np.max(np.abs(mat), initial=0.0)))
        if np.max(np.abs(mat - mat.conj().T), initial=0.0) > 1e-9 * scale:
            raise ValueError(f"{where}: block {b} coefficients are not Hermitian")

    def value(self, blocks) -> float:
        """Objective at the given block matrices (in the problem's own sense)."""
        return _functional(self.objective, blocks)

    def to_json(self) -> str:
        """Dump for offline cross-checking; complex entries as ``[re, im]``."""
        def mat(a):
            a = np.asarray(a, dtype=complex)
            return np.stack([a.real, a.imag], axis=-1).reshape(-1, 2).tolist()

        return json.dumps({
            "blocks": list(map(int, self.blocks)),
            "hermitian": list(map(bool, self.hermitian)),
            "sense": self.sense,
            "objective": {str(b): mat(c) for b, c in self.objective.items()},
            "constraints": [{"relation": c.relation, "bound": c.bound, "label": c.label,
                             "coeffs": {str(b): mat(m) for b, m in c.coeffs.items()}}
                            for c in self.constraints],
        })

    @classmethod
    def from_json(cls, text: str) -> "ConeProblem":
        d = json.loads(text)
        blocks = d["blocks"]

        def mat(b, flat):
            a = np.asarray(flat, dtype=float)
            return (a[:, 0] + 1j * a[:, 1]).reshape(blocks[int(b)], blocks[int(b)])

        def coeffs(dd, herm):
            out = {}
            for b, flat in dd.items():
                m = mat(b, flat)
                out[int(b)] = m if herm[int(b)] else m.real
            return out

        herm = d["hermitian"]
        cons = [Constraint(coeffs(c["coeffs"], herm), c["relation"], c["bound"], c.get("label", ""))
                for c in d["constraints"]]
        return cls(blocks, herm, coeffs(d["objective"], herm), cons, d["sense"])


@dataclass
class ResidualReport:
    primal: float
    dual: float
    gap: float
    primal_objective: float
    dual_objective: float
    worst_constraint: str = ""

    def ok(self, tol: float) -> bool:
        return self.primal <= tol and self.dual <= tol and self.gap <= tol


@dataclass
class ConeSolution:
    """Block values plus multipliers.

    ``duals`` are the multipliers ``y`` of the minimisation form (objective
    negated for ``max`` problems): ``Z_b = C_b - sum_i y_i A_ib`` must be PSD,
    ``y_i <= 0`` for ``<=`` rows and ``y_i >= 0`` for ``>=`` rows.
    """

    blocks: list[np.ndarray]
    status: str
    objective: float
    residuals: ResidualReport
    duals: np.ndarray
    iterations: int = 0
    regularized: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def _functional(coeffs: dict[int, np.ndarray], blocks) -> float:
    total = 0.0
    for b, c in coeffs.items():
        total += float(np.real(np.sum(np.asarray(c).T * blocks[b])))
    return total


# Parameterisation ---------------------------------------------------------

def _svec_index(n: int) -> dict[tuple[int, int], int]:
    """Position of upper-triangular entry (i, j), i <= j, column-wise."""
    idx = {}
    k = 0
    for j in range(n):
        for i in range(j + 1):
            idx[i, j] = k
            k += 1
    return idx


class _BlockMap:
    """Real parameters of one block and the linear maps built from them."""

    def __init__(self, n: int, hermitian: bool):
        self.n = n
        self.hermitian = hermitian
        pairs = [(i, j) for j in range(n) for i in range(j + 1)]
        self.re_params = pairs
        self.im_params = [(i, j) for (i, j) in pairs if i < j] if hermitian else []
        self.size = len(self.re_params) + len(self.im_params)
        self.cone_dim = 2 * n if hermitian else n
        self._re_ij = tuple(np.array(v, dtype=int).reshape(-1) for v in zip(*self.re_params))
        self._im_ij = tuple(np.array(v, dtype=int).reshape(-1) for v in zip(*self.im_params)) \
            if self.im_params else (np.empty(0, int), np.empty(0, int))

    def functional_row(self, coeff) -> np.ndarray:
        """Row ``r`` with ``r @ params == Re Tr(coeff X)``."""
        c = np.asarray(coeff)
        ri, rj = self._re_ij
        # X_ij = X_ji = a for the real parameters, X_ij = jb = -X_ji for the imaginary ones
        re = np.real(c[rj, ri] + c[ri, rj])
        re[ri == rj] /= 2
        if not self.hermitian:
            return re
        ii, ij = self._im_ij
        return np.concatenate([re, np.imag(c[ii, ij]) - np.imag(c[ij, ii])])

    def cone_triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(row, param, value) entries of the map from params to svec of the
        (embedded) block."""
        m = self.cone_dim
        sv = _svec_index(m)
        rows, cols, vals = [], [], []

        def put(i, j, p, v):
            if i > j:
                i, j = j, i
            rows.append(sv[i, j])
            cols.append(p)
            vals.append(v if i == j else v * _SQRT2)

        n = self.n
        for p, (i, j) in enumerate(self.re_params):
            put(i, j, p, 1.0)
            if self.hermitian:
                put(i + n, j + n, p, 1.0)
        off = len(self.re_params)
        for k, (i, j) in enumerate(self.im_params):
            # Im X_ij = b at (i+n, j) and (j+n, i) gets -b
            put(i + n, j, off + k, 1.0)
            put(j + n, i, off + k, -1.0)
        return np.array(rows), np.array(cols), np.array(vals)

    def unpack(self, params) -> np.ndarray:
        n = self.n
        params = np.asarray(params, dtype=float)
        ri, rj = self._re_ij
        nre = len(ri)
        x = np.zeros((n, n))
        x[ri, rj] = params[:nre]
        x[rj, ri] = params[:nre]
        if not self.hermitian:
            return x
        ii, ij = self._im_ij
        y = np.zeros((n, n))
        y[ii, ij] = params[nre:]
        y[ij, ii] = -params[nre:]
        return x + 1j * y


def _svec_identity(m: int) -> np.ndarray:
    sv = _svec_index(m)
    out = np.zeros(m * (m + 1) // 2)
    for i in range(m):
        out[sv[i, i]] = 1.0
    return out


# Solve ---------------------------------------------------------------------

def _min_eig(x) -> float:
    return float(np.linalg.eigvalsh(x)[0])


def _herm(c, hermitian: bool) -> np.ndarray:
    c = np.asarray(c)
    h = (c + c.conj().T) / 2
    return h if hermitian else np.real(h)


def check_certificate(problem: ConeProblem, solution: ConeSolution) -> ResidualReport:
    """Primal/dual/gap residuals recomputed from block values and multipliers.

    Primal: worst relative constraint violation or negative eigenvalue.
    Dual: worst negative eigenvalue of ``Z_b`` (relative) or multiplier sign
    violation. Gap: ``|p - d| / (1 + |p| + |d|)`` in the minimisation form.
    """
    sign = -1.0 if problem.sense == "max" else 1.0
    x = solution.blocks
    y = np.asarray(solution.duals, dtype=float)
    primal = 0.0
    worst = ""
    for i, c in enumerate(problem.constraints):
        lhs = _functional(c.coeffs, x)
        diff = lhs - c.bound
        if c.relation == "=":
            viol = abs(diff)
        elif c.relation == "<=":
            viol = max(diff, 0.0)
        else:
            viol = max(-diff, 0.0)
        viol /= 1.0 + abs(c.bound)
        if viol > primal:
            primal, worst = viol, c.label or f"constraint {i}"
    for b, xb in enumerate(x):
        scale = 1.0 + float(np.max(np.abs(xb), initial=0.0))
        neg = max(-_min_eig(_herm(xb, problem.hermitian[b])), 0.0) / scale
        if neg > primal:
            primal, worst = neg, f"block {b} PSD"

    dual = 0.0
    if len(y) == len(problem.constraints):
        for i, c in enumerate(problem.constraints):
            if c.relation == "<=":
                dual = max(dual, y[i])
            elif c.relation == ">=":
                dual = max(dual, -y[i])
        for b, n in enumerate(problem.blocks):
            herm = problem.hermitian[b]
            z = sign * _herm(problem.objective.get(b, np.zeros((n, n))), herm)
            for i, c in enumerate(problem.constraints):
                if b in c.coeffs:
                    z = z - y[i] * _herm(c.coeffs[b], herm)
            scale = 1.0 + float(np.max(np.abs(z), initial=0.0))
            dual = max(dual, max(-_min_eig(z), 0.0) / scale)
        d_obj = float(np.dot(y, [c.bound for c in problem.constraints]))
    else:
        dual = math.inf
        d_obj = math.nan
    p_obj = sign * problem.value(x)
    gap = abs(p_obj - d_obj) / (1.0 + abs(p_obj) + abs(d_obj)) if math.isfinite(d_obj) else math.inf
    return ResidualReport(primal, dual, gap, sign * p_obj, sign * d_obj, worst)


@functools.lru_cache(maxsize=None)
def _block_map(n: int, hermitian: bool) -> _BlockMap:
    return _BlockMap(n, hermitian)


@functools.lru_cache(maxsize=None)
def _cone_data(n: int, hermitian: bool):
    """Slack map ``s = -A x + shift * offset`` for the PSD constraint of one block.

    Real 1x1 blocks use the nonnegative cone and real 2x2 blocks the
    equivalent second-order cone ``(a + c, a - c, 2b)``; everything else uses
    Clarabel's triangular PSD cone.
    """
    m = _block_map(n, hermitian)
    if not hermitian and n == 1:
        return np.array([0]), np.array([0]), np.array([1.0]), np.array([1.0]), clarabel.NonnegativeConeT(1)
    if not hermitian and n == 2:
        # params (a, b, c) = (X00, X01, X11)
        rows = np.array([0, 0, 1, 1, 2])
        cols = np.array([0, 2, 0, 2, 1])
        vals = np.array([1.0, 1.0, 1.0, -1.0, 2.0])
        return rows, cols, vals, np.array([2.0, 0.0, 0.0]), clarabel.SecondOrderConeT(3)
    rows, cols, vals = m.cone_triplets()
    return rows, cols, vals, _svec_identity(m.cone_dim), clarabel.PSDTriangleConeT(m.cone_dim)


def _assemble(problem: ConeProblem, shift: float):
    maps = [_block_map(int(n), bool(h)) for n, h in zip(problem.blocks, problem.hermitian)]
    starts = np.cumsum([0] + [m.size for m in maps])
    nvar = int(starts[-1])
    sign = -1.0 if problem.sense == "max" else 1.0

    q = np.zeros(nvar)
    for b, c in problem.objective.items():
        q[starts[b]:starts[b + 1]] += sign * maps[b].functional_row(c)

    eq_idx = [i for i, c in enumerate(problem.constraints) if c.relation == "="]
    ineq_idx = [i for i, c in enumerate(problem.constraints) if c.relation != "="]
    order = eq_idx + ineq_idx
    n_lin = len(order)
    rows, cols, vals = [], [], []
    b_lin = np.empty(n_lin)
    for r, i in enumerate(order):
        c = problem.constraints[i]
        s = -1.0 if c.relation == ">=" else 1.0
        b_lin[r] = s * c.bound
        for b, mat in c.coeffs.items():
            coef = maps[b].functional_row(mat)
            nz = np.flatnonzero(coef)
            rows.append(np.full(nz.size, r))
            cols.append(starts[b] + nz)
            vals.append(s * coef[nz])
    b_parts = [b_lin]
    cones = []
    if eq_idx:
        cones.append(clarabel.ZeroConeT(len(eq_idx)))
    if ineq_idx:
        cones.append(clarabel.NonnegativeConeT(len(ineq_idx)))
    offset = n_lin
    for b, m in enumerate(maps):
        cr, cc, cv, ident, cone = _cone_data(m.n, m.hermitian)
        rows.append(offset + cr)
        cols.append(starts[b] + cc)
        vals.append(-cv)
        b_parts.append(shift * ident)
        cones.append(cone)
        offset += ident.size
    a = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(offset, nvar))
    rels = [problem.constraints[i].relation for i in order]
    return maps, starts, q, a, np.concatenate(b_parts), cones, order, rels


def _run(problem: ConeProblem, inner_tol: float, max_iter: int, shift: float):
    maps, starts, q, a, b, cones, order, rels = _assemble(problem, shift)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = int(max_iter)
    settings.tol_gap_abs = settings.tol_gap_rel = settings.tol_feas = inner_tol
    settings.max_threads = 1
    nvar = len(q)
    res = clarabel.DefaultSolver(sp.csc_matrix((nvar, nvar)), q, a, b, cones, settings).solve()
    x = np.asarray(res.x, dtype=float)
    z = np.asarray(res.z, dtype=float)
    blocks = [m.unpack(x[starts[i]:starts[i + 1]]) for i, m in enumerate(maps)]
    y = np.zeros(len(problem.constraints))
    for k, (i, rel) in enumerate(zip(order, rels)):
        y[i] = z[k] if rel == ">=" else -z[k]
    return res, blocks, y


def _symmetrize(blocks, hermitian):
    return [_herm(x, h) for x, h in zip(blocks, hermitian)]


def solve(problem: ConeProblem, tol: float = 1e-7, max_iter: int = 500) -> ConeSolution:
    """Solve ``problem``; status is ``optimal`` only if the recomputed
    certificate meets ``tol``.

    If the plain solve fails, it is retried once with the PSD cones relaxed to
    ``X >= -1e-10 I`` (``regularized`` is set on the result).
    """
    best = None
    for shift in (0.0, REGULARIZATION):
        res, blocks, y = _run(problem, INNER_TOL_FACTOR * tol, max_iter, shift)
        blocks = _symmetrize(blocks, problem.hermitian)
        status_name = str(res.status).split(".")[-1]
        if "Infeasible" in status_name:
            status = INFEASIBLE
        else:
            status = MAX_ITER
        sol = ConeSolution(blocks, status, problem.value(blocks), None, y, int(res.iterations), shift > 0)
        sol.residuals = check_certificate(problem, sol)
        if status != INFEASIBLE and np.all(np.isfinite(res.x)) and sol.residuals.ok(tol):
            sol.status = OPTIMAL
            return sol
        if best is None or (status == INFEASIBLE and best.status != INFEASIBLE):
            best = sol
    return best


def dump_problem(problem: ConeProblem, path) -> Path:
    path = Path(path)
    path.write_text(problem.to_json())
    return path
