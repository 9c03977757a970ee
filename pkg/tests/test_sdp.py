import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from mestars import sdp
from mestars.sdp import ConeProblem, Constraint, check_certificate, solve


def _herm(rng, n, complex_=True):
    a = rng.standard_normal((n, n)) + (1j * rng.standard_normal((n, n)) if complex_ else 0)
    return (a + a.conj().T) / 2


def _eig_problem(c, hermitian):
    n = len(c)
    return ConeProblem([n], [hermitian], {0: c}, [Constraint({0: np.eye(n)}, "=", 1.0, "trace")], "max")


def test_minimise_scalar_cone():
    sol = solve(ConeProblem([1], [False], {0: np.eye(1)}))
    assert sol.optimal
    assert sol.objective == pytest.approx(0.0, abs=1e-7)


@pytest.mark.parametrize("hermitian", [True, False])
@pytest.mark.parametrize("n", [1, 3, 8, 16])
def test_eigenvalue_oracle(rng, n, hermitian):
    c = _herm(rng, n, hermitian)
    sol = solve(_eig_problem(c, hermitian))
    vals, vecs = np.linalg.eigh(c)
    assert sol.optimal
    assert sol.objective == pytest.approx(vals[-1], rel=1e-6, abs=1e-9)
    if vals[-1] - vals[-2 if n > 1 else -1] > 1e-3 or n == 1:
        v = vecs[:, -1]
        assert np.allclose(sol.blocks[0], np.outer(v, v.conj()), atol=1e-4)


def test_diag_sum_trace_identity(rng):
    m = 5
    cons = []
    for i in range(m):
        e = np.zeros((m, m))
        e[i, i] = 1
        cons.append(Constraint({0: e, 1: e}, "=", 1.0))
    sol = solve(ConeProblem([m, m], [True, True], {0: np.eye(m)}, cons, "max"))
    assert sol.optimal
    assert sol.objective == pytest.approx(m, rel=1e-7)


@given(st.integers(0, 10_000))
@settings(max_examples=25)
def test_lp_oracle(seed):
    rng = np.random.default_rng(seed)
    n, k = 4, 3
    a = rng.uniform(0.1, 1.0, (k, n))
    b = rng.uniform(1.0, 2.0, k)
    c = rng.uniform(-1, 1, n)
    ref = linprog(c, A_ub=a, b_ub=b, bounds=[(0, None)] * n)
    blocks = [1] * n
    cons = [Constraint({j: np.array([[a[i, j]]]) for j in range(n)}, "<=", b[i]) for i in range(k)]
    sol = solve(ConeProblem(blocks, [False] * n, {j: np.array([[c[j]]]) for j in range(n)}, cons))
    assert sol.optimal
    assert sol.objective == pytest.approx(ref.fun, abs=1e-6)


def test_unitary_reparameterisation_invariance(rng):
    n = 5
    c = _herm(rng, n)
    a = _herm(rng, n)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))

    def problem(cc, aa):
        return ConeProblem([n], [True], {0: cc},
                           [Constraint({0: np.eye(n)}, "=", 1.0), Constraint({0: aa}, "<=", 0.1)], "max")

    v1 = solve(problem(c, a)).objective
    v2 = solve(problem(q @ c @ q.conj().T, q @ a @ q.conj().T)).objective
    assert v1 == pytest.approx(v2, abs=1e-6)


def test_certificate_perturbation(rng):
    p = _eig_problem(_herm(rng, 4), True)
    sol = solve(p)
    base = check_certificate(p, sol).primal
    for eps in (1e-4, 1e-3, 1e-2):
        bumped = [b.copy() for b in sol.blocks]
        bumped[0][0, 0] += eps
        rep = check_certificate(p, sdp.ConeSolution(bumped, sol.status, 0.0, None, sol.duals))
        assert rep.primal >= 0.4 * eps
        assert rep.primal > base


def test_certificate_zero_matrix_flags_equality():
    p = _eig_problem(np.eye(3), True)
    rep = check_certificate(p, sdp.ConeSolution([np.zeros((3, 3))], "x", 0.0, None, np.zeros(1)))
    assert rep.primal == pytest.approx(0.5)
    assert rep.worst_constraint == "trace"


def test_optimal_residuals_within_tol(rng):
    p = _eig_problem(_herm(rng, 6), True)
    sol = solve(p, tol=1e-8)
    assert sol.residuals.ok(1e-8)
    for blk in sol.blocks:
        assert np.min(np.linalg.eigvalsh(blk)) >= -1e-8


def test_infeasible_reported():
    p = ConeProblem([2], [False], {0: np.eye(2)},
                    [Constraint({0: np.eye(2)}, "=", 1.0), Constraint({0: np.eye(2)}, "<=", 0.5)])
    sol = solve(p)
    assert not sol.optimal
    assert sol.status == sdp.INFEASIBLE


def test_problem_validation():
    with pytest.raises(ValueError, match="Hermitian"):
        ConeProblem([2], [True], {0: np.array([[0, 1], [0, 0]])})
    with pytest.raises(ValueError, match="complex"):
        ConeProblem([2], [False], {0: np.array([[0, 1j], [-1j, 0]])})
    with pytest.raises(ValueError, match="expects"):
        ConeProblem([2], [False], {0: np.eye(3)})
    with pytest.raises(ValueError, match="relation"):
        Constraint({0: np.eye(2)}, "<", 1.0)


def test_json_roundtrip(rng, tmp_path):
    p = ConeProblem([3, 2], [True, False], {0: _herm(rng, 3), 1: _herm(rng, 2, False)},
                    [Constraint({0: np.eye(3), 1: np.eye(2)}, "=", 1.0, "t")], "max")
    q = ConeProblem.from_json(sdp.dump_problem(p, tmp_path / "p.json").read_text())
    assert q.blocks == p.blocks and q.sense == "max"
    assert solve(q).objective == pytest.approx(solve(p).objective, abs=1e-9)
