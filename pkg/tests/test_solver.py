import math

import numpy as np
import pytest

from dynchance.reformulation import LinearSystem
from dynchance.solver import Constraint, NlpProblem, SolverOptions, grid_search, solve_nlp


def _disk_problem():
    """Closest point of the unit disk to (2, 1); the answer is (2, 1) / sqrt(5)."""
    return NlpProblem(
        x0=np.zeros(2),
        objective=lambda x: float((x[0] - 2) ** 2 + (x[1] - 1) ** 2),
        gradient=lambda x: np.array([2 * (x[0] - 2), 2 * (x[1] - 1)]),
        constraints=[Constraint(fun=lambda x: float(x @ x - 1.0), jac=lambda x: 2 * x)],
    )


def test_nonlinear_constraint_solution():
    rep = solve_nlp(_disk_problem(), SolverOptions(starts=3))
    assert rep.success, rep.message
    np.testing.assert_allclose(rep.x, np.array([2.0, 1.0]) / math.sqrt(5), atol=1e-6)
    assert rep.kkt_residual <= 1e-6


def test_equality_elimination():
    # min ||x||^2 subject to x1 + x2 + x3 = 3 and x3 <= 0.5
    lin = LinearSystem(np.ones((1, 3)), np.array([3.0]), np.array([[0.0, 0.0, 1.0]]), np.array([0.5]))
    prob = NlpProblem(x0=np.zeros(3), objective=lambda x: float(x @ x), gradient=lambda x: 2 * x, linear=lin)
    rep = solve_nlp(prob, SolverOptions(starts=2))
    assert rep.success, rep.message
    np.testing.assert_allclose(rep.x, [1.25, 1.25, 0.5], atol=1e-7)


def test_inconsistent_linear_constraints_are_declared():
    lin = LinearSystem(np.zeros((0, 1)), np.zeros(0), np.array([[1.0], [-1.0]]), np.array([0.0, -1.0]))
    prob = NlpProblem(x0=np.zeros(1), objective=lambda x: float(x[0]), gradient=lambda x: np.ones(1), linear=lin)
    rep = solve_nlp(prob)
    assert not rep.success
    assert rep.message.startswith("phase-1 infeasible")


def test_unreachable_nonlinear_constraint_is_declared():
    # x^2 + 1 <= 0 has no solution
    prob = NlpProblem(
        x0=np.array([0.3]),
        objective=lambda x: float(x[0] ** 2),
        gradient=lambda x: 2 * x,
        constraints=[Constraint(fun=lambda x: float(x[0] ** 2 + 1), jac=lambda x: 2 * x)],
    )
    rep = solve_nlp(prob, SolverOptions(starts=2))
    assert not rep.success
    assert "no start reached a feasible point" in rep.message


def test_reports_are_deterministic():
    a = solve_nlp(_disk_problem(), SolverOptions(starts=4, seed=3)).to_dict()
    b = solve_nlp(_disk_problem(), SolverOptions(starts=4, seed=3)).to_dict()
    assert a == b
    assert "wall_time" not in a


def test_never_worse_than_a_feasible_start():
    # nonconvex objective with a feasible start at the global minimum
    prob = NlpProblem(
        x0=np.array([-1.0]),
        objective=lambda x: float((x[0] ** 2 - 1) ** 2 + 0.1 * x[0]),
        gradient=lambda x: np.array([4 * x[0] * (x[0] ** 2 - 1) + 0.1]),
    )
    rep = solve_nlp(prob, SolverOptions(starts=1))
    assert rep.objective <= prob.objective(np.array([-1.0])) + 1e-12


def test_grid_search_one_and_two_axes():
    point, value = grid_search(lambda a: (a - 0.3) ** 2, [(0.0, 1.0)], resolution=100)
    assert abs(point[0] - 0.3) < 1e-6 and value < 1e-12
    point, value = grid_search(lambda a, b: (a - 0.123) ** 2 + (b + 0.456) ** 2, [(-1, 1), (-1, 1)],
                               resolution=200, feasible=lambda a, b: a + b <= 0.0)
    np.testing.assert_allclose(point, [0.123, -0.456], atol=1e-6)


def test_grid_search_respects_feasibility():
    point, value = grid_search(lambda a: -a, [(0.0, 1.0)], resolution=100, feasible=lambda a: a <= 0.5)
    assert point[0] <= 0.5 and value == pytest.approx(-0.5, abs=1e-12)


def test_grid_search_validation():
    with pytest.raises(ValueError):
        grid_search(lambda a: a, [(0, 1)], resolution=10)
    with pytest.raises(ValueError):
        grid_search(lambda a, b, c: a, [(0, 1)] * 3)
    with pytest.raises(ValueError):
        grid_search(lambda a: a, [(0, 1)], feasible=lambda a: a > 2)
