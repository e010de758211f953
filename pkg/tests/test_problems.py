import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog, minimize

from dynchance.gaussian import GaussianSpec, TruncationRegion, sample_noise
from dynchance.instances import reservoir_model, reservoir_stages
from dynchance.problems import (
    box_support_max,
    build_p1,
    build_p2,
    build_p4,
    build_problem,
    build_truncated,
    ellipsoid_support_max,
    policy_feasibility,
    value_chain_check,
)
from dynchance.projection import project_box
from dynchance.reformulation import (
    ConstraintGroup,
    LinearDecisionRule,
    StageSystem,
    box_bounds,
    hard_polyhedral,
)
from dynchance.solver import SolverOptions
from dynchance.timeseries import compact_form, decompose_coefficients


def _setup(T=3, **kw):
    model = reservoir_model(T=T)
    cf = compact_form(decompose_coefficients(model), model)
    return reservoir_stages(T=T, **kw), cf, GaussianSpec(cf.Sigma)


def _group_residual(stage, grp, z, xi):
    """Row residuals ``A z + B xi - b`` of a group along scenarios, straight from stage data."""
    out = []
    for t in range(stage.T):
        r = -grp.b[t][None, :].repeat(xi.shape[0], 0)
        for tau in range(t + 1):
            r = r + z[tau] @ grp.A[t][tau].T + xi[:, tau] @ grp.B[t][tau].T
        out.append(r)
    return np.concatenate(out, axis=1)


# ------------------------------------------------------------ support maxima

@settings(max_examples=80, deadline=None)
@given(d=st.integers(1, 10), seed=st.integers(0, 10**6))
def test_box_support_matches_vertex_enumeration(d, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=d)
    x[rng.random(d) < 0.2] = 0.0
    lower = rng.normal(size=d)
    upper = lower + rng.exponential(size=d)
    best = max(float(x @ np.array(v)) for v in itertools.product(*zip(lower, upper)))
    assert box_support_max(x, lower, upper) == best


def test_ellipsoid_support_matches_numeric_max(rng):
    for _ in range(10):
        d = int(rng.integers(1, 6))
        root = rng.normal(size=(d, d))
        shape = root @ root.T + 0.2 * np.eye(d)
        w, center, radius = rng.normal(size=d), rng.normal(size=d), rng.uniform(0.5, 3.0)
        inv = np.linalg.inv(shape)
        res = minimize(lambda e: -w @ e, center, jac=lambda e: -w, method="SLSQP",
                       constraints=[{"type": "ineq", "fun": lambda e: radius ** 2 - (e - center) @ inv @ (e - center),
                                     "jac": lambda e: -2 * inv @ (e - center)}],
                       options={"ftol": 1e-14, "maxiter": 500})
        assert abs(ellipsoid_support_max(w, center, shape, radius) - (-res.fun)) <= 1e-6


def test_support_validation():
    with pytest.raises(ValueError):
        box_support_max([1.0], [1.0], [0.0])
    with pytest.raises(ValueError):
        ellipsoid_support_max([1.0, 0.0], [0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]], 1.0)


# ------------------------------------------------------- hard-row soundness

def _tracking_stage(T=3):
    """``0 <= y_1 <= 3`` and ``|y_t - y_{t-1} - xi_{t-1}| <= 1``: rows coupling stages, no current noise."""
    base = reservoir_stages(T=T)
    A, B, b = [base.hard.A[0]], [base.hard.B[0]], [base.hard.b[0]]
    for t in range(1, T):
        A.append([np.zeros((2, 1))] * (t - 1) + [np.array([[-1.0], [1.0]]), np.array([[1.0], [-1.0]])])
        B.append([np.zeros((2, 1))] * (t - 1) + [np.array([[-1.0], [1.0]]), np.zeros((2, 1))])
        b.append(np.array([1.0, 1.0]))
    return StageSystem(n=base.n, M=1, soft=base.soft, prob=base.prob, hard=ConstraintGroup(A, B, b),
                       h=base.h, penalty=base.penalty, p=base.p)


def test_hard_polyhedral_points_never_violate(rng):
    _, cf, spec = _setup()
    stage = _tracking_stage()
    lin = hard_polyhedral(stage, cf)
    nx = lin.A_ub.shape[1]
    vertices = []
    for _ in range(6):
        res = linprog(rng.normal(size=nx), A_ub=lin.A_ub, b_ub=lin.b_ub,
                      A_eq=lin.A_eq if lin.b_eq.size else None, b_eq=lin.b_eq if lin.b_eq.size else None,
                      bounds=[(-10, 10)] * nx, method="highs")
        assert res.status == 0
        vertices.append(res.x)
    weights = rng.dirichlet(np.ones(len(vertices)), size=4)
    points = vertices + list(weights @ np.array(vertices))
    xi = cf.xi_from_eps(sample_noise(spec, 100_000, seed=3))
    for x in points:
        assert lin.satisfied(x, 1e-9, 1e-9)
        z = LinearDecisionRule.from_vector(x, stage.n, stage.M).evaluate(xi)
        assert _group_residual(stage, stage.hard, z, xi).max() <= 1e-9


def test_p1_is_static_under_box_hard_rows(reservoir):
    stage, cf, spec = reservoir
    inst = build_p1(stage, cf, spec)
    rep = inst.solve(SolverOptions(starts=2))
    assert rep.success, rep.message
    assert inst.rule(rep.x).max_abs_F <= 1e-8
    assert rep.probability >= stage.p - 1e-6


def test_p1_rejects_here_and_now_hard_rows():
    stage, cf, spec = _setup(hard_floor=0.0)
    with pytest.raises(ValueError):
        build_p1(stage, cf, spec)


# -------------------------------------------------------- projected formulations

def test_p2_projected_cost_matches_sampling(reservoir, rng):
    stage, cf, spec = reservoir
    inst = build_p2(stage, cf, spec, seed=0)
    x = np.array([1.0, 0.4, 0.8, 0.2, -0.3, 1.2])
    rule = inst.rule(x)
    eps = sample_noise(spec, 400_000, seed=77)
    xi = cf.xi_from_eps(eps)
    z = project_box(rule, xi, box_bounds(stage))
    cost = sum(zt @ h for zt, h in zip(z, stage.h))
    soft = np.maximum(_group_residual(stage, stage.soft, z, xi), 0.0) @ np.concatenate(stage.penalty)
    sample = cost + soft
    se = sample.std() / np.sqrt(sample.size)
    assert abs(inst.cost(x) - sample.mean()) <= 4 * se


def test_p4_partition_matches_sampling():
    stage, cf, spec = _setup(T=2)
    inst = build_p4(stage, cf, spec, seed=0)
    for k, x in enumerate([[0.676, -0.6, 3.368], [1.404, -0.591, 0.392], [0.765, -0.165, 1.523]]):
        x = np.array(x)
        mass, _ = inst.info["partition_mass"](x)
        assert abs(mass - 1.0) <= 1e-6
        res = policy_feasibility(inst, x, n=200_000, seed=500 + 10 * k)
        assert abs(inst.probability(x) - res["probability"]) <= 3 * res["std"] + 1e-4


def test_p3_p4_need_box_hard_rows():
    stage, cf, spec = _setup()
    coupled = _tracking_stage()
    for kind in ("P3", "P4"):
        with pytest.raises(ValueError, match="per-stage bounds"):
            build_problem(kind, coupled, cf, spec)


# ------------------------------------------------------------ truncated noise

def test_truncated_box_solution_is_robust():
    stage, cf, spec = _setup(level0=4.0, l_min=3.0, l_max=7.0, hard_floor=0.0)
    trunc = TruncationRegion.box(-2 * np.ones(3), 2 * np.ones(3))
    inst = build_truncated(stage, cf, spec, trunc, seed=0)
    rep = inst.solve(SolverOptions(starts=2))
    assert rep.max_violation <= 1e-6
    res = policy_feasibility(inst, rep.x, n=100_000, seed=9, tol=0.0)
    assert res["hard_violations"] == 0
    assert res["probability"] >= stage.p - 3 * res["std"]


def test_truncated_hard_rows_infeasible_on_wide_box():
    # at the all-minus corner the cumulative inflow is -2.5, so the level floor cannot hold
    stage, cf, spec = _setup(hard_floor=0.0)
    trunc = TruncationRegion.box(-2 * np.ones(3), 2 * np.ones(3))
    rep = build_truncated(stage, cf, spec, trunc, seed=0).solve(SolverOptions(starts=1))
    assert not rep.success and rep.message.startswith("phase-1 infeasible")


def test_truncated_needs_bounded_region():
    stage, cf, spec = _setup(hard_floor=0.0)
    with pytest.raises(ValueError, match="bounded"):
        build_truncated(stage, cf, spec, None)
    with pytest.raises(ValueError, match="dimension"):
        build_truncated(stage, cf, spec, TruncationRegion.box(-np.ones(2), np.ones(2)))


# ---------------------------------------------------------------- chain check

def test_value_chain_check_on_plain_values():
    good = value_chain_check({"P1": -4.0, "P2": -5.0, "P3": -5.0005, "P4": -6.0})
    assert good.ok and len(good.checks) == 3
    bad = value_chain_check({"P1": -4.0, "P2": -5.0, "P3": -4.5, "P4": -6.0})
    assert not bad.ok
    assert [c[1] for c in bad.checks] == [True, False, True]
    assert bad.summary().splitlines()[1].startswith("FAIL phi_2 >= phi_3")


def test_build_problem_validation(reservoir):
    stage, cf, spec = reservoir
    with pytest.raises(ValueError, match="unknown problem kind"):
        build_problem("P9", stage, cf, spec)
    hi = reservoir_stages(p=1.0)
    with pytest.raises(ValueError, match="probability level"):
        build_problem("P1", hi, cf, spec)
