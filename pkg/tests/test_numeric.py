import numpy as np
import pytest

from conftest import make_random_net
from relubab.model import NeuronId, evaluate_batch
from relubab.numeric import (BoundedSimplex, Conflict, LPIterationError,
                             LPProblem, Phase, build_relaxation,
                             propagate_intervals, solve_lp, solve_relaxation,
                             tighten_bounds_lp, triangle_relaxation)
from relubab.query import OutputConstraint

N1 = NeuronId(0, 0)
N2 = NeuronId(0, 1)


class TestPropagateIntervals:
    def test_toy_full_box(self, toy):
        # hand interval arithmetic: 2*x1 in [-2,2]; x1-x2 in [-2,1];
        # y = -relu(n1) + relu(n2) in [-2,1]
        b = propagate_intervals(toy, toy.input_lower, toy.input_upper, {})
        assert b.pre(N1) == (-2.0, 2.0)
        assert b.pre(N2) == (-2.0, 1.0)
        assert (b.output_lower[0], b.output_upper[0]) == (-2.0, 1.0)

    def test_toy_both_inactive(self, toy):
        b = propagate_intervals(toy, toy.input_lower, toy.input_upper,
                                {N1: Phase.INACTIVE, N2: Phase.INACTIVE})
        assert b.post(N1) == (0.0, 0.0)
        assert b.post(N2) == (0.0, 0.0)
        assert (b.output_lower[0], b.output_upper[0]) == (0.0, 0.0)

    def test_contradictory_phase_conflicts(self, toy):
        # shrink the box so n1's pre-activation is at least 0.5
        with pytest.raises(Conflict):
            propagate_intervals(toy, np.array([0.25, 0.0]),
                                np.array([1.0, 1.0]), {N1: Phase.INACTIVE})

    def test_active_clips_pre_lower(self, toy):
        b = propagate_intervals(toy, toy.input_lower, toy.input_upper,
                                {N1: Phase.ACTIVE})
        assert b.pre(N1) == (0.0, 2.0)
        assert b.post(N1) == (0.0, 2.0)

    def test_soundness_random(self):
        # sampled points consistent with the imposed phases stay inside
        rng = np.random.default_rng(42)
        checked = 0
        for _ in range(1000):
            net = make_random_net(rng)
            ids = net.relu_ids()
            phases = {nid: Phase(rng.choice(["active", "inactive"]))
                      for nid in ids if rng.random() < 0.25}
            try:
                bounds = propagate_intervals(net, net.input_lower,
                                             net.input_upper, phases)
            except Conflict:
                continue
            xs = rng.uniform(-1, 1, size=(100, net.input_dim))
            a = xs.T
            ok = np.ones(xs.shape[0], dtype=bool)
            for k, layer in enumerate(net.layers):
                pre = layer.weight @ a + layer.bias[:, None]
                if not layer.has_relu:
                    continue
                for nid, ph in phases.items():
                    if nid.layer != k:
                        continue
                    if ph is Phase.ACTIVE:
                        ok &= pre[nid.index] >= 0
                    else:
                        ok &= pre[nid.index] <= 0
                inside = (pre[:, ok] >= bounds.pre_lower[k][:, None] - 1e-9) \
                    & (pre[:, ok] <= bounds.pre_upper[k][:, None] + 1e-9)
                assert inside.all()
                checked += int(ok.sum())
                a = np.maximum(pre, 0.0)
                for nid, ph in phases.items():
                    if nid.layer == k and ph is Phase.INACTIVE:
                        a[nid.index] = 0.0
        assert checked > 10_000


class TestTriangleRelaxation:
    def test_symmetric_interval(self):
        tri = triangle_relaxation(-1.0, 1.0)
        assert tri.slope == 0.5
        # upper constraint is post <= 0.5 * (pre + 1)
        assert tri.rows[2] == (-0.5, 1.0, 0.5)

    def test_point_inside(self):
        assert triangle_relaxation(-1, 1).satisfied(0.0, 0.5)

    def test_point_violates_upper(self):
        assert not triangle_relaxation(-1, 1).satisfied(-1.0, 0.1)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            triangle_relaxation(0.0, 1.0)
        with pytest.raises(ValueError):
            triangle_relaxation(-1.0, -0.5)

    def test_contains_relu_graph(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = -float(rng.uniform(0.1, 5))
            b = float(rng.uniform(0.1, 5))
            tri = triangle_relaxation(a, b)
            for pre in rng.uniform(a, b, size=100):
                assert tri.satisfied(float(pre), max(0.0, float(pre)),
                                     tol=1e-9)


class TestSolveLP:
    def test_maximize_box(self):
        res = solve_lp(LPProblem(lower=np.array([0.0]), upper=np.array([1.0]),
                                 objective=np.array([1.0]), maximize=True))
        assert res.feasible
        assert res.objective == pytest.approx(1.0, abs=1e-9)
        assert res.x[0] == pytest.approx(1.0, abs=1e-9)

    def test_infeasible_pair(self):
        res = solve_lp(LPProblem(
            lower=np.array([-10.0]), upper=np.array([10.0]),
            a_ub=np.array([[1.0], [-1.0]]), b_ub=np.array([0.0, -1.0])))
        assert res.status == "infeasible"

    def test_equality_and_objective(self):
        # min x + y s.t. x + y = 1 on [0,1]^2
        res = solve_lp(LPProblem(
            lower=np.zeros(2), upper=np.ones(2),
            a_eq=np.array([[1.0, 1.0]]), b_eq=np.array([1.0]),
            objective=np.array([1.0, 1.0])))
        assert res.feasible
        assert res.objective == pytest.approx(1.0, abs=1e-9)

    def test_toy_root_relaxation_min_y(self, toy, toy_query):
        # relaxed minimum of y over the root: post1 can reach 2 while post2
        # sits at 0, so min y = -2 (does not prune the root at -0.5)
        bounds = propagate_intervals(toy, toy.input_lower, toy.input_upper, {})
        problem, vmap = build_relaxation(toy, bounds, {},
                                         toy_query.constraints)
        c = np.zeros(vmap.n_vars)
        c[vmap.y] = 1.0
        res = solve_lp(LPProblem(lower=problem.lower, upper=problem.upper,
                                 a_eq=problem.a_eq, b_eq=problem.b_eq,
                                 a_ub=problem.a_ub, b_ub=problem.b_ub,
                                 objective=c))
        assert res.feasible
        assert res.objective == pytest.approx(-2.0, abs=1e-7)
        assert res.objective <= -0.5

    def test_duality_spot_check(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(2, 6))
            m = int(rng.integers(1, 5))
            problem = LPProblem(
                lower=-rng.uniform(0.5, 2, n), upper=rng.uniform(0.5, 2, n),
                a_ub=rng.uniform(-1, 1, (m, n)), b_ub=rng.uniform(0.2, 2, m),
                objective=rng.uniform(-1, 1, n), maximize=True)
            res = solve_lp(problem)
            assert res.feasible  # origin is interior
            negated = LPProblem(lower=problem.lower, upper=problem.upper,
                                a_ub=problem.a_ub, b_ub=problem.b_ub,
                                objective=-problem.objective, maximize=False)
            res2 = solve_lp(negated)
            assert res2.objective == pytest.approx(-res.objective, abs=2e-7)

    def test_determinism(self):
        rng = np.random.default_rng(9)
        problem = LPProblem(
            lower=-np.ones(4), upper=np.ones(4),
            a_ub=rng.uniform(-1, 1, (3, 4)), b_ub=rng.uniform(0.5, 1, 3),
            objective=rng.uniform(-1, 1, 4))
        res1 = solve_lp(problem)
        res2 = solve_lp(problem)
        np.testing.assert_array_equal(res1.x, res2.x)
        assert res1.objective == res2.objective

    def test_degenerate_ties_use_blands_rule(self):
        # many redundant rows force degenerate pivots; Bland must terminate
        res = solve_lp(LPProblem(
            lower=np.zeros(3), upper=np.full(3, 10.0),
            a_ub=np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0],
                           [1.0, 0.0, 1.0], [0.0, 1.0, 1.0],
                           [1.0, 1.0, 1.0]]),
            b_ub=np.zeros(5),
            objective=np.array([-1.0, -1.0, -1.0])))
        assert res.feasible
        assert res.objective == pytest.approx(0.0, abs=1e-9)

    def test_infinite_bounds_rejected(self):
        with pytest.raises(ValueError):
            solve_lp(LPProblem(lower=np.array([0.0]),
                               upper=np.array([np.inf])))

    def test_empty_box_infeasible(self):
        res = solve_lp(LPProblem(lower=np.array([1.0]), upper=np.array([0.0])))
        assert res.status == "infeasible"


class TestTightenBounds:
    def test_n1_inactive_deduces_inputs(self, toy):
        # without the output rows: x1 <= 0 and hence n2 pre <= 0
        bounds = propagate_intervals(toy, toy.input_lower, toy.input_upper,
                                     {N1: Phase.INACTIVE})
        tightened = tighten_bounds_lp(toy, bounds, {N1: Phase.INACTIVE})
        assert tightened.input_upper[0] == pytest.approx(0.0, abs=1e-6)
        assert tightened.pre(N2)[1] == pytest.approx(0.0, abs=1e-6)

    def test_n1_inactive_with_property_conflicts(self, toy, toy_query):
        # post1 pinned to 0 makes y >= 0, contradicting y <= -0.5
        bounds = propagate_intervals(toy, toy.input_lower, toy.input_upper,
                                     {N1: Phase.INACTIVE})
        with pytest.raises(Conflict):
            tighten_bounds_lp(toy, bounds, {N1: Phase.INACTIVE},
                              toy_query.constraints)

    def test_n2_active_tightens_x1(self, toy):
        bounds = propagate_intervals(toy, toy.input_lower, toy.input_upper,
                                     {N2: Phase.ACTIVE})
        tightened = tighten_bounds_lp(toy, bounds, {N2: Phase.ACTIVE})
        assert tightened.input_lower[0] == pytest.approx(0.0, abs=1e-6)

    def test_fixpoint_stable(self, toy):
        bounds = propagate_intervals(toy, toy.input_lower, toy.input_upper, {})
        once = tighten_bounds_lp(toy, bounds, {})
        twice = tighten_bounds_lp(toy, once, {})
        np.testing.assert_allclose(twice.input_lower, once.input_lower,
                                   atol=1e-7)
        np.testing.assert_allclose(twice.input_upper, once.input_upper,
                                   atol=1e-7)

    def test_never_widens(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            net = make_random_net(rng)
            bounds = propagate_intervals(net, net.input_lower,
                                         net.input_upper, {})
            tightened = tighten_bounds_lp(net, bounds, {})
            assert (tightened.input_lower >= bounds.input_lower - 1e-12).all()
            assert (tightened.input_upper <= bounds.input_upper + 1e-12).all()
            for k in bounds.pre_lower:
                assert (tightened.pre_lower[k]
                        >= bounds.pre_lower[k] - 1e-12).all()
                assert (tightened.pre_upper[k]
                        <= bounds.pre_upper[k] + 1e-12).all()


class TestSolveRelaxation:
    def test_objective_is_worst_total_error(self, toy, toy_query):
        # apex of each triangle: n1 reaches 1 at (0,1); n2 reaches 2/3 at
        # (0,2/3); with y <= -0.5 the joint optimum is 1.5 at (post1, post2)
        # = (1, 2/3 limited by y row...) -- frozen from the hand-checkable
        # unconstrained value: without the output row the max is 1 + 2/3
        bounds = propagate_intervals(toy, toy.input_lower, toy.input_upper, {})
        res, vmap = solve_relaxation(toy, bounds, {})
        assert res.feasible
        assert res.objective == pytest.approx(1.0 + 2.0 / 3.0, abs=1e-7)

    def test_infeasible_relaxation(self, toy):
        bounds = propagate_intervals(toy, toy.input_lower, toy.input_upper,
                                     {N1: Phase.INACTIVE, N2: Phase.INACTIVE})
        res, _ = solve_relaxation(
            toy, bounds, {N1: Phase.INACTIVE, N2: Phase.INACTIVE},
            (OutputConstraint(coeffs=np.array([1.0]), bound=-0.5),))
        assert res.status == "infeasible"
