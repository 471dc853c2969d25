import numpy as np
import pytest

from contingames.dynamics import make_model
from contingames.factorgraph import compile_graph
from contingames.lqgame import lq_nash_oracle
from contingames.problem import (
    AvoidSpec,
    CostSpec,
    Hypothesis,
    PlayerSpec,
    build_problem,
)
from contingames.solver import (
    SolverConfig,
    cold_start,
    lm_minimize,
    nash_residual,
    solve_nash,
    warm_start,
)

from oracles import random_contingency_problem, random_lq_problem

LQ_CFG = SolverConfig(
    mu_eq=1e8,
    max_sweeps=80,
    sweep_tol=1e-10,
    lm_grad_tol=1e-7,
    lm_max_iters=80,
)


def sup_diff(sol_a, sol_b, keys):
    return max(
        float(np.max(np.abs(sol_a.states[k] - sol_b.states[k])))
        for k in keys
    )


def test_cold_start_satisfies_dynamics():
    rng = np.random.default_rng(0)
    prob = random_contingency_problem(rng, K=2, T=6)
    graph = compile_graph(prob)
    vals = cold_start(graph)
    for b in graph.batches:
        if b.kind in ("dynamics", "init"):
            assert np.allclose(b.residual(vals), 0.0, atol=1e-12)


def test_lm_descends():
    rng = np.random.default_rng(1)
    prob = random_contingency_problem(rng, K=2, T=6)
    graph = compile_graph(prob)
    vals = cold_start(graph)
    phi0 = graph.phi(0, vals)
    vals2, iters = lm_minimize(graph, 0, vals, SolverConfig(lm_max_iters=5))
    assert iters > 0
    assert graph.phi(0, vals2) < phi0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_nash_matches_lq_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    prob = random_lq_problem(rng, n_players=2, T=8)
    sol, graph = solve_nash(prob, LQ_CFG)
    ref = lq_nash_oracle(prob)
    keys = [(p.name, 0) for p in prob.players]
    assert sup_diff(sol, ref, keys) < 1e-4
    res = sol.stats["nash_residuals"]
    assert all(v < 1e-5 for v in res.values())


def test_three_player_lq():
    rng = np.random.default_rng(7)
    prob = random_lq_problem(rng, n_players=3, T=6)
    sol, _ = solve_nash(prob, LQ_CFG)
    ref = lq_nash_oracle(prob)
    keys = [(p.name, 0) for p in prob.players]
    assert sup_diff(sol, ref, keys) < 1e-4


def test_single_player_is_tracking_optimum():
    # with one player the oracle reduces to a linear-quadratic tracking solve
    rng = np.random.default_rng(3)
    prob = random_lq_problem(rng, n_players=1, T=10)
    sol, _ = solve_nash(prob, LQ_CFG)
    ref = lq_nash_oracle(prob)
    assert sup_diff(sol, ref, [(prob.ego.name, 0)]) < 1e-4


def test_nash_residual_reports_all_players():
    rng = np.random.default_rng(4)
    prob = random_contingency_problem(rng, K=2, T=5)
    cfg = SolverConfig(max_sweeps=10)
    sol, graph = solve_nash(prob, cfg)
    res = nash_residual(graph, graph.pack(sol.states, sol.inputs))
    assert set(res) == {p.name for p in prob.players}
    assert all(np.isfinite(v) for v in res.values())


def test_input_bounds_respected():
    model = make_model("single-integrator", u_min=[-0.3, -0.3], u_max=[0.3, 0.3])
    p = PlayerSpec(
        "ego", model, np.zeros(2),
        CostSpec(goal_weights=(3.0, 3.0), effort_weights=(0.1, 0.1)),
    )
    hyp = Hypothesis("h", 1.0, {"ego": np.array([5.0, 0.0])})
    prob = build_problem(dt=0.1, T=8, players=[p], hypotheses=[hyp], t_branch=0)
    sol, _ = solve_nash(prob, SolverConfig(mu_ineq=1e5))
    u = sol.inputs[("ego", 0)]
    # penalty formulation allows a small excursion, scaled by 1/mu_ineq
    assert np.all(u <= 0.3 + 5e-3) and np.all(u >= -0.3 - 5e-3)


def test_collision_keeps_separation():
    # two integrators racing to swap positions must keep their distance
    mk = lambda: make_model("single-integrator")
    cost = lambda: CostSpec(goal_weights=(1.5, 1.5), effort_weights=(0.3, 0.3), d_min=0.5)
    a = PlayerSpec("a", mk(), np.array([0.0, 0.0]), cost())
    b = PlayerSpec("b", mk(), np.array([2.0, 0.02]), cost())
    hyp = Hypothesis("h", 1.0, {"a": np.array([2.0, 0.0]), "b": np.array([0.0, 0.0])})
    prob = build_problem(dt=0.1, T=14, players=[a, b], hypotheses=[hyp], t_branch=0)
    sol, _ = solve_nash(prob, SolverConfig(mu_ineq=1e4, max_sweeps=40, sweep_tol=1e-8))
    d = np.linalg.norm(sol.states[("a", 0)][:, :2] - sol.states[("b", 0)][:, :2], axis=1)
    assert d.min() >= 0.5 - 1e-3


def test_avoid_constraint_repels_plan():
    from contingames.regions import Rect, RegionCBF

    regions = {"ego": {"bad": RegionCBF("bad", "ego", Rect(1.0, 3.0, -1.0, 1.0))}}
    p = PlayerSpec(
        "ego",
        make_model("single-integrator"),
        np.array([0.0, 0.0]),
        CostSpec(goal_weights=(1.0, 1.0), effort_weights=(0.2, 0.2)),
    )
    hyp = Hypothesis(
        "h", 1.0, {"ego": np.array([2.0, 0.0])},
        avoid=(AvoidSpec(avoid=(("ego", "bad"),)),),
    )
    prob = build_problem(
        dt=0.1, T=12, players=[p], hypotheses=[hyp], t_branch=0, regions=regions
    )
    sol, _ = solve_nash(prob, SolverConfig(max_sweeps=40))
    h = regions["ego"]["bad"].value(sol.states[("ego", 0)][:, :2])
    # goal sits in the middle of the forbidden box; the plan must stay near
    # its boundary instead of settling inside
    assert h.max() < 0.1


def test_warm_start_reuses_shifted_plan():
    rng = np.random.default_rng(8)
    prob = random_contingency_problem(rng, K=2, T=8, t_branch=3)
    cfg = SolverConfig(max_sweeps=30)
    sol, graph = solve_nash(prob, cfg)
    # advance every initial state one step along the solved plan
    players = []
    for p in prob.players:
        players.append(
            PlayerSpec(p.name, p.model, sol.states[(p.name, 0)][1], p.cost)
        )
    prob2 = build_problem(
        dt=prob.dt, T=prob.T, players=players, hypotheses=prob.hypotheses,
        t_branch=prob.t_branch, regions=prob.regions,
    )
    graph2 = compile_graph(prob2, mu_eq=cfg.mu_eq, mu_ineq=cfg.mu_ineq)
    init = warm_start(graph2, sol)
    # the shifted plan already satisfies the new initial-state pin
    for b in graph2.batches:
        if b.kind == "init":
            assert np.allclose(b.residual(init), 0.0, atol=1e-9)
    sol_w, _ = solve_nash(prob2, cfg, init=init, graph=graph2)
    sol_c, _ = solve_nash(prob2, cfg)
    assert sol_w.stats["lm_iterations"] <= sol_c.stats["lm_iterations"]


def test_solver_stats_populated():
    rng = np.random.default_rng(9)
    prob = random_lq_problem(rng, n_players=2, T=6)
    sol, _ = solve_nash(prob, SolverConfig())
    st = sol.stats
    assert st["sweeps"] >= 1
    assert st["lm_iterations"] >= 1
    assert st["wall_time_s"] > 0
    assert st["converged"] in (True, False)


def test_belief_certainty_matches_single_intent():
    """Contingency with all mass on one hypothesis == that single-intent game."""
    rng = np.random.default_rng(10)
    base = random_contingency_problem(rng, K=2, T=7, t_branch=3)
    cfg = SolverConfig(max_sweeps=60, sweep_tol=1e-9)
    for hot in (0, 1):
        beliefs = [1.0 if k == hot else 0.0 for k in range(2)]
        hyps = [
            Hypothesis(h.name, beliefs[k], h.goals, h.avoid, h.covered)
            for k, h in enumerate(base.hypotheses)
        ]
        prob = build_problem(
            dt=base.dt, T=base.T, players=base.players, hypotheses=hyps,
            t_branch=base.t_branch, regions=base.regions,
        )
        single = build_problem(
            dt=base.dt, T=base.T, players=base.players,
            hypotheses=[Hypothesis(base.hypotheses[hot].name, 1.0,
                                   base.hypotheses[hot].goals,
                                   base.hypotheses[hot].avoid)],
            t_branch=0, regions=base.regions,
        )
        sol_c, _ = solve_nash(prob, cfg)
        sol_s, _ = solve_nash(single, cfg)
        for p in prob.players:
            assert np.max(np.abs(
                sol_c.states[(p.name, hot)] - sol_s.states[(p.name, 0)]
            )) < 1e-4
