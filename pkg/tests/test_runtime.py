"""Closed-loop machinery: context monitor, belief updates, MPC loop."""

import json

import numpy as np
import pytest

from contingames.bridge import BeliefState
from contingames.dynamics import make_model
from contingames.problem import CostSpec
from contingames.regions import Rect, RegionCBF
from contingames.runtime import (
    ContextMismatchError,
    ContingencyController,
    ObservationBuffer,
    check_violations,
    env_goal_traj,
    fold_lasso,
    monitor_context,
    run_closed_loop,
    update_belief,
)
from contingames.scenarios import AgentSpec, BeliefConfig, ScenarioSpec, ScriptPhase
from contingames.solver import SolverConfig
from contingames.templates import check_compliance

from oracles import toy_two_region_game

SI = make_model("single-integrator")
COST = CostSpec(goal_weights=(1.0, 1.0), effort_weights=(1.0, 1.0))


@pytest.fixture(scope="module")
def toy():
    return toy_two_region_game()


def vid(game, name):
    return game.ids.index(name)


def toy_spec(toy, env_scripts, env_script, env_x0=(0.6, 0.5), **kw):
    defaults = dict(
        rate_hz=20.0,
        horizon=8,
        duration=6.0,
        belief=BeliefConfig(window=4),
        solver=SolverConfig(max_sweeps=6, lm_max_iters=10, sweep_tol=1e-3),
        violations=(frozenset({"cB", "uB"}),),
    )
    defaults.update(kw)
    return ScenarioSpec(
        name="toy",
        domain=toy["domain"],
        automaton=toy["auto"],
        agents=(
            AgentSpec("ego", "ego", SI, np.array([1.0, 1.0]), COST),
            AgentSpec("env", "env", SI, np.array(env_x0, dtype=float), COST,
                      scripts=env_scripts, script=env_script),
        ),
        regions=toy["cbfs"],
        **defaults,
    )


HOLD = {"hold": (ScriptPhase(start=0.0, mode="velocity", target=(0.0, 0.0)),)}


# --------------------------------------------------------------------------
# monitor
# --------------------------------------------------------------------------


class TestMonitor:
    def test_no_change_is_a_noop(self, toy):
        g = toy["game"]
        v = vid(g, "cA_uA_ego|seek")
        w, taken = monitor_context(g, v, {"cA", "uA"}, {"cA", "cB"})
        assert w == v and taken == []

    def test_ego_move_advances_one_edge(self, toy):
        g = toy["game"]
        v = vid(g, "cA_uA_ego|seek")
        w, taken = monitor_context(g, v, {"cB", "uA"}, {"cA", "cB"})
        assert g.labels[w] == frozenset({"cB", "uA"})
        assert taken == [(v, w)]
        assert all(b in g.succ[a] for a, b in taken)

    def test_env_move_from_ego_vertex_bridges_with_stay(self, toy):
        # ego holds still while env flips region: formally ego must take the
        # label-preserving edge first, then the env edge fires
        g = toy["game"]
        v = vid(g, "cA_uA_ego|seek")
        w, taken = monitor_context(g, v, {"cA", "uB"}, {"cA", "cB"})
        assert g.labels[w] == frozenset({"cA", "uB"})
        assert len(taken) == 2
        assert g.labels[taken[0][1]] == g.labels[v]
        assert all(b in g.succ[a] for a, b in taken)

    def test_env_then_ego_change_in_one_tick(self, toy):
        g = toy["game"]
        v = vid(g, "cA_uA_env|seek")
        w, taken = monitor_context(g, v, {"cB", "uB"}, {"cA", "cB"})
        assert g.labels[w] == frozenset({"cB", "uB"})
        assert all(b in g.succ[a] for a, b in taken)

    def test_unmodeled_move_raises(self, toy):
        # env entering B while ego occupies it has no edge anywhere
        g = toy["game"]
        v = vid(g, "cB_uA_ego|done")
        with pytest.raises(ContextMismatchError):
            monitor_context(g, v, {"cB", "uB"}, {"cA", "cB"})


class TestFoldLasso:
    def test_prefers_stay_cycle_at_rest(self, toy):
        g = toy["game"]
        run = [vid(g, "cA_uA_ego|seek"), vid(g, "cA_uA_env|seek")]
        prefix, cycle = fold_lasso(g, run)
        assert prefix == run[:-1]
        assert cycle[0] == run[-1] and len(cycle) == 2
        # a legitimate 2-cycle in both directions
        assert cycle[1] in g.succ[cycle[0]] and cycle[0] in g.succ[cycle[1]]

    def test_falls_back_to_previous_occurrence(self, toy):
        # the leave-request context forces env out of B, so it has no
        # label-preserving move and cannot close a stay cycle
        g = toy["game"]
        a = vid(g, "cA_uB_env|seek")
        b = g.succ[a][0]
        prefix, cycle = fold_lasso(g, [a, b, a])
        assert prefix == [] and cycle == [a, b]

    def test_empty_run_rejected(self, toy):
        with pytest.raises(ValueError):
            fold_lasso(toy["game"], [])

    def test_unclosable_run_rejected(self, toy):
        g = toy["game"]
        with pytest.raises(ValueError):
            fold_lasso(g, [vid(g, "cA_uB_env|seek")])


# --------------------------------------------------------------------------
# belief updates
# --------------------------------------------------------------------------


def buf_with(window, entries):
    buf = ObservationBuffer(window=window)
    for t, obs, preds in entries:
        buf.push(t, obs)
        if preds is not None:
            buf.attach(preds)
    return buf


class TestBelief:
    def test_buffer_trims_to_window_plus_one(self):
        buf = ObservationBuffer(window=3)
        for i in range(10):
            buf.push(float(i), {"env": np.zeros(2)})
        assert len(buf.entries) == 4
        assert buf.entries[0].t == 6.0

    def test_no_predictions_leaves_belief_unchanged(self):
        buf = buf_with(4, [(0.0, {"env": np.zeros(2)}, None)])
        b = BeliefState({"env": {"uA": 0.5, "uB": 0.5}})
        out = update_belief(b, buf, gamma=5.0, floor=0.01)
        assert out.marginals == b.marginals

    def test_accurate_prediction_wins(self):
        # env truly sits still: the "hold" prediction is exact, the "move"
        # prediction diverges linearly, so its mass should decay hard
        preds = {"env": {
            "uA": np.zeros((4, 2)),
            "uB": np.stack([np.full(4, 0.5) * np.arange(1, 5), np.zeros(4)], axis=1),
        }}
        entries = [(0.0, {"env": np.zeros(2)}, preds)]
        entries += [(0.05 * i, {"env": np.zeros(2)}, None) for i in range(1, 4)]
        buf = buf_with(4, entries)
        b = update_belief(BeliefState({"env": {"uA": 0.5, "uB": 0.5}}), buf, 5.0, 0.01)
        assert b.marginals["env"]["uA"] > 0.9
        assert abs(sum(b.marginals["env"].values()) - 1.0) < 1e-12

    def test_missing_prediction_keeps_mass(self):
        preds = {"env": {"uA": np.zeros((4, 2))}}
        entries = [(0.0, {"env": np.zeros(2)}, preds), (0.05, {"env": np.zeros(2)}, None)]
        buf = buf_with(4, entries)
        b = update_belief(BeliefState({"env": {"uA": 0.5, "uB": 0.5}}), buf, 5.0, 0.01)
        # both factors are 1 here (exact prediction, absent prediction)
        assert b.marginals["env"] == pytest.approx({"uA": 0.5, "uB": 0.5})

    def test_floor_is_respected(self):
        preds = {"env": {"uB": np.full((4, 2), 10.0)}}
        entries = [(0.0, {"env": np.zeros(2)}, preds)]
        entries += [(0.05 * i, {"env": np.zeros(2)}, None) for i in range(1, 4)]
        buf = buf_with(4, entries)
        b = update_belief(BeliefState({"env": {"uA": 0.5, "uB": 0.5}}), buf, 5.0, 0.01)
        assert b.marginals["env"]["uB"] == pytest.approx(0.01)


class TestEnvGoalTraj:
    def test_centroid_mode_tracks_region_center(self):
        spec = AgentSpec("env", "env", SI, np.zeros(2), COST, goal_mode="centroid")
        cbfs = {"uB": RegionCBF("uB", "env", Rect(2, 4, 0, 2))}
        g = env_goal_traj(spec, np.array([0.5, 0.5]), np.zeros(2), {"uB"}, cbfs, 5, 0.1)
        assert g.shape == (5, 2)
        assert np.allclose(g, [3.0, 1.0])

    def test_centroid_mode_without_region_holds_position(self):
        spec = AgentSpec("env", "env", SI, np.zeros(2), COST)
        g = env_goal_traj(spec, np.array([0.5, 0.7]), np.ones(2), frozenset(), {}, 4, 0.1)
        assert np.allclose(g, [0.5, 0.7])

    def test_cv_mode_clamps_into_region(self):
        spec = AgentSpec("env", "env", SI, np.zeros(2), COST, goal_mode="cv")
        cbfs = {"uB": RegionCBF("uB", "env", Rect(2, 4, 0, 2))}
        g = env_goal_traj(spec, np.array([1.9, 1.0]), np.array([2.0, 0.0]), {"uB"}, cbfs, 10, 0.1)
        assert g[0, 0] >= 2.15 - 1e-9  # clamped to the inset west face
        assert g[-1, 0] <= 4.0 - 0.15 + 1e-9
        assert np.all(np.diff(g[:, 0]) >= -1e-12)

    def test_cv_mode_without_region_extrapolates(self):
        spec = AgentSpec("env", "env", SI, np.zeros(2), COST, goal_mode="cv")
        g = env_goal_traj(spec, np.array([1.0, 1.0]), np.array([0.5, -0.5]), frozenset(), {}, 3, 0.1)
        assert np.allclose(g[2], [1.1, 0.9])

    def test_padding_fills_extra_dims(self):
        bike = make_model("bicycle")
        cost = CostSpec(goal_weights=(1, 1, 0, 1), effort_weights=(1, 1))
        spec = AgentSpec("env", "env", bike, np.zeros(4), cost, goal_pad=(0.5, 2.0), goal_mode="cv")
        g = env_goal_traj(spec, np.zeros(4), np.ones(2), frozenset(), {}, 3, 0.1)
        assert g.shape == (3, 4)
        assert np.allclose(g[:, 2], 0.5) and np.allclose(g[:, 3], 2.0)


# --------------------------------------------------------------------------
# closed loop
# --------------------------------------------------------------------------


class TestClosedLoop:
    def test_zero_duration_gives_empty_trace(self, toy):
        spec = toy_spec(toy, HOLD, "hold", duration=0.0)
        trace = run_closed_loop(spec)
        assert trace.rows == [] and trace.events == []

    def test_reaches_goal_without_violations(self, toy):
        spec = toy_spec(toy, HOLD, "hold")
        ctrl = ContingencyController(spec)
        trace = run_closed_loop(spec, controller=ctrl)
        assert len(trace.rows) == 120
        assert trace.events == []
        assert all(r["violations"] == [] for r in trace.rows)
        ids = [ctrl.game.ids[v] for v in trace.visited]
        assert any(i.startswith("cB_") for i in ids), "never entered B"

    def test_belief_locks_onto_holding_env(self, toy):
        spec = toy_spec(toy, HOLD, "hold", duration=1.0)
        trace = run_closed_loop(spec)
        marg = trace.rows[-1]["belief"]["env"]
        assert marg["uA"] > 0.9
        # the held intent dominates at every solve along the way
        for r in trace.rows:
            if r["belief"]:
                assert r["belief"]["env"]["uA"] >= r["belief"]["env"].get("uB", 0.0)

    def test_executed_edges_comply_with_template(self, toy):
        spec = toy_spec(toy, HOLD, "hold")
        ctrl = ContingencyController(spec)
        trace = run_closed_loop(spec, controller=ctrl)
        for a, b in trace.edges:
            assert b in ctrl.game.succ[a]
        prefix, cycle = fold_lasso(ctrl.game, trace.visited)
        assert check_compliance(ctrl.game, prefix, cycle, ctrl.template)

    def test_deterministic_replay(self, toy):
        spec = toy_spec(toy, HOLD, "hold", duration=2.0)
        t1 = run_closed_loop(spec)
        t2 = run_closed_loop(spec)
        strip = lambda rows: [{k: v for k, v in r.items() if k != "solve_ms"} for r in rows]
        assert strip(t1.rows) == strip(t2.rows)

    def test_ndjson_round_trip(self, toy, tmp_path):
        spec = toy_spec(toy, HOLD, "hold", duration=1.0)
        path = tmp_path / "trace.ndjson"
        trace = run_closed_loop(spec, trace_path=path)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert rows == trace.rows

    def test_unmodeled_env_move_freezes_and_records(self, toy):
        # env walks straight out of the labeled world (no vertex carries an
        # empty env label), which freezes the strategic layer; it then drops
        # into B, and the recorder must keep logging while frozen
        scripts = {"rogue": (
            ScriptPhase(start=0.0, mode="velocity", target=(0.0, 0.0)),
            ScriptPhase(start=0.5, mode="velocity", target=(0.0, 8.0)),
            ScriptPhase(start=1.0, mode="goto", target=(3.0, 1.0), speed=2.0),
        )}
        spec = toy_spec(toy, scripts, "rogue", env_x0=(1.5, 1.7), duration=5.0,
                        violations=(frozenset({"uB"}),))
        trace = run_closed_loop(spec)
        kinds = [e["kind"] for e in trace.events]
        assert "context-mismatch" in kinds
        frozen_rows = [r for r in trace.rows if r["frozen"]]
        assert frozen_rows and all(r["u"] == [0.0, 0.0] for r in frozen_rows)
        assert any(r["violations"] for r in frozen_rows)
        # freezing never stops the simulation itself
        assert len(trace.rows) == 100
        assert trace.rows[-1]["frozen"] is True

    def test_out_of_region_vertex_zeroes_input(self, toy):
        spec = toy_spec(toy, HOLD, "hold", duration=0.2)
        ctrl = ContingencyController(spec)
        ctrl.region = frozenset()  # pretend synthesis lost everything
        trace = run_closed_loop(spec, controller=ctrl)
        assert all(e["kind"] == "out-of-region" for e in trace.events)
        assert len(trace.events) == len(trace.rows)
        assert all(r["u"] == [0.0, 0.0] for r in trace.rows)

    def test_second_step_is_warm(self, toy):
        spec = toy_spec(toy, HOLD, "hold")
        ctrl = ContingencyController(spec)
        states = {"ego": np.array([1.0, 1.0]), "env": np.array([0.6, 0.5])}
        v = ctrl.game.initial
        r1 = ctrl.step(0.0, states, v, frozenset())
        r2 = ctrl.step(0.05, states, v, frozenset())
        assert r1.diag["warm"] is False
        assert r2.diag["warm"] is True
        assert r1.problem.K == r2.problem.K == 2

    def test_branch_time_clamped_when_hypotheses_remain(self, toy):
        # even a confident belief must share the first input across branches
        spec = toy_spec(toy, HOLD, "hold", duration=2.0)
        ctrl = ContingencyController(spec)
        trace = run_closed_loop(spec, controller=ctrl)
        for r in trace.rows:
            if r["K"] and r["K"] > 1:
                assert r["t_branch"] >= 1

    def test_check_violations_uses_full_valuation(self, toy):
        spec = toy_spec(toy, HOLD, "hold")
        assert check_violations(spec, frozenset({"cB", "uB", "uA"})) == [["cB", "uB"]]
        assert check_violations(spec, frozenset({"cB", "uA"})) == []
