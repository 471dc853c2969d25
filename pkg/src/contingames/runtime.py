"""Close the loop: context monitoring, belief updates, receding-horizon play.

Each tick the physical states are labeled, the strategic vertex is advanced
along game edges to match (bridging with a stay move when the other player's
turn is formally in between), beliefs over env intents are refreshed against
the previous solves' predictions, and the contingency game at the current
anchor is re-solved warm-started to produce one ego input.  Physical changes
the game does not model freeze the strategic layer but never the simulation;
violations are recorded from the raw states throughout.
"""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .factorgraph import compile_graph
from .bridge import (
    BeliefState,
    BridgeError,
    ContextPlan,
    IntentSet,
    anchor_env_vertex,
    extract_intents,
    floor_normalize,
    intent_key,
    plan_context,
)
from .gamegraph import EGO, ENV, Edge, ParityGame
from .problem import ContingencyProblem, Hypothesis, PlayerSpec, branching_time, build_problem
from .regions import Rect, RegionCBF, label_position
from .scenarios import ScenarioSpec, build_strategic, scripted_step
from .solver import SolverConfig, solve_nash, warm_start
from .templates import StrategyTemplate, WinningRegion


class ContextMismatchError(RuntimeError):
    """The physical valuation has no matching edge from the current vertex."""


# --------------------------------------------------------------------------
# context monitoring
# --------------------------------------------------------------------------


def monitor_context(
    game: ParityGame, vertex: int, valuation, ego_props
) -> tuple[int, list[Edge]]:
    """Advance along game edges until the vertex labels equal the valuation.

    Env-side changes (env agents and task propositions) are consumed first,
    then the ego change, so one tick may take up to two moves plus stay
    bridges.  A stay bridge covers the case where the same player moves twice
    in a row physically while the game formally alternates.
    """
    val = frozenset(valuation)
    ego_props = frozenset(ego_props)
    cur = game.labels[vertex]
    if cur == val:
        return vertex, []

    taken: list[Edge] = []

    def advance(v: int, want) -> int:
        cand = [w for w in game.succ[v] if game.labels[w] == want]
        if not cand:
            # bridge: a label-preserving move first, then the real one
            for s in (w for w in game.succ[v] if game.labels[w] == game.labels[v]):
                cand = [w for w in game.succ[s] if game.labels[w] == want]
                if cand:
                    taken.append((v, s))
                    v = s
                    break
        if not cand:
            raise ContextMismatchError(
                f"no move from {game.ids[v]!r} reaches labels {sorted(want)}"
            )
        taken.append((v, cand[0]))
        return cand[0]

    v = vertex
    cur_ego, new_ego = cur & ego_props, val & ego_props
    if (cur - ego_props) != (val - ego_props):
        v = advance(v, (val - ego_props) | cur_ego)
    if cur_ego != new_ego:
        v = advance(v, val)
    if game.labels[v] != val:
        raise ContextMismatchError(
            f"reached {game.ids[v]!r} but labels still differ from {sorted(val)}"
        )
    return v, taken


def fold_lasso(game: ParityGame, visited: list[int]) -> tuple[list[int], list[int]]:
    """Fold a finite vertex run into a lasso (prefix, cycle).

    A run that has come to rest is closed with the stay 2-cycle at its final
    vertex; otherwise the suffix starting at the previous occurrence of the
    final vertex is the cycle.
    """
    if not visited:
        raise ValueError("empty run")
    last = visited[-1]
    for w in game.succ[last]:
        if game.labels[w] == game.labels[last] and last in game.succ[w]:
            return list(visited[:-1]), [last, w]
    if visited.count(last) > 1:
        j = len(visited) - 1 - visited[-2::-1].index(last) - 1
        return list(visited[:j]), list(visited[j:-1])
    raise ValueError(
        f"run ends at {game.ids[last]!r} with no stay cycle and no earlier visit"
    )


# --------------------------------------------------------------------------
# observation buffer and belief update
# --------------------------------------------------------------------------


@dataclass
class _BufEntry:
    t: float
    obs: dict[str, np.ndarray]  # agent -> (2,) position
    # agent -> intent key -> (window, 2) predicted positions for the next ticks
    preds: dict[str, dict[str, np.ndarray]] | None = None


@dataclass
class ObservationBuffer:
    """Rolling window of env observations and per-intent predictions."""

    window: int = 10
    entries: deque = field(default_factory=deque)

    def push(self, t: float, obs: dict[str, np.ndarray]) -> None:
        self.entries.append(_BufEntry(t=t, obs={k: np.asarray(v, float)[:2] for k, v in obs.items()}))
        while len(self.entries) > self.window + 1:
            self.entries.popleft()

    def attach(self, preds: dict[str, dict[str, np.ndarray]]) -> None:
        if self.entries:
            self.entries[-1].preds = preds

    def clear(self) -> None:
        self.entries.clear()


def update_belief(
    belief: BeliefState, buffer: ObservationBuffer, gamma: float, floor: float
) -> BeliefState:
    """Exponential reweighting by windowed prediction error.

    Each marginal entry is scaled by exp(-gamma * D) where D is the mean
    squared position error between the observations since the oldest buffered
    solve and that solve's predicted segment for the intent; intents without
    a stored prediction keep their mass.  An empty window leaves the belief
    unchanged.
    """
    entries = list(buffer.entries)
    base = next((e for e in entries if e.preds is not None), None)
    if base is None:
        return belief
    tail = entries[entries.index(base) + 1:]
    if not tail:
        return belief
    marginals: dict[str, dict[str, float]] = {}
    for agent, marg in belief.marginals.items():
        preds = base.preds.get(agent, {})
        scaled: dict[str, float] = {}
        for key, b in marg.items():
            seg = preds.get(key)
            if seg is None:
                scaled[key] = b
                continue
            errs = []
            for j, e in enumerate(tail):
                if j >= len(seg):
                    break
                if agent in e.obs:
                    errs.append(float(np.sum((e.obs[agent] - seg[j]) ** 2)))
            if not errs:
                scaled[key] = b
                continue
            scaled[key] = b * float(np.exp(-gamma * np.mean(errs)))
        marginals[agent] = floor_normalize(scaled, floor)
    return BeliefState(marginals)


# --------------------------------------------------------------------------
# the controller
# --------------------------------------------------------------------------


def _inflate(cbf: RegionCBF, margin: float) -> RegionCBF:
    r = cbf.rect
    return replace(cbf, rect=Rect(r.xmin - margin, r.xmax + margin,
                                  r.ymin - margin, r.ymax + margin))


_INSET = 0.15  # clamp margin keeping env goal points strictly inside regions


def env_goal_traj(
    agent_spec, x_now: np.ndarray, v_obs: np.ndarray, props, cbfs, T: int, dt: float
) -> np.ndarray:
    """Tracking target for one env copy under one predicted intent.

    "centroid" mode pulls to the intent region's center; "cv" mode
    extrapolates the observed velocity and clamps the path into the region.
    With no region the current position (or the raw extrapolation) is used.
    """
    pos = np.asarray(x_now, float)[:2]
    rects = [cbfs[p].rect for p in sorted(props) if p in cbfs]
    if agent_spec.goal_mode == "centroid":
        point = rects[0].center if rects else pos
        return np.broadcast_to(agent_spec.goal_vector(point), (T, agent_spec.model.n)).copy()
    # cv mode
    cv = pos[None, :] + np.outer(np.arange(T) * dt, v_obs[:2])
    if rects:
        r = rects[0]
        lo = np.array([r.xmin, r.ymin]) + _INSET
        hi = np.array([r.xmax, r.ymax]) - _INSET
        cv = np.clip(cv, np.minimum(lo, hi), np.maximum(lo, hi))
    out = np.zeros((T, agent_spec.model.n))
    out[:, :2] = cv
    for i in range(2, agent_spec.model.n):
        out[:, i] = agent_spec.goal_pad[i - 2] if i - 2 < len(agent_spec.goal_pad) else 0.0
    return out


@dataclass
class StepResult:
    u: np.ndarray
    diag: dict
    problem: ContingencyProblem | None = None


class ContingencyController:
    """Belief-weighted multi-hypothesis MPC on top of the strategy template."""

    name = "contingency"

    def __init__(
        self,
        spec: ScenarioSpec,
        game: ParityGame | None = None,
        region: WinningRegion | None = None,
        template: StrategyTemplate | None = None,
    ):
        self.spec = spec
        if game is None:
            game, region, template = build_strategic(spec)
        self.game, self.region, self.template = game, region, template
        self.state_props = spec.domain.state_props
        self.cbfs = dict(spec.regions)
        self.avoid_regions = {
            a: {p: _inflate(c, spec.avoid_margin) for p, c in spec.agent_regions(a).items()}
            for a in spec.domain.state_props
        }
        self.buffer = ObservationBuffer(window=spec.belief.window)
        self.reset()

    def reset(self) -> None:
        self.belief: BeliefState | None = None
        self.prev_solution = None
        self.prev_names: tuple[str, ...] = ()
        self.prev_u: np.ndarray | None = None
        self.prev_converged = True
        self.buffer.clear()

    # -- belief handling ----------------------------------------------------

    def observe(self, t: float, states: Mapping[str, np.ndarray]) -> None:
        obs = {a.name: states[a.name][:2] for a in self.spec.env_agents}
        self.buffer.push(t, obs)
        if self.belief is not None:
            self.belief = update_belief(
                self.belief, self.buffer, self.spec.belief.gamma, self.spec.belief.floor
            )

    def _align_belief(self, intents: IntentSet) -> BeliefState:
        if self.belief is None:
            self.belief = BeliefState.uniform(intents)
        else:
            want = {a: {intent_key(c) for c in intents.per_agent[a]} for a in intents.agents}
            have = {a: set(m) for a, m in self.belief.marginals.items()}
            if want != have:
                self.belief = self.belief.remap(intents, floor=self.spec.belief.floor)
        return self.belief

    def _v_obs(self, name: str) -> np.ndarray:
        pts = [(e.t, e.obs[name]) for e in self.buffer.entries if name in e.obs]
        if len(pts) < 2:
            return np.zeros(2)
        (t0, p0), (t1, p1) = pts[0], pts[-1]
        if t1 - t0 <= 1e-9:
            return np.zeros(2)
        return (p1 - p0) / (t1 - t0)

    # -- plan and hypothesis assembly ----------------------------------------

    def _current_ego_vertex(self, vertex: int) -> int | None:
        game = self.game
        if game.owner[vertex] == EGO:
            return vertex if vertex in self.region else None
        for w in game.succ[vertex]:
            if game.labels[w] == game.labels[vertex] and w in self.region:
                return w
        return None

    def _plans(self, vertex: int, intents: IntentSet) -> tuple[tuple[ContextPlan, ...], int]:
        belief = self._align_belief(intents)
        joint = belief.joint(intents)
        plans = plan_context(
            self.game, self.region, self.template, intents.vertex,
            self.state_props, self.cbfs, joint,
            threshold=self.spec.belief.threshold,
            current_vertex=self._current_ego_vertex(vertex),
        )
        t_b = branching_time([p.belief for p in plans], self.spec.horizon, self.spec.branching)
        if len(plans) > 1:
            t_b = max(1, t_b)  # the input applied this tick must cover every intent
        return plans, t_b

    def _hypotheses(self, plans, states) -> list[Hypothesis]:
        T, dt = self.spec.horizon, self.spec.plan_dt
        hyps = []
        for p in plans:
            goals = {"ego": self.spec.ego.goal_vector(p.goal.x_goal)}
            for a in self.spec.env_agents:
                goals[a.name] = env_goal_traj(
                    a, states[a.name], self._v_obs(a.name),
                    p.env_intents.get(a.name, frozenset()), self.cbfs, T, dt,
                )
            hyps.append(Hypothesis(name=p.name, belief=p.belief, goals=goals,
                                   avoid=p.avoid, covered=p.covered))
        return hyps

    def _problem(self, states, hyps, t_b) -> ContingencyProblem:
        players = [PlayerSpec(name=a.name, model=a.model, x0=states[a.name], cost=a.cost)
                   for a in self.spec.agents]
        return build_problem(self.spec.plan_dt, self.spec.horizon, players, hyps,
                             t_b, regions=self.avoid_regions)

    # -- solving --------------------------------------------------------------

    def _warm(self, graph, hyps) -> np.ndarray | None:
        prev = self.prev_solution
        if prev is None:
            return None
        index = {n: k for k, n in enumerate(self.prev_names)}
        remap = {}
        for k, h in enumerate(hyps):
            src = index.get(h.name)
            if src is None:  # merged/renamed copies match via covered intents
                src = next((index[c] for c in h.covered if c in index), None)
            if src is not None:
                remap[k] = src
        if not remap:
            return None
        states = {}
        inputs = {}
        for p in {p for (p, _) in prev.states}:
            for k in range(len(hyps)):
                src = remap.get(k, next(iter(remap.values())))
                states[(p, k)] = prev.states[(p, src)]
                inputs[(p, k)] = prev.inputs[(p, src)]
        shifted = replace(prev, states=states, inputs=inputs)
        return warm_start(graph, shifted)

    def _predictions(self, sol, plans) -> dict[str, dict[str, np.ndarray]]:
        """Per agent and per-agent intent key: the next `window` positions."""
        n = self.buffer.window
        knots = np.arange(1, self.spec.horizon) * self.spec.plan_dt
        ticks = np.arange(1, n + 1) * self.spec.dt
        preds: dict[str, dict[str, np.ndarray]] = {}
        for a in self.spec.env_agents:
            by_key: dict[str, tuple[float, np.ndarray]] = {}
            for k, p in enumerate(plans):
                key = intent_key(p.env_intents.get(a.name, frozenset()))
                if key in by_key and by_key[key][0] >= p.belief:
                    continue
                X = sol.states[(a.name, k)][1:, :2]
                seg = np.stack([np.interp(ticks, knots, X[:, d]) for d in (0, 1)], axis=1)
                by_key[key] = (p.belief, seg)
            preds[a.name] = {key: seg for key, (_, seg) in by_key.items()}
        return preds

    def step(self, t: float, states: Mapping[str, np.ndarray], vertex: int, tasks) -> StepResult:
        t0 = time.perf_counter()
        self.observe(t, states)
        anchor = anchor_env_vertex(self.game, self.region, self.template, vertex)
        intents = extract_intents(self.game, anchor, self.state_props)
        plans, t_b = self._plans(vertex, intents)
        hyps = self._hypotheses(plans, states)
        prob = self._problem(states, hyps, t_b)
        cfg = self.spec.solver
        graph = compile_graph(prob, mu_eq=cfg.mu_eq, mu_ineq=cfg.mu_ineq)
        init = self._warm(graph, hyps)
        sol, _ = solve_nash(prob, cfg, init=init, graph=graph)
        converged = bool(sol.stats.get("converged", False))
        u = np.asarray(sol.inputs[("ego", 0)][0], float)
        if not converged and self.prev_u is not None and self.prev_converged:
            u = self.prev_u  # bridge a single hiccup; never coast on stale input
        u = self.spec.ego.model.clip_input(u)
        self.buffer.attach(self._predictions(sol, plans))
        self.prev_solution = sol
        self.prev_names = tuple(h.name for h in hyps)
        self.prev_u = u
        self.prev_converged = converged
        diag = {
            "solve_ms": (time.perf_counter() - t0) * 1e3,
            "converged": converged,
            "sweeps": sol.stats.get("sweeps"),
            "lm_iterations": sol.stats.get("lm_iterations"),
            "nash_residuals": sol.stats.get("nash_residuals"),
            "K": prob.K,
            "t_branch": prob.t_branch,
            "n_vars": prob.n_vars,
            "plans": [p.name for p in plans],
            "beliefs": {p.name: p.belief for p in plans},
            "marginals": {a: dict(m) for a, m in self.belief.marginals.items()},
            "warm": init is not None,
        }
        return StepResult(u=u, diag=diag, problem=prob)


# --------------------------------------------------------------------------
# the loop
# --------------------------------------------------------------------------


@dataclass
class Trace:
    scenario: str
    controller: str
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)
    visited: list = field(default_factory=list)  # strategic vertices in order
    edges: list = field(default_factory=list)  # strategic edges taken

    def violation_rows(self) -> list:
        return [r for r in self.rows if r["violations"]]

    def min_gap(self, a: str, b: str) -> float:
        gaps = [
            float(np.hypot(*(np.asarray(r["states"][a][:2]) - np.asarray(r["states"][b][:2]))))
            for r in self.rows
        ]
        return min(gaps) if gaps else float("inf")

    def summary(self) -> dict:
        solve = [r["solve_ms"] for r in self.rows if r["solve_ms"] is not None]
        return {
            "scenario": self.scenario,
            "controller": self.controller,
            "ticks": len(self.rows),
            "violations": sum(len(r["violations"]) for r in self.rows),
            "violation_ticks": len(self.violation_rows()),
            "events": [e["kind"] for e in self.events],
            "solve_ms_mean": float(np.mean(solve)) if solve else None,
            "solve_ms_max": float(np.max(solve)) if solve else None,
        }

    def to_ndjson(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            for r in self.rows:
                f.write(json.dumps(r) + "\n")


def _label_states(spec: ScenarioSpec, states) -> dict[str, frozenset]:
    return {
        a.name: label_position(states[a.name][:2], spec.agent_regions(a.name))
        for a in spec.agents
    }


def check_violations(spec: ScenarioSpec, valuation: frozenset) -> list:
    return [sorted(group) for group in spec.violations if group <= valuation]


def run_closed_loop(
    spec: ScenarioSpec,
    duration: float | None = None,
    controller: ContingencyController | None = None,
    trace_path: str | Path | None = None,
) -> Trace:
    """Simulate the scenario under a controller and record everything.

    The simulation never stops early: a strategic mismatch or an
    out-of-region vertex zeroes the input and logs an event, but states keep
    integrating and violations keep being recorded.
    """
    if controller is None:
        controller = ContingencyController(spec)
    game = controller.game
    dt = spec.dt
    n_ticks = int(round((spec.duration if duration is None else duration) * spec.rate_hz))

    states = {a.name: a.x0.copy() for a in spec.agents}
    vertex = game.initial
    frozen = False
    trace = Trace(scenario=spec.name, controller=controller.name, visited=[vertex])
    ego = spec.ego
    ego_props = spec.domain.state_props["ego"]

    try:
        for i in range(n_ticks):
            t = i * dt
            tasks = spec.active_tasks(t)
            labels = _label_states(spec, states)
            valuation = frozenset().union(tasks, *labels.values())
            if not frozen:
                try:
                    vertex, taken = monitor_context(game, vertex, valuation, ego_props)
                except ContextMismatchError as e:
                    frozen = True
                    trace.events.append({"kind": "context-mismatch", "t": t, "detail": str(e)})
                else:
                    trace.edges.extend(taken)
                    trace.visited.extend(w for _, w in taken)

            u = np.zeros(ego.model.m)
            diag: dict = {}
            if frozen:
                pass  # strategic layer is down; coast with zero input
            elif vertex not in controller.region:
                trace.events.append({"kind": "out-of-region", "t": t, "vertex": game.ids[vertex]})
            else:
                try:
                    res = controller.step(t, states, vertex, tasks)
                except BridgeError as e:
                    trace.events.append({"kind": "bridge-error", "t": t, "detail": str(e)})
                else:
                    u, diag = res.u, res.diag
                    if not diag.get("converged", True):
                        trace.events.append({"kind": "non-convergence", "t": t})

            violations = check_violations(spec, valuation)
            trace.rows.append({
                "t": round(t, 9),
                "states": {k: v.tolist() for k, v in states.items()},
                "vertex": game.ids[vertex],
                "frozen": frozen,
                "tasks": sorted(tasks),
                "u": u.tolist(),
                "belief": diag.get("marginals"),
                "solve_ms": diag.get("solve_ms"),
                "K": diag.get("K"),
                "t_branch": diag.get("t_branch"),
                "violations": violations,
            })

            positions = {k: v[:2] for k, v in states.items()}
            states[ego.name] = ego.model.step(states[ego.name], u, dt)[0]
            for a in spec.env_agents:
                states[a.name] = scripted_step(a, states[a.name], t, dt, positions, spec.regions)
    finally:
        if trace_path is not None:
            trace.to_ndjson(trace_path)
    return trace
