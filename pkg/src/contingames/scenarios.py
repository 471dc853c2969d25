"""Scenario configs: world geometry, agents, scripts, and loading.

A scenario bundles everything one closed-loop run needs: the symbolic game
(by file reference), region geometry for every state proposition, the agents
with dynamics and costs, scripted environment behavior, timed task-prop
requests, and the loop/solver parameters.  Env scripts are phase lists; a
phase becomes active at its start time provided its guard (an agent-inside-
region condition, re-evaluated every tick) holds, and the latest armed phase
wins, so conditional behavior such as "leave only once the ego has cleared
the room" is expressed directly in data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .dynamics import DynamicsModel, make_model
from .gamegraph import ParityAutomaton, ParityGame, PlanningDomain, load_game_file, product
from .problem import CostSpec, CouplingTerm
from .regions import Rect, RegionCBF
from .solver import SolverConfig
from .templates import StrategyTemplate, WinningRegion, synthesize_template


class ScenarioError(ValueError):
    """Malformed scenario document; the message names the offending field."""


# --------------------------------------------------------------------------
# pieces
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScriptPhase:
    """One behavior segment of a scripted env agent.

    mode "goto" moves straight toward `target` at `speed` (stopping there),
    mode "velocity" applies `target` as a constant planar velocity.  `guard`
    is an (agent, prop, inside) triple: the phase only arms while that
    agent's position is inside (or, with inside=False, outside) the
    proposition's region; guards are re-evaluated every tick.
    """

    start: float
    mode: str
    target: tuple[float, float]
    speed: float | None = None
    guard: tuple[str, str, bool] | None = None


@dataclass(frozen=True)
class RequestEvent:
    """Timed change of the active task propositions."""

    t: float
    add: frozenset = frozenset()
    remove: frozenset = frozenset()


@dataclass(frozen=True)
class AgentSpec:
    name: str
    role: str  # "ego" | "env"
    model: DynamicsModel
    x0: np.ndarray
    cost: CostSpec
    # goal vectors are 2-d points; dims >= 2 of the tracked state are padded
    # with these values (e.g. a reference speed for a bicycle model)
    goal_pad: tuple[float, ...] = ()
    # how an env copy's tracking target is built from its predicted intent
    # region: "centroid" pulls to the region center, "cv" extrapolates the
    # observed velocity and clamps the path into the region
    goal_mode: str = "centroid"
    scripts: Mapping[str, tuple[ScriptPhase, ...]] = field(default_factory=dict)
    script: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))

    def goal_vector(self, point) -> np.ndarray:
        g = np.zeros(self.model.n)
        g[:2] = np.asarray(point, dtype=float)[:2]
        pad = self.goal_pad
        for i in range(2, self.model.n):
            g[i] = pad[i - 2] if i - 2 < len(pad) else 0.0
        return g

    @property
    def phases(self) -> tuple[ScriptPhase, ...]:
        if self.script is None:
            return ()
        return self.scripts[self.script]


@dataclass(frozen=True)
class BeliefConfig:
    gamma: float = 5.0  # 1/m^2 in the prediction-error likelihood
    floor: float = 0.01
    window: int = 10  # ticks of observation history per likelihood
    threshold: float = 0.2  # belief level that arms a predicted context


@dataclass
class ScenarioSpec:
    name: str
    domain: PlanningDomain
    automaton: ParityAutomaton | None
    agents: tuple[AgentSpec, ...]  # ego first
    regions: dict[str, RegionCBF]  # proposition -> geometry, all agents
    rate_hz: float = 20.0
    plan_dt: float = 0.1
    horizon: int = 20
    branching: int | str = "entropy"
    duration: float = 20.0
    belief: BeliefConfig = field(default_factory=BeliefConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    requests: tuple[RequestEvent, ...] = ()
    violations: tuple[frozenset, ...] = ()
    # the numeric layer's avoid regions are inflated by this margin so the
    # penalty equilibrium settles strictly outside the true region
    avoid_margin: float = 0.2
    perturb_pos: float = 0.3  # benchmark stddev on initial positions (m)
    perturb_weights: float = 0.1  # benchmark relative jitter on cost weights
    evasive_brake: float = 3.5  # |decel| that counts as an evasive event
    evasive_lateral: float = 3.5  # |lateral speed| that counts as evasive
    game_path: str | None = None

    @property
    def ego(self) -> AgentSpec:
        return self.agents[0]

    @property
    def env_agents(self) -> tuple[AgentSpec, ...]:
        return self.agents[1:]

    def agent(self, name: str) -> AgentSpec:
        for a in self.agents:
            if a.name == name:
                return a
        raise KeyError(name)

    def agent_regions(self, name: str) -> dict[str, RegionCBF]:
        return {p: c for p, c in self.regions.items() if c.agent == name}

    def active_tasks(self, t: float) -> frozenset:
        out: set = set()
        for ev in self.requests:
            if ev.t <= t + 1e-9:
                out |= ev.add
                out -= ev.remove
        return frozenset(out)

    @property
    def dt(self) -> float:
        return 1.0 / self.rate_hz


def build_strategic(spec: ScenarioSpec) -> tuple[ParityGame, WinningRegion, StrategyTemplate]:
    """Product game plus synthesized strategy template for a scenario."""
    game = product(spec.domain, spec.automaton)
    region, template = synthesize_template(game)
    return game, region, template


# --------------------------------------------------------------------------
# scripted env motion
# --------------------------------------------------------------------------


def _guard_ok(phase: ScriptPhase, positions: Mapping[str, np.ndarray],
              regions: Mapping[str, RegionCBF]) -> bool:
    if phase.guard is None:
        return True
    agent, prop, inside = phase.guard
    return regions[prop].rect.contains(positions[agent]) == inside


def active_phase(phases, t: float, positions, regions) -> ScriptPhase | None:
    """Latest phase already started whose guard currently holds."""
    chosen = None
    for ph in phases:
        if ph.start <= t + 1e-9 and _guard_ok(ph, positions, regions):
            chosen = ph
    return chosen


def scripted_step(agent: AgentSpec, x: np.ndarray, t: float, dt: float,
                  positions, regions) -> np.ndarray:
    """Advance a scripted agent's state by one tick (positions move straight)."""
    ph = active_phase(agent.phases, t, positions, regions)
    x = x.copy()
    if ph is None:
        return x
    pos = x[:2]
    if ph.mode == "velocity":
        pos = pos + np.asarray(ph.target) * dt
    else:  # goto
        delta = np.asarray(ph.target) - pos
        dist = float(np.hypot(*delta))
        if dist > 1e-9:
            step = min(ph.speed * dt, dist)
            pos = pos + delta / dist * step
    x[:2] = pos
    return x


# --------------------------------------------------------------------------
# JSON loading
# --------------------------------------------------------------------------


def _need(doc: dict, key: str, where: str):
    if key not in doc:
        raise ScenarioError(f"missing key {key!r} in {where}")
    return doc[key]


def _reject_unknown(doc: dict, allowed: set, where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ScenarioError(f"unknown keys {sorted(unknown)} in {where}")


def _parse_phase(doc: dict, where: str) -> ScriptPhase:
    _reject_unknown(doc, {"start", "mode", "target", "speed", "guard"}, where)
    mode = _need(doc, "mode", where)
    if mode not in ("goto", "velocity"):
        raise ScenarioError(f"{where}.mode must be 'goto' or 'velocity', got {mode!r}")
    target = tuple(map(float, _need(doc, "target", where)))
    if len(target) != 2:
        raise ScenarioError(f"{where}.target must be a 2-d point")
    speed = doc.get("speed")
    if mode == "goto":
        if speed is None or float(speed) <= 0:
            raise ScenarioError(f"{where}.speed must be positive for goto phases")
        speed = float(speed)
    guard = doc.get("guard")
    if guard is not None:
        if len(guard) not in (2, 3):
            raise ScenarioError(f"{where}.guard must be [agent, prop] or [agent, prop, inside]")
        guard = (str(guard[0]), str(guard[1]),
                 bool(guard[2]) if len(guard) == 3 else True)
    return ScriptPhase(start=float(_need(doc, "start", where)), mode=mode,
                       target=target, speed=speed, guard=guard)


def _parse_cost(doc: dict, where: str) -> CostSpec:
    _reject_unknown(doc, {"goal_weights", "effort_weights", "terminal_scale",
                          "smooth_weight", "d_min", "couplings"}, where)
    couplings = tuple(
        CouplingTerm(other=str(c["other"]),
                     weights=tuple(map(float, c["weights"])),
                     offset=tuple(map(float, c.get("offset", (0.0, 0.0)))))
        for c in doc.get("couplings", ())
    )
    return CostSpec(
        goal_weights=tuple(map(float, _need(doc, "goal_weights", where))),
        effort_weights=tuple(map(float, _need(doc, "effort_weights", where))),
        terminal_scale=float(doc.get("terminal_scale", 1.0)),
        smooth_weight=float(doc.get("smooth_weight", 0.0)),
        d_min=float(doc.get("d_min", 0.0)),
        couplings=couplings,
    )


def _parse_agent(doc: dict, where: str) -> AgentSpec:
    _reject_unknown(doc, {"name", "role", "model", "x0", "cost", "goal_pad",
                          "goal_mode", "scripts", "script"}, where)
    goal_mode = doc.get("goal_mode", "centroid")
    if goal_mode not in ("centroid", "cv", "merge"):
        raise ScenarioError(f"{where}.goal_mode must be 'centroid', 'cv' or 'merge'")
    role = _need(doc, "role", where)
    if role not in ("ego", "env"):
        raise ScenarioError(f"{where}.role must be 'ego' or 'env'")
    mdoc = dict(_need(doc, "model", where))
    _reject_unknown(mdoc, {"kind", "u_min", "u_max", "wheelbase"}, f"{where}.model")
    try:
        model = make_model(mdoc["kind"], u_min=mdoc.get("u_min"),
                           u_max=mdoc.get("u_max"),
                           wheelbase=float(mdoc.get("wheelbase", 1.0)))
    except (KeyError, ValueError) as e:
        raise ScenarioError(f"{where}.model: {e}") from None
    x0 = np.asarray(_need(doc, "x0", where), dtype=float)
    if x0.shape != (model.n,):
        raise ScenarioError(f"{where}.x0 must have {model.n} entries for {mdoc['kind']}")
    scripts = {
        str(k): tuple(_parse_phase(p, f"{where}.scripts.{k}[{i}]")
                      for i, p in enumerate(plist))
        for k, plist in doc.get("scripts", {}).items()
    }
    for k, phases in scripts.items():
        starts = [p.start for p in phases]
        if starts != sorted(starts):
            raise ScenarioError(f"{where}.scripts.{k}: phase start times must be non-decreasing")
    script = doc.get("script")
    if script is not None and script not in scripts:
        raise ScenarioError(f"{where}.script {script!r} is not a declared script")
    if role == "env" and scripts and script is None:
        raise ScenarioError(f"{where}.script must select one of {sorted(scripts)}")
    return AgentSpec(
        name=str(_need(doc, "name", where)), role=role, model=model, x0=x0,
        cost=_parse_cost(dict(_need(doc, "cost", where)), f"{where}.cost"),
        goal_pad=tuple(map(float, doc.get("goal_pad", ()))),
        goal_mode=goal_mode, scripts=scripts, script=script,
    )


_TOP_KEYS = {
    "name", "game", "rate_hz", "plan_dt", "horizon", "branching", "duration",
    "belief", "solver", "regions", "cbf_radius", "agents", "requests",
    "violations", "avoid_margin", "perturb", "evasive",
}


def scenario_from_dict(doc: dict, game_dir: str | Path | None = None) -> ScenarioSpec:
    _reject_unknown(doc, _TOP_KEYS, "scenario")
    game_ref = _need(doc, "game", "scenario")
    game_path = Path(game_dir or ".") / game_ref
    domain, automaton = load_game_file(game_path)

    radius = float(doc.get("cbf_radius", 0.05))
    regions: dict[str, RegionCBF] = {}
    for agent, rects in _need(doc, "regions", "scenario").items():
        if agent not in domain.state_props:
            raise ScenarioError(f"regions.{agent}: unknown agent")
        for prop, bounds in rects.items():
            if prop not in domain.state_props[agent]:
                raise ScenarioError(f"regions.{agent}.{prop}: not a state proposition of {agent!r}")
            if len(bounds) != 4:
                raise ScenarioError(f"regions.{agent}.{prop}: expected [xmin, xmax, ymin, ymax]")
            try:
                rect = Rect(*map(float, bounds))
            except ValueError as e:
                raise ScenarioError(f"regions.{agent}.{prop}: {e}") from None
            regions[prop] = RegionCBF(prop=prop, agent=agent, rect=rect, radius=radius)
    for agent, props in domain.state_props.items():
        missing = props - set(regions)
        if missing:
            raise ScenarioError(f"regions.{agent}: no geometry for {sorted(missing)}")

    agents = tuple(_parse_agent(dict(a), f"agents[{i}]")
                   for i, a in enumerate(_need(doc, "agents", "scenario")))
    if not agents or agents[0].role != "ego" or agents[0].name != "ego":
        raise ScenarioError("agents[0] must be the agent named 'ego' with role 'ego'")
    if any(a.role != "env" for a in agents[1:]):
        raise ScenarioError("agents after the first must have role 'env'")
    if {a.name for a in agents} != set(domain.state_props):
        raise ScenarioError(
            f"agent names {sorted(a.name for a in agents)} must match the game's "
            f"agents {sorted(domain.state_props)}"
        )
    for i, a in enumerate(agents):
        for b in agents[i + 1:]:
            if float(np.hypot(*(a.x0[:2] - b.x0[:2]))) < 1e-6:
                raise ScenarioError(f"agents {a.name!r} and {b.name!r} start at the same position")
        for key, phases in a.scripts.items():
            for j, ph in enumerate(phases):
                if ph.guard is not None:
                    g_agent, g_prop = ph.guard[0], ph.guard[1]
                    if g_agent not in domain.state_props:
                        raise ScenarioError(
                            f"agents[{i}].scripts.{key}[{j}].guard: unknown agent {g_agent!r}")
                    if g_prop not in regions:
                        raise ScenarioError(
                            f"agents[{i}].scripts.{key}[{j}].guard: unknown region {g_prop!r}")

    requests = []
    last_t = -np.inf
    for i, ev in enumerate(doc.get("requests", ())):
        _reject_unknown(dict(ev), {"t", "add", "remove"}, f"requests[{i}]")
        t = float(_need(dict(ev), "t", f"requests[{i}]"))
        if t < last_t:
            raise ScenarioError(f"requests[{i}].t: request times must be non-decreasing")
        last_t = t
        add = frozenset(map(str, ev.get("add", ())))
        remove = frozenset(map(str, ev.get("remove", ())))
        bad = (add | remove) - domain.task_props
        if bad:
            raise ScenarioError(f"requests[{i}]: {sorted(bad)} are not task propositions")
        requests.append(RequestEvent(t=t, add=add, remove=remove))

    violations = []
    declared = domain.all_state_props()
    for i, group in enumerate(doc.get("violations", ())):
        props = frozenset(map(str, group))
        bad = props - declared
        if bad:
            raise ScenarioError(f"violations[{i}]: unknown propositions {sorted(bad)}")
        violations.append(props)

    bdoc = dict(doc.get("belief", {}))
    _reject_unknown(bdoc, {"gamma", "floor", "window", "threshold"}, "belief")
    belief = BeliefConfig(**{k: (int(v) if k == "window" else float(v))
                             for k, v in bdoc.items()})
    if belief.window < 1:
        raise ScenarioError("belief.window must be at least 1")

    try:
        solver = SolverConfig.from_dict(dict(doc.get("solver", {})))
    except TypeError as e:
        raise ScenarioError(f"solver: {e}") from None

    horizon = int(doc.get("horizon", 20))
    if horizon < 2:
        raise ScenarioError("horizon must be at least 2")
    branching = doc.get("branching", "entropy")
    if not (branching == "entropy" or isinstance(branching, int)):
        raise ScenarioError("branching must be 'entropy' or an integer")
    rate_hz = float(doc.get("rate_hz", 20.0))
    plan_dt = float(doc.get("plan_dt", 0.1))
    if rate_hz <= 0 or plan_dt <= 0:
        raise ScenarioError("rate_hz and plan_dt must be positive")

    pdoc = dict(doc.get("perturb", {}))
    _reject_unknown(pdoc, {"pos", "weights"}, "perturb")
    edoc = dict(doc.get("evasive", {}))
    _reject_unknown(edoc, {"brake", "lateral"}, "evasive")

    return ScenarioSpec(
        name=str(_need(doc, "name", "scenario")),
        domain=domain, automaton=automaton, agents=agents, regions=regions,
        rate_hz=rate_hz, plan_dt=plan_dt, horizon=horizon, branching=branching,
        duration=float(doc.get("duration", 20.0)),
        belief=belief, solver=solver,
        requests=tuple(requests), violations=tuple(violations),
        avoid_margin=float(doc.get("avoid_margin", 0.2)),
        perturb_pos=float(pdoc.get("pos", 0.3)),
        perturb_weights=float(pdoc.get("weights", 0.1)),
        evasive_brake=float(edoc.get("brake", 3.5)),
        evasive_lateral=float(edoc.get("lateral", 3.5)),
        game_path=str(game_path),
    )


def load_scenario(path: str | Path) -> ScenarioSpec:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ScenarioError("top level of a scenario file must be an object")
    return scenario_from_dict(doc, game_dir=path.parent)


def bundled_dir() -> Path:
    return Path(__file__).parent / "data"


def bundled_scenario(name: str) -> ScenarioSpec:
    """Load one of the scenarios shipped with the package."""
    path = bundled_dir() / "scenarios" / f"{name}.json"
    if not path.exists():
        have = sorted(p.stem for p in (bundled_dir() / "scenarios").glob("*.json"))
        raise ScenarioError(f"no bundled scenario {name!r}; available: {have}")
    return load_scenario(path)


def with_script(spec: ScenarioSpec, agent: str, script: str) -> ScenarioSpec:
    """Copy of the scenario with another script variant selected."""
    if agent not in {a.name for a in spec.agents}:
        raise ScenarioError(f"no agent named {agent!r} in scenario {spec.name!r}")
    agents = []
    for a in spec.agents:
        if a.name == agent:
            if script not in a.scripts:
                raise ScenarioError(f"agent {agent!r} has no script {script!r}")
            a = replace(a, script=script)
        agents.append(a)
    return replace(spec, agents=tuple(agents))
