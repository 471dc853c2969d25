"""Translate a strategic position into contingency-game ingredients.

Anchored at an environment-owned vertex, every env move is one intent
hypothesis.  Each hypothesis leads to an ego vertex whose local template
supplies (i) a tracking goal -- a live edge if one exists, otherwise any
still-allowed edge, with the newly true ego proposition naming the goal
region -- and (ii) avoid constraints: each unsafe/colive edge target becomes
a forbidden region conjunction, gated on the env-side propositions of the
context so that it binds only while (predicted) env states keep the context
active.  Avoid constraints of a *predicted* context enter only once the
belief in the corresponding intent passes the activation threshold; the
constraints of the vertex currently occupied are always active.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .gamegraph import ENV, Edge, ParityGame
from .problem import AvoidSpec
from .regions import RegionCBF
from .templates import LocalTemplate, StrategyTemplate, WinningRegion, restrict_template


class BridgeError(ValueError):
    """The strategic position cannot be turned into a numeric problem."""


# One joint intent = per env agent (alphabetical order) the set of that
# agent's state propositions predicted to hold next.
JointIntent = tuple[frozenset, ...]


def intent_key(props) -> str:
    """Canonical readable key for one agent's intent (its region props)."""
    props = frozenset(props)
    return "+".join(sorted(props)) if props else "none"


def joint_name(agents, theta: JointIntent) -> str:
    if len(agents) == 1:
        return intent_key(theta[0])
    return "&".join(f"{a}={intent_key(c)}" for a, c in zip(agents, theta))


# --------------------------------------------------------------------------
# intents
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IntentSet:
    """Env moves at one anchor vertex, per agent and jointly.

    `joint` is the full cartesian product over agents; `successor` maps the
    intents realized by an actual edge to the resulting ego vertex (smallest
    vertex index when several edges project to the same intent).
    """

    vertex: int
    agents: tuple[str, ...]
    per_agent: Mapping[str, tuple[frozenset, ...]]
    joint: tuple[JointIntent, ...]
    successor: Mapping[JointIntent, int]


def extract_intents(game: ParityGame, s: int, state_props: Mapping[str, frozenset]) -> IntentSet:
    """Per env agent: the distinct successor-label projections at vertex s."""
    if game.owner[s] != ENV:
        raise BridgeError(f"vertex {game.ids[s]!r} is not environment-owned")
    if not game.succ[s]:
        raise BridgeError(f"vertex {game.ids[s]!r} has no successor")
    agents = tuple(sorted(a for a in state_props if a != "ego"))
    per_agent: dict[str, tuple[frozenset, ...]] = {}
    for p in agents:
        seen: dict[frozenset, None] = {}
        for w in game.succ[s]:
            seen.setdefault(game.labels[w] & state_props[p], None)
        per_agent[p] = tuple(sorted(seen, key=intent_key))
    joint = tuple(itertools.product(*(per_agent[p] for p in agents)))
    successor: dict[JointIntent, int] = {}
    for w in game.succ[s]:  # succ is sorted, so the smallest index wins
        theta = tuple(game.labels[w] & state_props[p] for p in agents)
        successor.setdefault(theta, w)
    return IntentSet(
        vertex=s, agents=agents, per_agent=per_agent, joint=joint, successor=successor
    )


# --------------------------------------------------------------------------
# goals
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GoalSpec:
    """Tracking target derived from one template edge.

    `prop` is the ego region proposition that becomes true along the edge
    (None when the edge keeps the ego labels, i.e. a hold-position goal);
    `x_goal` is the representative point (region centroid) to track.
    """

    edge: Edge
    prop: str | None
    x_goal: np.ndarray


def select_goal(
    local: LocalTemplate,
    game: ParityGame,
    ego_regions: Mapping[str, RegionCBF],
    ego_props,
) -> GoalSpec:
    """Pick the edge to make progress on and turn it into a point target.

    Live edges are preferred; without any, the smallest edge that is neither
    colive nor unsafe is used (inside the winning region one always exists).
    Ties break lexicographically for determinism.
    """
    ego_props = frozenset(ego_props)
    if local.live:
        edge = min(local.live)
    else:
        out = [(local.vertex, w) for w in game.succ[local.vertex]]
        allowed = [e for e in out if e not in local.colive and e not in local.unsafe]
        if not allowed:
            raise BridgeError(
                f"no allowed edge at {game.ids[local.vertex]!r}; vertex cannot be "
                "inside the winning region"
            )
        edge = min(allowed)
    u, w = edge
    added = sorted((game.labels[w] - game.labels[u]) & ego_props)
    if added:
        prop, target = added[0], added[0]
    else:
        current = sorted(game.labels[u] & ego_props)
        if not current:
            raise BridgeError(
                f"no ego region proposition holds at {game.ids[u]!r}; cannot place a goal"
            )
        prop, target = None, current[0]
    cbf = ego_regions.get(target)
    if cbf is None:
        raise BridgeError(f"no region geometry for proposition {target!r}")
    return GoalSpec(edge=edge, prop=prop, x_goal=cbf.centroid())


# --------------------------------------------------------------------------
# avoid constraints
# --------------------------------------------------------------------------


def build_avoid(
    local: LocalTemplate,
    game: ParityGame,
    cbfs: Mapping[str, RegionCBF],
    state_props: Mapping[str, frozenset],
    threshold: float = 0.2,
) -> list[AvoidSpec]:
    """One forbidden region conjunction per unsafe/colive edge target.

    The avoid set of an edge is the state-proposition part of its target
    label (the letter that would fire the edge); the gate is the env-side
    state label of the source context, restricting the constraint to hold
    only while that context is (predicted to be) active.  Task propositions
    carry no geometry and are dropped.  Equal conjunctions are emitted once.
    """
    owner_of = {p: a for a, props in state_props.items() for p in props}

    def term(p: str) -> tuple[str, str]:
        if p not in cbfs:
            raise BridgeError(f"no region CBF for proposition {p!r}")
        return (owner_of[p], p)

    lab = game.labels[local.vertex]
    gate = tuple(term(p) for p in sorted(lab) if owner_of.get(p, "ego") != "ego")
    specs: list[AvoidSpec] = []
    seen: set[frozenset] = set()
    for _, w in sorted(local.unsafe | local.colive):
        avoid = tuple(term(p) for p in sorted(game.labels[w]) if p in owner_of)
        if not avoid:
            continue  # no geometric footprint to block
        spec = AvoidSpec(avoid=avoid, gate=gate, threshold=threshold)
        if spec.props() not in seen:
            seen.add(spec.props())
            specs.append(spec)
    return specs


def condition_avoid(spec: AvoidSpec, intent_of: Mapping[str, frozenset]) -> AvoidSpec | None:
    """Specialize an avoid clause to one hypothesis.

    Env-side terms naming a region the hypothesis already predicts for that
    agent are presumed true and drop out, tightening the clause to what the
    ego can still control.  A clause whose every term is presumed leaves
    nothing to enforce numerically and is dropped.
    """
    def keep(term):
        agent, prop = term
        return prop not in intent_of.get(agent, frozenset())

    avoid = tuple(t for t in spec.avoid if keep(t))
    if not avoid:
        return None
    gate = tuple(t for t in spec.gate if keep(t))
    if avoid == spec.avoid and gate == spec.gate:
        return spec
    return AvoidSpec(avoid=avoid, gate=gate, threshold=spec.threshold)


def simplify_avoid(specs, plans=None):
    """Drop duplicate and absorbed clauses; optionally merge equal plans.

    A clause forbids the joint occupancy of all its regions, so a clause
    over a subset of another's regions is the stronger constraint: the
    superset clause is dropped (absorption) provided the surviving clause
    activates at least as easily.  When `plans` is given, plans with equal
    goals, env predictions and avoid sets are merged with beliefs summed.
    """
    chosen: dict[frozenset, AvoidSpec] = {}
    for s in specs:
        key = s.props()
        old = chosen.get(key)
        if old is None or s.threshold < old.threshold:
            chosen[key] = s
    kept: list[frozenset] = []
    for key in sorted(chosen, key=lambda k: (len(k), sorted(k))):
        if not any(k2 < key and chosen[k2].threshold <= chosen[key].threshold for k2 in kept):
            kept.append(key)
    out = tuple(chosen[k] for k in sorted(kept, key=sorted))
    if plans is None:
        return out, None
    return out, merge_plans(plans)


# --------------------------------------------------------------------------
# per-context planning
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ContextPlan:
    """Everything one hypothesis contributes to the numeric problem."""

    name: str
    belief: float
    intent: JointIntent
    vertex: int  # predicted ego vertex under this intent
    goal: GoalSpec
    env_intents: Mapping[str, frozenset]  # agent -> predicted region props
    avoid: tuple[AvoidSpec, ...]
    covered: tuple[str, ...] = ()

    def signature(self):
        """Future behavior fingerprint used for merging."""
        env = tuple((a, intent_key(c)) for a, c in sorted(self.env_intents.items()))
        avoid = frozenset((s.props(), s.threshold) for s in self.avoid)
        return (self.goal.prop, tuple(np.round(self.goal.x_goal, 9)), env, avoid)


def merge_plans(plans):
    """Merge plans with identical future behavior; beliefs add up."""
    grouped: dict = {}
    order: list = []
    for p in plans:
        sig = p.signature()
        if sig not in grouped:
            grouped[sig] = p
            order.append(sig)
        else:
            q = grouped[sig]
            grouped[sig] = ContextPlan(
                name=f"{q.name}+{p.name}",
                belief=q.belief + p.belief,
                intent=q.intent,
                vertex=q.vertex,
                goal=q.goal,
                env_intents=q.env_intents,
                avoid=q.avoid,
                covered=tuple(dict.fromkeys(q.covered + p.covered)),
            )
    return tuple(grouped[sig] for sig in order)


def anchor_env_vertex(
    game: ParityGame, region: WinningRegion, template: StrategyTemplate, v: int
) -> int:
    """Env vertex whose moves are the next strategic uncertainty from v.

    From an ego vertex this is the target of the label-preserving (stay)
    edge when that edge is safe, otherwise the smallest safe successor; an
    env vertex is its own anchor.
    """
    if game.owner[v] == ENV:
        return v
    stay = [w for w in game.succ[v] if game.labels[w] == game.labels[v]]
    candidates = stay + [w for w in game.succ[v] if w not in stay]
    for w in candidates:
        if (v, w) not in template.unsafe and w in region:
            return w
    raise BridgeError(f"no safe successor at {game.ids[v]!r}")


def plan_context(
    game: ParityGame,
    region: WinningRegion,
    template: StrategyTemplate,
    anchor: int,
    state_props: Mapping[str, frozenset],
    cbfs: Mapping[str, RegionCBF],
    beliefs: Mapping[JointIntent, float],
    threshold: float = 0.2,
    current_vertex: int | None = None,
) -> tuple[ContextPlan, ...]:
    """Full strategic-to-numeric translation at one env anchor vertex.

    Per realized intent: predicted ego vertex, goal, and belief-activated
    avoid constraints; the currently occupied vertex's constraints are
    active in every hypothesis regardless of belief.  Beliefs renormalize
    over the realized intents; plans with identical behavior merge.
    """
    intents = extract_intents(game, anchor, state_props)
    ego_props = frozenset(state_props.get("ego", frozenset()))
    ego_regions = {p: cbfs[p] for p in ego_props if p in cbfs}

    specs_now: list[AvoidSpec] = []
    if current_vertex is not None:
        local_now = restrict_template(game, region, template, current_vertex)
        specs_now = build_avoid(local_now, game, cbfs, state_props, threshold)

    plans: list[ContextPlan] = []
    for theta in intents.joint:
        w = intents.successor.get(theta)
        if w is None:
            continue  # label combination not realized by any env move
        b = float(beliefs.get(theta, 0.0))
        local = restrict_template(game, region, template, w)
        goal = select_goal(local, game, ego_regions, ego_props)
        specs = list(specs_now)
        if w != current_vertex:
            specs += [s for s in build_avoid(local, game, cbfs, state_props, threshold)
                      if b >= s.threshold]
        intent_of = dict(zip(intents.agents, theta))
        specs = [c for s in specs if (c := condition_avoid(s, intent_of)) is not None]
        avoid, _ = simplify_avoid(specs)
        name = joint_name(intents.agents, theta)
        plans.append(
            ContextPlan(
                name=name,
                belief=b,
                intent=theta,
                vertex=w,
                goal=goal,
                env_intents=dict(zip(intents.agents, theta)),
                avoid=avoid,
                covered=(name,),
            )
        )
    if not plans:
        raise BridgeError(f"no realized intent at {game.ids[anchor]!r}")
    total = sum(p.belief for p in plans)
    if total <= 0.0:
        raise BridgeError("belief mass over realized intents is zero")
    plans = [
        ContextPlan(
            name=p.name, belief=p.belief / total, intent=p.intent, vertex=p.vertex,
            goal=p.goal, env_intents=p.env_intents, avoid=p.avoid, covered=p.covered,
        )
        for p in plans
    ]
    return merge_plans(plans)


# --------------------------------------------------------------------------
# beliefs
# --------------------------------------------------------------------------


def floor_normalize(probs: dict, floor: float) -> dict:
    """Normalize so entries sum to one while none drops below `floor`.

    Entries at the floor are pinned there; the rest share the leftover mass
    proportionally (repeated until no entry is pushed under the floor).
    """
    n = len(probs)
    total = sum(probs.values())
    if total <= 0.0 or floor * n >= 1.0:
        return {k: 1.0 / n for k in probs}
    out = {k: v / total for k, v in probs.items()}
    for _ in range(n):
        low = {k for k, v in out.items() if v < floor}
        if not low:
            break
        rest = 1.0 - floor * len(low)
        high_total = sum(v for k, v in out.items() if k not in low)
        out = {
            k: (floor if k in low else v * rest / high_total) for k, v in out.items()
        }
    return out


@dataclass
class BeliefState:
    """Independent per-agent beliefs over intents, keyed by intent_key."""

    marginals: dict[str, dict[str, float]]

    @staticmethod
    def uniform(intents: IntentSet) -> "BeliefState":
        return BeliefState(
            {
                a: {intent_key(c): 1.0 / len(intents.per_agent[a]) for c in intents.per_agent[a]}
                for a in intents.agents
            }
        )

    def joint(self, intents: IntentSet) -> dict[JointIntent, float]:
        """Product beliefs over the joint intent set (independence)."""
        out: dict[JointIntent, float] = {}
        for theta in intents.joint:
            b = 1.0
            for a, c in zip(intents.agents, theta):
                b *= self.marginals[a].get(intent_key(c), 0.0)
            out[theta] = b
        return out

    def remap(self, intents: IntentSet, floor: float = 0.01) -> "BeliefState":
        """Carry beliefs into a new intent set by label matching.

        Matched intents keep their mass; new unmatched intents enter at the
        uniform share, then everything is floored and renormalized.
        """
        marg: dict[str, dict[str, float]] = {}
        for a in intents.agents:
            keys = [intent_key(c) for c in intents.per_agent[a]]
            old = self.marginals.get(a, {})
            fresh = {k: old.get(k, 1.0 / len(keys)) for k in keys}
            marg[a] = floor_normalize(fresh, floor)
        return BeliefState(marg)
