"""Contingency dynamic game description.

A problem couples P players over a horizon of T states (the first state is
the current one) and T-1 inputs per intent hypothesis. The ego player shares
its first t_branch inputs across all hypotheses (one plan prefix that must
work for every intent), after which the copies decouple. Env players are
fully decoupled per hypothesis: copy k is that player's best response under
intent k. The ego objective is the belief-weighted sum of its per-hypothesis
costs; constraint penalties are not belief-scaled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynamics import DynamicsModel, make_model
from .regions import Rect, RegionCBF


# --------------------------------------------------------------------------
# cost model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingTerm:
    """Private quadratic tie to another player: ||w . (pos - pos_other - offset)||^2."""

    other: str
    weights: tuple[float, float]
    offset: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class CostSpec:
    goal_weights: tuple[float, ...]  # per state dim, stagewise sqrt-weights
    effort_weights: tuple[float, ...]  # per input dim
    terminal_scale: float = 1.0
    smooth_weight: float = 0.0
    d_min: float = 0.0  # collision radius; pairwise radius is the max of the two
    couplings: tuple[CouplingTerm, ...] = ()


@dataclass(frozen=True)
class PlayerSpec:
    name: str
    model: DynamicsModel
    x0: np.ndarray
    cost: CostSpec

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        if self.x0.shape != (self.model.n,):
            raise ValueError(f"player {self.name!r}: x0 shape {self.x0.shape} != ({self.model.n},)")
        if len(self.cost.goal_weights) != self.model.n:
            raise ValueError(f"player {self.name!r}: goal_weights must have length n")
        if len(self.cost.effort_weights) != self.model.m:
            raise ValueError(f"player {self.name!r}: effort_weights must have length m")


# --------------------------------------------------------------------------
# hypotheses and avoid constraints
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AvoidSpec:
    """Forbidden conjunction of region propositions.

    The constraint is violated when every referenced (agent, prop) region is
    simultaneously occupied; `gate` lists the context part (externally driven
    propositions that keep the constraint armed), `avoid` the forbidden set.
    Both sides conjoin identically in the continuous penalty.  `threshold` is
    the belief level at which a predicted context activates the constraint.
    """

    avoid: tuple[tuple[str, str], ...]  # (agent, prop)
    gate: tuple[tuple[str, str], ...] = ()
    threshold: float = 0.2

    def terms(self) -> tuple[tuple[str, str], ...]:
        seen: dict[tuple[str, str], None] = {}
        for t in self.gate + self.avoid:
            seen[tuple(t)] = None
        return tuple(sorted(seen))

    def props(self) -> frozenset[tuple[str, str]]:
        return frozenset(self.terms())


@dataclass(frozen=True)
class Hypothesis:
    """One joint env-intent: per-player goals plus the active avoid set."""

    name: str
    belief: float
    goals: dict[str, np.ndarray]  # player -> (n,) or (T, n) target
    avoid: tuple[AvoidSpec, ...] = ()
    covered: tuple[str, ...] = ()  # intent keys merged into this hypothesis


# --------------------------------------------------------------------------
# the problem object
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ContingencyProblem:
    dt: float
    T: int  # number of state knots; inputs run over T-1 steps
    t_branch: int
    players: tuple[PlayerSpec, ...]  # ego first
    hypotheses: tuple[Hypothesis, ...]
    regions: dict[str, dict[str, RegionCBF]] = field(default_factory=dict)

    @property
    def ego(self) -> PlayerSpec:
        return self.players[0]

    @property
    def K(self) -> int:
        return len(self.hypotheses)

    @property
    def beliefs(self) -> np.ndarray:
        return np.array([h.belief for h in self.hypotheses])

    def player_index(self, name: str) -> int:
        for i, p in enumerate(self.players):
            if p.name == name:
                return i
        raise KeyError(name)

    def goal_traj(self, hyp: Hypothesis, player: PlayerSpec) -> np.ndarray:
        """Goal as a dense (T, n) array (constant goals are broadcast)."""
        g = np.asarray(hyp.goals[player.name], dtype=float)
        n = player.model.n
        if g.shape == (n,):
            return np.broadcast_to(g, (self.T, n)).copy()
        if g.shape == (self.T, n):
            return g.copy()
        raise ValueError(
            f"goal for {player.name!r} in {hyp.name!r} has shape {g.shape}, "
            f"expected ({n},) or ({self.T}, {n})"
        )

    @property
    def n_vars(self) -> int:
        """Total scalar decision variables after ego-input aliasing."""
        total = 0
        for p in self.players:
            total += self.K * (self.T * p.model.n + (self.T - 1) * p.model.m)
        shared = min(self.t_branch, self.T - 1)
        total -= shared * self.ego.model.m * (self.K - 1)
        return total

    # -- serialization -------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "dt": self.dt,
            "T": self.T,
            "t_branch": self.t_branch,
            "players": [
                {
                    "name": p.name,
                    "model": {
                        "kind": p.model.kind,
                        "u_min": p.model.u_min.tolist(),
                        "u_max": p.model.u_max.tolist(),
                        "wheelbase": p.model.wheelbase,
                    },
                    "x0": p.x0.tolist(),
                    "cost": {
                        "goal_weights": list(p.cost.goal_weights),
                        "effort_weights": list(p.cost.effort_weights),
                        "terminal_scale": p.cost.terminal_scale,
                        "smooth_weight": p.cost.smooth_weight,
                        "d_min": p.cost.d_min,
                        "couplings": [
                            {"other": c.other, "weights": list(c.weights), "offset": list(c.offset)}
                            for c in p.cost.couplings
                        ],
                    },
                }
                for p in self.players
            ],
            "regions": {
                agent: {
                    prop: {
                        "rect": [c.rect.xmin, c.rect.xmax, c.rect.ymin, c.rect.ymax],
                        "radius": c.radius,
                    }
                    for prop, c in props.items()
                }
                for agent, props in self.regions.items()
            },
            "hypotheses": [
                {
                    "name": h.name,
                    "belief": h.belief,
                    "covered": list(h.covered),
                    "goals": {name: np.asarray(g).tolist() for name, g in h.goals.items()},
                    "avoid": [
                        {
                            "gate": [list(t) for t in a.gate],
                            "avoid": [list(t) for t in a.avoid],
                            "threshold": a.threshold,
                        }
                        for a in h.avoid
                    ],
                }
                for h in self.hypotheses
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    @staticmethod
    def from_json_dict(doc: dict) -> "ContingencyProblem":
        players = []
        for pd in doc["players"]:
            md = pd["model"]
            model = make_model(
                md["kind"],
                u_min=md.get("u_min"),
                u_max=md.get("u_max"),
                wheelbase=md.get("wheelbase", 1.0),
            )
            cd = pd["cost"]
            cost = CostSpec(
                goal_weights=tuple(cd["goal_weights"]),
                effort_weights=tuple(cd["effort_weights"]),
                terminal_scale=cd.get("terminal_scale", 1.0),
                smooth_weight=cd.get("smooth_weight", 0.0),
                d_min=cd.get("d_min", 0.0),
                couplings=tuple(
                    CouplingTerm(c["other"], tuple(c["weights"]), tuple(c.get("offset", (0, 0))))
                    for c in cd.get("couplings", ())
                ),
            )
            players.append(PlayerSpec(pd["name"], model, np.asarray(pd["x0"]), cost))
        regions = {
            agent: {
                prop: RegionCBF(prop, agent, Rect(*rd["rect"]), rd.get("radius", 0.05))
                for prop, rd in props.items()
            }
            for agent, props in doc.get("regions", {}).items()
        }
        hyps = tuple(
            Hypothesis(
                name=hd["name"],
                belief=float(hd["belief"]),
                goals={k: np.asarray(v, dtype=float) for k, v in hd["goals"].items()},
                avoid=tuple(
                    AvoidSpec(
                        avoid=tuple(tuple(t) for t in ad["avoid"]),
                        gate=tuple(tuple(t) for t in ad.get("gate", ())),
                        threshold=float(ad.get("threshold", 0.2)),
                    )
                    for ad in hd.get("avoid", ())
                ),
                covered=tuple(hd.get("covered", ())),
            )
            for hd in doc["hypotheses"]
        )
        return build_problem(
            dt=doc["dt"],
            T=doc["T"],
            players=players,
            hypotheses=hyps,
            t_branch=doc["t_branch"],
            regions=regions,
        )

    @staticmethod
    def load(path: str | Path) -> "ContingencyProblem":
        return ContingencyProblem.from_json_dict(json.loads(Path(path).read_text()))


def build_problem(
    dt: float,
    T: int,
    players,
    hypotheses,
    t_branch: int,
    regions: dict[str, dict[str, RegionCBF]] | None = None,
) -> ContingencyProblem:
    """Validate and assemble a ContingencyProblem."""
    players = tuple(players)
    hypotheses = tuple(hypotheses)
    regions = dict(regions or {})
    if T < 2:
        raise ValueError("horizon must have at least two state knots")
    if not 0 <= t_branch <= T:
        raise ValueError(f"t_branch {t_branch} outside [0, {T}]")
    if not players:
        raise ValueError("no players")
    names = [p.name for p in players]
    if len(set(names)) != len(names):
        raise ValueError("duplicate player names")
    if not hypotheses:
        raise ValueError("no hypotheses")
    b = np.array([h.belief for h in hypotheses])
    if np.any(b < -1e-12) or abs(b.sum() - 1.0) > 1e-9:
        raise ValueError(f"beliefs must form a distribution, got {b.tolist()}")
    hnames = [h.name for h in hypotheses]
    if len(set(hnames)) != len(hnames):
        raise ValueError("duplicate hypothesis names")
    for p in players:
        for c in p.cost.couplings:
            if c.other not in names or c.other == p.name:
                raise ValueError(f"coupling of {p.name!r} references {c.other!r}")
    prob = ContingencyProblem(
        dt=float(dt), T=int(T), t_branch=int(t_branch),
        players=players, hypotheses=hypotheses, regions=regions,
    )
    for h in hypotheses:
        for p in players:
            if p.name not in h.goals:
                raise ValueError(f"hypothesis {h.name!r} misses a goal for {p.name!r}")
            prob.goal_traj(h, p)  # shape check
        for a in h.avoid:
            for agent, propname in a.terms():
                if propname not in regions.get(agent, {}):
                    raise ValueError(
                        f"avoid constraint references unknown region {agent}/{propname}"
                    )
    return prob


def branching_time(beliefs, T: int, mode: int | str = "entropy") -> int:
    """Number of shared ego input steps.

    Entropy mode scales T by the normalized entropy of the belief: confident
    beliefs commit almost immediately, uniform beliefs stay aliased longest.
    """
    if isinstance(mode, (int, np.integer)):
        return int(min(max(int(mode), 0), T))
    if mode != "entropy":
        raise ValueError(f"unknown branching mode {mode!r}")
    b = np.asarray(beliefs, dtype=float)
    K = len(b)
    if K <= 1:
        return 0
    b = b / b.sum()
    nz = b[b > 0]
    H = float(-(nz * np.log(nz)).sum())
    return int(min(max(round(T * H / math.log(K)), 0), T))


# --------------------------------------------------------------------------
# solutions
# --------------------------------------------------------------------------


@dataclass
class Solution:
    """Structured trajectories: states[(player, k)] (T,n), inputs (T-1,m)."""

    states: dict[tuple[str, int], np.ndarray]
    inputs: dict[tuple[str, int], np.ndarray]
    stats: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "states": {f"{p}/{k}": v.tolist() for (p, k), v in self.states.items()},
            "inputs": {f"{p}/{k}": v.tolist() for (p, k), v in self.inputs.items()},
            "stats": self.stats,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    @staticmethod
    def from_json_dict(doc: dict) -> "Solution":
        def parse(d):
            out = {}
            for key, v in d.items():
                p, k = key.rsplit("/", 1)
                out[(p, int(k))] = np.asarray(v, dtype=float)
            return out

        return Solution(parse(doc["states"]), parse(doc["inputs"]), doc.get("stats", {}))

    @staticmethod
    def load(path: str | Path) -> "Solution":
        return Solution.from_json_dict(json.loads(Path(path).read_text()))


def hypothesis_cost(problem: ContingencyProblem, sol: Solution, player: str, k: int) -> float:
    """J^c of one player under hypothesis k (cost terms only, no penalties)."""
    p = problem.players[problem.player_index(player)]
    hyp = problem.hypotheses[k]
    X = sol.states[(player, k)]
    U = sol.inputs[(player, k)]
    goals = problem.goal_traj(hyp, p)
    w = np.asarray(p.cost.goal_weights, dtype=float)
    scale = np.ones(problem.T)
    scale[-1] = p.cost.terminal_scale
    J = float((scale[:, None] * (w[None, :] * (X - goals)) ** 2).sum())
    we = np.asarray(p.cost.effort_weights, dtype=float)
    J += float(((we[None, :] * U) ** 2).sum())
    if p.cost.smooth_weight > 0 and len(U) > 1:
        J += float(p.cost.smooth_weight * ((U[1:] - U[:-1]) ** 2).sum())
    for c in p.cost.couplings:
        Xq = sol.states[(c.other, k)]
        diff = X[:, :2] - Xq[:, :2] - np.asarray(c.offset)
        J += float(((np.asarray(c.weights)[None, :] * diff) ** 2).sum())
    return J
