"""Strategic-layer game graphs.

A planning domain is a turn-based graph of discrete contexts, alternating
between ego-owned and environment-owned vertices.  Composing a domain with a
deterministic parity automaton yields a parity game whose winning condition is
"the maximum color seen infinitely often is even" (ego = player 0).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

Label = frozenset[str]
Edge = tuple[int, int]

EGO = 0
ENV = 1

_OWNER_NAMES = {"ego": EGO, "env": ENV}


class GameFormatError(ValueError):
    """A game file could not be parsed or failed structural validation."""


class AlphabetError(GameFormatError):
    """The automaton does not cover a label produced by the domain."""


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return f"[{self.code}] {self.message}"


@dataclass(frozen=True)
class PlanningDomain:
    """Turn-based context graph with propositional labels.

    contexts are kept sorted; actions are directed edges between context ids.
    ``state_props`` maps an agent name to the propositions describing that
    agent's physical state; ``task_props`` hold request/task events.
    """

    contexts: tuple[str, ...]
    owner: Mapping[str, int]
    actions: tuple[tuple[str, str], ...]
    initial: str
    state_props: Mapping[str, frozenset[str]]
    task_props: frozenset[str]
    labels: Mapping[str, Label]

    def successors(self, context: str) -> tuple[str, ...]:
        return tuple(b for a, b in self.actions if a == context)

    @property
    def agents(self) -> tuple[str, ...]:
        return tuple(sorted(self.state_props))

    @property
    def env_agents(self) -> tuple[str, ...]:
        return tuple(a for a in self.agents if a != "ego")

    def all_state_props(self) -> frozenset[str]:
        out: set[str] = set()
        for props in self.state_props.values():
            out |= props
        return frozenset(out)


@dataclass(frozen=True)
class ParityAutomaton:
    """Deterministic parity automaton over letters = sets of propositions."""

    states: tuple[str, ...]
    initial: str
    colors: Mapping[str, int]
    transitions: Mapping[tuple[str, Label], str]

    @property
    def alphabet(self) -> frozenset[Label]:
        return frozenset(letter for _, letter in self.transitions)

    def step(self, state: str, letter: Label) -> str:
        try:
            return self.transitions[(state, letter)]
        except KeyError:
            raise AlphabetError(
                f"automaton has no transition from {state!r} on letter "
                f"{sorted(letter)}"
            ) from None


@dataclass(frozen=True)
class ParityGame:
    """Parity game over product vertices, win = max color seen i.o. is even.

    Vertices are indexed; parallel tuples carry per-vertex data.  ``succ`` is
    the adjacency list, already sorted, so iteration order is deterministic.
    """

    ids: tuple[str, ...]
    owner: tuple[int, ...]
    color: tuple[int, ...]
    labels: tuple[Label, ...]
    context: tuple[str, ...]
    autostate: tuple[str, ...]
    initial: int
    succ: tuple[tuple[int, ...], ...]

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def edges(self) -> tuple[Edge, ...]:
        return tuple((u, v) for u in range(self.n) for v in self.succ[u])

    def predecessors(self) -> tuple[tuple[int, ...], ...]:
        pred: list[list[int]] = [[] for _ in range(self.n)]
        for u in range(self.n):
            for v in self.succ[u]:
                pred[v].append(u)
        return tuple(tuple(p) for p in pred)

    def index_of(self, vertex_id: str) -> int:
        try:
            return self.ids.index(vertex_id)
        except ValueError:
            raise KeyError(f"unknown vertex id {vertex_id!r}") from None


# ---------------------------------------------------------------------------
# JSON game file format


def _require_keys(obj: dict, allowed: set[str], required: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise GameFormatError(f"unknown keys {sorted(unknown)} in {where}")
    missing = required - set(obj)
    if missing:
        raise GameFormatError(f"missing keys {sorted(missing)} in {where}")


def load_game_file(path: str | Path) -> tuple[PlanningDomain, ParityAutomaton | None]:
    """Parse a game JSON file into a domain and an optional automaton.

    Unknown keys are rejected.  Files declaring a parity convention other than
    max-even are rejected rather than silently converted.
    """
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise GameFormatError("top level of a game file must be an object")
    _require_keys(
        raw,
        {"contexts", "actions", "initial", "propositions", "automaton", "parity"},
        {"contexts", "actions", "initial", "propositions"},
        "game file",
    )
    if raw.get("parity", "max-even") != "max-even":
        raise GameFormatError(
            f"unsupported parity convention {raw.get('parity')!r}; "
            "only 'max-even' games are accepted"
        )

    props = raw["propositions"]
    _require_keys(props, {"state", "task"}, {"state"}, "propositions")
    state_props = {
        agent: frozenset(map(str, plist)) for agent, plist in props["state"].items()
    }
    if "ego" not in state_props:
        raise GameFormatError("propositions.state must declare an 'ego' agent")
    task_props = frozenset(map(str, props.get("task", [])))
    declared = frozenset().union(task_props, *state_props.values())
    for agent_a in state_props:
        for agent_b in state_props:
            if agent_a < agent_b and state_props[agent_a] & state_props[agent_b]:
                raise GameFormatError(
                    f"agents {agent_a!r} and {agent_b!r} share state propositions"
                )

    owner: dict[str, int] = {}
    labels: dict[str, Label] = {}
    ids: list[str] = []
    for i, ctx in enumerate(raw["contexts"]):
        _require_keys(ctx, {"id", "owner", "labels"}, {"id", "owner", "labels"}, f"contexts[{i}]")
        cid = str(ctx["id"])
        if cid in owner:
            raise GameFormatError(f"duplicate context id {cid!r}")
        if ctx["owner"] not in _OWNER_NAMES:
            raise GameFormatError(f"context {cid!r} owner must be 'ego' or 'env'")
        lab = frozenset(map(str, ctx["labels"]))
        extra = lab - declared
        if extra:
            raise GameFormatError(
                f"context {cid!r} uses undeclared propositions {sorted(extra)}"
            )
        owner[cid] = _OWNER_NAMES[ctx["owner"]]
        labels[cid] = lab
        ids.append(cid)

    actions: list[tuple[str, str]] = []
    seen = set()
    for i, act in enumerate(raw["actions"]):
        _require_keys(act, {"from", "to"}, {"from", "to"}, f"actions[{i}]")
        a, b = str(act["from"]), str(act["to"])
        for cid in (a, b):
            if cid not in owner:
                raise GameFormatError(f"action references unknown context {cid!r}")
        if (a, b) in seen:
            raise GameFormatError(f"duplicate action {a!r} -> {b!r}")
        seen.add((a, b))
        actions.append((a, b))

    initial = str(raw["initial"])
    if initial not in owner:
        raise GameFormatError(f"initial context {initial!r} is not declared")

    domain = PlanningDomain(
        contexts=tuple(sorted(ids)),
        owner=owner,
        actions=tuple(sorted(actions)),
        initial=initial,
        state_props=state_props,
        task_props=task_props,
        labels=labels,
    )
    _check_domain(domain)

    automaton = None
    if "automaton" in raw:
        automaton = _parse_automaton(raw["automaton"], declared)
    return domain, automaton


def _parse_automaton(raw: dict, declared: frozenset[str]) -> ParityAutomaton:
    _require_keys(
        raw,
        {"states", "initial", "colors", "transitions"},
        {"states", "initial", "colors", "transitions"},
        "automaton",
    )
    states = tuple(map(str, raw["states"]))
    if len(set(states)) != len(states):
        raise GameFormatError("duplicate automaton state ids")
    colors = {str(q): int(c) for q, c in raw["colors"].items()}
    if set(colors) != set(states):
        raise GameFormatError("automaton colors must cover exactly the states")
    if any(c < 0 for c in colors.values()):
        raise GameFormatError("automaton colors must be non-negative")
    if raw["initial"] not in colors:
        raise GameFormatError("automaton initial state is not declared")

    transitions: dict[tuple[str, Label], str] = {}
    for i, tr in enumerate(raw["transitions"]):
        _require_keys(tr, {"from", "letter", "to"}, {"from", "letter", "to"}, f"transitions[{i}]")
        q, q2 = str(tr["from"]), str(tr["to"])
        if q not in colors or q2 not in colors:
            raise GameFormatError(f"transition {i} references unknown state")
        letter = frozenset(map(str, tr["letter"]))
        extra = letter - declared
        if extra:
            raise GameFormatError(
                f"transition {i} uses undeclared propositions {sorted(extra)}"
            )
        key = (q, letter)
        if key in transitions:
            raise GameFormatError(
                f"duplicate transition from {q!r} on {sorted(letter)}"
            )
        transitions[key] = q2

    auto = ParityAutomaton(
        states=states, initial=str(raw["initial"]), colors=colors, transitions=transitions
    )
    # Totality over the declared alphabet: every state must handle every letter
    # that any state handles.
    letters = auto.alphabet
    for q in states:
        for letter in letters:
            if (q, letter) not in transitions:
                raise AlphabetError(
                    f"automaton transition function is partial: state {q!r} "
                    f"has no transition on {sorted(letter)}"
                )
    return auto


def _check_domain(domain: PlanningDomain) -> None:
    diags = [d for d in validate_domain(domain) if d.code != "unreachable"]
    if diags:
        raise GameFormatError("; ".join(str(d) for d in diags))


def validate_domain(domain: PlanningDomain) -> list[Diagnostic]:
    """Structural diagnostics: alternation, deadlocks, reachability."""
    out: list[Diagnostic] = []
    succ: dict[str, list[str]] = {c: [] for c in domain.contexts}
    for a, b in domain.actions:
        succ[a].append(b)
        if domain.owner[a] == domain.owner[b]:
            out.append(
                Diagnostic(
                    "alternation",
                    f"action {a!r} -> {b!r} joins two "
                    f"{'ego' if domain.owner[a] == EGO else 'env'}-owned contexts",
                )
            )
    for c in domain.contexts:
        if not succ[c]:
            out.append(Diagnostic("deadlock", f"context {c!r} has no outgoing action"))
    reached = {domain.initial}
    frontier = [domain.initial]
    while frontier:
        nxt = frontier.pop()
        for b in succ[nxt]:
            if b not in reached:
                reached.add(b)
                frontier.append(b)
    for c in domain.contexts:
        if c not in reached:
            out.append(Diagnostic("unreachable", f"context {c!r} is unreachable"))
    return out


# ---------------------------------------------------------------------------
# Product construction


def product(domain: PlanningDomain, automaton: ParityAutomaton | None) -> ParityGame:
    """Reachable product of a domain with a parity automaton.

    Vertex (s, q) steps to (s', step(q, L(s'))); the initial vertex consumes
    the initial context's label.  With no automaton the domain itself becomes
    a game in which every vertex has color 0.
    """
    if automaton is None:
        return _game_from_domain(domain)

    # Strict alphabet coverage before exploring.
    letters = automaton.alphabet
    for c in domain.contexts:
        if domain.labels[c] not in letters:
            raise AlphabetError(
                f"domain label {sorted(domain.labels[c])} of context {c!r} "
                f"is not in the automaton alphabet"
            )

    succ_ctx: dict[str, list[str]] = {c: [] for c in domain.contexts}
    for a, b in domain.actions:
        succ_ctx[a].append(b)

    q0 = automaton.step(automaton.initial, domain.labels[domain.initial])
    start = (domain.initial, q0)
    reached: set[tuple[str, str]] = {start}
    frontier = [start]
    moves: dict[tuple[str, str], list[tuple[str, str]]] = {}
    while frontier:
        s, q = frontier.pop()
        targets = []
        for s2 in succ_ctx[s]:
            q2 = automaton.step(q, domain.labels[s2])
            targets.append((s2, q2))
            if (s2, q2) not in reached:
                reached.add((s2, q2))
                frontier.append((s2, q2))
        moves[(s, q)] = targets

    order = sorted(reached)
    index = {v: i for i, v in enumerate(order)}
    succ = tuple(
        tuple(sorted(index[t] for t in moves[v])) for v in order
    )
    return ParityGame(
        ids=tuple(f"{s}|{q}" for s, q in order),
        owner=tuple(domain.owner[s] for s, _ in order),
        color=tuple(automaton.colors[q] for _, q in order),
        labels=tuple(domain.labels[s] for s, _ in order),
        context=tuple(s for s, _ in order),
        autostate=tuple(q for _, q in order),
        initial=index[start],
        succ=succ,
    )


def _game_from_domain(domain: PlanningDomain) -> ParityGame:
    order = sorted(domain.contexts)
    index = {c: i for i, c in enumerate(order)}
    succ: list[list[int]] = [[] for _ in order]
    for a, b in domain.actions:
        succ[index[a]].append(index[b])
    return ParityGame(
        ids=tuple(order),
        owner=tuple(domain.owner[c] for c in order),
        color=tuple(0 for _ in order),
        labels=tuple(domain.labels[c] for c in order),
        context=tuple(order),
        autostate=tuple("-" for _ in order),
        initial=index[domain.initial],
        succ=tuple(tuple(sorted(s)) for s in succ),
    )


def load_domain(path: str | Path) -> PlanningDomain:
    """Load the validated planning domain of a game file (automaton ignored)."""
    domain, _ = load_game_file(path)
    return domain


def build_game(path: str | Path) -> ParityGame:
    """Load a game file and return its product parity game."""
    domain, automaton = load_game_file(path)
    return product(domain, automaton)


def validate_game(game: ParityGame) -> list[Diagnostic]:
    """Diagnostics for a built game: alternation, deadlocks, color sanity."""
    out: list[Diagnostic] = []
    for u in range(game.n):
        if not game.succ[u]:
            out.append(Diagnostic("deadlock", f"vertex {game.ids[u]!r} has no successor"))
        for v in game.succ[u]:
            if game.owner[u] == game.owner[v]:
                out.append(
                    Diagnostic(
                        "alternation",
                        f"edge {game.ids[u]!r} -> {game.ids[v]!r} does not alternate owners",
                    )
                )
    if any(c < 0 for c in game.color):
        out.append(Diagnostic("color", "negative color"))
    reached = {game.initial}
    frontier = [game.initial]
    while frontier:
        u = frontier.pop()
        for v in game.succ[u]:
            if v not in reached:
                reached.add(v)
                frontier.append(v)
    for u in range(game.n):
        if u not in reached:
            out.append(Diagnostic("unreachable", f"vertex {game.ids[u]!r} is unreachable"))
    return out
