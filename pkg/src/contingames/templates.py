"""Winning-region and strategy-template synthesis for parity games.

A strategy template is a triple (unsafe, colive, live_groups) of ego-edge
sets.  A run complies when it never takes an unsafe edge, takes each colive
edge finitely often, and, for every live group whose source vertex it visits
infinitely often, takes some edge of that group infinitely often.  The
synthesis below guarantees soundness: every template-compliant strategy wins
from every vertex of the returned region.  Correctness is cross-checked by
``verify_template_bruteforce``, which enumerates memoryless strategy pairs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .gamegraph import EGO, ENV, Edge, ParityGame

WinningRegion = frozenset[int]


class SynthesisLimitError(RuntimeError):
    """Game exceeds the configured synthesis resource cap."""


@dataclass(frozen=True)
class StrategyTemplate:
    """Edge-set template; all referenced edges are ego-owned."""

    unsafe: frozenset[Edge]
    colive: frozenset[Edge]
    live_groups: tuple[frozenset[Edge], ...]

    def all_edges(self) -> frozenset[Edge]:
        out = set(self.unsafe) | set(self.colive)
        for g in self.live_groups:
            out |= g
        return frozenset(out)


@dataclass(frozen=True)
class LocalTemplate:
    """Template restricted to the out-edges of a single vertex."""

    vertex: int
    unsafe: frozenset[Edge]
    colive: frozenset[Edge]
    live: frozenset[Edge]


def _attractor(
    game: ParityGame,
    pred: tuple[tuple[int, ...], ...],
    player: int,
    target: set[int],
    alive: set[int],
) -> tuple[set[int], dict[int, int]]:
    """Least fixpoint of the controlled predecessor inside ``alive``.

    Returns the attractor set and a layer index per vertex (targets at 0).
    A ``player`` vertex joins when some successor is already in; an opponent
    vertex joins when all its live successors are in.
    """
    layer = {v: 0 for v in target if v in alive}
    out_deg = {
        v: sum(1 for w in game.succ[v] if w in alive) for v in alive
    }
    attr = set(layer)
    frontier = list(layer)
    while frontier:
        nxt: list[int] = []
        for v in frontier:
            for u in pred[v]:
                if u not in alive or u in attr:
                    continue
                if game.owner[u] == player:
                    attr.add(u)
                    layer[u] = layer[v] + 1
                    nxt.append(u)
                else:
                    out_deg[u] -= 1
                    if out_deg[u] == 0:
                        attr.add(u)
                        layer[u] = layer[v] + 1
                        nxt.append(u)
        frontier = nxt
    return attr, layer


def _progress_groups(
    game: ParityGame, layer: dict[int, int], attr: set[int]
) -> list[frozenset[Edge]]:
    """One live group per ego vertex in layer >= 1: its edges into lower layers."""
    groups = []
    for v in sorted(attr):
        if game.owner[v] != EGO or layer[v] == 0:
            continue
        edges = frozenset(
            (v, w) for w in game.succ[v] if w in attr and layer[w] < layer[v]
        )
        if edges:
            groups.append(edges)
    return groups


def synthesize_template(
    game: ParityGame, max_vertices: int = 20000
) -> tuple[WinningRegion, StrategyTemplate]:
    """Compute the ego winning region and a sound strategy template.

    The recursion removes the maximum color's attractor as in the classical
    region decomposition.  Along branches that survive into the final winning
    region it records progress live groups (per attractor layer) and marks
    ego edges that leave an inner winning region as colive; such edges head
    toward subgames dominated by an odd color and may be used only finitely
    often.  Unsafe edges are exactly the ego edges leaving the final region.
    """
    if game.n > max_vertices:
        raise SynthesisLimitError(
            f"game has {game.n} vertices, cap is {max_vertices}"
        )
    for v in range(game.n):
        if not game.succ[v]:
            raise ValueError(f"vertex {game.ids[v]!r} has no successor")
    pred = game.predecessors()

    def rec(alive: set[int]) -> tuple[set[int], set[int], set[Edge], list[frozenset[Edge]]]:
        if not alive:
            return set(), set(), set(), []
        d = max(game.color[v] for v in alive)
        target = {v for v in alive if game.color[v] == d}
        if d % 2 == 0:
            attr, layer = _attractor(game, pred, EGO, target, alive)
            w0, w1, colive, groups = rec(alive - attr)
            if not w1:
                return set(alive), set(), colive, groups + _progress_groups(game, layer, attr)
            trap, _ = _attractor(game, pred, ENV, w1, alive)
            w0f, w1f, cof, lgf = rec(alive - trap)
            return w0f, w1f | trap, cof, lgf
        else:
            attr, _ = _attractor(game, pred, ENV, target, alive)
            w0, w1, colive, groups = rec(alive - attr)
            if not w0:
                return set(), set(alive), set(), []
            reach, layer = _attractor(game, pred, EGO, w0, alive)
            w0f, w1f, cof, lgf = rec(alive - reach)
            leaving = {
                (v, u)
                for v in w0
                if game.owner[v] == EGO
                for u in game.succ[v]
                if u in alive and u not in w0
            }
            return (
                reach | w0f,
                w1f,
                colive | cof | leaving,
                groups + _progress_groups(game, layer, reach) + lgf,
            )

    w0, w1, colive, groups = rec(set(range(game.n)))
    unsafe = {
        (v, u)
        for v in sorted(w0)
        if game.owner[v] == EGO
        for u in game.succ[v]
        if u not in w0
    }
    # Colive edges whose target fell into the losing region are plainly unsafe.
    colive -= unsafe
    groups = [g for g in dict.fromkeys(groups)]  # dedupe, keep order
    template = StrategyTemplate(
        unsafe=frozenset(unsafe),
        colive=frozenset(colive),
        live_groups=tuple(groups),
    )
    _assert_template_invariants(game, frozenset(w0), template)
    return frozenset(w0), template


def _assert_template_invariants(
    game: ParityGame, region: WinningRegion, t: StrategyTemplate
) -> None:
    live_union = set().union(*t.live_groups) if t.live_groups else set()
    assert not (t.unsafe & t.colive), "unsafe and colive overlap"
    assert not (t.unsafe & live_union), "unsafe and live groups overlap"
    assert not (t.colive & live_union), "colive and live groups overlap"
    for u, v in t.all_edges():
        assert v in game.succ[u], f"template references missing edge {(u, v)}"
        assert game.owner[u] == EGO, f"template references env edge {(u, v)}"
    for v in region:
        if game.owner[v] == EGO:
            assert any(
                (v, w) not in t.unsafe for w in game.succ[v]
            ), f"ego vertex {v} left with no safe edge"


def restrict_template(
    game: ParityGame,
    region: WinningRegion,
    template: StrategyTemplate,
    vertex: int,
) -> LocalTemplate:
    """Template restricted to one vertex's out-edges (live = union of groups).

    Only meaningful inside the winning region; elsewhere no local guidance
    exists and the call is rejected.
    """
    if vertex not in region:
        raise ValueError(
            f"vertex {game.ids[vertex]!r} is outside the winning region"
        )
    if game.owner[vertex] != EGO:
        raise ValueError(f"vertex {game.ids[vertex]!r} is not ego-owned")
    out = {(vertex, w) for w in game.succ[vertex]}
    live = set()
    for g in template.live_groups:
        live |= {e for e in g if e in out}
    return LocalTemplate(
        vertex=vertex,
        unsafe=frozenset(e for e in template.unsafe if e in out),
        colive=frozenset(e for e in template.colive if e in out),
        live=frozenset(live),
    )


# ---------------------------------------------------------------------------
# Compliance of lasso runs


def check_compliance(
    game: ParityGame,
    prefix: list[int],
    cycle: list[int],
    template: StrategyTemplate,
) -> bool:
    """Does the lasso run prefix.(cycle)^omega comply with the template?

    Unsafe edges must not occur anywhere, colive edges must not occur in the
    cycle, and every live group with a source vertex in the cycle must have
    some edge in the cycle.
    """
    if not cycle:
        raise ValueError("lasso cycle must be non-empty")
    seq = list(prefix) + list(cycle)
    edges = list(zip(seq, seq[1:])) + [(cycle[-1], cycle[0])]
    for u, v in edges:
        if v not in game.succ[u]:
            raise ValueError(f"invalid lasso: ({game.ids[u]!r}, {game.ids[v]!r}) is not an edge")
    cyc_edges = set(zip(cycle, cycle[1:])) | {(cycle[-1], cycle[0])}
    cyc_vertices = set(cycle)
    if any(e in template.unsafe for e in edges):
        return False
    if any(e in template.colive for e in cyc_edges):
        return False
    for group in template.live_groups:
        sources = {u for u, _ in group}
        if sources & cyc_vertices and not (group & cyc_edges):
            return False
    return True


def cycle_wins(game: ParityGame, cycle: list[int]) -> bool:
    return max(game.color[v] for v in cycle) % 2 == 0


# ---------------------------------------------------------------------------
# Brute-force verification oracle


def _simple_cycles(succ: dict[int, list[int]], allowed: set[int]) -> list[list[int]]:
    """All simple cycles of the directed graph restricted to ``allowed``."""
    cycles: list[list[int]] = []
    order = sorted(allowed)
    for root in order:
        # Only cycles whose minimum vertex is the root, to avoid duplicates.
        stack = [(root, [root])]
        while stack:
            node, path = stack.pop()
            for nxt in succ[node]:
                if nxt not in allowed or nxt < root:
                    continue
                if nxt == root:
                    cycles.append(path.copy())
                elif nxt not in path:
                    stack.append((nxt, path + [nxt]))
    return cycles


def verify_template_bruteforce(
    game: ParityGame,
    region: WinningRegion,
    template: StrategyTemplate,
    max_vertices: int = 12,
    max_degree: int = 4,
) -> bool:
    """Check soundness: every compliant memoryless ego strategy wins.

    Enumerates all memoryless ego strategies.  For each, the environment is
    left free, so the induced behavior is a graph where ego vertices have one
    successor; a strategy complies when every reachable simple cycle (and
    every reachable edge) satisfies the template conditions from every region
    start, and wins when every reachable simple cycle has even maximum color.
    Returns False as soon as a compliant-but-losing strategy exists.
    """
    if game.n > max_vertices:
        raise SynthesisLimitError(f"brute force capped at {max_vertices} vertices")
    if any(len(game.succ[v]) > max_degree for v in range(game.n) if game.owner[v] == EGO):
        raise SynthesisLimitError(f"brute force capped at ego out-degree {max_degree}")
    if not region:
        return True

    ego_vertices = [v for v in range(game.n) if game.owner[v] == EGO]
    choices = [game.succ[v] for v in ego_vertices]
    for pick in itertools.product(*choices):
        sigma = dict(zip(ego_vertices, pick))
        succ = {
            v: ([sigma[v]] if game.owner[v] == EGO else list(game.succ[v]))
            for v in range(game.n)
        }
        reach = set(region)
        frontier = list(region)
        while frontier:
            u = frontier.pop()
            for w in succ[u]:
                if w not in reach:
                    reach.add(w)
                    frontier.append(w)
        # Compliance: no reachable unsafe edge, no cycle breaking colive or
        # liveness conditions.
        reach_edges = {(u, w) for u in reach for w in succ[u]}
        if reach_edges & template.unsafe:
            continue
        cycles = _simple_cycles(succ, reach)
        compliant = True
        for cyc in cycles:
            cyc_edges = set(zip(cyc, cyc[1:])) | {(cyc[-1], cyc[0])}
            if cyc_edges & template.colive:
                compliant = False
                break
            for group in template.live_groups:
                sources = {u for u, _ in group}
                if sources & set(cyc) and not (group & cyc_edges):
                    compliant = False
                    break
            if not compliant:
                break
        if not compliant:
            continue
        # Compliant strategy: every reachable cycle must be winning.
        for cyc in cycles:
            if max(game.color[v] for v in cyc) % 2 == 1:
                return False
    return True
