"""Independent reference implementations used only by the test suite.

These deliberately avoid the package's internals: the region solver below is
a plain textbook recursion, the finite-difference helpers operate on opaque
callables, and the open-loop equilibrium checker assembles its own stacked
system.  Expected values in the tests are produced by these oracles.
"""

from __future__ import annotations

import numpy as np

from contingames.gamegraph import EGO, ENV, Label, ParityGame


# ---------------------------------------------------------------------------
# Plain winning-region recursion (no templates)


def zielonka_regions(game: ParityGame) -> tuple[frozenset[int], frozenset[int]]:
    """Winning regions of both players, max-even parity, ego = player 0."""

    def attractor(player: int, target: set[int], alive: frozenset[int]) -> set[int]:
        result = set(target)
        changed = True
        while changed:
            changed = False
            for v in alive:
                if v in result:
                    continue
                succs = [w for w in game.succ[v] if w in alive]
                if game.owner[v] == player:
                    hit = any(w in result for w in succs)
                else:
                    hit = bool(succs) and all(w in result for w in succs)
                if hit:
                    result.add(v)
                    changed = True
        return result

    def solve(alive: frozenset[int]) -> tuple[set[int], set[int]]:
        if not alive:
            return set(), set()
        d = max(game.color[v] for v in alive)
        player = d % 2
        target = {v for v in alive if game.color[v] == d}
        a = attractor(player, target, alive)
        sub0, sub1 = solve(alive - frozenset(a))
        winner_sub, loser_sub = (sub0, sub1) if player == EGO else (sub1, sub0)
        if not loser_sub:
            return (set(alive), set()) if player == EGO else (set(), set(alive))
        b = attractor(1 - player, loser_sub, alive)
        fin0, fin1 = solve(alive - frozenset(b))
        if player == EGO:
            return fin0, fin1 | b
        return fin0 | b, fin1

    w0, w1 = solve(frozenset(range(game.n)))
    return frozenset(w0), frozenset(w1)


# ---------------------------------------------------------------------------
# Random alternating parity games


def random_parity_game(
    rng: np.random.Generator,
    max_side: int = 4,
    max_colors: int = 3,
    max_degree: int = 3,
) -> ParityGame:
    """Random bipartite ego/env game, every vertex with >= 1 successor."""
    n_ego = int(rng.integers(1, max_side + 1))
    n_env = int(rng.integers(1, max_side + 1))
    n = n_ego + n_env
    owner = tuple([EGO] * n_ego + [ENV] * n_env)
    color = tuple(int(c) for c in rng.integers(0, max_colors, size=n))
    succ: list[tuple[int, ...]] = []
    for v in range(n):
        pool = list(range(n_ego, n)) if owner[v] == EGO else list(range(n_ego))
        k = int(rng.integers(1, min(max_degree, len(pool)) + 1))
        picks = rng.choice(pool, size=k, replace=False)
        succ.append(tuple(sorted(int(p) for p in picks)))
    return ParityGame(
        ids=tuple(f"v{i}" for i in range(n)),
        owner=owner,
        color=color,
        labels=tuple(frozenset() for _ in range(n)),
        context=tuple(f"v{i}" for i in range(n)),
        autostate=tuple("-" for _ in range(n)),
        initial=0,
        succ=tuple(succ),
    )


# ---------------------------------------------------------------------------
# Finite differences


def central_difference_jacobian(fun, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of fun: R^n -> R^m at x."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x), dtype=float)
    jac = np.zeros((f0.size, x.size))
    for i in range(x.size):
        step = eps * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        jac[:, i] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2 * step)
    return jac


def central_difference_gradient(fun, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        step = eps * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (fun(xp) - fun(xm)) / (2 * step)
    return g


# Random problem families for the numeric stack


def random_lq_problem(rng, n_players: int = 2, T: int = 10):
    """Random single-hypothesis LQ game solvable by the stacked-KKT oracle.

    Coupling weights are kept well below the tracking weights so Gauss-Seidel
    best response is a contraction.
    """
    from contingames.problem import CostSpec, CouplingTerm, Hypothesis, PlayerSpec, build_problem
    from contingames.dynamics import make_model

    players = []
    names = [f"p{i}" for i in range(n_players)]
    for i in range(n_players):
        couplings = []
        for j in range(n_players):
            if j == i:
                continue
            if rng.random() < 0.8:
                couplings.append(
                    CouplingTerm(
                        other=names[j],
                        weights=tuple(rng.uniform(0.05, 0.18, size=2)),
                        offset=tuple(rng.uniform(-1.0, 1.0, size=2)),
                    )
                )
        cost = CostSpec(
            goal_weights=tuple(rng.uniform(0.6, 1.4, size=2)),
            effort_weights=tuple(rng.uniform(0.5, 1.2, size=2)),
            terminal_scale=float(rng.uniform(1.0, 3.0)),
            smooth_weight=0.0,
            d_min=0.0,
            couplings=tuple(couplings),
        )
        model = make_model("single-integrator", u_min=[-1e3, -1e3], u_max=[1e3, 1e3])
        players.append(
            PlayerSpec(names[i], model, rng.uniform(-2.0, 2.0, size=2), cost)
        )
    goals = {}
    for i, name in enumerate(names):
        if rng.random() < 0.5:
            goals[name] = rng.uniform(-3.0, 3.0, size=2)
        else:
            base = rng.uniform(-3.0, 3.0, size=2)
            drift = rng.uniform(-0.2, 0.2, size=2)
            goals[name] = base[None, :] + drift[None, :] * np.arange(T)[:, None]
    hyp = Hypothesis(name="only", belief=1.0, goals=goals)
    return build_problem(dt=0.1, T=T, players=players, hypotheses=[hyp], t_branch=0)


def random_contingency_problem(rng, K: int = 2, T: int = 8, t_branch=None):
    """Random two-player contingency instance exercising every factor kind."""
    from contingames.problem import CostSpec, CouplingTerm, Hypothesis, PlayerSpec, build_problem
    from contingames.dynamics import make_model
    from contingames.regions import Rect, RegionCBF

    regions = {
        "ego": {
            "A": RegionCBF("A", "ego", Rect(0.0, 2.0, 0.0, 2.0)),
            "B": RegionCBF("B", "ego", Rect(2.0, 4.0, 0.0, 2.0)),
        },
        "env": {
            "A": RegionCBF("A", "env", Rect(0.0, 2.0, 0.0, 2.0)),
            "B": RegionCBF("B", "env", Rect(2.0, 4.0, 0.0, 2.0)),
        },
    }
    ego = PlayerSpec(
        "ego",
        make_model("unicycle"),
        np.array([rng.uniform(0.5, 3.5), rng.uniform(0.5, 1.5), rng.uniform(-1, 1)]),
        CostSpec(
            goal_weights=(1.0, 1.0, 0.0),
            effort_weights=(0.6, 0.4),
            terminal_scale=2.0,
            smooth_weight=0.3,
            d_min=0.4,
            couplings=(CouplingTerm("env", (0.1, 0.1)),),
        ),
    )
    env = PlayerSpec(
        "env",
        make_model("single-integrator"),
        rng.uniform(0.5, 3.5, size=2),
        CostSpec(
            goal_weights=(1.0, 1.0),
            effort_weights=(0.5, 0.5),
            d_min=0.4,
        ),
    )
    from contingames.problem import AvoidSpec

    b = rng.dirichlet(np.ones(K))
    hyps = []
    for k in range(K):
        avoid = (
            AvoidSpec(avoid=(("ego", "B"), ("env", "B")), gate=(("env", "B"),)),
        ) if k % 2 == 0 else (
            AvoidSpec(avoid=(("ego", "A"),), gate=(("env", "A"),)),
        )
        hyps.append(
            Hypothesis(
                name=f"h{k}",
                belief=float(b[k]),
                goals={
                    "ego": np.concatenate([rng.uniform(0.5, 3.5, 2), [0.0]]),
                    "env": rng.uniform(0.5, 3.5, 2),
                },
                avoid=avoid,
            )
        )
    tb = int(rng.integers(0, T + 1)) if t_branch is None else t_branch
    return build_problem(
        dt=0.1, T=T, players=[ego, env], hypotheses=hyps, t_branch=tb, regions=regions
    )


# ---------------------------------------------------------------------------
# A miniature mutual-exclusion world for bridge/runtime tests


def toy_two_region_game():
    """Two-region world: ego must reach B, never sharing it with env.

    The env agent may not move into B while ego is there and must leave B
    whenever ego waits in A; ego moving into an occupied B is a fault that
    traps the run in an error state.  Small enough that every template
    property can be checked by hand.
    """
    from contingames.gamegraph import ParityAutomaton, PlanningDomain, product
    from contingames.regions import Rect, RegionCBF
    from contingames.templates import synthesize_template

    rects = {"A": Rect(0, 2, 0, 2), "B": Rect(2, 4, 0, 2)}
    state_props = {"ego": frozenset({"cA", "cB"}), "env": frozenset({"uA", "uB"})}
    flip = {"cA": "cB", "cB": "cA", "uA": "uB", "uB": "uA"}
    pairs = [(c, u) for c in ("cA", "cB") for u in ("uA", "uB")]

    contexts, owner, labels, actions = [], {}, {}, []
    for c, u in pairs:
        for side, own in (("ego", EGO), ("env", ENV)):
            cid = f"{c}_{u}_{side}"
            contexts.append(cid)
            owner[cid] = own
            labels[cid] = frozenset({c, u})
    for c, u in pairs:
        actions.append((f"{c}_{u}_ego", f"{c}_{u}_env"))  # hold region
        actions.append((f"{c}_{u}_ego", f"{flip[c]}_{u}_env"))  # switch region
        if (c, u) == ("cA", "uB"):
            actions.append((f"{c}_{u}_env", f"{c}_uA_ego"))  # leave request honored
        else:
            actions.append((f"{c}_{u}_env", f"{c}_{u}_ego"))
            if not (c == "cB" and flip[u] == "uB"):  # no move into occupied B
                actions.append((f"{c}_{u}_env", f"{c}_{flip[u]}_ego"))
    domain = PlanningDomain(
        contexts=tuple(sorted(contexts)),
        owner=owner,
        actions=tuple(sorted(actions)),
        initial="cA_uA_ego",
        state_props=state_props,
        task_props=frozenset(),
        labels=labels,
    )

    letters = {frozenset({c, u}) for c, u in pairs}
    trans = {}
    for q in ("seek", "done", "err"):
        for letter in letters:
            if {"cB", "uB"} <= letter:
                q2 = "err"
            elif q == "err":
                q2 = "err"
            elif q == "done" or "cB" in letter:
                q2 = "done"
            else:
                q2 = "seek"
            trans[(q, letter)] = q2
    auto = ParityAutomaton(
        states=("seek", "done", "err"),
        initial="seek",
        colors={"seek": 1, "done": 2, "err": 1},
        transitions=trans,
    )
    game = product(domain, auto)
    region, template = synthesize_template(game)
    cbfs = {
        "cA": RegionCBF("cA", "ego", rects["A"]),
        "cB": RegionCBF("cB", "ego", rects["B"]),
        "uA": RegionCBF("uA", "env", rects["A"]),
        "uB": RegionCBF("uB", "env", rects["B"]),
    }
    return {
        "domain": domain,
        "auto": auto,
        "game": game,
        "region": region,
        "template": template,
        "cbfs": cbfs,
        "state_props": dict(state_props),
        "rects": rects,
    }


def labeled_random_game(rng: np.random.Generator) -> tuple[ParityGame, dict]:
    """Random alternating game with random agent labels, for extraction tests."""
    game = random_parity_game(rng)
    state_props = {
        "ego": frozenset({"e0", "e1", "e2"}),
        "p1": frozenset({"a0", "a1"}),
        "p2": frozenset({"b0", "b1"}),
    }
    pools = [sorted(p) for p in state_props.values()]
    labels = []
    for _ in range(game.n):
        lab = set()
        for pool in pools:
            k = int(rng.integers(0, 3))
            lab |= set(rng.choice(pool, size=min(k, len(pool)), replace=False))
        labels.append(frozenset(lab))
    game = ParityGame(
        ids=game.ids,
        owner=game.owner,
        color=game.color,
        labels=tuple(labels),
        context=game.context,
        autostate=game.autostate,
        initial=game.initial,
        succ=game.succ,
    )
    return game, state_props
