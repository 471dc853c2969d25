"""Builders for the bundled worlds: game graphs plus scenario documents.

Each builder returns plain JSON-ready dicts so the data files under
``data/games`` and ``data/scenarios`` can be regenerated deterministically
(see scripts/regenerate_data.py).  The lane-merge world is a pure numeric
benchmark and is emitted as a contingency problem instead of a scenario.
"""

from __future__ import annotations

import math

import numpy as np

from .dynamics import make_model
from .problem import ContingencyProblem, CostSpec, Hypothesis, PlayerSpec, build_problem


def _ctx(cid: str, owner: str, labels) -> dict:
    return {"id": cid, "owner": owner, "labels": sorted(labels)}


def _act(a: str, b: str) -> dict:
    return {"from": a, "to": b}


def _total_automaton(states, initial, colors, step, letters) -> dict:
    """Enumerate the full transition table over the given letters."""
    return {
        "states": list(states),
        "initial": initial,
        "colors": dict(colors),
        "transitions": [
            {"from": q, "letter": sorted(letter), "to": step(q, letter)}
            for q in states
            for letter in letters
        ],
    }


# --------------------------------------------------------------------------
# robot patrol: five rooms, one shared room that must be visited alone
# --------------------------------------------------------------------------

# rooms on a 6x4 floor; the env robot is confined to rooms 1, 2 and 4
_ROBOT_RECTS = {
    1: (0.0, 4.0, 2.0, 4.0),
    2: (2.0, 4.0, 0.0, 2.0),
    3: (4.0, 6.0, 2.0, 4.0),
    4: (0.0, 2.0, 0.0, 2.0),
    5: (4.0, 6.0, 0.0, 2.0),
}
_EGO_ADJ = {1: (2, 3, 4), 2: (1, 4, 5), 3: (1, 5), 4: (1, 2), 5: (2, 3)}
_ENV_ADJ = {1: (2, 4), 2: (1, 4), 4: (1, 2)}


def robot_game() -> dict:
    contexts = []
    actions = []
    for c in _EGO_ADJ:
        for u in _ENV_ADJ:
            labels = {f"c{c}", f"u{u}"}
            contexts.append(_ctx(f"c{c}_u{u}_ego", "ego", labels))
            contexts.append(_ctx(f"c{c}_u{u}_env", "env", labels))
            for c2 in (c, *_EGO_ADJ[c]):
                actions.append(_act(f"c{c}_u{u}_ego", f"c{c2}_u{u}_env"))
            for u2 in (u, *_ENV_ADJ[u]):
                if u2 == 1 and u != 1 and c == 1:
                    continue  # env never enters room 1 while the ego holds it
                if u2 == 1 and u == 1 and c == 2:
                    continue  # with the ego waiting next door the env must leave
                actions.append(_act(f"c{c}_u{u}_env", f"c{c}_u{u2}_ego"))

    letters = [frozenset({f"c{c}", f"u{u}"}) for c in _EGO_ADJ for u in _ENV_ADJ]

    def step(q, letter):
        if q == "err" or {"c1", "u1"} <= letter:
            return "err"
        if q == "done" or "c1" in letter:
            return "done"
        return "seek"

    return {
        "contexts": contexts,
        "actions": actions,
        "initial": "c5_u2_ego",
        "propositions": {
            "state": {"ego": [f"c{c}" for c in _EGO_ADJ], "env": [f"u{u}" for u in _ENV_ADJ]},
            "task": [],
        },
        "automaton": _total_automaton(
            ("seek", "done", "err"), "seek", {"seek": 1, "done": 2, "err": 1}, step, letters
        ),
        "parity": "max-even",
    }


def robot_scenario() -> dict:
    rects = {k: list(v) for k, v in _ROBOT_RECTS.items()}
    return {
        "name": "robot-5rooms",
        "game": "../games/robot_5rooms.json",
        "rate_hz": 20,
        "plan_dt": 0.1,
        "horizon": 20,
        "duration": 40.0,
        "branching": "entropy",
        "avoid_margin": 0.2,
        "belief": {"gamma": 30.0, "floor": 0.01, "window": 10, "threshold": 0.2},
        "solver": {"max_sweeps": 6, "sweep_tol": 1e-3, "lm_max_iters": 12},
        "regions": {
            "ego": {f"c{i}": rects[i] for i in _EGO_ADJ},
            "env": {f"u{i}": rects[i] for i in _ENV_ADJ},
        },
        "agents": [
            {
                "name": "ego",
                "role": "ego",
                "model": {"kind": "unicycle"},
                "x0": [5.0, 1.0, math.pi],
                "cost": {"goal_weights": [1.0, 1.0, 0.0], "effort_weights": [0.6, 0.3]},
            },
            {
                "name": "env",
                "role": "env",
                "model": {"kind": "single-integrator", "u_min": [-0.12, -0.12], "u_max": [0.12, 0.12]},
                "x0": [3.0, 0.3],
                "cost": {"goal_weights": [0.9, 0.9], "effort_weights": [1.1, 1.1]},
                "goal_mode": "centroid",
                "scripts": {
                    # drift toward the shared room, barge in, wander, then
                    # leave once the ego is visibly waiting next door
                    "nominal": [
                        # drift rides the ray from x0 to the Q1 centre; each
                        # phase is confined to its leg so none can refire late
                        {"start": 0.0, "mode": "goto", "target": [2.3, 2.2], "speed": 0.15,
                         "guard": ["env", "u4", False]},
                        {"start": 13.5, "mode": "goto", "target": [2.2, 3.1], "speed": 0.6,
                         "guard": ["env", "u1", True]},
                        {"start": 25.0, "mode": "goto", "target": [1.0, 1.0], "speed": 0.5,
                         "guard": ["ego", "c1", False]},
                    ],
                },
                "script": "nominal",
            },
        ],
        "violations": [["c1", "u1"]],
    }


# --------------------------------------------------------------------------
# crosswalk: a pedestrian may or may not step onto the road
# --------------------------------------------------------------------------


def crosswalk_game() -> dict:
    ego_props = ("eapp", "ecw", "epast")
    ped_props = ("pn", "proad", "ps")
    ego_next = {"eapp": ("eapp", "ecw"), "ecw": ("epast",), "epast": ("epast",)}

    contexts = []
    actions = []
    for e in ego_props:
        for p in ped_props:
            labels = {e, p}
            contexts.append(_ctx(f"{e}_{p}_ego", "ego", labels))
            contexts.append(_ctx(f"{e}_{p}_env", "env", labels))
            for e2 in ego_next[e]:
                actions.append(_act(f"{e}_{p}_ego", f"{e2}_{p}_env"))
            if p == "pn":
                actions.append(_act(f"{e}_pn_env", f"{e}_pn_ego"))
                if e != "ecw":  # stepping onto the road is barred mid-crossing
                    actions.append(_act(f"{e}_pn_env", f"{e}_proad_ego"))
            elif p == "proad":
                actions.append(_act(f"{e}_proad_env", f"{e}_ps_ego"))
            else:
                actions.append(_act(f"{e}_ps_env", f"{e}_ps_ego"))

    letters = [frozenset({e, p}) for e in ego_props for p in ped_props]

    def step(q, letter):
        if q == "err" or {"ecw", "proad"} <= letter:
            return "err"
        if q == "done" or "epast" in letter:
            return "done"
        return "seek"

    return {
        "contexts": contexts,
        "actions": actions,
        "initial": "eapp_pn_ego",
        "propositions": {"state": {"ego": list(ego_props), "env": list(ped_props)}, "task": []},
        "automaton": _total_automaton(
            ("seek", "done", "err"), "seek", {"seek": 1, "done": 2, "err": 1}, step, letters
        ),
        "parity": "max-even",
    }


def crosswalk_scenario() -> dict:
    return {
        "name": "crosswalk",
        "game": "../games/crosswalk.json",
        "rate_hz": 20,
        "plan_dt": 0.1,
        "horizon": 20,
        "duration": 12.0,
        "branching": "entropy",
        "avoid_margin": 0.2,
        "belief": {"gamma": 8.0, "floor": 0.01, "window": 10, "threshold": 0.2},
        "solver": {"max_sweeps": 6, "sweep_tol": 1e-3, "lm_max_iters": 12},
        "regions": {
            "ego": {
                "eapp": [0.0, 9.0, 0.0, 6.0],
                "ecw": [9.0, 11.0, 0.0, 6.0],
                "epast": [11.0, 20.0, 0.0, 6.0],
            },
            "env": {
                "pn": [0.0, 20.0, 4.0, 6.0],
                "proad": [0.0, 20.0, 2.0, 4.0],
                "ps": [0.0, 20.0, 0.0, 2.0],
            },
        },
        "agents": [
            {
                "name": "ego",
                "role": "ego",
                "model": {"kind": "unicycle", "u_min": [-0.2, -1.5], "u_max": [2.0, 1.5]},
                "x0": [2.0, 3.0, 0.0],
                "cost": {"goal_weights": [1.0, 1.0, 0.0], "effort_weights": [0.5, 0.3],
                         "d_min": 1.0},
            },
            {
                "name": "env",
                "role": "env",
                "model": {"kind": "single-integrator"},
                "x0": [10.0, 5.0],
                "cost": {"goal_weights": [1.0, 1.0], "effort_weights": [1.0, 1.0]},
                "goal_mode": "cv",
                "scripts": {
                    # cross: step off right away, land on the south sidewalk, walk on
                    "cross": [
                        {"start": 0.0, "mode": "velocity", "target": [0.0, -1.2]},
                        {"start": 3.33, "mode": "velocity", "target": [0.8, 0.0]},
                    ],
                    "stay": [
                        {"start": 0.0, "mode": "velocity", "target": [0.8, 0.0]},
                    ],
                },
                "script": "cross",
            },
        ],
        "violations": [["ecw", "proad"]],
    }


# --------------------------------------------------------------------------
# highway: a neighbor may cut in after signaling; ego holds its cruise
# --------------------------------------------------------------------------

_LANES = {1: (0.0, 6.0), 2: (6.0, 12.0), 3: (12.0, 18.0)}
_Y_SPAN = (-50.0, 600.0)


def highway_game() -> dict:
    ego_props = ("e1", "e2", "e3")
    ego_adj = {"e1": ("e2",), "e2": ("e1", "e3"), "e3": ("e2",)}

    def labels(e, g, sig):
        lab = {e, g, "f2"}
        if sig:
            lab.add("sig")
        return lab

    def cid(e, g, sig, side):
        return f"{e}_{g}_{'sig' if sig else 'nosig'}_{side}"

    contexts = []
    actions = []
    for e in ego_props:
        for g in ("g2", "g3"):
            for sig in (False, True):
                contexts.append(_ctx(cid(e, g, sig, "ego"), "ego", labels(e, g, sig)))
                contexts.append(_ctx(cid(e, g, sig, "env"), "env", labels(e, g, sig)))
                for e2 in (e, *ego_adj[e]):
                    actions.append(_act(cid(e, g, sig, "ego"), cid(e2, g, sig, "env")))
                actions.append(_act(cid(e, g, sig, "env"), cid(e, g, sig, "ego")))
                if not sig:
                    # turning the signal on is the env's move; it stays on
                    actions.append(_act(cid(e, g, False, "env"), cid(e, g, True, "ego")))
                elif g == "g3":
                    # the cut-in itself is only modeled once announced
                    actions.append(_act(cid(e, "g3", True, "env"), cid(e, "g2", True, "ego")))

    letters = [
        frozenset(labels(e, g, sig))
        for e in ego_props for g in ("g2", "g3") for sig in (False, True)
    ]

    def step(q, letter):
        # pure safety: the forbidden lane is the only way to lose
        if q == "err" or "e1" in letter:
            return "err"
        return "cruise"

    return {
        "contexts": contexts,
        "actions": actions,
        "initial": "e2_g3_nosig_ego",
        "propositions": {
            "state": {"ego": list(ego_props), "env": ["g2", "g3"], "lead": ["f2"]},
            "task": ["sig"],
        },
        "automaton": _total_automaton(
            ("cruise", "err"), "cruise", {"cruise": 2, "err": 1}, step, letters
        ),
        "parity": "max-even",
    }


def highway_scenario() -> dict:
    lane = lambda i: [_LANES[i][0], _LANES[i][1], _Y_SPAN[0], _Y_SPAN[1]]
    return {
        "name": "highway-3lanes",
        "game": "../games/highway_3lanes.json",
        "rate_hz": 20,
        "plan_dt": 0.1,
        "horizon": 25,
        "duration": 12.0,
        "branching": "entropy",
        "avoid_margin": 0.2,
        "belief": {"gamma": 0.015, "floor": 0.01, "window": 10, "threshold": 0.2},
        # inputs reach +-21 here; the settle tolerance follows that scale
        "solver": {"max_sweeps": 20, "sweep_tol": 0.02, "lm_max_iters": 25},
        "evasive": {"brake": 3.5, "lateral": 3.5},
        "regions": {
            "ego": {"e1": lane(1), "e2": lane(2), "e3": lane(3)},
            "env": {"g2": lane(2), "g3": lane(3)},
            "lead": {"f2": lane(2)},
        },
        "agents": [
            {
                "name": "ego",
                "role": "ego",
                "model": {"kind": "bicycle", "wheelbase": 2.7},
                "x0": [9.0, 0.0, math.pi / 2, 14.0],
                "goal_pad": [math.pi / 2, 14.0],
                # plan against the inflated safety radius; 3.0 is the raw
                # collision floor and 4.5 leaves no room to pass inside a lane
                "cost": {"goal_weights": [1.0, 0.0, 0.0, 0.6], "effort_weights": [0.3, 4.0],
                         "smooth_weight": 0.5, "d_min": 4.5},
            },
            {
                "name": "env",
                "role": "env",
                "model": {"kind": "single-integrator", "u_min": [-3.5, -21.0],
                          "u_max": [3.5, 21.0]},
                "x0": [15.0, -2.7],
                # the input of an integrator is its velocity: at highway speed
                # any real effort weight would make the copy yield and crawl
                "cost": {"goal_weights": [10.0, 10.0], "effort_weights": [0.01, 0.01]},
                "goal_mode": "cv",
                "scripts": {
                    # the swing is slower than the ego's cruise, so the cut
                    # lands on the nose of a driver that does not yield --
                    # outrunning it means driving through the crossing path
                    "cut": [
                        {"start": 0.0, "mode": "velocity", "target": [0.0, 16.0]},
                        {"start": 4.0, "mode": "velocity", "target": [-3.0, 12.0]},
                        {"start": 6.0, "mode": "velocity", "target": [0.0, 14.0]},
                    ],
                    "keep": [
                        {"start": 0.0, "mode": "velocity", "target": [0.0, 16.0]},
                    ],
                },
                "script": "cut",
            },
            {
                "name": "lead",
                "role": "env",
                "model": {"kind": "single-integrator", "u_min": [-0.5, -10.5],
                          "u_max": [0.5, 10.5]},
                "x0": [9.0, 45.0],
                "cost": {"goal_weights": [10.0, 10.0], "effort_weights": [0.01, 0.01]},
                "goal_mode": "cv",
                "scripts": {
                    "cruise": [{"start": 0.0, "mode": "velocity", "target": [0.0, 10.0]}],
                },
                "script": "cruise",
            },
        ],
        "requests": [{"t": 3.2, "add": ["sig"]}],
        "violations": [["e1"]],
    }


# --------------------------------------------------------------------------
# lane merge: pure numeric three-player benchmark (no strategic layer)
# --------------------------------------------------------------------------


def lane_merge_problem() -> ContingencyProblem:
    """Ego merges from the ramp into a gap shorter than the safety radius.

    All three cars want speed 10 in their lane; the Nash solution opens the
    gap while the ego slides over.  One hypothesis, so the contingency
    structure degenerates to a plain dynamic game.
    """
    bike = make_model("bicycle")
    up = math.pi / 2
    cost = CostSpec(goal_weights=(1.0, 0.0, 0.0, 1.0), effort_weights=(0.3, 4.0),
                    smooth_weight=0.5, d_min=4.0)
    players = [
        PlayerSpec("ego", bike, np.array([6.0, 0.0, up, 10.0]), cost),
        PlayerSpec("lead", bike, np.array([3.0, 3.5, up, 10.0]), cost),
        PlayerSpec("lag", bike, np.array([3.0, -3.5, up, 10.0]), cost),
    ]
    goal = lambda v: np.array([3.0, 0.0, up, v])
    hyp = Hypothesis(
        name="merge",
        belief=1.0,
        goals={"ego": goal(10.0), "lead": goal(11.0), "lag": goal(9.0)},
    )
    return build_problem(0.1, 25, players, [hyp], t_branch=0)


# --------------------------------------------------------------------------
# registry
# --------------------------------------------------------------------------

GAMES = {
    "robot_5rooms": robot_game,
    "crosswalk": crosswalk_game,
    "highway_3lanes": highway_game,
}

SCENARIOS = {
    "robot-5rooms": robot_scenario,
    "crosswalk": crosswalk_scenario,
    "highway-3lanes": highway_scenario,
}

PROBLEMS = {
    "lane_merge_3cars": lane_merge_problem,
}
