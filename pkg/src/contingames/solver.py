"""Nash solver: per-player Levenberg-Marquardt inside Gauss-Seidel sweeps.

Each sweep best-responds every player in turn against the others' current
trajectories (ego last, so its plan reacts to the freshest predictions); a
sweep's per-player subproblem is a damped Gauss-Newton descent on that
player's penalty objective over its own variables only. Termination is on
the maximum input change between consecutive sweeps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .factorgraph import FactorGraph, compile_graph
from .problem import ContingencyProblem, Solution


@dataclass(frozen=True)
class SolverConfig:
    mu_eq: float = 1e4
    mu_ineq: float = 1e3
    max_sweeps: int = 25
    sweep_tol: float = 1e-6  # max |input change| between sweeps
    lm_max_iters: int = 40
    lm_lambda0: float = 1e-4
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 0.5
    lm_lambda_max: float = 1e10
    lm_grad_tol: float = 1e-9  # on J^T r, per player
    lm_step_tol: float = 1e-13  # step norm below which the iterate is pinned

    @staticmethod
    def from_dict(doc: dict) -> "SolverConfig":
        return replace(SolverConfig(), **doc)


@dataclass
class SolveStats:
    sweeps: int = 0
    lm_iterations: int = 0
    wall_time_s: float = 0.0
    converged: bool = False
    nash_residuals: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "sweeps": self.sweeps,
            "lm_iterations": self.lm_iterations,
            "wall_time_s": self.wall_time_s,
            "converged": self.converged,
            "nash_residuals": self.nash_residuals,
        }


def lm_minimize(graph: FactorGraph, player: int, vals: np.ndarray, cfg: SolverConfig):
    """Minimize one player's objective over its own variables in place.

    Returns (vals, iterations). A Cholesky failure or an uphill step raises
    the damping; the iteration stops on gradient/decrease tolerances or when
    damping maxes out without progress.
    """
    asm = graph.assemblers[player]
    vidx = asm.var_idx
    lam = cfg.lm_lambda0
    iters = 0
    for _ in range(cfg.lm_max_iters):
        H, g, phi = asm.assemble(vals)
        if np.linalg.norm(g) <= cfg.lm_grad_tol:
            break
        D = np.maximum(np.diag(H), 1e-12)
        accepted = False
        while lam <= cfg.lm_lambda_max:
            try:
                c = cho_factor(H + lam * np.diag(D) + lam * 1e-10 * np.eye(len(D)), lower=True)
            except LinAlgError:
                lam *= cfg.lm_lambda_up
                continue
            step = cho_solve(c, -g)
            if np.linalg.norm(step) <= cfg.lm_step_tol:
                break  # numerically pinned; larger steps only go uphill
            trial = vals.copy()
            trial[vidx] += step
            phi_try = asm.phi(trial)
            if phi_try < phi:
                vals = trial
                lam = max(lam * cfg.lm_lambda_down, 1e-12)
                accepted = True
                iters += 1
                break
            lam *= cfg.lm_lambda_up
        if not accepted:
            break
    return vals, iters


def cold_start(graph: FactorGraph) -> np.ndarray:
    """Zero inputs and the corresponding drift rollout for every copy."""
    prob = graph.problem
    states, inputs = {}, {}
    for p in prob.players:
        U = np.zeros((prob.T - 1, p.model.m))
        X = p.model.rollout(p.x0, U, prob.dt)
        for k in range(prob.K):
            states[(p.name, k)] = X
            inputs[(p.name, k)] = U
    return graph.pack(states, inputs)


def warm_start(graph: FactorGraph, prev: Solution) -> np.ndarray:
    """Shift the previous solution one step and rebase on the new x0.

    Trajectories are shifted by one knot with the last knot duplicated; the
    hypothesis set may have changed size, in which case unmatched copies fall
    back to the closest previous copy by name order.
    """
    prob = graph.problem
    prev_hyps = sorted({k for (_, k) in prev.states.keys()})
    states, inputs = {}, {}
    for p in prob.players:
        for k in range(prob.K):
            src = k if k in prev_hyps else prev_hyps[min(k, len(prev_hyps) - 1)]
            X = np.asarray(prev.states[(p.name, src)])
            U = np.asarray(prev.inputs[(p.name, src)])
            Xs = np.vstack([X[1:], X[-1:]])
            Us = np.vstack([U[1:], U[-1:]]) if len(U) > 1 else U.copy()
            # resize to the new horizon if needed, then rebase the start
            Xs = _fit_rows(Xs, prob.T)
            Us = _fit_rows(Us, prob.T - 1)
            Xs[0] = p.x0
            states[(p.name, k)] = Xs
            inputs[(p.name, k)] = Us
    return graph.pack(states, inputs)


def _fit_rows(a: np.ndarray, rows: int) -> np.ndarray:
    if len(a) == rows:
        return a
    if len(a) > rows:
        return a[:rows].copy()
    return np.vstack([a, np.tile(a[-1], (rows - len(a), 1))])


def nash_residual(graph: FactorGraph, vals: np.ndarray) -> dict[str, float]:
    """Per-player norm of its objective gradient over its own variables."""
    return graph.nash_residual(vals)


def solve_nash(
    problem: ContingencyProblem,
    config: SolverConfig | None = None,
    init: np.ndarray | None = None,
    graph: FactorGraph | None = None,
) -> tuple[Solution, FactorGraph]:
    cfg = config or SolverConfig()
    if graph is None:
        graph = compile_graph(problem, mu_eq=cfg.mu_eq, mu_ineq=cfg.mu_ineq)
    vals = cold_start(graph) if init is None else init.copy()
    # env players first, ego (player 0) reacts last in every sweep
    order = list(range(1, len(problem.players))) + [0]
    u_idx = np.concatenate(
        [np.arange(b.offset, b.offset + b.dim) for b in graph.blocks if b.key[0] == "u"]
    )
    stats = SolveStats()
    t0 = time.perf_counter()
    for sweep in range(cfg.max_sweeps):
        u_before = vals[u_idx].copy()
        for p in order:
            vals, it = lm_minimize(graph, p, vals, cfg)
            stats.lm_iterations += it
        stats.sweeps = sweep + 1
        delta = float(np.max(np.abs(vals[u_idx] - u_before))) if len(u_idx) else 0.0
        if delta <= cfg.sweep_tol:
            stats.converged = True
            break
    stats.wall_time_s = time.perf_counter() - t0
    stats.nash_residuals = nash_residual(graph, vals)
    states, inputs = graph.unpack(vals)
    sol = Solution(states=states, inputs=inputs, stats=stats.to_dict())
    return sol, graph
