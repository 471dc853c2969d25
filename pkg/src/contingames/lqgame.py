"""Closed-form open-loop Nash solutions of linear-quadratic games.

Serves as an exact reference for the iterated-best-response solver: for
single-integrator players with quadratic tracking, effort, and pairwise
coupling costs, stacking every player's KKT stationarity conditions yields
one joint linear system whose solution is the unique open-loop Nash
equilibrium (hard dynamics constraints via multipliers; no penalties).
"""

from __future__ import annotations

import numpy as np

from .problem import ContingencyProblem, Solution


def lq_nash_oracle(problem: ContingencyProblem) -> Solution:
    """Exact Nash equilibrium of a single-hypothesis LQ instance.

    Requirements: every player uses single-integrator dynamics (their RK4
    discretization is exactly x + dt*u), a single hypothesis, no smoothness
    cost, no collision radius, and no avoid constraints; input bounds are
    ignored and must be slack at the solution.
    """
    prob = problem
    if prob.K != 1:
        raise ValueError("oracle handles a single hypothesis")
    hyp = prob.hypotheses[0]
    if hyp.avoid:
        raise ValueError("oracle does not support avoid constraints")
    for p in prob.players:
        if p.model.kind != "single-integrator":
            raise ValueError("oracle requires single-integrator players")
        if p.cost.smooth_weight != 0.0:
            raise ValueError("oracle does not support smoothness costs")
        if p.cost.d_min != 0.0:
            raise ValueError("oracle does not support collision penalties")

    T = prob.T
    P = len(prob.players)
    n = m = 2
    per = (T - 1) * (2 * n + m)
    N = P * per
    A = np.eye(n)
    B = prob.dt * np.eye(n)

    def vx(p, t):  # state x_t, t = 1..T-1
        return p * per + (t - 1) * n

    def vu(p, t):  # input u_t, t = 0..T-2
        return p * per + (T - 1) * n + t * m

    def vl(p, t):  # multiplier of x_{t+1} = A x_t + B u_t, t = 0..T-2
        return p * per + (T - 1) * (n + m) + t * n

    M = np.zeros((N, N))
    rhs = np.zeros(N)
    row = 0

    def put(r, c, block):
        M[r : r + block.shape[0], c : c + block.shape[1]] += block

    for pi, p in enumerate(prob.players):
        W2 = 2.0 * np.diag(np.asarray(p.cost.goal_weights, dtype=float) ** 2)
        R2 = 2.0 * np.diag(np.asarray(p.cost.effort_weights, dtype=float) ** 2)
        goals = prob.goal_traj(hyp, p)

        # dynamics rows
        for t in range(T - 1):
            put(row, vx(pi, t + 1), np.eye(n))
            if t >= 1:
                put(row, vx(pi, t), -A)
                rhs[row : row + n] += 0.0
            else:
                rhs[row : row + n] += A @ p.x0
            put(row, vu(pi, t), -B)
            row += n

        # input stationarity: 2 R^2 u_t - B^T lambda_t = 0
        for t in range(T - 1):
            put(row, vu(pi, t), R2)
            put(row, vl(pi, t), -B.T)
            row += m

        # state stationarity for t = 1..T-1
        for t in range(1, T):
            scale = p.cost.terminal_scale if t == T - 1 else 1.0
            put(row, vx(pi, t), scale * W2)
            rhs[row : row + n] += scale * W2 @ goals[t]
            for c in p.cost.couplings:
                qi = prob.player_index(c.other)
                C2 = 2.0 * np.diag(np.asarray(c.weights, dtype=float) ** 2)
                put(row, vx(pi, t), C2)
                put(row, vx(qi, t), -C2)
                rhs[row : row + n] += C2 @ np.asarray(c.offset, dtype=float)
            put(row, vl(pi, t - 1), np.eye(n))
            if t <= T - 2:
                put(row, vl(pi, t), -A.T)
            row += n

    assert row == N
    z = np.linalg.solve(M, rhs)

    states, inputs = {}, {}
    for pi, p in enumerate(prob.players):
        X = np.zeros((T, n))
        X[0] = p.x0
        for t in range(1, T):
            X[t] = z[vx(pi, t) : vx(pi, t) + n]
        U = np.stack([z[vu(pi, t) : vu(pi, t) + m] for t in range(T - 1)])
        states[(p.name, 0)] = X
        inputs[(p.name, 0)] = U
    return Solution(states=states, inputs=inputs, stats={"oracle": "lq-kkt"})
