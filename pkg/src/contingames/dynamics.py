"""Agent dynamics models and their discretization.

All models are control-affine continuous-time systems integrated with RK4.
Evaluation is batched: states are (N, n) and inputs (N, m) arrays, and the
step Jacobians are propagated analytically through the RK4 stages so the
solver never falls back to finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("unicycle", "bicycle", "single-integrator")


@dataclass(frozen=True, eq=False)
class DynamicsModel:
    """Continuous-time model plus input box; positions are state[..., :2]."""

    kind: str
    n: int
    m: int
    u_min: np.ndarray
    u_max: np.ndarray
    wheelbase: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dynamics kind {self.kind!r}")
        if np.any(self.u_min >= self.u_max):
            raise ValueError("input bounds must define a nonempty box")

    # -- continuous vector field -------------------------------------------
    def cont(self, x: np.ndarray, u: np.ndarray):
        """Batched f(x, u) with Jacobians: returns (dx, A, B)."""
        x = np.atleast_2d(x)
        u = np.atleast_2d(u)
        N = x.shape[0]
        dx = np.zeros((N, self.n))
        A = np.zeros((N, self.n, self.n))
        B = np.zeros((N, self.n, self.m))
        if self.kind == "single-integrator":
            dx[:] = u
            B[:, 0, 0] = 1.0
            B[:, 1, 1] = 1.0
        elif self.kind == "unicycle":
            th = x[:, 2]
            v, w = u[:, 0], u[:, 1]
            c, s = np.cos(th), np.sin(th)
            dx[:, 0] = v * c
            dx[:, 1] = v * s
            dx[:, 2] = w
            A[:, 0, 2] = -v * s
            A[:, 1, 2] = v * c
            B[:, 0, 0] = c
            B[:, 1, 0] = s
            B[:, 2, 1] = 1.0
        else:  # kinematic bicycle: x, y, heading, speed; inputs accel, steer
            psi, v = x[:, 2], x[:, 3]
            a, delta = u[:, 0], u[:, 1]
            c, s = np.cos(psi), np.sin(psi)
            t = np.tan(delta)
            dx[:, 0] = v * c
            dx[:, 1] = v * s
            dx[:, 2] = v * t / self.wheelbase
            dx[:, 3] = a
            A[:, 0, 2] = -v * s
            A[:, 0, 3] = c
            A[:, 1, 2] = v * c
            A[:, 1, 3] = s
            A[:, 2, 3] = t / self.wheelbase
            B[:, 2, 1] = v / (np.cos(delta) ** 2 * self.wheelbase)
            B[:, 3, 0] = 1.0
        return dx, A, B

    # -- discretization -----------------------------------------------------
    def step(self, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
        """RK4 step over dt (batched, no Jacobians)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.atleast_2d(np.asarray(u, dtype=float))
        f = lambda xx: self.cont(xx, u)[0]
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def step_jac(self, x: np.ndarray, u: np.ndarray, dt: float):
        """RK4 step with chained analytic Jacobians.

        Returns (x_next (N,n), Jx (N,n,n), Ju (N,n,m)).
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.atleast_2d(np.asarray(u, dtype=float))
        N = x.shape[0]
        eye = np.broadcast_to(np.eye(self.n), (N, self.n, self.n))
        h = dt

        k1, A1, B1 = self.cont(x, u)
        K1x, K1u = A1, B1

        x2 = x + 0.5 * h * k1
        k2, A2, B2 = self.cont(x2, u)
        K2x = A2 @ (eye + 0.5 * h * K1x)
        K2u = B2 + A2 @ (0.5 * h * K1u)

        x3 = x + 0.5 * h * k2
        k3, A3, B3 = self.cont(x3, u)
        K3x = A3 @ (eye + 0.5 * h * K2x)
        K3u = B3 + A3 @ (0.5 * h * K2u)

        x4 = x + h * k3
        k4, A4, B4 = self.cont(x4, u)
        K4x = A4 @ (eye + h * K3x)
        K4u = B4 + A4 @ (h * K3u)

        xn = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        Jx = eye + (h / 6.0) * (K1x + 2 * K2x + 2 * K3x + K4x)
        Ju = (h / 6.0) * (K1u + 2 * K2u + 2 * K3u + K4u)
        return xn, Jx, Ju

    def rollout(self, x0: np.ndarray, inputs: np.ndarray, dt: float) -> np.ndarray:
        """States x_1..x_T from x_1 = x0 under the given T-1 inputs."""
        x0 = np.asarray(x0, dtype=float)
        T = len(inputs) + 1
        out = np.zeros((T, self.n))
        out[0] = x0
        for t in range(T - 1):
            out[t + 1] = self.step(out[t][None], inputs[t][None], dt)[0]
        return out

    def clip_input(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.u_min, self.u_max)


def make_model(
    kind: str,
    u_min=None,
    u_max=None,
    wheelbase: float = 1.0,
) -> DynamicsModel:
    dims = {"unicycle": (3, 2), "bicycle": (4, 2), "single-integrator": (2, 2)}
    if kind not in dims:
        raise ValueError(f"unknown dynamics kind {kind!r}")
    n, m = dims[kind]
    defaults = {
        "unicycle": ([-0.2, -1.5], [0.8, 1.5]),
        "bicycle": ([-4.0, -0.5], [3.0, 0.5]),
        "single-integrator": ([-1.5, -1.5], [1.5, 1.5]),
    }
    lo, hi = defaults[kind]
    u_min = np.asarray(lo if u_min is None else u_min, dtype=float)
    u_max = np.asarray(hi if u_max is None else u_max, dtype=float)
    if u_min.shape != (m,) or u_max.shape != (m,):
        raise ValueError(f"input bounds must have shape ({m},)")
    return DynamicsModel(kind=kind, n=n, m=m, u_min=u_min, u_max=u_max, wheelbase=wheelbase)
