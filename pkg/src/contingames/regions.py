"""Workspace regions and smooth barrier functions over them.

Regions are axis-aligned rectangles. Each state proposition of an agent is
backed by one rectangle; exact (half-open) membership drives the symbolic
labelling while a softmin-smoothed signed margin h(p) drives the continuous
avoid constraints (h > 0 strictly inside, h < 0 outside, C^inf everywhere).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Rect:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError("degenerate rectangle")

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0])

    def contains(self, p) -> bool:
        # half-open so tilings label every point exactly once
        x, y = float(p[0]), float(p[1])
        return self.xmin <= x < self.xmax and self.ymin <= y < self.ymax

    def margins(self, P: np.ndarray) -> np.ndarray:
        """Distances to the four faces, (N, 4); all > 0 strictly inside."""
        P = np.atleast_2d(P)
        return np.stack(
            [P[:, 0] - self.xmin, self.xmax - P[:, 0], P[:, 1] - self.ymin, self.ymax - P[:, 1]],
            axis=1,
        )


# gradient directions of the four face margins w.r.t. (x, y)
_FACE_GRADS = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


@dataclass(frozen=True)
class RegionCBF:
    """Smooth inside-ness margin for one proposition of one agent."""

    prop: str
    agent: str
    rect: Rect
    radius: float = 0.05

    def value(self, P: np.ndarray) -> np.ndarray:
        """softmin of face margins, (N,). Lower bound of the true margin."""
        m = self.rect.margins(P)
        return softmin(m, self.radius)

    def value_grad(self, P: np.ndarray):
        m = self.rect.margins(P)
        h, w = softmin_weights(m, self.radius)
        return h, w @ _FACE_GRADS

    def centroid(self) -> np.ndarray:
        return self.rect.center


def softmin(m: np.ndarray, r: float) -> np.ndarray:
    """-r*logsumexp(-m/r): smooth underestimate of min(m) within r*log(k)."""
    z = -m / r
    zmax = z.max(axis=-1, keepdims=True)
    return -r * (np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0])


def softmin_weights(m: np.ndarray, r: float):
    """softmin value and its convex weights (the gradient w.r.t. m)."""
    z = -m / r
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=-1)
    h = -r * (np.log(s) + zmax[..., 0])
    return h, e / s[..., None]


def label_position(p, cbfs: dict[str, RegionCBF]) -> frozenset[str]:
    """Exact propositional label of one agent position under its regions."""
    return frozenset(name for name, c in cbfs.items() if c.rect.contains(p))
