"""Sparse factor-graph representation of a contingency game.

Variables are time-indexed state and input blocks per (player, hypothesis);
the ego input blocks before the branching time are aliased to one shared
block. Residual factors come in homogeneous batches (one batch covers every
(hypothesis, time) instance of a factor kind) so per-iteration linearization
is a handful of vectorized calls, and the per-player normal equations are
assembled from precomputed COO index templates.

Objective ownership follows the generalized Nash setup: private costs and
feasibility penalties belong to one player even when they touch a foreign
block (no gradient is taken there), while shared inequality penalties
(collision, region avoidance) enter every touching player's objective in
full.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix

from .problem import ContingencyProblem
from .regions import softmin_weights

POS = slice(0, 2)  # position dims within every state vector


@dataclass(frozen=True)
class Block:
    bid: int
    key: tuple  # ("x"|"u", player, hyp, t) canonical
    offset: int
    dim: int
    player: int


# --------------------------------------------------------------------------
# factor batches
# --------------------------------------------------------------------------


class FactorBatch:
    """N homogeneous residual instances over fixed variable slots."""

    kind: str = "?"

    def __init__(self, slots, slot_players, owners):
        self.slots = [np.asarray(s, dtype=np.intp) for s in slots]  # (N, d_s) var idx
        self.slot_players = tuple(slot_players)
        self.owners = tuple(owners)
        self.N = self.slots[0].shape[0]

    def gather(self, vals):
        return [vals[idx] for idx in self.slots]

    def residual(self, vals) -> np.ndarray:  # (N, R)
        raise NotImplementedError

    def linearize(self, vals):  # (r, [J_s (N, R, d_s)])
        raise NotImplementedError


class LinearBatch(FactorBatch):
    """r = sum_s J_s v_s + c with constant Jacobians."""

    def __init__(self, slots, slot_players, owners, jacs, const):
        super().__init__(slots, slot_players, owners)
        self.jacs = [np.asarray(J) for J in jacs]
        self.const = np.asarray(const)

    def residual(self, vals):
        r = self.const.copy()
        for J, v in zip(self.jacs, self.gather(vals)):
            r += np.einsum("nri,ni->nr", J, v)
        return r

    def linearize(self, vals):
        return self.residual(vals), self.jacs


def _diag_rows(w):
    """(N, d) weights -> (N, d, d) stack of diagonal matrices."""
    N, d = w.shape
    J = np.zeros((N, d, d))
    J[:, np.arange(d), np.arange(d)] = w
    return J


class InitBatch(LinearBatch):
    kind = "init"

    def __init__(self, idx, player, x0, scale):
        N, n = idx.shape
        J = np.broadcast_to(scale * np.eye(n), (N, n, n)).copy()
        super().__init__([idx], [player], (player,), [J], np.tile(-scale * x0, (N, 1)))


class GoalBatch(LinearBatch):
    kind = "goal"

    def __init__(self, idx, player, owner, w, goals):
        super().__init__([idx], [player], (owner,), [_diag_rows(w)], -w * goals)


class EffortBatch(LinearBatch):
    kind = "effort"

    def __init__(self, idx, player, owner, w):
        N, m = idx.shape
        super().__init__([idx], [player], (owner,), [_diag_rows(w)], np.zeros((N, m)))


class SmoothBatch(LinearBatch):
    kind = "smooth"

    def __init__(self, idx1, idx2, player, owner, w):
        N, m = idx1.shape
        D = _diag_rows(w)
        super().__init__([idx1, idx2], [player, player], (owner,), [-D, D], np.zeros((N, m)))


class CouplingBatch(LinearBatch):
    kind = "coupling"

    def __init__(self, idx_p, idx_q, player_p, player_q, owner, w, offset):
        N = idx_p.shape[0]
        Jp = np.zeros((N, 2, idx_p.shape[1]))
        Jq = np.zeros((N, 2, idx_q.shape[1]))
        Jp[:, [0, 1], [0, 1]] = w
        Jq[:, [0, 1], [0, 1]] = -w
        super().__init__(
            [idx_p, idx_q], [player_p, player_q], (owner,), [Jp, Jq],
            np.tile(-np.asarray(offset), (N, 1)) * w,
        )


class DynamicsBatch(FactorBatch):
    kind = "dynamics"

    def __init__(self, idx_x, idx_u, idx_x2, player, model, dt, scale):
        super().__init__([idx_x, idx_u, idx_x2], [player] * 3, (player,))
        self.model = model
        self.dt = dt
        self.s = scale
        n = model.n
        self._eye = np.broadcast_to(scale * np.eye(n), (self.N, n, n)).copy()

    def residual(self, vals):
        X, U, X2 = self.gather(vals)
        return self.s * (X2 - self.model.step(X, U, self.dt))

    def linearize(self, vals):
        X, U, X2 = self.gather(vals)
        xn, Jx, Ju = self.model.step_jac(X, U, self.dt)
        return self.s * (X2 - xn), [-self.s * Jx, -self.s * Ju, self._eye]


class BoundsBatch(FactorBatch):
    kind = "bounds"

    def __init__(self, idx, player, lo, hi, scale):
        super().__init__([idx], [player], (player,))
        self.lo, self.hi, self.s = np.asarray(lo), np.asarray(hi), scale
        self.m = idx.shape[1]

    def residual(self, vals):
        (U,) = self.gather(vals)
        return self.s * np.concatenate(
            [np.maximum(0.0, U - self.hi), np.maximum(0.0, self.lo - U)], axis=1
        )

    def linearize(self, vals):
        (U,) = self.gather(vals)
        m = self.m
        r = self.residual(vals)
        J = np.zeros((self.N, 2 * m, m))
        ar = np.arange(m)
        J[:, ar, ar] = self.s * (U > self.hi)
        J[:, m + ar, ar] = -self.s * (U < self.lo)
        return r, [J]


class CollisionBatch(FactorBatch):
    kind = "collision"

    def __init__(self, idx_p, idx_q, player_p, player_q, d_min, scale):
        super().__init__([idx_p, idx_q], [player_p, player_q], (player_p, player_q))
        self.d2 = d_min**2
        self.s = scale

    def _delta(self, vals):
        Xp, Xq = self.gather(vals)
        return Xp[:, POS] - Xq[:, POS]

    def residual(self, vals):
        d = self._delta(vals)
        return self.s * np.maximum(0.0, self.d2 - (d**2).sum(axis=1))[:, None]

    def linearize(self, vals):
        d = self._delta(vals)
        r = self.s * np.maximum(0.0, self.d2 - (d**2).sum(axis=1))[:, None]
        act = (r[:, 0] > 0.0)[:, None]
        Jp = np.zeros((self.N, 1, self.slots[0].shape[1]))
        Jq = np.zeros((self.N, 1, self.slots[1].shape[1]))
        Jp[:, 0, POS] = -2.0 * self.s * d * act
        Jq[:, 0, POS] = 2.0 * self.s * d * act
        return r, [Jp, Jq]


class AvoidBatch(FactorBatch):
    """Penalizes joint occupancy of a forbidden conjunction of regions.

    terms: list of (slot_index, RegionCBF); the residual is
    sqrt(mu) * max(0, softmin_i h_i) evaluated on each touched player's
    planned positions -- positive only when every region is occupied at once.
    """

    kind = "avoid"

    def __init__(self, slots, slot_players, owners, terms, radius, scale):
        super().__init__(slots, slot_players, owners)
        self.terms = terms
        self.radius = radius
        self.s = scale

    def _margins(self, vals):
        vs = self.gather(vals)
        H = np.empty((self.N, len(self.terms)))
        G = []
        for i, (si, cbf) in enumerate(self.terms):
            h, g = cbf.value_grad(vs[si][:, POS])
            H[:, i] = h
            G.append(g)
        return H, G

    def residual(self, vals):
        vs = self.gather(vals)
        H = np.empty((self.N, len(self.terms)))
        for i, (si, cbf) in enumerate(self.terms):
            H[:, i] = cbf.value(vs[si][:, POS])
        v, _ = softmin_weights(H, self.radius)
        return self.s * np.maximum(0.0, v)[:, None]

    def linearize(self, vals):
        H, G = self._margins(vals)
        v, w = softmin_weights(H, self.radius)
        act = v > 0.0
        r = self.s * np.maximum(0.0, v)[:, None]
        jacs = [np.zeros((self.N, 1, idx.shape[1])) for idx in self.slots]
        for i, (si, _) in enumerate(self.terms):
            jacs[si][:, 0, POS] += self.s * (act * w[:, i])[:, None] * G[i]
        return r, jacs


# --------------------------------------------------------------------------
# per-player assembly
# --------------------------------------------------------------------------


class PlayerAssembler:
    """Precomputed COO layout of one player's damped normal equations."""

    def __init__(self, player: int, var_idx: np.ndarray, nvars_total: int, batches):
        self.player = player
        self.var_idx = var_idx
        self.nv = len(var_idx)
        g2l = np.full(nvars_total, -1, dtype=np.intp)
        g2l[var_idx] = np.arange(self.nv)
        self.batches = [b for b in batches if player in b.owners]
        self._grad = []  # (batch_i, slot_i, local idx (N, d))
        self._pairs = []  # (batch_i, s1, s2)
        rows, cols = [], []
        for bi, b in enumerate(self.batches):
            owned = [s for s, sp in enumerate(b.slot_players) if sp == player]
            for s in owned:
                self._grad.append((bi, s, g2l[b.slots[s]]))
            for s1 in owned:
                l1 = g2l[b.slots[s1]]
                for s2 in owned:
                    l2 = g2l[b.slots[s2]]
                    self._pairs.append((bi, s1, s2))
                    rows.append(np.broadcast_to(l1[:, :, None], (b.N, l1.shape[1], l2.shape[1])).ravel())
                    cols.append(np.broadcast_to(l2[:, None, :], (b.N, l1.shape[1], l2.shape[1])).ravel())
        self.rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.intp)
        self.cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.intp)

    def assemble(self, vals):
        """Gauss-Newton H (dense, local), gradient g = J^T r (local), and Phi."""
        g = np.zeros(self.nv)
        phi = 0.0
        lin = []
        for b in self.batches:
            r, jacs = b.linearize(vals)
            phi += float((r**2).sum())
            lin.append((r, jacs))
        for bi, s, lidx in self._grad:
            r, jacs = lin[bi]
            np.add.at(g, lidx.ravel(), np.einsum("nri,nr->ni", jacs[s], r).ravel())
        segs = []
        for bi, s1, s2 in self._pairs:
            _, jacs = lin[bi]
            segs.append(np.einsum("nri,nrj->nij", jacs[s1], jacs[s2]).ravel())
        hv = np.concatenate(segs) if segs else np.zeros(0)
        H = coo_matrix((hv, (self.rows, self.cols)), shape=(self.nv, self.nv)).toarray()
        return H, g, phi

    def phi(self, vals) -> float:
        return float(sum((b.residual(vals) ** 2).sum() for b in self.batches))

    def pattern_nnz(self) -> int:
        if len(self.rows) == 0:
            return 0
        return len(np.unique(self.rows * self.nv + self.cols))


# --------------------------------------------------------------------------
# graph construction
# --------------------------------------------------------------------------


class FactorGraph:
    def __init__(self, problem: ContingencyProblem, mu_eq: float, mu_ineq: float):
        self.problem = problem
        self.mu_eq = mu_eq
        self.mu_ineq = mu_ineq
        self.blocks: list[Block] = []
        self._bykey: dict[tuple, Block] = {}
        self._build_blocks()
        self.nvars = sum(b.dim for b in self.blocks)
        self.batches: list[FactorBatch] = []
        self._build_batches()
        self.assemblers = [
            PlayerAssembler(i, self.player_vars(i), self.nvars, self.batches)
            for i in range(len(problem.players))
        ]

    # -- variables -----------------------------------------------------------

    def _canon(self, kind, p, k, t):
        prob = self.problem
        if kind == "u" and p == 0 and k > 0 and t < min(prob.t_branch, prob.T - 1):
            return ("u", 0, 0, t)
        return (kind, p, k, t)

    def _build_blocks(self):
        prob = self.problem
        off = 0
        for pidx, p in enumerate(prob.players):
            for k in range(prob.K):
                for t in range(prob.T):
                    key = ("x", pidx, k, t)
                    blk = Block(len(self.blocks), key, off, p.model.n, pidx)
                    self.blocks.append(blk)
                    self._bykey[key] = blk
                    off += p.model.n
                for t in range(prob.T - 1):
                    key = self._canon("u", pidx, k, t)
                    if key in self._bykey:
                        continue
                    blk = Block(len(self.blocks), key, off, p.model.m, pidx)
                    self.blocks.append(blk)
                    self._bykey[key] = blk
                    off += p.model.m

    def block(self, kind, p, k, t) -> Block:
        return self._bykey[self._canon(kind, p, k, t)]

    def idx(self, kind, p, k, t) -> np.ndarray:
        b = self.block(kind, p, k, t)
        return np.arange(b.offset, b.offset + b.dim)

    def _idx_grid(self, kind, p, pairs):
        """(N, dim) index array over a list of (k, t) instances."""
        return np.stack([self.idx(kind, p, k, t) for k, t in pairs])

    def player_vars(self, p: int) -> np.ndarray:
        return np.concatenate(
            [np.arange(b.offset, b.offset + b.dim) for b in self.blocks if b.player == p]
        )

    # -- factors ---------------------------------------------------------------

    def _build_batches(self):
        prob = self.problem
        T, K = prob.T, prob.K
        s_eq = np.sqrt(self.mu_eq)
        s_in = np.sqrt(self.mu_ineq)
        beliefs = prob.beliefs
        add = self.batches.append

        for pidx, p in enumerate(prob.players):
            n, m = p.model.n, p.model.m
            bscale = beliefs if pidx == 0 else np.ones(K)  # ego costs belief-weighted

            init_idx = self._idx_grid("x", pidx, [(k, 0) for k in range(K)])
            add(InitBatch(init_idx, pidx, p.x0, s_eq))

            kt_dyn = [(k, t) for k in range(K) for t in range(T - 1)]
            add(
                DynamicsBatch(
                    self._idx_grid("x", pidx, kt_dyn),
                    self._idx_grid("u", pidx, kt_dyn),
                    self._idx_grid("x", pidx, [(k, t + 1) for k, t in kt_dyn]),
                    pidx, p.model, prob.dt, s_eq,
                )
            )

            kt_all = [(k, t) for k in range(K) for t in range(T)]
            goals = np.stack(
                [prob.goal_traj(prob.hypotheses[k], p)[t] for k, t in kt_all]
            )
            wg = np.asarray(p.cost.goal_weights, dtype=float)
            w = np.stack(
                [
                    np.sqrt(bscale[k] * (p.cost.terminal_scale if t == T - 1 else 1.0)) * wg
                    for k, t in kt_all
                ]
            )
            add(GoalBatch(self._idx_grid("x", pidx, kt_all), pidx, pidx, w, goals))

            we = np.asarray(p.cost.effort_weights, dtype=float)
            w_eff = np.stack([np.sqrt(bscale[k]) * we for k, t in kt_dyn])
            add(EffortBatch(self._idx_grid("u", pidx, kt_dyn), pidx, pidx, w_eff))

            if p.cost.smooth_weight > 0 and T > 2:
                kt_sm = [(k, t) for k in range(K) for t in range(T - 2)]
                w_sm = np.stack(
                    [np.full(m, np.sqrt(bscale[k] * p.cost.smooth_weight)) for k, t in kt_sm]
                )
                add(
                    SmoothBatch(
                        self._idx_grid("u", pidx, kt_sm),
                        self._idx_grid("u", pidx, [(k, t + 1) for k, t in kt_sm]),
                        pidx, pidx, w_sm,
                    )
                )

            for term in p.cost.couplings:
                q = prob.player_index(term.other)
                wc = np.stack(
                    [np.sqrt(bscale[k]) * np.asarray(term.weights) for k, t in kt_all]
                )
                add(
                    CouplingBatch(
                        self._idx_grid("x", pidx, kt_all),
                        self._idx_grid("x", q, kt_all),
                        pidx, q, pidx, wc, term.offset,
                    )
                )

            add(BoundsBatch(self._idx_grid("u", pidx, kt_dyn), pidx, p.model.u_min, p.model.u_max, s_in))

        # shared collision penalties, one batch per unordered player pair
        kt_all = [(k, t) for k in range(K) for t in range(prob.T)]
        for i in range(len(prob.players)):
            for j in range(i + 1, len(prob.players)):
                d = max(prob.players[i].cost.d_min, prob.players[j].cost.d_min)
                if d <= 0:
                    continue
                add(
                    CollisionBatch(
                        self._idx_grid("x", i, kt_all),
                        self._idx_grid("x", j, kt_all),
                        i, j, d, s_in,
                    )
                )

        # avoid constraints: per hypothesis, on that hypothesis' trajectories
        for k, hyp in enumerate(prob.hypotheses):
            for spec in hyp.avoid:
                agents = sorted({a for a, _ in spec.terms()})
                pidxs = [prob.player_index(a) for a in agents]
                slot_of = {a: s for s, a in enumerate(agents)}
                slots = [
                    self._idx_grid("x", pi, [(k, t) for t in range(T)]) for pi in pidxs
                ]
                terms = [
                    (slot_of[agent], prob.regions[agent][propname])
                    for agent, propname in spec.terms()
                ]
                radius = min(c.radius for _, c in terms)
                add(AvoidBatch(slots, pidxs, tuple(pidxs), terms, radius, s_in))

    # -- evaluation helpers ------------------------------------------------------

    def phi(self, player: int, vals) -> float:
        return self.assemblers[player].phi(vals)

    def gradient(self, player: int, vals) -> np.ndarray:
        """True objective gradient (2 J^T r) over the player's own variables."""
        _, g, _ = self.assemblers[player].assemble(vals)
        return 2.0 * g

    def nash_residual(self, vals) -> dict[str, float]:
        return {
            p.name: float(np.linalg.norm(self.gradient(i, vals)))
            for i, p in enumerate(self.problem.players)
        }

    def factor_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for b in self.batches:
            out[b.kind] = out.get(b.kind, 0) + b.N
        return out

    def block_pattern(self, player: int) -> set[tuple[tuple, tuple]]:
        """Block-level sparsity of one player's normal equations."""
        pairs = set()
        for b in self.batches:
            if player not in b.owners:
                continue
            owned = [s for s, sp in enumerate(b.slot_players) if sp == player]
            for s1 in owned:
                for s2 in owned:
                    for i in range(b.N):
                        k1 = self._key_of_index(b.slots[s1][i, 0])
                        k2 = self._key_of_index(b.slots[s2][i, 0])
                        pairs.add((k1, k2))
        return pairs

    def _key_of_index(self, vi: int) -> tuple:
        for b in self.blocks:
            if b.offset <= vi < b.offset + b.dim:
                return b.key
        raise IndexError(vi)

    # -- structured values ---------------------------------------------------------

    def unpack(self, vals):
        """vals -> (states, inputs) dicts keyed by (player name, hypothesis)."""
        prob = self.problem
        states, inputs = {}, {}
        for pidx, p in enumerate(prob.players):
            for k in range(prob.K):
                X = np.stack([vals[self.idx("x", pidx, k, t)] for t in range(prob.T)])
                U = np.stack([vals[self.idx("u", pidx, k, t)] for t in range(prob.T - 1)])
                states[(p.name, k)] = X
                inputs[(p.name, k)] = U
        return states, inputs

    def pack(self, states, inputs) -> np.ndarray:
        """Structured trajectories -> flat vals; aliased blocks get the
        average of the per-hypothesis values written to them."""
        prob = self.problem
        vals = np.zeros(self.nvars)
        counts = np.zeros(self.nvars)
        for pidx, p in enumerate(prob.players):
            for k in range(prob.K):
                X = states[(p.name, k)]
                U = inputs[(p.name, k)]
                for t in range(prob.T):
                    idx = self.idx("x", pidx, k, t)
                    vals[idx] += X[t]
                    counts[idx] += 1
                for t in range(prob.T - 1):
                    idx = self.idx("u", pidx, k, t)
                    vals[idx] += U[t]
                    counts[idx] += 1
        return vals / np.maximum(counts, 1.0)


def compile_graph(
    problem: ContingencyProblem, mu_eq: float = 1e4, mu_ineq: float = 1e3
) -> FactorGraph:
    return FactorGraph(problem, mu_eq, mu_ineq)
