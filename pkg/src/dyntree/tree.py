"""Binary partition trees stored as flat arrays.

A :class:`Forest` holds ``N`` trees side by side so that SMC resampling is a
row copy and the hot loops can run inside numba. Node 0 of each row is the
root. Leaves carry their retired prior statistics; active data membership is
kept per pool slot (``leaf_of[i, s]`` is the leaf of slot ``s`` in tree
``i``), against an :class:`ActivePool` shared by all trees.

Split rules send ``x`` right iff ``x[dim] >= threshold``. Node rectangles
are the bounds implied by the split rules (infinite at the root); wherever a
finite rectangle is needed it is intersected with the data bounding box.
"""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass
from typing import Any

import numpy as np
from numba import njit

from . import leaf as lf

ForestArrays = namedtuple(
    "ForestArrays",
    ["left", "right", "parent", "sdim", "sval", "depth", "lo", "hi", "prior",
     "free", "nfree", "leaf_of"],
)
PoolArrays = namedtuple("PoolArrays", ["x", "y", "stat", "tin", "live"])

STAY, GROW, PRUNE = 0, 1, 2
MOVE_NAMES = {STAY: "stay", GROW: "grow", PRUNE: "prune"}


@dataclass(frozen=True)
class TreePriorConfig:
    """Tree prior ``p_split(D) = alpha * (1 + D) ** -beta`` and leaf size floor."""

    alpha: float = 0.95
    beta: float = 2.0
    min_leaf: int = 5

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.min_leaf < 1:
            raise ValueError(f"min_leaf must be >= 1, got {self.min_leaf}")


@dataclass(frozen=True)
class SplitRule:
    dim: int
    threshold: float


@dataclass(frozen=True)
class Move:
    """A candidate local move.

    ``node`` is the leaf to grow, the parent to prune, or the leaf that
    stays. ``prob`` is the proposal probability ``p_m``.
    """

    kind: str
    node: int
    prob: float
    rule: SplitRule | None = None


# ---------------------------------------------------------------------------
# kernels

@njit(cache=True)
def log_psplit(alpha, beta, D):
    return math.log(alpha) - beta * math.log1p(D)


@njit(cache=True)
def log_pstop(alpha, beta, D):
    return math.log1p(-alpha * (1.0 + D) ** (-beta))


@njit(cache=True)
def find_leaf(F, i, x):
    node = 0
    while F.left[i, node] >= 0:
        if x[F.sdim[i, node]] >= F.sval[i, node]:
            node = F.right[i, node]
        else:
            node = F.left[i, node]
    return node


@njit(cache=True)
def gather(F, i, node, out):
    """Write pool slots belonging to ``node`` of tree ``i`` into ``out``."""
    n = 0
    row = F.leaf_of[i]
    for s in range(row.shape[0]):
        if row[s] == node:
            out[n] = s
            n += 1
    return n


@njit(cache=True)
def add_stats(pool, idx, n, out):
    """``out += sum of pool statistics over idx[:n]``."""
    L = out.shape[0]
    for k in range(n):
        st = pool.stat[idx[k]]
        for a in range(L):
            out[a] += st[a]


@njit(cache=True)
def interval(F, i, node, j, bmin, bmax):
    lo = max(F.lo[i, node, j], bmin[j])
    hi = min(F.hi[i, node, j], bmax[j])
    return lo, hi


@njit(cache=True)
def sibling_leaf(F, i, node):
    """Parent of ``node`` if it can be pruned (sibling is a leaf), else -1."""
    par = F.parent[i, node]
    if par < 0:
        return -1
    sib = F.right[i, par] if F.left[i, par] == node else F.left[i, par]
    if F.left[i, sib] >= 0:
        return -1
    return par


@njit(cache=True)
def count_left(pool, idx, n, j, xi):
    c = 0
    for k in range(n):
        if pool.x[idx[k], j] < xi:
            c += 1
    return c


@njit(cache=True)
def grow(F, pool, i, node, j, xi, idx, n):
    """Split leaf ``node`` at ``x[j] = xi``; ``idx[:n]`` are its pool slots.

    The parent prior is shared in proportion to the active counts. Returns
    the (left, right) child indices.
    """
    nf = F.nfree[i]
    l = F.free[i, nf - 1]
    r = F.free[i, nf - 2]
    F.nfree[i] = nf - 2
    nl = 0
    for k in range(n):
        s = idx[k]
        if pool.x[s, j] < xi:
            F.leaf_of[i, s] = l
            nl += 1
        else:
            F.leaf_of[i, s] = r
    frac = nl / n if n > 0 else 0.5
    for c in (l, r):
        F.left[i, c] = -1
        F.right[i, c] = -1
        F.parent[i, c] = node
        F.sdim[i, c] = -1
        F.sval[i, c] = 0.0
        F.depth[i, c] = F.depth[i, node] + 1
        F.lo[i, c] = F.lo[i, node]
        F.hi[i, c] = F.hi[i, node]
    F.hi[i, l, j] = xi
    F.lo[i, r, j] = xi
    F.prior[i, l] = frac * F.prior[i, node]
    F.prior[i, r] = (1.0 - frac) * F.prior[i, node]
    F.prior[i, node] = 0.0
    F.left[i, node] = l
    F.right[i, node] = r
    F.sdim[i, node] = j
    F.sval[i, node] = xi
    return l, r


@njit(cache=True)
def prune(F, i, par):
    """Collapse the two leaf children of ``par`` into ``par``, pooling priors."""
    l = F.left[i, par]
    r = F.right[i, par]
    F.prior[i, par] = F.prior[i, l] + F.prior[i, r]
    row = F.leaf_of[i]
    for s in range(row.shape[0]):
        if row[s] == l or row[s] == r:
            row[s] = par
    for c in (l, r):
        F.prior[i, c] = 0.0
        F.left[i, c] = -1
        F.right[i, c] = -1
        F.parent[i, c] = -1
        F.sdim[i, c] = -1
        F.free[i, F.nfree[i]] = c
        F.nfree[i] += 1
    F.left[i, par] = -1
    F.right[i, par] = -1
    F.sdim[i, par] = -1
    F.sval[i, par] = 0.0


@njit(cache=True)
def tree_log_prior(F, i, alpha, beta):
    out = 0.0
    stack = np.empty(F.left.shape[1], dtype=np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        D = F.depth[i, node]
        if F.left[i, node] >= 0:
            out += log_psplit(alpha, beta, D)
            stack[top] = F.left[i, node]
            stack[top + 1] = F.right[i, node]
            top += 2
        else:
            out += log_pstop(alpha, beta, D)
    return out


@njit(cache=True)
def tree_height(F, i):
    """Number of levels: a root-only tree has height 1."""
    h = 0
    stack = np.empty(F.left.shape[1], dtype=np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        if F.depth[i, node] + 1 > h:
            h = F.depth[i, node] + 1
        if F.left[i, node] >= 0:
            stack[top] = F.left[i, node]
            stack[top + 1] = F.right[i, node]
            top += 2
    return h


@njit(cache=True)
def count_leaves(F, i):
    n = 0
    stack = np.empty(F.left.shape[1], dtype=np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        if F.left[i, node] >= 0:
            stack[top] = F.left[i, node]
            stack[top + 1] = F.right[i, node]
            top += 2
        else:
            n += 1
    return n


@njit(cache=True)
def copy_rows(F, src, dst):
    for k in range(src.shape[0]):
        a = src[k]
        b = dst[k]
        F.left[b] = F.left[a]
        F.right[b] = F.right[a]
        F.parent[b] = F.parent[a]
        F.sdim[b] = F.sdim[a]
        F.sval[b] = F.sval[a]
        F.depth[b] = F.depth[a]
        F.lo[b] = F.lo[a]
        F.hi[b] = F.hi[a]
        F.prior[b] = F.prior[a]
        F.free[b] = F.free[a]
        F.nfree[b] = F.nfree[a]
        F.leaf_of[b] = F.leaf_of[a]


# ---------------------------------------------------------------------------
# storage

class ActivePool:
    """Active observations shared by every tree, addressed by slot.

    Slots are recycled after retirement; the arrays double when full.
    """

    def __init__(self, d: int, spec: lf.ModelSpec, capacity: int = 64):
        self.d = d
        self.spec = spec
        capacity = max(int(capacity), 1)
        self.arrays = PoolArrays(
            np.zeros((capacity, d)), np.zeros(capacity), np.zeros((capacity, spec.L)),
            np.full(capacity, -1, dtype=np.int64), np.zeros(capacity, dtype=np.bool_),
        )
        self._free = list(range(capacity - 1, -1, -1))
        self.size = 0

    @property
    def capacity(self) -> int:
        return self.arrays.y.shape[0]

    def _grow(self) -> None:
        old = self.capacity
        new = 2 * old
        a = self.arrays
        self.arrays = PoolArrays(
            np.concatenate([a.x, np.zeros((old, self.d))]),
            np.concatenate([a.y, np.zeros(old)]),
            np.concatenate([a.stat, np.zeros((old, self.spec.L))]),
            np.concatenate([a.tin, np.full(old, -1, dtype=np.int64)]),
            np.concatenate([a.live, np.zeros(old, dtype=np.bool_)]),
        )
        self._free = list(range(new - 1, old - 1, -1)) + self._free

    def add(self, x: np.ndarray, y: float, t: int) -> int:
        if not self._free:
            self._grow()
        s = self._free.pop()
        a = self.arrays
        a.x[s] = x
        a.y[s] = y
        lf.point_stat(self.spec, a.x[s], float(y), a.stat[s])
        a.tin[s] = t
        a.live[s] = True
        self.size += 1
        return s

    def remove(self, s: int) -> None:
        a = self.arrays
        if not a.live[s]:
            raise KeyError(f"pool slot {s} is not live")
        a.live[s] = False
        a.tin[s] = -1
        self._free.append(s)
        self.size -= 1

    def live_slots(self) -> np.ndarray:
        return np.flatnonzero(self.arrays.live)


class Forest:
    """``n_trees`` partition trees over a shared :class:`ActivePool`."""

    def __init__(self, n_trees: int, pool: ActivePool, node_capacity: int = 15):
        self.pool = pool
        self.n_trees = n_trees
        d, L, P = pool.d, pool.spec.L, pool.capacity
        M = max(int(node_capacity), 3)
        self.arrays = ForestArrays(
            np.full((n_trees, M), -1, dtype=np.int64),
            np.full((n_trees, M), -1, dtype=np.int64),
            np.full((n_trees, M), -1, dtype=np.int64),
            np.full((n_trees, M), -1, dtype=np.int64),
            np.zeros((n_trees, M)),
            np.zeros((n_trees, M), dtype=np.int64),
            np.full((n_trees, M, d), -np.inf),
            np.full((n_trees, M, d), np.inf),
            np.zeros((n_trees, M, L)),
            np.tile(np.arange(M - 1, 0, -1, dtype=np.int64), (n_trees, 1)),
            np.full(n_trees, M - 1, dtype=np.int64),
            np.full((n_trees, P), -1, dtype=np.int64),
        )
        # free[:, M-1] is never read while nfree <= M-1
        self.arrays = self.arrays._replace(
            free=np.concatenate([self.arrays.free, np.zeros((n_trees, 1), dtype=np.int64)], axis=1))

    @property
    def node_capacity(self) -> int:
        return self.arrays.left.shape[1]

    def sync_pool(self) -> None:
        """Widen ``leaf_of`` after the pool has grown."""
        P = self.pool.capacity
        lo = self.arrays.leaf_of
        if lo.shape[1] < P:
            pad = np.full((self.n_trees, P - lo.shape[1]), -1, dtype=np.int64)
            self.arrays = self.arrays._replace(leaf_of=np.concatenate([lo, pad], axis=1))

    def ensure_free(self, k: int = 2) -> None:
        """Guarantee every tree has ``k`` free node slots."""
        if self.arrays.nfree.min() >= k:
            return
        F = self.arrays
        old = self.node_capacity
        extra = old
        N = self.n_trees

        def pad(a, fill):
            shape = (N, extra) + a.shape[2:]
            return np.concatenate([a, np.full(shape, fill, dtype=a.dtype)], axis=1)

        free = np.zeros((N, old + extra), dtype=np.int64)
        nfree = F.nfree + extra
        new_ids = np.arange(old + extra - 1, old - 1, -1, dtype=np.int64)
        for i in range(N):
            nf = F.nfree[i]
            free[i, :extra] = new_ids
            free[i, extra:extra + nf] = F.free[i, :nf]
        self.arrays = ForestArrays(
            pad(F.left, -1), pad(F.right, -1), pad(F.parent, -1), pad(F.sdim, -1),
            pad(F.sval, 0.0), pad(F.depth, 0), pad(F.lo, -np.inf), pad(F.hi, np.inf),
            pad(F.prior, 0.0), free, nfree, F.leaf_of,
        )

    def tree(self, i: int, cfg: TreePriorConfig | None = None) -> Tree:
        return Tree(self, i, cfg or TreePriorConfig())

    def assign_all_to_root(self) -> None:
        live = self.pool.arrays.live
        self.arrays.leaf_of[:, live] = 0

    def check(self) -> None:
        """Assert partition and bookkeeping invariants for every tree."""
        F = self.arrays
        pool = self.pool.arrays
        live = np.flatnonzero(pool.live)
        for i in range(self.n_trees):
            leaves = set()
            stack = [0]
            while stack:
                node = stack.pop()
                if F.left[i, node] >= 0:
                    l, r = F.left[i, node], F.right[i, node]
                    assert F.parent[i, l] == node and F.parent[i, r] == node
                    assert F.depth[i, l] == F.depth[i, node] + 1
                    stack += [l, r]
                else:
                    leaves.add(int(node))
            for s in live:
                node = find_leaf(F, i, pool.x[s])
                assert F.leaf_of[i, s] == node, (i, s, node, F.leaf_of[i, s])
            dead = np.flatnonzero(~pool.live)
            assert np.all(F.leaf_of[i, dead] == -1)
            used = set(range(self.node_capacity)) - set(F.free[i, :F.nfree[i]].tolist())
            reach = set()
            stack = [0]
            while stack:
                node = stack.pop()
                reach.add(node)
                if F.left[i, node] >= 0:
                    stack += [F.left[i, node], F.right[i, node]]
            assert used == reach, (i, used ^ reach)


def build_forest(X: np.ndarray, y: np.ndarray, spec: lf.ModelSpec, n_trees: int = 1,
                 t0: int = 0) -> Forest:
    """Forest of single-leaf trees over the rows of ``X`` (all active)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    pool = ActivePool(X.shape[1], spec, capacity=max(len(y), 1))
    for k in range(len(y)):
        pool.add(X[k], y[k], t0 + k)
    forest = Forest(n_trees, pool)
    forest.assign_all_to_root()
    return forest


# ---------------------------------------------------------------------------
# single-tree interface

class Tree:
    """One tree of a :class:`Forest`, with the local-move API.

    Trees share storage with their forest; mutating moves act in place.
    """

    def __init__(self, forest: Forest, index: int, cfg: TreePriorConfig):
        self.forest = forest
        self.index = index
        self.cfg = cfg

    @classmethod
    def from_data(cls, X: np.ndarray, y: np.ndarray, spec: lf.ModelSpec,
                  cfg: TreePriorConfig | None = None) -> Tree:
        return build_forest(X, y, spec).tree(0, cfg)

    @property
    def arrays(self) -> ForestArrays:
        return self.forest.arrays

    @property
    def pool(self) -> ActivePool:
        return self.forest.pool

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        pool = self.pool.arrays
        X = pool.x[pool.live]
        return X.min(axis=0), X.max(axis=0)

    def is_leaf(self, node: int) -> bool:
        return self.arrays.left[self.index, node] < 0

    def leaves(self) -> list[int]:
        F, i = self.arrays, self.index
        out, stack = [], [0]
        while stack:
            node = stack.pop()
            if F.left[i, node] >= 0:
                stack += [int(F.right[i, node]), int(F.left[i, node])]
            else:
                out.append(node)
        return out

    def depth(self, node: int) -> int:
        return int(self.arrays.depth[self.index, node])

    def height(self) -> int:
        return int(tree_height(self.arrays, self.index))

    def rule(self, node: int) -> SplitRule | None:
        F, i = self.arrays, self.index
        if F.left[i, node] < 0:
            return None
        return SplitRule(int(F.sdim[i, node]), float(F.sval[i, node]))

    def children(self, node: int) -> tuple[int, int]:
        F, i = self.arrays, self.index
        return int(F.left[i, node]), int(F.right[i, node])

    def parent(self, node: int) -> int:
        return int(self.arrays.parent[self.index, node])

    def rectangle(self, node: int, clamp: bool = True) -> np.ndarray:
        """``(d, 2)`` bounds of ``node``, clamped to the data bounding box."""
        F, i = self.arrays, self.index
        lo, hi = F.lo[i, node].copy(), F.hi[i, node].copy()
        if clamp:
            bmin, bmax = self.bbox()
            lo, hi = np.maximum(lo, bmin), np.minimum(hi, bmax)
        return np.stack([lo, hi], axis=1)

    def active_slots(self, node: int) -> np.ndarray:
        return np.flatnonzero(self.arrays.leaf_of[self.index] == node)

    def prior_stats(self, node: int) -> np.ndarray:
        return self.arrays.prior[self.index, node].copy()

    def prior(self, node: int) -> lf.Prior:
        spec = self.pool.spec
        S = self.prior_stats(node)
        if spec.kind == lf.MULTINOMIAL:
            return lf.MultinomialPrior.from_stats(S, spec.a0)
        return lf.RegressionPrior.from_stats(S, spec.p)

    def set_prior(self, node: int, prior: lf.Prior) -> None:
        self.arrays.prior[self.index, node] = prior.stats()

    def leaf_stats(self, node: int) -> np.ndarray:
        """Combined prior + active statistics of a leaf."""
        slots = self.active_slots(node)
        return self.prior_stats(node) + self.pool.arrays.stat[slots].sum(axis=0)

    def leaf_posterior(self, node: int) -> lf.LeafPosterior:
        return lf._posterior_from_stats(self.pool.spec, self.leaf_stats(node))

    def log_ml(self) -> float:
        spec = self.pool.spec
        p = max(spec.p, 1)
        return sum(float(lf.logml(spec, self.leaf_stats(n), np.zeros((p, p)), np.zeros(p)))
                   for n in self.leaves())

    def to_dict(self, node: int = 0) -> dict[str, Any]:
        """Nested snapshot of the subtree at ``node`` (debugging aid)."""
        F, i = self.arrays, self.index
        if F.left[i, node] >= 0:
            l, r = self.children(node)
            return {"dim": int(F.sdim[i, node]), "threshold": float(F.sval[i, node]),
                    "depth": self.depth(node), "left": self.to_dict(l), "right": self.to_dict(r)}
        S = F.prior[i, node]
        return {"leaf": int(node), "depth": self.depth(node),
                "n_active": int(len(self.active_slots(node))), "n_eff": float(S[0])}


def leaf_of(tree: Tree, x: np.ndarray) -> int:
    """Index of the unique leaf of ``tree`` containing ``x``."""
    return int(find_leaf(tree.arrays, tree.index, np.asarray(x, dtype=np.float64)))


def log_tree_prior(tree: Tree, cfg: TreePriorConfig | None = None) -> float:
    cfg = cfg or tree.cfg
    return float(tree_log_prior(tree.arrays, tree.index, cfg.alpha, cfg.beta))


def propose_split(tree: Tree, node: int, rng: np.random.Generator) -> SplitRule:
    """Uniform dimension, then a threshold uniform on the leaf's projection."""
    d = tree.pool.d
    j = int(rng.random() * d)
    bmin, bmax = tree.bbox()
    lo, hi = interval(tree.arrays, tree.index, node, j, bmin, bmax)
    return SplitRule(j, float(lo + rng.random() * (hi - lo)))


def local_moves(tree: Tree, x: np.ndarray, cfg: TreePriorConfig | None = None,
                rng: np.random.Generator | None = None) -> list[Move]:
    """Moves local to ``x`` with proposal probabilities.

    Stay, prune and grow each get 1/3; an unavailable move's mass goes to
    stay. Prune requires a non-root leaf whose sibling is also a leaf; grow
    draws one split and is unavailable if either child would hold fewer
    than ``min_leaf`` active points.
    """
    cfg = cfg or tree.cfg
    rng = rng if rng is not None else np.random.default_rng()
    node = leaf_of(tree, x)
    moves = []
    par = int(sibling_leaf(tree.arrays, tree.index, node))
    if par >= 0:
        moves.append(Move("prune", par, 1.0 / 3.0))
    rule = propose_split(tree, node, rng)
    slots = tree.active_slots(node)
    nl = int(np.sum(tree.pool.arrays.x[slots, rule.dim] < rule.threshold))
    if min(nl, len(slots) - nl) >= cfg.min_leaf:
        moves.append(Move("grow", node, 1.0 / 3.0, rule))
    moves.insert(0, Move("stay", node, 1.0 - len(moves) / 3.0))
    return moves


def apply_move(tree: Tree, move: Move) -> Tree:
    """Apply ``move`` in place and return the tree."""
    F, i = tree.arrays, tree.index
    if move.kind == "stay":
        return tree
    if move.kind == "grow":
        if F.left[i, move.node] >= 0:
            raise ValueError(f"cannot grow internal node {move.node}")
        rule = move.rule
        lo, hi = F.lo[i, move.node, rule.dim], F.hi[i, move.node, rule.dim]
        if not lo < rule.threshold < hi:
            raise ValueError(f"threshold {rule.threshold} outside node interval ({lo}, {hi})")
        tree.forest.ensure_free(2)
        F = tree.arrays
        slots = tree.active_slots(move.node)
        grow(F, tree.pool.arrays, i, move.node, rule.dim, rule.threshold, slots, len(slots))
        return tree
    if move.kind == "prune":
        l, r = F.left[i, move.node], F.right[i, move.node]
        if l < 0 or F.left[i, l] >= 0 or F.left[i, r] >= 0:
            raise ValueError(f"node {move.node} does not have two leaf children")
        prune(F, i, move.node)
        return tree
    raise ValueError(f"unknown move kind {move.kind!r}")
