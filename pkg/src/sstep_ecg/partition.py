"""k-way partitioning by recursive bisection, reordering, and the splitting operator."""

from __future__ import annotations

import heapq
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .sparse import SparseSpd

__all__ = [
    "Partition",
    "kway_partition",
    "reorder",
    "split_T",
    "read_partition",
    "write_partition",
]

BASE_DOMAINS = 64


@dataclass(frozen=True, eq=False)
class Partition:
    """Assignment of rows to ``t`` domains.

    ``fallback`` records that some bisection had to split by size alone
    because the induced subgraph was disconnected.
    """

    t: int
    domain_of: np.ndarray
    base_t: int = BASE_DOMAINS
    fallback: bool = False
    _ranges: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        dom = np.asarray(self.domain_of, dtype=np.int64)
        if dom.ndim != 1 or dom.size == 0:
            raise ValueError("domain_of must be a nonempty vector")
        if dom.min() < 0 or dom.max() >= self.t:
            raise ValueError("domain index out of range")
        if np.bincount(dom, minlength=self.t).min() == 0:
            raise ValueError("every domain must be nonempty")
        dom.setflags(write=False)
        object.__setattr__(self, "domain_of", dom)
        if np.all(np.diff(dom) >= 0):
            bounds = np.searchsorted(dom, np.arange(self.t + 1))
            object.__setattr__(self, "_ranges", bounds)

    @property
    def n(self) -> int:
        return self.domain_of.size

    @property
    def is_contiguous(self) -> bool:
        return self._ranges is not None

    @property
    def domain_ranges(self) -> list[tuple[int, int]]:
        """Half-open ``(start, stop)`` per domain; only valid after reordering."""
        if self._ranges is None:
            raise ValueError("partition is not contiguous; reorder first")
        b = self._ranges
        return [(int(b[i]), int(b[i + 1])) for i in range(self.t)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.domain_of, minlength=self.t)

    def ordering(self) -> np.ndarray:
        """Permutation ``perm`` with ``perm[new] = old`` making domains contiguous."""
        return np.argsort(self.domain_of, kind="stable")

    def permuted(self, perm: np.ndarray) -> "Partition":
        return Partition(self.t, self.domain_of[perm], self.base_t, self.fallback)

    def coarsen(self, t: int) -> "Partition":
        """Merge runs of ``self.t // t`` consecutive domains."""
        if t < 1 or self.t % t:
            raise ValueError(f"t={t} does not divide {self.t}")
        return Partition(t, self.domain_of // (self.t // t), self.base_t, self.fallback)


def _bfs_levels(adj: sp.csr_matrix, start: int, mask: np.ndarray) -> np.ndarray:
    """BFS level of every masked vertex reachable from ``start`` (-1 otherwise)."""
    level = np.full(adj.shape[0], -1, dtype=np.int64)
    level[start] = 0
    frontier = np.array([start])
    depth = 0
    while frontier.size:
        depth += 1
        nbrs = adj[frontier].indices
        nbrs = np.unique(nbrs)
        nbrs = nbrs[mask[nbrs] & (level[nbrs] < 0)]
        level[nbrs] = depth
        frontier = nbrs
    return level


def _pseudo_peripheral(adj, degree, start, mask):
    level = _bfs_levels(adj, start, mask)
    ecc = level.max()
    while True:
        last = np.flatnonzero(level == ecc)
        cand = last[np.argmin(degree[last])]
        cand_level = _bfs_levels(adj, cand, mask)
        if cand_level.max() <= ecc:
            return start, level
        start, level, ecc = cand, cand_level, cand_level.max()


def _bisect(adj, degree, verts, rng, path, vwgt=None, target0=None):
    """Split ``verts`` by breadth-first level from a pseudo-peripheral vertex.

    The first part takes vertices in level order (ties by index) until it
    holds ``target0`` weight (half the vertices by default).
    """
    mask = np.zeros(adj.shape[0], dtype=bool)
    mask[verts] = True
    order = []
    fallback = False
    remaining = mask.copy()
    while remaining.any():
        pool = np.flatnonzero(remaining)
        start = pool[rng.integers(pool.size)]
        _, level = _pseudo_peripheral(adj, degree, start, remaining)
        reached = np.flatnonzero(level >= 0)
        order.append(reached[np.lexsort((reached, level[reached]))])
        remaining[reached] = False
        if remaining.any():
            fallback = True
    order = np.concatenate(order)
    if vwgt is None:
        half = order.size // 2
    else:
        half = int(np.searchsorted(np.cumsum(vwgt[order]), target0, side="right"))
        half = min(max(half, 1), order.size - 1)
    return order[:half], order[half:], fallback


def _cut(adj: sp.csr_matrix, part: np.ndarray) -> float:
    coo = adj.tocoo()
    return float(coo.data[part[coo.row] != part[coo.col]].sum()) / 2


def _match_heavy_edges(adj: sp.csr_matrix, rng) -> np.ndarray:
    """Coarse id per vertex from a greedy heavy-edge matching in random order."""
    n = adj.shape[0]
    ptr, idx, w = adj.indptr, adj.indices, adj.data
    match = np.full(n, -1, dtype=np.int64)
    for v in rng.permutation(n):
        if match[v] >= 0:
            continue
        nb = idx[ptr[v] : ptr[v + 1]]
        free = match[nb] < 0
        if free.any():
            cand = nb[free]
            u = cand[np.argmax(w[ptr[v] : ptr[v + 1]][free])]
            match[v], match[u] = u, v
        else:
            match[v] = v
    _, cmap = np.unique(np.minimum(np.arange(n), match), return_inverse=True)
    return cmap


def _coarsen(adj, vwgt, cmap):
    n, nc = adj.shape[0], int(cmap.max()) + 1
    agg = sp.csr_matrix((np.ones(n), (np.arange(n), cmap)), shape=(n, nc))
    coarse = (agg.T @ adj @ agg).tocsr()
    coarse.setdiag(0)
    coarse.eliminate_zeros()
    coarse.sort_indices()
    return coarse, np.bincount(cmap, weights=vwgt, minlength=nc)


def _fm_refine(adj, vwgt, part, target0, tol, max_passes=8, patience=50):
    """Fiduccia-Mattheyses boundary refinement of a two-way split.

    ``part`` is modified in place. A state is feasible when the weight of
    side 0 lies within ``tol`` of ``target0``; feasible states are ranked by
    cut, infeasible ones by their imbalance.
    """
    ptr, idx, w = adj.indptr, adj.indices, adj.data
    n = adj.shape[0]
    rows = np.repeat(np.arange(n), np.diff(ptr))
    for _ in range(max_passes):
        same = part[rows] == part[idx]
        gain = np.bincount(rows, weights=np.where(same, -w, w), minlength=n)
        w0 = float(vwgt[part == 0].sum())
        cut = _cut(adj, part)
        locked = np.zeros(n, dtype=bool)
        heaps: list[list] = [[], []]
        boundary = np.flatnonzero(np.bincount(rows, weights=~same, minlength=n) > 0)
        for v in boundary:
            heapq.heappush(heaps[part[v]], (-gain[v], int(v)))

        def score(w0_, cut_):
            imb = abs(w0_ - target0)
            return (0, cut_) if imb <= tol else (1, imb)

        best, best_len = score(w0, cut), 0
        moves: list[int] = []
        since_best = 0
        while since_best < patience:
            choice = None
            for side in (0, 1):
                h = heaps[side]
                while h and (locked[h[0][1]] or part[h[0][1]] != side or -h[0][0] != gain[h[0][1]]):
                    heapq.heappop(h)
                if not h:
                    continue
                v = h[0][1]
                new_w0 = w0 - vwgt[v] if side == 0 else w0 + vwgt[v]
                if abs(new_w0 - target0) > max(tol, abs(w0 - target0)):
                    continue
                if choice is None or gain[v] > gain[choice]:
                    choice = v
            if choice is None:
                break
            v = choice
            side = part[v]
            heapq.heappop(heaps[side])
            part[v] = 1 - side
            w0 += -vwgt[v] if side == 0 else vwgt[v]
            cut -= gain[v]
            gain[v] = -gain[v]
            locked[v] = True
            moves.append(v)
            for j in range(ptr[v], ptr[v + 1]):
                u = idx[j]
                if locked[u]:
                    continue
                gain[u] += -2 * w[j] if part[u] == part[v] else 2 * w[j]
                heapq.heappush(heaps[part[u]], (-gain[u], int(u)))
            sc = score(w0, cut)
            if sc < best:
                best, best_len, since_best = sc, len(moves), 0
            else:
                since_best += 1
        for v in moves[best_len:]:
            part[v] = 1 - part[v]
        if best_len == 0:
            break
    return part


def _bfs_split(adj, degree, vwgt, target0, rng):
    # grow side 0 along breadth-first level sets until it carries target0
    verts = np.arange(adj.shape[0])
    first, second, _ = _bisect(adj, degree, verts, rng, None, vwgt=vwgt, target0=target0)
    part = np.ones(adj.shape[0], dtype=np.int64)
    part[first] = 0
    return part


def _merge_fragments(adj, part):
    # every side keeps only its largest component; stray pieces join the other side
    for side in (0, 1):
        verts = np.flatnonzero(part == side)
        if verts.size == 0:
            continue
        ncomp, label = connected_components(adj[verts][:, verts], directed=False)
        if ncomp > 1:
            keep = np.argmax(np.bincount(label))
            part[verts[label != keep]] = 1 - side
    return part


def _multilevel_bisect(adj, vwgt, target0, tol, rng, coarse_size=80, tries=4):
    levels = []
    g, gw = adj, vwgt
    while g.shape[0] > coarse_size:
        cmap = _match_heavy_edges(g, rng)
        if cmap.max() + 1 > 0.9 * g.shape[0]:
            break
        levels.append((g, gw, cmap))
        g, gw = _coarsen(g, gw, cmap)
    degree = np.diff(g.indptr)
    best = None
    for _ in range(tries):
        part = _fm_refine(g, gw, _bfs_split(g, degree, gw, target0, rng), target0, tol)
        imb = abs(float(gw[part == 0].sum()) - target0)
        key = (imb > tol, _cut(g, part), imb)
        if best is None or key < best[0]:
            best = (key, part)
    part = best[1]
    for g, gw, cmap in reversed(levels):
        part = _fm_refine(g, gw, part[cmap].copy(), target0, tol)
    # merging fragments can unbalance the split; refine again and re-merge
    for _ in range(3):
        merged = _merge_fragments(adj, part.copy())
        if np.array_equal(merged, part):
            return part
        part = _fm_refine(adj, vwgt, merged, target0, tol)
    return _merge_fragments(adj, part)


def kway_partition(
    A: SparseSpd,
    t: int,
    seed: int = 0,
    base_t: int = BASE_DOMAINS,
    method: str = "multilevel",
    imbalance: float = 0.004,
) -> Partition:
    """Recursive graph bisection into ``t`` (a power of two) balanced domains.

    ``method="bfs"`` orders each subgraph's vertices by breadth-first level
    from a pseudo-peripheral vertex and cuts the ordering in half.
    ``method="multilevel"`` (default) coarsens the subgraph by heavy-edge
    matching, makes the same level-set cut on the coarsest graph, and
    refines the cut with Fiduccia-Mattheyses passes while projecting back;
    each bisection keeps its halves within ``imbalance`` (relative) of
    equal size. A disconnected subgraph is always cut by level order and
    sets ``Partition.fallback``.

    Domain ids follow the recursion, so domains ``2i`` and ``2i+1`` are
    siblings and ``kway_partition(A, t)`` equals
    ``kway_partition(A, 2t).coarsen(t)``.
    """
    n = A.n
    if not 1 <= t <= n:
        raise ValueError(f"t must lie in [1, {n}]")
    if t & (t - 1):
        raise ValueError("t must be a power of two")
    if method not in ("bfs", "multilevel"):
        raise ValueError(f"unknown method {method!r}")
    adj = A.csr.copy()
    adj.setdiag(0)
    adj.eliminate_zeros()
    adj = adj.tocsr()
    adj.data[:] = 1.0
    degree = np.diff(adj.indptr)

    domain_of = np.zeros(n, dtype=np.int64)
    fallback = False
    parts = [np.arange(n)]
    paths = [()]
    for level in range(t.bit_length() - 1):
        leaves = t >> (level + 1)
        new_parts, new_paths = [], []
        for verts, path in zip(parts, paths):
            rng = np.random.default_rng([seed, *path])
            sub = adj[verts][:, verts].tocsr() if method == "multilevel" else None
            if sub is None or connected_components(sub, directed=False)[0] > 1:
                # disconnected pieces are concatenated in level order and cut by size
                left, right, fb = _bisect(adj, degree, verts, rng, path)
            else:
                sub.sort_indices()
                fb = False
                target0 = verts.size // 2
                tol = max(1.0, imbalance * verts.size)
                side = _multilevel_bisect(sub, np.ones(verts.size), target0, tol, rng)
                n0 = int((side == 0).sum())
                if abs(n0 - target0) > tol or min(n0, verts.size - n0) < leaves:
                    # each half must still hold one vertex per final domain
                    left, right, _ = _bisect(adj, degree, verts, rng, path)
                else:
                    left, right = verts[side == 0], verts[side == 1]
            fallback |= fb
            new_parts += [np.sort(left), np.sort(right)]
            new_paths += [path + (0,), path + (1,)]
        parts, paths = new_parts, new_paths
    for d, verts in enumerate(parts):
        domain_of[verts] = d
    return Partition(t, domain_of, base_t, fallback)


def reorder(A: SparseSpd, P: Partition) -> tuple[SparseSpd, np.ndarray]:
    """Symmetric permutation making each domain contiguous.

    Returns the permuted matrix and ``perm`` (``perm[new] = old``); a vector
    ``y`` in the new ordering maps back via ``x[perm] = y``.
    """
    perm = P.ordering()
    B = A.csr[perm][:, perm]
    return SparseSpd.from_scipy(B), perm


def split_T(r: np.ndarray, P: Partition) -> np.ndarray:
    """``n x t`` block whose column ``i`` is ``r`` restricted to domain ``i``."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (P.n,):
        raise ValueError("vector length does not match partition")
    out = np.zeros((P.n, P.t), order="F")
    for i, (a, b) in enumerate(P.domain_ranges):
        out[a:b, i] = r[a:b]
    return out


def write_partition(path: str | os.PathLike, P: Partition) -> None:
    """One line per row: the 0-based domain index."""
    np.savetxt(path, P.domain_of, fmt="%d")


def read_partition(path: str | os.PathLike, n: int | None = None, base_t: int = BASE_DOMAINS) -> Partition:
    dom = np.loadtxt(path, dtype=np.int64, ndmin=1)
    if n is not None and dom.size != n:
        raise ValueError(f"partition file has {dom.size} rows, matrix has {n}")
    return Partition(int(dom.max()) + 1, dom, base_t)
