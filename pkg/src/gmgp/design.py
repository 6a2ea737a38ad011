"""Experimental design for simulator DAGs.

Sliced Latin hypercubes supply nested designs: the full point set is a
Latin hypercube on n*M fine bins whose M slices of n points are each Latin
hypercubes on the n coarse bins. Node designs are unions of slices chosen
so that every node's design contains the designs of all its descendants,
the nestedness the recursive predictor requires. Budgets are split across
nodes by minimizing an error proxy that discounts a node's contribution by
the graph distance to the root.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .dag import MultiFidelityDag, validate as validate_dag
from .errors import (
    BudgetTooSmall,
    EmptyDesign,
    SizeMonotonicityViolated,
    SizeNotMultiple,
    UnknownNode,
)

__all__ = [
    "Slhd",
    "generate_slhd",
    "DesignPlan",
    "nested_bfs_design",
    "AllocationResult",
    "allocate_sizes",
    "phi_criterion",
    "fill_distance",
]


# ---------------------------------------------------------------------------
# Sliced Latin hypercube designs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Slhd:
    """A sliced Latin hypercube: ``n_slices`` blocks of ``n`` points each.

    ``points`` stacks the slices contiguously, slice c occupying rows
    [c*n, (c+1)*n). The whole array is a Latin hypercube on n*n_slices bins
    per dimension and every slice is one on n bins.
    """

    points: np.ndarray
    n: int
    n_slices: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[0] != self.n * self.n_slices:
            raise ValueError(
                f"expected {self.n * self.n_slices} rows, got {pts.shape}"
            )

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def slice(self, c: int) -> np.ndarray:
        if not 0 <= c < self.n_slices:
            raise IndexError(f"slice {c} out of range [0, {self.n_slices})")
        return self.points[c * self.n:(c + 1) * self.n]


def _min_sq_dist(sq: np.ndarray) -> float:
    return float(np.min(sq))


def _pairwise_sq(points: np.ndarray) -> np.ndarray:
    n = points.shape[0]
    sq = np.zeros((n, n))
    for l in range(points.shape[1]):
        d = points[:, l, None] - points[None, :, l]
        sq += d * d
    np.fill_diagonal(sq, np.inf)
    return sq


def _within_min(sq: np.ndarray, n: int, n_slices: int) -> float:
    best = np.inf
    for c in range(n_slices):
        block = sq[c * n:(c + 1) * n, c * n:(c + 1) * n]
        if block.shape[0] > 1:
            best = min(best, float(np.min(block)))
    return best


def generate_slhd(n_slices: int, n: int, dim: int, seed: int = 0,
                  n_proposals: int = 10000) -> Slhd:
    """Random sliced Latin hypercube with maximin refinement: ``n_slices``
    slices of ``n`` points each in ``dim`` dimensions.

    Construction, per dimension: an n x n_slices table whose row i is a
    random permutation of the fine levels inside coarse bin i, followed by
    an independent shuffle of every column; slice c reads off column c, so
    it hits every coarse bin once while the table as a whole uses each
    fine level exactly once. Points are jittered uniformly inside their
    fine bin.

    Refinement proposes swaps of one coordinate between two points of the
    same slice (which preserves both Latin properties) and accepts when the
    pair (global minimum distance, within-slice minimum distance) improves
    lexicographically.
    """
    if n < 1 or n_slices < 1 or dim < 1:
        raise ValueError("n, n_slices and dim must be positive")
    rng = np.random.default_rng(seed)
    total = n * n_slices
    pts = np.empty((total, dim))
    for l in range(dim):
        table = np.empty((n, n_slices), dtype=np.int64)
        for i in range(n):
            table[i] = rng.permutation(n_slices) + i * n_slices
        for c in range(n_slices):
            table[:, c] = rng.permutation(table[:, c])
        for c in range(n_slices):
            u = rng.random(n)
            pts[c * n:(c + 1) * n, l] = (table[:, c] + u) / total
    if total > 1 and n_proposals > 0:
        _refine_maximin(pts, n, n_slices, rng, n_proposals)
    return Slhd(points=pts, n=n, n_slices=n_slices)


def _refine_maximin(pts: np.ndarray, n: int, n_slices: int,
                    rng: np.random.Generator, n_proposals: int) -> None:
    if n < 2:
        return
    sq = _pairwise_sq(pts)
    best_global = _min_sq_dist(sq)
    best_within = _within_min(sq, n, n_slices)
    for _ in range(n_proposals):
        c = int(rng.integers(n_slices))
        i, j = rng.choice(n, size=2, replace=False)
        a, b = c * n + int(i), c * n + int(j)
        l = int(rng.integers(pts.shape[1]))
        if pts[a, l] == pts[b, l]:
            continue
        old_a, old_b = sq[a].copy(), sq[b].copy()
        pts[a, l], pts[b, l] = pts[b, l], pts[a, l]
        # recompute the two affected rows from scratch; the O(n*d) cost is
        # dwarfed by the global minimum scan below
        for r in (a, b):
            diff = pts[r] - pts
            row = np.sum(diff * diff, axis=1)
            row[r] = np.inf
            sq[r, :] = row
            sq[:, r] = row
        g = _min_sq_dist(sq)
        w = _within_min(sq, n, n_slices)
        if (g, w) > (best_global, best_within):
            best_global, best_within = g, w
        else:
            pts[a, l], pts[b, l] = pts[b, l], pts[a, l]
            sq[a, :] = old_a
            sq[:, a] = old_a
            sq[b, :] = old_b
            sq[:, b] = old_b
            sq[a, b] = sq[b, a] = old_a[b]


# ---------------------------------------------------------------------------
# Nested designs over a DAG
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DesignPlan:
    """Slice-built nested designs, one per node.

    ``fresh`` maps each node to the slice indices it contributed; a node's
    design is the union of its own fresh slices and those of all its
    descendants, so designs shrink along every edge toward the root.
    """

    dag: MultiFidelityDag
    slhd: Slhd
    sizes: dict[int, int]
    fresh: dict[int, tuple[int, ...]]

    def slice_indices(self, t: int) -> tuple[int, ...]:
        if t not in self.fresh:
            raise UnknownNode(f"unknown node {t}")
        own = set(self.fresh[t])
        for u in self.dag.descendants(t):
            own.update(self.fresh[u])
        return tuple(sorted(own))

    def design(self, t: int) -> np.ndarray:
        idx = self.slice_indices(t)
        return np.vstack([self.slhd.slice(c) for c in idx])


def nested_bfs_design(dag: MultiFidelityDag, sizes: dict[int, int], dim: int,
                      seed: int = 0, n_proposals: int = 10000) -> DesignPlan:
    """Build nested node designs from one sliced Latin hypercube.

    Slice size is the root's run count; every node size must be a positive
    multiple of it. Fresh slices are handed out contiguously in BFS order
    from the root along reversed edges (ties by ascending id), each node
    taking enough to top up what it inherits from its descendants. The
    hypercube is generated with sum(n_t / n_root) slices, so trailing
    slices stay unused when inheritance overlaps.
    """
    validate_dag(dag)
    ids = list(dag.node_ids)
    missing = [t for t in ids if t not in sizes]
    if missing:
        raise UnknownNode(f"sizes missing for nodes {missing}")
    n_root = sizes[dag.root_id]
    if n_root < 1:
        raise EmptyDesign("root size must be at least 1")
    mult: dict[int, int] = {}
    for t in ids:
        if sizes[t] < 1:
            raise EmptyDesign(f"node {t} has size {sizes[t]}")
        if sizes[t] % n_root != 0:
            raise SizeNotMultiple(
                f"size {sizes[t]} of node {t} is not a multiple of the "
                f"root size {n_root}"
            )
        mult[t] = sizes[t] // n_root
    for t in ids:
        for c in dag.children(t):
            if sizes[t] < sizes[c]:
                raise SizeMonotonicityViolated(
                    f"node {t} has fewer runs ({sizes[t]}) than its "
                    f"child {c} ({sizes[c]})"
                )
    order = _reverse_bfs(dag)
    fresh: dict[int, tuple[int, ...]] = {}
    cursor = 0
    for t in order:
        inherited = sum(len(fresh[u]) for u in dag.descendants(t))
        need = mult[t] - inherited
        if need < 0:
            raise SizeMonotonicityViolated(
                f"node {t} needs {mult[t]} slices but already inherits "
                f"{inherited} from its descendants"
            )
        fresh[t] = tuple(range(cursor, cursor + need))
        cursor += need
    n_slices = sum(mult.values())
    slhd = generate_slhd(n_slices, n_root, dim, seed=seed,
                         n_proposals=n_proposals)
    return DesignPlan(dag=dag, slhd=slhd, sizes=dict(sizes), fresh=fresh)


def _reverse_bfs(dag: MultiFidelityDag) -> list[int]:
    """Breadth-first order from the root along reversed edges, neighbor
    ties broken by ascending node id."""
    order = [dag.root_id]
    seen = {dag.root_id}
    queue = [dag.root_id]
    while queue:
        t = queue.pop(0)
        for p in dag.parents(t):
            if p not in seen:
                seen.add(p)
                order.append(p)
                queue.append(p)
    return order


# ---------------------------------------------------------------------------
# Budget allocation
# ---------------------------------------------------------------------------

def phi_criterion(dag: MultiFidelityDag, sizes: dict[int, int | float],
                  rho: float, nu: float, dim: int) -> float:
    """Error proxy sum_t rho^{|Des(t)|} n_t^{-nu/dim}: the further a node
    sits from the root, the more its contribution is discounted."""
    total = 0.0
    for t in dag.node_ids:
        if t not in sizes:
            raise UnknownNode(f"sizes missing node {t}")
        n_t = float(sizes[t])
        if n_t <= 0:
            raise EmptyDesign(f"node {t} has size {sizes[t]}")
        g = len(dag.descendants(t))
        total += (rho ** g) * n_t ** (-nu / dim)
    return total


@dataclass(frozen=True)
class AllocationResult:
    """Budget split: the real-valued stationary solution and an integer
    rounding compatible with slice-based nested designs."""

    real_sizes: dict[int, float]
    sizes: dict[int, int]
    phi_real: float
    phi: float
    cost: float
    budget: float


def allocate_sizes(dag: MultiFidelityDag, budget: float, rho: float,
                   nu: float = 2.5, dim: int = 1) -> AllocationResult:
    """Split a budget across nodes to minimize the error proxy.

    The continuous optimum spends proportionally to
    (rho^{|Des(t)|} / cost_t)^{dim/(dim+nu)}. Rounding scans every feasible
    root size, floors the rest to multiples, repairs edge monotonicity, then
    spends leftover budget greedily on whole slices by best proxy decrease
    per unit cost; the scan keeps the cheapest-proxy feasible candidate.
    """
    validate_dag(dag)
    if rho <= 0 or nu <= 0 or dim < 1:
        raise ValueError("rho, nu and dim must be positive")
    ids = list(dag.node_ids)
    costs = {t: dag.cost(t) for t in ids}
    base_cost = sum(costs.values())
    if budget < base_cost:
        raise BudgetTooSmall(
            f"budget {budget} cannot cover one run of every node "
            f"(cost {base_cost})"
        )
    expo = dim / (dim + nu)
    weight = {t: (rho ** len(dag.descendants(t)) / costs[t]) ** expo for t in ids}
    scale = budget / sum(costs[t] * weight[t] for t in ids)
    real = {t: scale * weight[t] for t in ids}

    root = dag.root_id
    order = dag.fit_order()
    best: tuple[float, dict[int, int], float] | None = None
    for n_root in range(1, int(budget // base_cost) + 1):
        mult = {t: max(1, int(real[t] // n_root)) for t in ids}
        mult[root] = 1
        # monotonicity repair, children before parents
        for t in reversed(order):
            for c in dag.children(t):
                mult[t] = max(mult[t], mult[c])
        sizes = {t: mult[t] * n_root for t in ids}
        cost = sum(costs[t] * sizes[t] for t in ids)
        if cost > budget:
            continue
        _greedy_spend(dag, sizes, n_root, costs, budget - cost, rho, nu, dim)
        cost = sum(costs[t] * sizes[t] for t in ids)
        phi = phi_criterion(dag, sizes, rho, nu, dim)
        if best is None or phi < best[0]:
            best = (phi, sizes, cost)
    if best is None:
        raise BudgetTooSmall(f"no integer allocation fits budget {budget}")
    phi, sizes, cost = best
    return AllocationResult(
        real_sizes=real, sizes=sizes,
        phi_real=phi_criterion(dag, real, rho, nu, dim),
        phi=phi, cost=cost, budget=float(budget),
    )


def _greedy_spend(dag: MultiFidelityDag, sizes: dict[int, int], n_root: int,
                  costs: dict[int, float], residual: float, rho: float,
                  nu: float, dim: int) -> None:
    """Spend leftover budget on single-slice increments of non-root nodes,
    keeping parent sizes at least as large as child sizes; picks the largest
    proxy decrease per unit cost, ties by ascending node id."""
    root = dag.root_id
    while True:
        best_gain, best_t = 0.0, None
        for t in sorted(sizes):
            if t == root:
                continue
            step_cost = costs[t] * n_root
            if step_cost > residual:
                continue
            ok = all(sizes[p] >= sizes[t] + n_root for p in dag.parents(t))
            if not ok:
                continue
            g = len(dag.descendants(t))
            gain = (rho ** g) * (
                sizes[t] ** (-nu / dim) - (sizes[t] + n_root) ** (-nu / dim)
            ) / step_cost
            if gain > best_gain:
                best_gain, best_t = gain, t
        if best_t is None:
            return
        sizes[best_t] += n_root
        residual -= costs[best_t] * n_root


# ---------------------------------------------------------------------------
# Space-filling diagnostics
# ---------------------------------------------------------------------------

def fill_distance(design, n_candidates: int = 8192, seed: int = 0) -> float:
    """Largest gap of the design in the unit cube: the maximum over a
    scrambled Sobol candidate cloud of the distance to the nearest design
    point. The candidate seed is fixed so values are comparable across
    calls."""
    D = np.atleast_2d(np.asarray(design, dtype=float))
    if D.shape[0] == 0:
        raise EmptyDesign("cannot measure an empty design")
    m = 1 << max(1, int(np.ceil(np.log2(n_candidates))))
    cand = qmc.Sobol(d=D.shape[1], scramble=True, seed=seed).random(m)[:n_candidates]
    sq = np.zeros((cand.shape[0], D.shape[0]))
    for l in range(D.shape[1]):
        diff = cand[:, l, None] - D[None, :, l]
        sq += diff * diff
    best = np.min(sq, axis=1)
    return float(np.sqrt(np.max(best)))
