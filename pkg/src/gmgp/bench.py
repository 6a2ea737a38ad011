"""Synthetic multi-fidelity benchmark families and the experiment harness.

Three function families over the unit cube (a 1-d piecewise pair around the
Forrester curve, a 5-d Friedman variant, and a 20-d polynomial whose lower
fidelities are sliding-window averages), the RMSE / probabilistic-RMSE
metrics, a catalog of six predictive models, and deterministic experiment
runners producing per-seed metric tables.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .dag import MultiFidelityDag
from .design import allocate_sizes, generate_slhd, nested_bfs_design
from .dgmgp import (
    FittedDeepNode,
    McConfig,
    fit_dgmgp,
    p_rmse_samples,
    predict_dgmgp,
)
from .errors import EmptyInput, NegativeVariance, OutOfDomain, UnknownNode
from .gmgp import GmgpDataBundle, fit_rgmgp, predict_rgmgp
from .gp import MleConfig, NodeDataset, TrendBasis, fit_gp, gp_posterior

__all__ = [
    "TestFamily",
    "forrester_1d",
    "friedman_5d",
    "welch_20d",
    "load_family",
    "eval_family",
    "window_average",
    "rmse",
    "p_rmse_gaussian",
    "p_rmse_samples",
    "MetricReport",
    "HarnessConfig",
    "MODEL_NAMES",
    "prefix_nested_designs",
    "nested_designs_for",
    "run_experiment",
    "run_design_study",
    "run_from_config",
    "plan_from_config",
]

MODEL_NAMES = (
    "HF-GP", "KO-path", "KO-misspecified", "NARGP-chain", "r-GMGP", "d-GMGP",
)

_Z95 = 1.959963984540054


# ---------------------------------------------------------------------------
# Window averaging
# ---------------------------------------------------------------------------

def _qmc_unit_points(n: int, dim: int) -> np.ndarray:
    """Unscrambled Sobol points shifted by half a fine cell, so each
    coordinate averages to exactly one half and linear integrands are
    reproduced to machine precision."""
    m = 1 << max(0, (n - 1).bit_length())
    u = qmc.Sobol(d=dim, scramble=False).random(m)[:n]
    return u + 0.5 / m


def _window_points(X: np.ndarray, half: np.ndarray, lower, upper,
                   u: np.ndarray) -> np.ndarray:
    """Quadrature nodes of the axis-aligned window around each row of X,
    clipped to [lower, upper]; shape (n, q, d)."""
    lo = X - half
    hi = X + half
    if lower is not None:
        lo = np.maximum(lo, lower)
    if upper is not None:
        hi = np.minimum(hi, upper)
    return lo[:, None, :] + u[None, :, :] * (hi - lo)[:, None, :]


def window_average(f: Callable[[np.ndarray], np.ndarray], x, half_widths,
                   qmc_points: int = 128, lower=None, upper=None) -> float:
    """Deterministic quasi-Monte-Carlo average of f over the box
    x +- half_widths, intersected with [lower, upper] when bounds are given.

    A zero half-width collapses that dimension to the point value, so an
    all-zero window returns f(x) exactly.
    """
    x = np.asarray(x, dtype=float).ravel()
    half = np.broadcast_to(np.asarray(half_widths, dtype=float), x.shape)
    if np.any(half < 0):
        raise ValueError("half widths must be non-negative")
    u = _qmc_unit_points(qmc_points, x.shape[0])
    pts = _window_points(x[None, :], half[None, :], lower, upper, u)[0]
    return float(np.mean(np.asarray(f(pts), dtype=float)))


# ---------------------------------------------------------------------------
# Test-function families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestFamily:
    """A DAG of deterministic simulators on the unit cube.

    Functions take an (n, d) array of unit-cube rows and return (n,) values;
    families on another native domain rescale internally. ``test_kind`` is
    "grid" (evenly spaced, 1-d) or "uniform" (random per seed).

    ``design_protocol`` names the nested training-design generator the
    harness uses: "slhd" routes through the sliced-hypercube BFS plan
    (requires every node size to be a multiple of the root size), while
    "iid-prefix" and "maximin-prefix" take per-node prefixes of one master
    design whose head is respectively an iid uniform sample or a greedy
    maximin fill. Prefix masters accept arbitrary size combinations.
    """

    name: str
    dag: MultiFidelityDag
    dim: int
    node_functions: dict[int, Callable[[np.ndarray], np.ndarray]]
    default_sizes: dict[int, int]
    default_n_test: int
    test_kind: str
    design_protocol: str = "iid-prefix"


def eval_family(family: TestFamily, node_id: int, x) -> np.ndarray:
    """Evaluate one node's simulator at unit-cube rows; scalars in, scalar
    out."""
    if node_id not in family.node_functions:
        raise UnknownNode(f"family {family.name} has no node {node_id}")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim <= 1
    X = np.atleast_2d(x)
    if X.shape[1] != family.dim:
        raise OutOfDomain(
            f"{family.name} expects {family.dim} columns, got {X.shape[1]}"
        )
    if np.any(X < -1e-12) or np.any(X > 1 + 1e-12):
        raise OutOfDomain("points must lie in the unit cube")
    y = family.node_functions[node_id](X)
    return float(y[0]) if scalar else y


def _forrester_h(X: np.ndarray) -> np.ndarray:
    x = X[:, 0]
    return (6 * x - 2) ** 2 * np.sin(12 * x - 4)


def forrester_1d() -> TestFamily:
    """Three 1-d functions on a two-parents-one-root tree: the root is the
    Forrester curve, and each low-fidelity variant tracks it well on one
    half of [0, 1] and poorly on the other."""

    def l1(X):
        x = X[:, 0]
        h = _forrester_h(X)
        return np.where(
            x < 0.5,
            h + (x - 0.5),
            h + (x - 0.5) * np.cos(40 * x) * (5 * x - 1) ** 2,
        )

    def l2(X):
        x = X[:, 0]
        h = _forrester_h(X)
        return np.where(
            x <= 0.5,
            h + 2 * (x - 0.5) * np.cos(10 * x) * (10 * x - 1) ** 2,
            h - (x - 0.5),
        )

    dag = MultiFidelityDag(
        nodes=((1, "L1", 2.0), (2, "L2", 2.0), (3, "H", 32.0)),
        edges=((1, 3), (2, 3)),
        root_id=3,
    )
    return TestFamily(
        name="Forrester1d", dag=dag, dim=1,
        node_functions={1: l1, 2: l2, 3: _forrester_h},
        default_sizes={1: 15, 2: 15, 3: 8},
        default_n_test=1000, test_kind="grid",
    )


def friedman_5d() -> TestFamily:
    """Friedman's 5-d function as the root, with two low-fidelity variants
    that perturb the oscillation frequency and the additive terms."""

    def h(X):
        return (10 * np.sin(np.pi * X[:, 0] * X[:, 1])
                + 20 * (X[:, 2] - 0.5) ** 2 + 10 * X[:, 3] + 5 * X[:, 4])

    def l1(X):
        return (10 * np.sin(4 * X[:, 0] * X[:, 1])
                + 20 * (X[:, 2] - 0.5) ** 2 + 10 * X[:, 3] + 6 * X[:, 4])

    def l2(X):
        return (10 * np.sin(3 * X[:, 0] * X[:, 1])
                + 20 * (0.8 * X[:, 2] - 0.5) ** 2
                + 10 * (X[:, 3] - 0.1) + 5 * X[:, 4])

    dag = MultiFidelityDag(
        nodes=((1, "L1", 2.0), (2, "L2", 2.0), (3, "H", 64.0)),
        edges=((1, 3), (2, 3)),
        root_id=3,
    )
    return TestFamily(
        name="Friedman5d", dag=dag, dim=5,
        node_functions={1: l1, 2: l2, 3: h},
        default_sizes={1: 40, 2: 40, 3: 10},
        default_n_test=500, test_kind="uniform",
        design_protocol="slhd",
    )


def _welch_h_native(Xn: np.ndarray) -> np.ndarray:
    x = {k: Xn[:, k - 1] for k in (1, 2, 3, 4, 5, 6, 7, 9, 10, 11, 12, 13,
                                   14, 15, 17, 18, 19, 20)}
    return (5 * x[12] / (1 + x[1]) + 5 * (x[4] - x[20]) ** 2 + x[5]
            + 40 * x[19] ** 3 - 5 * x[19] + 0.05 * x[2] + 0.08 * x[3]
            - 0.03 * x[6] + 0.03 * x[7] - 0.09 * x[9] - 0.01 * x[10]
            - 0.07 * x[11] + 0.25 * x[13] ** 2 - 0.04 * x[14]
            + 0.06 * x[15] - 0.01 * x[17] - 0.03 * x[18])


def welch_20d(window_mode: str = "absolute", qmc_points: int = 128,
              chunk: int = 32) -> TestFamily:
    """The 20-d polynomial family on native domain [-0.5, 0.5]^20.

    The first medium fidelity averages the root over a sliding window of
    half-width 0.1 in every dimension; the two low fidelities average that
    again with half-width 0.15 over the ten odd (respectively even)
    dimensions, a two-layer quadrature. The second medium fidelity is the
    affine degradation 1.2*H - 1. Windows clip at the domain boundary.
    ``window_mode`` "proportional" reads the half-widths as fractions of
    the coordinate magnitude instead of absolute lengths.
    """
    if window_mode not in ("absolute", "proportional"):
        raise ValueError(f"unknown window mode {window_mode!r}")
    d = 20
    lo_dom, hi_dom = -0.5, 0.5
    u_inner = _qmc_unit_points(qmc_points, d)
    odd = np.arange(0, d, 2)    # native indices of x1, x3, ..., x19
    even = np.arange(1, d, 2)

    def half_at(Xn: np.ndarray, base: float, dims) -> np.ndarray:
        h = np.zeros_like(Xn)
        if window_mode == "absolute":
            h[:, dims] = base
        else:
            h[:, dims] = base * np.abs(Xn[:, dims])
        return h

    def m1_native(Xn: np.ndarray) -> np.ndarray:
        out = np.empty(Xn.shape[0])
        for s in range(0, Xn.shape[0], chunk * qmc_points):
            B = Xn[s:s + chunk * qmc_points]
            pts = _window_points(B, half_at(B, 0.1, slice(None)),
                                 lo_dom, hi_dom, u_inner)
            out[s:s + B.shape[0]] = _welch_h_native(
                pts.reshape(-1, d)
            ).reshape(B.shape[0], qmc_points).mean(axis=1)
        return out

    def low_native(Xn: np.ndarray, dims) -> np.ndarray:
        out = np.empty(Xn.shape[0])
        for s in range(0, Xn.shape[0], chunk):
            B = Xn[s:s + chunk]
            pts = _window_points(B, half_at(B, 0.15, dims),
                                 lo_dom, hi_dom, u_inner)
            out[s:s + B.shape[0]] = m1_native(
                pts.reshape(-1, d)
            ).reshape(B.shape[0], qmc_points).mean(axis=1)
        return out

    def unit(f):
        return lambda X: f(X - 0.5)

    dag = MultiFidelityDag(
        nodes=((1, "L1", 2.0), (2, "L2", 2.0), (3, "M1", 8.0),
               (4, "M2", 8.0), (5, "H", 32.0)),
        edges=((1, 3), (2, 3), (3, 5), (4, 5)),
        root_id=5,
    )
    return TestFamily(
        name="Welch20d", dag=dag, dim=d,
        node_functions={
            1: unit(lambda Xn: low_native(Xn, odd)),
            2: unit(lambda Xn: low_native(Xn, even)),
            3: unit(m1_native),
            4: unit(lambda Xn: 1.2 * _welch_h_native(Xn) - 1.0),
            5: unit(_welch_h_native),
        },
        default_sizes={1: 200, 2: 200, 3: 160, 4: 160, 5: 40},
        default_n_test=500, test_kind="uniform",
        design_protocol="maximin-prefix",
    )


_FAMILY_BUILDERS = {
    "forrester1d": forrester_1d,
    "friedman5d": friedman_5d,
    "welch20d": welch_20d,
}


def load_family(name: str) -> TestFamily:
    key = name.replace("_", "").replace("-", "").lower()
    if key not in _FAMILY_BUILDERS:
        raise ValueError(
            f"unknown family {name!r}; choose from Forrester1d, Friedman5d, "
            "Welch20d"
        )
    return _FAMILY_BUILDERS[key]()


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise EmptyInput("rmse of zero points")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def p_rmse_gaussian(mean, var, truth) -> float:
    """Root of the posterior-expected squared error under a Gaussian
    posterior: sqrt(mean((mu - y)^2 + var))."""
    mean = np.asarray(mean, dtype=float).ravel()
    var = np.asarray(var, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if mean.size == 0:
        raise EmptyInput("p-RMSE of zero points")
    if np.any(var < 0):
        raise NegativeVariance("variance entries must be non-negative")
    return float(np.sqrt(np.mean((mean - truth) ** 2 + var)))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

_METRIC_KEYS = ("rmse", "p_rmse", "seconds")


@dataclass(frozen=True)
class MetricReport:
    """Per-seed metric rows plus plot-ready prediction curves.

    Rows are dicts with at least (model, seed, rmse, p_rmse); sweep runs add
    a grouping key such as n_root, budget or strategy. ``medians`` collapses
    seeds within each group.
    """

    rows: tuple[dict, ...]
    curves: tuple[dict, ...] = ()

    def group_keys(self) -> list[str]:
        keys: list[str] = []
        for row in self.rows:
            for k in row:
                if k not in _METRIC_KEYS and k != "seed" and k not in keys:
                    keys.append(k)
        return keys

    def medians(self) -> list[dict]:
        keys = self.group_keys()
        groups: dict[tuple, list[dict]] = {}
        for row in self.rows:
            g = tuple(row.get(k) for k in keys)
            groups.setdefault(g, []).append(row)
        out = []
        for g, rows in groups.items():
            rec = dict(zip(keys, g))
            for m in ("rmse", "p_rmse"):
                vals = [r[m] for r in rows if m in r and r[m] is not None]
                rec[f"median_{m}"] = float(np.median(vals)) if vals else None
            rec["n_seeds"] = len(rows)
            out.append(rec)
        return out

    def median(self, metric: str = "rmse", **filters) -> float:
        vals = [
            row[metric] for row in self.rows
            if all(row.get(k) == v for k, v in filters.items())
            and row.get(metric) is not None
        ]
        if not vals:
            raise KeyError(f"no rows match {filters}")
        return float(np.median(vals))


@dataclass(frozen=True)
class HarnessConfig:
    """Fit and propagation settings shared by all models in a run."""

    mle: MleConfig = field(default_factory=MleConfig)
    deep_mle: MleConfig = field(default_factory=lambda: MleConfig(method="lbfgs"))
    mc: McConfig = field(default_factory=McConfig)
    jobs: int = 1


# ---------------------------------------------------------------------------
# Designs for experiments
# ---------------------------------------------------------------------------

def _farthest_point_order(pts: np.ndarray) -> np.ndarray:
    """Greedy ordering whose every prefix is space-filling: start nearest
    the cube center, then repeatedly add the point farthest from the chosen
    set (ties by index)."""
    n = pts.shape[0]
    center = np.full(pts.shape[1], 0.5)
    start = int(np.argmin(np.sum((pts - center) ** 2, axis=1)))
    order = [start]
    dist = np.sum((pts - pts[start]) ** 2, axis=1)
    dist[start] = -np.inf
    for _ in range(n - 1):
        nxt = int(np.argmax(dist))
        order.append(nxt)
        d = np.sum((pts - pts[nxt]) ** 2, axis=1)
        dist = np.minimum(dist, d)
        dist[nxt] = -np.inf
    return np.asarray(order)


def _master_design(n: int, dim: int, seed: int, n_proposals: int = 4000,
                   space_filling_prefixes: bool = False) -> np.ndarray:
    """Maximin Latin hypercube whose prefixes serve as the node designs.

    Row order is random by default, so a prefix is a random subset of the
    hypercube's cells: higher-fidelity nodes get realistic, imperfect
    coverage the way a fresh small design would. The farthest-point
    reordering makes every prefix itself space-filling instead; fixtures
    that need well-conditioned kernel matrices at tiny sizes use it.
    """
    lhd = generate_slhd(1, n, dim, seed=seed, n_proposals=n_proposals)
    if space_filling_prefixes:
        return lhd.points[_farthest_point_order(lhd.points)]
    return lhd.points[np.random.default_rng([seed, 6151]).permutation(n)]


def _maximin_augment(base: np.ndarray, n_extra: int, dim: int,
                     rng: np.random.Generator,
                     n_candidates: int = 4096) -> np.ndarray:
    """Extend ``base`` by ``n_extra`` points, each chosen greedily from a
    uniform candidate pool to maximize the distance to everything chosen
    so far: the additions fill whatever gaps the base design left."""
    cand = rng.random((n_candidates, dim))
    if base.shape[0]:
        d2 = np.sum((cand[:, None, :] - base[None, :, :]) ** 2, axis=2)
        dist = d2.min(axis=1)
    else:
        dist = np.full(n_candidates, np.inf)
    rows = []
    for _ in range(n_extra):
        i = int(np.argmax(dist))
        rows.append(cand[i])
        dist = np.minimum(dist, np.sum((cand - cand[i]) ** 2, axis=1))
    return np.asarray(rows).reshape(n_extra, dim)


def prefix_nested_designs(family: TestFamily, sizes: dict[int, int],
                          seed: int,
                          n_random_head: int | None = None) -> dict[int, np.ndarray]:
    """One shared master design, each node taking a prefix of its size.

    The head of the master (the root's allotment by default) is drawn iid
    uniform, so the scarce high-fidelity design has the realistic, imperfect
    coverage of a plain random sample. The remaining rows fill its gaps by
    greedy maximin augmentation, so the larger low-fidelity prefixes are
    space-filling. Prefixes make every containment hold (equal sizes share
    points exactly), which keeps chain rearrangements of the DAG nested
    too; the price is that same-size siblings see identical designs.
    """
    n_max = max(sizes.values())
    if n_random_head is None:
        n_random_head = sizes[family.dag.root_id]
    rng = np.random.default_rng([seed, 6151])
    head = rng.random((min(n_random_head, n_max), family.dim))
    if n_max > head.shape[0]:
        tail = _maximin_augment(head, n_max - head.shape[0], family.dim, rng)
        master = np.vstack([head, tail])
    else:
        master = head
    return {t: master[: sizes[t]] for t in family.dag.node_ids}


def nested_designs_for(family: TestFamily, sizes: dict[int, int],
                       seed: int) -> dict[int, np.ndarray]:
    """Nested training designs per the family's declared protocol."""
    if family.design_protocol == "slhd":
        plan = nested_bfs_design(family.dag, sizes, family.dim, seed=seed,
                                 n_proposals=2000)
        return {t: plan.design(t) for t in family.dag.node_ids}
    if family.design_protocol == "maximin-prefix":
        return prefix_nested_designs(family, sizes, seed, n_random_head=0)
    if family.design_protocol == "iid-prefix":
        return prefix_nested_designs(family, sizes, seed)
    raise ValueError(
        f"unknown design protocol {family.design_protocol!r}"
    )


def _test_points(family: TestFamily, n_test: int, seed: int) -> np.ndarray:
    if family.test_kind == "grid":
        return np.linspace(0.0, 1.0, n_test)[:, None]
    rng = np.random.default_rng([seed, 7919])
    return rng.random((n_test, family.dim))


def _bundle_from_designs(family: TestFamily, designs: dict[int, np.ndarray],
                         y_cache: dict[int, np.ndarray] | None = None) -> GmgpDataBundle:
    data = {}
    for t, X in designs.items():
        if y_cache is not None and t in y_cache and len(y_cache[t]) >= len(X):
            y = y_cache[t][: len(X)]
        else:
            y = eval_family(family, t, X)
            if y_cache is not None:
                y_cache[t] = y
        data[t] = NodeDataset(X, y)
    return GmgpDataBundle(family.dag, data)


# ---------------------------------------------------------------------------
# Chains through the DAG
# ---------------------------------------------------------------------------

def longest_root_path(dag: MultiFidelityDag) -> list[int]:
    """Deepest directed path ending at the root, ties resolved toward
    ascending node ids."""
    start = min(
        (t for t in dag.node_ids if not dag.parents(t)),
        key=lambda t: (-dag.depth(t), t),
    )
    path = [start]
    node = start
    while node != dag.root_id:
        node = min(
            (c for c in dag.children(node) if dag.depth(c) == dag.depth(node) - 1),
        )
        path.append(node)
    return path


def depth_chain(dag: MultiFidelityDag) -> list[int]:
    """All nodes forced into a single chain ordered by descending depth
    (ties ascending id): the deliberately misspecified total order."""
    return list(dag.fit_order())


def chain_bundle(bundle: GmgpDataBundle, chain: list[int]) -> GmgpDataBundle:
    """Sub-bundle whose DAG is the given chain (same ids, labels, costs)."""
    dag = bundle.dag
    nodes = tuple(
        (t, dag.label(t), dag.cost(t)) for t in chain
    )
    edges = tuple((chain[i], chain[i + 1]) for i in range(len(chain) - 1))
    sub = MultiFidelityDag(nodes=nodes, edges=edges, root_id=chain[-1])
    return GmgpDataBundle(sub, {t: bundle.data[t] for t in chain})


def _chain_bundle_for(family: TestFamily, bundle: GmgpDataBundle,
                      chain: list[int], seed: int) -> GmgpDataBundle:
    """Chain-rearranged data for the single-sequence baselines.

    Prefix protocols stay nested under any rearrangement, so the original
    datasets are reused as-is. Hypercube BFS designs only nest along true
    DAG edges; the chain baselines then get a fresh nested design of the
    same sizes built for the imposed chain, which is how a sequential
    model would actually be deployed when the graph is ignored.
    """
    if family.design_protocol != "slhd":
        return chain_bundle(bundle, chain)
    dag = family.dag
    nodes = tuple((t, dag.label(t), dag.cost(t)) for t in chain)
    edges = tuple((chain[i], chain[i + 1]) for i in range(len(chain) - 1))
    cdag = MultiFidelityDag(nodes=nodes, edges=edges, root_id=chain[-1])
    sizes = {t: bundle.data[t].X.shape[0] for t in chain}
    plan = nested_bfs_design(cdag, sizes, family.dim, seed=seed,
                             n_proposals=2000)
    data = {
        t: NodeDataset(plan.design(t), eval_family(family, t, plan.design(t)))
        for t in chain
    }
    return GmgpDataBundle(cdag, data)


# ---------------------------------------------------------------------------
# Model catalog
# ---------------------------------------------------------------------------

def _rho_basis_for(bundle: GmgpDataBundle) -> str:
    """Position-dependent combination weights when every non-source node
    can afford them: the weight design adds k*(1+dim) columns next to the
    constant trend, and the concentrated fit needs more rows than columns."""
    for t in bundle.dag.node_ids:
        k = len(bundle.dag.parents(t))
        if k and bundle.data[t].X.shape[0] <= k * (1 + bundle.dim) + 1:
            return "constant"
    return "linear"


def _gaussian_row(post, ytest):
    return rmse(post.mean, ytest), p_rmse_gaussian(post.mean, post.variance, ytest)


def _curve_rows(model: str, post, ytest) -> list[dict]:
    if post.samples is not None:
        lo, hi = np.percentile(post.samples, (2.5, 97.5), axis=0)
    else:
        sd = np.sqrt(post.variance)
        lo, hi = post.mean - _Z95 * sd, post.mean + _Z95 * sd
    return [
        {
            "model": model, "point_index": i, "truth": float(ytest[i]),
            "mean": float(post.mean[i]), "q025": float(lo[i]),
            "q975": float(hi[i]),
        }
        for i in range(len(ytest))
    ]


def _run_model(name: str, family: TestFamily, bundle: GmgpDataBundle,
               Xtest: np.ndarray, ytest: np.ndarray, cfg: HarnessConfig,
               reuse: dict[str, dict[int, FittedDeepNode]], seed: int):
    dag = family.dag
    t0 = time.perf_counter()
    if name == "HF-GP":
        gp = fit_gp(bundle.data[dag.root_id], family="SquaredExponential",
                    basis=TrendBasis("constant", family.dim), config=cfg.mle)
        post = gp_posterior(gp, Xtest)
        r, p = _gaussian_row(post, ytest)
    elif name in ("KO-path", "KO-misspecified"):
        chain = longest_root_path(dag) if name == "KO-path" else depth_chain(dag)
        model = fit_rgmgp(_chain_bundle_for(family, bundle, chain, seed),
                          family="Matern52", trend="constant", config=cfg.mle)
        post = predict_rgmgp(model, Xtest)[dag.root_id]
        r, p = _gaussian_row(post, ytest)
    elif name == "NARGP-chain":
        sub = _chain_bundle_for(family, bundle, longest_root_path(dag), seed)
        model = fit_dgmgp(sub, config=cfg.deep_mle,
                          reuse=reuse.setdefault(name, {}))
        _stash_reusable(reuse[name], model)
        post = predict_dgmgp(model, Xtest, cfg.mc, jobs=cfg.jobs)[dag.root_id]
        r, p = rmse(post.mean, ytest), p_rmse_samples(post.samples, ytest)
    elif name == "r-GMGP":
        model = fit_rgmgp(bundle, family="Matern52", trend="constant",
                          config=cfg.mle, rho_basis=_rho_basis_for(bundle))
        post = predict_rgmgp(model, Xtest)[dag.root_id]
        r, p = _gaussian_row(post, ytest)
    elif name == "d-GMGP":
        model = fit_dgmgp(bundle, config=cfg.deep_mle,
                          reuse=reuse.setdefault(name, {}))
        _stash_reusable(reuse[name], model)
        post = predict_dgmgp(model, Xtest, cfg.mc, jobs=cfg.jobs)[dag.root_id]
        r, p = rmse(post.mean, ytest), p_rmse_samples(post.samples, ytest)
    else:
        raise ValueError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
    return post, {
        "rmse": r, "p_rmse": p,
        "seconds": round(time.perf_counter() - t0, 3),
    }


def _stash_reusable(store: dict[int, FittedDeepNode], model) -> None:
    """Within one seed, non-root deep nodes see identical data across the
    root-size sweep, so their fits can be reused verbatim."""
    for t, node in model.nodes.items():
        if t != model.dag.root_id:
            store[t] = node


# ---------------------------------------------------------------------------
# Experiment runners
# ---------------------------------------------------------------------------

def _as_seed_list(seeds) -> list[int]:
    if isinstance(seeds, int):
        return list(range(seeds))
    return [int(s) for s in seeds]


def run_experiment(family: TestFamily, models=MODEL_NAMES, seeds=20,
                   sizes: dict[int, int] | None = None,
                   n_root_values=None, n_test: int | None = None,
                   harness: HarnessConfig | None = None) -> MetricReport:
    """Fit the requested models on fresh designs per seed and score them on
    a common test set.

    ``n_root_values`` sweeps the root sample size while lower nodes keep
    their sizes (and, where possible, their fitted state); the swept root
    design is the prefix of the full-size one, so nestedness survives the
    sweep. Designs come from the family's declared protocol and all
    nestedness requirements hold including for chain rearrangements; the
    first seed also emits plot-ready prediction curves.
    """
    harness = harness or HarnessConfig()
    sizes = dict(sizes or family.default_sizes)
    n_test = n_test or family.default_n_test
    seed_list = _as_seed_list(seeds)
    sweep = list(n_root_values) if n_root_values else [None]
    rows: list[dict] = []
    curves: list[dict] = []
    for seed in seed_list:
        Xtest = _test_points(family, n_test, seed)
        ytest = eval_family(family, family.dag.root_id, Xtest)
        max_sizes = dict(sizes)
        if n_root_values:
            max_sizes[family.dag.root_id] = max(n_root_values)
        designs_full = nested_designs_for(family, max_sizes, seed)
        y_cache: dict[int, np.ndarray] = {}
        reuse: dict[str, dict[int, FittedDeepNode]] = {}
        for n_root in sweep:
            cur = dict(sizes)
            if n_root is not None:
                cur[family.dag.root_id] = int(n_root)
            designs = {t: designs_full[t][: cur[t]] for t in cur}
            bundle = _bundle_from_designs(family, designs, y_cache)
            for name in models:
                post, rec = _run_model(name, family, bundle, Xtest, ytest,
                                       harness, reuse, seed)
                row = {"model": name, "seed": seed}
                if n_root is not None:
                    row["n_root"] = int(n_root)
                row.update(rec)
                rows.append(row)
                if seed == seed_list[0] and n_root == sweep[0]:
                    curves.extend(_curve_rows(name, post, ytest))
    return MetricReport(rows=tuple(rows), curves=tuple(curves))


# ---------------------------------------------------------------------------
# Design study
# ---------------------------------------------------------------------------

def _sobol_points(n: int, dim: int, seed: int) -> np.ndarray:
    m = 1 << max(0, (n - 1).bit_length())
    return qmc.Sobol(d=dim, scramble=True, seed=seed).random(m)[:n]


def _ratio_sizes(dag: MultiFidelityDag, ratios: list[int], budget: float) -> dict[int, int]:
    """Sizes proportional to the given per-node ratios (ascending id order),
    scaled to the largest affordable integer multiple."""
    ids = sorted(dag.node_ids)
    if len(ratios) != len(ids):
        raise ValueError(f"need {len(ids)} ratio entries, got {len(ratios)}")
    unit_cost = sum(dag.cost(t) * r for t, r in zip(ids, ratios))
    k = int(budget // unit_cost)
    if k < 1:
        raise ValueError(f"budget {budget} below one ratio unit ({unit_cost})")
    return {t: k * r for t, r in zip(ids, ratios)}


def _study_designs(family: TestFamily, strategy: str, budget: float,
                   nu: float, seed: int):
    """Designs and the model kind for one design-study strategy.

    1-d strategies other than the proposed allocation follow low-discrepancy
    (Sobol) constructions, higher-dimensional ones use Latin hypercubes; the
    proposed allocation always goes through the sliced-hypercube BFS plan.
    """
    dag = family.dag
    root = dag.root_id
    if strategy == "all-hf":
        n = int(budget // dag.cost(root))
        if n < 1:
            raise ValueError(f"budget {budget} below one root run")
        if family.dim == 1:
            X = _sobol_points(n, 1, seed)
        else:
            X = generate_slhd(1, n, family.dim, seed=seed,
                              n_proposals=2000).points
        return {root: X}, "gp"
    if strategy.startswith("ratio-"):
        ratios = [int(p) for p in strategy.split("-")[1:]]
        sizes = _ratio_sizes(dag, ratios, budget)
        if family.dim == 1:
            master = _sobol_points(max(sizes.values()), 1, seed)
            return {t: master[: sizes[t]] for t in dag.node_ids}, "rgmgp"
        plan = nested_bfs_design(dag, sizes, family.dim, seed=seed,
                                 n_proposals=2000)
        return {t: plan.design(t) for t in dag.node_ids}, "rgmgp"
    if strategy.startswith("rho-"):
        rho = float(strategy.split("-", 1)[1])
        alloc = allocate_sizes(dag, budget, rho, nu=nu, dim=family.dim)
        plan = nested_bfs_design(dag, alloc.sizes, family.dim, seed=seed,
                                 n_proposals=2000)
        return {t: plan.design(t) for t in dag.node_ids}, "rgmgp"
    raise ValueError(
        f"unknown strategy {strategy!r}; use all-hf, ratio-a-b-c or rho-x"
    )


def run_design_study(family: TestFamily, budgets, strategies, seeds=20,
                     nu: float = 2.5, n_test: int | None = None,
                     harness: HarnessConfig | None = None) -> MetricReport:
    """Compare budget-allocation strategies by the RMSE of the model each
    one affords: a plain GP for the all-high-fidelity baseline, the
    recursive graphical model otherwise (both Matern 5/2)."""
    harness = harness or HarnessConfig()
    n_test = n_test or (100 if family.dim == 1 else 500)
    seed_list = _as_seed_list(seeds)
    rows: list[dict] = []
    for seed in seed_list:
        rng_test = np.random.default_rng([seed, 40487])
        Xtest = rng_test.random((n_test, family.dim))
        ytest = eval_family(family, family.dag.root_id, Xtest)
        for budget in budgets:
            for strategy in strategies:
                t0 = time.perf_counter()
                designs, kind = _study_designs(family, strategy, budget,
                                               nu, seed)
                if kind == "gp":
                    root = family.dag.root_id
                    ds = NodeDataset(designs[root],
                                     eval_family(family, root, designs[root]))
                    gp = fit_gp(ds, family="Matern52",
                                basis=TrendBasis("constant", family.dim),
                                config=harness.mle)
                    mean = gp_posterior(gp, Xtest).mean
                    sizes = {root: ds.n}
                else:
                    bundle = _bundle_from_designs(family, designs)
                    model = fit_rgmgp(bundle, family="Matern52",
                                      trend="constant", config=harness.mle,
                                      rho_basis=_rho_basis_for(bundle))
                    mean = predict_rgmgp(model, Xtest)[family.dag.root_id].mean
                    sizes = {t: designs[t].shape[0] for t in designs}
                row = {
                    "strategy": strategy, "budget": float(budget),
                    "seed": seed, "rmse": rmse(mean, ytest),
                    "p_rmse": None,
                    "seconds": round(time.perf_counter() - t0, 3),
                }
                for t, n in sorted(sizes.items()):
                    row[f"n_{family.dag.label(t)}"] = int(n)
                rows.append(row)
    return MetricReport(rows=tuple(rows))


# ---------------------------------------------------------------------------
# Config-driven entry points
# ---------------------------------------------------------------------------

def _harness_from_config(cfg: dict, jobs: int) -> HarnessConfig:
    def mk(d, **defaults):
        merged = {**defaults, **(d or {})}
        return MleConfig(**merged)

    mc_cfg = cfg.get("mc") or {}
    return HarnessConfig(
        mle=mk(cfg.get("mle")),
        deep_mle=mk(cfg.get("deep_mle"), method="lbfgs"),
        mc=McConfig(**mc_cfg),
        jobs=jobs,
    )


def _sizes_from_config(cfg: dict) -> dict[int, int] | None:
    raw = cfg.get("sizes")
    if raw is None:
        return None
    return {int(k): int(v) for k, v in raw.items()}


def run_from_config(cfg: dict, jobs: int = 1) -> MetricReport:
    """Run the experiment or design study described by a config mapping.

    Keys: kind ("experiment" | "design_study"), family, seeds, and either
    models/sizes/n_root_values/n_test or budgets/strategies/nu; mle,
    deep_mle and mc subsections override fit settings.
    """
    kind = cfg.get("kind", "experiment")
    family = load_family(cfg["family"])
    harness = _harness_from_config(cfg, jobs)
    seeds = cfg.get("seeds", 20)
    if kind == "experiment":
        return run_experiment(
            family,
            models=tuple(cfg.get("models", MODEL_NAMES)),
            seeds=seeds,
            sizes=_sizes_from_config(cfg),
            n_root_values=cfg.get("n_root_values"),
            n_test=cfg.get("n_test"),
            harness=harness,
        )
    if kind == "design_study":
        return run_design_study(
            family,
            budgets=cfg["budgets"],
            strategies=tuple(cfg["strategies"]),
            seeds=seeds,
            nu=cfg.get("nu", 2.5),
            n_test=cfg.get("n_test"),
            harness=harness,
        )
    raise ValueError(f"unknown config kind {kind!r}")


def plan_from_config(cfg: dict) -> list[str]:
    """Describe the jobs a config would run, without running them."""
    kind = cfg.get("kind", "experiment")
    family = load_family(cfg["family"])
    seeds = _as_seed_list(cfg.get("seeds", 20))
    lines = []
    if kind == "experiment":
        models = tuple(cfg.get("models", MODEL_NAMES))
        sweep = cfg.get("n_root_values") or [None]
        for seed in seeds:
            for n_root in sweep:
                for m in models:
                    tag = f" n_root={n_root}" if n_root is not None else ""
                    lines.append(f"{family.name} seed={seed}{tag} model={m}")
    elif kind == "design_study":
        for seed in seeds:
            for budget in cfg["budgets"]:
                for s in cfg["strategies"]:
                    lines.append(
                        f"{family.name} seed={seed} budget={budget} "
                        f"strategy={s}"
                    )
    else:
        raise ValueError(f"unknown config kind {kind!r}")
    return lines
