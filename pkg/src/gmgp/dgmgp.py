"""Deep graphical multi-fidelity model.

Non-source nodes see their parents' outputs as extra kernel inputs instead
of entering the mean linearly, which captures nonlinear cross-fidelity
relationships at the price of a non-Gaussian posterior. Fitting is
leaf-to-root with parents' recursive posterior means standing in for the
latent augmented inputs; prediction propagates Monte-Carlo samples through
the graph, drawing each node's value per sample from the Gaussian
conditional at the sample's augmented input point.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .dag import MultiFidelityDag
from .errors import DimensionMismatch, EmptyInput, InTreeRequired
from .gmgp import GmgpDataBundle
from .gp import (
    FittedGp,
    MleConfig,
    NodeDataset,
    PosteriorSummary,
    TrendBasis,
    _cross_and_prior,
    fit_deep_gp,
    fit_gp,
    gp_posterior,
)

__all__ = [
    "McConfig",
    "FittedDeepNode",
    "FittedDeepGmgp",
    "fit_dgmgp",
    "predict_dgmgp",
    "p_rmse_samples",
    "sample_quantiles",
]


@dataclass(frozen=True)
class McConfig:
    """Monte-Carlo propagation settings.

    Sample draws are keyed by (seed, node id) through a counter-based
    Philox stream, so results are independent of chunking and thread count.
    """

    n_samples: int = 1000
    seed: int = 0
    chunk_rows: int = 16384

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("need at least 2 Monte-Carlo samples")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.chunk_rows < 1:
            raise ValueError("chunk_rows must be positive")


@dataclass(frozen=True)
class FittedDeepNode:
    """One node of the deep model.

    Targets are standardized per node before fitting (the GPs are zero
    mean); ``y_shift``/``y_scale`` undo that on the way out. Parent outputs
    entering the kernel are standardized with ``z_shift``/``z_scale`` stored
    at fit time, one entry per parent in ascending parent id order.
    """

    node_id: int
    parent_ids: tuple[int, ...]
    gp: FittedGp
    y_shift: float
    y_scale: float
    z_shift: np.ndarray
    z_scale: np.ndarray


@dataclass(frozen=True)
class FittedDeepGmgp:
    dag: MultiFidelityDag
    nodes: dict[int, FittedDeepNode]
    bundle: GmgpDataBundle

    @property
    def n_parameters(self) -> int:
        """Kernel parameter census: 1 + d per source (variance plus
        lengthscales), 4 + 2d + |Pa(t)| per non-source (four variance-type
        parameters of the composite kernel plus its lengthscale groups)."""
        d = self.bundle.dim
        total = 0
        for t, node in self.nodes.items():
            q = len(node.parent_ids)
            total += (1 + d) if q == 0 else (4 + 2 * d + q)
        return total


def _standardize(values: np.ndarray):
    shift = float(np.mean(values))
    scale = float(np.std(values - shift))
    if not scale > 0:
        scale = 1.0
    return (values - shift) / scale, shift, scale


def fit_dgmgp(bundle: GmgpDataBundle, config: MleConfig | None = None,
              reuse: dict[int, FittedDeepNode] | None = None) -> FittedDeepGmgp:
    """Fit the deep model leaf-to-root.

    Sources get zero-mean squared-exponential GPs on standardized targets.
    Every other node is fitted on augmented inputs [x, z] where z holds the
    parents' recursive posterior means at the node's design (equal to the
    observed parent values on nested noise-free data), standardized
    column-wise. Defaults to L-BFGS-B refinement: the composite kernel has
    2 + 2d + q free log-parameters, too many for a simplex search.

    ``reuse`` carries already-fitted non-root nodes between calls; the
    caller must guarantee those nodes (and everything below them) were
    fitted on the identical data, as when only the root's sample size
    changes across runs.
    """
    config = config or MleConfig(method="lbfgs")
    if not bundle.dag.is_in_tree():
        raise InTreeRequired("the deep model needs an in-tree")
    bundle.require_nested()
    dag = bundle.dag
    d = bundle.dim
    nodes: dict[int, FittedDeepNode] = {}
    for t in dag.fit_order():
        if reuse is not None and t != dag.root_id and t in reuse:
            nodes[t] = reuse[t]
            continue
        ds = bundle.data[t]
        parents = dag.parents(t)
        y_std, y_shift, y_scale = _standardize(ds.y)
        if not parents:
            gp = fit_gp(
                NodeDataset(ds.X, y_std), family="SquaredExponential",
                basis=TrendBasis("zero", d), config=config,
            )
            nodes[t] = FittedDeepNode(
                node_id=t, parent_ids=(), gp=gp, y_shift=y_shift,
                y_scale=y_scale, z_shift=np.empty(0), z_scale=np.empty(0),
            )
            continue
        Z = np.column_stack([
            _recursive_mean(nodes, dag, p, ds.X) for p in parents
        ])
        z_shift = Z.mean(axis=0)
        z_scale = Z.std(axis=0)
        z_scale[z_scale <= 0] = 1.0
        gp = fit_deep_gp(ds.X, (Z - z_shift) / z_scale, y_std, config)
        nodes[t] = FittedDeepNode(
            node_id=t, parent_ids=parents, gp=gp, y_shift=y_shift,
            y_scale=y_scale, z_shift=z_shift, z_scale=z_scale,
        )
    return FittedDeepGmgp(dag=dag, nodes=nodes, bundle=bundle)


def _recursive_mean(nodes: dict[int, FittedDeepNode], dag: MultiFidelityDag,
                    t: int, X: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Plug-in posterior mean of node t at X, propagating parent means
    through the augmented kernels (raw units)."""
    if cache is None:
        cache = {}
    if t in cache:
        return cache[t]
    node = nodes[t]
    if not node.parent_ids:
        m = gp_posterior(node.gp, X).mean
    else:
        Z = np.column_stack([
            _recursive_mean(nodes, dag, p, X, cache) for p in node.parent_ids
        ])
        A = np.hstack([X, (Z - node.z_shift) / node.z_scale])
        m = gp_posterior(node.gp, A).mean
    m = node.y_shift + node.y_scale * m
    cache[t] = m
    return m


# ---------------------------------------------------------------------------
# Monte-Carlo prediction
# ---------------------------------------------------------------------------

def _node_noise(seed: int, node_id: int, n_samples: int, m: int) -> np.ndarray:
    """Standard normal draws keyed by (seed, node); fixed by the key alone,
    independent of evaluation order."""
    bits = np.random.Philox(key=(np.uint64(seed) << np.uint64(32)) + np.uint64(node_id))
    return np.random.Generator(bits).standard_normal((n_samples, m))


def _conditional_moments(gp: FittedGp, A: np.ndarray):
    """Posterior mean and variance of a deep GP at augmented rows A, in the
    node's standardized units; rows matching training data reproduce the
    stored targets exactly so interpolation survives the propagation."""
    v, prior, (qi, xi) = _cross_and_prior(gp, A)
    mean = v @ gp.alpha
    w = solve_triangular(gp.chol, v.T, lower=True)
    var = gp.sigma2 * np.maximum(prior - np.sum(w * w, axis=0), 0.0)
    if qi.size:
        mean[qi] = gp.dataset.y[xi]
        var[qi] = 0.0
    return mean, var


def _propagate_node(node: FittedDeepNode, Xq: np.ndarray,
                    parent_samples: list[np.ndarray], eps: np.ndarray,
                    chunk_rows: int, jobs: int) -> np.ndarray:
    """Per-sample draws at a non-source node.

    Sample i of the node is a Gaussian draw at augmented input
    [x, parents' sample i], evaluated pointwise; rows are processed in
    chunks of whole samples to bound the kernel workspace.
    """
    n_samples, m = eps.shape
    q = len(node.parent_ids)
    out = np.empty((n_samples, m))
    block = max(1, chunk_rows // m)

    def run(s0: int):
        s1 = min(s0 + block, n_samples)
        b = s1 - s0
        A = np.empty((b * m, Xq.shape[1] + q))
        A[:, :Xq.shape[1]] = np.tile(Xq, (b, 1))
        for j in range(q):
            zs = parent_samples[j][s0:s1].reshape(-1)
            A[:, Xq.shape[1] + j] = (zs - node.z_shift[j]) / node.z_scale[j]
        mean, var = _conditional_moments(node.gp, A)
        draws = mean + np.sqrt(var) * eps[s0:s1].reshape(-1)
        out[s0:s1] = draws.reshape(b, m)

    starts = range(0, n_samples, block)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run, starts))
    else:
        for s0 in starts:
            run(s0)
    return node.y_shift + node.y_scale * out


def predict_dgmgp(model: FittedDeepGmgp, Xq, mc: McConfig | None = None,
                  jobs: int = 1) -> dict[int, PosteriorSummary]:
    """Monte-Carlo posterior at every node, keyed by node id.

    Sources draw each sample from their Gaussian posterior pointwise;
    descendants condition on the parents' sample values through the
    augmented kernel. Each summary's mean and variance are the sample mean
    and (unbiased) sample variance; raw samples are attached for
    prediction-interval and p-RMSE computations. Results are bit-identical
    for any ``jobs`` value, because every node's noise comes from its own
    counter-based stream.
    """
    mc = mc or McConfig()
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    if Xq.shape[1] != model.bundle.dim:
        raise DimensionMismatch(
            f"query has {Xq.shape[1]} columns, model expects {model.bundle.dim}"
        )
    m = Xq.shape[0]
    samples: dict[int, np.ndarray] = {}
    for t in model.dag.fit_order():
        node = model.nodes[t]
        eps = _node_noise(mc.seed, t, mc.n_samples, m)
        if not node.parent_ids:
            post = gp_posterior(node.gp, Xq)
            sd = np.sqrt(post.variance)
            samples[t] = node.y_shift + node.y_scale * (post.mean + sd * eps)
        else:
            parent = [samples[p] for p in node.parent_ids]
            samples[t] = _propagate_node(node, Xq, parent, eps,
                                         mc.chunk_rows, jobs)
    return {
        t: PosteriorSummary(
            mean=draws.mean(axis=0),
            variance=draws.var(axis=0, ddof=1),
            samples=draws,
        )
        for t, draws in samples.items()
    }


def p_rmse_samples(samples, truth) -> float:
    """Monte-Carlo estimate of the root of the posterior-expected squared
    error: sqrt(mean over points of mean over draws of (z - y)^2)."""
    S = np.asarray(samples, dtype=float)
    truth = np.asarray(truth, dtype=float).ravel()
    if S.size == 0:
        raise EmptyInput("p-RMSE of zero samples")
    if S.ndim != 2 or S.shape[1] != truth.shape[0]:
        raise DimensionMismatch(
            f"samples {S.shape} do not match {truth.shape[0]} truth points"
        )
    return float(np.sqrt(np.mean((S - truth[None, :]) ** 2)))


def sample_quantiles(summary: PosteriorSummary, probs=(2.5, 97.5)) -> np.ndarray:
    """Pointwise percentiles of the Monte-Carlo samples; shape
    (len(probs), m)."""
    if summary.samples is None:
        raise ValueError("summary carries no samples")
    return np.percentile(summary.samples, probs, axis=0)
