"""Graphical multi-fidelity Gaussian processes on a simulator DAG.

Each node t carries an independent discrepancy GP delta_t; the node output
is the rho-weighted sum of its parents' outputs plus the discrepancy:

    Z_t(x) = sum_{t' in Pa(t)} rho_{t'}(x) Z_{t'}(x) + delta_t(x).

Two predictors are provided. The recursive one exploits the Markov property
and is exact for in-tree DAGs with nested noise-free designs; the joint one
conditions on all data at once through the full prior covariance and works
on any DAG but at cubic cost in the total number of training points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dag import MultiFidelityDag, validate as validate_dag
from .errors import (
    DimensionMismatch,
    InTreeRequired,
    NotNested,
    SingularConditioningBlock,
    SingularCovariance,
    UnknownNode,
)
from .gp import (
    FittedGp,
    MleConfig,
    NodeDataset,
    PosteriorSummary,
    TrendBasis,
    assemble_gp,
    concentrated_fit,
    gp_posterior,
)
from .kernels import KernelSpec, corr_matrix

__all__ = [
    "GmgpDataBundle",
    "NodeParams",
    "GmgpParams",
    "FittedNode",
    "FittedGmgp",
    "fit_rgmgp",
    "assemble_rgmgp",
    "predict_rgmgp",
    "predict_joint_gmgp",
    "prior_cov",
    "cov_block",
    "prior_mean",
    "markov_check",
]

NESTING_TOL = 1e-10


# ---------------------------------------------------------------------------
# Data bundle
# ---------------------------------------------------------------------------

def _match_rows(child_X: np.ndarray, parent_X: np.ndarray, child_id: int,
                parent_id: int) -> np.ndarray:
    """Index of each child design row inside the parent design.

    Rows must match within euclidean distance 1e-10, the nestedness
    requirement of the recursive predictor.
    """
    sq = np.zeros((child_X.shape[0], parent_X.shape[0]))
    for l in range(child_X.shape[1]):
        d = child_X[:, l, None] - parent_X[None, :, l]
        sq += d * d
    idx = np.argmin(sq, axis=1)
    best = sq[np.arange(child_X.shape[0]), idx]
    bad = np.nonzero(best > NESTING_TOL * NESTING_TOL)[0]
    if bad.size:
        r = int(bad[0])
        raise NotNested(
            f"design row {r} of node {child_id} is missing from the design "
            f"of its parent {parent_id}"
        )
    return idx


@dataclass(frozen=True)
class GmgpDataBundle:
    """A DAG together with one dataset per node.

    Construction validates that datasets exist exactly for the DAG's nodes,
    that all share one input dimension, and that every node's design is
    contained in each of its parents' designs (lower-fidelity simulators are
    run at a superset of the points of the models they feed).
    """

    dag: MultiFidelityDag
    data: dict[int, NodeDataset]

    def __post_init__(self):
        validate_dag(self.dag)
        ids = set(self.dag.node_ids)
        got = set(self.data)
        if got != ids:
            missing = sorted(ids - got)
            extra = sorted(got - ids)
            parts = []
            if missing:
                parts.append(f"missing datasets for nodes {missing}")
            if extra:
                parts.append(f"datasets for unknown nodes {extra}")
            raise UnknownNode("; ".join(parts))
        dims = {t: ds.dim for t, ds in self.data.items()}
        if len(set(dims.values())) > 1:
            raise DimensionMismatch(f"nodes disagree on input dimension: {dims}")
        object.__setattr__(self, "_maps", {})

    @property
    def dim(self) -> int:
        return next(iter(self.data.values())).dim

    def edge_map(self, p: int, t: int) -> np.ndarray:
        """Row indices of node t's design inside parent p's design; raises
        NotNested naming the first missing row. Matching is done lazily so
        that non-nested bundles can still feed the joint predictor."""
        key = (p, t)
        if key not in self._maps:
            self._maps[key] = _match_rows(self.data[t].X, self.data[p].X, t, p)
        return self._maps[key]

    def require_nested(self) -> None:
        """Check every edge's row containment (fitting precondition)."""
        for t in self.dag.node_ids:
            for p in self.dag.parents(t):
                self.edge_map(p, t)

    def parent_outputs(self, t: int) -> np.ndarray:
        """Observed parent values at node t's design, one column per parent
        in ascending parent id order; shape (n_t, |Pa(t)|)."""
        parents = self.dag.parents(t)
        n = self.data[t].n
        P = np.empty((n, len(parents)))
        for j, p in enumerate(parents):
            P[:, j] = self.data[p].y[self.edge_map(p, t)]
        return P


# ---------------------------------------------------------------------------
# Fixed-parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NodeParams:
    """Fully specified hyperparameters of one node.

    ``kernel.variance`` is the discrepancy variance sigma_t^2, ``rho`` holds
    one constant per parent in ascending parent id order, and ``nugget`` is
    the relative jitter added to the discrepancy correlation.
    """

    kernel: KernelSpec
    beta: tuple[float, ...] = (0.0,)
    rho: tuple[float, ...] = ()
    trend: str = "constant"
    nugget: float = 0.0

    def basis(self, dim: int) -> TrendBasis:
        return TrendBasis(self.trend, dim)


@dataclass(frozen=True)
class GmgpParams:
    """Per-node parameters keyed by node id."""

    nodes: dict[int, NodeParams]

    def node(self, t: int) -> NodeParams:
        if t not in self.nodes:
            raise UnknownNode(f"no parameters for node {t}")
        return self.nodes[t]


# ---------------------------------------------------------------------------
# Fitted model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FittedNode:
    """One fitted node: scaling coefficients and the discrepancy GP.

    ``rho`` has shape (q, b) for q parents and b coefficients per parent
    (b = 1 for constant scaling, 1 + d for the linear-in-x option); the
    discrepancy GP's dataset holds the residual targets
    z_t - sum rho z_parent at the node design.
    """

    node_id: int
    parent_ids: tuple[int, ...]
    rho: np.ndarray
    gp: FittedGp

    def rho_at(self, X: np.ndarray) -> np.ndarray:
        """Scaling factor per query row and parent; shape (m, q)."""
        m = X.shape[0]
        q = len(self.parent_ids)
        if q == 0:
            return np.empty((m, 0))
        if self.rho.shape[1] == 1:
            return np.tile(self.rho[:, 0], (m, 1))
        B = np.hstack([np.ones((m, 1)), X])
        return B @ self.rho.T


@dataclass(frozen=True)
class FittedGmgp:
    dag: MultiFidelityDag
    nodes: dict[int, FittedNode]
    bundle: GmgpDataBundle

    def to_params(self) -> GmgpParams:
        """Extract fixed parameters (constant-rho models only)."""
        out = {}
        for t, node in self.nodes.items():
            if node.rho.size and node.rho.shape[1] != 1:
                raise ValueError(
                    "parameters with input-dependent rho cannot be exported"
                )
            out[t] = NodeParams(
                kernel=node.gp.spec,
                beta=tuple(float(b) for b in node.gp.beta),
                rho=tuple(float(r) for r in node.rho[:, 0]) if node.rho.size else (),
                trend=node.gp.basis.kind,
                nugget=node.gp.nugget,
            )
        return GmgpParams(out)


def _rho_design(P: np.ndarray, X: np.ndarray, rho_basis: str) -> np.ndarray:
    """Regression columns carrying parent outputs: one column per parent for
    constant rho, or parent output times [1, x] for the linear option."""
    if rho_basis == "constant":
        return P
    blocks = np.empty((P.shape[0], P.shape[1] * (1 + X.shape[1])))
    # interleave so that each parent's coefficients are contiguous
    q = P.shape[1]
    for j in range(q):
        blocks[:, j * (1 + X.shape[1])] = P[:, j]
        for l in range(X.shape[1]):
            blocks[:, j * (1 + X.shape[1]) + 1 + l] = P[:, j] * X[:, l]
    return blocks


def fit_rgmgp(bundle: GmgpDataBundle, family: str = "Matern52",
              trend: str = "constant", config: MleConfig | None = None,
              rho_basis: str = "constant") -> FittedGmgp:
    """Fit the recursive model node by node, sources first.

    Sources get a plain GP fit. Every other node solves one generalized
    least squares problem whose regression design stacks the observed parent
    outputs at the node's points next to the trend columns, so the scaling
    coefficients rho and the trend are estimated jointly with the
    lengthscales. Requires an in-tree DAG and nested designs.
    """
    if rho_basis not in ("constant", "linear"):
        raise ValueError(f"unknown rho basis {rho_basis!r}")
    if not bundle.dag.is_in_tree():
        raise InTreeRequired(
            "recursive fitting needs an in-tree (every non-root node with "
            "exactly one outgoing edge); use the joint predictor instead"
        )
    bundle.require_nested()
    config = config or MleConfig()
    dim = bundle.dim
    basis = TrendBasis(trend, dim)
    nodes: dict[int, FittedNode] = {}
    for t in bundle.dag.fit_order():
        ds = bundle.data[t]
        parents = bundle.dag.parents(t)
        H = basis.matrix(ds.X)
        if parents:
            P = bundle.parent_outputs(t)
            Prho = _rho_design(P, ds.X, rho_basis)
            G = np.hstack([Prho, H])
            ls, gls = concentrated_fit(
                ds.X, G, ds.y, family, config, has_intercept=trend != "zero"
            )
            k = Prho.shape[1]
            b = 1 if rho_basis == "constant" else 1 + dim
            rho = gls.beta[:k].reshape(len(parents), b)
            beta = gls.beta[k:]
            delta = NodeDataset(ds.X, ds.y - Prho @ gls.beta[:k])
        else:
            ls, gls = concentrated_fit(
                ds.X, H, ds.y, family, config, has_intercept=trend != "zero"
            )
            rho = np.empty((0, 1))
            beta = gls.beta
            delta = ds
        spec = KernelSpec(family, tuple(ls), gls.sigma2)
        gp = FittedGp(
            spec=spec, basis=basis, beta=beta, sigma2=gls.sigma2,
            chol=gls.chol, alpha=gls.alpha, dataset=delta, nugget=gls.nugget,
            nll=gls.nll,
        )
        nodes[t] = FittedNode(
            node_id=t, parent_ids=parents, rho=rho, gp=gp
        )
    return FittedGmgp(dag=bundle.dag, nodes=nodes, bundle=bundle)


def assemble_rgmgp(bundle: GmgpDataBundle, params: GmgpParams) -> FittedGmgp:
    """Build a recursive model from fixed parameters, with no estimation."""
    if not bundle.dag.is_in_tree():
        raise InTreeRequired("the recursive predictor needs an in-tree")
    dim = bundle.dim
    nodes: dict[int, FittedNode] = {}
    for t in bundle.dag.fit_order():
        ds = bundle.data[t]
        np_t = params.node(t)
        parents = bundle.dag.parents(t)
        if len(np_t.rho) != len(parents):
            raise DimensionMismatch(
                f"node {t} has {len(parents)} parents but {len(np_t.rho)} rho values"
            )
        if parents:
            P = bundle.parent_outputs(t)
            rho = np.asarray(np_t.rho, dtype=float).reshape(-1, 1)
            delta = NodeDataset(ds.X, ds.y - P @ rho[:, 0])
        else:
            rho = np.empty((0, 1))
            delta = ds
        basis = np_t.basis(dim)
        gp = assemble_gp(delta, np_t.kernel, basis, np_t.beta, np_t.nugget)
        nodes[t] = FittedNode(node_id=t, parent_ids=parents, rho=rho, gp=gp)
    return FittedGmgp(dag=bundle.dag, nodes=nodes, bundle=bundle)


def predict_rgmgp(model: FittedGmgp, Xq) -> dict[int, PosteriorSummary]:
    """Recursive posterior at every node, keyed by node id.

    Walks sources toward the root: each node adds its discrepancy posterior
    to the rho-weighted parent means, and rho^2-weighted parent variances to
    its own, which is exact under the graphical Markov property. The root's
    summary sits at ``model.dag.root_id``.
    """
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    acc: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    out: dict[int, PosteriorSummary] = {}
    for t in model.dag.fit_order():
        node = model.nodes[t]
        post = gp_posterior(node.gp, Xq)
        m = post.mean.copy()
        v = post.variance.copy()
        if node.parent_ids:
            w = node.rho_at(Xq)
            for j, p in enumerate(node.parent_ids):
                pm, pv = acc[p]
                m += w[:, j] * pm
                v += w[:, j] ** 2 * pv
        acc[t] = (m, v)
        out[t] = PosteriorSummary(mean=m, variance=np.maximum(v, 0.0))
    return out


# ---------------------------------------------------------------------------
# Prior moments under fixed parameters
# ---------------------------------------------------------------------------

def _path_coefficients(dag: MultiFidelityDag, params: GmgpParams, t: int) -> dict[int, float]:
    """Sum over directed paths u -> t of the product of edge rho values, for
    every u in the ancestor closure of t. The coefficient of delta_u inside
    Z_t when the model is unrolled to its independent discrepancies."""
    if t not in set(dag.node_ids):
        raise UnknownNode(f"unknown node {t}")
    rho_edge: dict[tuple[int, int], float] = {}
    for c in dag.node_ids:
        pids = dag.parents(c)
        np_c = params.node(c)
        if len(np_c.rho) != len(pids):
            raise DimensionMismatch(
                f"node {c} has {len(pids)} parents but {len(np_c.rho)} rho values"
            )
        for j, p in enumerate(pids):
            rho_edge[(p, c)] = float(np_c.rho[j])
    coef: dict[int, float] = {t: 1.0}

    def walk(u: int) -> float:
        if u in coef:
            return coef[u]
        total = 0.0
        for c in dag.children(u):
            total += rho_edge[(u, c)] * walk(c)
        coef[u] = total
        return total

    out = {}
    for u in list(dag.ancestors(t)) + [t]:
        val = walk(u)
        if val != 0.0 or u == t:
            out[u] = val
    return {u: v for u, v in out.items() if v != 0.0}


def prior_mean(dag: MultiFidelityDag, params: GmgpParams, t: int, X) -> np.ndarray:
    """Prior mean of Z_t at query rows: the path-weighted sum of the
    ancestor trends, m_t(x) = sum_u pi_{u->t} h_u(x)' beta_u."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    coefs = _path_coefficients(dag, params, t)
    out = np.zeros(X.shape[0])
    for u, c in coefs.items():
        np_u = params.node(u)
        basis = np_u.basis(X.shape[1])
        beta = np.asarray(np_u.beta, dtype=float)
        if beta.shape[0] != basis.n_coefficients:
            raise DimensionMismatch(
                f"node {u}: beta has {beta.shape[0]} entries, trend "
                f"{np_u.trend!r} needs {basis.n_coefficients}"
            )
        if beta.size:
            out += c * (basis.matrix(X) @ beta)
    return out


def cov_block(dag: MultiFidelityDag, params: GmgpParams, t: int, s: int,
              Xt, Xs) -> np.ndarray:
    """Prior covariance matrix between Z_t at rows Xt and Z_s at rows Xs.

    Unrolling both nodes onto their independent discrepancies gives
    cov = sum over shared ancestors u of pi_{u->t} pi_{u->s} sigma_u^2 r_u.
    """
    Xt = np.atleast_2d(np.asarray(Xt, dtype=float))
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    ct = _path_coefficients(dag, params, t)
    cs = _path_coefficients(dag, params, s)
    out = np.zeros((Xt.shape[0], Xs.shape[0]))
    for u in set(ct) & set(cs):
        np_u = params.node(u)
        out += ct[u] * cs[u] * np_u.kernel.variance * corr_matrix(np_u.kernel, Xt, Xs)
    return out


def prior_cov(dag: MultiFidelityDag, params: GmgpParams, t: int, x,
              s: int, x2) -> float:
    """Scalar prior covariance cov(Z_t(x), Z_s(x2)) under fixed parameters."""
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    return float(cov_block(dag, params, t, s, x[None, :], x2[None, :])[0, 0])


def _prior_var_diag(dag: MultiFidelityDag, params: GmgpParams, t: int, m: int) -> np.ndarray:
    """Prior variance of Z_t, constant across queries since correlations are
    one at zero distance."""
    coefs = _path_coefficients(dag, params, t)
    total = sum(c * c * params.node(u).kernel.variance for u, c in coefs.items())
    return np.full(m, total)


# ---------------------------------------------------------------------------
# Joint prediction
# ---------------------------------------------------------------------------

def predict_joint_gmgp(bundle: GmgpDataBundle, params: GmgpParams, Xq,
                       node_id: int | None = None) -> PosteriorSummary:
    """Exact joint Gaussian conditioning on all nodes' data at fixed
    parameters; valid for any DAG, cubic in the total number of points.

    Per-node nuggets enter as sigma_t^2 * nugget_t on the matching diagonal
    block, mirroring the jitter the recursive predictor puts inside the
    discrepancy correlation.
    """
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    dag = bundle.dag
    target = dag.root_id if node_id is None else node_id
    if target not in set(dag.node_ids):
        raise UnknownNode(f"unknown node {target}")
    ids = sorted(bundle.data)
    sizes = [bundle.data[t].n for t in ids]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])

    z = np.concatenate([bundle.data[t].y for t in ids])
    m_data = np.concatenate([
        prior_mean(dag, params, t, bundle.data[t].X) for t in ids
    ])
    V = np.empty((total, total))
    for i, t in enumerate(ids):
        for j, s in enumerate(ids):
            if j < i:
                continue
            B = cov_block(dag, params, t, s, bundle.data[t].X, bundle.data[s].X)
            V[offsets[i]:offsets[i + 1], offsets[j]:offsets[j + 1]] = B
            if j > i:
                V[offsets[j]:offsets[j + 1], offsets[i]:offsets[i + 1]] = B.T
        np_t = params.node(t)
        if np_t.nugget:
            d = np.arange(offsets[i], offsets[i + 1])
            V[d, d] += np_t.nugget * np_t.kernel.variance
    try:
        fac = cho_factor(V, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(
            f"joint covariance over {total} points is not positive definite; "
            "set a nugget in the node parameters"
        ) from exc

    vq = np.hstack([
        cov_block(dag, params, target, t, Xq, bundle.data[t].X) for t in ids
    ])
    w = cho_solve(fac, vq.T)
    mean = prior_mean(dag, params, target, Xq) + vq @ cho_solve(fac, z - m_data)
    var = _prior_var_diag(dag, params, target, Xq.shape[0]) - np.sum(vq.T * w, axis=0)
    return PosteriorSummary(mean=mean, variance=np.maximum(var, 0.0))


# ---------------------------------------------------------------------------
# Markov property check
# ---------------------------------------------------------------------------

def markov_check(dag: MultiFidelityDag, params: GmgpParams, x, x2,
                 t: int, s: int) -> float:
    """Residual covariance of (Z_t(x), Z_s(x2)) after conditioning on the
    parents of t evaluated at x.

    Zero (to rounding) whenever the graphical Markov property applies:
    s an ancestor of t, or t and s sharing no ancestry at all.
    """
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    parents = dag.parents(t)
    if s in parents and x2.shape == x.shape and np.array_equal(x2, x):
        raise SingularConditioningBlock(
            f"Z_{s} at the query point is itself part of the conditioning "
            "set; the joint covariance is degenerate"
        )
    a_nodes = [(t, x), (s, x2)]
    b_nodes = [(p, x) for p in parents]
    S_aa = np.array([
        [prior_cov(dag, params, u, xu, v, xv) for v, xv in a_nodes]
        for u, xu in a_nodes
    ])
    if not b_nodes:
        return float(S_aa[0, 1])
    S_ab = np.array([
        [prior_cov(dag, params, u, xu, v, xv) for v, xv in b_nodes]
        for u, xu in a_nodes
    ])
    S_bb = np.array([
        [prior_cov(dag, params, u, xu, v, xv) for v, xv in b_nodes]
        for u, xu in b_nodes
    ])
    try:
        fac = cho_factor(S_bb, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularConditioningBlock(
            f"covariance of the conditioning values (parents of node {t}) "
            "is singular"
        ) from exc
    resid = S_aa - S_ab @ cho_solve(fac, S_ab.T)
    return float(resid[0, 1])
