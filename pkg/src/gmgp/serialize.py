"""File formats: dataset CSVs, bundle manifests, model JSON, run manifests.

Numbers are written with 17 significant digits by default, enough for exact
float64 round trips (the GMGP_CSV_DIGITS environment variable lowers the
output precision; nothing else reads it). Model files store hyperparameters
plus references to the data files; Cholesky factors are recomputed on load
rather than stored.
"""

from __future__ import annotations

import hashlib
import json
import os
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .dag import MultiFidelityDag, validate
from .design import DesignPlan
from .dgmgp import FittedDeepGmgp, FittedDeepNode, _recursive_mean
from .gmgp import FittedGmgp, GmgpDataBundle, GmgpParams, NodeParams, assemble_rgmgp
from .gp import (
    FittedGp,
    NodeDataset,
    PosteriorSummary,
    TrendBasis,
    assemble_deep_gp,
    assemble_gp,
)
from .kernels import DeepKernelSpec, KernelSpec

__all__ = [
    "PRECISION_ENV",
    "write_dataset_csv",
    "read_dataset_csv",
    "read_points_csv",
    "write_points_csv",
    "read_dag",
    "write_dag",
    "write_bundle",
    "read_bundle",
    "save_model",
    "load_model",
    "write_design_plan",
    "write_metrics_csv",
    "write_medians_csv",
    "write_curves_csv",
    "write_samples_csv",
    "write_summary_csv",
    "write_run_manifest",
    "file_digest",
    "package_version",
]

PRECISION_ENV = "GMGP_CSV_DIGITS"

_Z95 = 1.959963984540054


def _digits() -> int:
    raw = os.environ.get(PRECISION_ENV, "17")
    try:
        return min(17, max(1, int(raw)))
    except ValueError:
        return 17


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), f".{_digits()}g")
    return str(value)


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _dump_json(doc: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, default=_json_default)
        fh.write("\n")


def _load_json(path: Path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def package_version() -> str:
    try:
        from importlib.metadata import version

        return version("gmgp")
    except Exception:
        return "0.1.0"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


# ---------------------------------------------------------------------------
# Point and dataset CSVs
# ---------------------------------------------------------------------------

def _write_rows(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_dataset_csv(path, X: np.ndarray, y: np.ndarray) -> None:
    """One node's data as x1,...,xd,y rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    header = [f"x{j + 1}" for j in range(X.shape[1])] + ["y"]
    _write_rows(Path(path), header, (list(X[i]) + [y[i]] for i in range(X.shape[0])))


def write_points_csv(path, X: np.ndarray) -> None:
    """Input rows only (x1,...,xd), as written for design plans."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    header = [f"x{j + 1}" for j in range(X.shape[1])]
    _write_rows(Path(path), header, (list(row) for row in X))


def _read_csv(path: Path):
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise ValueError(f"{path}: empty file, expected a header row")
        cols = [c.strip() for c in header.split(",")]
        try:
            body = np.loadtxt(fh, delimiter=",", ndmin=2)
        except Exception as exc:
            raise ValueError(f"{path}: could not parse numeric rows: {exc}") from exc
    if body.size and body.shape[1] != len(cols):
        raise ValueError(
            f"{path}: header names {len(cols)} columns, rows have {body.shape[1]}"
        )
    return cols, body


def read_dataset_csv(path):
    """Read an x1,...,xd,y file; returns (X, y)."""
    cols, body = _read_csv(Path(path))
    expected = [f"x{j + 1}" for j in range(len(cols) - 1)] + ["y"]
    if cols != expected:
        raise ValueError(
            f"{path}: expected header {','.join(expected)}, found {','.join(cols)}"
        )
    return body[:, :-1], body[:, -1]


def read_points_csv(path) -> np.ndarray:
    """Read query/design rows; a trailing y column is tolerated and dropped."""
    cols, body = _read_csv(Path(path))
    if cols and cols[-1] == "y":
        cols, body = cols[:-1], body[:, :-1]
    expected = [f"x{j + 1}" for j in range(len(cols))]
    if cols != expected:
        raise ValueError(
            f"{path}: expected header {','.join(expected)}, found {','.join(cols)}"
        )
    return body


# ---------------------------------------------------------------------------
# DAG and bundle files
# ---------------------------------------------------------------------------

def read_dag(path) -> MultiFidelityDag:
    doc = _load_json(Path(path))
    try:
        dag = MultiFidelityDag.from_json_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed DAG document: {exc}") from exc
    validate(dag)
    return dag


def write_dag(path, dag: MultiFidelityDag) -> None:
    _dump_json(dag.to_json_dict(), Path(path))


def write_bundle(out_dir, bundle: GmgpDataBundle, name: str = "bundle.json") -> Path:
    """Write a bundle as dag.json + one dataset CSV per node + a manifest
    holding their relative paths; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_dag(out / "dag.json", bundle.dag)
    files = {}
    for t in bundle.dag.node_ids:
        fname = f"data_{bundle.dag.label(t)}.csv"
        ds = bundle.data[t]
        write_dataset_csv(out / fname, ds.X, ds.y)
        files[str(t)] = fname
    manifest = out / name
    _dump_json({"dag": "dag.json", "datasets": files}, manifest)
    return manifest


def read_bundle(path) -> GmgpDataBundle:
    """Load a bundle manifest; relative paths resolve against its folder."""
    path = Path(path)
    doc = _load_json(path)
    for key in ("dag", "datasets"):
        if key not in doc:
            raise ValueError(f"{path}: bundle manifest lacks the {key!r} field")
    base = path.parent
    dag = read_dag(base / doc["dag"])
    data = {}
    for key, rel in doc["datasets"].items():
        X, y = read_dataset_csv(base / rel)
        data[int(key)] = NodeDataset(X, y)
    return GmgpDataBundle(dag, data)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def _kernel_doc(spec: KernelSpec) -> dict:
    return {
        "family": spec.family,
        "lengthscales": list(spec.lengthscales),
        "variance": spec.variance,
    }


def _kernel_from(doc: dict) -> KernelSpec:
    return KernelSpec(
        doc["family"], tuple(float(v) for v in doc["lengthscales"]),
        float(doc["variance"]),
    )


def save_model(path, model, data_path) -> None:
    """Write a fitted model next to a reference to its data file.

    ``data_path`` is the dataset CSV (plain GP) or the bundle manifest
    (graphical models), stored relative to the model file when possible.
    """
    path = Path(path)
    try:
        ref = os.path.relpath(Path(data_path), path.parent)
    except ValueError:
        ref = str(data_path)
    if isinstance(model, FittedGp):
        doc = {
            "kind": "gp",
            "dataset": ref,
            "kernel": _kernel_doc(model.spec),
            "trend": model.basis.kind,
            "beta": model.beta.tolist(),
            "nugget": model.nugget,
        }
    elif isinstance(model, FittedGmgp):
        params = model.to_params()
        doc = {
            "kind": "rgmgp",
            "bundle": ref,
            "nodes": [
                {
                    "id": t,
                    "parents": list(model.nodes[t].parent_ids),
                    "rho": list(params.node(t).rho),
                    "kernel": _kernel_doc(params.node(t).kernel),
                    "trend": params.node(t).trend,
                    "beta": list(params.node(t).beta),
                    "nugget": params.node(t).nugget,
                }
                for t in model.dag.fit_order()
            ],
        }
    elif isinstance(model, FittedDeepGmgp):
        nodes = []
        for t in model.dag.fit_order():
            node = model.nodes[t]
            rec = {
                "id": t,
                "parents": list(node.parent_ids),
                "y_shift": node.y_shift,
                "y_scale": node.y_scale,
                "z_shift": node.z_shift.tolist(),
                "z_scale": node.z_scale.tolist(),
                "nugget": node.gp.nugget,
            }
            if node.parent_ids:
                spec: DeepKernelSpec = node.gp.spec
                rec["deep_kernel"] = {
                    "x_outer_lengthscales": list(spec.x_outer.lengthscales),
                    "z_se_variance": spec.z_se.variance,
                    "z_se_lengthscales": list(spec.z_se.lengthscales),
                    "x_bias_variance": spec.x_bias.variance,
                    "x_bias_lengthscales": list(spec.x_bias.lengthscales),
                }
            else:
                rec["kernel"] = _kernel_doc(node.gp.spec)
            nodes.append(rec)
        doc = {"kind": "dgmgp", "bundle": ref, "nodes": nodes}
    else:
        raise TypeError(f"cannot serialize model of type {type(model).__name__}")
    _dump_json(doc, path)


def _load_gp(doc: dict, base: Path) -> FittedGp:
    X, y = read_dataset_csv(base / doc["dataset"])
    spec = _kernel_from(doc["kernel"])
    return assemble_gp(
        NodeDataset(X, y), spec, TrendBasis(doc["trend"], X.shape[1]),
        doc["beta"], float(doc["nugget"]),
    )


def _load_rgmgp(doc: dict, base: Path) -> FittedGmgp:
    bundle = read_bundle(base / doc["bundle"])
    params = GmgpParams({
        rec["id"]: NodeParams(
            kernel=_kernel_from(rec["kernel"]),
            beta=tuple(float(b) for b in rec["beta"]),
            rho=tuple(float(r) for r in rec["rho"]),
            trend=rec["trend"],
            nugget=float(rec["nugget"]),
        )
        for rec in doc["nodes"]
    })
    return assemble_rgmgp(bundle, params)


def _load_dgmgp(doc: dict, base: Path) -> FittedDeepGmgp:
    bundle = read_bundle(base / doc["bundle"])
    dag = bundle.dag
    d = bundle.dim
    recs = {rec["id"]: rec for rec in doc["nodes"]}
    nodes: dict[int, FittedDeepNode] = {}
    for t in dag.fit_order():
        rec = recs[t]
        ds = bundle.data[t]
        y_shift, y_scale = float(rec["y_shift"]), float(rec["y_scale"])
        y_std = (ds.y - y_shift) / y_scale
        parents = dag.parents(t)
        if not parents:
            gp = assemble_gp(
                NodeDataset(ds.X, y_std), _kernel_from(rec["kernel"]),
                TrendBasis("zero", d), (), float(rec["nugget"]),
            )
            nodes[t] = FittedDeepNode(
                node_id=t, parent_ids=(), gp=gp, y_shift=y_shift,
                y_scale=y_scale, z_shift=np.empty(0), z_scale=np.empty(0),
            )
            continue
        kd = rec["deep_kernel"]
        spec = DeepKernelSpec(
            x_outer=KernelSpec(
                "SquaredExponential",
                tuple(float(v) for v in kd["x_outer_lengthscales"]), 1.0),
            z_linear_variance=1.0,
            z_se=KernelSpec(
                "SquaredExponential",
                tuple(float(v) for v in kd["z_se_lengthscales"]),
                float(kd["z_se_variance"])),
            x_bias=KernelSpec(
                "SquaredExponential",
                tuple(float(v) for v in kd["x_bias_lengthscales"]),
                float(kd["x_bias_variance"])),
        )
        Z = np.column_stack([
            _recursive_mean(nodes, dag, p, ds.X) for p in parents
        ])
        z_shift = np.asarray(rec["z_shift"], dtype=float)
        z_scale = np.asarray(rec["z_scale"], dtype=float)
        gp = assemble_deep_gp(
            ds.X, (Z - z_shift) / z_scale, y_std, spec, float(rec["nugget"]),
        )
        nodes[t] = FittedDeepNode(
            node_id=t, parent_ids=parents, gp=gp, y_shift=y_shift,
            y_scale=y_scale, z_shift=z_shift, z_scale=z_scale,
        )
    return FittedDeepGmgp(dag=dag, nodes=nodes, bundle=bundle)


def load_model(path):
    """Load any model file; the kind field picks the representation.

    Factorizations are rebuilt from the referenced data, so a loaded model
    predicts identically to the one that was saved.
    """
    path = Path(path)
    doc = _load_json(path)
    kind = doc.get("kind")
    loaders = {"gp": _load_gp, "rgmgp": _load_rgmgp, "dgmgp": _load_dgmgp}
    if kind not in loaders:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    return kind, loaders[kind](doc, path.parent)


# ---------------------------------------------------------------------------
# Design plans
# ---------------------------------------------------------------------------

def write_design_plan(out_dir, plan: DesignPlan, seed: int,
                      n_proposals: int) -> Path:
    """Write one CSV of design rows per node plus a manifest recording the
    sizes, the slice assignment, and the generator settings."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dag = plan.dag
    files = {}
    for t in dag.node_ids:
        fname = f"design_{dag.label(t)}.csv"
        write_points_csv(out / fname, plan.design(t))
        files[str(t)] = fname
    manifest = out / "design_plan.json"
    _dump_json({
        "seed": seed,
        "n_proposals": n_proposals,
        "slice_size": plan.slhd.n,
        "n_slices": plan.slhd.n_slices,
        "sizes": {str(t): plan.sizes[t] for t in dag.node_ids},
        "slices": {str(t): list(plan.slice_indices(t)) for t in dag.node_ids},
        "files": files,
    }, manifest)
    return manifest


# ---------------------------------------------------------------------------
# Metric and prediction tables
# ---------------------------------------------------------------------------

_FIXED_COLS = ("model", "seed", "rmse", "p_rmse")
_CSV_NAMES = {"p_rmse": "prmse"}


def _table_columns(rows) -> list[str]:
    cols = [c for c in _FIXED_COLS if any(c in r for r in rows)]
    extras = sorted({k for r in rows for k in r} - set(cols))
    return cols + extras


def _write_table(path, rows) -> None:
    rows = list(rows)
    cols = _table_columns(rows) if rows else list(_FIXED_COLS)
    _write_rows(
        Path(path), [_CSV_NAMES.get(c, c) for c in cols],
        ([r.get(c) for c in cols] for r in rows),
    )


def write_metrics_csv(path, report) -> None:
    """Per-seed metric rows as model,seed,rmse,prmse plus any sweep keys."""
    _write_table(path, report.rows)


def write_medians_csv(path, report) -> None:
    _write_table(path, report.medians())


def write_curves_csv(path, report) -> None:
    _write_table(path, report.curves)


def write_samples_csv(path, samples: np.ndarray) -> None:
    """Monte-Carlo draws as point_index,sample_index,value rows."""
    S = np.asarray(samples, dtype=float)
    _write_rows(
        Path(path), ["point_index", "sample_index", "value"],
        ((i, s, S[s, i]) for i in range(S.shape[1]) for s in range(S.shape[0])),
    )


def write_summary_csv(path, summary: PosteriorSummary) -> None:
    """Pointwise mean, variance and central 95% bounds; sample quantiles
    when draws are attached, Gaussian quantiles otherwise."""
    if summary.samples is not None:
        lo, hi = np.percentile(summary.samples, (2.5, 97.5), axis=0)
    else:
        sd = np.sqrt(summary.variance)
        lo, hi = summary.mean - _Z95 * sd, summary.mean + _Z95 * sd
    _write_rows(
        Path(path), ["point_index", "mean", "var", "q025", "q975"],
        ((i, summary.mean[i], summary.variance[i], lo[i], hi[i])
         for i in range(summary.mean.shape[0])),
    )


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------

def write_run_manifest(out_dir, command: str, config: dict, seed: int | None,
                       inputs, started: str | None = None) -> Path:
    """The single run_manifest.json for an output folder: the resolved
    command and config, the seed, the tool version, input digests, and
    start/finish timestamps."""
    finished = datetime.now(timezone.utc).isoformat()
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": package_version(),
        "inputs": {str(p): file_digest(p) for p in inputs},
        "started": started or finished,
        "finished": finished,
    }
    out = Path(out_dir)
    path = out / "run_manifest.json"
    _dump_json(doc, path)
    return path
