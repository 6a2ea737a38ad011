"""Command-line entry points: validate, design, fit, predict, bench.

Exit codes: 0 on success, 1 on missing or unparseable files, 2 on domain
errors (invalid DAG, non-nested designs, infeasible budgets). Every command
that writes into an output folder also writes a run_manifest.json there
recording the command line, the resolved configuration, the seed, the tool
version, and digests of the input files.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import serialize
from .bench import plan_from_config, run_from_config
from .design import allocate_sizes, nested_bfs_design, phi_criterion
from .dgmgp import McConfig, fit_dgmgp, predict_dgmgp
from .errors import GmgpError, UnknownNode
from .gmgp import fit_rgmgp, predict_rgmgp
from .gp import MleConfig, TrendBasis, fit_gp, gp_posterior

__all__ = ["main"]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _mle_config(doc: dict | None, **defaults) -> MleConfig:
    return MleConfig(**{**defaults, **(doc or {})})


def _read_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _print_node_table(dag) -> None:
    header = f"{'id':>4}  {'label':<10} {'cost':>8}  {'depth':>5}  {'|Pa|':>4}  {'|Des|':>5}"
    print(header)
    for t in dag.fit_order():
        print(
            f"{t:>4}  {dag.label(t):<10} {dag.cost(t):>8g}  "
            f"{dag.depth(t):>5}  {len(dag.parents(t)):>4}  "
            f"{len(dag.descendants(t)):>5}"
        )


def cmd_validate(args) -> int:
    dag = serialize.read_dag(args.dag)
    _print_node_table(dag)
    depth = max(dag.depth(t) for t in dag.node_ids)
    shape = "in-tree" if dag.is_in_tree() else "DAG (not an in-tree)"
    print(f"valid {shape}, {len(dag.node_ids)} nodes, depth {depth}")
    return 0


def _parse_sizes(raw: str, dag) -> dict[int, int]:
    parts = [int(p) for p in raw.split(",")]
    ids = sorted(dag.node_ids)
    if len(parts) != len(ids):
        raise ValueError(
            f"--sizes lists {len(parts)} values for {len(ids)} nodes "
            f"(order: ascending node id {ids})"
        )
    return dict(zip(ids, parts))


def cmd_design(args) -> int:
    started = _now()
    dag = serialize.read_dag(args.dag)
    phi_real = None
    if args.sizes is not None:
        sizes = _parse_sizes(args.sizes, dag)
    else:
        if args.budget is None or args.rho is None:
            raise ValueError("provide either --sizes or both --budget and --rho")
        alloc = allocate_sizes(dag, args.budget, args.rho, nu=args.nu,
                               dim=args.dim)
        sizes = alloc.sizes
        phi_real = alloc.phi_real
    plan = nested_bfs_design(dag, sizes, args.dim, seed=args.seed,
                             n_proposals=args.proposals)
    out = Path(args.out)
    serialize.write_design_plan(out, plan, args.seed, args.proposals)
    cost = sum(dag.cost(t) * sizes[t] for t in dag.node_ids)
    print(f"{'node':>4}  {'label':<10} {'n':>6}  {'slices':>12}")
    for t in dag.fit_order():
        idx = ",".join(str(i) for i in plan.slice_indices(t))
        print(f"{t:>4}  {dag.label(t):<10} {sizes[t]:>6}  [{idx}]")
    print(f"total cost {cost:g}" + (
        f" within budget {args.budget:g}" if args.budget is not None else ""))
    if args.rho is not None:
        phi = phi_criterion(dag, sizes, args.rho, args.nu, args.dim)
        line = f"phi {phi:.6g}"
        if phi_real is not None:
            line += f" (continuous optimum {phi_real:.6g})"
        print(line)
    serialize.write_run_manifest(
        out, command=args.command_line, seed=args.seed,
        config={"sizes": {str(t): sizes[t] for t in dag.node_ids},
                "dim": args.dim, "budget": args.budget, "rho": args.rho,
                "nu": args.nu, "proposals": args.proposals},
        inputs=[args.dag], started=started,
    )
    print(f"design plan written to {out}")
    return 0


def cmd_fit(args) -> int:
    started = _now()
    cfg = _read_config(args.config)
    bundle = serialize.read_bundle(args.bundle)
    family = cfg.get("family", "Matern52")
    trend = cfg.get("trend", "constant")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.json"
    t0 = time.perf_counter()
    if args.model == "gp":
        node = args.node if args.node is not None else bundle.dag.root_id
        mle = _mle_config(cfg.get("mle"))
        gp = fit_gp(bundle.data[node], family=family,
                    basis=TrendBasis(trend, bundle.dim), config=mle)
        raw = json.loads(Path(args.bundle).read_text())
        data_ref = Path(args.bundle).parent / raw["datasets"][str(node)]
        serialize.save_model(model_path, gp, data_ref)
        print(f"fitted gp on node {node} ({bundle.data[node].n} points), "
              f"nll {gp.nll:.6g}")
    elif args.model == "rgmgp":
        mle = _mle_config(cfg.get("mle"))
        model = fit_rgmgp(bundle, family=family, trend=trend, config=mle,
                          rho_basis=cfg.get("rho_basis", "constant"))
        serialize.save_model(model_path, model, args.bundle)
        for t in model.dag.fit_order():
            node = model.nodes[t]
            rho = ",".join(f"{r:.4g}" for r in node.rho[:, 0]) if node.rho.size else "-"
            print(f"node {t} ({model.dag.label(t)}): rho [{rho}], "
                  f"nll {node.gp.nll:.6g}")
    else:
        mle = _mle_config(cfg.get("mle"), method="lbfgs")
        model = fit_dgmgp(bundle, config=mle)
        serialize.save_model(model_path, model, args.bundle)
        print(f"fitted deep model, {model.n_parameters} kernel parameters "
              f"over {len(model.nodes)} nodes")
    serialize.write_run_manifest(
        out, command=args.command_line, seed=cfg.get("mle", {}).get("seed", 0),
        config={"model": args.model, "family": family, "trend": trend, **cfg},
        inputs=[args.bundle], started=started,
    )
    print(f"model written to {model_path} "
          f"({time.perf_counter() - t0:.2f}s)")
    return 0


def _node_summary(posts: dict, dag, node):
    target = dag.root_id if node is None else node
    if target not in posts:
        raise UnknownNode(f"node {target} is not part of the model")
    return posts[target]


def cmd_predict(args) -> int:
    started = _now()
    kind, model = serialize.load_model(args.model)
    X = serialize.read_points_csv(args.query)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "gp":
        if args.node is not None:
            raise GmgpError("--node applies to graphical models only")
        post = gp_posterior(model, X)
    elif kind == "rgmgp":
        post = _node_summary(predict_rgmgp(model, X), model.dag, args.node)
    else:
        mc = McConfig(n_samples=args.mc_samples, seed=args.seed)
        posts = predict_dgmgp(model, X, mc, jobs=args.jobs)
        post = _node_summary(posts, model.dag, args.node)
        serialize.write_samples_csv(out / "samples.csv", post.samples)
    serialize.write_summary_csv(out / "summary.csv", post)
    serialize.write_run_manifest(
        out, command=args.command_line, seed=args.seed,
        config={"model_kind": kind, "mc_samples": args.mc_samples,
                "jobs": args.jobs, "node": args.node},
        inputs=[args.model, args.query], started=started,
    )
    print(f"predicted {X.shape[0]} points -> {out / 'summary.csv'}")
    return 0


def cmd_bench(args) -> int:
    started = _now()
    cfg = _read_config(args.config)
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    if args.dry_run:
        for line in plan_from_config(cfg):
            print(line)
        print(f"{len(plan_from_config(cfg))} jobs planned, nothing written")
        return 0
    report = run_from_config(cfg, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    serialize.write_metrics_csv(out / "metrics.csv", report)
    serialize.write_medians_csv(out / "medians.csv", report)
    if report.curves:
        serialize.write_curves_csv(out / "curves.csv", report)
    serialize.write_run_manifest(
        out, command=args.command_line, seed=args.seed, config=cfg,
        inputs=[args.config], started=started,
    )
    for rec in report.medians():
        tag = " ".join(
            f"{k}={v}" for k, v in rec.items()
            if k not in ("median_rmse", "median_p_rmse", "n_seeds")
        )
        rm = rec.get("median_rmse")
        pm = rec.get("median_p_rmse")
        print(f"{tag}: median rmse {rm:.6g}"
              + (f", median p-rmse {pm:.6g}" if pm is not None else ""))
    print(f"{len(report.rows)} metric rows written to {out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmgp",
        description="Graphical multi-fidelity Gaussian-process emulation",
    )
    parser.add_argument("--version", action="version",
                        version=f"gmgp {serialize.package_version()}")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("validate", help="check a DAG file and print its shape")
    p.add_argument("dag", help="DAG JSON file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("design", help="build a nested sliced design")
    p.add_argument("--dag", required=True)
    p.add_argument("--sizes", help="per-node sample sizes, ascending node id")
    p.add_argument("--budget", type=float, help="total cost to allocate")
    p.add_argument("--rho", type=float, help="correlation decay for allocation")
    p.add_argument("--nu", type=float, default=2.5, help="smoothness exponent")
    p.add_argument("--dim", type=int, required=True, help="input dimension")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--proposals", type=int, default=10000,
                   help="maximin refinement proposals")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("fit", help="fit a model to a data bundle")
    p.add_argument("--model", required=True, choices=("gp", "rgmgp", "dgmgp"))
    p.add_argument("--bundle", required=True, help="bundle manifest JSON")
    p.add_argument("--config", help="fit settings JSON")
    p.add_argument("--node", type=int, help="node id for --model gp (default root)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="evaluate a saved model on query points")
    p.add_argument("--model", required=True, help="model JSON file")
    p.add_argument("--query", required=True, help="query points CSV")
    p.add_argument("--node", type=int, help="predict at this node (default root)")
    p.add_argument("--mc-samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="run a benchmark config")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", help="output folder (required unless --dry-run)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, help="override the config's seed list")
    p.add_argument("--dry-run", action="store_true",
                   help="print planned jobs and write nothing")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.cmd == "bench" and not args.dry_run and args.out is None:
        parser.error("bench requires --out unless --dry-run is given")
    args.command_line = shlex.join(["gmgp"] + argv)
    np.seterr(over="ignore", under="ignore")
    try:
        return args.func(args)
    except GmgpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
