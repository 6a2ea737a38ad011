"""Graphical multi-fidelity Gaussian-process emulation.

Models for networks of simulators at different fidelities connected by a
directed acyclic graph: a recursive linear formulation with closed-form
posteriors, an exact joint predictor for general DAGs, a deep variant whose
nodes see parent outputs through the kernel, budget-aware nested designs,
and a benchmark harness.
"""

from .bench import (
    HarnessConfig,
    MetricReport,
    MODEL_NAMES,
    TestFamily,
    eval_family,
    forrester_1d,
    friedman_5d,
    load_family,
    p_rmse_gaussian,
    rmse,
    run_design_study,
    run_experiment,
    run_from_config,
    welch_20d,
    window_average,
)
from .dag import MultiFidelityDag, validate
from .design import (
    AllocationResult,
    DesignPlan,
    Slhd,
    allocate_sizes,
    fill_distance,
    generate_slhd,
    nested_bfs_design,
    phi_criterion,
)
from .dgmgp import (
    FittedDeepGmgp,
    FittedDeepNode,
    McConfig,
    fit_dgmgp,
    p_rmse_samples,
    predict_dgmgp,
    sample_quantiles,
)
from .errors import *  # noqa: F401,F403
from .errors import __all__ as _errors_all
from .gmgp import (
    FittedGmgp,
    FittedNode,
    GmgpDataBundle,
    GmgpParams,
    NodeParams,
    assemble_rgmgp,
    cov_block,
    fit_rgmgp,
    markov_check,
    predict_joint_gmgp,
    predict_rgmgp,
    prior_cov,
    prior_mean,
)
from .gp import (
    FittedGp,
    MleConfig,
    NodeDataset,
    PosteriorSummary,
    TrendBasis,
    assemble_deep_gp,
    assemble_gp,
    concentrated_nll,
    fit_deep_gp,
    fit_gp,
    gp_posterior,
)
from .kernels import DeepKernelSpec, KernelSpec, corr, corr_matrix

__version__ = "0.1.0"

__all__ = [
    "MultiFidelityDag",
    "validate",
    "KernelSpec",
    "DeepKernelSpec",
    "corr",
    "corr_matrix",
    "TrendBasis",
    "NodeDataset",
    "MleConfig",
    "FittedGp",
    "PosteriorSummary",
    "fit_gp",
    "fit_deep_gp",
    "assemble_gp",
    "assemble_deep_gp",
    "gp_posterior",
    "concentrated_nll",
    "GmgpDataBundle",
    "NodeParams",
    "GmgpParams",
    "FittedNode",
    "FittedGmgp",
    "fit_rgmgp",
    "assemble_rgmgp",
    "predict_rgmgp",
    "predict_joint_gmgp",
    "prior_mean",
    "prior_cov",
    "cov_block",
    "markov_check",
    "McConfig",
    "FittedDeepNode",
    "FittedDeepGmgp",
    "fit_dgmgp",
    "predict_dgmgp",
    "sample_quantiles",
    "Slhd",
    "DesignPlan",
    "AllocationResult",
    "generate_slhd",
    "nested_bfs_design",
    "phi_criterion",
    "allocate_sizes",
    "fill_distance",
    "TestFamily",
    "MODEL_NAMES",
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
    "run_experiment",
    "run_design_study",
    "run_from_config",
] + list(_errors_all)
