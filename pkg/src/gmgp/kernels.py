"""Stationary correlation functions and the composite deep co-kriging kernel.

Kernels here are pure functions of their hyperparameters; the diagonal nugget
used for numerical conditioning is owned by the GP module, not the kernel.
All kernels use anisotropic (per-dimension) lengthscales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch

__all__ = [
    "KernelSpec",
    "DeepKernelSpec",
    "corr",
    "corr_matrix",
    "deep_kernel",
    "deep_kernel_matrix",
]

_SQRT5 = math.sqrt(5.0)

FAMILIES = ("SquaredExponential", "Matern52")


@dataclass(frozen=True)
class KernelSpec:
    """Stationary kernel: family, per-dimension lengthscales, variance.

    The correlation part is unit-diagonal; ``variance`` scales it to a
    covariance. Squared-exponential uses exp(-0.5 * sum((dx/l)^2)); Matern 5/2
    uses the tensor-product form prod_l (1 + sqrt5*u + 5u^2/3) exp(-sqrt5*u)
    with u = |dx_l| / l_l.
    """

    family: str
    lengthscales: tuple[float, ...]
    variance: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; use one of {FAMILIES}")
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "variance", float(self.variance))
        if not all(np.isfinite(v) and v > 0 for v in ls):
            raise ValueError(f"lengthscales must be finite and positive, got {ls}")
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)


@dataclass(frozen=True)
class DeepKernelSpec:
    """Composite kernel over augmented inputs [x, z].

    K([x,z], [x',z']) = K_outer(x,x') * (sigma_lin^2 * z.z' + K_z(z,z'))
                        + K_bias(x,x')

    where K_outer and K_bias are squared-exponential over the original inputs
    x and K_z is squared-exponential over the parent outputs z. The linear
    z-term lets the model recover a constant-weight combination of parents
    exactly; the z-SE term captures nonlinear warping of parent outputs.
    """

    x_outer: KernelSpec
    z_linear_variance: float
    z_se: KernelSpec
    x_bias: KernelSpec

    def __post_init__(self):
        object.__setattr__(self, "z_linear_variance", float(self.z_linear_variance))
        for name in ("x_outer", "z_se", "x_bias"):
            spec = getattr(self, name)
            if spec.family != "SquaredExponential":
                raise ValueError(f"{name} must be SquaredExponential, got {spec.family}")
        if not self.z_linear_variance > 0:
            raise ValueError("z_linear_variance must be positive")
        if self.x_outer.dim != self.x_bias.dim:
            raise DimensionMismatch(
                f"x_outer dim {self.x_outer.dim} != x_bias dim {self.x_bias.dim}"
            )

    @property
    def x_dim(self) -> int:
        return self.x_outer.dim

    @property
    def z_dim(self) -> int:
        return self.z_se.dim


def _as_2d(X, dim: int, name: str) -> np.ndarray:
    A = np.atleast_2d(np.asarray(X, dtype=float))
    if A.shape[1] != dim:
        raise DimensionMismatch(f"{name} has {A.shape[1]} columns, kernel expects {dim}")
    return A


def corr_matrix(spec: KernelSpec, X, X2=None) -> np.ndarray:
    """Correlation matrix between the rows of X and X2 (X2 defaults to X).

    Entry (i, j) is the unit-diagonal correlation of the kernel family at
    (X[i], X2[j]); multiply by ``spec.variance`` for covariances.
    """
    A = _as_2d(X, spec.dim, "X")
    B = A if X2 is None else _as_2d(X2, spec.dim, "X2")
    ls = np.asarray(spec.lengthscales)
    # Accumulate one dimension at a time: differences of identical rows stay
    # exactly zero, so corr(x, x) == 1 without cleanup, and no (n, m, d)
    # temporary is formed.
    if spec.family == "SquaredExponential":
        sq = np.zeros((A.shape[0], B.shape[0]))
        for l in range(spec.dim):
            delta = (A[:, l, None] - B[None, :, l]) / ls[l]
            sq += delta * delta
        return np.exp(-0.5 * sq)
    out = np.ones((A.shape[0], B.shape[0]))
    for l in range(spec.dim):
        u = np.abs(A[:, l, None] - B[None, :, l]) * (_SQRT5 / ls[l])
        out *= (1.0 + u + u * u / 3.0) * np.exp(-u)
    return out


def corr(spec: KernelSpec, x, x2) -> float:
    """Scalar correlation in (0, 1]; corr(x, x) == 1 exactly."""
    return float(corr_matrix(spec, np.atleast_2d(x), np.atleast_2d(x2))[0, 0])


def deep_kernel_matrix(spec: DeepKernelSpec, X, Z, X2=None, Z2=None) -> np.ndarray:
    """Covariance matrix of the composite kernel between augmented rows.

    X, Z are the original inputs and parent outputs of the left set; X2, Z2
    of the right set (defaulting to the left). Row counts of X and Z must
    agree.
    """
    A = _as_2d(X, spec.x_dim, "X")
    Za = _as_2d(Z, spec.z_dim, "Z")
    if A.shape[0] != Za.shape[0]:
        raise DimensionMismatch(f"X has {A.shape[0]} rows but Z has {Za.shape[0]}")
    if (X2 is None) != (Z2 is None):
        raise DimensionMismatch("X2 and Z2 must be supplied together")
    B = A if X2 is None else _as_2d(X2, spec.x_dim, "X2")
    Zb = Za if Z2 is None else _as_2d(Z2, spec.z_dim, "Z2")
    if B.shape[0] != Zb.shape[0]:
        raise DimensionMismatch(f"X2 has {B.shape[0]} rows but Z2 has {Zb.shape[0]}")

    outer = spec.x_outer.variance * corr_matrix(spec.x_outer, A, B)
    lin = spec.z_linear_variance * (Za @ Zb.T)
    z_se = spec.z_se.variance * corr_matrix(spec.z_se, Za, Zb)
    bias = spec.x_bias.variance * corr_matrix(spec.x_bias, A, B)
    return outer * (lin + z_se) + bias


def deep_kernel(spec: DeepKernelSpec, x, z, x2, z2) -> float:
    """Scalar evaluation of the composite kernel at ([x, z], [x2, z2])."""
    return float(
        deep_kernel_matrix(
            spec, np.atleast_2d(x), np.atleast_2d(z), np.atleast_2d(x2), np.atleast_2d(z2)
        )[0, 0]
    )


def deep_kernel_diagonal(spec: DeepKernelSpec, X, Z) -> np.ndarray:
    """Prior variances k([x,z],[x,z]) for each augmented row, without the
    full Gram matrix."""
    A = _as_2d(X, spec.x_dim, "X")
    Za = _as_2d(Z, spec.z_dim, "Z")
    lin = spec.z_linear_variance * np.sum(Za * Za, axis=1)
    return spec.x_outer.variance * (lin + spec.z_se.variance) + spec.x_bias.variance
