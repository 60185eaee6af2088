"""Hitting-probability-weighted spherical-harmonics color fitting.

At a sample point, each input view contributes a (direction, color) pair
weighted by the probability that the view's ray first hits a surface right
there. Fitting real spherical harmonics to those weighted samples gives a
view-dependent color function; occluded views carry zero weight and cannot
disturb the fit.

Basis convention: real spherical harmonics, components ordered by degree l
ascending and order m from -l to l within each degree. Degree 0..3 only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from rayvis.errors import DegenerateFitError, InputError

MAX_DEGREE = 3
DEFAULT_DEGREE_PENALTIES = (0.0, 0.001, 0.005, 0.01)
_COND_LIMIT = 1e12

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)


@dataclass(frozen=True)
class SHBasis:
    """Real spherical harmonics up to ``degree`` (0..3)."""

    degree: int = MAX_DEGREE

    def __post_init__(self):
        if not 0 <= self.degree <= MAX_DEGREE:
            raise InputError(f"SH degree must be in [0, {MAX_DEGREE}]")

    @property
    def basis_size(self) -> int:
        return (self.degree + 1) ** 2


@dataclass(frozen=True)
class SHRegularizer:
    """Per-degree diagonal penalties, expanded over the basis components."""

    degree_penalties: Sequence[float] = DEFAULT_DEGREE_PENALTIES

    def __post_init__(self):
        pen = tuple(float(p) for p in self.degree_penalties)
        if any(p < 0 for p in pen):
            raise InputError("regularizer penalties must be nonnegative")
        object.__setattr__(self, "degree_penalties", pen)

    def diagonal(self, basis: SHBasis) -> np.ndarray:
        diag = np.zeros(basis.basis_size)
        for ell in range(basis.degree + 1):
            pen = self.degree_penalties[ell] if ell < len(self.degree_penalties) else 0.0
            diag[ell * ell : (ell + 1) * (ell + 1)] = pen
        return diag


@dataclass(frozen=True)
class SHCoefficients:
    """Fitted coefficients, one column per color channel: shape (basis, 3)."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[1] != 3 or not np.all(np.isfinite(vals)):
            raise InputError("coefficients must be a finite (basis, 3) array")
        object.__setattr__(self, "values", vals)

    @property
    def basis_size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class WeightedColorSample:
    """One view's contribution: unit direction, color, nonnegative weight."""

    direction: np.ndarray
    color: np.ndarray
    weight: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise InputError("sample direction must be unit length")
        c = np.asarray(self.color, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(c)):
            raise InputError("sample color must be finite")
        if not (np.isfinite(self.weight) and self.weight >= 0):
            raise InputError("sample weight must be nonnegative")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "color", c)


def sh_basis_values(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Basis values for unit directions (..., 3) -> (..., (degree+1)**2)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    cols = [np.full(x.shape, _C0)]
    if degree >= 1:
        cols += [-_C1 * y, _C1 * z, -_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            _C2[0] * x * y,
            _C2[1] * y * z,
            _C2[2] * (2.0 * zz - xx - yy),
            _C2[3] * x * z,
            _C2[4] * (xx - yy),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            _C3[0] * y * (3.0 * xx - yy),
            _C3[1] * x * y * z,
            _C3[2] * y * (4.0 * zz - xx - yy),
            _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            _C3[4] * x * (4.0 * zz - xx - yy),
            _C3[5] * z * (xx - yy),
            _C3[6] * x * (xx - 3.0 * yy),
        ]
    return np.stack(cols, axis=-1)


def sh_eval(basis: SHBasis, direction) -> np.ndarray:
    """Evaluate all basis functions at one unit direction."""
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise InputError("direction must be unit length")
    return sh_basis_values(basis.degree, d)


def sh_fit(
    samples: Sequence[WeightedColorSample],
    basis: SHBasis,
    reg: SHRegularizer = SHRegularizer(),
) -> SHCoefficients:
    """Solve the regularized weighted least squares for the coefficients.

    Minimizes ``sum_j w_j * |B(r_j) theta - c_j|^2 + theta' Lambda theta``
    per channel via the normal equations. The three channels share one
    factorization. Falls back to the pseudo-inverse when the system is
    ill-conditioned; raises only when all weights are zero and the
    regularizer vanishes.
    """
    if not samples:
        raise InputError("need at least one sample")
    dirs = np.stack([s.direction for s in samples])
    colors = np.stack([s.color for s in samples])
    weights = np.array([s.weight for s in samples], dtype=np.float64)
    lam = reg.diagonal(basis)
    if np.all(weights == 0) and np.all(lam == 0):
        raise DegenerateFitError("all weights zero and no regularization")
    b_mat = sh_basis_values(basis.degree, dirs)
    a = b_mat.T @ (weights[:, None] * b_mat) + np.diag(lam)
    rhs = b_mat.T @ (weights[:, None] * colors)
    cond = np.linalg.cond(a)
    if np.isfinite(cond) and cond <= _COND_LIMIT:
        theta = np.linalg.solve(a, rhs)
    else:
        theta = np.linalg.pinv(a) @ rhs
    return SHCoefficients(theta)


def sh_color(coeffs: SHCoefficients, direction) -> np.ndarray:
    """Color at a unit viewing direction; no clamping is applied here."""
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise InputError("direction must be unit length")
    degree = int(round(np.sqrt(coeffs.basis_size))) - 1
    return sh_basis_values(degree, d) @ coeffs.values


def sh_fit_batched(y: np.ndarray, weights: np.ndarray, colors: np.ndarray, lam: np.ndarray):
    """Batched normal-equation solves for the render pipeline.

    ``y``: (M, J, nb) basis rows, ``weights``: (M, J), ``colors``: (M, J, 3),
    ``lam``: (nb,). Returns ``(theta, a)`` with theta (M, nb, 3); ``a`` is
    kept for the backward pass through the solve.
    """
    wy = weights[..., None] * y
    yt = np.ascontiguousarray(np.swapaxes(wy, -1, -2))
    a = np.matmul(yt, y)
    a[..., np.arange(lam.size), np.arange(lam.size)] += lam
    rhs = np.matmul(yt, colors)
    try:
        theta = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError:
        theta = np.empty_like(rhs)
        for m in range(a.shape[0]):
            try:
                theta[m] = np.linalg.solve(a[m], rhs[m])
            except np.linalg.LinAlgError:
                theta[m] = np.linalg.pinv(a[m]) @ rhs[m]
    return theta, a
