"""Per-ray occlusion distributions.

Each camera ray of an input view carries a CDF ``t(z)`` over depth: the
probability that the ray is occluded before depth ``z``. ``t`` is a
mixture of logistics distributions, so the visibility of a point at depth
``z`` is ``1 - t(z)`` and costs a single evaluation. The raw (unconstrained)
parameters live on per-view pixel grids and are what the optimizer trains.

Raw parameter layout per ray: ``(3, n)`` rows ``[means, scales, weights]``.
The deterministic reparameterization keeps every decode valid:

* means:   ``near + (far - near) * sigmoid(raw)``
* scales:  ``sigma_min + softplus(raw)`` with ``sigma_min = 1e-4 * (far - near)``
* weights: ``softmax(raw)``
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit as sigmoid

from rayvis.counters import counters
from rayvis.errors import InputError, IntervalOrderError

NRAY_MAGIC = b"NRAY"
NRAY_VERSION = 1
SIGMA_MIN_FRACTION = 1e-4
DEFAULT_N_COMPONENTS = 2


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise InputError("softplus inverse needs positive input")
    return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30.0))))


def softmax(x, axis=-1):
    # the clamp keeps extreme logit gaps from underflowing to an exact
    # zero weight, so decoding stays a total function
    shifted = np.maximum(x - np.max(x, axis=axis, keepdims=True), -700.0)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class RawRayParams:
    """Unconstrained per-ray parameters; always decodes to a valid mixture."""

    means: np.ndarray
    scales: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        for name in ("means", "scales", "weights"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            object.__setattr__(self, name, arr)
        n = self.means.size
        if n < 1 or self.scales.size != n or self.weights.size != n:
            raise InputError("means, scales and weights must share a length >= 1")

    @property
    def n_components(self) -> int:
        return self.means.size

    def as_array(self) -> np.ndarray:
        """(3, n) array in the canonical [means, scales, weights] layout."""
        return np.stack([self.means, self.scales, self.weights])

    @staticmethod
    def from_array(arr: np.ndarray) -> "RawRayParams":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != 3:
            raise InputError("raw parameter array must have shape (3, n)")
        return RawRayParams(arr[0], arr[1], arr[2])


@dataclass(frozen=True)
class MixtureOfLogistics:
    """Occlusion CDF ``t(z) = sum_i w_i * sigmoid((z - mu_i) / sigma_i)``."""

    means: np.ndarray
    scales: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        for name in ("means", "scales", "weights"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            object.__setattr__(self, name, arr)
        if self.means.size < 1:
            raise InputError("need at least one mixture component")
        if np.any(self.scales <= 0):
            raise InputError("all scales must be positive")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise InputError("weights must be positive and sum to 1")

    @property
    def n_components(self) -> int:
        return self.means.size

    def cdf(self, z):
        return occlusion_cdf(self, z)


def decode(raw: RawRayParams, depth_range) -> MixtureOfLogistics:
    """Deterministic reparameterization from raw values to a valid mixture."""
    near, far = float(depth_range[0]), float(depth_range[1])
    if not near < far:
        raise InputError("need near < far")
    mu, sig, w = decode_arrays(raw.as_array(), near, far)
    return MixtureOfLogistics(mu, sig, w)


def decode_arrays(params: np.ndarray, near: float, far: float):
    """Vectorized decode of raw parameters (..., 3, n) -> (mu, sigma, w)."""
    span = far - near
    mu = near + span * sigmoid(params[..., 0, :])
    sig = SIGMA_MIN_FRACTION * span + softplus(params[..., 1, :])
    w = softmax(params[..., 2, :], axis=-1)
    return mu, sig, w


def decode_backward(params: np.ndarray, near: float, far: float, gmu, gsig, gw):
    """Pull gradients w.r.t. (mu, sigma, w) back to the raw layout (..., 3, n)."""
    span = far - near
    sm = sigmoid(params[..., 0, :])
    w = softmax(params[..., 2, :], axis=-1)
    out = np.empty_like(params)
    out[..., 0, :] = gmu * span * sm * (1.0 - sm)
    out[..., 1, :] = gsig * sigmoid(params[..., 1, :])
    inner = np.sum(gw * w, axis=-1, keepdims=True)
    out[..., 2, :] = w * (gw - inner)
    return out


def mixture_cdf(mu, sig, w, z, count: bool = True):
    """CDF of decoded parameter arrays; ``z`` broadcasts against (..., n)."""
    z = np.asarray(z, dtype=np.float64)
    t = np.sum(w * sigmoid((z[..., None] - mu) / sig), axis=-1)
    if count:
        counters.add("cdf_evals", t.size)
    return t


def mixture_cdf_param_grads(mu, sig, w, z):
    """CDF value and its gradients w.r.t. the constrained parameters."""
    z = np.asarray(z, dtype=np.float64)
    x = (z[..., None] - mu) / sig
    s = sigmoid(x)
    sp = s * (1.0 - s)
    t = np.sum(w * s, axis=-1)
    dmu = -w * sp / sig
    dsig = -w * sp * x / sig
    dw = s
    return t, dmu, dsig, dw


def occlusion_cdf(dist: MixtureOfLogistics, z):
    """Probability that the ray is occluded before depth ``z``."""
    z = np.asarray(z, dtype=np.float64)
    t = np.sum(dist.weights * sigmoid((z[..., None] - dist.means) / dist.scales), axis=-1)
    counters.add("cdf_evals", t.size)
    return t if t.ndim else float(t)


def visibility(dist: MixtureOfLogistics, z):
    """Probability that a point at depth ``z`` is visible: ``1 - t(z)``."""
    return 1.0 - occlusion_cdf(dist, z)


def hit_prob_interval(dist: MixtureOfLogistics, z0, z1):
    """Probability that the ray first hits a surface in ``[z0, z1]``."""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if np.any(z0 > z1):
        raise IntervalOrderError("interval endpoints must satisfy z0 <= z1")
    return occlusion_cdf(dist, z1) - occlusion_cdf(dist, z0)


def input_ray_alpha(dist: MixtureOfLogistics, z0, z1, return_saturated: bool = False):
    """Opacity of the interval ``(z0, z1)``: ``(t(z1) - t(z0)) / (1 - t(z0))``.

    When ``t(z0)`` has saturated to 1 the result clamps to 1 instead of
    raising, since this occurs transiently during optimization; pass
    ``return_saturated=True`` to observe the clamp.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if np.any(z0 > z1):
        raise IntervalOrderError("interval endpoints must satisfy z0 <= z1")
    t0 = occlusion_cdf(dist, z0)
    t1 = occlusion_cdf(dist, z1)
    saturated = t0 >= 1.0 - 1e-12
    denom = np.where(saturated, 1.0, 1.0 - t0)
    alpha = np.clip(np.where(saturated, 1.0, (t1 - t0) / denom), 0.0, 1.0)
    if alpha.ndim == 0:
        alpha = float(alpha)
        saturated = bool(saturated)
    if return_saturated:
        return alpha, saturated
    return alpha


def grad_cdf(raw: RawRayParams, z, depth_range) -> np.ndarray:
    """Gradient of ``t(z)`` w.r.t. all raw parameters, flattened (3 * n,).

    Order matches the canonical layout: means, then scales, then weight
    logits.
    """
    near, far = float(depth_range[0]), float(depth_range[1])
    if not near < far:
        raise InputError("need near < far")
    params = raw.as_array()
    mu, sig, w = decode_arrays(params, near, far)
    _, dmu, dsig, dw = mixture_cdf_param_grads(mu, sig, w, np.asarray(z, dtype=np.float64))
    return decode_backward(params, near, far, dmu, dsig, dw).reshape(-1)


@dataclass
class DistributionMap:
    """H x W grid of raw per-ray parameters for one input view.

    Reads may happen concurrently; parameter updates require exclusive
    access (single writer per optimization step).
    """

    view: int
    params: np.ndarray  # (H, W, 3, n) float64, raw values

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.ndim != 4 or self.params.shape[2] != 3:
            raise InputError("distribution map parameters must have shape (H, W, 3, n)")

    @property
    def height(self) -> int:
        return self.params.shape[0]

    @property
    def width(self) -> int:
        return self.params.shape[1]

    @property
    def n_components(self) -> int:
        return self.params.shape[3]

    def raw_at(self, iy: int, ix: int) -> RawRayParams:
        return RawRayParams.from_array(self.params[iy, ix])

    def decode_all(self, near: float, far: float):
        """Decode the whole grid to (mu, sigma, w) arrays of shape (H, W, n)."""
        return decode_arrays(self.params, near, far)

    def save(self, path):
        save_distribution_map(self, path)

    @staticmethod
    def load(path) -> "DistributionMap":
        return load_distribution_map(path)


def save_distribution_map(dist_map: DistributionMap, path):
    """Write the NRAY binary format (little-endian f32 raw values)."""
    header = struct.pack(
        "<4sIIIII",
        NRAY_MAGIC,
        NRAY_VERSION,
        dist_map.view,
        dist_map.height,
        dist_map.width,
        dist_map.n_components,
    )
    payload = dist_map.params.astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_distribution_map(path) -> DistributionMap:
    blob = Path(path).read_bytes()
    if len(blob) < 24:
        raise InputError(f"{path}: truncated distribution map file")
    magic, version, view, height, width, n = struct.unpack("<4sIIIII", blob[:24])
    if magic != NRAY_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    if version != NRAY_VERSION:
        raise InputError(f"{path}: unsupported format version {version}")
    expected = height * width * 3 * n * 4
    if len(blob) != 24 + expected:
        raise InputError(f"{path}: expected {24 + expected} bytes, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=24).astype(np.float64)
    return DistributionMap(view=view, params=data.reshape(height, width, 3, n))


@dataclass(frozen=True)
class DensityProfile:
    """Piecewise-constant volume density between strictly increasing depths.

    This is the slow reference parameterization of visibility: the alpha of
    segment ``i`` of length ``l_i`` is ``1 - exp(-relu(d_i) * l_i)`` and a
    visibility query multiplies the transparencies of every segment before
    the query depth.
    """

    knots: np.ndarray
    densities: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=np.float64)
        dens = np.asarray(self.densities, dtype=np.float64)
        if knots.ndim != 1 or knots.size < 2:
            raise InputError("need at least two knots")
        if np.any(np.diff(knots) <= 0):
            raise InputError("knots must be strictly increasing")
        if dens.shape != (knots.size - 1,):
            raise InputError("need one density per segment")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "densities", dens)

    @property
    def n_segments(self) -> int:
        return self.densities.size


def density_visibility_oracle(profile: DensityProfile, z) -> float:
    """Visibility at depth ``z`` from accumulated segment densities.

    Each query evaluates the density of every segment starting before
    ``z`` (partial overlap prorated), which is what makes this
    parameterization expensive; the counter records those evaluations.
    """
    z = np.asarray(z, dtype=np.float64)
    scalar = z.ndim == 0
    zq = np.atleast_1d(z)
    lo = profile.knots[:-1]
    hi = profile.knots[1:]
    overlap = np.clip(zq[:, None], lo, hi) - lo
    evaluated = zq[:, None] > lo
    counters.add("density_evals", int(evaluated.sum()))
    d = np.maximum(profile.densities, 0.0)
    v = np.exp(-np.sum(np.where(evaluated, d * overlap, 0.0), axis=1))
    return float(v[0]) if scalar else v


def fit_logistics_to_density(
    profile: DensityProfile,
    n_components: int,
    grid,
    n_restarts: int = 6,
    seed: int = 0,
) -> MixtureOfLogistics:
    """Least-squares fit of the mixture CDF to the density-based occlusion.

    Minimizes the squared residual of ``t(z)`` against
    ``1 - density_visibility_oracle(z)`` on the grid using this module's
    analytic gradients; returns the best of several seeded restarts.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid[0] > profile.knots[0] or grid[-1] < profile.knots[-1]:
        raise InputError("grid must cover the knot range")
    # pad the decode range so a component mean can move past the grid,
    # which is how "no surface in range" is representable
    span = float(profile.knots[-1] - profile.knots[0])
    near = float(profile.knots[0]) - 0.5 * span
    far = float(profile.knots[-1]) + 0.5 * span
    target = 1.0 - density_visibility_oracle(profile, grid)

    def objective(flat):
        params = flat.reshape(3, n_components)
        mu, sig, w = decode_arrays(params, near, far)
        t, dmu, dsig, dw = mixture_cdf_param_grads(mu, sig, w, grid)
        resid = t - target
        gmu = 2.0 * np.sum(resid[:, None] * dmu, axis=0)
        gsig = 2.0 * np.sum(resid[:, None] * dsig, axis=0)
        gw = 2.0 * np.sum(resid[:, None] * dw, axis=0)
        grad = decode_backward(params, near, far, gmu, gsig, gw)
        return float(np.sum(resid**2)), grad.reshape(-1)

    rng = np.random.default_rng(seed)
    anchor = _quantile_init(n_components, grid, target, near, far)
    inits = [anchor, _spread_init(n_components)]
    # half the restarts jitter around the data-driven anchor, half are global
    for k in range(max(0, n_restarts - 2)):
        if k % 2 == 0:
            inits.append(anchor + rng.normal(0.0, 0.5, size=(3, n_components)))
        else:
            inits.append(rng.normal(0.0, 1.5, size=(3, n_components)))
    best = None
    for init in inits:
        res = minimize(objective, np.asarray(init).reshape(-1), jac=True, method="L-BFGS-B")
        if best is None or res.fun < best.fun:
            best = res
    params = best.x.reshape(3, n_components)
    mu, sig, w = decode_arrays(params, near, far)
    return MixtureOfLogistics(mu, sig, w)


def _spread_init(n_components: int) -> np.ndarray:
    centers = (np.arange(n_components) + 0.5) / n_components
    init = np.zeros((3, n_components))
    init[0] = logit(centers)
    init[1] = -2.0
    return init


def _quantile_init(n_components, grid, target, near, far) -> np.ndarray:
    """Place component means at quantiles of the target's increments."""
    init = np.zeros((3, n_components))
    init[1] = -4.0
    jumps = np.clip(np.diff(target), 0.0, None)
    total = jumps.sum()
    if total < 1e-12:
        init[0] = 8.0  # no occlusion mass: push all means past the grid
        return init
    cdf = np.cumsum(jumps) / total
    quantiles = (np.arange(n_components) + 0.5) / n_components
    idx = np.searchsorted(cdf, quantiles)
    centers = grid[np.minimum(idx + 1, grid.size - 1)]
    u = np.clip((centers - near) / (far - near), 1e-6, 1 - 1e-6)
    init[0] = logit(u)
    return init
