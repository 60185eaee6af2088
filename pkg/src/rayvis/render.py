"""Occlusion-aware volume rendering of query views.

For every sample point on a query ray, each working view contributes an
interval opacity and a visibility from its per-pixel occlusion CDF. The
visibility-weighted opacities composite into hitting probabilities, and a
hitting-probability-weighted spherical-harmonics fit of the working views'
colors gives the sample color. Two sampling modes exist: uniform depths,
and coarse-to-fine where a cheap coarse pass (CDF evaluations only, no
color fits) places the few fine samples by deterministic stratified
inverse-CDF sampling of the coarse hitting mass.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit as sigmoid

from rayvis.camera import PinholeCamera, Ray
from rayvis.counters import counters
from rayvis.errors import ConfigurationError, DimensionMismatchError, InputError
from rayvis.raydist import DistributionMap, decode_arrays
from rayvis.shcolor import (
    DEFAULT_DEGREE_PENALTIES,
    SHBasis,
    SHRegularizer,
    sh_basis_values,
    sh_fit_batched,
)

EPS_VISIBILITY = 1e-6
# rays whose coarse hitting mass stays below this render as pure background;
# the mass bound is also the color error bound of skipping them
_FINE_MASS_FLOOR = 1e-3
# fine-pass interval lengths are capped at this fraction of the coarse bin
# width: transferring long intervals onto input rays manufactures opacity
# from unrelated geometry far behind the sample
_FINE_WIDTH_CAP = 0.5
_SATURATION = 1.0 - 1e-12


@dataclass(frozen=True)
class RenderConfig:
    """Sampling and shading options for rendering one query view."""

    k_coarse: int = 64
    k_fine: int = 64
    mode: str = "uniform"
    n_working: int = 8
    background: tuple = (0.0, 0.0, 0.0)
    sh_degree: int = 3
    sh_penalties: tuple = DEFAULT_DEGREE_PENALTIES
    bilinear_params: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.k_coarse < 2:
            raise ConfigurationError("k_coarse must be at least 2")
        if self.k_fine < 0:
            raise ConfigurationError("k_fine must be nonnegative")
        if self.mode not in ("uniform", "coarse_to_fine"):
            raise ConfigurationError(f"unknown sampling mode '{self.mode}'")
        if self.n_working < 1:
            raise ConfigurationError("need at least one working view")


@dataclass
class RenderView:
    """One reference view: camera, its distribution map, and its image."""

    index: int
    camera: PinholeCamera
    dmap: DistributionMap
    image: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        cam = self.camera
        if self.dmap.height != cam.height or self.dmap.width != cam.width:
            raise DimensionMismatchError(
                f"view {self.index}: map is {self.dmap.height}x{self.dmap.width}, "
                f"camera is {cam.height}x{cam.width}"
            )
        if self.image.shape != (cam.height, cam.width, 3):
            raise DimensionMismatchError(
                f"view {self.index}: image shape {self.image.shape} does not match camera"
            )


@dataclass
class _ViewState:
    """Per-view data prepared for a render: decoded parameter grids.

    ``jac_mean``/``jac_scale`` are the elementwise derivatives of the
    decoded mean and scale w.r.t. their raw parameters, precomputed on the
    pixel grid so the backward pass only gathers.
    """

    view: RenderView
    mu: np.ndarray
    sig: np.ndarray
    w: np.ndarray
    jac_mean: np.ndarray = None
    jac_scale: np.ndarray = None

    @property
    def camera(self) -> PinholeCamera:
        return self.view.camera


@dataclass
class WorkingSet:
    """Query camera plus its nearest reference views and depth bounds."""

    query_camera: PinholeCamera
    views: list
    near: float
    far: float

    @property
    def n_views(self) -> int:
        return len(self.views)


@dataclass
class SampleSet:
    """Per-ray sample bookkeeping: depths, bin widths, alpha/hit/color slots."""

    depths: np.ndarray
    widths: np.ndarray
    alphas: np.ndarray
    hit_probs: np.ndarray
    colors: np.ndarray


def select_working_views(
    views: Sequence[RenderView],
    query_camera: PinholeCamera,
    n_working: int,
    near: float,
    far: float,
    query_index: Optional[int] = None,
) -> WorkingSet:
    """Pick the ``n_working`` reference views nearest the query camera.

    Sorted by camera-center distance with ties broken by view index. When
    the query is itself a reference view (matched by ``query_index`` or by
    identical camera), it is excluded from its own working set.
    """
    candidates = []
    qc = query_camera.center
    for view in views:
        if query_index is not None and view.index == query_index:
            continue
        if _same_camera(view.camera, query_camera):
            continue
        dist = float(np.linalg.norm(view.camera.center - qc))
        candidates.append((dist, view.index, view))
    if n_working > len(candidates):
        raise ConfigurationError(
            f"requested {n_working} working views but only {len(candidates)} available"
        )
    candidates.sort(key=lambda item: (item[0], item[1]))
    chosen = [item[2] for item in candidates[:n_working]]
    states = []
    span = far - near
    for view in chosen:
        params = view.dmap.params
        mu, sig, w = decode_arrays(params, near, far)
        sm = sigmoid(params[..., 0, :])
        jac_mean = span * sm * (1.0 - sm)
        jac_scale = sigmoid(params[..., 1, :])
        states.append(_ViewState(view, mu, sig, w, jac_mean, jac_scale))
    return WorkingSet(query_camera, states, float(near), float(far))


def _same_camera(a: PinholeCamera, b: PinholeCamera) -> bool:
    return (
        a.width == b.width
        and a.height == b.height
        and (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)
        and np.array_equal(a.rotation, b.rotation)
        and np.array_equal(a.translation, b.translation)
    )


def bilinear_sample(image: np.ndarray, u, v) -> np.ndarray:
    """Bilinear lookup at continuous image coordinates (pixel centers at +0.5)."""
    h, w = image.shape[:2]
    x = np.asarray(u, dtype=np.float64) - 0.5
    y = np.asarray(v, dtype=np.float64) - 0.5
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(x - x0, 0.0, 1.0)[..., None]
    fy = np.clip(y - y0, 0.0, 1.0)[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _view_lookup(state: _ViewState, points: np.ndarray, near: float, far: float,
                 bilinear_params: bool):
    """Project points (..., 3) onto one view and gather its distributions.

    Returns (mu, sig, w, depth, uv, valid, pix) where valid marks points in
    front of the camera that project inside the image.
    """
    cam = state.camera
    pc = points @ cam.rotation.T + cam.translation
    z = pc[..., 2]
    safe_z = np.where(z > 0, z, 1.0)
    u = cam.fx * pc[..., 0] / safe_z + cam.cx
    v = cam.fy * pc[..., 1] / safe_z + cam.cy
    valid = (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    ix = np.clip(np.floor(u).astype(np.int64), 0, cam.width - 1)
    iy = np.clip(np.floor(v).astype(np.int64), 0, cam.height - 1)
    if bilinear_params:
        raw = _bilinear_raw_params(state.view.dmap.params, u, v)
        mu, sig, w = decode_arrays(raw, near, far)
    else:
        mu = state.mu[iy, ix]
        sig = state.sig[iy, ix]
        w = state.w[iy, ix]
    return mu, sig, w, z, (u, v), valid, (iy, ix)


def _bilinear_raw_params(params: np.ndarray, u, v) -> np.ndarray:
    h, w = params.shape[:2]
    x = np.asarray(u, dtype=np.float64) - 0.5
    y = np.asarray(v, dtype=np.float64) - 0.5
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(x - x0, 0.0, 1.0)[..., None, None]
    fy = np.clip(y - y0, 0.0, 1.0)[..., None, None]
    top = params[y0, x0] * (1 - fx) + params[y0, x1] * fx
    bot = params[y1, x0] * (1 - fx) + params[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _cdf(mu, sig, w, z):
    """Mixture CDF with z broadcast against trailing component axis."""
    return np.sum(w * sigmoid((z[..., None] - mu) / sig), axis=-1)


@dataclass
class ChunkState:
    """All intermediates of one forward chunk, kept for the backward pass."""

    origins: np.ndarray
    dirs: np.ndarray
    z: np.ndarray
    widths: np.ndarray
    colors_out: Optional[np.ndarray]
    alpha_hat: np.ndarray
    h_hat: np.ndarray
    sample_colors: Optional[np.ndarray]
    active: Optional[np.ndarray]
    denom: Optional[np.ndarray]
    per_view: list = field(default_factory=list)
    sh: Optional[tuple] = None
    vis: Optional[np.ndarray] = None
    alpha_tilde: Optional[np.ndarray] = None
    h_w: Optional[np.ndarray] = None
    fine_keep: Optional[np.ndarray] = None


def _chunk_forward(working: WorkingSet, origins, dirs, z, widths, config: RenderConfig,
                   with_colors: bool = True, keep_state: bool = False):
    """Render a chunk of rays at the given per-ray depths.

    ``z`` and ``widths`` have shape (B, K). With ``with_colors=False`` only
    the alpha/hitting-probability stage runs (the coarse pass).
    """
    background = np.asarray(config.background, dtype=np.float64)
    npts = z.size
    points = origins[:, None, :] + z[..., None] * dirs[:, None, :]
    v_stack, alpha_stack, hw_stack, uv_list = [], [], [], []
    per_view = []
    for state in working.views:
        mu, sig, w, depth, uv, valid, pix = _view_lookup(
            state, points, working.near, working.far, config.bilinear_params
        )
        uv_list.append(uv)
        x_a = (depth[..., None] - mu) / sig
        s_a = sigmoid(x_a)
        t_a = np.sum(w * s_a, axis=-1)
        x_b = (depth[..., None] + widths[..., None] - mu) / sig
        s_b = sigmoid(x_b)
        t_b = np.sum(w * s_b, axis=-1)
        counters.add("cdf_evals", 2 * npts)
        vis = np.where(valid, 1.0 - t_a, 0.0)
        saturated = t_a >= _SATURATION
        denom = np.where(saturated, 1.0, 1.0 - t_a)
        alpha_raw = np.where(saturated, 1.0, (t_b - t_a) / denom)
        alpha = np.clip(alpha_raw, 0.0, 1.0)
        alpha = np.where(valid, alpha, 0.0)
        h_w = np.where(valid, t_b - t_a, 0.0)
        v_stack.append(vis)
        alpha_stack.append(alpha)
        hw_stack.append(h_w)
        if keep_state:
            per_view.append(
                dict(depth=depth, uv=uv, valid=valid, pix=pix, t_a=t_a, t_b=t_b,
                     x_a=x_a, s_a=s_a, x_b=x_b, s_b=s_b,
                     saturated=saturated, clamped=(alpha_raw < 0) | (alpha_raw > 1))
            )
    vis = np.stack(v_stack, axis=-1)       # (B, K, J)
    alpha_tilde = np.stack(alpha_stack, axis=-1)
    h_w = np.stack(hw_stack, axis=-1)
    denom = vis.sum(axis=-1)
    good = denom >= EPS_VISIBILITY
    safe = np.where(good, denom, 1.0)
    alpha_hat = np.where(good, np.sum(alpha_tilde * vis, axis=-1) / safe, 0.0)
    trans = np.cumprod(1.0 - alpha_hat, axis=-1)
    trans = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
    h_hat = trans * alpha_hat

    if not with_colors:
        state = ChunkState(origins, dirs, z, widths, None, alpha_hat, h_hat,
                           None, None, denom)
        if keep_state:
            state.per_view = per_view
            state.vis = vis
            state.alpha_tilde = alpha_tilde
            state.h_w = h_w
        return state

    counters.add("color_samples", npts)
    active = np.any(h_w >= EPS_VISIBILITY, axis=-1)
    sample_colors = np.broadcast_to(background, z.shape + (3,)).copy()
    sh_state = None
    if np.any(active):
        counters.add("sh_fits", int(active.sum()))
        apoints = points[active]
        weights = h_w[active]
        in_dirs, in_colors = [], []
        for j, state in enumerate(working.views):
            offs = apoints - state.camera.center
            norm = np.linalg.norm(offs, axis=-1, keepdims=True)
            in_dirs.append(offs / np.maximum(norm, 1e-30))
            uv_u = uv_list[j][0][active]
            uv_v = uv_list[j][1][active]
            in_colors.append(bilinear_sample(state.view.image, uv_u, uv_v))
        y_in = sh_basis_values(config.sh_degree, np.stack(in_dirs, axis=1))  # (M,J,nb)
        colors_in = np.stack(in_colors, axis=1)                              # (M,J,3)
        lam = SHRegularizer(config.sh_penalties).diagonal(SHBasis(config.sh_degree))
        theta, a_mats = sh_fit_batched(y_in, weights, colors_in, lam)
        ray_active = np.nonzero(active)[0]
        y_q = sh_basis_values(config.sh_degree, dirs)                        # (B,nb)
        y_q_active = y_q[ray_active]
        sample_colors[active] = np.matmul(y_q_active[:, None, :], theta)[:, 0, :]
        sh_state = (y_in, colors_in, weights, theta, a_mats, y_q_active)

    h_sum = h_hat.sum(axis=-1)
    c_o = np.matmul(h_hat[:, None, :], sample_colors)[:, 0, :] + background * (1.0 - h_sum)[:, None]
    state = ChunkState(origins, dirs, z, widths, c_o, alpha_hat, h_hat,
                       sample_colors, active, denom)
    if keep_state:
        state.per_view = per_view
        state.vis = vis
        state.alpha_tilde = alpha_tilde
        state.h_w = h_w
        state.sh = sh_state
    return state


def _uniform_depths(near: float, far: float, k: int, n_rays: int):
    step = (far - near) / k
    z = near + step * np.arange(k)
    z = np.broadcast_to(z, (n_rays, k)).copy()
    widths = np.full((n_rays, k), step)
    return z, widths


def _fine_depths(z_coarse, widths_coarse, h_hat, k_fine: int, far: float):
    """Deterministic stratified inverse-CDF placement of fine samples.

    Rays whose coarse hitting mass is below the floor get no fine samples.
    Returns (z_fine, widths_fine, keep_mask).
    """
    mass = h_hat.sum(axis=-1)
    keep = mass >= _FINE_MASS_FLOOR
    if k_fine == 0 or not np.any(keep):
        if k_fine == 0:
            keep = np.zeros(z_coarse.shape[0], dtype=bool)
        shape = (z_coarse.shape[0], 0)
        return np.zeros(shape), np.zeros(shape), keep
    pdf = h_hat[keep] / mass[keep, None]
    cdf = np.cumsum(pdf, axis=-1)
    u = (np.arange(k_fine) + 0.5) / k_fine
    # first coarse bin whose cumulative mass reaches u
    idx = np.sum(cdf[:, None, :] < u[None, :, None], axis=-1)
    idx = np.minimum(idx, pdf.shape[1] - 1)
    rows = np.arange(pdf.shape[0])[:, None]
    cdf_prev = np.concatenate([np.zeros((pdf.shape[0], 1)), cdf[:, :-1]], axis=1)
    bin_pdf = np.maximum(pdf[rows, idx], 1e-300)
    frac = np.clip((u[None, :] - cdf_prev[rows, idx]) / bin_pdf, 0.0, 1.0)
    z_fine = z_coarse[keep][rows, idx] + frac * widths_coarse[keep][rows, idx]
    # enforce strictly increasing depths
    z_fine = np.maximum.accumulate(z_fine, axis=-1)
    bump = np.arange(k_fine) * 1e-12
    z_fine = z_fine + bump
    widths_fine = np.concatenate(
        [np.diff(z_fine, axis=-1), np.maximum(far - z_fine[:, -1:], 0.0)], axis=1
    )
    cap = _FINE_WIDTH_CAP * float(widths_coarse.reshape(-1)[0])
    widths_fine = np.minimum(widths_fine, cap)
    return z_fine, widths_fine, keep


def render_rays(working: WorkingSet, origins, dirs, config: RenderConfig,
                keep_state: bool = False):
    """Render a batch of rays; returns the final ChunkState (uniform or fine)."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    if config.mode == "uniform":
        z, widths = _uniform_depths(working.near, working.far, config.k_coarse, n)
        return _chunk_forward(working, origins, dirs, z, widths, config,
                              keep_state=keep_state)
    # coarse pass: alphas only, no color fits
    z_c, w_c = _uniform_depths(working.near, working.far, config.k_coarse, n)
    coarse = _chunk_forward(working, origins, dirs, z_c, w_c, config, with_colors=False)
    z_f, w_f, keep = _fine_depths(z_c, w_c, coarse.h_hat, config.k_fine, working.far)
    background = np.asarray(config.background, dtype=np.float64)
    c_o = np.broadcast_to(background, (n, 3)).copy()
    alpha = np.zeros((n, config.k_fine))
    h_hat = np.zeros((n, config.k_fine))
    scol = np.broadcast_to(background, (n, config.k_fine, 3)).copy()
    z_full = np.zeros((n, config.k_fine))
    wid_full = np.zeros((n, config.k_fine))
    if np.any(keep):
        fine = _chunk_forward(working, origins[keep], dirs[keep], z_f, w_f, config,
                              keep_state=keep_state)
        c_o[keep] = fine.colors_out
        alpha[keep] = fine.alpha_hat
        h_hat[keep] = fine.h_hat
        scol[keep] = fine.sample_colors
        z_full[keep] = fine.z
        wid_full[keep] = fine.widths
    state = ChunkState(origins, dirs, z_full, wid_full, c_o, alpha, h_hat, scol,
                       None, None)
    state.fine_keep = keep
    return state


def render_rays_backward(working: WorkingSet, state: ChunkState, config: RenderConfig,
                         dc_o: np.ndarray, dh_extra: Optional[np.ndarray] = None):
    """Pull output-color (and optional hitting-probability) gradients back
    to the raw distribution parameters of every working view.

    ``state`` must come from a uniform-mode :func:`render_rays` call with
    ``keep_state=True``. Returns ``{view_index: (H, W, 3, n) gradient}``.
    Only the nearest-pixel lookup path is differentiable.
    """
    if config.bilinear_params:
        raise ConfigurationError("gradients require nearest-pixel parameter lookups")
    if not state.per_view:
        raise InputError("state was not recorded with keep_state=True")
    background = np.asarray(config.background, dtype=np.float64)
    h_hat = state.h_hat
    alpha_hat = state.alpha_hat

    d_hhat = np.matmul(state.sample_colors - background, dc_o[:, :, None])[:, :, 0]
    if dh_extra is not None:
        d_hhat = d_hhat + dh_extra

    # gradient of the sample colors (only active samples have one)
    dh_w = np.zeros_like(state.h_w)
    if state.sh is not None:
        y_in, colors_in, weights, theta, a_mats, y_q_active = state.sh
        ray_active = np.nonzero(state.active)[0]
        dc_active = h_hat[state.active][:, None] * dc_o[ray_active]
        psi = np.linalg.solve(a_mats, y_q_active[..., None])[..., 0]
        resid = colors_in - np.matmul(y_in, theta)
        ypsi = np.matmul(y_in, psi[:, :, None])[:, :, 0]
        dh_w[state.active] = ypsi * np.matmul(resid, dc_active[:, :, None])[:, :, 0]

    # through the compositing products into the blended alphas
    u = d_hhat * h_hat
    suffix = np.cumsum(u[:, ::-1], axis=1)[:, ::-1] - u
    trans = np.cumprod(1.0 - alpha_hat, axis=-1)
    trans = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
    d_alpha_hat = d_hhat * trans - suffix / np.maximum(1.0 - alpha_hat, 1e-300)

    denom = state.denom
    good = denom >= EPS_VISIBILITY
    safe = np.where(good, denom, 1.0)
    grads = {}
    for j, vstate in enumerate(working.views):
        pv = state.per_view[j]
        valid = pv["valid"]
        t_a, t_b = pv["t_a"], pv["t_b"]
        alpha_j = state.alpha_tilde[..., j]
        vis_j = state.vis[..., j]
        d_alpha_j = np.where(good, d_alpha_hat * vis_j / safe, 0.0)
        d_vis_j = np.where(good, d_alpha_hat * (alpha_j - alpha_hat) / safe, 0.0)
        gate = valid & ~pv["saturated"] & ~pv["clamped"]
        inv = np.where(pv["saturated"], 1.0, 1.0 - t_a)
        d_alpha_eff = np.where(gate, d_alpha_j, 0.0)
        dh_w_j = np.where(valid, dh_w[..., j], 0.0)
        dt_b = d_alpha_eff / inv + dh_w_j
        dt_a = (
            d_alpha_eff * (t_b - 1.0) / (inv * inv)
            - np.where(valid, d_vis_j, 0.0)
            - dh_w_j
        )
        dt_a = np.where(valid, dt_a, 0.0)
        dt_b = np.where(valid, dt_b, 0.0)

        iy, ix = pv["pix"]
        sig = vstate.sig[iy, ix]
        w = vstate.w[iy, ix]
        # mixture CDF gradients from the forward's stored component sigmoids
        sp_a = pv["s_a"] * (1.0 - pv["s_a"])
        sp_b = pv["s_b"] * (1.0 - pv["s_b"])
        ca = dt_a[..., None] * w / sig
        cb = dt_b[..., None] * w / sig
        gmu = -(ca * sp_a + cb * sp_b)
        gsig = -(ca * sp_a * pv["x_a"] + cb * sp_b * pv["x_b"])
        gw = dt_a[..., None] * pv["s_a"] + dt_b[..., None] * pv["s_b"]
        # raw-parameter chain through the decode, jacobians gathered per pixel
        graw = np.empty(gmu.shape[:-1] + (3, gmu.shape[-1]))
        graw[..., 0, :] = gmu * vstate.jac_mean[iy, ix]
        graw[..., 1, :] = gsig * vstate.jac_scale[iy, ix]
        graw[..., 2, :] = w * (gw - np.sum(gw * w, axis=-1, keepdims=True))
        grad = np.zeros_like(vstate.view.dmap.params)
        flat = (iy * vstate.camera.width + ix)[valid]
        np.add.at(grad.reshape(-1, 3, grad.shape[-1]), flat, graw[valid])
        grads[vstate.view.index] = grad
    return grads


def render_image(working: WorkingSet, config: RenderConfig) -> np.ndarray:
    """Render the query view; deterministic and parallelizable per pixel."""
    cam = working.query_camera
    ys, xs = np.meshgrid(
        np.arange(cam.height, dtype=np.float64) + 0.5,
        np.arange(cam.width, dtype=np.float64) + 0.5,
        indexing="ij",
    )
    px = np.stack([xs, ys], axis=-1).reshape(-1, 2)
    dirs, _ = cam.rays_for_pixels(px)
    origins = np.broadcast_to(cam.center, dirs.shape)
    out = np.empty((px.shape[0], 3))
    chunk = 512
    ranges = [(s, min(s + chunk, px.shape[0])) for s in range(0, px.shape[0], chunk)]

    def run(span):
        s, e = span
        state = render_rays(working, origins[s:e], dirs[s:e], config)
        out[s:e] = state.colors_out

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            list(pool.map(run, ranges))
    else:
        for span in ranges:
            run(span)
    return np.clip(out.reshape(cam.height, cam.width, 3), 0.0, 1.0)


def render_pixel(working: WorkingSet, ray: Ray, config: RenderConfig):
    """Render a single query ray; returns (color, SampleSet)."""
    state = render_rays(working, ray.origin[None, :], ray.direction[None, :], config)
    samples = SampleSet(
        depths=state.z[0],
        widths=state.widths[0],
        alphas=state.alpha_hat[0],
        hit_probs=state.h_hat[0],
        colors=state.sample_colors[0],
    )
    return np.clip(state.colors_out[0], 0.0, 1.0), samples


def hitting_probs(alphas) -> np.ndarray:
    """First-hit probabilities from ordered alphas: transmittance times alpha."""
    alphas = np.asarray(alphas, dtype=np.float64)
    if np.any(alphas < 0) or np.any(alphas > 1):
        raise InputError("alphas must lie in [0, 1]")
    trans = np.cumprod(1.0 - alphas, axis=-1)
    ones = np.ones_like(alphas[..., :1])
    trans = np.concatenate([ones, trans[..., :-1]], axis=-1)
    return trans * alphas


def query_visibility(working: WorkingSet, point) -> np.ndarray:
    """Per-working-view visibility of a world point.

    Views that do not image the point (behind the camera or outside the
    frame) report zero visibility.
    """
    point = np.asarray(point, dtype=np.float64)
    out = np.zeros(working.n_views)
    for j, state in enumerate(working.views):
        mu, sig, w, depth, _, valid, _ = _view_lookup(
            state, point[None, :], working.near, working.far, False
        )
        if valid[0]:
            t = _cdf(mu[0], sig[0], w[0], depth[:1])[0]
            counters.add("cdf_evals", 1)
            out[j] = 1.0 - t
    return out


def sample_alpha(working: WorkingSet, point, bin_width: float) -> float:
    """Visibility-weighted mean of the working views' interval opacities."""
    if bin_width <= 0:
        raise InputError("bin width must be positive")
    point = np.asarray(point, dtype=np.float64)
    num = 0.0
    den = 0.0
    for state in working.views:
        mu, sig, w, depth, _, valid, _ = _view_lookup(
            state, point[None, :], working.near, working.far, False
        )
        if not valid[0]:
            continue
        t_a = _cdf(mu[0], sig[0], w[0], depth[:1])[0]
        t_b = _cdf(mu[0], sig[0], w[0], depth[:1] + bin_width)[0]
        counters.add("cdf_evals", 2)
        vis = 1.0 - t_a
        if t_a >= _SATURATION:
            alpha = 1.0
        else:
            alpha = min(max((t_b - t_a) / (1.0 - t_a), 0.0), 1.0)
        num += alpha * vis
        den += vis
    if den < EPS_VISIBILITY:
        return 0.0
    return num / den


def sample_color(working: WorkingSet, point, direction, bin_width: float,
                 config: RenderConfig) -> np.ndarray:
    """Hitting-probability-weighted SH color of one sample point.

    Falls back to the background color when every working view's weight is
    below the visibility floor.
    """
    point = np.asarray(point, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    weights, dirs_in, colors_in = [], [], []
    for state in working.views:
        mu, sig, w, depth, uv, valid, _ = _view_lookup(
            state, point[None, :], working.near, working.far, False
        )
        if valid[0]:
            t_a = _cdf(mu[0], sig[0], w[0], depth[:1])[0]
            t_b = _cdf(mu[0], sig[0], w[0], depth[:1] + bin_width)[0]
            counters.add("cdf_evals", 2)
            weight = max(t_b - t_a, 0.0)
            color = bilinear_sample(state.view.image, uv[0][:1], uv[1][:1])[0]
        else:
            weight = 0.0
            color = np.zeros(3)
        offs = point - state.camera.center
        dirs_in.append(offs / np.linalg.norm(offs))
        colors_in.append(color)
        weights.append(weight)
    weights = np.asarray(weights)
    counters.add("color_samples", 1)
    if np.all(weights < EPS_VISIBILITY):
        return np.asarray(config.background, dtype=np.float64)
    counters.add("sh_fits", 1)
    y_in = sh_basis_values(config.sh_degree, np.stack(dirs_in))[None, :, :]
    lam = SHRegularizer(config.sh_penalties).diagonal(SHBasis(config.sh_degree))
    theta, _ = sh_fit_batched(y_in, weights[None, :], np.stack(colors_in)[None, :, :], lam)
    y_q = sh_basis_values(config.sh_degree, direction)
    return y_q @ theta[0]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return 99.0
    return min(10.0 * np.log10(1.0 / mse), 99.0)
