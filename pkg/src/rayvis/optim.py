"""Scene-specific optimization of distribution maps.

Every training step picks one reference view as a pseudo query view,
renders a ray batch from it using the remaining views, and descends three
losses with analytic gradients:

* render: squared error of the composited colors against the view's image;
* consistency: cross entropy between the hitting probabilities decoded
  from the pseudo query ray's own distribution and those computed by the
  renderer, which is how rendered geometry gets memorized into the maps;
* depth: squared error of the first component mean against a depth map.

The maps are the only trainable parameters; Adam updates them densely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from rayvis.camera import PinholeCamera
from rayvis.errors import ConfigurationError, DimensionMismatchError, InputError
from rayvis.raydist import (
    DistributionMap,
    SIGMA_MIN_FRACTION,
    decode_arrays,
    decode_backward,
    inv_softplus,
    logit,
    mixture_cdf_param_grads,
)
from rayvis.render import (
    RenderConfig,
    RenderView,
    _chunk_forward,
    _fine_depths,
    _uniform_depths,
    render_image,
    render_rays,
    render_rays_backward,
    psnr,
    select_working_views,
)
from rayvis.scene import DepthMap

_DECODE_CLIP = 1e-7  # keeps the mean logit finite for depths at the far sentinel


@dataclass
class LossReport:
    """Loss values of one training step; total is the exact weighted sum."""

    step: int
    render_loss: float
    consistency_loss: float
    depth_loss: float
    total: float


@dataclass
class TrainConfig:
    lambda_render: float = 1.0
    lambda_consist: float = 0.25
    lambda_depth: float = 0.1
    batch_size: int = 512
    steps: int = 2000
    seed: int = 0
    eps_prob: float = 1e-5
    n_working: int = 8
    k_samples: int = 64
    learning_rate: float = 1e-4
    halve_every: int = 100_000
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    sh_degree: int = 3
    background: tuple = (0.0, 0.0, 0.0)
    sampling_mode: str = "uniform"       # or "coarse_to_fine"
    k_fine: int = 16
    consist_variant: str = "binary"      # or "categorical"
    consist_flow: str = "stop_h"         # or "symmetric"
    eval_interval: int = 500

    def __post_init__(self):
        if min(self.lambda_render, self.lambda_consist, self.lambda_depth) < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if not (0.0 < self.eps_prob < 0.5):
            raise ConfigurationError("eps_prob must lie in (0, 0.5)")
        if self.sampling_mode not in ("uniform", "coarse_to_fine"):
            raise ConfigurationError(f"unknown sampling mode '{self.sampling_mode}'")
        if self.consist_variant not in ("binary", "categorical"):
            raise ConfigurationError(f"unknown CE variant '{self.consist_variant}'")
        if self.consist_flow not in ("stop_h", "symmetric"):
            raise ConfigurationError(f"unknown gradient flow '{self.consist_flow}'")

    def render_config(self) -> RenderConfig:
        return RenderConfig(
            k_coarse=self.k_samples,
            k_fine=self.k_fine,
            mode=self.sampling_mode,
            n_working=self.n_working,
            background=self.background,
            sh_degree=self.sh_degree,
        )


@dataclass
class OptimState:
    """Adam moments per map plus the step count and learning-rate schedule."""

    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0
    learning_rate: float = 1e-4
    halve_every: int = 100_000
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def current_lr(self) -> float:
        halvings = self.step // max(self.halve_every, 1)
        return self.learning_rate * 0.5**halvings


def render_loss(rendered: np.ndarray, ground_truth: np.ndarray):
    """Sum of squared color differences over the batch, plus its gradient."""
    rendered = np.asarray(rendered, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    if rendered.shape != ground_truth.shape:
        raise DimensionMismatchError("rendered and ground-truth batches differ in shape")
    diff = rendered - ground_truth
    return float(np.sum(diff**2)), 2.0 * diff


def consistency_loss(h_tilde, h, eps_prob: float = 1e-5, variant: str = "binary"):
    """Cross entropy between a ray's own hitting probabilities and rendered ones.

    ``h_tilde`` acts as the target distribution taken from the ray's own
    CDF; ``h`` comes from rendering and is clamped to
    ``[eps_prob, 1 - eps_prob]``. Returns the loss (averaged over samples,
    summed over leading axes) plus gradients w.r.t. both arguments.
    """
    h_tilde = np.asarray(h_tilde, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if h_tilde.shape != h.shape:
        raise DimensionMismatchError("hitting probability arrays differ in shape")
    k = h.shape[-1]
    hc = np.clip(h, eps_prob, 1.0 - eps_prob)
    pass_through = (h > eps_prob) & (h < 1.0 - eps_prob)
    if variant == "binary":
        ce = -h_tilde * np.log(hc) - (1.0 - h_tilde) * np.log1p(-hc)
        value = float(ce.sum() / k)
        g_tilde = (np.log1p(-hc) - np.log(hc)) / k
        g_h = np.where(pass_through, (-h_tilde / hc + (1.0 - h_tilde) / (1.0 - hc)) / k, 0.0)
        return value, g_tilde, g_h
    if variant == "categorical":
        s_t = np.maximum(h_tilde.sum(axis=-1, keepdims=True), 1e-30)
        s_h = np.maximum(hc.sum(axis=-1, keepdims=True), 1e-30)
        p = h_tilde / s_t
        q = hc / s_h
        logq = np.log(np.maximum(q, 1e-300))
        ce = -np.sum(p * logq, axis=-1)
        value = float(ce.sum())
        g_tilde = (-logq - ce[..., None]) / s_t
        g_h = np.where(pass_through, (1.0 - p / np.maximum(q, 1e-300)) / s_h, 0.0)
        return value, g_tilde, g_h
    raise ConfigurationError(f"unknown CE variant '{variant}'")


def depth_loss(dmap: DistributionMap, depth: DepthMap, pixels: np.ndarray):
    """Squared error of the first component mean against the depth map.

    ``pixels`` is an (N, 2) array of (row, column) indices. Returns the
    loss and a dense gradient array over the map's raw parameters.
    """
    values = depth.values
    if values.shape != (dmap.height, dmap.width):
        raise DimensionMismatchError("depth map does not match the distribution map")
    pixels = np.asarray(pixels, dtype=np.int64)
    iy, ix = pixels[:, 0], pixels[:, 1]
    near, far = depth.near, depth.far
    raw = dmap.params[iy, ix]                      # (N, 3, n)
    mu, _, _ = decode_arrays(raw, near, far)
    target = values[iy, ix]
    diff = mu[:, 0] - target
    value = float(np.sum(diff**2))
    gmu = np.zeros_like(mu)
    gmu[:, 0] = 2.0 * diff
    graw = decode_backward(raw, near, far, gmu, np.zeros_like(mu), np.zeros_like(mu))
    grad = np.zeros_like(dmap.params)
    np.add.at(grad.reshape(-1, 3, grad.shape[-1]), iy * dmap.width + ix, graw)
    return value, grad


def init_from_depth(
    depth: DepthMap,
    sigma_init: float,
    n_components: int,
    view: int = 0,
) -> DistributionMap:
    """Distribution map whose decoded means reproduce the given depths.

    All components share the depth value, scales decode to
    ``sigma_init * (far - near)``, and weights are uniform. Depths at the
    far sentinel decode to means within a tiny fraction of ``far``, leaving
    near-zero occlusion in front of it.
    """
    if sigma_init <= SIGMA_MIN_FRACTION:
        raise InputError(f"sigma_init must exceed the scale floor {SIGMA_MIN_FRACTION}")
    near, far = depth.near, depth.far
    span = far - near
    u = np.clip((depth.values - near) / span, _DECODE_CLIP, 1.0 - _DECODE_CLIP)
    raw_mean = logit(u)
    raw_scale = inv_softplus(sigma_init * span - SIGMA_MIN_FRACTION * span)
    h, w = depth.values.shape
    params = np.zeros((h, w, 3, n_components))
    params[..., 0, :] = raw_mean[..., None]
    params[..., 1, :] = raw_scale
    return DistributionMap(view=view, params=params)


def adam_step(
    state: OptimState,
    params: Dict[int, np.ndarray],
    grads: Dict[int, np.ndarray],
) -> None:
    """One Adam update with bias correction, applied in place to ``params``."""
    state.step += 1
    t = state.step
    lr = state.learning_rate * 0.5 ** ((t - 1) // max(state.halve_every, 1))
    b1, b2 = state.betas
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionMismatchError(f"gradient shape mismatch for map {key}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class SceneData:
    """Everything a training run needs, keyed by reference view index."""

    cameras: Dict[int, PinholeCamera]
    images: Dict[int, np.ndarray]
    maps: Dict[int, DistributionMap]
    depths: Optional[Dict[int, DepthMap]]
    near: float
    far: float

    def reference_indices(self):
        return sorted(self.maps.keys())

    def render_views(self):
        return [
            RenderView(i, self.cameras[i], self.maps[i], self.images[i])
            for i in self.reference_indices()
        ]


def own_hit_probs(dmap: DistributionMap, camera: PinholeCamera, pixels: np.ndarray,
                  z: np.ndarray, widths: np.ndarray, near: float, far: float):
    """Hitting probabilities of the view's own rays over the sample bins.

    ``z``/``widths`` are euclidean ray parameters of the pseudo query rays;
    they convert to view depths through each pixel ray's z factor. Returns
    the probabilities plus what the backward pass needs.
    """
    px_centers = pixels[:, ::-1].astype(np.float64) + 0.5  # (x, y) order
    _, zfac = camera.rays_for_pixels(px_centers)
    z_view = z * zfac[:, None]
    z_view_end = (z + widths) * zfac[:, None]
    raw = dmap.params[pixels[:, 0], pixels[:, 1]]          # (B, 3, n)
    mu, sig, w = decode_arrays(raw, near, far)
    mu_b = mu[:, None, :]
    sig_b = sig[:, None, :]
    w_b = w[:, None, :]
    t_a, dmu_a, dsig_a, dw_a = mixture_cdf_param_grads(mu_b, sig_b, w_b, z_view)
    t_b, dmu_b2, dsig_b2, dw_b2 = mixture_cdf_param_grads(mu_b, sig_b, w_b, z_view_end)
    h_tilde = t_b - t_a
    back = (raw, (dmu_b2 - dmu_a, dsig_b2 - dsig_a, dw_b2 - dw_a))
    return h_tilde, back


def own_hit_probs_backward(dmap: DistributionMap, pixels: np.ndarray, back, g_h_tilde,
                           near: float, far: float) -> np.ndarray:
    """Scatter hitting-probability gradients into a dense map gradient."""
    raw, (dmu, dsig, dw) = back
    gmu = np.sum(g_h_tilde[..., None] * dmu, axis=1)
    gsig = np.sum(g_h_tilde[..., None] * dsig, axis=1)
    gw = np.sum(g_h_tilde[..., None] * dw, axis=1)
    graw = decode_backward(raw, near, far, gmu, gsig, gw)
    grad = np.zeros_like(dmap.params)
    np.add.at(
        grad.reshape(-1, 3, grad.shape[-1]),
        pixels[:, 0] * dmap.width + pixels[:, 1],
        graw,
    )
    return grad


def train_step(
    data: SceneData,
    config: TrainConfig,
    state: OptimState,
    rng: np.random.Generator,
) -> LossReport:
    """One optimization step on a pseudo query view; deterministic per seed."""
    refs = data.reference_indices()
    if len(refs) < 2:
        raise ConfigurationError("training needs at least two reference views")
    q = int(refs[rng.integers(len(refs))])
    camera = data.cameras[q]
    n_px = camera.height * camera.width
    flat = rng.choice(n_px, size=min(config.batch_size, n_px), replace=False)
    pixels = np.stack([flat // camera.width, flat % camera.width], axis=1)

    views = [v for v in data.render_views() if v.index != q]
    working = select_working_views(
        views, camera, min(config.n_working, len(views)), data.near, data.far, query_index=q
    )
    rcfg = config.render_config()

    px_centers = pixels[:, ::-1].astype(np.float64) + 0.5
    dirs, _ = camera.rays_for_pixels(px_centers)
    origins = np.broadcast_to(camera.center, dirs.shape)
    gt = data.images[q][pixels[:, 0], pixels[:, 1]]

    if config.sampling_mode == "uniform":
        fwd = render_rays(working, origins, dirs, rcfg, keep_state=True)
        kept = np.ones(len(pixels), dtype=bool)
        c_o = fwd.colors_out
    else:
        # a coarse pass places the fine samples; sample placement is
        # treated as constant w.r.t. the parameters, gradients flow only
        # through the fine evaluations
        z_c, w_c = _uniform_depths(data.near, data.far, config.k_samples, len(pixels))
        coarse = _chunk_forward(working, origins, dirs, z_c, w_c, rcfg,
                                with_colors=False)
        z_f, w_f, kept = _fine_depths(z_c, w_c, coarse.h_hat, config.k_fine, data.far)
        fwd = None
        c_o = np.broadcast_to(
            np.asarray(config.background, dtype=np.float64), (len(pixels), 3)
        ).copy()
        if np.any(kept):
            fwd = _chunk_forward(working, origins[kept], dirs[kept], z_f, w_f,
                                 rcfg, keep_state=True)
            c_o[kept] = fwd.colors_out

    l_render, g_render = render_loss(c_o, gt)

    l_consist = 0.0
    g_tilde = g_h = back = None
    if fwd is not None:
        h_tilde, back = own_hit_probs(
            data.maps[q], camera, pixels[kept], fwd.z, fwd.widths, data.near, data.far
        )
        l_consist, g_tilde, g_h = consistency_loss(
            h_tilde, fwd.h_hat, config.eps_prob, config.consist_variant
        )

    l_depth = 0.0
    depth_grad = None
    if config.lambda_depth > 0 and data.depths is not None:
        l_depth, depth_grad = depth_loss(data.maps[q], data.depths[q], pixels)

    grads: Dict[int, np.ndarray] = {}
    if fwd is not None:
        dc_o = config.lambda_render * g_render[kept]
        dh_extra = (
            config.lambda_consist * g_h if config.consist_flow == "symmetric" else None
        )
        if config.lambda_render > 0 or dh_extra is not None:
            if config.lambda_render == 0:
                dc_o = np.zeros_like(dc_o)
            for idx, g in render_rays_backward(working, fwd, rcfg, dc_o, dh_extra).items():
                grads[idx] = grads.get(idx, 0) + g
        if config.lambda_consist > 0:
            g_own = own_hit_probs_backward(
                data.maps[q], pixels[kept], back, config.lambda_consist * g_tilde,
                data.near, data.far,
            )
            grads[q] = grads.get(q, 0) + g_own
    if depth_grad is not None:
        grads[q] = grads.get(q, 0) + config.lambda_depth * depth_grad

    params = {i: data.maps[i].params for i in refs}
    adam_step(state, params, grads)

    total = (
        config.lambda_render * l_render
        + config.lambda_consist * l_consist
        + config.lambda_depth * l_depth
    )
    return LossReport(state.step, l_render, l_consist, l_depth, total)


def evaluate_holdout(
    data: SceneData,
    holdout: Dict[int, tuple],
    config: TrainConfig,
    k_eval: Optional[int] = None,
) -> float:
    """Mean PSNR over held-out (camera, image) pairs rendered from the maps."""
    if not holdout:
        return float("nan")
    rcfg = config.render_config()
    if k_eval is not None:
        rcfg = RenderConfig(
            k_coarse=k_eval, mode="uniform", n_working=rcfg.n_working,
            background=rcfg.background, sh_degree=rcfg.sh_degree,
        )
    values = []
    for idx, (camera, image) in sorted(holdout.items()):
        views = data.render_views()
        working = select_working_views(
            views, camera, min(rcfg.n_working, len(views)), data.near, data.far,
            query_index=idx,
        )
        values.append(psnr(render_image(working, rcfg), image))
    return float(np.mean(values))


def optimize_scene(
    data: SceneData,
    config: TrainConfig,
    holdout: Optional[Dict[int, tuple]] = None,
    out_dir=None,
    state: Optional[OptimState] = None,
    start_step: int = 0,
    checkpoint_interval: Optional[int] = None,
):
    """Run the training loop; returns (state, history of (step, report, psnr)).

    ``holdout`` maps view indices to (camera, image) pairs evaluated every
    ``eval_interval`` steps. When ``out_dir`` is given, maps are
    checkpointed there in the NRAY format along with a resumable state
    file and a metrics CSV.
    """
    if state is None:
        state = OptimState(
            learning_rate=config.learning_rate,
            halve_every=config.halve_every,
            betas=config.betas,
            eps=config.adam_eps,
        )
    history = []
    rng = np.random.default_rng(config.seed)
    # replay the RNG stream consumed by completed steps so resume is exact
    for _ in range(start_step):
        _advance_rng(rng, data, config)
    metrics_rows = []
    for step in range(start_step, config.steps):
        report = train_step(data, config, state, rng)
        entry = None
        if config.eval_interval and (step + 1) % config.eval_interval == 0:
            entry = evaluate_holdout(data, holdout or {}, config)
        history.append((report, entry))
        if entry is not None:
            metrics_rows.append(
                f"{report.step},{report.render_loss:.9g},{report.consistency_loss:.9g},"
                f"{report.depth_loss:.9g},{entry:.6f}"
            )
        if out_dir is not None and checkpoint_interval and (step + 1) % checkpoint_interval == 0:
            save_checkpoint(out_dir, data, state)
    if out_dir is not None:
        save_checkpoint(out_dir, data, state)
        path = Path(out_dir) / "metrics.csv"
        header = "step,render_loss,consist_loss,depth_loss,psnr"
        path.write_text("\n".join([header] + metrics_rows) + "\n", encoding="utf-8")
    return state, history


def _advance_rng(rng: np.random.Generator, data: SceneData, config: TrainConfig):
    """Consume exactly the random draws of one training step."""
    refs = data.reference_indices()
    q = int(refs[rng.integers(len(refs))])
    camera = data.cameras[q]
    n_px = camera.height * camera.width
    rng.choice(n_px, size=min(config.batch_size, n_px), replace=False)


def save_checkpoint(out_dir, data: SceneData, state: OptimState):
    """Write NRAY maps plus an exact-resume state file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for idx in data.reference_indices():
        data.maps[idx].save(out / f"view_{idx:04d}.nray")
    arrays = {"step": np.array(state.step)}
    for idx in data.reference_indices():
        arrays[f"params_{idx}"] = data.maps[idx].params
        if idx in state.m:
            arrays[f"m_{idx}"] = state.m[idx]
            arrays[f"v_{idx}"] = state.v[idx]
    np.savez(out / "state.npz", **arrays)


def load_checkpoint(out_dir, data: SceneData, state: OptimState) -> int:
    """Restore exact f64 parameters and moments; returns the completed step."""
    path = Path(out_dir) / "state.npz"
    if not path.exists():
        raise InputError(f"no resumable state at {path}")
    with np.load(path) as blob:
        step = int(blob["step"])
        for idx in data.reference_indices():
            key = f"params_{idx}"
            if key not in blob:
                raise InputError(f"checkpoint is missing map {idx}")
            data.maps[idx].params[...] = blob[key]
            if f"m_{idx}" in blob:
                state.m[idx] = blob[f"m_{idx}"]
                state.v[idx] = blob[f"v_{idx}"]
    state.step = step
    return step
