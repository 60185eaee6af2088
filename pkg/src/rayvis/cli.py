"""Command-line pipeline: synth, init, render, optimize, eval, bench.

Directory conventions: a data directory (from ``synth``) holds
``images/view_NNNN.ppm``, ``depth/view_NNNN.nrdf`` and ``cameras.json``;
map directories hold ``view_NNNN.nray``. Every command that writes files
also writes a ``manifest.json`` next to them with the fully resolved
configuration, enough to replay the run.

Exit codes: 0 success, 1 usage error, 2 input/IO error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

import rayvis
from rayvis import imgio, optim, scenefile
from rayvis.camera import PinholeCamera
from rayvis.counters import counters
from rayvis.errors import InputError, NumericalError, RayvisError
from rayvis.raydist import (
    DensityProfile,
    DistributionMap,
    decode,
    density_visibility_oracle,
    visibility,
)
from rayvis.render import (
    RenderConfig,
    RenderView,
    psnr,
    render_image,
    select_working_views,
)
from rayvis.scene import perturb_depth, render_ground_truth


class _Parser(argparse.ArgumentParser):
    """argparse that exits with code 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


@dataclass
class RunManifest:
    command: str
    version: str
    seed: int | None
    config: dict
    inputs: list
    outputs: list
    duration_seconds: float


def _write_manifest(directory, manifest: RunManifest):
    path = Path(directory) / "manifest.json"
    blob = json.dumps(asdict(manifest), indent=2, sort_keys=True).encode("utf-8")
    imgio.atomic_write_bytes(path, blob)


def _view_name(index: int, suffix: str) -> str:
    return f"view_{index:04d}.{suffix}"


_VIEW_RE = re.compile(r"view_(\d+)\.(\w+)$")


def _scan_views(directory, suffix: str) -> dict:
    out = {}
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"not a directory: {directory}")
    for path in sorted(directory.iterdir()):
        m = _VIEW_RE.match(path.name)
        if m and m.group(2) == suffix:
            out[int(m.group(1))] = path
    return out


def _load_cameras(data_dir) -> tuple:
    path = Path(data_dir) / "cameras.json"
    if not path.exists():
        raise InputError(f"missing cameras file: {path}")
    meta = json.loads(path.read_text(encoding="utf-8"))
    cameras = {}
    for entry in meta["cameras"]:
        cameras[int(entry["index"])] = PinholeCamera(
            width=int(entry["width"]),
            height=int(entry["height"]),
            fx=float(entry["fx"]),
            fy=float(entry["fy"]),
            cx=float(entry["cx"]),
            cy=float(entry["cy"]),
            rotation=np.asarray(entry["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(entry["translation"], dtype=np.float64),
        )
    return cameras, meta


def _load_render_views(data_dir, maps_dir, exclude=()) -> list:
    cameras, _ = _load_cameras(data_dir)
    images = _scan_views(Path(data_dir) / "images", "ppm")
    maps = _scan_views(maps_dir, "nray")
    views = []
    for idx, map_path in sorted(maps.items()):
        if idx in exclude:
            continue
        if idx not in cameras:
            raise InputError(f"map {map_path} has no camera entry")
        if idx not in images:
            raise InputError(f"no image for view {idx} in {data_dir}")
        views.append(
            RenderView(
                idx,
                cameras[idx],
                DistributionMap.load(map_path),
                imgio.read_ppm(images[idx]),
            )
        )
    if not views:
        raise InputError(f"no usable views found in {maps_dir}")
    return views


def cmd_synth(args) -> int:
    start = time.perf_counter()
    scene = scenefile.load_scene(args.scene)
    out = Path(args.out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    cam_entries = []
    outputs = []
    for idx, camera in enumerate(scene.cameras):
        image, depth = render_ground_truth(scene, camera)
        img_path = out / "images" / _view_name(idx, "ppm")
        dep_path = out / "depth" / _view_name(idx, "nrdf")
        imgio.write_ppm(img_path, image)
        imgio.write_depth_map(dep_path, depth)
        outputs += [str(img_path), str(dep_path)]
        cam_entries.append(
            {
                "index": idx,
                "width": camera.width,
                "height": camera.height,
                "fx": camera.fx,
                "fy": camera.fy,
                "cx": camera.cx,
                "cy": camera.cy,
                "rotation": camera.rotation.reshape(-1).tolist(),
                "translation": camera.translation.tolist(),
            }
        )
    meta = {
        "near": scene.near,
        "far": scene.far,
        "scene_scale": scene.scene_scale,
        "background": scene.background.tolist(),
        "cameras": cam_entries,
    }
    imgio.atomic_write_bytes(
        out / "cameras.json", json.dumps(meta, indent=2).encode("utf-8")
    )
    _write_manifest(
        out,
        RunManifest(
            command="synth",
            version=rayvis.__version__,
            seed=None,
            config={"scene": str(args.scene)},
            inputs=[str(args.scene)],
            outputs=outputs + [str(out / "cameras.json")],
            duration_seconds=time.perf_counter() - start,
        ),
    )
    print(f"wrote {len(cam_entries)} views to {out}")
    return 0


def cmd_init(args) -> int:
    start = time.perf_counter()
    depths = _scan_views(Path(args.data_dir) / "depth", "nrdf")
    if not depths:
        raise InputError(f"no depth maps under {args.data_dir}/depth")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for idx, path in sorted(depths.items()):
        depth = imgio.read_depth_map(path)
        if args.noise > 0:
            depth = perturb_depth(depth, args.noise, args.seed + idx)
        dmap = optim.init_from_depth(depth, args.sigma_init, args.components, view=idx)
        map_path = out / _view_name(idx, "nray")
        dmap.save(map_path)
        outputs.append(str(map_path))
    config = {
        "sigma_init": args.sigma_init,
        "components": args.components,
        "noise": args.noise,
        "data_dir": str(args.data_dir),
    }
    _write_manifest(
        out,
        RunManifest(
            command="init",
            version=rayvis.__version__,
            seed=args.seed,
            config=config,
            inputs=[str(p) for p in depths.values()],
            outputs=outputs,
            duration_seconds=time.perf_counter() - start,
        ),
    )
    print(f"initialized {len(outputs)} maps in {out}")
    return 0


def _render_config(args, background) -> RenderConfig:
    mode = {"uniform": "uniform", "c2f": "coarse_to_fine"}[args.mode]
    return RenderConfig(
        k_coarse=args.k_coarse,
        k_fine=args.k_fine,
        mode=mode,
        n_working=args.nw,
        background=tuple(background),
        sh_degree=args.sh_degree,
        bilinear_params=args.bilinear_params,
        threads=args.threads,
    )


def cmd_render(args) -> int:
    start = time.perf_counter()
    cameras, meta = _load_cameras(args.data_dir)
    if args.view not in cameras:
        raise InputError(f"no camera with index {args.view}")
    views = _load_render_views(args.data_dir, args.maps_dir, exclude=(args.view,))
    config = _render_config(args, meta["background"])
    if config.n_working > len(views):
        raise InputError(
            f"requested {config.n_working} working views, only {len(views)} available"
        )
    working = select_working_views(
        views, cameras[args.view], config.n_working, meta["near"], meta["far"],
        query_index=args.view,
    )
    image = render_image(working, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    imgio.write_ppm(out, image)
    outputs = [str(out)]
    if args.float_out:
        imgio.write_float_image(args.float_out, image)
        outputs.append(str(args.float_out))
    if args.gt:
        value = psnr(image, imgio.read_ppm(args.gt))
        print(f"psnr {value:.4f}")
    _write_manifest(
        out.parent,
        RunManifest(
            command="render",
            version=rayvis.__version__,
            seed=None,
            config={
                "view": args.view,
                "mode": args.mode,
                "k_coarse": args.k_coarse,
                "k_fine": args.k_fine,
                "nw": args.nw,
                "sh_degree": args.sh_degree,
                "bilinear_params": args.bilinear_params,
                "threads": args.threads,
                "maps_dir": str(args.maps_dir),
                "data_dir": str(args.data_dir),
            },
            inputs=[str(args.data_dir), str(args.maps_dir)],
            outputs=outputs,
            duration_seconds=time.perf_counter() - start,
        ),
    )
    print(f"rendered view {args.view} -> {out}")
    return 0


def _parse_view_list(text: str) -> list:
    if not text:
        return []
    return [int(tok) for tok in text.split(",") if tok != ""]


def cmd_optimize(args) -> int:
    start = time.perf_counter()
    cameras, meta = _load_cameras(args.data_dir)
    images = _scan_views(Path(args.data_dir) / "images", "ppm")
    depth_paths = _scan_views(Path(args.data_dir) / "depth", "nrdf")
    maps_in = _scan_views(args.init_dir, "nray")
    if len(maps_in) < 2:
        raise InputError("optimization needs at least two initialized views")
    eval_views = _parse_view_list(args.eval_views)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    maps, imgs, deps = {}, {}, {}
    for idx, path in sorted(maps_in.items()):
        if idx in eval_views:
            continue
        if idx not in cameras or idx not in images:
            raise InputError(f"map {path} has no matching camera or image")
        maps[idx] = DistributionMap.load(path)
        imgs[idx] = imgio.read_ppm(images[idx])
        if idx in depth_paths:
            deps[idx] = imgio.read_depth_map(depth_paths[idx])
    data = optim.SceneData(
        cameras=cameras,
        images=imgs,
        maps=maps,
        depths=deps if deps else None,
        near=meta["near"],
        far=meta["far"],
    )
    holdout = {}
    for idx in eval_views:
        if idx not in cameras or idx not in images:
            raise InputError(f"eval view {idx} not present in the data directory")
        holdout[idx] = (cameras[idx], imgio.read_ppm(images[idx]))

    config = optim.TrainConfig(
        lambda_render=args.lambda_render,
        lambda_consist=args.lambda_consist,
        lambda_depth=args.lambda_depth,
        batch_size=args.batch,
        steps=args.steps,
        seed=args.seed,
        n_working=args.nw,
        k_samples=args.k,
        k_fine=args.k_fine,
        learning_rate=args.lr,
        sh_degree=args.sh_degree,
        background=tuple(meta["background"]),
        sampling_mode={"uniform": "uniform", "c2f": "coarse_to_fine"}[args.sampling_mode],
        eval_interval=args.eval_interval,
        consist_variant=args.consist_variant,
        consist_flow=args.consist_flow,
    )
    state = optim.OptimState(
        learning_rate=config.learning_rate,
        halve_every=config.halve_every,
        betas=config.betas,
        eps=config.adam_eps,
    )
    start_step = 0
    if args.resume:
        try:
            start_step = optim.load_checkpoint(out, data, state)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"corrupt checkpoint in {out}: {exc}") from exc
        print(f"resuming from step {start_step}")
    state, _ = optim.optimize_scene(
        data,
        config,
        holdout=holdout,
        out_dir=out,
        state=state,
        start_step=start_step,
        checkpoint_interval=args.checkpoint_interval,
    )
    cfg_dict = asdict(config)
    cfg_dict["eval_views"] = eval_views
    cfg_dict["init_dir"] = str(args.init_dir)
    cfg_dict["data_dir"] = str(args.data_dir)
    _write_manifest(
        out,
        RunManifest(
            command="optimize",
            version=rayvis.__version__,
            seed=args.seed,
            config=cfg_dict,
            inputs=[str(args.data_dir), str(args.init_dir)],
            outputs=[str(out / _view_name(i, "nray")) for i in sorted(maps)],
            duration_seconds=time.perf_counter() - start,
        ),
    )
    print(f"optimized {len(maps)} maps for {config.steps} steps -> {out}")
    return 0


def cmd_eval(args) -> int:
    rendered = _scan_views(args.rendered_dir, "ppm")
    truth = _scan_views(args.gt_dir, "ppm")
    if not rendered:
        raise InputError(f"no rendered views in {args.rendered_dir}")
    missing = sorted(set(rendered) - set(truth))
    if missing:
        raise InputError(
            "missing ground-truth counterparts for views: "
            + ", ".join(str(m) for m in missing)
        )
    rows = []
    for idx, path in sorted(rendered.items()):
        value = psnr(imgio.read_ppm(path), imgio.read_ppm(truth[idx]))
        rows.append((idx, value))
    mean = float(np.mean([v for _, v in rows]))
    print(f"{'view':>6} {'psnr_db':>10}")
    for idx, value in rows:
        print(f"{idx:>6} {value:>10.4f}")
    print(f"{'mean':>6} {mean:>10.4f}")
    if args.csv:
        lines = ["view,psnr_db"] + [f"{i},{v:.6f}" for i, v in rows]
        lines.append(f"mean,{mean:.6f}")
        csv_path = Path(args.csv)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        imgio.atomic_write_bytes(csv_path, ("\n".join(lines) + "\n").encode("utf-8"))
        _write_manifest(
            csv_path.parent,
            RunManifest(
                command="eval",
                version=rayvis.__version__,
                seed=None,
                config={"rendered": str(args.rendered_dir), "gt": str(args.gt_dir)},
                inputs=[str(args.rendered_dir), str(args.gt_dir)],
                outputs=[str(csv_path)],
                duration_seconds=0.0,
            ),
        )
    return 0


def cmd_bench(args) -> int:
    cameras, meta = _load_cameras(args.data_dir)
    if args.view not in cameras:
        raise InputError(f"no camera with index {args.view}")
    views = _load_render_views(args.data_dir, args.maps_dir, exclude=(args.view,))
    nw = min(args.nw, len(views))
    working = select_working_views(
        views, cameras[args.view], nw, meta["near"], meta["far"], query_index=args.view
    )
    background = tuple(meta["background"])
    report = []

    def run(label, config):
        counters.reset()
        t0 = time.perf_counter()
        image = render_image(working, config)
        dt = time.perf_counter() - t0
        snap = counters.snapshot()
        n_px = image.shape[0] * image.shape[1]
        report.append(
            f"{label}: wall_clock_s={dt:.3f} cdf_evals={snap.cdf_evals} "
            f"sh_fits={snap.sh_fits} color_samples={snap.color_samples} "
            f"cdf_per_pixel={snap.cdf_evals / n_px:.1f} "
            f"sh_fits_per_pixel={snap.sh_fits / n_px:.2f}"
        )
        return image, dt, snap

    uniform_cfg = RenderConfig(
        k_coarse=args.k_uniform, mode="uniform", n_working=nw,
        background=background, sh_degree=args.sh_degree, threads=args.threads,
    )
    c2f_cfg = RenderConfig(
        k_coarse=args.k_coarse, k_fine=args.k_fine, mode="coarse_to_fine",
        n_working=nw, background=background, sh_degree=args.sh_degree,
        threads=args.threads,
    )
    img_u, time_u, snap_u = run(f"uniform k={args.k_uniform}", uniform_cfg)
    img_c, time_c, snap_c = run(f"coarse_to_fine k={args.k_coarse}+{args.k_fine}", c2f_cfg)
    report.append(
        f"mode_agreement_psnr_db={psnr(img_u, img_c):.3f} "
        f"sh_fit_ratio={snap_u.sh_fits / max(snap_c.sh_fits, 1):.2f} "
        f"speedup={time_u / max(time_c, 1e-9):.2f}"
    )

    # density-based visibility oracle: one query costs one density
    # evaluation per segment, against a single CDF evaluation
    knots = np.linspace(meta["near"], meta["far"], args.kr + 1)
    profile = DensityProfile(knots, np.full(args.kr, 0.5))
    counters.reset()
    density_visibility_oracle(profile, meta["far"])
    d_evals = counters.snapshot().density_evals
    counters.reset()
    state = working.views[0]
    dist = decode(state.view.dmap.raw_at(0, 0), (meta["near"], meta["far"]))
    visibility(dist, 0.5 * (meta["near"] + meta["far"]))
    c_evals = counters.snapshot().cdf_evals
    report.append(
        f"density_oracle_evals_per_query={d_evals} (k_r={args.kr}) "
        f"vs cdf_evals_per_query={c_evals}"
    )
    text = "\n".join(report)
    print(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        imgio.atomic_write_bytes(out, (text + "\n").encode("utf-8"))
        _write_manifest(
            out.parent,
            RunManifest(
                command="bench",
                version=rayvis.__version__,
                seed=None,
                config={
                    "view": args.view, "k_uniform": args.k_uniform,
                    "k_coarse": args.k_coarse, "k_fine": args.k_fine,
                    "nw": nw, "kr": args.kr,
                },
                inputs=[str(args.data_dir), str(args.maps_dir)],
                outputs=[str(out)],
                duration_seconds=time_u + time_c,
            ),
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rayvis", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="render ground-truth data from a scene file")
    p.add_argument("scene", help="scene description (JSON)")
    p.add_argument("out_dir", help="output data directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init", help="initialize distribution maps from depth maps")
    p.add_argument("data_dir", help="data directory from synth")
    p.add_argument("out_dir", help="output map directory")
    p.add_argument("--sigma-init", type=float, default=0.005, dest="sigma_init")
    p.add_argument("--components", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.0,
                   help="depth noise as a fraction of scene scale")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("render", help="render a query view from maps and images")
    p.add_argument("--data", required=True, dest="data_dir")
    p.add_argument("--maps", required=True, dest="maps_dir")
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gt", default=None, help="ground-truth PPM for PSNR")
    p.add_argument("--float-out", default=None, dest="float_out")
    p.add_argument("--mode", choices=["uniform", "c2f"], default="uniform")
    p.add_argument("--k-coarse", type=int, default=64, dest="k_coarse")
    p.add_argument("--k-fine", type=int, default=64, dest="k_fine")
    p.add_argument("--nw", type=int, default=8)
    p.add_argument("--sh-degree", type=int, default=3, dest="sh_degree")
    p.add_argument("--bilinear-params", action="store_true", dest="bilinear_params")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("optimize", help="optimize distribution maps on a scene")
    p.add_argument("--data", required=True, dest="data_dir")
    p.add_argument("--init", required=True, dest="init_dir")
    p.add_argument("--out", required=True, dest="out_dir")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda-render", type=float, default=1.0, dest="lambda_render")
    p.add_argument("--lambda-consist", type=float, default=0.25, dest="lambda_consist")
    p.add_argument("--lambda-depth", type=float, default=0.1, dest="lambda_depth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--k-fine", type=int, default=16, dest="k_fine")
    p.add_argument("--sampling-mode", choices=["uniform", "c2f"],
                   default="uniform", dest="sampling_mode")
    p.add_argument("--nw", type=int, default=8)
    p.add_argument("--sh-degree", type=int, default=3, dest="sh_degree")
    p.add_argument("--eval-views", default="", dest="eval_views",
                   help="comma-separated held-out view indices")
    p.add_argument("--eval-interval", type=int, default=500, dest="eval_interval")
    p.add_argument("--consist-variant", choices=["binary", "categorical"],
                   default="binary", dest="consist_variant")
    p.add_argument("--consist-flow", choices=["stop_h", "symmetric"],
                   default="stop_h", dest="consist_flow")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--checkpoint-interval", type=int, default=None,
                   dest="checkpoint_interval")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", help="PSNR table between two image directories")
    p.add_argument("rendered_dir")
    p.add_argument("gt_dir")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="counter and timing report for both render modes")
    p.add_argument("--data", required=True, dest="data_dir")
    p.add_argument("--maps", required=True, dest="maps_dir")
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--k-uniform", type=int, default=128, dest="k_uniform")
    p.add_argument("--k-coarse", type=int, default=32, dest="k_coarse")
    p.add_argument("--k-fine", type=int, default=8, dest="k_fine")
    p.add_argument("--nw", type=int, default=8)
    p.add_argument("--sh-degree", type=int, default=3, dest="sh_degree")
    p.add_argument("--kr", type=int, default=32)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (RayvisError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
