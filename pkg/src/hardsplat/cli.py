"""Command-line surface: scene generation, training, evaluation, policy
comparison, rendering and diagnostic map export.

Every command is deterministic given --seed. Exit codes: 0 success, 2 usage
errors, 1 runtime failures. HGS_THREADS caps compare's process parallelism.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from .cameras import (SceneSpec, gen_synthetic, init_cloud, load_scene,
                      load_scene_gt_cloud, save_scene)
from .densify import POLICIES, PolicyConfig
from .gaussians import load_cloud, save_cloud
from .imgio import save_png, save_png_gray
from .losses import ssim_map
from .renderer import render_view
from .trainer import TrainConfig, evaluate, train, resume_train, write_report


def _load_toml_defaults(path):
    import tomli

    with open(path, "rb") as f:
        return tomli.load(f)


def _apply_config_file(ctx: click.Context, values: dict, config_path):
    """Config-file values fill in anything the command line left at default."""
    if config_path is None:
        return values
    file_vals = _load_toml_defaults(config_path)
    out = dict(values)
    for key, val in file_vals.items():
        pykey = key.replace("-", "_")
        if pykey not in values:
            raise click.UsageError(f"unknown config key {key!r}")
        src = ctx.get_parameter_source(pykey)
        if src is not None and src.name != "COMMANDLINE":
            out[pykey] = val
    return out


def _build_train_config(v: dict) -> TrainConfig:
    policy = PolicyConfig(
        tau_grad=v["tau_grad"],
        grad_unit_scale=v["grad_unit_scale"],
        interval=v["interval"],
        k=v["k"],
        lam=v["lam"],
        tau_large=v["tau_large"],
        tau_ssim=v["tau_ssim"],
        policy=v["policy"],
        densify_start=v["densify_start"],
        densify_end=v["densify_end"],
        percent_dense=v["percent_dense"],
        prune_opacity=v["prune_opacity"],
        max_gaussians=v["max_gaussians"],
    )
    return TrainConfig(
        total_iters=v["iters"],
        lambda_ssim=v["lambda_ssim"],
        eval_every=v["eval_every"],
        checkpoint_every=v["checkpoint_every"],
        opacity_reset_every=v["opacity_reset_every"],
        seed=v["seed"],
        policy=policy,
    )


_train_options = [
    click.option("--policy", type=click.Choice(POLICIES), default="og", show_default=True),
    click.option("--iters", type=int, default=3000, show_default=True),
    click.option("--seed", type=int, default=0, show_default=True),
    click.option("--init-count", type=int, default=200, show_default=True,
                 help="Gaussians in the initial cloud."),
    click.option("--init-mode", type=click.Choice(["gt-subsample", "random-ball"]),
                 default="gt-subsample", show_default=True),
    click.option("--lambda-ssim", type=float, default=0.2, show_default=True),
    click.option("--eval-every", type=int, default=250, show_default=True),
    click.option("--checkpoint-every", type=int, default=0, show_default=True),
    click.option("--opacity-reset-every", type=int, default=0, show_default=True),
    click.option("--tau-grad", type=float, default=2e-4, show_default=True),
    click.option("--grad-unit-scale", type=float, default=1.0, show_default=True,
                 help="Multiplier mapping tau_grad into pixel-gradient units."),
    click.option("--interval", type=int, default=100, show_default=True,
                 help="Growth interval M."),
    click.option("--k", type=int, default=3, show_default=True),
    click.option("--lam", type=float, default=1.0, show_default=True),
    click.option("--tau-large", type=float, default=2e-4, show_default=True),
    click.option("--tau-ssim", type=float, default=0.7, show_default=True),
    click.option("--densify-start", type=int, default=500, show_default=True),
    click.option("--densify-end", type=int, default=None),
    click.option("--percent-dense", type=float, default=0.01, show_default=True),
    click.option("--prune-opacity", type=float, default=0.005, show_default=True),
    click.option("--max-gaussians", type=int, default=20000, show_default=True),
    click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                 help="TOML file of option defaults; command-line flags win."),
]


def _with_train_options(fn):
    for opt in reversed(_train_options):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Desk-scale Gaussian-splatting trainer with hard-Gaussian growing."""


@main.command("gen-scene")
@click.argument("out_dir", type=click.Path())
@click.option("--views", type=int, default=16, show_default=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--gaussians", type=int, default=600, show_default=True)
@click.option("--ring-radius", type=float, default=4.0, show_default=True)
@click.option("--test-every", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_gen_scene(out_dir, views, size, gaussians, ring_radius, test_every, seed):
    """Generate a synthetic multi-view scene with exact ground truth."""
    if views < 3:
        raise click.UsageError("--views must be at least 3")
    if gaussians < 1:
        raise click.UsageError("--gaussians must be at least 1")
    spec = SceneSpec(views=views, width=size, height=size, gaussians=gaussians,
                     ring_radius=ring_radius, test_every=test_every)
    scene, gt_cloud = gen_synthetic(spec, seed)
    save_scene(scene, out_dir, gt_cloud=gt_cloud)
    click.echo(f"wrote {views} views to {out_dir}")


@main.command("train")
@click.argument("scene_dir", type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--resume", "resume_path", type=click.Path(exists=True), default=None)
@_with_train_options
@click.pass_context
def cmd_train(ctx, scene_dir, out_dir, resume_path, config_path, **opts):
    """Train a cloud on a scene directory and write report + checkpoint."""
    values = _apply_config_file(ctx, opts, config_path)
    cfg = _build_train_config(values)
    scene = load_scene(scene_dir)
    out_dir = Path(out_dir)

    if resume_path is not None:
        report = resume_train(scene, resume_path, cfg,
                              diagnostics_dir=out_dir / "diagnostics",
                              checkpoint_dir=out_dir / "checkpoint")
    else:
        gt_cloud = load_scene_gt_cloud(scene_dir)
        init = init_cloud(scene, values["init_count"], values["init_mode"],
                          cfg.seed, gt_cloud=gt_cloud)
        report = train(scene, init, cfg,
                       diagnostics_dir=out_dir / "diagnostics",
                       checkpoint_dir=out_dir / "checkpoint")

    write_report(report, out_dir)
    save_cloud(report.cloud, out_dir / "final.hgscloud")
    final = report.final
    click.echo(f"final: iter {final.iteration} test_psnr {final.test_psnr:.3f} "
               f"test_ssim {final.test_ssim:.4f} n {final.n_gaussians}")


@main.command("eval")
@click.argument("cloud_path", type=click.Path(exists=True))
@click.argument("scene_dir", type=click.Path(exists=True))
@click.option("--split", type=click.Choice(["train", "test"]), default="test",
              show_default=True)
def cmd_eval(cloud_path, scene_dir, split):
    """Evaluate a saved cloud on one split of a scene."""
    cloud = load_cloud(cloud_path)
    scene = load_scene(scene_dir)
    mean_psnr, mean_ssim = evaluate(cloud, scene, split)
    click.echo(f"{split}: psnr {mean_psnr:.3f} ssim {mean_ssim:.4f} n {len(cloud)}")


@main.command("render")
@click.argument("cloud_path", type=click.Path(exists=True))
@click.argument("scene_dir", type=click.Path(exists=True))
@click.option("--view-id", type=int, required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def cmd_render(cloud_path, scene_dir, view_id, out_path):
    """Render one view of a saved cloud to PNG."""
    cloud = load_cloud(cloud_path)
    scene = load_scene(scene_dir)
    camera = _camera_by_view(scene, view_id)
    out = render_view(cloud, camera, scene.background)
    save_png(out_path, out.image)
    click.echo(f"wrote {out_path}")


def _camera_by_view(scene, view_id):
    for cam in scene.cameras:
        if cam.view_id == view_id:
            return cam
    raise click.UsageError(f"view_id {view_id} not in scene")


def _index_colormap(rendered_index: np.ndarray) -> np.ndarray:
    """Hash indices to stable distinct colors; -1 maps to black."""
    h, w = rendered_index.shape
    img = np.zeros((h, w, 3))
    idx = rendered_index.astype(np.int64)
    valid = idx >= 0
    x = idx[valid].astype(np.uint64)
    mixed = (x * np.uint64(2654435761)) % np.uint64(2 ** 24)
    img[valid, 0] = ((mixed >> np.uint64(16)) & np.uint64(255)) / 255.0
    img[valid, 1] = ((mixed >> np.uint64(8)) & np.uint64(255)) / 255.0
    img[valid, 2] = (mixed & np.uint64(255)) / 255.0
    return img


def _overlay_points(base: np.ndarray, points: np.ndarray, color) -> np.ndarray:
    img = base.copy()
    h, w = img.shape[:2]
    for px, py in points:
        x, y = int(px), int(py)
        if 0 <= x < w and 0 <= y < h:
            img[y, x] = color
    return img


@main.command("diag")
@click.argument("cloud_path", type=click.Path(exists=True))
@click.argument("scene_dir", type=click.Path(exists=True))
@click.option("--view-id", type=int, required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--tau-large", type=float, default=2e-4, show_default=True)
@click.option("--tau-ssim", type=float, default=0.7, show_default=True)
@click.option("--lambda-ssim", type=float, default=0.2, show_default=True)
@click.option("--ssim/--no-ssim", "want_ssim", default=True, show_default=True,
              help="Write the per-pixel SSIM map as a grayscale PNG.")
@click.option("--grads/--no-grads", default=True, show_default=True,
              help="Also dump per-Gaussian view-space gradient norms.")
def cmd_diag(cloud_path, scene_dir, view_id, out_dir, tau_large, tau_ssim,
             lambda_ssim, want_ssim, grads):
    """Diagnostic bundle for one view: rendered-index map, SSIM map,
    over-large and hard-Gaussian projection overlays, gradient CSV."""
    from .backward import backward_view
    from .losses import combined_loss

    cloud = load_cloud(cloud_path)
    scene = load_scene(scene_dir)
    camera = _camera_by_view(scene, view_id)
    gt = scene.gt_images[[c.view_id for c in scene.cameras].index(view_id)]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    render = render_view(cloud, camera, scene.background)
    smap = ssim_map(render.image, gt)

    save_png(out_dir / "rendered.png", render.image)
    save_png(out_dir / "rendered_index.png", _index_colormap(render.rendered_index))
    render.rendered_index.astype("<u4").tofile(out_dir / "rendered_index.u32")
    if want_ssim:
        save_png_gray(out_dir / "ssim_map.png", (smap.values + 1.0) / 2.0)

    h, w = render.image.shape[:2]
    p_cam = cloud.means @ camera.rotation.T + camera.translation
    z = np.where(p_cam[:, 2] > 0, p_cam[:, 2], 1.0)
    mean2d = np.stack([camera.fx * p_cam[:, 0] / z + camera.cx,
                       camera.fy * p_cam[:, 1] / z + camera.cy], axis=1)
    px = np.floor(mean2d[:, 0]).astype(np.int64)
    py = np.floor(mean2d[:, 1]).astype(np.int64)
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h) & render.visible

    over_large = inside & (render.pixel_counts > tau_large * h * w)
    ssim_at = np.full(len(cloud), np.nan)
    ssim_at[inside] = smap.values[py[inside], px[inside]]
    hard = over_large & (ssim_at < tau_ssim)

    for name, mask in (("over_large", over_large), ("hard", hard)):
        rows = np.nonzero(mask)[0]
        with open(out_dir / f"{name}_points.csv", "w") as f:
            f.write("gaussian_index,px,py,pixel_count,ssim\n")
            for i in rows:
                f.write(f"{i},{mean2d[i, 0]:.3f},{mean2d[i, 1]:.3f},"
                        f"{render.pixel_counts[i]},{ssim_at[i]:.6f}\n")
    save_png(out_dir / "over_large_overlay.png",
             _overlay_points(render.image, mean2d[over_large], (1.0, 1.0, 0.0)))
    save_png(out_dir / "hard_overlay.png",
             _overlay_points(render.image, mean2d[hard], (1.0, 0.0, 0.0)))

    if grads:
        loss, d_image = combined_loss(render.image, gt, lambda_ssim)
        pg = backward_view(cloud, camera, render, d_image)
        norms = np.linalg.norm(pg.viewspace_grads, axis=1)
        with open(out_dir / "grad_norms.csv", "w") as f:
            f.write("gaussian_index,view_id,grad_norm\n")
            for i in range(len(cloud)):
                f.write(f"{i},{view_id},{norms[i]:.9e}\n")

    click.echo(f"wrote diagnostics to {out_dir}")


def _compare_job(args):
    """Run one (policy/tau, seed) training job in its own process."""
    scene_dir, out_dir, values = args
    cfg = _build_train_config(values)
    scene = load_scene(scene_dir)
    gt_cloud = load_scene_gt_cloud(scene_dir)
    init = init_cloud(scene, values["init_count"], values["init_mode"],
                      cfg.seed, gt_cloud=gt_cloud)
    report = train(scene, init, cfg)
    write_report(report, out_dir)
    save_cloud(report.cloud, Path(out_dir) / "final.hgscloud")
    final = report.final
    return {"label": values["label"], "seed": cfg.seed,
            "test_psnr": final.test_psnr, "test_ssim": final.test_ssim,
            "final_n": final.n_gaussians, "wall_time": report.total_wall_time}


@main.command("compare")
@click.argument("scene_dir", type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--policies", default="og,hgs", show_default=True,
              help="Comma-separated list of policies to train.")
@click.option("--seeds", default="0", show_default=True,
              help="Comma-separated list of seeds; each policy runs once per seed.")
@click.option("--tau-grad-sweep", default=None,
              help="Comma-separated tau_grad values; runs og at each (threshold "
                   "ablation mode, replaces --policies).")
@_with_train_options
@click.pass_context
def cmd_compare(ctx, scene_dir, out_dir, policies, seeds, tau_grad_sweep,
                config_path, **opts):
    """Train each (policy, seed) pair and tabulate test metrics."""
    values = _apply_config_file(ctx, opts, config_path)
    seed_list = [int(s) for s in seeds.split(",") if s]
    if not seed_list:
        raise click.UsageError("need at least one seed")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    if tau_grad_sweep is not None:
        taus = [float(t) for t in tau_grad_sweep.split(",") if t]
        if not taus:
            raise click.UsageError("empty --tau-grad-sweep")
        for tau in taus:
            for seed in seed_list:
                v = dict(values, policy="og", tau_grad=tau, seed=seed,
                         label=f"og@tau={tau:g}")
                jobs.append((scene_dir, str(out_dir / f"og_tau{tau:g}_seed{seed}"), v))
    else:
        policy_list = [p for p in policies.split(",") if p]
        if not policy_list:
            raise click.UsageError("need at least one policy")
        for p in policy_list:
            if p not in POLICIES:
                raise click.UsageError(f"unknown policy {p!r}")
            for seed in seed_list:
                v = dict(values, policy=p, seed=seed, label=p)
                jobs.append((scene_dir, str(out_dir / f"{p}_seed{seed}"), v))

    workers = int(os.environ.get("HGS_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_compare_job, jobs))
    else:
        results = [_compare_job(j) for j in jobs]

    by_label: dict[str, list[dict]] = {}
    for r in results:
        by_label.setdefault(r["label"], []).append(r)

    rows = []
    for label, rs in by_label.items():
        p = np.array([r["test_psnr"] for r in rs])
        s = np.array([r["test_ssim"] for r in rs])
        n = np.array([r["final_n"] for r in rs])
        t = np.array([r["wall_time"] for r in rs])
        # Metric precision matches report.csv so single-seed rows agree
        # with the underlying report byte for byte.
        rows.append({
            "label": label, "runs": len(rs),
            "psnr_mean": f"{p.mean():.6f}", "psnr_std": f"{p.std():.6f}",
            "ssim_mean": f"{s.mean():.6f}", "ssim_std": f"{s.std():.6f}",
            "final_n_mean": f"{n.mean():.1f}", "wall_time_mean": f"{t.mean():.1f}",
        })

    with open(out_dir / "compare.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    with open(out_dir / "compare.md", "w") as f:
        f.write("| run | seeds | test PSNR | test SSIM | final N | wall s |\n")
        f.write("|---|---|---|---|---|---|\n")
        for r in rows:
            f.write(f"| {r['label']} | {r['runs']} "
                    f"| {r['psnr_mean']} ± {r['psnr_std']} "
                    f"| {r['ssim_mean']} ± {r['ssim_std']} "
                    f"| {r['final_n_mean']} | {r['wall_time_mean']} |\n")
    with open(out_dir / "runs.json", "w") as f:
        json.dump(results, f, indent=1)
    click.echo((out_dir / "compare.md").read_text())


def entry():
    try:
        main(standalone_mode=True)
    except Exception as exc:  # noqa: BLE001 - map runtime failures to exit 1
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    entry()
