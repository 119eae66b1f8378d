"""Training loop: render, loss, backward, Adam step, interval densification.

Randomness is stateless: the view order for each epoch and the split
sampling for each growth interval derive from (seed, epoch/iteration), so a
checkpointed run resumes bit-exactly without serializing generator state.
All compute is float64; the sidecar checkpoint blob keeps full precision so
a reload reproduces the uninterrupted run.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backward import backward_view
from .cameras import Scene
from .densify import GrowthStats, PolicyConfig, accumulate, run_interval_policy
from .errors import NanLossError
from .gaussians import GaussianCloud, save_cloud
from .losses import combined_loss, psnr, ssim_map
from .renderer import render_view

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

PARAM_GROUPS = ("means", "log_scales", "rotations", "raw_opacities", "colors")


@dataclass
class TrainConfig:
    total_iters: int = 3000
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacities: float = 5e-2
    lr_colors: float = 2.5e-3
    lambda_ssim: float = 0.2
    eval_every: int = 250
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    opacity_reset_every: int = 0  # 0 keeps the periodic reset off
    seed: int = 0
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        for name in ("lr_means", "lr_means_final", "lr_scales", "lr_rotations",
                     "lr_opacities", "lr_colors"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def densify_end(self) -> int:
        if self.policy.densify_end is not None:
            return self.policy.densify_end
        return int(0.6 * self.total_iters)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EvalRecord:
    iteration: int
    train_psnr: float
    test_psnr: float
    test_ssim: float
    n_gaussians: int
    wall_time: float  # seconds since training started; kept out of reports


@dataclass
class TrainReport:
    records: list[EvalRecord]
    growth_log: list[dict]
    cloud: GaussianCloud
    config: TrainConfig
    total_wall_time: float = 0.0

    @property
    def final(self) -> EvalRecord:
        return self.records[-1]


class Adam:
    """Adaptive-moment optimizer over the five parameter groups."""

    def __init__(self, n: int):
        self.step_count = 0
        self.m = {g: None for g in PARAM_GROUPS}
        self.v = {g: None for g in PARAM_GROUPS}
        self._init(n)

    def _init(self, n: int):
        shapes = {"means": (n, 3), "log_scales": (n, 3), "rotations": (n, 4),
                  "raw_opacities": (n,), "colors": (n, 3)}
        for g in PARAM_GROUPS:
            self.m[g] = np.zeros(shapes[g])
            self.v[g] = np.zeros(shapes[g])

    def step(self, cloud: GaussianCloud, grads, lrs: dict):
        self.step_count += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.step_count
        bc2 = 1.0 - ADAM_BETA2 ** self.step_count
        params = {"means": cloud.means, "log_scales": cloud.log_scales,
                  "rotations": cloud.rotations, "raw_opacities": cloud.raw_opacities,
                  "colors": cloud.colors}
        gs = {"means": grads.d_means, "log_scales": grads.d_log_scales,
              "rotations": grads.d_rotations, "raw_opacities": grads.d_raw_opacities,
              "colors": grads.d_colors}
        for g in PARAM_GROUPS:
            m = self.m[g]
            v = self.v[g]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * gs[g]
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * gs[g] ** 2
            params[g] -= lrs[g] * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)

    def remap(self, src_index: np.ndarray, fresh: np.ndarray):
        """Rebuild state after grow/prune: rows inherit their parent's
        moments except where fresh marks a zeroed start."""
        for g in PARAM_GROUPS:
            m = self.m[g][src_index].copy()
            v = self.v[g][src_index].copy()
            m[fresh] = 0.0
            v[fresh] = 0.0
            self.m[g] = m
            self.v[g] = v

    def zero_group(self, group: str):
        self.m[group][:] = 0.0
        self.v[group][:] = 0.0


def mean_lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Exponential decay from lr_means to lr_means_final over the run."""
    t = min(max(iteration, 0), cfg.total_iters) / cfg.total_iters
    return float(cfg.lr_means * (cfg.lr_means_final / cfg.lr_means) ** t)


def view_order_for_epoch(seed: int, epoch: int, n_train: int) -> np.ndarray:
    rng = np.random.default_rng((seed + 1) * 1_000_003 + epoch)
    return rng.permutation(n_train)


def evaluate(cloud: GaussianCloud, scene: Scene, split: str):
    """Mean PSNR and mean SSIM of the rendered views in a split."""
    indices = scene.indices(split)
    if not indices:
        raise ValueError(f"no views in split {split!r}")
    psnrs, ssims = [], []
    for i in indices:
        out = render_view(cloud, scene.cameras[i], scene.background)
        psnrs.append(psnr(out.image, scene.gt_images[i]))
        ssims.append(ssim_map(out.image, scene.gt_images[i]).mean)
    return float(np.mean(psnrs)), float(np.mean(ssims))


def _dump_diagnostics(out_dir, cloud: GaussianCloud, view_id: int, iteration: int):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_cloud(cloud, out_dir / f"nan_iter{iteration}_view{view_id}.hgscloud")


def train(scene: Scene, init: GaussianCloud, cfg: TrainConfig,
          diagnostics_dir=None, checkpoint_dir=None,
          _resume=None) -> TrainReport:
    """Optimize a cloud against the scene's train views.

    Every policy.interval iterations inside the densify window the growth
    policy runs and the optimizer state is remapped onto the new cloud.
    Evaluation runs every eval_every iterations and at the final one.
    """
    train_idx = scene.train_indices
    if len(train_idx) < 2:
        raise ValueError("need at least 2 train views")
    policy = cfg.policy.resolved(scene.cameras[0].width, scene.cameras[0].height)
    densify_end = cfg.densify_end()

    if _resume is not None:
        cloud = _resume["cloud"]
        adam = _resume["adam"]
        stats = _resume["stats"]
        records = _resume["records"]
        growth_log = _resume["growth_log"]
        start_iter = _resume["iteration"]
    else:
        cloud = init.copy()
        adam = Adam(len(cloud))
        stats = GrowthStats.zeros(len(cloud), policy.k)
        records = []
        growth_log = []
        start_iter = 0

    t0 = time.perf_counter()
    n_train = len(train_idx)

    for it in range(start_iter + 1, cfg.total_iters + 1):
        epoch, slot = divmod(it - 1, n_train)
        cam_i = train_idx[int(view_order_for_epoch(cfg.seed, epoch, n_train)[slot])]
        camera = scene.cameras[cam_i]
        gt = scene.gt_images[cam_i]

        render = render_view(cloud, camera, scene.background)
        loss, d_image = combined_loss(render.image, gt, cfg.lambda_ssim)
        if not np.isfinite(loss):
            if diagnostics_dir is not None:
                _dump_diagnostics(diagnostics_dir, cloud, camera.view_id, it)
            raise NanLossError(f"non-finite loss at iteration {it}, view {camera.view_id}")
        grads = backward_view(cloud, camera, render, d_image)

        # Stats must see the geometry that produced this render, so they
        # accumulate before the optimizer moves anything.
        densifying = it <= densify_end
        if densifying:
            mean2d = _projected_means(cloud, camera)
            smap = ssim_map(render.image, gt)
            accumulate(stats, camera.view_id, grads, render, smap, mean2d, policy)

        lrs = {"means": mean_lr_at(cfg, it), "log_scales": cfg.lr_scales,
               "rotations": cfg.lr_rotations, "raw_opacities": cfg.lr_opacities,
               "colors": cfg.lr_colors}
        adam.step(cloud, grads, lrs)

        if densifying:
            interval_done = stats.interval_iter >= policy.interval
            in_window = policy.densify_start <= it <= densify_end
            if interval_done and in_window:
                result = run_interval_policy(cloud, stats, policy, scene.extent,
                                             seed=cfg.seed * 7_919 + it)
                cloud = result.cloud
                stats = result.stats
                adam.remap(result.src_index, result.fresh_moments)
                growth_log.append({"iteration": it, "policy": policy.policy,
                                   **result.counts})
            elif interval_done:
                stats = GrowthStats.zeros(len(cloud), policy.k)

        if cfg.opacity_reset_every and it % cfg.opacity_reset_every == 0 and it <= densify_end:
            np.minimum(cloud.raw_opacities, float(np.log(0.01 / 0.99)),
                       out=cloud.raw_opacities)
            adam.zero_group("raw_opacities")

        if it % cfg.eval_every == 0 or it == cfg.total_iters:
            tr_psnr, _ = evaluate(cloud, scene, "train")
            te_psnr, te_ssim = evaluate(cloud, scene, "test")
            records.append(EvalRecord(it, tr_psnr, te_psnr, te_ssim, len(cloud),
                                      time.perf_counter() - t0))

        if checkpoint_dir is not None and cfg.checkpoint_every and \
                it % cfg.checkpoint_every == 0 and it < cfg.total_iters:
            save_checkpoint(checkpoint_dir, it, cloud, adam, stats, cfg,
                            records, growth_log)

    return TrainReport(records=records, growth_log=growth_log, cloud=cloud,
                       config=cfg, total_wall_time=time.perf_counter() - t0)


def _projected_means(cloud: GaussianCloud, camera) -> np.ndarray:
    """Projected pixel position of every Gaussian mean (rows of culled
    Gaussians hold whatever the projection produced; callers gate on
    visibility)."""
    p_cam = cloud.means @ camera.rotation.T + camera.translation
    z = np.where(p_cam[:, 2] > 0, p_cam[:, 2], 1.0)
    return np.stack([camera.fx * p_cam[:, 0] / z + camera.cx,
                     camera.fy * p_cam[:, 1] / z + camera.cy], axis=1)


# --- checkpointing ----------------------------------------------------------

def save_checkpoint(path, iteration: int, cloud: GaussianCloud, adam: Adam,
                    stats: GrowthStats, cfg: TrainConfig,
                    records: list, growth_log: list) -> None:
    """HGSCLOUD artifact plus a full-precision sidecar for exact resume."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_cloud(cloud, path / "cloud.hgscloud")

    blob = {"means": cloud.means, "log_scales": cloud.log_scales,
            "rotations": cloud.rotations, "raw_opacities": cloud.raw_opacities,
            "colors": cloud.colors,
            "stats_grad_sum": stats.grad_sum, "stats_view_count": stats.view_count,
            "stats_topk": stats.topk, "stats_last_mean_grad": stats.last_mean_grad,
            "adam_step": np.array([adam.step_count])}
    hit_rows = []
    hit_views = []
    for i, views in enumerate(stats.rehgs_hit_views):
        for v in sorted(views):
            hit_rows.append(i)
            hit_views.append(v)
    blob["stats_hits"] = np.array([hit_rows, hit_views], dtype=np.int64).reshape(2, -1)
    for g in PARAM_GROUPS:
        blob[f"adam_m_{g}"] = adam.m[g]
        blob[f"adam_v_{g}"] = adam.v[g]
    np.savez(path / "state.npz", **blob)

    meta = {
        "iteration": iteration,
        "interval_iter": stats.interval_iter,
        "moments_blob": "state.npz",
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "records": [asdict(r) for r in records],
        "growth_log": growth_log,
    }
    with open(path / "checkpoint.json", "w") as f:
        json.dump(meta, f, indent=1)


def load_checkpoint(path, cfg: TrainConfig):
    """Resume bundle for train(..., _resume=...); verifies the config hash."""
    path = Path(path)
    with open(path / "checkpoint.json") as f:
        meta = json.load(f)
    if meta["config_hash"] != cfg.digest():
        raise ValueError("checkpoint was produced by a different configuration")
    blob = np.load(path / "state.npz")
    cloud = GaussianCloud(blob["means"], blob["log_scales"], blob["rotations"],
                          blob["raw_opacities"], blob["colors"])
    n = len(cloud)
    policy = cfg.policy
    adam = Adam(n)
    adam.step_count = int(blob["adam_step"][0])
    for g in PARAM_GROUPS:
        adam.m[g] = blob[f"adam_m_{g}"].copy()
        adam.v[g] = blob[f"adam_v_{g}"].copy()
    stats = GrowthStats.zeros(n, policy.k)
    stats.grad_sum = blob["stats_grad_sum"].copy()
    stats.view_count = blob["stats_view_count"].copy()
    stats.topk = blob["stats_topk"].copy()
    stats.last_mean_grad = blob["stats_last_mean_grad"].copy()
    stats.interval_iter = int(meta["interval_iter"])
    hits = blob["stats_hits"]
    for row, view in zip(hits[0], hits[1]):
        stats.rehgs_hit_views[int(row)].add(int(view))
    records = [EvalRecord(**r) for r in meta["records"]]
    return {"cloud": cloud, "adam": adam, "stats": stats,
            "records": records, "growth_log": meta["growth_log"],
            "iteration": int(meta["iteration"])}


def resume_train(scene: Scene, checkpoint_path, cfg: TrainConfig,
                 diagnostics_dir=None, checkpoint_dir=None) -> TrainReport:
    resume = load_checkpoint(checkpoint_path, cfg)
    return train(scene, GaussianCloud.empty(), cfg,
                 diagnostics_dir=diagnostics_dir, checkpoint_dir=checkpoint_dir,
                 _resume=resume)


# --- report files -----------------------------------------------------------

def write_report(report: TrainReport, out_dir) -> None:
    """CSV of eval records, growth-log CSV, JSON summary, timing sidecar.

    Metric files contain only deterministic content; wall-clock timings go
    to a separate sidecar so repeated seeded runs produce byte-identical
    reports.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "report.csv", "w") as f:
        f.write("iteration,train_psnr,test_psnr,test_ssim,n_gaussians\n")
        for r in report.records:
            f.write(f"{r.iteration},{r.train_psnr:.6f},{r.test_psnr:.6f},"
                    f"{r.test_ssim:.6f},{r.n_gaussians}\n")

    with open(out_dir / "growth_log.csv", "w") as f:
        f.write("iteration,policy,n_before,og_count,pghgs_count,rehgs_count,"
                "effi_count,union_count,pruned,n_after\n")
        for row in report.growth_log:
            f.write(f"{row['iteration']},{row['policy']},{row['n_before']},"
                    f"{row['og_count']},{row['pghgs_count']},{row['rehgs_count']},"
                    f"{row['effi_count']},{row['union_count']},{row['pruned']},"
                    f"{row['n_after']}\n")

    final = report.final
    summary = {
        "config": report.config.to_dict(),
        "config_hash": report.config.digest(),
        "final": {"iteration": final.iteration, "train_psnr": final.train_psnr,
                  "test_psnr": final.test_psnr, "test_ssim": final.test_ssim,
                  "n_gaussians": final.n_gaussians},
    }
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)

    with open(out_dir / "timings.txt", "w") as f:
        f.write(f"total_wall_time_s {report.total_wall_time:.3f}\n")
        for r in report.records:
            f.write(f"iter {r.iteration} wall {r.wall_time:.3f}\n")
