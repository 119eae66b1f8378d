"""Growth statistics and the four densification policies.

Per-Gaussian statistics accumulate over a growth interval of M iterations:
the summed view-space gradient norm and view count feed the original
average-gradient criterion (og); a descending top-k buffer of per-view
gradient norms feeds the order-statistic criterion (pghgs) and its
budgeted variant (effi); and a set of distinct views where a Gaussian was
simultaneously over-large (owning more than tau_large * |P| pixels by
rendered index) and locally poorly reconstructed (windowed SSIM below
tau_ssim at its projected pixel) feeds the rendering-error criterion
(rehgs), which requires evidence from at least two views.

Selected Gaussians grow once per interval regardless of how many criteria
fired: small ones are cloned (copy nudged along the latest mean-gradient
direction), large ones split into two samples of their own distribution
with scales shrunk by 1.6.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .backward import ParamGrads
from .gaussians import GaussianCloud, normalize_quaternions, quat_to_rotmat, sigmoid
from .losses import SsimMap
from .renderer import RenderOutput

POLICIES = ("og", "pghgs", "rehgs", "hgs", "effi-hgs")

SPLIT_SCALE_SHRINK = 1.6
CLONE_OFFSET_FRACTION = 0.01
PRUNE_SCALE_FRACTION = 0.5


@dataclass(frozen=True)
class PolicyConfig:
    """Thresholds for growing and pruning.

    View-space gradient norms are measured in pixels and compared against
    tau_grad * grad_unit_scale. The default identity scale keeps the stock
    thresholds inside the gradient band actually observed on desk-scale
    scenes (64px images put the NDC-style rescale, in either direction,
    outside the useful range, leaving the criteria dead or saturated).
    """

    tau_grad: float = 2e-4
    grad_unit_scale: float | None = 1.0
    interval: int = 100            # M iterations per growth interval
    k: int = 3
    lam: float = 1.0
    tau_large: float = 2e-4
    tau_ssim: float = 0.7
    policy: str = "og"
    densify_start: int = 500
    densify_end: int | None = None  # trainer default: 60% of total iterations
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    max_gaussians: int = 20000     # growth budget per run

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not 0.0 < self.tau_large < 1.0:
            raise ValueError("tau_large must lie in (0, 1)")
        if not 0.0 < self.tau_ssim <= 1.0:
            raise ValueError("tau_ssim must lie in (0, 1]")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")

    def resolved(self, width: int, height: int) -> "PolicyConfig":
        """Fill grad_unit_scale when explicitly configured as None
        (meaning: use the NDC-to-pixel coordinate scale of this image)."""
        if self.grad_unit_scale is not None:
            return self
        return replace(self, grad_unit_scale=max(width, height) / 2.0)

    @property
    def tau_grad_px(self) -> float:
        if self.grad_unit_scale is None:
            raise ValueError("grad_unit_scale not resolved yet")
        return self.tau_grad * self.grad_unit_scale


@dataclass
class GrowthStats:
    """Per-Gaussian accumulators across one growth interval."""

    grad_sum: np.ndarray            # (N,) sum of view-space gradient norms
    view_count: np.ndarray          # (N,) views the Gaussian participated in
    topk: np.ndarray                # (N, k) descending; -1 marks empty slots
    rehgs_hit_views: list[set]      # distinct view_ids passing both error tests
    last_mean_grad: np.ndarray      # (N, 3) latest world-space mean gradient
    interval_iter: int = 0

    @staticmethod
    def zeros(n: int, k: int) -> "GrowthStats":
        return GrowthStats(
            grad_sum=np.zeros(n),
            view_count=np.zeros(n, dtype=np.int64),
            topk=np.full((n, k), -1.0),
            rehgs_hit_views=[set() for _ in range(n)],
            last_mean_grad=np.zeros((n, 3)),
        )

    def __len__(self) -> int:
        return self.grad_sum.shape[0]


def accumulate(stats: GrowthStats, view_id: int, grads: ParamGrads,
               render: RenderOutput, ssim: SsimMap, mean2d: np.ndarray,
               cfg: PolicyConfig) -> GrowthStats:
    """Fold one view's gradients and error evidence into the interval stats.

    mean2d holds each Gaussian's projected mean in pixels (rows of
    invisible Gaussians are ignored). Mutates and returns stats.
    """
    n = len(stats)
    if not (len(grads.viewspace_grads) == n == len(render.visible) == len(mean2d)):
        raise ValueError("stats, grads, render and projections must share N")
    height, width = render.image.shape[:2]
    if ssim.values.shape != (height, width):
        raise ValueError("ssim map does not match the rendered image")

    vis = render.visible
    norms = np.linalg.norm(grads.viewspace_grads, axis=1)
    stats.grad_sum[vis] += norms[vis]
    stats.view_count[vis] += 1
    stats.last_mean_grad[vis] = grads.d_means[vis]

    if np.any(vis):
        stacked = np.concatenate([stats.topk[vis], norms[vis, None]], axis=1)
        stacked.sort(axis=1)
        stats.topk[vis] = stacked[:, :0:-1]  # keep the k largest, descending

    # Rendering-error evidence: over-large by rendered-index ownership and
    # locally dissimilar at the projected center.
    over_large = vis & (render.pixel_counts > cfg.tau_large * height * width)
    if np.any(over_large):
        px = np.floor(mean2d[:, 0]).astype(np.int64)
        py = np.floor(mean2d[:, 1]).astype(np.int64)
        inside = (px >= 0) & (px < width) & (py >= 0) & (py < height)
        cand = np.nonzero(over_large & inside)[0]
        if cand.size:
            bad = ssim.values[py[cand], px[cand]] < cfg.tau_ssim
            for i in cand[bad]:
                stats.rehgs_hit_views[int(i)].add(int(view_id))

    stats.interval_iter += 1
    return stats


def select_og(stats: GrowthStats, cfg: PolicyConfig) -> np.ndarray:
    """Average view-space gradient norm at or above the threshold."""
    seen = stats.view_count > 0
    mean = np.divide(stats.grad_sum, stats.view_count,
                     out=np.zeros_like(stats.grad_sum), where=seen)
    return seen & (mean >= cfg.tau_grad_px)


def select_pghgs(stats: GrowthStats, cfg: PolicyConfig) -> np.ndarray:
    """k-th largest per-view gradient norm at or above lambda * threshold.

    Gaussians observed fewer than k times are never selected here.
    """
    enough = stats.view_count >= cfg.k
    return enough & (stats.topk[:, cfg.k - 1] >= cfg.lam * cfg.tau_grad_px)


def select_rehgs(stats: GrowthStats, cfg: PolicyConfig) -> np.ndarray:
    """Error evidence from at least two distinct views."""
    hits = np.array([len(s) for s in stats.rehgs_hit_views], dtype=np.int64)
    return hits >= 2


def select_effi(stats: GrowthStats, cfg: PolicyConfig) -> np.ndarray:
    """Top-Q Gaussians by k-th largest gradient, Q mirroring og's rate.

    Eligibility requires view_count >= k; ties break toward smaller index.
    """
    n = len(stats)
    mask = np.zeros(n, dtype=bool)
    if n == 0:
        return mask
    # Q is og's selection rate, so ceil(Q * N) is exactly og's count.
    budget = int(select_og(stats, cfg).sum())
    if budget == 0:
        return mask
    eligible = np.nonzero(stats.view_count >= cfg.k)[0]
    if eligible.size == 0:
        return mask
    scores = stats.topk[eligible, cfg.k - 1]
    order = np.lexsort((eligible, -scores))
    mask[eligible[order[:budget]]] = True
    return mask


def policy_masks(stats: GrowthStats, cfg: PolicyConfig) -> dict:
    """All criterion masks plus the policy's union growth mask."""
    og = select_og(stats, cfg)
    pg = select_pghgs(stats, cfg) if cfg.policy in ("pghgs", "hgs") else np.zeros_like(og)
    re = select_rehgs(stats, cfg) if cfg.policy in ("rehgs", "hgs", "effi-hgs") else np.zeros_like(og)
    ef = select_effi(stats, cfg) if cfg.policy == "effi-hgs" else np.zeros_like(og)
    return {"og": og, "pghgs": pg, "rehgs": re, "effi": ef,
            "union": og | pg | re | ef}


def _trim_to_budget(union: np.ndarray, og: np.ndarray, stats: GrowthStats,
                    cfg: PolicyConfig, n_now: int) -> np.ndarray:
    """Respect the growth budget; og picks survive first, then the largest
    k-th gradients, then the most error evidence, then smaller indices."""
    room = cfg.max_gaussians - n_now
    count = int(union.sum())
    if count <= room:
        return union
    if room <= 0:
        return np.zeros_like(union)
    idx = np.nonzero(union)[0]
    hits = np.array([len(stats.rehgs_hit_views[int(i)]) for i in idx])
    order = np.lexsort((idx, -hits, -stats.topk[idx, cfg.k - 1], ~og[idx]))
    trimmed = np.zeros_like(union)
    trimmed[idx[order[:room]]] = True
    return trimmed


def grow(cloud: GaussianCloud, mask: np.ndarray, cfg: PolicyConfig,
         scene_extent: float, seed: int,
         mean_grad_dirs: np.ndarray | None = None):
    """Clone small selected Gaussians, split large ones.

    Clones copy the parent, offsetting the copy's mean by the latest
    normalized world-space mean gradient times 0.01 * extent. Splits
    replace the parent with two samples of its own distribution, log scales
    reduced by ln(1.6).

    Returns (cloud, src_index, fresh_moments) where src_index maps every
    output row to the parent row it derives from and fresh_moments marks
    rows whose optimizer state must start from zero (splits' second child).
    """
    n = len(cloud)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ValueError("mask must have one entry per Gaussian")
    if mean_grad_dirs is None:
        mean_grad_dirs = np.zeros((n, 3))

    max_scale = np.exp(cloud.log_scales).max(axis=1)
    small = max_scale < cfg.percent_dense * scene_extent
    clone_idx = np.nonzero(mask & small)[0]
    split_idx = np.nonzero(mask & ~small)[0]
    keep_idx = np.setdiff1d(np.arange(n), split_idx, assume_unique=True)

    parts = [cloud.select(keep_idx)]
    src = [keep_idx]
    fresh = [np.zeros(keep_idx.size, dtype=bool)]

    if clone_idx.size:
        dirs = mean_grad_dirs[clone_idx]
        norms = np.linalg.norm(dirs, axis=1, keepdims=True)
        unit = np.divide(dirs, norms, out=np.zeros_like(dirs), where=norms > 1e-12)
        copies = cloud.select(clone_idx)
        copies.means = copies.means + unit * (CLONE_OFFSET_FRACTION * scene_extent)
        parts.append(copies)
        src.append(clone_idx)
        fresh.append(np.zeros(clone_idx.size, dtype=bool))

    if split_idx.size:
        rng = np.random.default_rng(seed)
        parents = cloud.select(split_idx)
        rot = quat_to_rotmat(normalize_quaternions(parents.rotations))
        scale = np.exp(parents.log_scales)
        children = []
        for child in range(2):
            xi = rng.normal(size=(split_idx.size, 3))
            offset = np.einsum("nij,nj->ni", rot, scale * xi)
            c = parents.copy()
            c.means = parents.means + offset
            c.log_scales = parents.log_scales - np.log(SPLIT_SCALE_SHRINK)
            children.append(c)
        parts.extend(children)
        src.extend([split_idx, split_idx])
        fresh.append(np.zeros(split_idx.size, dtype=bool))   # first child inherits
        fresh.append(np.ones(split_idx.size, dtype=bool))    # second starts clean

    return (GaussianCloud.concatenate(parts), np.concatenate(src),
            np.concatenate(fresh))


def prune(cloud: GaussianCloud, cfg: PolicyConfig, scene_extent: float):
    """Drop nearly transparent or oversized Gaussians; returns (cloud, keep)."""
    opacity = sigmoid(cloud.raw_opacities)
    max_scale = np.exp(cloud.log_scales).max(axis=1) if len(cloud) else np.zeros(0)
    keep = (opacity >= cfg.prune_opacity) & (max_scale <= PRUNE_SCALE_FRACTION * scene_extent)
    return cloud.select(keep), keep


@dataclass
class GrowthResult:
    cloud: GaussianCloud
    stats: GrowthStats
    src_index: np.ndarray     # parent row per surviving output row
    fresh_moments: np.ndarray  # rows whose optimizer state starts zeroed
    counts: dict = field(default_factory=dict)


def run_interval_policy(cloud: GaussianCloud, stats: GrowthStats,
                        cfg: PolicyConfig, scene_extent: float,
                        seed: int) -> GrowthResult:
    """Select by the configured policy, grow, prune, reset the stats."""
    masks = policy_masks(stats, cfg)
    union = _trim_to_budget(masks["union"], masks["og"], stats, cfg, len(cloud))
    n_before = len(cloud)
    grown, src, fresh_mask = grow(cloud, union, cfg, scene_extent, seed,
                                  mean_grad_dirs=stats.last_mean_grad)
    pruned_cloud, keep = prune(grown, cfg, scene_extent)
    counts = {
        "n_before": n_before,
        "og_count": int(masks["og"].sum()),
        "pghgs_count": int(masks["pghgs"].sum()),
        "rehgs_count": int(masks["rehgs"].sum()),
        "effi_count": int(masks["effi"].sum()),
        "union_count": int(union.sum()),
        "pruned": int((~keep).sum()),
        "n_after": len(pruned_cloud),
    }
    return GrowthResult(
        cloud=pruned_cloud,
        stats=GrowthStats.zeros(len(pruned_cloud), cfg.k),
        src_index=src[keep],
        fresh_moments=fresh_mask[keep],
        counts=counts,
    )
