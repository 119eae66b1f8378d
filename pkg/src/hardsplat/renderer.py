"""Projection of 3D Gaussians to 2D splats and tiled alpha-blend rasterization.

The rasterizer records everything the densification criteria consume: the
per-pixel rendered index (argmax blend weight), per-splat pixel ownership
counts, visibility flags, and the full per-pixel contribution tape used by
the analytic backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .cameras import NEAR_PLANE, Camera
from .gaussians import GaussianCloud, sigmoid

COV2D_DILATION = 0.3  # px^2 low-pass added to the projected covariance diagonal


@dataclass(frozen=True)
class RasterSettings:
    """Blending thresholds; defaults follow common splatting practice."""

    alpha_clamp: float = 0.99
    alpha_skip: float = 1.0 / 255.0
    term_eps: float = 1e-4
    radius_mult: float = 3.0


DEFAULT_SETTINGS = RasterSettings()

# Smooth profile for derivative checks: the footprint cutoff sits where the
# Gaussian has decayed to ~1e-12, so a finite-difference step never crosses
# a visible jump, and early termination is disabled for the same reason.
SMOOTH_SETTINGS = RasterSettings(
    alpha_skip=1e-12,
    term_eps=0.0,
    radius_mult=math.sqrt(-2.0 * math.log(1e-12)),
)


@dataclass
class Splat2D:
    """One projected Gaussian. conic holds (A, B, C) with the quadratic
    form A dx^2 + 2 B dx dy + C dy^2 equal to the 2D Mahalanobis distance."""

    mean2d: np.ndarray
    conic: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    gaussian_index: int
    radius: float


@dataclass
class ProjectedSplats:
    """Struct-of-arrays view of the visible splats for one camera."""

    gaussian_index: np.ndarray  # (M,) int64, rows of the source cloud
    mean2d: np.ndarray          # (M, 2) pixels
    depth: np.ndarray           # (M,)
    conic: np.ndarray           # (M, 3) A, B, C
    opacity: np.ndarray         # (M,) activated
    color: np.ndarray           # (M, 3) activated
    radius: np.ndarray          # (M,) pixels
    rect: np.ndarray            # (M, 4) int64 pixel bounds x0, x1, y0, y1
    cov2d: np.ndarray           # (M, 2, 2)
    p_cam: np.ndarray           # (M, 3) camera-space means
    n_degenerate: int = 0       # splats dropped for non-invertible 2D covariance

    def __len__(self) -> int:
        return self.gaussian_index.shape[0]


@dataclass
class RenderOutput:
    image: np.ndarray               # (H, W, 3)
    rendered_index: np.ndarray      # (H, W) int64, -1 where nothing contributed
    final_transmittance: np.ndarray  # (H, W)
    pixel_counts: np.ndarray        # (N,) pixels owned via rendered_index
    visible: np.ndarray             # (N,) bool
    contrib_start: np.ndarray       # (H*W,) tape offsets
    contrib_count: np.ndarray       # (H*W,)
    contrib_pos: np.ndarray         # (K,) positions into the sorted splat arrays
    contrib_weight: np.ndarray      # (K,) blend weights w_i, per-pixel depth order
    splats: ProjectedSplats         # depth-sorted
    settings: RasterSettings
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    token: np.ndarray = field(default=None, repr=False)

    @property
    def contrib_index(self) -> np.ndarray:
        """Tape entries as gaussian indices instead of sorted positions."""
        return self.splats.gaussian_index[self.contrib_pos]

    def pixel_contributors(self, py: int, px: int):
        """Ordered (gaussian_index, weight) pairs for one pixel."""
        width = self.image.shape[1]
        pix = py * width + px
        lo = self.contrib_start[pix]
        hi = lo + self.contrib_count[pix]
        return list(zip(self.splats.gaussian_index[self.contrib_pos[lo:hi]].tolist(),
                        self.contrib_weight[lo:hi].tolist()))


def footprint_rect(mean2d, radius, width, height):
    """Integer pixel bounds covering pixel centers within `radius` of the mean.

    Pixel (px, py) is inside iff x0 <= px < x1 and y0 <= py < y1. Both the
    tiled rasterizer and any reference implementation must use this exact
    rule so the integer outputs agree bit for bit.
    """
    mean2d = np.atleast_2d(mean2d)
    radius = np.atleast_1d(radius)
    x0 = np.clip(np.ceil(mean2d[:, 0] - radius - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(mean2d[:, 0] + radius - 0.5) + 1, 0, width).astype(np.int64)
    y0 = np.clip(np.ceil(mean2d[:, 1] - radius - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(mean2d[:, 1] + radius - 0.5) + 1, 0, height).astype(np.int64)
    return np.stack([x0, x1, y0, y1], axis=1)


def project_cloud(cloud: GaussianCloud, camera: Camera,
                  settings: RasterSettings = DEFAULT_SETTINGS,
                  mean2d_offset: np.ndarray | None = None) -> ProjectedSplats:
    """Project every Gaussian; cull behind-camera, degenerate and off-image.

    mean2d_offset, when given, shifts the projected means after the
    perspective Jacobian is computed; the gradient checks use it to probe
    the view-space positional gradient node directly.
    """
    n = len(cloud)
    if n == 0:
        empty = ProjectedSplats(
            np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros(0),
            np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros(0),
            np.zeros((0, 4), dtype=np.int64), np.zeros((0, 2, 2)), np.zeros((0, 3)))
        return empty

    R = camera.rotation
    p_cam = cloud.means @ R.T + camera.translation
    depth = p_cam[:, 2]
    in_front = depth > NEAR_PLANE

    z = np.where(in_front, depth, 1.0)
    mean2d = np.stack([
        camera.fx * p_cam[:, 0] / z + camera.cx,
        camera.fy * p_cam[:, 1] / z + camera.cy,
    ], axis=1)
    if mean2d_offset is not None:
        mean2d = mean2d + mean2d_offset

    cov3d = cloud.covariances()
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * p_cam[:, 0] / z**2
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * p_cam[:, 1] / z**2
    JW = J @ R
    cov2d = JW @ cov3d @ JW.transpose(0, 2, 1)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    with np.errstate(all="ignore"):
        invertible = np.isfinite(det) & (det > 0) & (a > 0) & (c > 0)
        conic = np.stack([c / det, -b / det, a / det], axis=1)
        mid = 0.5 * (a + c)
        lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
        radius = settings.radius_mult * np.sqrt(np.maximum(lam_max, 0.0))

    rect = footprint_rect(mean2d, np.where(invertible, radius, 0.0),
                          camera.width, camera.height)
    on_image = (rect[:, 0] < rect[:, 1]) & (rect[:, 2] < rect[:, 3])
    keep = in_front & invertible & on_image
    n_degenerate = int(np.sum(in_front & ~invertible))

    idx = np.nonzero(keep)[0].astype(np.int64)
    return ProjectedSplats(
        gaussian_index=idx,
        mean2d=np.ascontiguousarray(mean2d[keep]),
        depth=np.ascontiguousarray(depth[keep]),
        conic=np.ascontiguousarray(conic[keep]),
        opacity=np.ascontiguousarray(sigmoid(cloud.raw_opacities[keep])),
        color=np.ascontiguousarray(np.clip(cloud.colors[keep], 0.0, 1.0)),
        radius=np.ascontiguousarray(radius[keep]),
        rect=np.ascontiguousarray(rect[keep]),
        cov2d=np.ascontiguousarray(cov2d[keep]),
        p_cam=np.ascontiguousarray(p_cam[keep]),
        n_degenerate=n_degenerate,
    )


def project_gaussian(camera: Camera, cloud: GaussianCloud, index: int,
                     settings: RasterSettings = DEFAULT_SETTINGS) -> Splat2D | None:
    """Single-Gaussian projection; None when culled."""
    splats = project_cloud(cloud.select([index]), camera, settings)
    if len(splats) == 0:
        return None
    return Splat2D(
        mean2d=splats.mean2d[0], conic=splats.conic[0], depth=float(splats.depth[0]),
        opacity=float(splats.opacity[0]), color=splats.color[0],
        gaussian_index=index, radius=float(splats.radius[0]),
    )


def _splats_from_list(splats: list[Splat2D], camera: Camera) -> ProjectedSplats:
    m = len(splats)
    mean2d = np.array([s.mean2d for s in splats], dtype=np.float64).reshape(m, 2)
    radius = np.array([s.radius for s in splats], dtype=np.float64)
    return ProjectedSplats(
        gaussian_index=np.array([s.gaussian_index for s in splats], dtype=np.int64),
        mean2d=mean2d,
        depth=np.array([s.depth for s in splats], dtype=np.float64),
        conic=np.array([s.conic for s in splats], dtype=np.float64).reshape(m, 3),
        opacity=np.array([s.opacity for s in splats], dtype=np.float64),
        color=np.array([s.color for s in splats], dtype=np.float64).reshape(m, 3),
        radius=radius,
        rect=footprint_rect(mean2d, radius, camera.width, camera.height),
        cov2d=np.zeros((m, 2, 2)),
        p_cam=np.zeros((m, 3)),
    )


def rasterize(splats, camera: Camera, background,
              settings: RasterSettings = DEFAULT_SETTINGS,
              n_gaussians: int | None = None,
              token: np.ndarray | None = None) -> RenderOutput:
    """Depth-sorted front-to-back blending of splats over the image.

    Accepts either a ProjectedSplats bundle or a plain list of Splat2D.
    Per-Gaussian outputs (pixel_counts, visible) are sized to n_gaussians
    (defaults to max index + 1).
    """
    if isinstance(splats, list):
        splats = _splats_from_list(splats, camera)
    h, w = camera.height, camera.width
    background = np.asarray(background, dtype=np.float64).reshape(3)
    if n_gaussians is None:
        n_gaussians = int(splats.gaussian_index.max()) + 1 if len(splats) else 0

    order = np.lexsort((splats.gaussian_index, splats.depth))
    mean2d = np.ascontiguousarray(splats.mean2d[order])
    conic = np.ascontiguousarray(splats.conic[order])
    opacity = np.ascontiguousarray(splats.opacity[order])
    color = np.ascontiguousarray(splats.color[order])
    gidx = np.ascontiguousarray(splats.gaussian_index[order])
    rect = np.ascontiguousarray(splats.rect[order])

    n_tiles_x = (w + _kernels.TILE - 1) // _kernels.TILE
    n_tiles_y = (h + _kernels.TILE - 1) // _kernels.TILE
    if len(splats):
        tile_offsets, tile_items = _kernels.build_tile_lists(rect, n_tiles_x, n_tiles_y)
        capacity = int(np.sum((rect[:, 1] - rect[:, 0]) * (rect[:, 3] - rect[:, 2])))
    else:
        tile_offsets = np.zeros(n_tiles_x * n_tiles_y + 1, dtype=np.int64)
        tile_items = np.zeros(0, dtype=np.int64)
        capacity = 0

    (image, t_final, rendered_index, visible_sorted,
     tape_start, tape_count, tape_pos, tape_w) = _kernels.forward(
        h, w, mean2d, conic, opacity, color, gidx, rect,
        tile_offsets, tile_items, n_tiles_x, background,
        settings.alpha_clamp, settings.alpha_skip, settings.term_eps,
        max(capacity, 1))

    pixel_counts = np.zeros(n_gaussians, dtype=np.int64)
    owned = rendered_index[rendered_index >= 0]
    if owned.size:
        pixel_counts += np.bincount(owned, minlength=n_gaussians)
    visible = np.zeros(n_gaussians, dtype=bool)
    visible[gidx[visible_sorted]] = True

    # Keep the sorted arrays alongside the tape: the backward pass indexes
    # the tape by sorted position.
    sorted_splats = ProjectedSplats(
        gaussian_index=gidx, mean2d=mean2d, depth=splats.depth[order],
        conic=conic, opacity=opacity, color=color, radius=splats.radius[order],
        rect=rect, cov2d=splats.cov2d[order] if len(splats) else splats.cov2d,
        p_cam=splats.p_cam[order] if len(splats) else splats.p_cam,
        n_degenerate=splats.n_degenerate,
    )
    return RenderOutput(
        image=image, rendered_index=rendered_index, final_transmittance=t_final,
        pixel_counts=pixel_counts, visible=visible,
        contrib_start=tape_start, contrib_count=tape_count,
        contrib_pos=tape_pos, contrib_weight=tape_w,
        splats=sorted_splats, settings=settings, background=background, token=token,
    )


def render_token(cloud: GaussianCloud, camera: Camera) -> np.ndarray:
    return cloud.fingerprint(extra=float(camera.view_id))


def render_view(cloud: GaussianCloud, camera: Camera, background,
                settings: RasterSettings = DEFAULT_SETTINGS,
                mean2d_offset: np.ndarray | None = None) -> RenderOutput:
    """project_cloud + rasterize with a staleness token for the backward pass.

    Offset renders carry no token: their geometry does not match the cloud,
    so differentiating them would silently chain wrong gradients.
    """
    splats = project_cloud(cloud, camera, settings, mean2d_offset=mean2d_offset)
    token = render_token(cloud, camera) if mean2d_offset is None else None
    return rasterize(splats, camera, background, settings,
                     n_gaussians=len(cloud), token=token)
