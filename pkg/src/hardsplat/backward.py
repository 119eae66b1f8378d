"""Analytic reverse-mode gradients of a rendered view.

backward_view consumes the contribution tape recorded by the rasterizer,
runs the blend backward kernel, then chains the per-splat gradients through
the conic inversion, the perspective Jacobian (including its dependence on
the camera-space mean), the covariance factorization and the parameter
activations. The gradient accumulated at the projected 2D mean, in pixels,
is exposed separately as the view-space positional gradient that the
densification criteria consume.

finite_diff_grads is the test oracle: central differences over every
parameter. It renders O(P) times, so keep it to small clouds and images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .cameras import Camera
from .errors import ContractViolationError
from .gaussians import GaussianCloud, quat_to_rotmat
from .renderer import DEFAULT_SETTINGS, RasterSettings, RenderOutput, render_token, render_view


@dataclass
class ParamGrads:
    """Per-parameter loss gradients plus the raw 2D positional gradient."""

    d_means: np.ndarray          # (N, 3)
    d_log_scales: np.ndarray     # (N, 3)
    d_rotations: np.ndarray      # (N, 4)
    d_raw_opacities: np.ndarray  # (N,)
    d_colors: np.ndarray         # (N, 3)
    viewspace_grads: np.ndarray  # (N, 2), pixels; zero for invisible Gaussians

    @staticmethod
    def zeros(n: int) -> "ParamGrads":
        return ParamGrads(
            np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
            np.zeros(n), np.zeros((n, 3)), np.zeros((n, 2)),
        )


def _rotation_quat_backward(d_rotmat: np.ndarray, q_unit: np.ndarray,
                            q_norm: np.ndarray) -> np.ndarray:
    """Chain (M, 3, 3) rotation-matrix grads to raw quaternion grads."""
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    zero = np.zeros_like(w)

    def mat(rows):
        return 2.0 * np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dR_dw = mat([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dR_dx = mat([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dR_dy = mat([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dR_dz = mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])

    d_unit = np.stack([
        np.einsum("mij,mij->m", d_rotmat, dR_dw),
        np.einsum("mij,mij->m", d_rotmat, dR_dx),
        np.einsum("mij,mij->m", d_rotmat, dR_dy),
        np.einsum("mij,mij->m", d_rotmat, dR_dz),
    ], axis=1)
    # Through the normalization q_hat = q / |q|.
    proj = d_unit - q_unit * np.einsum("mk,mk->m", q_unit, d_unit)[:, None]
    return proj / q_norm[:, None]


def backward_view(cloud: GaussianCloud, camera: Camera, render: RenderOutput,
                  d_image: np.ndarray) -> ParamGrads:
    """Gradients of a scalar view loss with upstream d_image = dL/d(image)."""
    if render.token is None or not np.array_equal(render.token, render_token(cloud, camera),
                                                  equal_nan=True):
        raise ContractViolationError("render does not match this cloud/camera")
    h, w = camera.height, camera.width
    d_image = np.ascontiguousarray(d_image, dtype=np.float64)
    if d_image.shape != (h, w, 3):
        raise ValueError(f"d_image shape {d_image.shape}, expected {(h, w, 3)}")

    n = len(cloud)
    grads = ParamGrads.zeros(n)
    sp = render.splats
    m = len(sp)
    if m == 0:
        return grads

    d_mean2d, d_conic, d_opacity_act, d_color_act = _kernels.backward(
        h, w, sp.mean2d, sp.conic, sp.opacity, sp.color,
        render.contrib_start, render.contrib_count,
        render.contrib_pos, render.contrib_weight,
        d_image, render.final_transmittance,
        np.ascontiguousarray(render.background), render.settings.alpha_clamp)

    rows = sp.gaussian_index

    # conic = inv(cov2d): full-matrix gradient H = -K Ghat K.
    k_mat = np.empty((m, 2, 2))
    k_mat[:, 0, 0] = sp.conic[:, 0]
    k_mat[:, 0, 1] = sp.conic[:, 1]
    k_mat[:, 1, 0] = sp.conic[:, 1]
    k_mat[:, 1, 1] = sp.conic[:, 2]
    g_hat = np.empty((m, 2, 2))
    g_hat[:, 0, 0] = d_conic[:, 0]
    g_hat[:, 0, 1] = 0.5 * d_conic[:, 1]
    g_hat[:, 1, 0] = 0.5 * d_conic[:, 1]
    g_hat[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -k_mat @ g_hat @ k_mat

    # cov2d = (J R) cov3d (J R)^T + dilation.
    R = camera.rotation
    p_cam = sp.p_cam
    z = p_cam[:, 2]
    fx, fy = camera.fx, camera.fy
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * p_cam[:, 0] / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * p_cam[:, 1] / z**2
    JW = J @ R

    q_raw = cloud.rotations[rows]
    q_norm = np.linalg.norm(q_raw, axis=1)
    q_unit = q_raw / q_norm[:, None]
    rot = quat_to_rotmat(q_unit)
    s = np.exp(cloud.log_scales[rows])
    A = rot * s[:, None, :]
    cov3d = A @ A.transpose(0, 2, 1)

    d_cov3d = JW.transpose(0, 2, 1) @ d_cov2d @ JW
    d_JW = 2.0 * d_cov2d @ JW @ cov3d
    d_J = d_JW @ R.T

    # Jacobian entries depend on the camera-space mean.
    d_p_cam = np.zeros((m, 3))
    d_p_cam[:, 0] += d_J[:, 0, 2] * (-fx / z**2)
    d_p_cam[:, 1] += d_J[:, 1, 2] * (-fy / z**2)
    d_p_cam[:, 2] += (d_J[:, 0, 0] * (-fx / z**2)
                      + d_J[:, 1, 1] * (-fy / z**2)
                      + d_J[:, 0, 2] * (2.0 * fx * p_cam[:, 0] / z**3)
                      + d_J[:, 1, 2] * (2.0 * fy * p_cam[:, 1] / z**3))

    # Projected mean: mean2d = (fx px/pz + cx, fy py/pz + cy).
    d_p_cam[:, 0] += d_mean2d[:, 0] * fx / z
    d_p_cam[:, 1] += d_mean2d[:, 1] * fy / z
    d_p_cam[:, 2] += (-d_mean2d[:, 0] * fx * p_cam[:, 0] / z**2
                      - d_mean2d[:, 1] * fy * p_cam[:, 1] / z**2)

    d_means_rows = d_p_cam @ R

    # cov3d = A A^T with A = rot diag(s).
    d_A = 2.0 * d_cov3d @ A
    d_s = np.einsum("mij,mij->mj", rot, d_A)
    d_log_scales_rows = d_s * s
    d_rotmat = d_A * s[:, None, :]
    d_rot_rows = _rotation_quat_backward(d_rotmat, q_unit, q_norm)

    alpha = sp.opacity
    d_raw_opacity_rows = d_opacity_act * alpha * (1.0 - alpha)
    col = cloud.colors[rows]
    d_color_rows = d_color_act * ((col >= 0.0) & (col <= 1.0))

    np.add.at(grads.d_means, rows, d_means_rows)
    np.add.at(grads.d_log_scales, rows, d_log_scales_rows)
    np.add.at(grads.d_rotations, rows, d_rot_rows)
    np.add.at(grads.d_raw_opacities, rows, d_raw_opacity_rows)
    np.add.at(grads.d_colors, rows, d_color_rows)
    np.add.at(grads.viewspace_grads, rows, d_mean2d)
    return grads


def finite_diff_grads(cloud: GaussianCloud, camera: Camera, loss_fn,
                      eps: float, background=(0.0, 0.0, 0.0),
                      settings: RasterSettings = DEFAULT_SETTINGS) -> ParamGrads:
    """Central-difference gradients over every parameter.

    loss_fn maps a rendered image to a scalar. Runs two renders per scalar
    parameter; intended for clouds of a few dozen Gaussians at most.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def value(c: GaussianCloud) -> float:
        return float(loss_fn(render_view(c, camera, background, settings).image))

    work = cloud.copy()
    grads = ParamGrads.zeros(len(cloud))
    pairs = [
        (work.means, grads.d_means),
        (work.log_scales, grads.d_log_scales),
        (work.rotations, grads.d_rotations),
        (work.raw_opacities, grads.d_raw_opacities),
        (work.colors, grads.d_colors),
    ]
    for arr, out in pairs:
        flat = arr.reshape(-1)
        oflat = out.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = value(work)
            flat[i] = orig - eps
            lm = value(work)
            flat[i] = orig
            oflat[i] = (lp - lm) / (2.0 * eps)
    return grads


def finite_diff_viewspace_grads(cloud: GaussianCloud, camera: Camera, loss_fn,
                                eps: float, background=(0.0, 0.0, 0.0),
                                settings: RasterSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Central differences at the injected 2D-mean node, shape (N, 2)."""
    n = len(cloud)
    out = np.zeros((n, 2))

    def value(offset: np.ndarray) -> float:
        r = render_view(cloud, camera, background, settings, mean2d_offset=offset)
        return float(loss_fn(r.image))

    for i in range(n):
        for axis in range(2):
            offset = np.zeros((n, 2))
            offset[i, axis] = eps
            lp = value(offset)
            offset[i, axis] = -eps
            lm = value(offset)
            out[i, axis] = (lp - lm) / (2.0 * eps)
    return out
