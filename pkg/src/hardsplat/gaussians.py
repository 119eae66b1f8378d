"""Optimizable Gaussian cloud: parameters, activations, covariance construction.

Each Gaussian carries a mean, a log-space scale triple, a quaternion
rotation, a logit-space opacity and an RGB color. Scales and opacities are
stored unconstrained so the optimizer never needs projection steps; the
activated quantities are recovered on demand.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRotationError, NumericDegeneracyError

QUAT_NORM_EPS = 1e-12
COV_REG = 1e-8
COV_COND_LIMIT = 1e12

CLOUD_MAGIC = b"HGSCLOUD"
CLOUD_VERSION = 1
_REC_FLOATS = 14  # mean 3 + log_scale 3 + rotation 4 + raw_opacity 1 + color 3


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Return unit quaternions; raises on (near-)zero norm."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms < QUAT_NORM_EPS):
        raise DegenerateRotationError("quaternion with (near-)zero norm")
    return q / norms[:, None]


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (N, 4), w-first, to rotation matrices (N, 3, 3)."""
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class GaussianCloud:
    """Struct-of-arrays cloud of N anisotropic Gaussians.

    means:         (N, 3) world positions
    log_scales:    (N, 3) log of per-axis standard deviations
    rotations:     (N, 4) quaternions, w-first, not necessarily unit
    raw_opacities: (N,)   logit-space opacity
    colors:        (N, 3) linear RGB, clamped to [0, 1] on activation
    """

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    raw_opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.raw_opacities = np.ascontiguousarray(self.raw_opacities, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, 3)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.raw_opacities)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.means.copy(), self.log_scales.copy(), self.rotations.copy(),
            self.raw_opacities.copy(), self.colors.copy(),
        )

    def covariances(self) -> np.ndarray:
        """All 3x3 covariances R diag(exp(ls))^2 R^T, shape (N, 3, 3)."""
        if len(self) == 0:
            return np.zeros((0, 3, 3))
        R = quat_to_rotmat(normalize_quaternions(self.rotations))
        s = np.exp(self.log_scales)
        A = R * s[:, None, :]  # R @ diag(s)
        return A @ A.transpose(0, 2, 1)

    def fingerprint(self, extra: float = 0.0) -> np.ndarray:
        """Cheap content token used to detect stale render intermediates."""
        return np.array([
            float(len(self)),
            float(self.means.sum()), float(self.log_scales.sum()),
            float(self.rotations.sum()), float(self.raw_opacities.sum()),
            float(self.colors.sum()), extra,
        ])

    @staticmethod
    def empty() -> "GaussianCloud":
        return GaussianCloud(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
            np.zeros(0), np.zeros((0, 3)),
        )

    @staticmethod
    def concatenate(parts: list["GaussianCloud"]) -> "GaussianCloud":
        return GaussianCloud(
            np.concatenate([p.means for p in parts]),
            np.concatenate([p.log_scales for p in parts]),
            np.concatenate([p.rotations for p in parts]),
            np.concatenate([p.raw_opacities for p in parts]),
            np.concatenate([p.colors for p in parts]),
        )

    def select(self, index) -> "GaussianCloud":
        return GaussianCloud(
            self.means[index], self.log_scales[index], self.rotations[index],
            self.raw_opacities[index], self.colors[index],
        )


def build_covariance(log_scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Covariance R diag(exp(log_scale))^2 R^T for a single Gaussian."""
    q = normalize_quaternions(rotation)
    R = quat_to_rotmat(q)[0]
    s = np.exp(np.asarray(log_scale, dtype=np.float64).reshape(3))
    A = R * s[None, :]
    return A @ A.T


def evaluate_gaussian(mean: np.ndarray, cov: np.ndarray, x: np.ndarray) -> float:
    """Unnormalized Gaussian kernel exp(-0.5 d^T cov^{-1} d), d = x - mean.

    Near-singular covariances get a 1e-8 diagonal bump; if that still
    leaves them unusable a NumericDegeneracyError is raised.
    """
    cov = np.asarray(cov, dtype=np.float64)
    d = np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    if np.linalg.cond(cov) > COV_COND_LIMIT:
        cov = cov + COV_REG * np.eye(3)
    try:
        sol = np.linalg.solve(cov, d)
    except np.linalg.LinAlgError as exc:
        raise NumericDegeneracyError("covariance singular after regularization") from exc
    if not np.all(np.isfinite(sol)):
        raise NumericDegeneracyError("covariance solve produced non-finite values")
    return float(np.exp(-0.5 * d @ sol))


def activate(cloud: GaussianCloud, index: int):
    """Activated (mean, covariance, opacity, color) of one Gaussian."""
    n = len(cloud)
    if not 0 <= index < n:
        raise IndexError(f"gaussian index {index} out of range [0, {n})")
    cov = build_covariance(cloud.log_scales[index], cloud.rotations[index])
    opacity = float(sigmoid(cloud.raw_opacities[index]))
    color = np.clip(cloud.colors[index], 0.0, 1.0)
    return cloud.means[index].copy(), cov, opacity, color


def save_cloud(cloud: GaussianCloud, path) -> None:
    """Write the binary point-cloud format (magic, version, count, records).

    Per-Gaussian record: mean (3xf32), log_scale (3xf32), rotation
    (4xf32, w-first), raw_opacity (f32), color (3xf32). Little-endian.
    """
    n = len(cloud)
    rec = np.empty((n, _REC_FLOATS), dtype="<f4")
    rec[:, 0:3] = cloud.means
    rec[:, 3:6] = cloud.log_scales
    rec[:, 6:10] = cloud.rotations
    rec[:, 10] = cloud.raw_opacities
    rec[:, 11:14] = cloud.colors
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC)
        f.write(struct.pack("<IQ", CLOUD_VERSION, n))
        f.write(rec.tobytes())


def load_cloud(path) -> GaussianCloud:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CLOUD_MAGIC:
            raise ValueError(f"not a gaussian cloud file (magic {magic!r})")
        version, count = struct.unpack("<IQ", f.read(12))
        if version != CLOUD_VERSION:
            raise ValueError(f"unsupported cloud version {version}")
        raw = np.frombuffer(f.read(count * _REC_FLOATS * 4), dtype="<f4")
    if raw.size != count * _REC_FLOATS:
        raise ValueError("truncated cloud file")
    rec = raw.reshape(count, _REC_FLOATS).astype(np.float64)
    return GaussianCloud(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10], rec[:, 11:14])
