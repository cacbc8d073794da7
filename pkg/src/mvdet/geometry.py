"""Camera rigs and the world-to-image link.

A camera is a 3x4 homogeneous projection matrix (intrinsics times
extrinsics) plus an image size. World points are projected by the matrix
product with the homogenized point, perspective division by the third
coordinate, and an affine normalization of pixel coordinates into
[-1, 1]^2. Visibility of a point in a camera requires positive depth and
normalized coordinates inside the closed square [-1, 1]^2 (border points
count as visible).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

DEPTH_EPS = 1e-9


@dataclass(frozen=True)
class CameraMatrix:
    """World-to-image homogeneous map plus the image raster size."""

    T: np.ndarray  # (3, 4)
    width: int
    height: int

    def __post_init__(self):
        T = np.asarray(self.T, dtype=np.float64)
        if T.shape != (3, 4):
            raise ValueError(f"camera matrix must be 3x4, got {T.shape}")
        if abs(np.linalg.det(T[:, :3])) < 1e-12:
            raise ValueError("degenerate camera: left 3x3 block is singular")
        object.__setattr__(self, "T", T)


def validate_rig(rig) -> None:
    """Reject cameras whose left 3x3 block is orientation-reversing.

    A physical projection matrix K[R|t] has positive determinant; a
    negative one silently flips the depth sign convention, so it is
    refused at load time instead of producing inverted visibility.
    """
    for i, cam in enumerate(rig):
        if np.linalg.det(cam.T[:, :3]) <= 0.0:
            raise ValueError(f"camera {i}: orientation-reversing projection matrix")


@dataclass(frozen=True)
class ProjectedPoint:
    uv_norm: np.ndarray  # (2,) in [-1, 1]^2 when visible
    depth: float
    sigma: int


def normalize_uv(uv_pixel, width: float, height: float) -> np.ndarray:
    """Affine map sending pixel (0, 0) to (-1, -1) and (width, height) to (1, 1)."""
    if width <= 0 or height <= 0:
        raise ValueError("image size must be positive")
    uv = np.asarray(uv_pixel, dtype=np.float64)
    return np.stack(
        [2.0 * uv[..., 0] / width - 1.0, 2.0 * uv[..., 1] / height - 1.0], axis=-1
    )


def denormalize_uv(uv_norm, width: float, height: float) -> np.ndarray:
    uv = np.asarray(uv_norm, dtype=np.float64)
    return np.stack(
        [(uv[..., 0] + 1.0) * width / 2.0, (uv[..., 1] + 1.0) * height / 2.0], axis=-1
    )


def project(cam: CameraMatrix, c) -> ProjectedPoint:
    """Project one world point; never divides by a near-zero depth."""
    c = np.asarray(c, dtype=np.float64).reshape(3)
    hom = cam.T[:, :3] @ c + cam.T[:, 3]
    depth = float(hom[2])
    if abs(depth) < DEPTH_EPS:
        return ProjectedPoint(np.array([np.inf, np.inf]), depth, 0)
    uv_pix = hom[:2] / depth
    uv_norm = normalize_uv(uv_pix, cam.width, cam.height)
    return ProjectedPoint(uv_norm, depth, _sigma_of(uv_norm, depth))


def _sigma_of(uv_norm, depth: float) -> int:
    inside = bool(np.all(np.abs(uv_norm) <= 1.0))
    return int(inside and depth >= DEPTH_EPS)


def visibility(p: ProjectedPoint) -> int:
    """1 iff depth is positive and uv_norm lies in the closed [-1, 1]^2."""
    return _sigma_of(p.uv_norm, p.depth)


def project_points(cam: CameraMatrix, pts: np.ndarray):
    """Vectorized projection of (N, 3) points.

    Returns (uv_norm (N, 2), depth (N,), sigma (N,) in {0, 1}). Points at
    near-zero depth get sigma 0 and non-finite uv, never a division error.
    """
    pts = np.asarray(pts, dtype=np.float64)
    hom = pts @ cam.T[:, :3].T + cam.T[:, 3]
    depth = hom[:, 2]
    safe = np.where(np.abs(depth) < DEPTH_EPS, 1.0, depth)
    uv_pix = hom[:, :2] / safe[:, None]
    uv_norm = normalize_uv(uv_pix, cam.width, cam.height)
    sigma = (
        (depth >= DEPTH_EPS)
        & (np.abs(uv_norm[:, 0]) <= 1.0)
        & (np.abs(uv_norm[:, 1]) <= 1.0)
    ).astype(np.int64)
    uv_norm = np.where((np.abs(depth) < DEPTH_EPS)[:, None], np.inf, uv_norm)
    return uv_norm, depth, sigma


def visible_camera_count(rig, c) -> int:
    """How many cameras of the rig see the point (sigma = 1)."""
    c = np.asarray(c, dtype=np.float64).reshape(1, 3)
    return int(sum(int(project_points(cam, c)[2][0]) for cam in rig))


def project_points_tracked(cam: CameraMatrix, pts: "ad.Tensor"):
    """Differentiable twin of ``project_points`` for (M, 3) point tensors.

    Returns (uv_norm Tensor (M, 2), depth ndarray, sigma ndarray). Depth
    and sigma are detached: visibility is a hard gate, not a gradient
    path. Near-zero depths divide by 1 instead; those rows carry sigma 0
    and their garbage uv values are masked out by the caller.
    """
    hom = ad.add(ad.matmul(pts, cam.T[:, :3].T.copy()), cam.T[:, 3].copy())
    depth = hom.data[:, 2].copy()
    bad = np.abs(depth) < DEPTH_EPS
    mask = (~bad).astype(np.float64)[:, None]
    z = ad.getitem(hom, (slice(None), slice(2, 3)))
    z_safe = ad.add(ad.mul(z, mask), 1.0 - mask)
    uv_pix = ad.div(ad.getitem(hom, (slice(None), slice(0, 2))), z_safe)
    scale = np.array([2.0 / cam.width, 2.0 / cam.height])
    uv_norm = ad.sub(ad.mul(uv_pix, scale), 1.0)
    sigma = (
        (depth >= DEPTH_EPS)
        & (np.abs(uv_norm.data[:, 0]) <= 1.0)
        & (np.abs(uv_norm.data[:, 1]) <= 1.0)
    ).astype(np.float64)
    return uv_norm, depth, sigma
