"""Coordinate frames, the road projection plane, and covariance transport.

Conventions used throughout the package:

BEV frame (road projection plane):
  - x lateral, positive right; y longitudinal, positive forward; z is
    height above the plane, positive up.
  - The plane is attached to the camera mounting: pitch down by
    ``pose.pitch`` and ``pose.height`` metres below the camera center.

Camera frame:
  - Same axis names (x right, y forward, z up), origin at the camera
    center.  BEV and camera frames are related by the pitch rotation
    about x plus the height offset.

Tile segment parameters (r, phi, dz):
  - phi is the segment's travel-direction angle measured from the +x
    (lateral) axis, wrapped to [-pi, pi).
  - r is the signed perpendicular offset of the segment line from the
    tile center, positive to the RIGHT of the travel direction.  The
    emitted point is the perpendicular foot:
        foot = center + r * (sin(phi), -cos(phi))
    so a lane travelling forward (phi = pi/2) at lateral position x0
    gets r = x0 - center_x.
  - dz is the segment height above the BEV plane at the foot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap angle(s) to [-pi, pi)."""
    return (np.asarray(a) + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class CameraPose:
    """Camera mounting: pitch (rad, positive tilting down) and height (m)."""

    pitch: float
    height: float

    def __post_init__(self):
        if not (self.height > 0):
            raise ValueError(f"camera height must be > 0, got {self.height}")
        if not (abs(self.pitch) < math.pi / 2):
            raise ValueError(f"|pitch| must be < pi/2, got {self.pitch}")


@dataclass(frozen=True)
class GridConfig:
    """The coarse W x H BEV tile grid.

    i indexes lateral tiles (0..W-1, left to right), j longitudinal
    tiles (0..H-1, near to far).  Tile (0, 0) sits at the near-left
    corner, whose BEV position is (origin_x, origin_y).
    """

    width_tiles: int = 16
    height_tiles: int = 26
    tile_width: float = 1.28
    tile_length: float = 3.0
    origin_x: float = -10.24
    origin_y: float = 0.0

    def __post_init__(self):
        if self.width_tiles <= 0 or self.height_tiles <= 0:
            raise ValueError("tile counts must be positive")
        if self.tile_width <= 0 or self.tile_length <= 0:
            raise ValueError("tile dimensions must be positive")

    @property
    def bev_width(self) -> float:
        return self.width_tiles * self.tile_width

    @property
    def bev_length(self) -> float:
        return self.height_tiles * self.tile_length

    @property
    def half_diagonal(self) -> float:
        return 0.5 * math.hypot(self.tile_width, self.tile_length)

    def tile_bounds(self, i: int, j: int) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of tile (i, j) in BEV coordinates."""
        self._check_index(i, j)
        x0 = self.origin_x + i * self.tile_width
        y0 = self.origin_y + j * self.tile_length
        return x0, x0 + self.tile_width, y0, y0 + self.tile_length

    def _check_index(self, i: int, j: int) -> None:
        if not (0 <= i < self.width_tiles and 0 <= j < self.height_tiles):
            raise IndexError(
                f"tile index ({i}, {j}) outside grid "
                f"{self.width_tiles}x{self.height_tiles}"
            )


def tile_center(grid: GridConfig, i: int, j: int) -> np.ndarray:
    """BEV (x, y) of the geometric center of tile (i, j)."""
    grid._check_index(i, j)
    return np.array(
        [
            grid.origin_x + (i + 0.5) * grid.tile_width,
            grid.origin_y + (j + 0.5) * grid.tile_length,
        ]
    )


def tile_centers(grid: GridConfig) -> np.ndarray:
    """(H, W, 2) array of all tile centers, row-major (j, i)."""
    xs = grid.origin_x + (np.arange(grid.width_tiles) + 0.5) * grid.tile_width
    ys = grid.origin_y + (np.arange(grid.height_tiles) + 0.5) * grid.tile_length
    out = np.empty((grid.height_tiles, grid.width_tiles, 2))
    out[:, :, 0] = xs[None, :]
    out[:, :, 1] = ys[:, None]
    return out


def rotation_bev_to_camera(pitch: float) -> np.ndarray:
    """Orthonormal rotation taking plane-relative vectors to the camera frame."""
    c, s = math.cos(pitch), math.sin(pitch)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


def bev_to_camera(points: np.ndarray, pose: CameraPose) -> np.ndarray:
    """Map BEV points (x, y, height-above-plane) to camera coordinates."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64)).copy()
    p[:, 2] -= pose.height
    out = p @ rotation_bev_to_camera(pose.pitch).T
    return out.reshape(np.shape(points))


def camera_to_bev(points: np.ndarray, pose: CameraPose) -> np.ndarray:
    """Inverse of :func:`bev_to_camera`."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = p @ rotation_bev_to_camera(pose.pitch)
    out[:, 2] += pose.height
    return out.reshape(np.shape(points))


def segment_foot(r, phi, center) -> np.ndarray:
    """Perpendicular foot of the tile center on the segment line (BEV x, y)."""
    r = np.asarray(r, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    foot = np.empty(np.broadcast(r, phi).shape + (2,))
    foot[..., 0] = center[..., 0] + r * np.sin(phi)
    foot[..., 1] = center[..., 1] - r * np.cos(phi)
    return foot


def segment_to_camera(r, phi, dz, center, pose: CameraPose) -> np.ndarray:
    """Convert tile parameters to a 3D point in the camera frame.

    Broadcasts over leading dimensions: scalars give a (3,) point,
    (N,)-shaped parameters with (N, 2) centers give (N, 3).
    """
    foot = segment_foot(r, phi, center)
    dz_arr = np.broadcast_to(np.asarray(dz, dtype=np.float64), foot.shape[:-1])
    p = np.concatenate([foot, dz_arr[..., None]], axis=-1)
    return bev_to_camera(p, pose)


def segment_direction_camera(phi, pose: CameraPose) -> np.ndarray:
    """Unit travel-direction vector of the segment, rotated to the camera frame."""
    phi = np.asarray(phi, dtype=np.float64)
    d = np.zeros(phi.shape + (3,))
    d[..., 0] = np.cos(phi)
    d[..., 1] = np.sin(phi)
    return d @ rotation_bev_to_camera(pose.pitch).T


def segment_jacobian(r, phi, dz, center, pose: CameraPose) -> np.ndarray:
    """Analytic Jacobian of :func:`segment_to_camera` w.r.t. (r, phi, dz)."""
    del dz, center  # the point's derivative does not depend on them
    sin_p, cos_p = math.sin(phi), math.cos(phi)
    j_plane = np.array(
        [
            [sin_p, r * cos_p, 0.0],
            [-cos_p, r * sin_p, 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    return rotation_bev_to_camera(pose.pitch) @ j_plane


def propagate_covariance(
    var_r: float,
    var_phi: float,
    var_dz: float,
    r: float,
    phi: float,
    dz: float,
    center,
    pose: CameraPose,
) -> np.ndarray:
    """First-order transport of diag(var_r, var_phi, var_dz) through
    :func:`segment_to_camera`, returning the 3x3 camera-frame covariance."""
    if var_r < 0 or var_phi < 0 or var_dz < 0:
        raise ValueError("variances must be nonnegative")
    jac = segment_jacobian(r, phi, dz, center, pose)
    cov = (jac * np.array([var_r, var_phi, var_dz])) @ jac.T
    return 0.5 * (cov + cov.T)


def is_valid_covariance(cov: np.ndarray, eig_tol: float = 1e-9) -> bool:
    """True when cov is symmetric with eigenvalues >= -eig_tol."""
    cov = np.asarray(cov)
    if cov.shape != (3, 3) or not np.allclose(cov, cov.T, atol=1e-12):
        return False
    return bool(np.linalg.eigvalsh(cov).min() >= -eig_tol)


# Axis permutation from this package's camera frame (x right, y forward,
# z up) to the pinhole frame (X right, Y down, Z along the optical axis).
_CAM_TO_PINHOLE = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


def project_to_image(points_cam: np.ndarray, intrinsics: np.ndarray) -> np.ndarray:
    """Pinhole projection of camera-frame points to pixel coordinates."""
    p = np.atleast_2d(np.asarray(points_cam, dtype=np.float64)) @ _CAM_TO_PINHOLE.T
    uvw = p @ np.asarray(intrinsics, dtype=np.float64).T
    uv = uvw[:, :2] / uvw[:, 2:3]
    return uv.reshape(np.shape(points_cam)[:-1] + (2,))


def ipm_homography(pose: CameraPose, intrinsics: np.ndarray) -> np.ndarray:
    """Homography taking image pixels of road-plane points to BEV metres.

    Only points actually on the road plane (BEV height 0) map correctly;
    anything above the plane lands at a laterally/longitudinally shifted
    BEV position, which is the usual inverse-perspective distortion.
    """
    intrinsics = np.asarray(intrinsics, dtype=np.float64)
    if intrinsics.shape != (3, 3):
        raise ValueError("intrinsics must be 3x3")
    if intrinsics[0, 0] <= 0 or intrinsics[1, 1] <= 0:
        raise ValueError("focal lengths must be positive")
    if abs(np.linalg.det(intrinsics)) < 1e-12:
        raise ValueError("intrinsics matrix is singular")

    rot = rotation_bev_to_camera(pose.pitch)
    plane_basis = np.column_stack(
        [rot[:, 0], rot[:, 1], -pose.height * rot[:, 2]]
    )
    bev_to_img = intrinsics @ _CAM_TO_PINHOLE @ plane_basis
    h = np.linalg.inv(bev_to_img)
    return h / h[2, 2]
