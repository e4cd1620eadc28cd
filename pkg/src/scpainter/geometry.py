"""Pinhole cameras, rigid poses, depth unprojection and z-buffered point projection.

Conventions used throughout the package:

* Camera frame: +x right, +y down, +z forward (OpenCV).
* Poses are camera-to-world: ``p_world = R @ p_cam + t``.
* Pixel ``(u, v)`` has its center at continuous image coordinate ``(u, v)``;
  a projected point lands in the pixel nearest to its continuous coordinate,
  i.e. ``floor(x + 0.5)``.
* Depth maps store camera-space z (not ray length).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEAR_CLIP = 0.01
DEPTH_TIE_EPS = 1e-12
_ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Raised when a camera, pose or frame violates its invariants."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image size must be positive")
        if self.width % 8 or self.height % 8:
            raise GeometryError(
                f"image size {self.width}x{self.height} must be divisible by 8 (latent alignment)"
            )
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_list(self) -> list[float]:
        return [self.fx, self.fy, self.cx, self.cy, self.width, self.height]

    @classmethod
    def from_list(cls, values) -> "CameraIntrinsics":
        fx, fy, cx, cy, width, height = values
        return cls(float(fx), float(fy), float(cx), float(cy), int(width), int(height))


@dataclass(frozen=True, eq=False)
class RigidPose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("pose must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise GeometryError("rotation must have determinant +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Map ``(..., 3)`` points from the local frame into the parent frame."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_inverse(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def allclose(self, other: "RigidPose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """Return ``a ∘ b``: apply ``b`` first, then ``a``."""
    return RigidPose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: RigidPose) -> RigidPose:
    Rt = a.rotation.T
    return RigidPose(Rt, -Rt @ a.translation)


def lateral_shift(pose: RigidPose, shift: float) -> RigidPose:
    """Translate a camera along its own +x (right) axis by ``shift`` meters."""
    if not np.isfinite(shift):
        raise GeometryError("shift must be finite")
    return RigidPose(pose.rotation, pose.translation + shift * pose.rotation[:, 0])


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class OrientedBox3D:
    """Box with local axes (length, width, height) = (x, y, z).

    ``rotation`` maps box-local axes to world; by default it is a yaw of
    ``heading`` about world +z.
    """

    center: np.ndarray
    dims: np.ndarray
    heading: float = 0.0
    rotation: np.ndarray | None = None

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64).reshape(3)
        d = np.array(self.dims, dtype=np.float64).reshape(3)
        if np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise GeometryError(f"box dims must be positive, got {d}")
        R = rotation_about_z(self.heading) if self.rotation is None else np.asarray(self.rotation, dtype=np.float64)
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1) > _ORTHO_TOL:
            raise GeometryError("box rotation must be a proper rotation")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "heading", float(self.heading))
        object.__setattr__(self, "rotation", R)

    def dilated(self, fraction: float) -> "OrientedBox3D":
        return OrientedBox3D(self.center, self.dims * (1.0 + fraction), self.heading, self.rotation)

    def to_local(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation

    def contains(self, points) -> np.ndarray:
        local = self.to_local(points)
        return np.all(np.abs(local) <= self.dims / 2.0, axis=-1)

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "dims": self.dims.tolist(),
            "heading": self.heading,
        }


@dataclass(frozen=True, eq=False)
class Frame:
    image: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    pose: RigidPose
    boxes: tuple = ()

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        shape = self.intrinsics.shape
        if img.shape != shape + (3,):
            raise GeometryError(f"image shape {img.shape} does not match intrinsics {shape}")
        if depth.shape != shape:
            raise GeometryError(f"depth shape {depth.shape} does not match intrinsics {shape}")
        if img.size and (img.min() < 0 or img.max() > 1):
            raise GeometryError("image values must lie in [0, 1]")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "boxes", tuple(self.boxes))

    @property
    def valid(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.isfinite(self.depth) & (self.depth > 0)


@dataclass(frozen=True, eq=False)
class ColorPointCloud:
    positions: np.ndarray
    colors: np.ndarray
    source_frame: int | np.ndarray = -1

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        col = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if pos.shape != col.shape:
            raise GeometryError("positions and colors must have the same length")
        if not np.all(np.isfinite(pos)):
            raise GeometryError("point positions must be finite")
        if col.size and (col.min() < 0 or col.max() > 1):
            raise GeometryError("point colors must lie in [0, 1]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "ColorPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    def select(self, keep: np.ndarray) -> "ColorPointCloud":
        src = self.source_frame
        if isinstance(src, np.ndarray):
            src = src[keep]
        return ColorPointCloud(self.positions[keep], self.colors[keep], src)


def merge_clouds(clouds) -> ColorPointCloud:
    """Concatenate clouds in order; per-point source indices are kept."""
    clouds = list(clouds)
    if not clouds:
        return ColorPointCloud.empty()
    sources = [
        c.source_frame if isinstance(c.source_frame, np.ndarray) else np.full(len(c), c.source_frame)
        for c in clouds
    ]
    return ColorPointCloud(
        np.concatenate([c.positions for c in clouds]),
        np.concatenate([c.colors for c in clouds]),
        np.concatenate(sources).astype(np.int64),
    )


def pixel_rays(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-space rays ``K^-1 [u, v, 1]`` for every pixel, shape (H, W, 3)."""
    v, u = np.mgrid[0 : intrinsics.height, 0 : intrinsics.width].astype(np.float64)
    return np.stack(
        [(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, np.ones_like(u)],
        axis=-1,
    )


def unproject(frame: Frame, source_index: int = -1) -> ColorPointCloud:
    valid = frame.valid
    cam = pixel_rays(frame.intrinsics)[valid] * frame.depth[valid][:, None]
    return ColorPointCloud(frame.pose.apply(cam), frame.image[valid], source_index)


def project_to_pixels(points_world, intrinsics: CameraIntrinsics, pose: RigidPose):
    """Continuous pixel coordinates and camera depth of world points."""
    cam = pose.apply_inverse(points_world)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        y = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    return x, y, z


def project_points(cloud: ColorPointCloud, intrinsics: CameraIntrinsics, pose: RigidPose):
    """Z-buffered 1-pixel splat of ``cloud`` into a camera.

    Returns ``(rgb, coverage, zbuf)`` with shapes (H, W, 3), (H, W) bool and
    (H, W); empty pixels have ``zbuf = inf``. Among points landing in the same
    pixel the smallest camera depth wins; depths equal to within 1e-12 resolve
    to the lowest cloud index.
    """
    H, W = intrinsics.shape
    rgb = np.zeros((H, W, 3))
    zbuf = np.full((H, W), np.inf)
    coverage = np.zeros((H, W), dtype=bool)
    if len(cloud) == 0:
        return rgb, coverage, zbuf

    x, y, z = project_to_pixels(cloud.positions, intrinsics, pose)
    front = z > NEAR_CLIP
    idx = np.nonzero(front)[0]
    u = np.floor(x[front] + 0.5)
    v = np.floor(y[front] + 0.5)
    inside = (u >= 0) & (u < W) & (v >= 0) & (v < H)
    idx, u, v = idx[inside], u[inside].astype(np.int64), v[inside].astype(np.int64)
    if idx.size == 0:
        return rgb, coverage, zbuf

    pix = v * W + u
    depth = z[idx]
    zmin = np.full(H * W, np.inf)
    np.minimum.at(zmin, pix, depth)
    cand = depth <= zmin[pix] + DEPTH_TIE_EPS
    winner = np.full(H * W, np.iinfo(np.int64).max)
    np.minimum.at(winner, pix[cand], idx[cand])

    hit = winner != np.iinfo(np.int64).max
    src = winner[hit]
    flat_rgb = rgb.reshape(-1, 3)
    flat_rgb[hit] = cloud.colors[src]
    zbuf.reshape(-1)[hit] = z[src]
    coverage.reshape(-1)[hit] = True
    return rgb, coverage, zbuf
