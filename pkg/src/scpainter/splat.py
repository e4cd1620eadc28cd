"""3D Gaussian primitives and a tile-based, exactly depth-sorted software rasterizer.

Screen-space conventions match :mod:`scpainter.geometry`: pixel ``(u, v)`` is
sampled at continuous coordinate ``(u, v)``. A gaussian touches a pixel only
inside its 3-sigma screen ellipse; tiles are an acceleration structure and never
change the result.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NEAR_CLIP, CameraIntrinsics, OrientedBox3D, RigidPose

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

ALPHA_MAX = 0.99
TRANSMITTANCE_MIN = 1e-4
COV2D_FLOOR = 0.3
SIGMA_EXTENT = 3.0
MAX_SH_DEGREE = 3


class SplatError(ValueError):
    pass


class DimensionMismatchError(SplatError):
    """Target box proportions are too far from the asset's canonical box."""


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion in (w, x, y, z) order."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


@dataclass(frozen=True, eq=False)
class Gaussian3D:
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    sh: np.ndarray

    def __post_init__(self):
        pos = np.array(self.position, dtype=np.float64).reshape(3)
        scale = np.array(self.scale, dtype=np.float64).reshape(3)
        quat = np.array(self.rotation, dtype=np.float64).reshape(4)
        sh = np.array(self.sh, dtype=np.float64)
        if sh.ndim == 1:
            sh = sh.reshape(-1, 3)
        if np.any(scale <= 0):
            raise SplatError(f"gaussian scale must be positive, got {scale}")
        if abs(np.linalg.norm(quat) - 1.0) > 1e-9:
            raise SplatError("rotation quaternion must have unit norm")
        if not 0.0 <= self.opacity <= 1.0:
            raise SplatError(f"opacity {self.opacity} outside [0, 1]")
        n = sh.shape[0]
        degree = int(round(np.sqrt(n))) - 1
        if sh.shape[1] != 3 or (degree + 1) ** 2 != n or degree > MAX_SH_DEGREE:
            raise SplatError(f"unsupported SH coefficient layout {sh.shape}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", quat)
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "sh", sh)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[0]))) - 1


@dataclass(frozen=True, eq=False)
class GaussianAsset:
    gaussians: tuple
    canonical_box: OrientedBox3D

    def __post_init__(self):
        gs = tuple(self.gaussians)
        object.__setattr__(self, "gaussians", gs)
        if not np.array_equal(self.canonical_box.rotation, np.eye(3)):
            raise SplatError("canonical box must be axis-aligned in the object frame")
        if gs:
            local = self.canonical_box.to_local(np.stack([g.position for g in gs]))
            if np.any(np.abs(local) > 0.75 * self.canonical_box.dims + 1e-9):
                raise SplatError("asset gaussians must lie inside 1.5x the canonical box")


@dataclass(frozen=True, eq=False)
class SplatRender:
    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    culled: bool


def covariance_of(g: Gaussian3D) -> np.ndarray:
    M = quat_to_matrix(g.rotation) * g.scale
    return M @ M.T


def _sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis (graphics sign convention) at unit ``dirs``; shape (..., (degree+1)^2)."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, SH_C0)]
    if degree > 0:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree > 2:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_color(g: Gaussian3D, view_dir) -> np.ndarray:
    """View-dependent RGB: SH contraction + 0.5, clamped to [0, 1]."""
    d = np.asarray(view_dir, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise SplatError("view_dir must be a unit vector")
    basis = _sh_basis(d, g.sh_degree)
    return np.clip(basis @ g.sh + 0.5, 0.0, 1.0)


def _stack(gaussians):
    n = len(gaussians)
    pos = np.array([g.position for g in gaussians]).reshape(n, 3)
    cov = np.array([covariance_of(g) for g in gaussians]).reshape(n, 3, 3)
    opacity = np.array([g.opacity for g in gaussians], dtype=np.float64)
    return pos, cov, opacity


def _project_batch(pos, cov3d, intrinsics: CameraIntrinsics, pose: RigidPose):
    cam = pose.apply_inverse(pos)
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    culled = z <= NEAR_CLIP
    zs = np.where(culled, 1.0, z)
    fx, fy = intrinsics.fx, intrinsics.fy
    mean2d = np.stack([fx * x / zs + intrinsics.cx, fy * y / zs + intrinsics.cy], axis=-1)
    J = np.zeros((len(pos), 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * x / zs**2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * y / zs**2
    T = J @ pose.rotation.T
    cov2d = T @ cov3d @ np.transpose(T, (0, 2, 1)) + COV2D_FLOOR * np.eye(2)
    cov2d = 0.5 * (cov2d + np.transpose(cov2d, (0, 2, 1)))
    return mean2d, cov2d, z, culled


def project_gaussian(g: Gaussian3D, intrinsics: CameraIntrinsics, pose: RigidPose) -> ProjectedGaussian:
    """EWA projection of one gaussian; ``cov2d`` already includes the 0.3 px^2 floor."""
    mean2d, cov2d, z, culled = _project_batch(g.position[None], covariance_of(g)[None], intrinsics, pose)
    return ProjectedGaussian(mean2d[0], cov2d[0], float(z[0]), bool(culled[0]))


def gaussian_colors(gaussians, camera_center) -> np.ndarray:
    """Per-gaussian RGB seen from ``camera_center``."""
    out = np.zeros((len(gaussians), 3))
    for i, g in enumerate(gaussians):
        d = g.position - camera_center
        n = np.linalg.norm(d)
        d = d / n if n > 0 else np.array([0.0, 0.0, 1.0])
        out[i] = np.clip(_sh_basis(d, g.sh_degree) @ g.sh + 0.5, 0.0, 1.0)
    return out


def rasterize(gaussians, intrinsics: CameraIntrinsics, pose: RigidPose, tile_size: int = 16) -> SplatRender:
    """Front-to-back alpha compositing of gaussians, exact per-pixel depth order.

    Each gaussian is binned into every tile overlapped by the bounding box of its
    3-sigma ellipse; per pixel it contributes only inside that ellipse with
    ``alpha = min(0.99, opacity * exp(-0.5 * d^T cov2d^-1 d))``. A pixel stops
    accumulating once its transmittance drops below 1e-4.
    """
    if tile_size <= 0:
        raise SplatError("tile_size must be positive")
    H, W = intrinsics.shape
    rgb = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    wsum = np.zeros((H, W))
    dsum = np.zeros((H, W))
    gaussians = list(gaussians)
    if gaussians:
        pos, cov3d, opacity = _stack(gaussians)
        mean2d, cov2d, depth, culled = _project_batch(pos, cov3d, intrinsics, pose)
        keep = np.nonzero(~culled)[0]
        # Stable sort: equal depths keep list order.
        order = keep[np.argsort(depth[keep], kind="stable")]
        colors = gaussian_colors([gaussians[i] for i in order], pose.center)
        mean2d, cov2d, depth, opacity = mean2d[order], cov2d[order], depth[order], opacity[order]
        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
        conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=-1)
        rx = SIGMA_EXTENT * np.sqrt(cov2d[:, 0, 0])
        ry = SIGMA_EXTENT * np.sqrt(cov2d[:, 1, 1])
        lo_x, hi_x = mean2d[:, 0] - rx, mean2d[:, 0] + rx
        lo_y, hi_y = mean2d[:, 1] - ry, mean2d[:, 1] + ry

        for y0 in range(0, H, tile_size):
            y1 = min(y0 + tile_size, H)
            for x0 in range(0, W, tile_size):
                x1 = min(x0 + tile_size, W)
                hits = np.nonzero((hi_x >= x0) & (lo_x <= x1 - 1) & (hi_y >= y0) & (lo_y <= y1 - 1))[0]
                if hits.size:
                    _composite_tile(
                        hits, x0, x1, y0, y1, mean2d, conic, opacity, colors, depth,
                        rgb, trans, wsum, dsum,
                    )
    alpha = 1.0 - trans
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_depth = np.where(wsum > 0, dsum / np.where(wsum > 0, wsum, 1.0), np.inf)
    return SplatRender(rgb, alpha, mean_depth)


def _composite_tile(hits, x0, x1, y0, y1, mean2d, conic, opacity, colors, depth, rgb, trans, wsum, dsum):
    py, px = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    T = trans[y0:y1, x0:x1].copy()
    C = rgb[y0:y1, x0:x1].copy()
    Ws = wsum[y0:y1, x0:x1].copy()
    Ds = dsum[y0:y1, x0:x1].copy()
    limit = SIGMA_EXTENT**2
    # Sequential accumulation keeps every pixel's arithmetic independent of
    # which non-contributing gaussians share its tile.
    for k in hits:
        dx = px - mean2d[k, 0]
        dy = py - mean2d[k, 1]
        power = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
        inside = power <= limit
        if not inside.any():
            continue
        a = np.where(inside, np.minimum(ALPHA_MAX, opacity[k] * np.exp(-0.5 * power)), 0.0)
        a = np.where(T >= TRANSMITTANCE_MIN, a, 0.0)
        w = a * T
        C += w[..., None] * colors[k]
        Ws += w
        Ds += w * depth[k]
        T = T * (1.0 - a)
        if not (T >= TRANSMITTANCE_MIN).any():
            break
    trans[y0:y1, x0:x1] = T
    rgb[y0:y1, x0:x1] = C
    wsum[y0:y1, x0:x1] = Ws
    dsum[y0:y1, x0:x1] = Ds


def transform_gaussian(g: Gaussian3D, rotation, translation) -> Gaussian3D:
    """Apply a rigid transform to one gaussian (SH coefficients untouched)."""
    R = np.asarray(rotation, dtype=np.float64)
    q = quat_multiply(matrix_to_quat(R), g.rotation)
    return Gaussian3D(R @ g.position + translation, g.scale, q / np.linalg.norm(q), g.opacity, g.sh)


def align_asset(asset: GaussianAsset, target: OrientedBox3D, max_anisotropy: float = 0.25) -> list:
    """Place an asset's gaussians into a world box.

    The canonical box is mapped onto ``target`` by a per-axis scale, the box
    rotation and a translation. Non-uniform scaling is folded exactly into each
    covariance and re-factorized into (scale, quaternion). Raises
    :class:`DimensionMismatchError` when the per-axis ratios differ by more than
    ``max_anisotropy``.
    """
    canon = asset.canonical_box
    ratios = target.dims / canon.dims
    if ratios.max() / ratios.min() > 1.0 + max_anisotropy:
        raise DimensionMismatchError(
            f"per-axis scale ratios {np.round(ratios, 4).tolist()} differ by more than {max_anisotropy:.0%}"
        )
    R_t = target.rotation
    q_t = matrix_to_quat(R_t)
    uniform = ratios.max() - ratios.min() <= 1e-12 * ratios.max()
    out = []
    for g in asset.gaussians:
        local = canon.to_local(g.position)
        pos = R_t @ (ratios * local) + target.center
        if uniform:
            k = ratios[0]
            if np.array_equal(R_t, np.eye(3)):
                q = g.rotation
            else:
                q = quat_multiply(q_t, g.rotation)
                q = q / np.linalg.norm(q)
            scale = k * g.scale
        else:
            M = R_t @ (ratios[:, None] * quat_to_matrix(g.rotation)) * g.scale
            U, S, _ = np.linalg.svd(M)
            if np.linalg.det(U) < 0:
                U[:, -1] = -U[:, -1]
            q, scale = matrix_to_quat(U), S
        out.append(Gaussian3D(pos, scale, q, g.opacity, g.sh))
    return out


def make_box_asset(dims, color, per_axis=(6, 3, 3), opacity: float = 0.9, jitter: float = 0.0, seed: int = 0) -> GaussianAsset:
    """Grid of degree-0 gaussians filling an axis-aligned box centered at the origin."""
    dims = np.asarray(dims, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    rng = np.random.default_rng(seed)
    axes = [((np.arange(n) + 0.5) / n - 0.5) * d for n, d in zip(per_axis, dims)]
    spacing = dims / np.asarray(per_axis)
    gs = []
    for x in axes[0]:
        for y in axes[1]:
            for z in axes[2]:
                c = np.clip(color + jitter * rng.uniform(-1, 1, 3), 0.0, 1.0)
                gs.append(
                    Gaussian3D(
                        np.array([x, y, z]),
                        0.6 * spacing,
                        np.array([1.0, 0.0, 0.0, 0.0]),
                        opacity,
                        ((c - 0.5) / SH_C0)[None, :],
                    )
                )
    return GaussianAsset(tuple(gs), OrientedBox3D(np.zeros(3), dims))
