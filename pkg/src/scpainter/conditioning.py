"""Joint point/splat rendering along a trajectory and the diffusion conditioning tensors.

Mask polarity: everything here stores *coverage* (1 = the pixel received
projected content). The hole mask used to describe inpainting regions is its
complement, available as :attr:`ConditioningBundle.hole_mask`.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, ColorPointCloud, RigidPose, project_points
from .splat import rasterize

LATENT_FACTOR = 8
ASSET_THRESHOLD = 0.5
POLARITY = "coverage"


class ConfigurationError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    cameras: tuple

    def __post_init__(self):
        cams = tuple((k, p) for k, p in self.cameras)
        if not cams:
            raise ConfigurationError("a trajectory needs at least one camera")
        sizes = {k.shape for k, _ in cams}
        if len(sizes) != 1:
            raise ConfigurationError(f"trajectory cameras disagree on image size: {sorted(sizes)}")
        object.__setattr__(self, "cameras", cams)

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cameras[0][0].shape

    def to_json(self) -> list:
        return [{"intrinsics": k.to_list(), "pose": p.matrix().tolist()} for k, p in self.cameras]

    @classmethod
    def from_json(cls, items) -> "Trajectory":
        return cls(
            tuple((CameraIntrinsics.from_list(c["intrinsics"]), RigidPose.from_matrix(c["pose"])) for c in items)
        )


@dataclass(frozen=True, eq=False)
class ConditioningBundle:
    """Per-trajectory conditioning: rendered video, coverage and asset masks.

    Shapes: ``I`` (T, 3, H, W); ``coverage`` and ``asset_mask_binary`` (T, 1, H, W)
    bool; ``asset_alpha`` (T, 1, H, W) float in [0, 1].
    """

    I: np.ndarray
    coverage: np.ndarray
    asset_alpha: np.ndarray
    trajectory: Trajectory | None = None

    def __post_init__(self):
        T, c, H, W = self.I.shape
        if c != 3:
            raise ShapeError("rendered video must have 3 channels")
        for name in ("coverage", "asset_alpha"):
            if getattr(self, name).shape != (T, 1, H, W):
                raise ShapeError(f"{name} shape {getattr(self, name).shape} != {(T, 1, H, W)}")
        if not (np.all(np.isfinite(self.I)) and np.all(np.isfinite(self.asset_alpha))):
            raise ShapeError("bundle tensors must be finite")
        object.__setattr__(self, "coverage", np.asarray(self.coverage, dtype=bool))

    @property
    def asset_mask_binary(self) -> np.ndarray:
        return self.asset_alpha >= ASSET_THRESHOLD

    @property
    def hole_mask(self) -> np.ndarray:
        return ~self.coverage

    @property
    def shape(self) -> tuple[int, int, int]:
        T, _, H, W = self.I.shape
        return T, H, W


def _render_frame(cloud, splats, intrinsics, pose, tile_size):
    rgb_p, cov_p, zbuf = project_points(cloud, intrinsics, pose)
    splat = rasterize(splats, intrinsics, pose, tile_size)
    alpha = splat.alpha
    splat_wins = (alpha >= ASSET_THRESHOLD) & (splat.depth < zbuf)
    over = splat.rgb + (1.0 - alpha)[..., None] * rgb_p
    image = np.where(cov_p[..., None], np.where(splat_wins[..., None], over, rgb_p), splat.rgb)
    coverage = cov_p | (alpha >= ASSET_THRESHOLD)
    return np.clip(image, 0.0, 1.0), coverage, alpha


def render_joint(cloud: ColorPointCloud, assets, traj: Trajectory, tile_size: int = 16, jobs: int = 1) -> ConditioningBundle:
    """Render a point cloud plus aligned gaussian assets into every trajectory camera.

    ``assets`` is a list of world-frame gaussian lists, or a callable
    ``frame_index -> list of gaussian lists`` for per-frame placements. Per pixel,
    the splat composites over the point color when its alpha is at least 0.5 and
    its mean depth is nearer than the point's; otherwise the point color is kept.
    Pixels without points show the raw splat render.
    """
    if not isinstance(traj, Trajectory):
        raise ConfigurationError("traj must be a Trajectory")
    if cloud.positions.ndim != 2 or cloud.positions.shape[1] != 3:
        raise ConfigurationError("cloud positions must be N x 3")

    def splats_for(t):
        per_frame = assets(t) if callable(assets) else assets
        return [g for group in per_frame for g in group]

    def job(t):
        k, pose = traj.cameras[t]
        return _render_frame(cloud, splats_for(t), k, pose, tile_size)

    idx = range(len(traj))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(job, idx))
    else:
        results = [job(t) for t in idx]

    I = np.stack([np.transpose(r[0], (2, 0, 1)) for r in results])
    coverage = np.stack([r[1][None] for r in results])
    alpha = np.stack([r[2][None] for r in results])
    return ConditioningBundle(I, coverage, alpha, traj)


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def composite_masks(coverage, asset_binary) -> np.ndarray:
    coverage = np.asarray(coverage)
    asset_binary = np.asarray(asset_binary)
    _check_same(coverage, asset_binary, "composite_masks")
    return coverage.astype(bool) | asset_binary.astype(bool)


def downsample_mask(mask) -> np.ndarray:
    """8x8 max-pool of a (T, 1, H, W) binary mask."""
    mask = np.asarray(mask)
    if mask.ndim != 4:
        raise ShapeError("mask must be T x 1 x H x W")
    T, C, H, W = mask.shape
    f = LATENT_FACTOR
    if H % f or W % f:
        raise ShapeError(f"mask size {H}x{W} is not divisible by {f}")
    blocks = mask.astype(bool).reshape(T, C, H // f, f, W // f, f)
    return blocks.any(axis=(3, 5))


def mask_latent(z, mask_lat) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    mask_lat = np.asarray(mask_lat)
    if z.ndim != 4 or mask_lat.ndim != 4 or mask_lat.shape[1] != 1:
        raise ShapeError("expected z (T, C, h, w) and mask (T, 1, h, w)")
    if (z.shape[0], z.shape[2], z.shape[3]) != (mask_lat.shape[0], mask_lat.shape[2], mask_lat.shape[3]):
        raise ShapeError(f"latent {z.shape} and mask {mask_lat.shape} disagree")
    return np.where(mask_lat.astype(bool), z, 0.0)


def _concat_channels(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"{what}: inputs must be 4-D (T, C, H, W)")
    if (a.shape[0],) + a.shape[2:] != (b.shape[0],) + b.shape[2:]:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def assemble_encoder_input(I, asset_alpha) -> np.ndarray:
    """Channels 0-2: rendered RGB, channel 3: continuous asset alpha."""
    I = np.asarray(I)
    if I.ndim != 4 or I.shape[1] != 3:
        raise ShapeError("I must be T x 3 x H x W")
    if np.asarray(asset_alpha).shape[1:2] != (1,):
        raise ShapeError("asset mask must be T x 1 x H x W")
    return _concat_channels(I, asset_alpha, "assemble_encoder_input")


def assemble_diffusion_input(z_masked, z_noisy) -> np.ndarray:
    """Masked conditioning latent channels first, noisy target channels second."""
    return _concat_channels(z_masked, z_noisy, "assemble_diffusion_input")


def latent_mask(bundle: ConditioningBundle) -> np.ndarray:
    """Coverage with the asset composited in, max-pooled to latent resolution."""
    return downsample_mask(composite_masks(bundle.coverage, bundle.asset_mask_binary))
