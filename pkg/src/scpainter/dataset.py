"""Training-pair construction: neighbor-frame NVS pairs and asset insertion pairs."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .conditioning import ConditioningBundle, Trajectory, render_joint
from .geometry import ColorPointCloud, Frame, OrientedBox3D, merge_clouds, unproject
from .splat import GaussianAsset, align_asset

NEIGHBOR_RADIUS = 8
MAX_NEIGHBORS = 2 * NEIGHBOR_RADIUS
DEFAULT_NEIGHBORS = 4
BOX_DILATION = 0.10
FILTER_TOLERANCE = 0.15
EMBED_DIM = 512
EMBED_GRID = 32
_EMBED_SEED = 0x5C9A1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AssetTrack:
    """An insertable asset and where it sits in each frame it appears in."""

    asset_id: str
    asset: GaussianAsset
    placements: dict


@dataclass(frozen=True, eq=False)
class Scene:
    frames: tuple
    assets: tuple = ()
    scene_id: str = "scene"

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise DatasetError("a scene needs at least one frame")
        for track in self.assets:
            bad = [i for i in track.placements if not 0 <= i < len(frames)]
            if bad:
                raise DatasetError(f"asset {track.asset_id!r} placed at invalid frames {bad}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "assets", tuple(self.assets))

    def __len__(self) -> int:
        return len(self.frames)

    def track(self, asset) -> AssetTrack:
        for tr in self.assets:
            if tr.asset_id == asset or tr.asset is asset:
                return tr
        raise DatasetError(f"asset {asset!r} is not part of this scene")


@dataclass(frozen=True, eq=False)
class TrainingPair:
    bundle: ConditioningBundle
    target: np.ndarray
    first_frame_embed: np.ndarray
    cloud: ColorPointCloud | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T, H, W = self.bundle.shape
        if self.target.shape != (T, 3, H, W):
            raise DatasetError(f"target shape {self.target.shape} does not match bundle {(T, 3, H, W)}")


def job_seed(global_seed: int, scene_id: str, t: int) -> int:
    """Per-(scene, frame) seed, independent of job scheduling."""
    ss = np.random.SeedSequence([int(global_seed), zlib.crc32(scene_id.encode()), int(t)])
    return int(ss.generate_state(1)[0])


def neighbor_window(t: int, n_frames: int) -> list[int]:
    lo, hi = max(0, t - NEIGHBOR_RADIUS), min(n_frames - 1, t + NEIGHBOR_RADIUS)
    return [i for i in range(lo, hi + 1) if i != t]


def sample_neighbors(t: int, n_frames: int, k: int, rng_seed: int) -> list[int]:
    """Draw ``k`` distinct frames uniformly from the clamped +-8 window around ``t``."""
    if not 0 <= t < n_frames:
        raise DatasetError(f"frame index {t} outside [0, {n_frames})")
    if not 1 <= k <= MAX_NEIGHBORS:
        raise DatasetError(f"k must be in [1, {MAX_NEIGHBORS}], got {k}")
    window = neighbor_window(t, n_frames)
    if not window:
        raise DatasetError("neighbor window is empty (single-frame scene)")
    if k > len(window):
        raise DatasetError(f"k={k} exceeds the {len(window)} frames available around t={t}")
    rng = np.random.default_rng(rng_seed)
    return sorted(int(i) for i in rng.choice(window, size=k, replace=False))


def remove_box_points(cloud: ColorPointCloud, box: OrientedBox3D, dilation: float = BOX_DILATION):
    """Drop points inside ``box`` grown by ``dilation``; returns (cloud, removed_count)."""
    inside = box.dilated(dilation).contains(cloud.positions)
    return cloud.select(~inside), int(inside.sum())


def frame_cloud(scene: Scene, i: int, replaced_tracks=()) -> ColorPointCloud:
    """Unproject frame ``i``, dropping points of objects that are replaced by assets."""
    cloud = unproject(scene.frames[i], i)
    for track in replaced_tracks:
        box = track.placements.get(i)
        if box is not None:
            cloud, _ = remove_box_points(cloud, box)
    return cloud


def _single_camera(frame: Frame) -> Trajectory:
    return Trajectory(((frame.intrinsics, frame.pose),))


def _as_video(image: np.ndarray) -> np.ndarray:
    return np.transpose(image, (2, 0, 1))[None]


def build_nvs_pair(
    scene: Scene,
    t: int,
    neighbors=None,
    rng_seed: int = 0,
    k: int = DEFAULT_NEIGHBORS,
    include_assets: bool = True,
    tile_size: int = 16,
) -> TrainingPair:
    """Render points from neighboring frames (never frame ``t`` itself) into frame ``t``.

    When ``neighbors`` is None, ``k`` of them are drawn with
    :func:`sample_neighbors`. Assets placed at ``t`` are inserted as splats and
    their real points are removed from every source frame.
    """
    n = len(scene)
    if not 0 <= t < n:
        raise DatasetError(f"target frame {t} outside [0, {n})")
    if neighbors is None:
        neighbors = sample_neighbors(t, n, min(k, len(neighbor_window(t, n))), rng_seed)
    neighbors = [int(i) for i in neighbors]
    if not neighbors:
        raise DatasetError("at least one neighbor frame is required")
    if t in neighbors:
        raise DatasetError("the target frame cannot be its own neighbor")
    bad = [i for i in neighbors if not 0 <= i < n]
    if bad:
        raise DatasetError(f"neighbor indices {bad} outside [0, {n})")

    tracks = [tr for tr in scene.assets if t in tr.placements] if include_assets else []
    cloud = merge_clouds(frame_cloud(scene, i, tracks) for i in neighbors)
    splats = [align_asset(tr.asset, tr.placements[t]) for tr in tracks]
    frame = scene.frames[t]
    bundle = render_joint(cloud, splats, _single_camera(frame), tile_size=tile_size)
    return TrainingPair(
        bundle,
        _as_video(frame.image),
        embed_first_frame(frame.image),
        cloud,
        {"kind": "nvs", "t": t, "neighbors": neighbors, "assets": [tr.asset_id for tr in tracks]},
    )


def build_insertion_pair(scene: Scene, asset, frame_t: int, neighbors=(), tile_size: int = 16) -> TrainingPair:
    """Swap the real object for its reconstructed splat asset at frame ``frame_t``.

    Points inside the placement box (dilated by 10%) are removed, the asset is
    aligned into the box and rendered with the remaining points. The target is
    the untouched frame, which still shows the real object.
    """
    n = len(scene)
    if not 0 <= frame_t < n:
        raise DatasetError(f"frame {frame_t} outside [0, {n})")
    track = scene.track(asset)
    box = track.placements.get(frame_t)
    if box is None:
        raise DatasetError(f"asset {track.asset_id!r} has no box at frame {frame_t}")
    gaussian_asset = asset if isinstance(asset, GaussianAsset) else track.asset

    sources = [frame_t] + [int(i) for i in neighbors if int(i) != frame_t]
    cloud = merge_clouds(unproject(scene.frames[i], i) for i in sources)
    cloud, removed = remove_box_points(cloud, box)
    splats = align_asset(gaussian_asset, box)
    frame = scene.frames[frame_t]
    bundle = render_joint(cloud, [splats], _single_camera(frame), tile_size=tile_size)
    return TrainingPair(
        bundle,
        _as_video(frame.image),
        embed_first_frame(frame.image),
        cloud,
        {"kind": "insertion", "t": frame_t, "asset": track.asset_id, "removed": removed, "sources": sources},
    )


def stack_pairs(pairs) -> TrainingPair:
    """Concatenate single-frame pairs into one clip; the embed comes from the first."""
    pairs = list(pairs)
    if not pairs:
        raise DatasetError("no pairs to stack")
    bundles = [p.bundle for p in pairs]
    cams = []
    for b in bundles:
        if b.trajectory is not None:
            cams.extend(b.trajectory.cameras)
    bundle = ConditioningBundle(
        np.concatenate([b.I for b in bundles]),
        np.concatenate([b.coverage for b in bundles]),
        np.concatenate([b.asset_alpha for b in bundles]),
        Trajectory(tuple(cams)) if len(cams) == len(bundles) else None,
    )
    return TrainingPair(
        bundle,
        np.concatenate([p.target for p in pairs]),
        pairs[0].first_frame_embed,
        meta={"kind": "clip", "parts": [p.meta for p in pairs]},
    )


def filter_asset_bbox(asset_dims, original_dims, tol: float = FILTER_TOLERANCE) -> bool:
    """Accept an asset whose box deviates at most ``tol`` (relative) on every axis."""
    asset_dims = np.asarray(asset_dims, dtype=np.float64)
    original_dims = np.asarray(original_dims, dtype=np.float64)
    if np.any(original_dims <= 0):
        raise DatasetError("original dims must be positive")
    # The slack keeps a deviation of exactly ``tol`` inclusive despite rounding.
    return bool(np.all(np.abs(asset_dims - original_dims) / original_dims <= tol + 1e-12))


@lru_cache(maxsize=1)
def _embed_projection() -> np.ndarray:
    rng = np.random.default_rng(_EMBED_SEED)
    n_in = EMBED_GRID * EMBED_GRID + 1
    P = rng.standard_normal((EMBED_DIM, n_in)) / np.sqrt(n_in)
    P.flags.writeable = False
    return P


def embed_first_frame(image) -> np.ndarray:
    """Fixed random projection of a 32x32 grayscale thumbnail, L2-normalized.

    A deterministic stand-in for an image-level semantic embedding.
    """
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    gray = image @ np.array([0.299, 0.587, 0.114])
    rows = np.floor((np.arange(EMBED_GRID) + 0.5) * H / EMBED_GRID).astype(int)
    cols = np.floor((np.arange(EMBED_GRID) + 0.5) * W / EMBED_GRID).astype(int)
    thumb = gray[np.ix_(rows, cols)].reshape(-1)
    v = _embed_projection() @ np.append(thumb, 1.0)
    return v / np.linalg.norm(v)
