"""Procedural driving-like scenes with analytic depth, used as an oracle substrate.

World frame is z-up. Cameras look along their heading in the ground plane,
so the camera-to-world rotation has columns (right, down, forward).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import AssetTrack, Scene
from .geometry import CameraIntrinsics, Frame, OrientedBox3D, RigidPose, pixel_rays
from .splat import make_box_asset

SKY_COLOR = np.array([0.62, 0.76, 0.94])
# Face shading for box normals -x, +x, -y, +y, -z, +z.
_FACE_SHADE = np.array([0.72, 0.86, 0.78, 0.93, 0.5, 1.0])


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthCuboid:
    center: tuple
    dims: tuple
    heading: float = 0.0
    color: tuple | None = None
    asset_id: str | None = None

    def box(self) -> OrientedBox3D:
        return OrientedBox3D(np.array(self.center, float), np.array(self.dims, float), self.heading)


@dataclass(frozen=True)
class SynthSpec:
    width: int = 96
    height: int = 64
    fx: float = 60.0
    fy: float = 60.0
    n_frames: int = 8
    step: float = 0.5
    start: tuple = (0.0, 0.0)
    heading: float = 0.0
    camera_height: float = 1.5
    plane_height: float | None = 0.0
    checker: float = 1.0
    cuboids: tuple = field(default_factory=tuple)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.width / 2.0, self.height / 2.0, self.width, self.height)


def camera_pose(position, heading: float) -> RigidPose:
    c, s = np.cos(heading), np.sin(heading)
    forward = np.array([c, s, 0.0])
    right = np.array([s, -c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    return RigidPose(np.stack([right, down, forward], axis=1), np.asarray(position, dtype=np.float64))


def camera_path(spec: SynthSpec) -> list[RigidPose]:
    if spec.n_frames < 1:
        raise SynthError("camera path needs at least one frame")
    if not np.isfinite(spec.step) or not np.isfinite(spec.heading):
        raise SynthError("camera path parameters must be finite")
    ground = 0.0 if spec.plane_height is None else spec.plane_height
    z = ground + spec.camera_height
    if spec.plane_height is not None and spec.camera_height <= 0:
        raise SynthError("camera must be above the ground plane")
    fwd = np.array([np.cos(spec.heading), np.sin(spec.heading)])
    poses = []
    for i in range(spec.n_frames):
        xy = np.asarray(spec.start, dtype=np.float64) + i * spec.step * fwd
        poses.append(camera_pose([xy[0], xy[1], z], spec.heading))
    for c in spec.cuboids:
        box = c.box()
        for p in poses:
            if box.contains(p.center[None])[0]:
                raise SynthError("camera path passes through a cuboid")
    return poses


def _palette(seed: int, spec: SynthSpec):
    rng = np.random.default_rng(seed)
    ground = 0.35 + 0.25 * rng.random((8, 3))
    ground[:, 1] += 0.05
    colors = []
    for c in spec.cuboids:
        colors.append(np.asarray(c.color, float) if c.color is not None else 0.2 + 0.6 * rng.random(3))
    return np.clip(ground, 0, 1), colors


def _ray_box(origin, dirs, box: OrientedBox3D):
    """Camera-depth parameter of the first hit and hit face id (or inf, -1)."""
    o = box.to_local(origin[None])[0]
    d = dirs @ box.rotation
    half = box.dims / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    parallel = d == 0
    outside = np.abs(o) > half
    tmin = np.where(parallel, np.where(outside, np.inf, -np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(outside, -np.inf, np.inf), np.maximum(t1, t2))
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    hit = (near <= far) & (near > 0)
    axis = tmin.argmax(axis=-1)
    sign = np.take_along_axis(d, axis[..., None], axis=-1)[..., 0] < 0
    face = 2 * axis + sign.astype(int)
    return np.where(hit, near, np.inf), np.where(hit, face, -1)


def render_view(spec: SynthSpec, pose: RigidPose, seed: int = 0, intrinsics: CameraIntrinsics | None = None):
    """Analytic ray-cast of the scene: returns (image H x W x 3, depth H x W, inf = sky)."""
    K = intrinsics or spec.intrinsics()
    rays = pixel_rays(K)
    dirs = rays @ pose.rotation.T
    origin = pose.center
    H, W = K.shape
    depth = np.full((H, W), np.inf)
    image = np.broadcast_to(SKY_COLOR, (H, W, 3)).copy()
    ground_pal, box_colors = _palette(seed, spec)

    if spec.plane_height is not None:
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (spec.plane_height - origin[2]) / dz
        hit = (dz < 0) & (s > 0) & (origin[2] > spec.plane_height)
        pts = origin + np.where(hit, s, 0.0)[..., None] * dirs
        s = np.where(hit, s, np.inf)
        ix = np.floor(pts[..., 0] / spec.checker).astype(np.int64)
        iy = np.floor(pts[..., 1] / spec.checker).astype(np.int64)
        idx = (ix * 7 + iy * 13) % len(ground_pal)
        image = np.where(hit[..., None], ground_pal[idx], image)
        depth = np.where(hit, s, depth)

    for c, color in zip(spec.cuboids, box_colors):
        s, face = _ray_box(origin, dirs, c.box())
        closer = s < depth
        shaded = np.clip(color * _FACE_SHADE[np.maximum(face, 0)][..., None], 0, 1)
        image = np.where(closer[..., None], shaded, image)
        depth = np.where(closer, s, depth)
    return image, depth


def synth_scene(spec: SynthSpec, rng_seed: int = 0, scene_id: str = "synthetic") -> Scene:
    """Build a full scene; bit-identical for identical ``(spec, rng_seed)``."""
    poses = camera_path(spec)
    K = spec.intrinsics()
    boxes = tuple(c.box() for c in spec.cuboids)
    frames = []
    for pose in poses:
        image, depth = render_view(spec, pose, rng_seed)
        frames.append(Frame(image, depth, K, pose, boxes))

    _, box_colors = _palette(rng_seed, spec)
    tracks = []
    for i, (c, color) in enumerate(zip(spec.cuboids, box_colors)):
        if c.asset_id is None:
            continue
        # The reconstructed asset is close to, but not exactly, the real object.
        asset = make_box_asset(c.dims, np.clip(color * 0.92 + 0.04, 0, 1), jitter=0.03, seed=rng_seed + i)
        tracks.append(AssetTrack(c.asset_id, asset, {t: boxes[i] for t in range(len(frames))}))
    return Scene(tuple(frames), tuple(tracks), scene_id)


def canonical_spec(n_frames: int = 8) -> SynthSpec:
    """The reference street scene: ground plane, a parked car and roadside blocks."""
    return SynthSpec(
        n_frames=n_frames,
        cuboids=(
            SynthCuboid((12.0, -3.2, 0.75), (4.2, 1.8, 1.5), 0.0, (0.70, 0.12, 0.10), "car0"),
            SynthCuboid((16.0, 7.0, 3.0), (8.0, 4.0, 6.0), 0.0, (0.55, 0.50, 0.45)),
            SynthCuboid((22.0, -9.0, 2.0), (6.0, 4.0, 4.0), 0.3, (0.35, 0.40, 0.55)),
            SynthCuboid((9.0, 4.5, 0.8), (1.0, 1.0, 1.6), 0.0, (0.20, 0.45, 0.25)),
        ),
    )


def canonical_scene(rng_seed: int = 0, n_frames: int = 8) -> Scene:
    return synth_scene(canonical_spec(n_frames), rng_seed, scene_id=f"canonical-{rng_seed}")
