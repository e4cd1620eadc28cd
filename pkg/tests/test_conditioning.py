import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import maxpool_blocks

from scpainter.conditioning import (
    ConditioningBundle,
    ConfigurationError,
    ShapeError,
    Trajectory,
    assemble_diffusion_input,
    assemble_encoder_input,
    composite_masks,
    downsample_mask,
    latent_mask,
    mask_latent,
    render_joint,
)
from scpainter.geometry import CameraIntrinsics, ColorPointCloud, RigidPose, project_points
from scpainter.splat import Gaussian3D, rasterize

K = CameraIntrinsics(16.0, 16.0, 8.0, 8.0, 16, 16)
CAM = Trajectory(((K, RigidPose.identity()),))
C0 = 0.28209479177387814


def wall(depth, color, half=0.6, step=0.05):
    """Dense fronto-parallel square of points covering the middle of the image."""
    xs = np.arange(-half, half + 1e-9, step) * depth / 4
    X, Y = np.meshgrid(xs, xs)
    pts = np.stack([X.ravel(), Y.ravel(), np.full(X.size, depth)], axis=1)
    return ColorPointCloud(pts, np.tile(color, (len(pts), 1)))


def blob(z, color, opacity=1.0, scale=0.6, x=0.0):
    return Gaussian3D(np.array([x, 0.0, z]), np.full(3, scale), np.array([1.0, 0, 0, 0]), opacity,
                      ((np.asarray(color) - 0.5) / C0)[None])


def test_points_only_matches_projection():
    rng = np.random.default_rng(0)
    cloud = ColorPointCloud(rng.uniform(-2, 2, (400, 3)) + [0, 0, 4], rng.random((400, 3)))
    b = render_joint(cloud, [], CAM)
    rgb, cov, _ = project_points(cloud, K, RigidPose.identity())
    assert np.array_equal(b.I[0], np.transpose(rgb, (2, 0, 1)))
    assert np.array_equal(b.coverage[0, 0], cov)
    assert not b.asset_alpha.any()
    assert np.array_equal(b.hole_mask, ~b.coverage)


def test_splat_in_front_composites_over_points():
    cloud = wall(6.0, [0.0, 0.0, 1.0])
    g = blob(3.0, [1.0, 0.0, 0.0])
    b = render_joint(cloud, [[g]], CAM)
    s = rasterize([g], K, RigidPose.identity())
    rgb_p, cov_p, _ = project_points(cloud, K, RigidPose.identity())
    win = (s.alpha >= 0.5) & cov_p
    assert win.any()
    expect = s.rgb + (1 - s.alpha)[..., None] * rgb_p
    assert np.allclose(np.transpose(b.I[0], (1, 2, 0))[win], np.clip(expect[win], 0, 1))


def test_splat_behind_points_is_hidden():
    cloud = wall(2.0, [0.0, 0.0, 1.0])
    g = blob(6.0, [1.0, 0.0, 0.0], scale=1.0)
    b = render_joint(cloud, [[g]], CAM)
    rgb_p, cov_p, _ = project_points(cloud, K, RigidPose.identity())
    img = np.transpose(b.I[0], (1, 2, 0))
    assert np.array_equal(img[cov_p], rgb_p[cov_p])


def test_splat_without_points_and_coverage_union():
    g = blob(4.0, [0.2, 0.9, 0.3])
    b = render_joint(ColorPointCloud.empty(), [[g]], CAM)
    s = rasterize([g], K, RigidPose.identity())
    assert np.allclose(b.I[0], np.transpose(np.clip(s.rgb, 0, 1), (2, 0, 1)))
    assert np.array_equal(b.coverage[0, 0], s.alpha >= 0.5)
    assert np.array_equal(b.asset_alpha[0, 0], s.alpha)
    assert np.all(b.asset_mask_binary <= b.coverage)


def test_per_frame_assets_and_jobs_are_deterministic():
    rng = np.random.default_rng(1)
    cloud = ColorPointCloud(rng.uniform(-2, 2, (300, 3)) + [0, 0, 5], rng.random((300, 3)))
    cams = tuple((K, RigidPose(np.eye(3), np.array([0.1 * i, 0.0, 0.0]))) for i in range(4))
    traj = Trajectory(cams)

    def assets(t):
        return [[blob(3.0 + 0.5 * t, [0.9, 0.1, 0.1], opacity=0.8, scale=0.3)]]

    a = render_joint(cloud, assets, traj, jobs=1)
    b = render_joint(cloud, assets, traj, jobs=3)
    assert np.array_equal(a.I, b.I)
    assert np.array_equal(a.coverage, b.coverage)
    assert np.array_equal(a.asset_alpha, b.asset_alpha)
    assert a.shape == (4, 16, 16)


def test_trajectory_validation_and_json():
    with pytest.raises(ConfigurationError):
        Trajectory(())
    K2 = CameraIntrinsics(16.0, 16.0, 8.0, 8.0, 24, 16)
    with pytest.raises(ConfigurationError):
        Trajectory(((K, RigidPose.identity()), (K2, RigidPose.identity())))
    pose = RigidPose(np.eye(3), np.array([1.0, 2.0, 3.0]))
    back = Trajectory.from_json(Trajectory(((K, pose),)).to_json())
    assert back.cameras[0][0] == K and back.cameras[0][1].allclose(pose, 0)
    with pytest.raises(ConfigurationError):
        render_joint(ColorPointCloud.empty(), [], [(K, pose)])


def test_bundle_shape_validation():
    with pytest.raises(ShapeError):
        ConditioningBundle(np.zeros((1, 3, 8, 8)), np.zeros((1, 1, 8, 16)), np.zeros((1, 1, 8, 8)))
    with pytest.raises(ShapeError):
        ConditioningBundle(np.zeros((1, 4, 8, 8)), np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)))
    with pytest.raises(ShapeError):
        ConditioningBundle(np.full((1, 3, 8, 8), np.nan), np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 8)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mask_algebra_matches_oracles(seed):
    rng = np.random.default_rng(seed)
    T, h, w = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
    cov = rng.random((T, 1, 8 * h, 8 * w)) < rng.uniform(0.01, 0.3)
    ma = rng.random((T, 1, 8 * h, 8 * w)) < rng.uniform(0.01, 0.3)
    comp = composite_masks(cov, ma)
    assert np.array_equal(comp, np.logical_or(cov, ma))
    down = downsample_mask(comp)
    assert np.array_equal(down, maxpool_blocks(comp))
    z = rng.standard_normal((T, 8, h, w))
    masked = mask_latent(z, down)
    expect = z.copy()
    expect[np.broadcast_to(~down, z.shape)] = 0.0
    assert np.array_equal(masked, expect)


def test_mask_shape_errors():
    with pytest.raises(ShapeError):
        composite_masks(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 8, 16)))
    with pytest.raises(ShapeError):
        downsample_mask(np.zeros((1, 1, 12, 8)))
    with pytest.raises(ShapeError):
        mask_latent(np.zeros((1, 8, 2, 2)), np.zeros((1, 1, 2, 3)))


def test_channel_order_of_assembled_inputs():
    I = np.full((2, 3, 8, 8), 0.25)
    ma = np.full((2, 1, 8, 8), 0.75)
    x = assemble_encoder_input(I, ma)
    assert x.shape == (2, 4, 8, 8)
    assert (x[:, :3] == 0.25).all() and (x[:, 3] == 0.75).all()
    zc, zn = np.ones((2, 8, 1, 1)), np.zeros((2, 8, 1, 1))
    y = assemble_diffusion_input(zc, zn)
    assert y.shape == (2, 16, 1, 1) and (y[:, :8] == 1).all() and (y[:, 8:] == 0).all()
    with pytest.raises(ShapeError):
        assemble_diffusion_input(zc, np.zeros((2, 8, 2, 1)))
    with pytest.raises(ShapeError):
        assemble_encoder_input(I, np.zeros((2, 2, 8, 8)))


def test_latent_mask_includes_asset_pixels():
    I = np.zeros((1, 3, 16, 16))
    cov = np.zeros((1, 1, 16, 16), dtype=bool)
    ma = np.zeros((1, 1, 16, 16))
    ma[0, 0, 9, 2] = 0.6
    ma[0, 0, 1, 12] = 0.4
    b = ConditioningBundle(I, cov, ma)
    assert latent_mask(b)[0, 0].tolist() == [[False, False], [True, False]]
