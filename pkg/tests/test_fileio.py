import json
import struct

import numpy as np
import pytest

from scpainter import fileio
from scpainter.dataset import build_insertion_pair
from scpainter.fileio import FormatError
from scpainter.geometry import ColorPointCloud, OrientedBox3D
from scpainter.splat import Gaussian3D, GaussianAsset, covariance_of


def test_tensor_round_trip_and_layout(tmp_path):
    x = np.arange(12, dtype=np.float64).reshape(3, 4) / 7
    p = tmp_path / "x.scpt"
    fileio.write_tensor(p, x)
    raw = p.read_bytes()
    assert raw[:4] == b"SCPT"
    assert struct.unpack("<3I", raw[4:16]) == (2, 3, 4)
    assert len(raw) == 16 + 4 * 12
    assert np.array_equal(fileio.read_tensor(p), x.astype(np.float32).astype(np.float64))
    y = np.ones((2, 3, 4, 5))
    fileio.write_tensor(p, y)
    assert len(p.read_bytes()) == 32 + 4 * y.size
    assert np.array_equal(fileio.read_tensor(p), y)


def test_tensor_errors(tmp_path):
    p = tmp_path / "x.scpt"
    fileio.write_tensor(p, np.ones((4, 4)))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError):
        fileio.read_tensor(p)
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(FormatError):
        fileio.read_tensor(p)
    with pytest.raises(FormatError):
        fileio.read_tensor(tmp_path / "missing.scpt")


def test_depth_round_trip_keeps_invalid_pixels(tmp_path):
    d = np.array([[1.5, np.inf], [0.0, 2.25]])
    fileio.write_depth(tmp_path / "d.scpt", d)
    back = fileio.read_depth(tmp_path / "d.scpt")
    assert back[0, 0] == 1.5 and back[1, 1] == 2.25
    assert np.isinf(back[0, 1]) and np.isinf(back[1, 0])


def test_png_round_trip_is_quantized_and_deterministic(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((8, 16, 3))
    fileio.write_png(tmp_path / "a.png", img)
    fileio.write_png(tmp_path / "b.png", img)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    back = fileio.read_png(tmp_path / "a.png")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(FormatError):
        fileio.read_png(tmp_path / "bad.png")


def test_point_ply_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    cloud = ColorPointCloud(rng.normal(size=(50, 3)), rng.integers(0, 256, (50, 3)) / 255.0)
    fileio.write_point_ply(tmp_path / "p.ply", cloud)
    head = (tmp_path / "p.ply").read_bytes()[:200]
    assert head.startswith(b"ply\nformat binary_little_endian 1.0\nelement vertex 50\n")
    back = fileio.read_point_ply(tmp_path / "p.ply")
    assert np.array_equal(back.positions, cloud.positions.astype(np.float32).astype(np.float64))
    assert np.allclose(back.colors, cloud.colors)


def test_ply_reader_rejects_unsupported(tmp_path):
    (tmp_path / "a.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
    with pytest.raises(FormatError):
        fileio.read_ply(tmp_path / "a.ply")
    (tmp_path / "b.ply").write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 3\n"
                                     b"property float x\nend_header\n" + bytes(8))
    with pytest.raises(FormatError):
        fileio.read_ply(tmp_path / "b.ply")


def test_ply_reader_skips_leading_elements(tmp_path):
    body = struct.pack("<i", 7) + struct.pack("<2f", 1.5, -2.0)
    (tmp_path / "c.ply").write_bytes(
        b"ply\nformat binary_little_endian 1.0\ncomment hi\nelement meta 1\nproperty int k\n"
        b"element vertex 2\nproperty float x\nend_header\n" + body
    )
    assert fileio.read_ply(tmp_path / "c.ply")["x"].tolist() == [1.5, -2.0]


def _asset(degree=1, seed=2):
    rng = np.random.default_rng(seed)
    gs = []
    for _ in range(6):
        q = rng.standard_normal(4)
        gs.append(Gaussian3D(rng.uniform(-0.5, 0.5, 3), rng.uniform(0.05, 0.2, 3), q / np.linalg.norm(q),
                             rng.uniform(0.1, 1.0), rng.uniform(-1, 1, ((degree + 1) ** 2, 3))))
    return GaussianAsset(tuple(gs), OrientedBox3D(np.zeros(3), [1.2, 1.0, 0.8]))


def test_asset_round_trip(tmp_path):
    asset = _asset()
    fileio.write_asset(tmp_path / "a.ply", asset)
    back = fileio.read_asset(tmp_path / "a.ply")
    assert np.array_equal(back.canonical_box.dims, asset.canonical_box.dims)
    for g, h in zip(asset.gaussians, back.gaussians):
        assert h.sh_degree == 1
        assert np.allclose(h.position, g.position, atol=1e-6)
        assert np.allclose(covariance_of(h), covariance_of(g), atol=1e-6)
        assert np.allclose(h.sh, g.sh, atol=1e-6)
        assert h.opacity == pytest.approx(g.opacity, abs=1e-6)


def test_asset_rest_coefficients_are_channel_major(tmp_path):
    sh = np.zeros((4, 3))
    sh[1:, 0] = [1.0, 2.0, 3.0]  # red channel of the three degree-1 coefficients
    g = Gaussian3D(np.zeros(3), np.full(3, 0.1), np.array([1.0, 0, 0, 0]), 0.5, sh)
    fileio.write_asset(tmp_path / "a.ply", GaussianAsset((g,), OrientedBox3D(np.zeros(3), [1.0, 1.0, 1.0])))
    v = fileio.read_ply(tmp_path / "a.ply")
    assert [float(v[f"f_rest_{i}"][0]) for i in range(9)] == [1.0, 2.0, 3.0] + [0.0] * 6


def test_asset_reference_convention_and_quaternion_normalization(tmp_path):
    cols = {k: ("float", np.array([0.0])) for k in ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2")}
    for i in range(3):
        cols[f"scale_{i}"] = ("float", np.array([np.log(0.25)]))
    for i, v in enumerate([2.0, 0.0, 0.0, 0.0]):
        cols[f"rot_{i}"] = ("float", np.array([v]))
    cols["opacity"] = ("float", np.array([0.0]))
    fileio.write_ply(tmp_path / "r.ply", cols)
    (tmp_path / "r.json").write_text(json.dumps({"dims": [1, 1, 1]}))
    g = fileio.read_asset(tmp_path / "r.ply", reference_convention=True).gaussians[0]
    assert np.allclose(g.scale, 0.25, atol=1e-7)
    assert g.opacity == pytest.approx(0.5)
    assert np.array_equal(g.rotation, [1.0, 0, 0, 0])
    (tmp_path / "r.json").unlink()
    with pytest.raises(FormatError):
        fileio.read_asset(tmp_path / "r.ply")


def test_scene_round_trip(tmp_path, scene):
    manifest = fileio.write_scene(scene, tmp_path / "s")
    back = fileio.load_scene(manifest)
    assert back.scene_id == scene.scene_id and len(back) == len(scene)
    for f, g in zip(scene.frames, back.frames):
        assert g.intrinsics == f.intrinsics
        assert g.pose.allclose(f.pose, 0)
        assert np.abs(g.image - f.image).max() <= 0.5 / 255 + 1e-12
        assert np.array_equal(g.valid, f.valid)
        assert np.allclose(g.depth[g.valid], f.depth[f.valid], rtol=1e-7)
    tr, tb = scene.assets[0], back.assets[0]
    assert tb.asset_id == tr.asset_id
    assert sorted(tb.placements) == sorted(tr.placements)
    assert np.allclose(tb.placements[0].center, tr.placements[0].center)
    # The asset box is listed once per frame, carrying its asset id.
    doc = json.loads(manifest.read_text())
    assert sum(b["asset_id"] == "car0" for b in doc["boxes"]) == len(scene)


def test_scene_schema_violations(tmp_path, scene):
    manifest = fileio.write_scene(scene, tmp_path / "s")
    doc = json.loads(manifest.read_text())
    doc["frames"][0]["pose"] = [[1, 0, 0]]
    manifest.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        fileio.load_scene(manifest)
    manifest.write_text("{")
    with pytest.raises(FormatError):
        fileio.load_scene(manifest)
    with pytest.raises(FormatError):
        fileio.load_scene(tmp_path / "nowhere")


def test_pair_round_trip(tmp_path, scene):
    pair = build_insertion_pair(scene, "car0", 2)
    fileio.write_pair(pair, tmp_path / "p")
    back = fileio.read_pair(tmp_path / "p")
    assert np.array_equal(back.bundle.coverage, pair.bundle.coverage)
    assert np.allclose(back.bundle.asset_alpha, pair.bundle.asset_alpha, atol=1e-7)
    assert np.abs(back.bundle.I - pair.bundle.I).max() <= 0.5 / 255 + 1e-12
    assert np.allclose(back.first_frame_embed, pair.first_frame_embed, atol=1e-7)
    assert back.meta == pair.meta
    assert back.bundle.trajectory.cameras[0][1].allclose(pair.bundle.trajectory.cameras[0][1], 0)
    doc = json.loads((tmp_path / "p" / "bundle.json").read_text())
    assert doc["polarity"] == "coverage"
    doc["polarity"] = "hole"
    (tmp_path / "p" / "bundle.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        fileio.read_bundle(tmp_path / "p")
