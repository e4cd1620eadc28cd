"""On-disk formats: SCPT tensors, PNG frames, binary PLY, scene manifests and bundle directories.

SCPT tensor layout: ``b"SCPT"``, u32 rank, rank x u32 dims, zero padding up to
a multiple of 16 bytes, then little-endian float32 data in C order. Rank-1 and
rank-2 tensors therefore have exactly a 16-byte header.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image

from .conditioning import ASSET_THRESHOLD, POLARITY, ConditioningBundle, Trajectory
from .dataset import AssetTrack, Scene, TrainingPair
from .geometry import CameraIntrinsics, ColorPointCloud, Frame, OrientedBox3D, RigidPose
from .splat import Gaussian3D, GaussianAsset

SCPT_MAGIC = b"SCPT"
PNG_COMPRESS_LEVEL = 6


class FormatError(ValueError):
    """A file is missing, truncated or does not follow its declared format."""


# -- SCPT tensors -------------------------------------------------------------


def write_tensor(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    head = SCPT_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    head += b"\0" * (-len(head) % 16)
    with open(path, "wb") as f:
        f.write(head + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read tensor {path}: {exc}") from exc
    if len(data) < 16 or data[:4] != SCPT_MAGIC:
        raise FormatError(f"{path} is not an SCPT tensor")
    (rank,) = struct.unpack("<I", data[4:8])
    if rank > 8 or len(data) < 8 + 4 * rank:
        raise FormatError(f"{path}: bad tensor rank {rank}")
    dims = struct.unpack(f"<{rank}I", data[8 : 8 + 4 * rank])
    start = 8 + 4 * rank
    start += -start % 16
    count = int(np.prod(dims)) if rank else 1
    body = data[start:]
    if len(body) != 4 * count:
        raise FormatError(f"{path}: expected {4 * count} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(dims)


def write_depth(path, depth) -> None:
    """Depth as a (2, H, W) tensor: channel 0 meters (0 where invalid), channel 1 validity flag."""
    depth = np.asarray(depth, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(depth) & (depth > 0)
    write_tensor(path, np.stack([np.where(valid, depth, 0.0), valid.astype(np.float64)]))


def read_depth(path) -> np.ndarray:
    """Returns an (H, W) depth map with ``inf`` at invalid pixels."""
    t = read_tensor(path)
    if t.ndim == 3 and t.shape[0] == 2:
        return np.where(t[1] > 0.5, t[0], np.inf)
    if t.ndim == 2:
        with np.errstate(invalid="ignore"):
            return np.where(np.isfinite(t) & (t > 0), t, np.inf)
    raise FormatError(f"{path}: depth tensor must be H x W or 2 x H x W, got {t.shape}")


# -- images -------------------------------------------------------------------


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image) -> None:
    """Write an H x W x 3 float image in [0, 1] as 8-bit RGB."""
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", compress_level=PNG_COMPRESS_LEVEL)


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


# -- PLY ----------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def write_ply(path, columns: dict) -> None:
    """Write a single ``vertex`` element; ``columns`` maps property name -> (dtype name, values)."""
    names = list(columns)
    n = len(next(iter(columns.values()))[1]) if columns else 0
    dtype = np.dtype([(k, _PLY_TYPES[columns[k][0]]) for k in names])
    rec = np.empty(n, dtype=dtype)
    for k in names:
        rec[k] = columns[k][1]
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property {columns[k][0]} {k}" for k in names]
    lines.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> np.ndarray:
    """Read the ``vertex`` element of a binary little-endian PLY as a structured array."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError(f"{path} is not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = next((ln.split()[1] for ln in header if ln.startswith("format")), None)
    if fmt != "binary_little_endian":
        raise FormatError(f"{path}: only binary_little_endian PLY is supported (got {fmt})")
    elements, current = [], None
    for ln in header:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "element":
            current = [parts[1], int(parts[2]), []]
            elements.append(current)
        elif parts[0] == "property":
            if current is None or parts[1] == "list":
                raise FormatError(f"{path}: unsupported property declaration {ln!r}")
            if parts[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unknown PLY type {parts[1]!r}")
            current[2].append((parts[2], _PLY_TYPES[parts[1]]))
    offset = body_start
    for name, count, props in elements:
        dtype = np.dtype(props)
        size = dtype.itemsize * count
        if name == "vertex":
            chunk = data[offset : offset + size]
            if len(chunk) != size:
                raise FormatError(f"{path}: truncated vertex data")
            return np.frombuffer(chunk, dtype=dtype)
        offset += size
    raise FormatError(f"{path}: no vertex element")


def write_point_ply(path, cloud: ColorPointCloud) -> None:
    rgb = to_uint8(cloud.colors)
    pos = cloud.positions.astype(np.float32)
    write_ply(
        path,
        {
            "x": ("float", pos[:, 0]), "y": ("float", pos[:, 1]), "z": ("float", pos[:, 2]),
            "red": ("uchar", rgb[:, 0]), "green": ("uchar", rgb[:, 1]), "blue": ("uchar", rgb[:, 2]),
        },
    )


def read_point_ply(path) -> ColorPointCloud:
    v = read_ply(path)
    try:
        pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
        rgb = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64) / 255.0
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: missing point property {exc}") from exc
    return ColorPointCloud(pos, rgb)


def asset_sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def write_asset(path, asset: GaussianAsset) -> None:
    """Gaussian asset PLY with plain (non-log) scales and activated opacity, plus box sidecar."""
    gs = asset.gaussians
    n_coef = gs[0].sh.shape[0] if gs else 1
    if any(g.sh.shape[0] != n_coef for g in gs):
        raise FormatError("all gaussians of an asset must share one SH degree")
    cols = {}
    pos = np.array([g.position for g in gs]).reshape(-1, 3)
    scale = np.array([g.scale for g in gs]).reshape(-1, 3)
    rot = np.array([g.rotation for g in gs]).reshape(-1, 4)
    sh = np.array([g.sh for g in gs]).reshape(-1, n_coef, 3)
    for i, k in enumerate("xyz"):
        cols[k] = ("float", pos[:, i])
    for i in range(3):
        cols[f"scale_{i}"] = ("float", scale[:, i])
    for i in range(4):
        cols[f"rot_{i}"] = ("float", rot[:, i])
    cols["opacity"] = ("float", np.array([g.opacity for g in gs]))
    for c in range(3):
        cols[f"f_dc_{c}"] = ("float", sh[:, 0, c])
    # Channel-major rest coefficients, matching common 3D GS exports.
    for c in range(3):
        for j in range(1, n_coef):
            cols[f"f_rest_{c * (n_coef - 1) + j - 1}"] = ("float", sh[:, j, c])
    write_ply(path, cols)
    box = asset.canonical_box
    asset_sidecar(path).write_text(json.dumps({"dims": box.dims.tolist(), "center": box.center.tolist()}, indent=2))


def read_asset(path, reference_convention: bool = False) -> GaussianAsset:
    """Load a gaussian asset and its canonical box.

    With ``reference_convention`` the scales are read as log standard deviations
    and opacities as logits, as written by common 3D GS training code.
    """
    v = read_ply(path)
    names = v.dtype.names
    try:
        pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
        scale = np.stack([v[f"scale_{i}"] for i in range(3)], axis=1).astype(np.float64)
        rot = np.stack([v[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64)
        opacity = np.asarray(v["opacity"], dtype=np.float64)
        dc = np.stack([v[f"f_dc_{c}"] for c in range(3)], axis=1).astype(np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: missing gaussian property ({exc})") from exc
    n_rest = sum(1 for k in names if k.startswith("f_rest_"))
    n_coef = 1 + n_rest // 3
    degree = int(round(np.sqrt(n_coef))) - 1
    if n_rest % 3 or (degree + 1) ** 2 != n_coef or degree > 3:
        raise FormatError(f"{path}: {n_rest} f_rest properties do not form an SH degree 0-3 layout")
    rest = np.stack([v[f"f_rest_{i}"] for i in range(n_rest)], axis=1).astype(np.float64) if n_rest else np.zeros((len(v), 0))
    sh = np.concatenate([dc[:, None, :], rest.reshape(len(v), 3, n_coef - 1).transpose(0, 2, 1)], axis=1)
    if reference_convention:
        scale = np.exp(scale)
        opacity = 1.0 / (1.0 + np.exp(-opacity))
    rot = rot / np.linalg.norm(rot, axis=1, keepdims=True)
    opacity = np.clip(opacity, 0.0, 1.0)

    side = asset_sidecar(path)
    try:
        meta = json.loads(side.read_text())
        box = OrientedBox3D(np.asarray(meta.get("center", [0, 0, 0]), float), np.asarray(meta["dims"], float))
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{side}: missing or invalid canonical box sidecar ({exc})") from exc
    gs = tuple(Gaussian3D(pos[i], scale[i], rot[i], opacity[i], sh[i]) for i in range(len(v)))
    return GaussianAsset(gs, box)


# -- scene manifest -----------------------------------------------------------

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

SCENE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "scene.json",
    "type": "object",
    "required": ["version", "frames"],
    "properties": {
        "version": {"const": 1},
        "scene_id": {"type": "string"},
        "frames": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["image", "depth", "intrinsics", "pose"],
                "properties": {
                    "image": {"type": "string"},
                    "depth": {"type": "string"},
                    "intrinsics": {"type": "array", "items": {"type": "number"}, "minItems": 6, "maxItems": 6},
                    "pose": {
                        "type": "array", "minItems": 4, "maxItems": 4,
                        "items": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                    },
                },
            },
        },
        "boxes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["frame", "center", "dims"],
                "properties": {
                    "frame": {"type": "integer", "minimum": 0},
                    "center": _VEC3,
                    "dims": _VEC3,
                    "heading": {"type": "number"},
                    "asset_id": {"type": ["string", "null"]},
                },
            },
        },
        "assets": {"type": "object", "additionalProperties": {"type": "string"}},
    },
}


def load_scene(path, reference_convention: bool = False) -> Scene:
    """Load and validate a ``scene.json`` manifest (paths are relative to it)."""
    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read scene manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    try:
        jsonschema.validate(doc, SCENE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"{path}: {exc.message}") from exc
    root = path.parent

    n = len(doc["frames"])
    boxes_by_frame = [[] for _ in range(n)]
    placements: dict[str, dict] = {}
    for b in doc.get("boxes", []):
        if b["frame"] >= n:
            raise FormatError(f"{path}: box references frame {b['frame']} of {n}")
        box = OrientedBox3D(b["center"], b["dims"], b.get("heading", 0.0))
        boxes_by_frame[b["frame"]].append(box)
        if b.get("asset_id"):
            placements.setdefault(b["asset_id"], {})[b["frame"]] = box

    frames = []
    for i, fr in enumerate(doc["frames"]):
        K = CameraIntrinsics.from_list(fr["intrinsics"])
        image = read_png(root / fr["image"])
        depth = read_depth(root / fr["depth"])
        frames.append(Frame(image, depth, K, RigidPose.from_matrix(fr["pose"]), tuple(boxes_by_frame[i])))

    tracks = []
    for asset_id, rel in sorted(doc.get("assets", {}).items()):
        asset = read_asset(root / rel, reference_convention)
        tracks.append(AssetTrack(asset_id, asset, placements.get(asset_id, {})))
    return Scene(tuple(frames), tuple(tracks), doc.get("scene_id", path.parent.name))


def write_scene(scene: Scene, out_dir) -> Path:
    """Write frames, depth, assets and ``scene.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    frames, boxes = [], []
    asset_boxes = {
        (tr.asset_id, t): box for tr in scene.assets for t, box in tr.placements.items()
    }
    for i, fr in enumerate(scene.frames):
        write_png(out / "frames" / f"image_{i:04d}.png", fr.image)
        write_depth(out / "frames" / f"depth_{i:04d}.scpt", fr.depth)
        frames.append(
            {
                "image": f"frames/image_{i:04d}.png",
                "depth": f"frames/depth_{i:04d}.scpt",
                "intrinsics": fr.intrinsics.to_list(),
                "pose": fr.pose.matrix().tolist(),
            }
        )
        placed = {id(b): aid for (aid, t), b in asset_boxes.items() if t == i}
        for b in fr.boxes:
            boxes.append({"frame": i, **b.to_dict(), "asset_id": placed.pop(id(b), None)})
        for aid in placed.values():
            boxes.append({"frame": i, **asset_boxes[(aid, i)].to_dict(), "asset_id": aid})
    assets = {}
    if scene.assets:
        (out / "assets").mkdir(exist_ok=True)
    for tr in scene.assets:
        write_asset(out / "assets" / f"{tr.asset_id}.ply", tr.asset)
        assets[tr.asset_id] = f"assets/{tr.asset_id}.ply"
    doc = {"version": 1, "scene_id": scene.scene_id, "frames": frames, "boxes": boxes, "assets": assets}
    manifest = out / "scene.json"
    manifest.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return manifest


# -- bundles and pairs --------------------------------------------------------


def write_bundle(bundle: ConditioningBundle, out_dir, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    T, H, W = bundle.shape
    for t in range(T):
        write_png(out / f"I_{t:04d}.png", np.transpose(bundle.I[t], (1, 2, 0)))
        write_tensor(out / f"cov_{t:04d}.scpt", bundle.coverage[t, 0].astype(np.float64))
        write_tensor(out / f"ma_{t:04d}.scpt", bundle.asset_alpha[t, 0])
    doc = {
        "T": T,
        "H": H,
        "W": W,
        "polarity": POLARITY,
        "polarity_note": "cov = 1 where content was projected; the hole mask is 1 - cov",
        "asset_threshold": ASSET_THRESHOLD,
        "cameras": bundle.trajectory.to_json() if bundle.trajectory is not None else [],
    }
    if extra:
        doc.update(extra)
    (out / "bundle.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return out


def read_bundle(path) -> ConditioningBundle:
    root = Path(path)
    try:
        doc = json.loads((root / "bundle.json").read_text())
    except OSError as exc:
        raise FormatError(f"{root} is not a bundle directory: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{root}/bundle.json: invalid JSON ({exc})") from exc
    if doc.get("polarity") != POLARITY:
        raise FormatError(f"{root}: unsupported mask polarity {doc.get('polarity')!r}")
    T = int(doc["T"])
    I = np.stack([np.transpose(read_png(root / f"I_{t:04d}.png"), (2, 0, 1)) for t in range(T)])
    cov = np.stack([read_tensor(root / f"cov_{t:04d}.scpt")[None] for t in range(T)]) > 0.5
    ma = np.stack([read_tensor(root / f"ma_{t:04d}.scpt")[None] for t in range(T)])
    if I.shape[2:] != (doc["H"], doc["W"]):
        raise FormatError(f"{root}: frame size disagrees with bundle.json")
    traj = Trajectory.from_json(doc["cameras"]) if doc.get("cameras") else None
    return ConditioningBundle(I, cov, ma, traj)


def write_pair(pair: TrainingPair, out_dir) -> Path:
    out = write_bundle(pair.bundle, out_dir, {"pair": pair.meta})
    for t in range(pair.target.shape[0]):
        write_png(out / f"target_{t:04d}.png", np.transpose(pair.target[t], (1, 2, 0)))
    write_tensor(out / "embed.scpt", pair.first_frame_embed)
    return out


def read_pair(path) -> TrainingPair:
    root = Path(path)
    bundle = read_bundle(root)
    T = bundle.shape[0]
    target = np.stack([np.transpose(read_png(root / f"target_{t:04d}.png"), (2, 0, 1)) for t in range(T)])
    embed = read_tensor(root / "embed.scpt")
    meta = json.loads((root / "bundle.json").read_text()).get("pair", {})
    return TrainingPair(bundle, target, embed, meta=meta)
