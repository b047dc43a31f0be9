"""Dataset ingestion, binary checkpoints, and PLY export.

Datasets follow the NeRF-synthetic convention: a `transforms.json` with
camera-to-world matrices (OpenGL axes, camera looking down -z) and per-frame
image paths.  Images are decoded from 8-bit sRGB to linear [0, 1]; all
internal math is linear and images are re-encoded on write.

Checkpoints are a single little-endian binary file: magic ``PYGS``, a u32
format version, tagged sections (tag u32 + length u64 + body), and a
trailing CRC32 of everything between the version field and the checksum.
Unknown sections are skipped by length for forward compatibility.
"""

from __future__ import annotations

import io as _io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .geom import Camera
from .nets import Embeddings, Mlp
from .scene import GaussianPyramid, SceneModel
from .splat import WeightingMode

MAGIC = b"PYGS"
VERSION = 1

SEC_HEADER = 1
SEC_GAUSSIANS = 2
SEC_CENTROIDS = 3
SEC_CLUSTER_EMBED = 4
SEC_APPEARANCE_EMBED = 5
SEC_WEIGHT_NET = 6
SEC_CORRECTION_NET = 7
SEC_FIELD = 8
SEC_CONFIG = 9
SEC_MOMENTS = 10

_MODE_IDS = {m: i for i, m in enumerate(WeightingMode)}
_MODE_FROM_ID = {i: m for m, i in _MODE_IDS.items()}

TEST_EVERY = 8  # every 8th frame goes to the test split


def srgb_to_linear(srgb: np.ndarray) -> np.ndarray:
    srgb = np.asarray(srgb, dtype=np.float64)
    return np.where(srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(lin: np.ndarray) -> np.ndarray:
    lin = np.clip(np.asarray(lin, dtype=np.float64), 0.0, 1.0)
    return np.where(
        lin <= 0.0031308, 12.92 * lin, 1.055 * lin ** (1.0 / 2.4) - 0.055
    )


def save_image(path: str | Path, linear_rgb: np.ndarray) -> None:
    """Write a linear [0, 1] image as an 8-bit sRGB PNG."""
    u8 = np.round(linear_to_srgb(linear_rgb) * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(path)


def load_image(path: str | Path, background: np.ndarray | None = None) -> np.ndarray:
    """Decode a PNG/JPEG to linear RGB; alpha is composited over background."""
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.shape[2] == 4:
        alpha = arr[..., 3:4]
        rgb = srgb_to_linear(arr[..., :3])
        bg = np.zeros(3) if background is None else np.asarray(background)
        return rgb * alpha + bg * (1.0 - alpha)
    return srgb_to_linear(arr[..., :3])


@dataclass
class Dataset:
    """Posed images: one Camera per image, linear RGB pixels."""

    images: list
    cameras: list

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise DataError("image count must equal camera count")

    def __len__(self) -> int:
        return len(self.images)

    def split(self) -> tuple[list[int], list[int]]:
        """(train_indices, test_indices): every 8th frame held out."""
        test = [i for i in range(len(self.images)) if i % TEST_EVERY == 0]
        train = [i for i in range(len(self.images)) if i % TEST_EVERY != 0]
        if not train:  # tiny datasets train on everything
            train, test = test, []
        return train, test

    def subset(self, indices: list[int]) -> "Dataset":
        return Dataset(
            [self.images[i] for i in indices], [self.cameras[i] for i in indices]
        )


def _frame_image_path(root: Path, file_path: str) -> Path:
    p = root / file_path
    if p.exists():
        return p
    for ext in (".png", ".jpg", ".jpeg", ".PNG"):
        q = p.with_suffix(ext) if p.suffix == "" else p.parent / (p.name + ext)
        if q.exists():
            return q
    raise DataError(f"image for frame '{file_path}' not found under {root}")


def camera_from_frame(
    frame: dict, meta: dict, width: int, height: int, index: int
) -> Camera:
    """Build the internal camera from one transforms.json frame."""
    c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
    if c2w.shape != (4, 4):
        raise DataError(f"frame {index}: transform_matrix must be 4x4")
    if abs(np.linalg.det(c2w[:3, :3])) < 1e-12:
        raise DataError(f"frame {index}: non-invertible transform")
    w2c = np.linalg.inv(c2w)

    def pick(key, default=None):
        return frame.get(key, meta.get(key, default))

    fl_x = pick("fl_x")
    fl_y = pick("fl_y")
    if fl_x is None:
        angle = pick("camera_angle_x")
        if angle is None:
            raise DataError(f"frame {index}: no focal length or camera_angle_x")
        fl_x = 0.5 * width / np.tan(0.5 * float(angle))
    fl_y = fl_y if fl_y is not None else fl_x
    cx = pick("cx", width / 2.0)
    cy = pick("cy", height / 2.0)
    return Camera(
        w2c=w2c, fx=float(fl_x), fy=float(fl_y), cx=float(cx), cy=float(cy),
        width=width, height=height, index=index,
    )


def load_dataset(path: str | Path, background: np.ndarray | None = None) -> Dataset:
    """Load a NeRF-synthetic-convention dataset directory."""
    root = Path(path)
    tf = root / "transforms.json"
    if not tf.exists():
        raise DataError(f"no transforms.json under {root}")
    try:
        meta = json.loads(tf.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed transforms.json: {exc}") from exc
    frames = meta.get("frames")
    if not frames:
        raise DataError("transforms.json has no frames")
    images, cameras = [], []
    for i, frame in enumerate(frames):
        if "file_path" not in frame or "transform_matrix" not in frame:
            raise DataError(f"frame {i}: missing file_path or transform_matrix")
        img = load_image(_frame_image_path(root, frame["file_path"]), background)
        h, w = img.shape[:2]
        cameras.append(camera_from_frame(frame, meta, w, h, i))
        images.append(img)
    return Dataset(images, cameras)


def save_dataset(path: str | Path, dataset: Dataset,
                 camera_angle_x: float | None = None) -> None:
    """Write a dataset back in the transforms.json convention (for tests)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (img, cam) in enumerate(zip(dataset.images, dataset.cameras)):
        name = f"r_{i}.png"
        save_image(root / name, img)
        frames.append({
            "file_path": name,
            "fl_x": cam.fx,
            "fl_y": cam.fy,
            "cx": cam.cx,
            "cy": cam.cy,
            "transform_matrix": cam.c2w().tolist(),
        })
    meta = {"frames": frames}
    if camera_angle_x is not None:
        meta["camera_angle_x"] = camera_angle_x
    (root / "transforms.json").write_text(json.dumps(meta, indent=1))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack_array(arr: np.ndarray, dtype) -> bytes:
    return np.ascontiguousarray(arr, dtype=dtype).tobytes()


def _write_section(buf: _io.BytesIO, tag: int, body: bytes) -> None:
    buf.write(struct.pack("<IQ", tag, len(body)))
    buf.write(body)


def _mlp_bytes(net: Mlp) -> bytes:
    out = _io.BytesIO()
    out.write(struct.pack("<I", len(net.weights)))
    for w, b in zip(net.weights, net.biases):
        out.write(struct.pack("<II", w.shape[0], w.shape[1]))
        out.write(_pack_array(w, "<f4"))
        out.write(_pack_array(b, "<f4"))
    return out.getvalue()


def _mlp_from_bytes(body: bytes) -> Mlp:
    off = 0
    (n_layers,) = struct.unpack_from("<I", body, off)
    off += 4
    net = Mlp.__new__(Mlp)
    net.weights, net.biases, net._cache = [], [], None
    for _ in range(n_layers):
        fi, fo = struct.unpack_from("<II", body, off)
        off += 8
        w = np.frombuffer(body, "<f4", fi * fo, off).reshape(fi, fo).astype(np.float64)
        off += 4 * fi * fo
        b = np.frombuffer(body, "<f4", fo, off).astype(np.float64)
        off += 4 * fo
        net.weights.append(w)
        net.biases.append(b)
    return net


def _named_arrays_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    out = _io.BytesIO()
    out.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode()
        out.write(struct.pack("<I", len(nb)))
        out.write(nb)
        out.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            out.write(struct.pack("<Q", d))
        out.write(_pack_array(arr, "<f4"))
    return out.getvalue()


def _named_arrays_from_bytes(body: bytes) -> dict[str, np.ndarray]:
    off = 0
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off : off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = []
        for _ in range(ndim):
            (d,) = struct.unpack_from("<Q", body, off)
            off += 8
            shape.append(d)
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = (
            np.frombuffer(body, "<f4", size, off).reshape(shape).astype(np.float64)
        )
        off += 4 * size
    return arrays


def save_checkpoint(
    model: SceneModel,
    path: str | Path,
    config: dict | None = None,
    moments: dict[str, np.ndarray] | None = None,
    field=None,
) -> None:
    """Serialize a scene model (and optionally field/optimizer state).

    The write is atomic: a temp file is renamed over the target.
    """
    g = model.gaussians
    payload = _io.BytesIO()

    header = struct.pack(
        "<IIIIQIIBQ",
        model.n_levels,
        model.n_clusters,
        model.embeddings.cluster.shape[1],
        model.embeddings.appearance.shape[0],
        g.n,
        model.active_sh_degree,
        _MODE_IDS[model.weighting_mode],
        1 if model.color_correction else 0,
        model.iteration,
    )
    header += struct.pack("<f", model.scene_extent)
    header += _pack_array(model.aabb, "<f8")
    header += _pack_array(model.background, "<f4")
    _write_section(payload, SEC_HEADER, header)

    gauss = _io.BytesIO()
    gauss.write(_pack_array(g.positions, "<f4"))
    gauss.write(_pack_array(g.quaternions, "<f4"))
    gauss.write(_pack_array(g.log_scales, "<f4"))
    gauss.write(_pack_array(g.opacity_logits, "<f4"))
    gauss.write(_pack_array(g.sh, "<f4"))
    gauss.write(_pack_array(g.levels, "u1"))
    gauss.write(_pack_array(g.clusters, "<u4"))
    _write_section(payload, SEC_GAUSSIANS, gauss.getvalue())

    _write_section(payload, SEC_CENTROIDS, _pack_array(model.centroids, "<f4"))
    _write_section(
        payload, SEC_CLUSTER_EMBED, _pack_array(model.embeddings.cluster, "<f4")
    )
    _write_section(
        payload, SEC_APPEARANCE_EMBED, _pack_array(model.embeddings.appearance, "<f4")
    )
    _write_section(payload, SEC_WEIGHT_NET, _mlp_bytes(model.weight_net))
    _write_section(payload, SEC_CORRECTION_NET, _mlp_bytes(model.correction_net))

    if field is not None:
        fb = _io.BytesIO()
        fb.write(struct.pack("<I", field.resolution))
        fb.write(_pack_array(field.aabb, "<f8"))
        fb.write(_pack_array(field.density_raw, "<f4"))
        fb.write(_pack_array(field.features, "<f4"))
        fb.write(_mlp_bytes(field.head))
        _write_section(payload, SEC_FIELD, fb.getvalue())

    if config is not None:
        _write_section(
            payload, SEC_CONFIG, json.dumps(config, sort_keys=True).encode()
        )
    if moments is not None:
        _write_section(payload, SEC_MOMENTS, _named_arrays_bytes(moments))

    body = payload.getvalue()
    blob = MAGIC + struct.pack("<I", VERSION) + body
    blob += struct.pack("<I", zlib.crc32(struct.pack("<I", VERSION) + body))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    """A loaded checkpoint: the model plus optional auxiliary sections."""

    model: SceneModel
    config: dict | None = None
    moments: dict[str, np.ndarray] | None = None
    field: object | None = None


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Parse and validate a checkpoint file (fail-closed)."""
    from .field import VoxelField  # local import to avoid a cycle

    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 12:
        raise DataError("truncated checkpoint: missing header")
    if blob[:4] != MAGIC:
        raise DataError("bad magic: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[4:-4]) != crc_stored:
        raise DataError("checkpoint checksum mismatch")

    sections: dict[int, bytes] = {}
    off = 8
    end = len(blob) - 4
    while off < end:
        if off + 12 > end:
            raise DataError("truncated checkpoint: bad section header")
        tag, length = struct.unpack_from("<IQ", blob, off)
        off += 12
        if off + length > end:
            raise DataError(f"truncated checkpoint: section {tag} overruns file")
        if tag not in sections:  # unknown/duplicate tags are skipped
            sections[tag] = blob[off : off + length]
        off += length

    for required in (SEC_HEADER, SEC_GAUSSIANS, SEC_CENTROIDS,
                     SEC_CLUSTER_EMBED, SEC_APPEARANCE_EMBED,
                     SEC_WEIGHT_NET, SEC_CORRECTION_NET):
        if required not in sections:
            raise DataError(f"checkpoint missing required section {required}")

    hdr = sections[SEC_HEADER]
    levels, k, dim, n_cam, n, sh_deg, mode_id, corr, iteration = struct.unpack_from(
        "<IIIIQIIBQ", hdr, 0
    )
    off = struct.calcsize("<IIIIQIIBQ")
    (extent,) = struct.unpack_from("<f", hdr, off)
    off += 4
    aabb = np.frombuffer(hdr, "<f8", 6, off).reshape(2, 3).copy()
    off += 48
    background = np.frombuffer(hdr, "<f4", 3, off).astype(np.float64)

    gb = sections[SEC_GAUSSIANS]
    expected = n * (3 + 4 + 3 + 1 + 48) * 4 + n * 1 + n * 4
    if len(gb) != expected:
        raise DataError("gaussian section size mismatch")
    off = 0

    def take(count, dtype, itemsize):
        nonlocal off
        arr = np.frombuffer(gb, dtype, count, off)
        off += count * itemsize
        return arr

    positions = take(n * 3, "<f4", 4).reshape(n, 3).astype(np.float32)
    quats = take(n * 4, "<f4", 4).reshape(n, 4).astype(np.float32)
    log_scales = take(n * 3, "<f4", 4).reshape(n, 3).astype(np.float32)
    logits = take(n, "<f4", 4).astype(np.float32)
    sh = take(n * 48, "<f4", 4).reshape(n, 16, 3).astype(np.float32)
    lvl = take(n, "u1", 1).astype(np.uint8)
    clusters = take(n, "<u4", 4).astype(np.int32)

    gaussians = GaussianPyramid(
        positions, quats, log_scales, logits, sh, lvl, clusters
    )
    centroids = (
        np.frombuffer(sections[SEC_CENTROIDS], "<f4").reshape(k, 3).astype(np.float64)
    )
    emb = Embeddings(
        cluster=np.frombuffer(sections[SEC_CLUSTER_EMBED], "<f4")
        .reshape(k, dim).astype(np.float32),
        appearance=np.frombuffer(sections[SEC_APPEARANCE_EMBED], "<f4")
        .reshape(n_cam, dim).astype(np.float32),
    )
    model = SceneModel(
        gaussians=gaussians,
        centroids=centroids,
        embeddings=emb,
        weight_net=_mlp_from_bytes(sections[SEC_WEIGHT_NET]),
        correction_net=_mlp_from_bytes(sections[SEC_CORRECTION_NET]),
        n_levels=levels,
        aabb=aabb,
        scene_extent=float(extent),
        active_sh_degree=sh_deg,
        weighting_mode=_MODE_FROM_ID[mode_id],
        color_correction=bool(corr),
        iteration=iteration,
        background=background,
    )

    fld = None
    if SEC_FIELD in sections:
        fb = sections[SEC_FIELD]
        (res,) = struct.unpack_from("<I", fb, 0)
        off = 4
        faabb = np.frombuffer(fb, "<f8", 6, off).reshape(2, 3)
        off += 48
        fld = VoxelField.__new__(VoxelField)
        fld.aabb = faabb.copy()
        fld.resolution = res
        size = res**3
        fld.density_raw = (
            np.frombuffer(fb, "<f4", size, off).reshape(res, res, res)
            .astype(np.float64)
        )
        off += 4 * size
        from .field import FEATURE_DIM

        fld.features = (
            np.frombuffer(fb, "<f4", size * FEATURE_DIM, off)
            .reshape(res, res, res, FEATURE_DIM).astype(np.float64)
        )
        off += 4 * size * FEATURE_DIM
        fld.head = _mlp_from_bytes(fb[off:])

    config = json.loads(sections[SEC_CONFIG]) if SEC_CONFIG in sections else None
    moments = (
        _named_arrays_from_bytes(sections[SEC_MOMENTS])
        if SEC_MOMENTS in sections
        else None
    )
    return Checkpoint(model=model, config=config, moments=moments, field=fld)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def export_ply(model: SceneModel, path: str | Path,
               level: int | None = None) -> None:
    """Write Gaussians as a binary-little-endian PLY in the 3DGS layout.

    Opacity and scale are stored raw (logit/log); `level` and `cluster`
    extension properties carry the pyramid structure.  An optional level
    filter exports a single pyramid level.
    """
    g = model.gaussians
    if g.n == 0:
        raise DataError("refusing to export an empty scene")
    mask = np.ones(g.n, dtype=bool) if level is None else g.levels == level
    n = int(mask.sum())
    names = (
        ["x", "y", "z"]
        + [f"f_dc_{i}" for i in range(3)]
        + [f"f_rest_{i}" for i in range(45)]
        + ["opacity"]
        + [f"scale_{i}" for i in range(3)]
        + [f"rot_{i}" for i in range(4)]
    )
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in names]
    header += ["property uchar level", "property uint cluster", "end_header"]
    dtype = [(p, "<f4") for p in names] + [("level", "u1"), ("cluster", "<u4")]
    rec = np.empty(n, dtype=dtype)
    pos = g.positions[mask]
    rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
    sh = g.sh[mask]
    for c in range(3):
        rec[f"f_dc_{c}"] = sh[:, 0, c]
    rest = np.transpose(sh[:, 1:, :], (0, 2, 1)).reshape(n, 45)  # channel-major
    for i in range(45):
        rec[f"f_rest_{i}"] = rest[:, i]
    rec["opacity"] = g.opacity_logits[mask]
    for i in range(3):
        rec[f"scale_{i}"] = g.log_scales[mask][:, i]
    for i in range(4):
        rec[f"rot_{i}"] = g.quaternions[mask][:, i]
    rec["level"] = g.levels[mask]
    rec["cluster"] = g.clusters[mask].astype(np.uint32)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        fh.write(rec.tobytes())


def export_point_ply(path: str | Path, positions: np.ndarray,
                     colors: np.ndarray) -> None:
    """Plain xyz+rgb point cloud PLY (binary little endian)."""
    n = positions.shape[0]
    header = [
        "ply", "format binary_little_endian 1.0", f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    rec = np.empty(
        n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                  ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    )
    rec["x"], rec["y"], rec["z"] = (
        positions[:, 0], positions[:, 1], positions[:, 2]
    )
    rgb = np.clip(np.round(colors * 255.0), 0, 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        fh.write(rec.tobytes())


_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "uint": "<u4", "uint32": "<u4",
    "int": "<i4", "int32": "<i4", "ushort": "<u2", "short": "<i2",
}


def read_ply(path: str | Path) -> np.ndarray:
    """Minimal binary-little-endian PLY reader (debug/round-trip path)."""
    blob = Path(path).read_bytes()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise DataError(f"{path} is not a PLY file")
    lines = blob[:end].decode().splitlines()
    n = 0
    fields = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    body = blob[end + len(b"end_header\n"):]
    return np.frombuffer(body, dtype=fields, count=n)
