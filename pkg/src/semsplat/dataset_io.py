"""On-disk formats and in-memory containers for scenes, checkpoints and metrics.

Frame payloads are raw little-endian arrays behind a small header::

    magic   8 bytes   b"SSPLF32\\0" (float32) or b"SSPLI32\\0" (int32)
    ndim    u32
    dims    u32 * ndim
    data    prod(dims) elements, C order

A scene directory holds ``manifest.json`` plus one payload file per frame
field. Masks are stored as int32 label images, one per granularity layer
(0 = no mask), with a per-frame embedding table keyed by label id.

Checkpoints are a single binary file; see :func:`save_checkpoint` for the
field order.
"""
import csv
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .gaussians import PARAM_NAMES, GaussianMap

SCENE_VERSION = 1
CHECKPOINT_VERSION = 1

MAGIC_F32 = b"SSPLF32\0"
MAGIC_I32 = b"SSPLI32\0"
MAGIC_CKPT = b"SSPLCKPT"

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i4", 3: "<i8", 4: "|u1"}
_DTYPE_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_rays(self):
        """(H, W, 3) camera-frame directions with z = 1 for every pixel center."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy,
                         np.ones_like(u)], axis=-1)


@dataclass
class MaskRecord:
    pixels: np.ndarray          # (H, W) bool
    label_id: int
    embedding: np.ndarray       # (D,) unit vector
    layer: int = 0


@dataclass
class FrameRecord:
    rgb: np.ndarray             # (H, W, 3) in [0, 1]
    pointmap: np.ndarray        # (H, W, 3) camera-frame points
    confidence: np.ndarray      # (H, W) >= 0
    masks: list = field(default_factory=list)
    gt_pose: np.ndarray = None  # world <- camera, 4x4

    def mask_layer(self, layer):
        """Int32 label image for one granularity layer."""
        out = np.zeros(self.confidence.shape, dtype=np.int32)
        for m in self.masks:
            if m.layer == layer:
                out[m.pixels] = m.label_id
        return out

    @property
    def n_layers(self):
        return 1 + max((m.layer for m in self.masks), default=-1)


@dataclass
class SceneDataset:
    frames: list
    camera: Intrinsics
    embedding_dim: int
    class_table: dict = None
    original_size: tuple = None

    def __len__(self):
        return len(self.frames)

    def label_embeddings(self):
        """Mean (renormalized) embedding per label id across all frames."""
        acc = {}
        for fr in self.frames:
            for m in fr.masks:
                acc.setdefault(m.label_id, []).append(np.asarray(m.embedding, dtype=np.float64))
        out = {}
        for k, vs in sorted(acc.items()):
            v = np.mean(vs, axis=0)
            out[k] = v / np.linalg.norm(v)
        return out

    def validate(self):
        H, W = self.camera.height, self.camera.width
        D = self.embedding_dim
        if D < 1:
            raise ValidationError("embedding dimension must be positive")
        for i, fr in enumerate(self.frames):
            validate_frame(fr, H, W, D, where=f"frame {i}")


def validate_frame(fr, H, W, D, where="frame"):
    if fr.rgb.shape != (H, W, 3):
        raise FormatError(f"{where}: rgb shape {fr.rgb.shape} != {(H, W, 3)}")
    if fr.pointmap.shape != (H, W, 3):
        raise FormatError(f"{where}: pointmap shape {fr.pointmap.shape} != {(H, W, 3)}")
    if fr.confidence.shape != (H, W):
        raise FormatError(f"{where}: confidence shape {fr.confidence.shape} != {(H, W)}")
    if not (np.all(fr.rgb >= 0.0) and np.all(fr.rgb <= 1.0)):
        raise ValidationError(f"{where}: rgb outside [0, 1]")
    if np.any(fr.confidence < 0) or not np.all(np.isfinite(fr.confidence)):
        raise ValidationError(f"{where}: negative or non-finite confidence")
    conf = fr.confidence > 0
    if np.any(fr.pointmap[..., 2][conf] <= 0):
        raise ValidationError(f"{where}: pointmap depth must be > 0 where confidence > 0")
    seen = set()
    for m in fr.masks:
        if m.label_id in seen:
            raise ValidationError(f"{where}: duplicate mask label {m.label_id}")
        seen.add(m.label_id)
        if m.pixels.shape != (H, W):
            raise FormatError(f"{where}: mask {m.label_id} shape {m.pixels.shape}")
        if not m.pixels.any():
            raise ValidationError(f"{where}: mask {m.label_id} is empty")
        e = np.asarray(m.embedding, dtype=np.float64)
        if e.shape != (D,):
            raise ValidationError(f"{where}: mask {m.label_id} embedding has length "
                                  f"{e.shape[0] if e.ndim else 0}, expected {D}")
        if abs(np.linalg.norm(e) - 1.0) > 1e-6:
            raise ValidationError(f"{where}: mask {m.label_id} embedding is not unit norm")
    if fr.gt_pose is not None:
        T = np.asarray(fr.gt_pose)
        if T.shape != (4, 4):
            raise FormatError(f"{where}: gt_pose must be 4x4")


# --------------------------------------------------------------------------
# raw arrays

def write_array(path, arr):
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        magic, data = MAGIC_F32, arr.astype("<f4")
    elif arr.dtype.kind in "iub":
        magic, data = MAGIC_I32, arr.astype("<i4")
    else:
        raise ValidationError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_array(path):
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    magic = raw[:8]
    if magic == MAGIC_F32:
        dtype = np.dtype("<f4")
    elif magic == MAGIC_I32:
        dtype = np.dtype("<i4")
    else:
        raise FormatError(f"{path}: bad magic {magic!r}")
    (ndim,) = struct.unpack_from("<I", raw, 8)
    off = 12 + 4 * ndim
    if len(raw) < off:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", raw, 12)
    n = int(np.prod(dims)) if ndim else 1
    if len(raw) != off + n * dtype.itemsize:
        raise FormatError(f"{path}: payload has {len(raw) - off} bytes, "
                          f"expected {n * dtype.itemsize}")
    return np.frombuffer(raw, dtype=dtype, offset=off, count=n).reshape(dims).copy()


# --------------------------------------------------------------------------
# scenes

def save_scene(scene, out_dir):
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    cam = scene.camera
    frames = []
    for i, fr in enumerate(scene.frames):
        stem = f"frames/{i:06d}"
        entry = {"rgb": f"{stem}_rgb.bin", "pointmap": f"{stem}_pointmap.bin",
                 "confidence": f"{stem}_conf.bin", "mask_layers": [],
                 "embeddings": f"{stem}_emb.bin", "embedding_labels": f"{stem}_emb_labels.bin"}
        write_array(out / entry["rgb"], fr.rgb)
        write_array(out / entry["pointmap"], fr.pointmap)
        write_array(out / entry["confidence"], fr.confidence)
        for layer in range(fr.n_layers):
            name = f"{stem}_mask{layer}.bin"
            write_array(out / name, fr.mask_layer(layer))
            entry["mask_layers"].append(name)
        emb = np.array([m.embedding for m in fr.masks], dtype=np.float32).reshape(
            len(fr.masks), scene.embedding_dim)
        write_array(out / entry["embeddings"], emb)
        write_array(out / entry["embedding_labels"],
                    np.array([m.label_id for m in fr.masks], dtype=np.int32))
        if fr.gt_pose is not None:
            entry["gt_pose"] = np.asarray(fr.gt_pose, dtype=np.float64).tolist()
        frames.append(entry)
    manifest = {
        "version": SCENE_VERSION,
        "width": cam.width, "height": cam.height,
        "intrinsics": [cam.fx, cam.fy, cam.cx, cam.cy],
        "D": scene.embedding_dim,
        "frames": frames,
    }
    if scene.class_table:
        manifest["class_table"] = {str(k): v for k, v in sorted(scene.class_table.items())}
    if scene.original_size:
        manifest["original_size"] = list(scene.original_size)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out / "manifest.json"


def load_scene(manifest_path):
    """Load and validate a scene from a manifest file or scene directory."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        man = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if man.get("version") != SCENE_VERSION:
        raise FormatError(f"unsupported scene version {man.get('version')}")
    root = path.parent
    W, H = int(man["width"]), int(man["height"])
    fx, fy, cx, cy = (float(v) for v in man["intrinsics"])
    cam = Intrinsics(fx, fy, cx, cy, W, H)
    D = int(man["D"])
    frames = []
    for i, entry in enumerate(man["frames"]):
        rgb = read_array(root / entry["rgb"])
        pm = read_array(root / entry["pointmap"])
        conf = read_array(root / entry["confidence"])
        emb = read_array(root / entry["embeddings"])
        labels = read_array(root / entry["embedding_labels"])
        layers = [read_array(root / name) for name in entry.get("mask_layers", [])]
        if emb.ndim != 2 or emb.shape[0] != labels.shape[0]:
            raise FormatError(f"frame {i}: embedding table shape {emb.shape} vs "
                              f"{labels.shape[0]} labels")
        if emb.shape[0] and emb.shape[1] != D:
            raise ValidationError(f"frame {i}: embedding length {emb.shape[1]}, expected {D}")
        table = {int(l): e for l, e in zip(labels, emb)}
        masks = []
        for li, img in enumerate(layers):
            if img.shape != (H, W):
                raise FormatError(f"frame {i}: mask layer {li} shape {img.shape}")
            for lab in np.unique(img):
                if lab == 0:
                    continue
                if int(lab) not in table:
                    raise ValidationError(f"frame {i}: mask label {lab} has no embedding")
                masks.append(MaskRecord(img == lab, int(lab), table[int(lab)], li))
        pose = entry.get("gt_pose")
        fr = FrameRecord(rgb, pm, conf, masks,
                         None if pose is None else np.array(pose, dtype=np.float64))
        validate_frame(fr, H, W, D, where=f"frame {i}")
        listed = {m.label_id for m in masks}
        if set(table) - listed:
            raise ValidationError(f"frame {i}: embeddings for labels with empty masks: "
                                  f"{sorted(set(table) - listed)}")
        frames.append(fr)
    ct = man.get("class_table")
    return SceneDataset(frames, cam, D,
                        {int(k): v for k, v in ct.items()} if ct else None,
                        tuple(man["original_size"]) if "original_size" in man else None)


def resize_labels_nearest(labels, height, width):
    """Nearest-neighbour resize for label images; never blends ids."""
    h, w = labels.shape
    rows = np.minimum((np.arange(height) + 0.5) * h / height, h - 1).astype(int)
    cols = np.minimum((np.arange(width) + 0.5) * w / width, w - 1).astype(int)
    return labels[rows[:, None], cols[None, :]]


# --------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    gaussians: GaussianMap
    memory_bank: np.ndarray                    # (M, D)
    projection: np.ndarray                     # (D, d)
    optimizer_state: dict = field(default_factory=dict)   # name -> array
    config: dict = field(default_factory=dict)
    seed: int = 0
    extras: dict = field(default_factory=dict)            # name -> array

    def validate(self):
        d = self.gaussians.feature_dim
        if self.projection.ndim != 2 or self.projection.shape[1] != d:
            raise ValidationError(f"projection shape {self.projection.shape} incompatible "
                                  f"with feature dim {d}")
        if self.memory_bank.ndim != 2:
            raise ValidationError("memory bank must be a matrix")
        if len(self.memory_bank) and self.memory_bank.shape[1] != self.projection.shape[0]:
            raise ValidationError(f"memory bank width {self.memory_bank.shape[1]} != "
                                  f"projection rows {self.projection.shape[0]}")

    def arrays(self):
        """Named arrays in on-disk order."""
        out = [(f"gaussians.{n}", getattr(self.gaussians, n)) for n in PARAM_NAMES]
        out.append(("memory_bank", self.memory_bank))
        out.append(("projection", self.projection))
        out += [(f"optimizer.{k}", v) for k, v in sorted(self.optimizer_state.items())]
        out += [(f"extras.{k}", v) for k, v in sorted(self.extras.items())]
        return out


def _pack_array(name, arr):
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    le = arr.astype(arr.dtype.newbyteorder("<"))
    code = _DTYPE_CODES.get(le.dtype.str)
    if code is None:
        raise ValidationError(f"{name}: unsupported dtype {arr.dtype}")
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, le.ndim)
    head += struct.pack(f"<{le.ndim}I", *le.shape)
    return head + np.ascontiguousarray(le).tobytes()


def save_checkpoint(ckpt, path):
    """Write a checkpoint.

    Layout: magic ``SSPLCKPT`` | u32 version | u64 seed | u32 n | config JSON
    (n bytes, sorted keys) | u32 array count | arrays. Each array is
    u16 name length, name, u8 dtype code, u8 ndim, u32 dims, raw data.
    Array order: gaussian attributes (means, quats, log_scales,
    opacity_logits, color_logits, features), memory_bank, projection,
    optimizer entries sorted by name, extras sorted by name.
    """
    ckpt.validate()
    cfg = json.dumps(ckpt.config, sort_keys=True).encode()
    arrays = ckpt.arrays()
    parts = [MAGIC_CKPT, struct.pack("<IQI", CHECKPOINT_VERSION, int(ckpt.seed), len(cfg)), cfg,
             struct.pack("<I", len(arrays))]
    parts += [_pack_array(n, a) for n, a in arrays]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC_CKPT:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, seed, ncfg = struct.unpack_from("<IQI", raw, 8)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: checkpoint version {version}, "
                              f"expected {CHECKPOINT_VERSION}")
        off = 8 + 16
        config = json.loads(raw[off:off + ncfg].decode())
        off += ncfg
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode()
            off += nlen
            code, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            dims = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            dtype = np.dtype(_DTYPES[code])
            n = int(np.prod(dims)) if ndim else 1
            nbytes = n * dtype.itemsize
            if off + nbytes > len(raw):
                raise FormatError(f"{path}: truncated array {name}")
            arrays[name] = np.frombuffer(raw, dtype=dtype, offset=off, count=n).reshape(dims).copy()
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    gmap = GaussianMap(**{n: arrays.pop(f"gaussians.{n}") for n in PARAM_NAMES})
    opt = {k[len("optimizer."):]: arrays.pop(k) for k in list(arrays) if k.startswith("optimizer.")}
    extras = {k[len("extras."):]: arrays.pop(k) for k in list(arrays) if k.startswith("extras.")}
    ckpt = Checkpoint(gmap, arrays.pop("memory_bank"), arrays.pop("projection"),
                      opt, config, int(seed), extras)
    ckpt.validate()
    return ckpt


# --------------------------------------------------------------------------
# metrics / logs

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def write_metrics_csv(rows, path, columns=None):
    """Write rows of dicts sharing one column set; reals get 6 significant digits."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    cols = list(columns)
    for r in rows:
        if set(r.keys()) != set(cols):
            raise ValidationError(f"row columns {sorted(r)} differ from {sorted(cols)}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        conv = {}
        for k, v in r.items():
            try:
                conv[k] = float(v)
            except ValueError:
                conv[k] = v
        out.append(conv)
    return out


def write_ppm(path, image):
    """Binary P6 export of an (H, W, 3) image in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise FormatError(f"{path}: not a binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=m.end())
    return data.reshape(h, w, 3).astype(np.float64) / 255.0
