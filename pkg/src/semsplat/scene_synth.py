"""Synthetic oracle scenes standing in for the visual foundation models.

A scene is a floor plane carrying axis-aligned cuboids and spheres, each cut
into horizontal slabs ("parts"). Every frame is ray-cast from a circular
orbit; the ray cast gives exact camera-frame geometry (the pointmap oracle),
two nested label layers (the mask oracle) and per-label unit vectors (the
language-embedding oracle).
"""
from dataclasses import dataclass

import numpy as np

from . import geometry
from .dataset_io import FrameRecord, Intrinsics, MaskRecord, SceneDataset
from .errors import ConfigError

PART_LAYER = 0
OBJECT_LAYER = 1

_LIGHT = np.array([0.4, 1.0, 0.3]) / np.linalg.norm([0.4, 1.0, 0.3])


@dataclass
class SynthConfig:
    n_objects: int = 4
    parts_per_object: int = 3
    height: int = 96
    width: int = 96
    n_frames: int = 120
    orbit_radius: float = 3.2
    orbit_height: float = 1.8
    angular_span: float = 1.2        # radians swept over the whole sequence
    start_angle: float = 0.3
    focal_scale: float = 1.0         # fx = fy = focal_scale * width
    depth_noise_sigma: float = 0.0
    confidence_floor: float = 0.2
    embedding_dim: int = 32
    embedding_noise: float = 0.0     # per-view perturbation of label embeddings
    floor_extent: float = 4.0
    seed: int = 0

    def validate(self):
        if self.height < 32 or self.width < 32:
            raise ConfigError("image size must be at least 32x32")
        if self.n_objects < 1 or self.parts_per_object < 1:
            raise ConfigError("need at least one object and one part per object")
        if self.n_frames < 1:
            raise ConfigError("need at least one frame")
        if self.depth_noise_sigma < 0 or self.embedding_noise < 0:
            raise ConfigError("noise levels must be non-negative")
        if not self.orbit_radius > 0:
            raise ConfigError("degenerate trajectory: orbit radius must be positive")
        if not 0.0 <= self.confidence_floor <= 1.0:
            raise ConfigError("confidence_floor must lie in [0, 1]")


@dataclass
class _Object:
    kind: str            # "box" or "sphere"
    center: np.ndarray
    half: np.ndarray     # box half extents; sphere uses half[0] as radius
    albedo: np.ndarray   # (parts, 3)

    @property
    def y_range(self):
        return self.center[1] - self.half[1], self.center[1] + self.half[1]


def make_embeddings(n_labels, D, seed=0, max_cos=0.5, max_tries=2000):
    """Unit vectors with all pairwise cosines below ``max_cos`` (rejection sampled)."""
    if n_labels < 1:
        raise ConfigError("n_labels must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_labels):
        for _ in range(max_tries):
            v = rng.standard_normal(D)
            v /= np.linalg.norm(v)
            if not out or np.max(np.asarray(out) @ v) < max_cos:
                out.append(v)
                break
        else:
            raise ConfigError(f"cannot place {n_labels} embeddings in {D} dims with "
                              f"pairwise cosine < {max_cos}")
    return out


def perturb_pose(gt_pose, rot_sigma, trans_sigma, seed=0):
    """Compose ``gt_pose`` with a rotation of angle ``rot_sigma`` about a random axis
    and a translation of length ``trans_sigma`` in a random direction."""
    if rot_sigma < 0 or trans_sigma < 0:
        raise ConfigError("perturbation magnitudes must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    delta = geometry.make_pose(geometry.so3_exp(rot_sigma * axis), trans_sigma * direction)
    return np.asarray(gt_pose, dtype=np.float64) @ delta


def _layout(cfg, rng):
    objs = []
    n = cfg.n_objects
    ring = 0.0 if n == 1 else 1.0
    for i in range(n):
        ang = 2 * np.pi * i / n + rng.uniform(-0.2, 0.2)
        cx, cz = ring * np.cos(ang), ring * np.sin(ang)
        albedo = rng.uniform(0.15, 0.95, size=(cfg.parts_per_object, 3))
        if i % 2 == 0:
            half = np.array([rng.uniform(0.22, 0.35), rng.uniform(0.3, 0.55), rng.uniform(0.22, 0.35)])
            objs.append(_Object("box", np.array([cx, half[1], cz]), half, albedo))
        else:
            r = rng.uniform(0.28, 0.4)
            objs.append(_Object("sphere", np.array([cx, r, cz]), np.array([r, r, r]), albedo))
    return objs


def _orbit_pose(cfg, t):
    frac = 0.0 if cfg.n_frames == 1 else t / (cfg.n_frames - 1)
    ang = cfg.start_angle + cfg.angular_span * frac
    eye = np.array([cfg.orbit_radius * np.cos(ang), cfg.orbit_height,
                    cfg.orbit_radius * np.sin(ang)])
    return geometry.look_at(eye, np.array([0.0, 0.35, 0.0]))


def _raycast(objs, cfg, cam, pose):
    """Nearest hits along every pixel ray. Ray parameter equals camera depth."""
    H, W = cam.height, cam.width
    dirs_c = cam.pixel_rays().reshape(-1, 3)
    R, o = pose[:3, :3], pose[:3, 3]
    d = dirs_c @ R.T
    n_pix = d.shape[0]
    depth = np.full(n_pix, np.inf)
    obj_id = np.full(n_pix, -1)
    normal = np.zeros((n_pix, 3))

    # floor y = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[1] / d[:, 1]
    hit = (d[:, 1] < 0) & (t > 0)
    p = o + t[:, None] * d
    hit &= (np.abs(p[:, 0]) <= cfg.floor_extent) & (np.abs(p[:, 2]) <= cfg.floor_extent)
    depth[hit] = t[hit]
    normal[hit] = (0.0, 1.0, 0.0)

    for k, ob in enumerate(objs):
        if ob.kind == "box":
            lo, hi = ob.center - ob.half, ob.center + ob.half
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                t0 = (lo - o) * inv
                t1 = (hi - o) * inv
            tmin = np.minimum(t0, t1)
            tmax = np.maximum(t0, t1)
            tmin = np.where(np.isnan(tmin), -np.inf, tmin)
            tmax = np.where(np.isnan(tmax), np.inf, tmax)
            tn = tmin.max(axis=1)
            tf = tmax.min(axis=1)
            hit = (tn <= tf) & (tn > 0) & (tn < depth)
            axis = tmin.argmax(axis=1)
            nrm = np.zeros((n_pix, 3))
            nrm[np.arange(n_pix), axis] = -np.sign(d[np.arange(n_pix), axis])
            tk = tn
        else:
            r = ob.half[0]
            oc = o - ob.center
            a = np.einsum("ij,ij->i", d, d)
            b = 2.0 * d @ oc
            c = oc @ oc - r * r
            disc = b * b - 4 * a * c
            with np.errstate(invalid="ignore"):
                tk = (-b - np.sqrt(disc)) / (2 * a)
            hit = (disc >= 0) & (tk > 0) & (tk < depth)
            nrm = (o + tk[:, None] * d - ob.center) / r
        depth[hit] = tk[hit]
        obj_id[hit] = k
        normal[hit] = nrm[hit]

    valid = np.isfinite(depth)
    return (depth.reshape(H, W), obj_id.reshape(H, W), normal.reshape(H, W, 3),
            valid.reshape(H, W), (o + np.where(valid, depth, 0.0)[:, None] * d).reshape(H, W, 3))


def _part_index(ob, y, ppo):
    y0, y1 = ob.y_range
    return np.clip(((y - y0) / (y1 - y0) * ppo).astype(int), 0, ppo - 1)


def object_label(obj_idx):
    return 1 + obj_idx


def part_label(cfg, obj_idx, part_idx):
    return 1 + cfg.n_objects + obj_idx * cfg.parts_per_object + part_idx


def generate_scene(cfg):
    """Render the oracle scene described by ``cfg``; deterministic per seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    objs = _layout(cfg, rng)
    f = cfg.focal_scale * cfg.width
    cam = Intrinsics(f, f, cfg.width / 2.0, cfg.height / 2.0, cfg.width, cfg.height)
    ppo = cfg.parts_per_object
    n_labels = cfg.n_objects * (1 + ppo)
    emb = make_embeddings(n_labels, cfg.embedding_dim, seed=cfg.seed + 1)
    label_emb = {1 + i: e for i, e in enumerate(emb)}
    class_table = {object_label(k): f"object{k}" for k in range(cfg.n_objects)}
    class_table.update({part_label(cfg, k, j): f"object{k}_part{j}"
                        for k in range(cfg.n_objects) for j in range(ppo)})
    floor_albedo = np.array([0.55, 0.5, 0.45])
    noise_rng = np.random.default_rng(cfg.seed + 2)

    frames = []
    for t in range(cfg.n_frames):
        pose = _orbit_pose(cfg, t)
        depth, obj_id, normal, valid, world = _raycast(objs, cfg, cam, pose)
        albedo = np.zeros((cfg.height, cfg.width, 3))
        albedo[valid] = floor_albedo
        part_img = np.zeros((cfg.height, cfg.width), dtype=np.int32)
        obj_img = np.zeros_like(part_img)
        for k, ob in enumerate(objs):
            sel = obj_id == k
            if not sel.any():
                continue
            pidx = _part_index(ob, world[..., 1][sel], ppo)
            albedo[sel] = ob.albedo[pidx]
            obj_img[sel] = object_label(k)
            part_img[sel] = 1 + cfg.n_objects + k * ppo + pidx
        shade = 0.35 + 0.65 * np.clip(normal @ _LIGHT, 0.0, None)
        rgb = np.clip(albedo * shade[..., None], 0.0, 1.0) * valid[..., None]

        eps = noise_rng.standard_normal(depth.shape) * cfg.depth_noise_sigma
        pm = cam.pixel_rays() * np.where(valid, depth, 0.0)[..., None]
        pm = pm * (1.0 + eps)[..., None]
        pm[~valid] = 0.0
        conf = np.where(valid, cfg.confidence_floor
                        + (1.0 - cfg.confidence_floor) * np.exp(-np.abs(eps)), 0.0)

        masks = []
        for layer, img in ((PART_LAYER, part_img), (OBJECT_LAYER, obj_img)):
            for lab in np.unique(img):
                if lab == 0:
                    continue
                e = label_emb[int(lab)]
                if cfg.embedding_noise > 0:
                    e = e + cfg.embedding_noise * noise_rng.standard_normal(e.shape) / np.sqrt(e.size)
                e = (e / np.linalg.norm(e)).astype(np.float32)
                masks.append(MaskRecord(img == lab, int(lab), e, layer))
        frames.append(FrameRecord(rgb.astype(np.float32), pm.astype(np.float32),
                                  conf.astype(np.float32), masks, pose))
    return SceneDataset(frames, cam, cfg.embedding_dim, class_table)


def pair_pointmap(scene, ref_idx, tgt_idx, noise_sigma=0.0, seed=0):
    """Target frame's pointmap expressed in the reference camera frame.

    Stands in for a two-view network prediction: the target's own pointmap is
    moved by the ground-truth relative pose and perturbed by an independent
    multiplicative depth noise.
    """
    ref, tgt = scene.frames[ref_idx], scene.frames[tgt_idx]
    if ref.gt_pose is None or tgt.gt_pose is None:
        raise ConfigError("pair_pointmap needs ground-truth poses")
    T_rt = geometry.invert(ref.gt_pose) @ tgt.gt_pose
    pts = tgt.pointmap.astype(np.float64)
    if noise_sigma > 0:
        rng = np.random.default_rng([seed, ref_idx, tgt_idx])
        pts = pts * (1.0 + noise_sigma * rng.standard_normal(pts.shape[:2]))[..., None]
    return geometry.transform(T_rt, pts)
