"""Ray-based correspondence search and robust SE(3) pose optimization.

Correspondences pair a target point (expressed in the reference camera) with
the reference pixel whose pointmap ray points the same way. Pose tracking
then minimizes the Huber-robustified, confidence-weighted difference of unit
rays with Gauss-Newton on the SE(3) tangent space.
"""
from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import DegenerateGeometryError, DegenerateRayError, InsufficientMatchesError


@dataclass
class TrackerConfig:
    huber_delta: float = 0.01
    sigma_r: float = 1.0
    max_iters: int = 50
    tol: float = 1e-8
    keyframe_threshold: float = 0.7
    grid_stride: int = 4
    mapping_interval: int = 10
    min_matches: int = 6
    residual_floor: float = 1e-10   # squared ray errors below this always survive filtering

    def validate(self):
        for name in ("huber_delta", "sigma_r", "max_iters", "tol", "keyframe_threshold",
                     "grid_stride", "mapping_interval"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrackerConfig.{name} must be positive")


@dataclass
class Correspondence:
    ref_pixel: np.ndarray   # (u, v) continuous coordinates in the reference frame
    target_index: int
    q_match: float
    residual: float


@dataclass
class Matches:
    """Struct-of-arrays list of :class:`Correspondence`."""
    ref_pixels: np.ndarray   # (n, 2)
    target_index: np.ndarray  # (n,)
    q_match: np.ndarray       # (n,)
    residual: np.ndarray      # (n,) squared ray error

    def __len__(self):
        return len(self.target_index)

    def __getitem__(self, i):
        return Correspondence(self.ref_pixels[i], int(self.target_index[i]),
                              float(self.q_match[i]), float(self.residual[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


@dataclass
class PoseEstimate:
    T_kf: np.ndarray
    iterations: int
    cost: float


@dataclass
class KeyframeDecision:
    is_keyframe: bool
    is_mapping_frame: bool
    match_fraction: float


def normalize_ray(x):
    """Unit vector(s) along ``x``; works on (3,) or (..., 3) arrays."""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise DegenerateRayError("cannot normalize a zero-length ray")
    return x / n


def _bilinear(pm, u, v):
    """Bilinear sample of an (H, W, 3) map at continuous (u, v); also returns d/du, d/dv
    and whether all four corners are usable."""
    H, W = pm.shape[:2]
    x0 = np.clip(np.floor(u).astype(int), 0, W - 2)
    y0 = np.clip(np.floor(v).astype(int), 0, H - 2)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]
    p00, p01 = pm[y0, x0], pm[y0, x0 + 1]
    p10, p11 = pm[y0 + 1, x0], pm[y0 + 1, x0 + 1]
    val = (1 - fy) * ((1 - fx) * p00 + fx * p01) + fy * ((1 - fx) * p10 + fx * p11)
    du = (1 - fy) * (p01 - p00) + fy * (p11 - p10)
    dv = (1 - fx) * (p10 - p00) + fx * (p11 - p01)
    return val, du, dv, x0, y0


def sample_pointmap(pm, pixels):
    """Bilinearly interpolated pointmap values at continuous (u, v) pixels."""
    pixels = np.asarray(pixels, dtype=np.float64)
    return _bilinear(np.asarray(pm, dtype=np.float64), pixels[:, 0], pixels[:, 1])[0]


def match_rays(pointmap_ref, target_points, conf_ref, conf_target, cfg=None):
    """For each target point find the reference pixel whose ray matches it best.

    ``target_points``/``conf_target`` may be (H, W, 3)/(H, W) maps or flat
    (n, 3)/(n,) arrays; ``target_index`` refers to the flattened order.
    """
    cfg = cfg or TrackerConfig()
    pm = np.asarray(pointmap_ref, dtype=np.float64)
    H, W = pm.shape[:2]
    cref = np.asarray(conf_ref, dtype=np.float64)
    tgt = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    ctgt = np.asarray(conf_target, dtype=np.float64).reshape(-1)
    valid_ref = (cref > 0) & (np.linalg.norm(pm, axis=-1) > 1e-12)
    tnorm = np.linalg.norm(tgt, axis=1)
    tidx = np.nonzero((ctgt > 0) & (tnorm > 1e-12))[0]
    if tidx.size < cfg.min_matches or valid_ref.sum() < cfg.min_matches:
        raise InsufficientMatchesError("not enough confident points to match")
    trays = tgt[tidx] / tnorm[tidx, None]

    # coarse grid search over valid reference pixels
    s = cfg.grid_stride
    gy, gx = np.mgrid[0:H:s, 0:W:s]
    gsel = valid_ref[gy, gx]
    gy, gx = gy[gsel], gx[gsel]
    if gy.size == 0:
        gy, gx = np.nonzero(valid_ref)
    crays = pm[gy, gx]
    crays = crays / np.linalg.norm(crays, axis=1, keepdims=True)
    best = np.empty(tidx.size, dtype=int)
    for start in range(0, tidx.size, 4096):
        best[start:start + 4096] = np.argmax(trays[start:start + 4096] @ crays.T, axis=1)
    u = gx[best].astype(np.float64)
    v = gy[best].astype(np.float64)

    # local Gauss-Newton descent on the continuous pixel grid
    active = np.ones(tidx.size, dtype=bool)
    for _ in range(10):
        a = np.nonzero(active)[0]
        if a.size == 0:
            break
        X, dXu, dXv, x0, y0 = _bilinear(pm, u[a], v[a])
        corners_ok = (valid_ref[y0, x0] & valid_ref[y0, x0 + 1]
                      & valid_ref[y0 + 1, x0] & valid_ref[y0 + 1, x0 + 1])
        nX = np.linalg.norm(X, axis=1, keepdims=True)
        corners_ok &= nX[:, 0] > 1e-12
        nX = np.maximum(nX, 1e-12)
        psi = X / nX
        r = psi - trays[a]
        P = np.eye(3)[None] - psi[:, :, None] * psi[:, None, :]
        Ju = np.einsum("nij,nj->ni", P, dXu) / nX
        Jv = np.einsum("nij,nj->ni", P, dXv) / nX
        JtJ = np.stack([np.stack([(Ju * Ju).sum(1), (Ju * Jv).sum(1)], 1),
                        np.stack([(Ju * Jv).sum(1), (Jv * Jv).sum(1)], 1)], 1)
        JtJ += 1e-9 * np.eye(2)[None]
        Jtr = np.stack([(Ju * r).sum(1), (Jv * r).sum(1)], 1)
        step = -np.linalg.solve(JtJ, Jtr[..., None])[..., 0]
        step[~corners_ok] = 0.0
        nu = np.clip(u[a] + step[:, 0], 0.0, W - 1.0)
        nv = np.clip(v[a] + step[:, 1], 0.0, H - 1.0)
        moved = np.hypot(nu - u[a], nv - v[a])
        u[a], v[a] = nu, nv
        active[a[(moved < 0.01) | ~corners_ok]] = False

    X = _bilinear(pm, u, v)[0]
    nX = np.linalg.norm(X, axis=1)
    ok = nX > 1e-12
    resid = np.full(tidx.size, np.inf)
    resid[ok] = np.sum((X[ok] / nX[ok, None] - trays[ok]) ** 2, axis=1)
    ui = np.clip(np.rint(u).astype(int), 0, W - 1)
    vi = np.clip(np.rint(v).astype(int), 0, H - 1)
    q = np.sqrt(cref[vi, ui] * ctgt[tidx])

    finite = np.isfinite(resid)
    if finite.sum() == 0:
        raise InsufficientMatchesError("no valid ray matches")
    med_r = np.median(resid[finite])
    med_q = np.median(q[finite])
    keep = finite & (resid <= max(2.0 * med_r, cfg.residual_floor)) & (q >= 0.1 * med_q) & (q > 0)
    if keep.sum() < cfg.min_matches:
        raise InsufficientMatchesError(f"only {int(keep.sum())} matches survived filtering")
    return Matches(np.stack([u[keep], v[keep]], axis=1), tidx[keep], q[keep], resid[keep])


def _huber(e, delta):
    return np.where(e <= delta, 0.5 * e * e, delta * (e - 0.5 * delta))


def ray_cost(T, q, points_f, points_k, cfg):
    """Robust ray error of pose ``T`` (frame -> keyframe)."""
    y = geometry.transform(T, points_f)
    r = (normalize_ray(points_k) - normalize_ray(y)) * (np.sqrt(q) / cfg.sigma_r)[:, None]
    return float(np.sum(_huber(np.linalg.norm(r, axis=1), cfg.huber_delta)))


def optimize_pose(matches, points_f, points_k, T_init, cfg=None):
    """Gauss-Newton with backtracking on the robust, confidence-weighted ray error.

    ``matches`` supplies the match confidences; ``points_f``/``points_k`` are the
    matched 3D points in the frame and keyframe cameras, row-aligned with it.
    """
    cfg = cfg or TrackerConfig()
    q = np.asarray(matches.q_match if hasattr(matches, "q_match") else matches, dtype=np.float64)
    pf = np.asarray(points_f, dtype=np.float64)
    pk = np.asarray(points_k, dtype=np.float64)
    if len(q) < cfg.min_matches:
        raise InsufficientMatchesError(f"need at least {cfg.min_matches} matches, got {len(q)}")
    target = normalize_ray(pk)
    scale = np.sqrt(q) / cfg.sigma_r
    T = np.array(T_init, dtype=np.float64)
    cost = ray_cost(T, q, pf, pk, cfg)
    it = 0
    for it in range(1, cfg.max_iters + 1):
        y = geometry.transform(T, pf)
        ny = np.linalg.norm(y, axis=1)
        psi = y / ny[:, None]
        r = (target - psi) * scale[:, None]
        e = np.linalg.norm(r, axis=1)
        w = np.where(e <= cfg.huber_delta, 1.0, cfg.huber_delta / np.maximum(e, 1e-300))
        P = (np.eye(3)[None] - psi[:, :, None] * psi[:, None, :]) / ny[:, None, None]
        dy = np.zeros((len(y), 3, 6))
        dy[:, :, :3] = np.eye(3)
        dy[:, 0, 4], dy[:, 0, 5] = y[:, 2], -y[:, 1]
        dy[:, 1, 3], dy[:, 1, 5] = -y[:, 2], y[:, 0]
        dy[:, 2, 3], dy[:, 2, 4] = y[:, 1], -y[:, 0]
        J = -scale[:, None, None] * (P @ dy)
        Hm = np.einsum("n,nki,nkj->ij", w, J, J)
        b = np.einsum("n,nki,nk->i", w, J, r)
        step = _solve(Hm, b)
        if np.linalg.norm(step) < cfg.tol:
            break
        accepted = False
        alpha = 1.0
        for _ in range(30):
            T_new = geometry.se3_exp(alpha * step) @ T
            c_new = ray_cost(T_new, q, pf, pk, cfg)
            if c_new <= cost:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        T, cost = T_new, c_new
        if np.linalg.norm(alpha * step) < cfg.tol:
            break
    # re-orthonormalize the rotation
    U, _, Vt = np.linalg.svd(T[:3, :3])
    T[:3, :3] = U @ Vt
    return PoseEstimate(T, it, cost)


def _solve(Hm, b):
    try:
        if np.linalg.cond(Hm) < 1e12:
            return -np.linalg.solve(Hm, b)
    except np.linalg.LinAlgError:
        pass
    damped = Hm + 1e-6 * np.trace(Hm) * np.eye(6)
    try:
        if np.linalg.cond(damped) < 1e14:
            return -np.linalg.solve(damped, b)
    except np.linalg.LinAlgError:
        pass
    raise DegenerateGeometryError("normal equations are singular")


def keyframe_decision(frame_index, last_selected_index, match_fraction, cfg=None):
    """Keyframe when overlap with the current keyframe drops below the threshold;
    otherwise a mapping frame once ``mapping_interval`` frames passed without a selection."""
    cfg = cfg or TrackerConfig()
    is_kf = match_fraction < cfg.keyframe_threshold
    since = frame_index - last_selected_index
    is_map = (not is_kf) and since >= cfg.mapping_interval and since % cfg.mapping_interval == 0
    return KeyframeDecision(bool(is_kf), bool(is_map), float(match_fraction))


def match_fraction(matches, conf_ref):
    """Unique matched reference pixels over confident reference pixels."""
    H, W = np.asarray(conf_ref).shape
    n_conf = int(np.count_nonzero(np.asarray(conf_ref) > 0))
    if n_conf == 0:
        return 0.0
    ui = np.clip(np.rint(matches.ref_pixels[:, 0]).astype(int), 0, W - 1)
    vi = np.clip(np.rint(matches.ref_pixels[:, 1]).astype(int), 0, H - 1)
    return min(1.0, np.unique(vi * W + ui).size / n_conf)


def write_trajectory(path, poses, keyframe_flags):
    """One line per frame: ``idx tx ty tz qx qy qz qw kf_flag``."""
    with open(path, "w") as fh:
        for i, (T, kf) in enumerate(zip(poses, keyframe_flags)):
            w, x, y, z = geometry.rot_to_quat(T[:3, :3])
            t = T[:3, 3]
            fh.write(f"{i} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f} {int(kf)}\n")


def read_trajectory(path):
    poses, flags = [], []
    for line in open(path):
        parts = line.split()
        if not parts:
            continue
        tx, ty, tz, qx, qy, qz, qw = map(float, parts[1:8])
        R = geometry.quat_to_rot(np.array([qw, qx, qy, qz]))
        poses.append(geometry.make_pose(R, [tx, ty, tz]))
        flags.append(bool(int(parts[8])))
    return poses, flags
