"""The SLAM loop: tracking, keyframe and mapping-frame events, map optimization."""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .dataset_io import Checkpoint, Intrinsics
from .errors import (DegenerateGeometryError, DegenerateRayError, EmptyInitError,
                     InsufficientMatchesError, RunFailedError)
from .gaussians import PARAM_NAMES, GaussianMap
from .objectives import (Adam, LossWeights, loss_ce_closed_set, loss_corr, loss_corr_bits,
                         loss_lang, loss_rgb, loss_total, sample_pixels)
from .scale_supervision import build_supervision, compute_levels, level_selection, lift_frame
from .scene_synth import pair_pointmap
from .semantic_memory import (MemoryBank, direct_readout, direct_readout_backward,
                              init_projection, language_targets, masked_embedding, readout,
                              readout_backward)
from .splatting import DEFAULT_SETTINGS, init_from_pointmap, render, render_backward
from .tracking import keyframe_decision, match_fraction, match_rays, optimize_pose, sample_pointmap

log = logging.getLogger(__name__)

TRACKING_ERRORS = (InsufficientMatchesError, DegenerateGeometryError, DegenerateRayError,
                   np.linalg.LinAlgError)


@dataclass
class TrajectoryEstimate:
    poses: np.ndarray               # (N, 4, 4) world <- camera, world = first camera
    keyframe: np.ndarray            # (N,) bool
    mapping: np.ndarray             # (N,) bool
    skipped: np.ndarray             # (N,) bool

    @property
    def supervision(self):
        return self.keyframe | self.mapping


@dataclass
class SupervisionFrame:
    index: int
    view: np.ndarray                # camera <- world
    rgb: np.ndarray
    lifted: list
    sup: object = None
    lang: np.ndarray = None
    lang_valid: np.ndarray = None
    class_index: np.ndarray = None  # (H*W,) index into the class list, -1 where unlabeled


@dataclass
class RunResult:
    gaussians: GaussianMap
    bank: MemoryBank
    projection: np.ndarray
    head: np.ndarray
    trajectory: TrajectoryEstimate
    levels: np.ndarray
    classes: np.ndarray
    loss_log: list = field(default_factory=list)
    optimizer: Adam = None
    events: list = field(default_factory=list)
    camera: Intrinsics = None


# --------------------------------------------------------------------------
# tracking

def _cross_view_points(scene, kf, f, cfg, T_init):
    """Frame ``f``'s points in keyframe ``kf``'s camera."""
    if scene.frames[kf].gt_pose is not None and scene.frames[f].gt_pose is not None:
        return pair_pointmap(scene, kf, f, cfg.pair_noise, seed=cfg.seed)
    return geometry.transform(T_init, scene.frames[f].pointmap.astype(np.float64))


def track_frame(scene, kf, f, T_kf_init, cfg):
    """Pose of frame ``f`` relative to keyframe ``kf`` and the match overlap."""
    ref, cur = scene.frames[kf], scene.frames[f]
    X_kf = _cross_view_points(scene, kf, f, cfg, T_kf_init)
    m = match_rays(ref.pointmap, X_kf, ref.confidence, cur.confidence, cfg.tracker)
    pts_f = cur.pointmap.reshape(-1, 3)[m.target_index].astype(np.float64)
    pts_k = sample_pointmap(ref.pointmap, m.ref_pixels)
    est = optimize_pose(m, pts_f, pts_k, T_kf_init, cfg.tracker)
    return est.T_kf, match_fraction(m, ref.confidence)


def track_sequence(scene, cfg):
    """Track every frame; frame 0 is the first keyframe at the identity."""
    n = len(scene)
    poses = np.zeros((n, 4, 4))
    kf_flags = np.zeros(n, dtype=bool)
    map_flags = np.zeros(n, dtype=bool)
    skipped = np.zeros(n, dtype=bool)
    poses[0] = np.eye(4)
    kf_flags[0] = True
    kf, last_sel = 0, 0
    for f in range(1, n):
        vel = np.eye(4) if f < 2 else poses[f - 1] @ geometry.invert(poses[f - 2])
        pred = vel @ poses[f - 1] if f >= 2 else poses[f - 1]
        T_init = geometry.invert(poses[kf]) @ pred
        try:
            T_kf, frac = track_frame(scene, kf, f, T_init, cfg)
        except TRACKING_ERRORS as exc:
            log.warning("frame %d: tracking failed (%s); pose propagated", f, exc)
            skipped[f] = True
            poses[f] = pred
            if skipped.sum() > cfg.max_skip_fraction * n:
                raise RunFailedError(f"{int(skipped.sum())} of {n} frames failed to track")
            continue
        poses[f] = poses[kf] @ T_kf
        dec = keyframe_decision(f, last_sel, frac, cfg.tracker)
        if dec.is_keyframe:
            kf_flags[f] = True
            kf, last_sel = f, f
        elif dec.is_mapping_frame:
            map_flags[f] = True
            last_sel = f
    return TrajectoryEstimate(poses, kf_flags, map_flags, skipped)


# --------------------------------------------------------------------------
# mapping

def _label_image(frame, layer):
    H, W = frame.rgb.shape[:2]
    img = np.zeros((H, W), dtype=np.int64)
    for m in frame.masks:
        if getattr(m, "layer", 0) == layer:
            img[m.pixels] = m.label_id
    return img


def eval_classes(scene, layer):
    """Sorted label ids present in ``layer`` across the scene."""
    ids = {m.label_id for fr in scene.frames for m in fr.masks if getattr(m, "layer", 0) == layer}
    return np.array(sorted(ids), dtype=np.int64)


def event_budget(n_events, cfg):
    """Iterations per event; the total equals the budget unless overridden."""
    total = cfg.total_iters
    if cfg.iters_per_event > 0:
        out, left = [], total
        for _ in range(n_events):
            k = min(cfg.iters_per_event, left)
            out.append(k)
            left -= k
        return out
    base, rem = divmod(total, n_events)
    return [base + (1 if i < rem else 0) for i in range(n_events)]


def _scene_extent(poses):
    centers = poses[:, :3, 3]
    r = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    return 1.1 * max(r, 1.0)


def run_slam(scene, cfg, progress=None):
    """Track the sequence and optimize the semantic Gaussian map; deterministic per seed."""
    cfg.validate()
    scene.validate()
    intr = scene.camera
    H, W = intr.height, intr.width
    rng = np.random.default_rng(cfg.seed)
    traj = track_sequence(scene, cfg)
    events = [i for i in range(len(scene)) if traj.supervision[i]]
    budget = event_budget(len(events), cfg)

    d, D = cfg.feature_dim, scene.embedding_dim
    classes = eval_classes(scene, cfg.eval_layer)
    class_lookup = {int(c): i for i, c in enumerate(classes)}
    proj_W = init_projection(D, d, rng)
    head = rng.normal(0.0, 1.0 / np.sqrt(d), size=(max(len(classes), 1), d))
    bank = MemoryBank(D)
    gmap = GaussianMap.empty(d)
    extent = _scene_extent(traj.poses)
    lrs = {n: getattr(cfg.lr, n) for n in PARAM_NAMES}
    lrs["means"] *= extent
    lrs["projection"] = cfg.lr.projection
    lrs["head"] = cfg.lr.head
    opt = Adam(lrs)
    weights = LossWeights(cfg.lambda_rgb, cfg.lambda_corr, cfg.lambda_lang, cfg.lambda_ssim,
                          cfg.lambda_ce if cfg.closed_set else 0.0)
    sup_frames, all_scales = [], []
    levels = np.zeros(cfg.n_levels)
    loss_log = []
    it = 0
    for e_idx, (f, n_it) in enumerate(zip(events, budget)):
        frame = scene.frames[f]
        pose = traj.poses[f]
        view = geometry.invert(pose)
        if traj.keyframe[f]:
            allowed = None
            if len(gmap):
                allowed = render(gmap, view, intr).final_transmittance > cfg.coverage_threshold
            try:
                new = init_from_pointmap(frame, pose, intr, cfg.init_stride,
                                         cfg.init_conf_threshold, d, rng, allowed)
                gmap = gmap.concat(new)
            except EmptyInitError:
                log.info("keyframe %d: map already covers the view", f)
            for mi in range(len(frame.masks)):
                if frame.masks[mi].embedding is not None:
                    bank.maybe_insert(masked_embedding(frame, mi), cfg.tau_m, source=(f, mi))
        lifted = lift_frame(frame)
        sf = SupervisionFrame(f, view, frame.rgb.astype(np.float64), lifted)
        if cfg.closed_set:
            lab = _label_image(frame, cfg.eval_layer).reshape(-1)
            sf.class_index = np.array([class_lookup.get(int(v), -1) if v else -1 for v in lab])
        sup_frames.append(sf)
        if traj.keyframe[f] and lifted:
            # levels are global quantiles over keyframe masks, refreshed per keyframe
            all_scales += [m.scale3d for m in lifted]
            levels = compute_levels(all_scales, cfg.n_levels)
            for s in sup_frames[:-1]:
                s.sup = build_supervision(s.lifted, levels, (H, W))
        sf.sup = build_supervision(lifted, levels, (H, W))
        sf.lang, sf.lang_valid = language_targets(sf.sup)
        if len(gmap) == 0:
            continue
        for _ in range(n_it):
            sf_i = sup_frames[int(rng.integers(len(sup_frames)))]
            report, grads, g_proj, g_head = _train_step(gmap, sf_i, intr, cfg, weights, proj_W,
                                                         head, bank, rng)
            params = gmap.params()
            params["projection"] = proj_W
            params["head"] = head
            grads["projection"] = g_proj
            if cfg.closed_set:
                grads["head"] = g_head
            opt.step(params, grads)
            loss_log.append(report.row(it))
            it += 1
        if progress:
            progress(e_idx, len(events), it, loss_log[-1] if loss_log else None)
    return RunResult(gmap, bank, proj_W, head, traj, levels, classes, loss_log, opt, events, intr)


def _train_step(gmap, sf, intr, cfg, weights, proj_W, head, bank, rng):
    H, W = intr.height, intr.width
    d = gmap.feature_dim
    out = render(gmap, sf.view, intr)
    comps = {}
    comps["rgb"], g_color = loss_rgb(out.color, sf.rgb, cfg.lambda_ssim)
    g_color = weights.rgb * g_color
    g_feat = np.zeros((H * W, d))
    g_proj = np.zeros_like(proj_W)
    g_head = np.zeros_like(head)
    feat = out.feature.reshape(-1, d)
    labeled = sf.sup.labeled_pixels()
    pix = sample_pixels(labeled, cfg.n_samples, rng) if labeled.size >= 2 else labeled
    if pix.size >= 2:
        F = feat[pix]
        if weights.corr > 0:
            lv = level_selection(sf.sup.n_levels, cfg.scale_mode)
            bits = sf.sup.level_bitmasks(pix, lv)
            if bits is not None:
                comps["corr"], gF = loss_corr_bits(F, bits)
            else:
                comps["corr"], gF = loss_corr(F, sf.sup.correspondence_matrices(pix, lv))
            g_feat[pix] += weights.corr * gF
        if weights.lang > 0 and (len(bank) or not cfg.use_memory):
            valid = sf.lang_valid[pix]
            if cfg.use_memory:
                pred = readout(F, bank, proj_W, cfg.temperature)
            else:
                pred = direct_readout(F, proj_W)
            comps["lang"], gP = loss_lang(pred, sf.lang[pix], valid)
            if cfg.use_memory:
                gF, gW = readout_backward(F, bank, proj_W, gP, cfg.temperature)
            else:
                gF, gW = direct_readout_backward(F, proj_W, gP)
            g_feat[pix] += weights.lang * gF
            g_proj += weights.lang * gW
        if weights.ce > 0 and sf.class_index is not None:
            ci = sf.class_index[pix]
            ok = ci >= 0
            comps["ce"], gF, gH = loss_ce_closed_set(F[ok], head, ci[ok])
            g_feat[pix[ok]] += weights.ce * gF
            g_head += weights.ce * gH
    report = loss_total(comps, weights)
    grads = render_backward(gmap, sf.view, intr, g_color, g_feat.reshape(H, W, d),
                            forward=out).as_dict()
    return report, grads, g_proj, g_head


# --------------------------------------------------------------------------
# checkpoints

def to_checkpoint(result, cfg):
    traj = result.trajectory
    extras = {
        "poses": traj.poses,
        "keyframe": traj.keyframe.astype(np.uint8),
        "mapping": traj.mapping.astype(np.uint8),
        "skipped": traj.skipped.astype(np.uint8),
        "head": result.head,
        "levels": result.levels,
        "classes": result.classes,
    }
    if result.camera is not None:
        c = result.camera
        extras["intrinsics"] = np.array([c.fx, c.fy, c.cx, c.cy, c.width, c.height], dtype=np.float64)
    opt_state = result.optimizer.state_arrays() if result.optimizer else {}
    return Checkpoint(result.gaussians, result.bank.entries, result.projection, opt_state,
                      cfg.to_dict(), cfg.seed, extras)


def result_from_checkpoint(ckpt):
    ex = ckpt.extras
    traj = TrajectoryEstimate(ex["poses"], ex["keyframe"].astype(bool), ex["mapping"].astype(bool),
                              ex["skipped"].astype(bool))
    bank = MemoryBank(ckpt.projection.shape[0], ckpt.memory_bank)
    cam = None
    if "intrinsics" in ex:
        fx, fy, cx, cy, w, h = ex["intrinsics"]
        cam = Intrinsics(fx, fy, cx, cy, int(w), int(h))
    return RunResult(ckpt.gaussians, bank, ckpt.projection, ex["head"], traj, ex["levels"],
                     ex["classes"], camera=cam)


__all__ = ["TrajectoryEstimate", "RunResult", "run_slam", "track_sequence", "track_frame",
           "event_budget", "eval_classes", "to_checkpoint", "result_from_checkpoint",
           "DEFAULT_SETTINGS"]
