"""Evaluation: novel-view rendering quality, segmentation IoU and trajectory error."""
from dataclasses import asdict, dataclass

import numpy as np

from . import geometry
from .errors import ConfigError, InsufficientDataError
from .objectives import psnr, ssim
from .semantic_memory import direct_readout, readout
from .splatting import render


@dataclass
class EvalReport:
    psnr: float = float("nan")
    ssim: float = float("nan")
    miou: float = float("nan")
    fwiou: float = float("nan")
    acc: float = float("nan")
    ate_rmse: float = float("nan")
    n_eval_frames: int = 0

    def row(self):
        return asdict(self)


def heldout_frames(trajectory, stride=1):
    """Frames that were never used for supervision, every ``stride``-th one."""
    idx = np.nonzero(~trajectory.supervision & ~trajectory.skipped)[0]
    return idx[::stride]


def eval_render(gmap, poses, scene, frames):
    """Mean PSNR and SSIM of renders at the estimated poses of ``frames``."""
    ps, ss = [], []
    for f in frames:
        out = render(gmap, geometry.invert(poses[f]), scene.camera)
        gt = scene.frames[f].rgb.astype(np.float64)
        ps.append(psnr(out.color, gt))
        ss.append(ssim(out.color, gt))
    if not ps:
        return float("nan"), float("nan")
    return float(np.mean(ps)), float(np.mean(ss))


def confusion_counts(pred, gt, labels):
    """(K, K) counts of (gt class, predicted class); pixels with gt 0 are ignored."""
    labels = np.asarray(labels)
    lut = {int(v): i for i, v in enumerate(labels)}
    g = np.asarray(gt).reshape(-1)
    p = np.asarray(pred).reshape(-1)
    sel = g != 0
    gi = np.array([lut.get(int(v), -1) for v in g[sel]], dtype=np.int64)
    pi = np.array([lut.get(int(v), -1) for v in p[sel]], dtype=np.int64)
    ok = (gi >= 0) & (pi >= 0)
    K = len(labels)
    conf = np.zeros((K, K), dtype=np.int64)
    np.add.at(conf, (gi[ok], pi[ok]), 1)
    # a prediction outside the label set is a false negative for the gt class
    miss = (gi >= 0) & (pi < 0)
    return conf, int(miss.sum()), np.bincount(gi[miss], minlength=K)


def segmentation_scores(conf, extra_fn=None):
    """mIoU, FWIoU and pixel accuracy from a confusion matrix.

    ``extra_fn`` adds per-class false negatives that have no predicted class.
    mIoU averages over classes present in the ground truth or the prediction.
    """
    conf = np.asarray(conf, dtype=np.float64)
    fn_extra = np.zeros(len(conf)) if extra_fn is None else np.asarray(extra_fn, dtype=np.float64)
    tp = np.diag(conf)
    gt_count = conf.sum(axis=1) + fn_extra
    pred_count = conf.sum(axis=0)
    union = gt_count + pred_count - tp
    total = gt_count.sum()
    if total == 0:
        return float("nan"), float("nan"), float("nan")
    present = union > 0
    iou = np.where(present, tp / np.maximum(union, 1), 0.0)
    miou = float(iou[present].mean())
    freq = gt_count / total
    fwiou = float(np.sum(freq * iou))
    acc = float(tp.sum() / total)
    return miou, fwiou, acc


def label_image(frame, layer):
    H, W = frame.rgb.shape[:2]
    img = np.zeros((H, W), dtype=np.int64)
    for m in frame.masks:
        if getattr(m, "layer", 0) == layer:
            img[m.pixels] = m.label_id
    return img


def predict_labels(feature_map, queries, bank=None, projection=None, temperature=1.0,
                   head=None, classes=None):
    """Per-pixel label ids from rendered features.

    Open-set: argmax cosine between the read-out embedding and each query.
    Closed-set (``head`` given): argmax of the linear head over ``classes``.
    """
    H, W, d = feature_map.shape
    F = feature_map.reshape(-1, d)
    if head is not None:
        return np.asarray(classes)[np.argmax(F @ head.T, axis=1)].reshape(H, W)
    if not queries:
        raise ConfigError("empty query set")
    ids = np.array(sorted(queries))
    Q = np.stack([queries[k] for k in ids])
    Q = Q / np.linalg.norm(Q, axis=1, keepdims=True)
    pred = readout(F, bank, projection, temperature) if bank is not None else direct_readout(F, projection)
    pred = pred / np.maximum(np.linalg.norm(pred, axis=1, keepdims=True), 1e-8)
    return ids[np.argmax(pred @ Q.T, axis=1)].reshape(H, W)


def eval_segmentation(gmap, poses, scene, frames, queries, bank=None, projection=None,
                      temperature=1.0, layer=0, head=None, classes=None):
    """mIoU, FWIoU and accuracy accumulated over ``frames``."""
    if head is None and not queries:
        raise ConfigError("empty query set")
    labels = np.array(sorted(queries)) if head is None else np.asarray(classes)
    K = len(labels)
    conf = np.zeros((K, K), dtype=np.int64)
    fn_extra = np.zeros(K, dtype=np.int64)
    for f in frames:
        out = render(gmap, geometry.invert(poses[f]), scene.camera)
        pred = predict_labels(out.feature, queries, bank, projection, temperature, head, classes)
        c, _, extra = confusion_counts(pred, label_image(scene.frames[f], layer), labels)
        conf += c
        fn_extra += extra
    return segmentation_scores(conf, fn_extra)


def umeyama_rigid(src, dst):
    """Rotation and translation minimizing sum |R src + t - dst|^2 (scale fixed to 1)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    Sigma = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(Sigma)
    Sfix = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        Sfix[2, 2] = -1.0
    R = U @ Sfix @ Vt
    return R, mu_d - R @ mu_s


def eval_ate(est_poses, gt_poses):
    """RMSE of camera positions after rigid alignment of the estimate onto the ground truth."""
    est = np.asarray(est_poses, dtype=np.float64)
    gt = np.asarray(gt_poses, dtype=np.float64)
    if len(est) != len(gt):
        raise InsufficientDataError("trajectories differ in length")
    if len(est) < 3:
        raise InsufficientDataError("need at least 3 poses")
    p, q = est[:, :3, 3], gt[:, :3, 3]
    R, t = umeyama_rigid(p, q)
    res = p @ R.T + t - q
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


def evaluate_run(result, scene, cfg):
    """Full :class:`EvalReport` for a finished run."""
    traj = result.trajectory
    frames = heldout_frames(traj, cfg.holdout_stride)
    rep = EvalReport(n_eval_frames=int(len(frames)))
    rep.psnr, rep.ssim = eval_render(result.gaussians, traj.poses, scene, frames)
    classes = np.asarray(result.classes)
    if cfg.closed_set:
        rep.miou, rep.fwiou, rep.acc = eval_segmentation(
            result.gaussians, traj.poses, scene, frames, None, layer=cfg.eval_layer,
            head=result.head, classes=classes)
    else:
        emb = scene.label_embeddings()
        queries = {int(k): emb[int(k)] for k in classes if int(k) in emb}
        bank = result.bank if cfg.use_memory else None
        rep.miou, rep.fwiou, rep.acc = eval_segmentation(
            result.gaussians, traj.poses, scene, frames, queries, bank, result.projection,
            cfg.temperature, cfg.eval_layer)
    gts = [fr.gt_pose for fr in scene.frames]
    if all(g is not None for g in gts) and len(gts) >= 3:
        rep.ate_rmse = eval_ate(traj.poses, np.stack(gts))
    return rep
