import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from semsplat import geometry
from semsplat.dataset_io import FrameRecord, MaskRecord, SceneDataset
from semsplat.errors import ConfigError, InsufficientDataError
from semsplat.metrics import (EvalReport, confusion_counts, eval_ate, eval_render,
                              eval_segmentation, heldout_frames, predict_labels,
                              segmentation_scores, umeyama_rigid)
from semsplat.pipeline import TrajectoryEstimate
from semsplat.splatting import render

from conftest import make_intrinsics, random_map, unit


# --------------------------------------------------------------------------
# segmentation scores

def test_perfect_prediction():
    gt = np.array([[1, 1, 2], [2, 3, 3]])
    conf, miss, _ = confusion_counts(gt, gt, [1, 2, 3])
    assert miss == 0
    assert segmentation_scores(conf) == (1.0, 1.0, 1.0)


def test_half_flipped_single_label():
    gt = np.ones((4, 4), dtype=int)
    pred = gt.copy()
    pred[:2] = 2
    conf, _, _ = confusion_counts(pred, gt, [1, 2])
    miou, fwiou, acc = segmentation_scores(conf)
    assert acc == 0.5
    tp = np.diag(conf)
    iou1 = tp[0] / (conf[0].sum() + conf[:, 0].sum() - tp[0])
    assert iou1 == 0.5
    # label 2 never occurs in the ground truth but is predicted: IoU 0, counted in the mean
    assert miou == pytest.approx(0.25)
    assert fwiou == pytest.approx(0.5)


def test_unlabeled_pixels_ignored():
    gt = np.array([0, 0, 1, 1])
    pred = np.array([2, 2, 1, 1])
    conf, _, _ = confusion_counts(pred, gt, [1, 2])
    assert segmentation_scores(conf)[2] == 1.0


def test_prediction_outside_label_set_is_a_miss():
    gt = np.array([1, 1, 1, 1])
    pred = np.array([1, 1, 9, 9])
    conf, miss, per = confusion_counts(pred, gt, [1, 2])
    assert miss == 2 and list(per) == [2, 0]
    miou, _, acc = segmentation_scores(conf, per)
    assert acc == 0.5 and miou == 0.5


def test_empty_ground_truth():
    conf, _, _ = confusion_counts(np.zeros(4, int), np.zeros(4, int), [1])
    assert all(np.isnan(segmentation_scores(conf)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_scores_in_range_and_fwiou_bounded(seed, K):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, K + 1, size=200)
    pred = np.where(rng.random(200) < 0.6, gt, rng.integers(1, K + 1, size=200))
    labels = np.arange(1, K + 1)
    conf, _, _ = confusion_counts(pred, gt, labels)
    miou, fwiou, acc = segmentation_scores(conf)
    if np.isnan(acc):
        return
    for v in (miou, fwiou, acc):
        assert 0.0 <= v <= 1.0
    tp = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - tp
    present = conf.sum(1) > 0
    iou = tp[present] / union[present]
    assert iou.min() - 1e-12 <= fwiou <= iou.max() + 1e-12


# --------------------------------------------------------------------------
# open-set prediction

def test_predict_labels_by_query_cosine():
    q = {3: unit([1, 0, 0]), 7: unit([0, 1, 0])}
    W = np.eye(3)
    fmap = np.array([[[2.0, 0.1, 0.0], [0.0, 1.0, 0.2]]])
    np.testing.assert_array_equal(predict_labels(fmap, q, None, W), [[3, 7]])
    with pytest.raises(ConfigError):
        predict_labels(fmap, {}, None, W)


def test_predict_labels_closed_set():
    head = np.array([[1.0, 0.0], [0.0, 1.0]])
    fmap = np.array([[[0.1, 2.0], [3.0, 0.0]]])
    np.testing.assert_array_equal(predict_labels(fmap, None, head=head, classes=[5, 6]), [[6, 5]])


# --------------------------------------------------------------------------
# rendering metrics

def _scene_from_map(gmap, intr, poses, D=4):
    frames = []
    for P in poses:
        out = render(gmap, geometry.invert(P), intr)
        m = np.zeros((intr.height, intr.width), dtype=bool)
        m[:, : intr.width // 2] = True
        masks = [MaskRecord(m, 1, unit(np.eye(D)[0])), MaskRecord(~m, 2, unit(np.eye(D)[1]))]
        frames.append(FrameRecord(out.color.copy(), np.ones((intr.height, intr.width, 3)),
                                  np.ones((intr.height, intr.width)), masks, P))
    return SceneDataset(frames, intr, D)


def test_eval_render_exact_and_offset(rng):
    intr = make_intrinsics(24, 24)
    gmap = random_map(rng, 40, d=3)
    poses = [np.eye(4), geometry.se3_exp([0.02, 0, 0, 0, 0.01, 0])]
    scene = _scene_from_map(gmap, intr, poses)
    p, s = eval_render(gmap, np.stack(poses), scene, [0, 1])
    assert p == 99.0 and s == pytest.approx(1.0)
    for fr in scene.frames:
        fr.rgb = fr.rgb + 0.1           # unclipped offset: MSE = 0.01
    p, _ = eval_render(gmap, np.stack(poses), scene, [0, 1])
    assert p == pytest.approx(20.0)


def test_eval_segmentation_single_label_prediction():
    intr = make_intrinsics(8, 8)
    gmap = random_map(np.random.default_rng(0), 5, d=2)
    scene = _scene_from_map(gmap, intr, [np.eye(4)], D=2)
    q = {1: unit([1, 0]), 2: unit([0, 1])}
    with pytest.raises(ConfigError):
        eval_segmentation(gmap, np.eye(4)[None], scene, [0], {})
    # every feature points at label 1 and empty pixels tie, resolved to the first label:
    # label 1 covers half the frame, so acc = 0.5, IoU(1) = 0.5 and IoU(2) = 0
    gmap.features[:] = [1.0, 0.0]
    miou, fwiou, acc = eval_segmentation(gmap, np.eye(4)[None], scene, [0], q, None, np.eye(2))
    assert acc == 0.5 and miou == 0.25 and fwiou == 0.25


def test_heldout_frames_exclude_supervision_and_skipped():
    n = 8
    kf = np.zeros(n, bool)
    mp = np.zeros(n, bool)
    sk = np.zeros(n, bool)
    kf[[0, 4]] = True
    mp[2] = True
    sk[6] = True
    traj = TrajectoryEstimate(np.tile(np.eye(4), (n, 1, 1)), kf, mp, sk)
    np.testing.assert_array_equal(heldout_frames(traj), [1, 3, 5, 7])
    np.testing.assert_array_equal(heldout_frames(traj, 2), [1, 5])


def test_report_row():
    r = EvalReport(psnr=30.0, n_eval_frames=3).row()
    assert list(r) == ["psnr", "ssim", "miou", "fwiou", "acc", "ate_rmse", "n_eval_frames"]


# --------------------------------------------------------------------------
# trajectory error

def _random_traj(rng, n):
    return np.stack([geometry.se3_exp(rng.normal(0, 0.5, size=6)) for _ in range(n)])


def test_ate_identical_zero(rng):
    T = _random_traj(rng, 10)
    assert eval_ate(T, T) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_ate_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    gt = _random_traj(rng, 12)
    G = geometry.se3_exp(rng.normal(0, 2.0, size=6))
    assert eval_ate(G @ gt, gt) < 1e-9
    est = gt.copy()
    est[:, :3, 3] += rng.normal(0, 0.1, size=(12, 3))
    assert abs(eval_ate(G @ est, gt) - eval_ate(est, gt)) < 1e-9


def _ate_oracle(est, gt):
    p, q = est[:, :3, 3], gt[:, :3, 3]

    def resid(x):
        R = Rotation.from_rotvec(x[:3]).as_matrix()
        return (p @ R.T + x[3:] - q).ravel()

    best = None
    for start in Rotation.random(8, random_state=0).as_rotvec():
        sol = least_squares(resid, np.concatenate([start, q.mean(0) - p.mean(0)]),
                            xtol=1e-15, ftol=1e-15, gtol=1e-15)
        if best is None or sol.cost < best.cost:
            best = sol
    r = best.fun.reshape(-1, 3)
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


def test_ate_three_pose_offset_oracle():
    gt = np.stack([geometry.make_pose(np.eye(3), t) for t in ([0, 0, 0], [1, 0, 0], [1, 1, 0.5])])
    est = gt.copy()
    est[1, 0, 3] += 0.3
    assert abs(eval_ate(est, gt) - _ate_oracle(est, gt)) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_ate_random_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = _random_traj(rng, 6)
    est = geometry.se3_exp(rng.normal(size=6)) @ gt
    est[:, :3, 3] += rng.normal(0, 0.2, size=(6, 3))
    assert abs(eval_ate(est, gt) - _ate_oracle(est, gt)) < 1e-9


def test_umeyama_proper_rotation(rng):
    src = rng.normal(size=(10, 3))
    dst = src * [1, 1, -1]          # a reflection is not reachable
    R, _ = umeyama_rigid(src, dst)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_ate_errors(rng):
    T = _random_traj(rng, 4)
    with pytest.raises(InsufficientDataError):
        eval_ate(T[:2], T[:2])
    with pytest.raises(InsufficientDataError):
        eval_ate(T, T[:3])
