"""Gaussian map initialization, EWA projection and a differentiable software rasterizer.

Rendering blends color and semantic feature channels in one pass: every
Gaussian carries a value vector ``[sigmoid(color_logits), features]`` and
each pixel composites its contributors front to back,

    out(p) = sum_i v_i a_i(p) prod_{j<i} (1 - a_j(p)),

with a_i(p) = min(alpha_max, sigmoid(opacity) * exp(-0.5 d^T cov2d^-1 d)).
Contributors are ordered by camera depth (ties by index). The rasterizer walks
Gaussians in that order and updates the pixels inside each 3-sigma ellipse,
which gives the same per-pixel ordering as a per-pixel sort.

Pixel (col, row) has its center at image-plane coordinates (col, row).
"""
from dataclasses import dataclass

import numba
import numpy as np

from .errors import EmptyInitError, NumericalError
from .gaussians import GaussianMap, GradientBuffer, logit, sigmoid
from .geometry import quat_to_rot


@dataclass(frozen=True)
class RenderSettings:
    near: float = 0.01
    low_pass: float = 0.3          # px^2 added to the diagonal of every 2D covariance
    sigma_cutoff: float = 3.0      # ellipse cutoff in standard deviations
    alpha_max: float = 0.999
    t_threshold: float = 1e-4      # stop blending a pixel once transmittance drops below


DEFAULT_SETTINGS = RenderSettings()


@dataclass
class RenderOutput:
    color: np.ndarray               # (H, W, 3)
    feature: np.ndarray             # (H, W, d)
    final_transmittance: np.ndarray  # (H, W)
    depth: np.ndarray               # (H, W) expected depth over covered pixels, 0 elsewhere
    contrib_count: np.ndarray       # (H, W)
    cache: object = None


@dataclass
class Projection:
    visible: np.ndarray     # (N,) bool
    means2d: np.ndarray     # (N, 2)
    cov2d: np.ndarray       # (N, 2, 2) EWA covariance before the low-pass term
    depth: np.ndarray       # (N,)
    conic: np.ndarray       # (N, 3) inverse of the filtered covariance: A, B, C
    t_cam: np.ndarray       # (N, 3)
    J: np.ndarray           # (N, 2, 3)
    R: np.ndarray           # (N, 3, 3) Gaussian rotations
    M: np.ndarray           # (N, 3, 3) camera-frame 3D covariance


# --------------------------------------------------------------------------
# initialization

def init_from_pointmap(frame, pose, intrinsics, stride=2, conf_threshold=0.0,
                       feature_dim=16, rng=None, allowed=None):
    """One isotropic Gaussian per sampled confident pixel of ``frame``.

    ``pose`` is world <- camera. ``allowed`` optionally restricts the pixels
    (used to skip regions the map already covers).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    conf = frame.confidence[::stride, ::stride]
    keep = conf > conf_threshold
    if allowed is not None:
        keep &= allowed[::stride, ::stride]
    if not keep.any():
        raise EmptyInitError("no confident pixel to initialize from")
    pts = frame.pointmap[::stride, ::stride][keep].astype(np.float64)
    rgb = frame.rgb[::stride, ::stride][keep].astype(np.float64)
    n = pts.shape[0]
    world = pts @ pose[:3, :3].T + pose[:3, 3]
    k = stride / np.sqrt(2.0)
    scale = k * pts[:, 2] / intrinsics.fx
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianMap(
        means=world,
        quats=quats,
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        opacity_logits=np.zeros(n),
        color_logits=logit(np.clip(rgb, 1e-3, 1 - 1e-3)),
        features=rng.normal(0.0, 0.01, size=(n, feature_dim)),
    )


def prune_low_opacity(gmap, threshold=0.005):
    """Drop Gaussians whose opacity fell below ``threshold``. Off by default in the pipeline."""
    return gmap.subset(gmap.opacities >= threshold)


# --------------------------------------------------------------------------
# projection

def project_gaussians(gmap, view, intr, settings=DEFAULT_SETTINGS):
    """Project all Gaussians with camera <- world pose ``view``."""
    W_rot, t_wc = view[:3, :3], view[:3, 3]
    t = gmap.means @ W_rot.T + t_wc
    tz = t[:, 2]
    n = len(gmap)
    visible = tz > settings.near
    safe_z = np.where(visible, tz, 1.0)
    fx, fy = intr.fx, intr.fy
    u = fx * t[:, 0] / safe_z + intr.cx
    v = fy * t[:, 1] / safe_z + intr.cy
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / safe_z
    J[:, 0, 2] = -fx * t[:, 0] / safe_z ** 2
    J[:, 1, 1] = fy / safe_z
    J[:, 1, 2] = -fy * t[:, 1] / safe_z ** 2
    R = quat_to_rot(gmap.quats)
    A = R * np.exp(gmap.log_scales)[:, None, :]
    sigma3 = A @ np.swapaxes(A, 1, 2)
    M = W_rot @ sigma3 @ W_rot.T
    cov = J @ M @ np.swapaxes(J, 1, 2)
    a = cov[:, 0, 0] + settings.low_pass
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + settings.low_pass
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    ex = settings.sigma_cutoff * np.sqrt(a)
    ey = settings.sigma_cutoff * np.sqrt(c)
    visible &= (u + ex >= 0) & (u - ex <= intr.width - 1)
    visible &= (v + ey >= 0) & (v - ey <= intr.height - 1)
    return Projection(visible, np.stack([u, v], axis=1), cov, tz, conic, t, J, R, M)


def project_gaussian(gmap, index, view, intr, settings=DEFAULT_SETTINGS):
    """Projection of a single Gaussian: dict(mean2d, cov2d, depth) or None if culled."""
    proj = project_gaussians(gmap.subset(np.array([index])), view, intr, settings)
    if not proj.visible[0]:
        return None
    return {"mean2d": proj.means2d[0], "cov2d": proj.cov2d[0], "depth": float(proj.depth[0])}


def _bounds(proj, idx, intr, settings):
    a = proj.cov2d[idx, 0, 0] + settings.low_pass
    c = proj.cov2d[idx, 1, 1] + settings.low_pass
    ex = settings.sigma_cutoff * np.sqrt(a)
    ey = settings.sigma_cutoff * np.sqrt(c)
    u, v = proj.means2d[idx, 0], proj.means2d[idx, 1]
    xmin = np.clip(np.ceil(u - ex), 0, intr.width - 1).astype(np.int64)
    xmax = np.clip(np.floor(u + ex), 0, intr.width - 1).astype(np.int64)
    ymin = np.clip(np.ceil(v - ey), 0, intr.height - 1).astype(np.int64)
    ymax = np.clip(np.floor(v + ey), 0, intr.height - 1).astype(np.int64)
    return xmin, xmax, ymin, ymax


# --------------------------------------------------------------------------
# raster kernels

@numba.njit(cache=True)
def _raster_forward(means2d, conic, opac, vals, zdepth, xmin, xmax, ymin, ymax,
                    H, W, t_threshold, cutoff2, alpha_max):
    n, K = vals.shape
    out = np.zeros((H, W, K))
    T = np.ones((H, W))
    dep = np.zeros((H, W))
    count = np.zeros((H, W), dtype=np.int64)
    last = np.full((H, W), -1, dtype=np.int64)
    for r in range(n):
        mx, my = means2d[r, 0], means2d[r, 1]
        A, B, C = conic[r, 0], conic[r, 1], conic[r, 2]
        for y in range(ymin[r], ymax[r] + 1):
            dy = y - my
            for x in range(xmin[r], xmax[r] + 1):
                Tp = T[y, x]
                if Tp < t_threshold:
                    continue
                dx = x - mx
                power = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
                if power > cutoff2:
                    continue
                a = opac[r] * np.exp(-0.5 * power)
                if a > alpha_max:
                    a = alpha_max
                w = a * Tp
                for k in range(K):
                    out[y, x, k] += vals[r, k] * w
                dep[y, x] += zdepth[r] * w
                T[y, x] = Tp * (1.0 - a)
                count[y, x] += 1
                last[y, x] = r
    return out, T, dep, count, last


@numba.njit(cache=True)
def _raster_backward(means2d, conic, opac, vals, xmin, xmax, ymin, ymax,
                     T_final, last, dout, cutoff2, alpha_max):
    n, K = vals.shape
    H, W = T_final.shape
    Tcur = T_final.copy()
    acc = np.zeros((H, W, K))
    g_vals = np.zeros((n, K))
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    for r in range(n - 1, -1, -1):
        mx, my = means2d[r, 0], means2d[r, 1]
        A, B, C = conic[r, 0], conic[r, 1], conic[r, 2]
        for y in range(ymin[r], ymax[r] + 1):
            dy = y - my
            for x in range(xmin[r], xmax[r] + 1):
                if r > last[y, x]:
                    continue
                dx = x - mx
                power = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
                if power > cutoff2:
                    continue
                G = np.exp(-0.5 * power)
                a_raw = opac[r] * G
                a = a_raw if a_raw < alpha_max else alpha_max
                one_m = 1.0 - a
                Ti = Tcur[y, x] / one_m
                w = a * Ti
                dL_da = 0.0
                for k in range(K):
                    g = dout[y, x, k]
                    g_vals[r, k] += w * g
                    dL_da += g * (vals[r, k] * Ti - acc[y, x, k] / one_m)
                    acc[y, x, k] += vals[r, k] * w
                Tcur[y, x] = Ti
                if a_raw < alpha_max:
                    g_opac[r] += dL_da * G
                    dL_dp = -0.5 * dL_da * a
                    g_conic[r, 0] += dL_dp * dx * dx
                    g_conic[r, 1] += dL_dp * 2.0 * dx * dy
                    g_conic[r, 2] += dL_dp * dy * dy
                    g_mean[r, 0] += -dL_dp * (2.0 * A * dx + 2.0 * B * dy)
                    g_mean[r, 1] += -dL_dp * (2.0 * B * dx + 2.0 * C * dy)
    return g_vals, g_mean, g_conic, g_opac


# --------------------------------------------------------------------------
# render / backward

@dataclass
class _Cache:
    proj: Projection
    order: np.ndarray
    bounds: tuple
    vals: np.ndarray
    opac: np.ndarray
    final_T: np.ndarray
    last: np.ndarray
    view: np.ndarray
    settings: RenderSettings


def render(gmap, view, intr, settings=DEFAULT_SETTINGS):
    """Render color and feature maps of ``gmap`` seen from camera <- world pose ``view``."""
    if len(gmap) == 0:
        raise ValueError("cannot render an empty map")
    proj = project_gaussians(gmap, view, intr, settings)
    vis = np.nonzero(proj.visible)[0]
    order = vis[np.argsort(proj.depth[vis], kind="stable")]
    vals = np.concatenate([gmap.colors, gmap.features], axis=1)
    opac = gmap.opacities
    bounds = _bounds(proj, order, intr, settings)
    out, T, dep, count, last = _raster_forward(
        np.ascontiguousarray(proj.means2d[order]), np.ascontiguousarray(proj.conic[order]),
        opac[order], np.ascontiguousarray(vals[order]), proj.depth[order], *bounds,
        intr.height, intr.width, settings.t_threshold, settings.sigma_cutoff ** 2,
        settings.alpha_max)
    covered = 1.0 - T
    depth = np.where(covered > 1e-12, dep / np.maximum(covered, 1e-12), 0.0)
    cache = _Cache(proj, order, bounds, vals, opac, T, last, view, settings)
    return RenderOutput(out[..., :3], out[..., 3:], T, depth, count, cache)


def render_backward(gmap, view, intr, dL_dcolor, dL_dfeature, settings=DEFAULT_SETTINGS,
                    forward=None):
    """Gradients of a scalar loss w.r.t. every Gaussian attribute.

    ``forward`` is the :class:`RenderOutput` of the matching ``render`` call;
    when omitted the forward pass is recomputed.
    """
    dcol = np.asarray(dL_dcolor, dtype=np.float64)
    dfeat = np.asarray(dL_dfeature, dtype=np.float64)
    if not (np.all(np.isfinite(dcol)) and np.all(np.isfinite(dfeat))):
        raise NumericalError("non-finite upstream gradient")
    if forward is None or forward.cache is None:
        forward = render(gmap, view, intr, settings)
    c = forward.cache
    order = c.order
    grads = GradientBuffer.zeros_like(gmap)
    if order.size == 0:
        return grads
    dout = np.ascontiguousarray(np.concatenate([dcol, dfeat], axis=2))
    proj = c.proj
    g_vals, g_mean, g_conic, g_opac = _raster_backward(
        np.ascontiguousarray(proj.means2d[order]), np.ascontiguousarray(proj.conic[order]),
        c.opac[order], np.ascontiguousarray(c.vals[order]), *c.bounds,
        c.final_T, c.last, dout, c.settings.sigma_cutoff ** 2, c.settings.alpha_max)

    col = gmap.colors[order]
    grads.color_logits[order] = g_vals[:, :3] * col * (1.0 - col)
    grads.features[order] = g_vals[:, 3:]
    op = c.opac[order]
    grads.opacity_logits[order] = g_opac * op * (1.0 - op)

    g_means, g_quats, g_logs = _projection_backward(
        gmap, order, proj, view, intr, c.settings, g_mean, g_conic)
    grads.means[order] = g_means
    grads.quats[order] = g_quats
    grads.log_scales[order] = g_logs
    if not grads.all_finite():
        raise NumericalError("non-finite Gaussian gradient")
    return grads


def _projection_backward(gmap, idx, proj, view, intr, settings, g_mean2d, g_conic):
    """Chain per-Gaussian image-space gradients back to position, rotation and scale."""
    W_rot = view[:3, :3]
    J = proj.J[idx]
    M = proj.M[idx]
    t = proj.t_cam[idx]
    Q = np.zeros((len(idx), 2, 2))
    Q[:, 0, 0] = proj.conic[idx, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = proj.conic[idx, 1]
    Q[:, 1, 1] = proj.conic[idx, 2]
    G = np.zeros_like(Q)
    G[:, 0, 0] = g_conic[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * g_conic[:, 1]
    G[:, 1, 1] = g_conic[:, 2]
    dSigma = -Q @ G @ Q                                   # symmetric
    dM = np.swapaxes(J, 1, 2) @ dSigma @ J
    dJ = 2.0 * dSigma @ J @ M

    fx, fy = intr.fx, intr.fy
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    dt = np.zeros_like(t)
    # mean2d
    dt[:, 0] += g_mean2d[:, 0] * fx / tz
    dt[:, 1] += g_mean2d[:, 1] * fy / tz
    dt[:, 2] += -g_mean2d[:, 0] * fx * tx / tz ** 2 - g_mean2d[:, 1] * fy * ty / tz ** 2
    # Jacobian entries
    dt[:, 0] += dJ[:, 0, 2] * (-fx / tz ** 2)
    dt[:, 1] += dJ[:, 1, 2] * (-fy / tz ** 2)
    dt[:, 2] += (dJ[:, 0, 0] * (-fx / tz ** 2) + dJ[:, 0, 2] * (2 * fx * tx / tz ** 3)
                 + dJ[:, 1, 1] * (-fy / tz ** 2) + dJ[:, 1, 2] * (2 * fy * ty / tz ** 3))
    g_means = dt @ W_rot

    dSigma3 = W_rot.T @ dM @ W_rot
    R = proj.R[idx]
    s = np.exp(gmap.log_scales[idx])
    A = R * s[:, None, :]
    dA = 2.0 * dSigma3 @ A
    g_logs = np.einsum("nik,nik->nk", R, dA) * s
    dR = dA * s[:, None, :]
    g_quats = _quat_backward(gmap.quats[idx], dR)
    return g_means, g_quats, g_logs


def _quat_backward(q, dR):
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    zero = np.zeros_like(w)

    def m(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=1)

    dRw = 2 * m([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dRx = 2 * m([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dRy = 2 * m([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dRz = 2 * m([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])
    gq = np.stack([np.einsum("nij,nij->n", dR, d) for d in (dRw, dRx, dRy, dRz)], axis=1)
    gq = gq - qn * np.sum(gq * qn, axis=1, keepdims=True)
    return gq / norm


# --------------------------------------------------------------------------
# reference implementation

def brute_force_render(gmap, view, intr, settings=DEFAULT_SETTINGS):
    """Literal per-pixel compositing over every Gaussian, no early termination.

    Kept deliberately independent of :func:`render`: its own per-Gaussian
    projection, no bounding boxes, no transmittance cutoff.
    """
    H, W = intr.height, intr.width
    d = gmap.feature_dim
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    color = np.zeros((H, W, 3))
    feat = np.zeros((H, W, d))
    T = np.ones((H, W))
    dep = np.zeros((H, W))
    count = np.zeros((H, W), dtype=np.int64)
    Rw, tw = view[:3, :3], view[:3, 3]
    entries = []
    for i in range(len(gmap)):
        p = Rw @ gmap.means[i] + tw
        if p[2] <= settings.near:
            continue
        q = gmap.quats[i] / np.linalg.norm(gmap.quats[i])
        w, x, y, z = q
        Rg = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                       [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                       [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])
        S = np.diag(np.exp(gmap.log_scales[i]))
        sigma = Rg @ S @ S.T @ Rg.T
        Jm = np.array([[intr.fx / p[2], 0.0, -intr.fx * p[0] / p[2] ** 2],
                       [0.0, intr.fy / p[2], -intr.fy * p[1] / p[2] ** 2]])
        cov = Jm @ Rw @ sigma @ Rw.T @ Jm.T + settings.low_pass * np.eye(2)
        mean = np.array([intr.fx * p[0] / p[2] + intr.cx, intr.fy * p[1] / p[2] + intr.cy])
        entries.append((p[2], i, mean, np.linalg.inv(cov)))
    entries.sort(key=lambda e: (e[0], e[1]))
    for z, i, mean, inv in entries:
        dx, dy = xs - mean[0], ys - mean[1]
        power = inv[0, 0] * dx * dx + (inv[0, 1] + inv[1, 0]) * dx * dy + inv[1, 1] * dy * dy
        inside = power <= settings.sigma_cutoff ** 2
        a = np.minimum(sigmoid(gmap.opacity_logits[i]) * np.exp(-0.5 * power), settings.alpha_max)
        a = np.where(inside, a, 0.0)
        wgt = a * T
        color += wgt[..., None] * sigmoid(gmap.color_logits[i])
        feat += wgt[..., None] * gmap.features[i]
        dep += wgt * z
        count += inside
        T = T * (1.0 - a)
    covered = 1.0 - T
    depth = np.where(covered > 1e-12, dep / np.maximum(covered, 1e-12), 0.0)
    return RenderOutput(color, feat, T, depth, count)


# --------------------------------------------------------------------------
# visualization

def feature_pca_image(feature_map, basis=None):
    """Project an (H, W, d) feature map onto its top-3 principal axes, scaled to [0, 1]."""
    H, W, d = feature_map.shape
    X = feature_map.reshape(-1, d)
    mu = X.mean(axis=0)
    if basis is None:
        _, _, vt = np.linalg.svd(X - mu, full_matrices=False)
        basis = vt[:3].T
        if basis.shape[1] < 3:
            basis = np.pad(basis, ((0, 0), (0, 3 - basis.shape[1])))
    Y = (X - mu) @ basis
    lo, hi = Y.min(axis=0), Y.max(axis=0)
    Y = (Y - lo) / np.where(hi - lo > 1e-12, hi - lo, 1.0)
    return Y.reshape(H, W, 3)
