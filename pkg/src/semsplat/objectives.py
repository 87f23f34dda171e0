"""Training losses with analytic gradients, pixel sampling and the Adam step."""
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, NumericalError

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5          # 11x11 window
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
NORM_FLOOR = 1e-8


@dataclass
class LossWeights:
    rgb: float = 1.0
    corr: float = 0.05
    lang: float = 0.05
    ssim: float = 0.2
    ce: float = 1.0

    def validate(self):
        for k in ("rgb", "corr", "lang", "ssim", "ce"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


@dataclass
class LossReport:
    rgb: float = 0.0
    corr: float = 0.0
    lang: float = 0.0
    ce: float = 0.0
    total: float = 0.0

    def row(self, it):
        return {"iter": it, "L_rgb": self.rgb, "L_corr": self.corr, "L_lang": self.lang,
                "L_ce": self.ce, "L_total": self.total}


LOSS_LOG_COLUMNS = ["iter", "L_rgb", "L_corr", "L_lang", "L_ce", "L_total"]


# --------------------------------------------------------------------------
# photometric

def _blur(x):
    return gaussian_filter(x, sigma=(SSIM_SIGMA, SSIM_SIGMA, 0), truncate=SSIM_RADIUS / SSIM_SIGMA,
                           mode="constant", cval=0.0)


def ssim(img1, img2, return_grad=False):
    """Mean SSIM over pixels and channels (Gaussian 11x11 window, sigma 1.5, zero padding).

    With ``return_grad`` also returns d(mean SSIM)/d img1.
    """
    x = np.asarray(img1, dtype=np.float64)
    y = np.asarray(img2, dtype=np.float64)
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    sxx, syy, sxy = exx - mx * mx, eyy - my * my, exy - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * sxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = sxx + syy + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    value = float(S.mean())
    if not return_grad:
        return value
    n = S.size
    dA1 = A2 / (B1 * B2) / n
    dA2 = A1 / (B1 * B2) / n
    dB1 = -S / B1 / n
    dB2 = -S / B2 / n
    g_mx = dA1 * 2 * my - dA2 * 2 * my + dB1 * 2 * mx - dB2 * 2 * mx
    g_exy = dA2 * 2
    g_exx = dB2
    grad = _blur(g_mx) + 2 * x * _blur(g_exx) + y * _blur(g_exy)
    return value, grad


def loss_rgb(rendered, target, lambda_ssim=0.2):
    """(1 - lambda) * L1 + lambda * (1 - SSIM); returns (value, d/d rendered)."""
    r = np.asarray(rendered, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {t.shape}")
    diff = r - t
    l1 = float(np.abs(diff).mean())
    g = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    value = (1.0 - lambda_ssim) * l1
    if lambda_ssim > 0:
        s, gs = ssim(r, t, return_grad=True)
        value += lambda_ssim * (1.0 - s)
        g = g - lambda_ssim * gs
    return value, g


def psnr(rendered, target):
    mse = float(np.mean((np.asarray(rendered, dtype=np.float64) - target) ** 2))
    if mse < 1e-10:
        return 99.0
    return float(10.0 * np.log10(1.0 / mse))


# --------------------------------------------------------------------------
# semantic

def corr_f(F1, F2):
    """Cosine similarity with norms floored at 1e-8."""
    F1 = np.asarray(F1, dtype=np.float64)
    F2 = np.asarray(F2, dtype=np.float64)
    return float(F1 @ F2 / (max(np.linalg.norm(F1), NORM_FLOOR) * max(np.linalg.norm(F2), NORM_FLOOR)))


def _normalize(F):
    n = np.maximum(np.linalg.norm(F, axis=-1, keepdims=True), NORM_FLOOR)
    return F / n, n


def _normalize_backward(Fn, n, g):
    """Backprop through F / max(|F|, floor)."""
    proj = g - Fn * np.sum(Fn * g, axis=-1, keepdims=True)
    return np.where(n > NORM_FLOOR, proj, g) / n


def loss_corr(features, corr_m):
    """Scale-conditioned contrastive loss on sampled pixel features.

    ``features`` is (n, d); ``corr_m`` is an (S, n, n) boolean stack of mask
    correspondences. Value is the mean over levels and all ordered pairs
    (diagonal included) of (1 - 2 corr_m) * max(cos, 0).
    """
    F = np.asarray(features, dtype=np.float64)
    C = np.asarray(corr_m, dtype=bool)
    S, n = C.shape[0], F.shape[0]
    Fn, norms = _normalize(F)
    cos = Fn @ Fn.T
    coef = S - 2.0 * C.sum(axis=0)             # sum_s (1 - 2 corr_m)
    pos = cos > 0
    norm = 1.0 / (S * n * n)
    value = float(norm * np.sum(coef * np.where(pos, cos, 0.0)))
    G = norm * coef * pos
    dFn = (G + G.T) @ Fn
    return value, _normalize_backward(Fn, norms, dFn)


@numba.njit(cache=True)
def _corr_bits_kernel(Fn, bits, norm):
    n, d = Fn.shape
    S = bits.shape[0]
    dFn = np.zeros((n, d))
    val = 0.0
    for i in range(n):
        for j in range(i, n):
            c = 0.0
            for k in range(d):
                c += Fn[i, k] * Fn[j, k]
            if c <= 0.0:
                continue
            shared = 0
            for s in range(S):
                if bits[s, i] & bits[s, j]:
                    shared += 1
            g = norm * (S - 2.0 * shared)
            if i == j:
                val += g * c
                for k in range(d):
                    dFn[i, k] += 2.0 * g * Fn[i, k]
            else:
                val += 2.0 * g * c
                for k in range(d):
                    dFn[i, k] += 2.0 * g * Fn[j, k]
                    dFn[j, k] += 2.0 * g * Fn[i, k]
    return val, dFn


def loss_corr_bits(features, bits):
    """:func:`loss_corr` with correspondences given as per-level uint64 mask bitmasks.

    ``bits[s, p]`` has bit i set when mask i is active at sample p and level s;
    two samples correspond at a level when their bitmasks intersect.
    """
    F = np.asarray(features, dtype=np.float64)
    bits = np.ascontiguousarray(bits, dtype=np.uint64)
    S, n = bits.shape[0], F.shape[0]
    Fn, norms = _normalize(F)
    val, dFn = _corr_bits_kernel(np.ascontiguousarray(Fn), bits, 1.0 / (S * n * n))
    return float(val), _normalize_backward(Fn, norms, dFn)


def loss_corr_map(feature_map, sup, pixels, level_indices=None):
    """:func:`loss_corr` on a rendered (H, W, d) map; gradient returned as a full map."""
    H, W, d = feature_map.shape
    F = feature_map.reshape(-1, d)[pixels]
    value, gF = loss_corr(F, sup.correspondence_matrices(pixels, level_indices))
    grad = np.zeros((H * W, d))
    np.add.at(grad, pixels, gF)
    return value, grad.reshape(H, W, d)


def loss_lang(pred, target, valid=None):
    """Mean over valid samples of (1 - cos(pred, target)) + |pred - target|^2."""
    P = np.asarray(pred, dtype=np.float64)
    T = np.asarray(target, dtype=np.float64)
    valid = np.ones(len(P), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    grad = np.zeros_like(P)
    k = int(valid.sum())
    if k == 0:
        return 0.0, grad
    p, t = P[valid], T[valid]
    pn, pnorm = _normalize(p)
    tn, _ = _normalize(t)
    cos = np.sum(pn * tn, axis=1)
    diff = p - t
    value = float(np.mean(1.0 - cos + np.sum(diff * diff, axis=1)))
    g = _normalize_backward(pn, pnorm, -tn) + 2.0 * diff
    grad[valid] = g / k
    return value, grad


def loss_ce_closed_set(features, head, labels):
    """Softmax cross-entropy of ``head @ f`` against integer labels.

    Returns (value, d/d features, d/d head).
    """
    F = np.asarray(features, dtype=np.float64)
    Wh = np.asarray(head, dtype=np.float64)
    y = np.asarray(labels)
    K = Wh.shape[0]
    if np.any(y < 0) or np.any(y >= K):
        raise DataError(f"labels must lie in [0, {K})")
    n = len(y)
    if n == 0:
        return 0.0, np.zeros_like(F), np.zeros_like(Wh)
    z = F @ Wh.T
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    value = float(-logp[np.arange(n), y].mean())
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    return value, dz @ Wh, dz.T @ F


def loss_total(components, weights):
    """Weighted sum of the component losses; raises on any non-finite component."""
    vals = {}
    for name in ("rgb", "corr", "lang", "ce"):
        v = float(components.get(name, 0.0))
        if not np.isfinite(v):
            raise NumericalError(f"non-finite loss component L_{name}")
        vals[name] = v
    total = (weights.rgb * vals["rgb"] + weights.corr * vals["corr"]
             + weights.lang * vals["lang"] + weights.ce * vals["ce"])
    return LossReport(vals["rgb"], vals["corr"], vals["lang"], vals["ce"], total)


def sample_pixels(candidates, n, rng):
    """Up to ``n`` unique flat pixel indices drawn without replacement from ``candidates``."""
    candidates = np.asarray(candidates)
    if candidates.size <= n:
        return np.sort(candidates)
    return np.sort(rng.choice(candidates, size=n, replace=False))


# --------------------------------------------------------------------------
# optimizer

@dataclass
class Adam:
    """Adam with one learning rate per parameter group."""
    lrs: dict
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    state: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def step(self, params, grads):
        """In-place update of every array in ``params`` that has a gradient."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}")
        for name, g in grads.items():
            p = params[name]
            m, v = self._moments(name, p)
            t = self.steps.get(name, 0) + 1
            self.steps[name] = t
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p -= self.lrs[name] * mhat / (np.sqrt(vhat) + self.eps)
        if "quats" in params and "quats" in grads:
            q = params["quats"]
            q /= np.linalg.norm(q, axis=1, keepdims=True)

    def _moments(self, name, p):
        if name not in self.state or self.state[name][0].shape != p.shape:
            old = self.state.get(name)
            m, v = np.zeros_like(p, dtype=np.float64), np.zeros_like(p, dtype=np.float64)
            if old is not None and old[0].shape[1:] == p.shape[1:] and old[0].shape[0] <= p.shape[0]:
                # rows appended to the parameter keep the existing moments
                m[: len(old[0])] = old[0]
                v[: len(old[1])] = old[1]
            self.state[name] = (m, v)
        return self.state[name]

    def state_arrays(self):
        out = {}
        for name, (m, v) in sorted(self.state.items()):
            out[f"{name}.m"] = m
            out[f"{name}.v"] = v
            out[f"{name}.t"] = np.array([self.steps.get(name, 0)], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays):
        names = {k.rsplit(".", 1)[0] for k in arrays}
        for name in names:
            self.state[name] = (arrays[f"{name}.m"].copy(), arrays[f"{name}.v"].copy())
            self.steps[name] = int(arrays[f"{name}.t"][0])
