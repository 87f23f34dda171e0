"""Language-embedding memory bank with attention readout.

The bank stores unit D-vectors offered at keyframes; an offer is kept only if
its largest cosine similarity to the stored rows stays below ``tau``. Rendered
d-dim features are lifted to D dims by a learnable projection and read out as
a softmax-weighted combination of bank rows.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, EmptyBankError, NumericalError, ValidationError

UNIT_TOL = 1e-6


@dataclass
class MemoryBank:
    dim: int
    entries: np.ndarray = None
    insertion_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.entries is None:
            self.entries = np.zeros((0, self.dim))

    def __len__(self):
        return self.entries.shape[0]

    def maybe_insert(self, e, tau=0.9, source=None):
        """Append ``e`` if its max cosine to every stored row is below ``tau``."""
        e = np.asarray(e, dtype=np.float64)
        if e.shape != (self.dim,):
            raise ValidationError(f"embedding has shape {e.shape}, expected ({self.dim},)")
        if abs(np.linalg.norm(e) - 1.0) > UNIT_TOL:
            raise ValidationError("embedding must be unit norm")
        if len(self) and np.max(self.entries @ e) >= tau:
            return False
        self.entries = np.vstack([self.entries, e[None]])
        self.insertion_log.append(source)
        return True

    def pairwise_cosines(self):
        G = self.entries @ self.entries.T
        iu = np.triu_indices(len(self), k=1)
        return G[iu]

    def summary(self, bins=10):
        """Text dump: bank size and a histogram of pairwise cosines."""
        cos = self.pairwise_cosines()
        hist, edges = np.histogram(cos, bins=bins, range=(-1.0, 1.0))
        lines = [f"M={len(self)} D={self.dim}"]
        lines += [f"[{lo:+.1f},{hi:+.1f}) {c}" for lo, hi, c in zip(edges[:-1], edges[1:], hist)]
        return "\n".join(lines)


def masked_embedding(frame, mask_index):
    """Unit embedding of one mask of ``frame`` (renormalized)."""
    if not 0 <= mask_index < len(frame.masks):
        raise DataError(f"mask index {mask_index} out of range")
    e = frame.masks[mask_index].embedding
    if e is None:
        raise DataError(f"mask {mask_index} has no embedding")
    e = np.asarray(e, dtype=np.float64)
    n = np.linalg.norm(e)
    if not n > 0:
        raise DataError(f"mask {mask_index} has a zero embedding")
    return e / n


def init_projection(D, d, rng):
    return rng.normal(0.0, 1.0 / np.sqrt(d), size=(D, d))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def readout(F, bank, W, temperature=1.0):
    """Attention readout softmax((W F) bank^T / temperature) bank.

    ``F`` is (d,) or (n, d); ``bank`` a :class:`MemoryBank` or (M, D) array.
    """
    Mb = bank.entries if isinstance(bank, MemoryBank) else np.asarray(bank, dtype=np.float64)
    if Mb.shape[0] == 0:
        raise EmptyBankError("memory bank is empty")
    F = np.asarray(F, dtype=np.float64)
    att = _softmax((F @ W.T) @ Mb.T / temperature)
    return att @ Mb


def readout_backward(F, bank, W, dL_dout, temperature=1.0):
    """Gradients of the readout w.r.t. the query features and the projection."""
    Mb = bank.entries if isinstance(bank, MemoryBank) else np.asarray(bank, dtype=np.float64)
    if Mb.shape[0] == 0:
        raise EmptyBankError("memory bank is empty")
    g = np.asarray(dL_dout, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite upstream gradient")
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 1
    F2 = F[None] if single else F
    g2 = g[None] if single else g
    att = _softmax((F2 @ W.T) @ Mb.T / temperature)
    d_att = g2 @ Mb.T
    d_logits = att * (d_att - np.sum(att * d_att, axis=1, keepdims=True))
    d_query = d_logits @ Mb / temperature
    dF = d_query @ W
    dW = d_query.T @ F2
    return (dF[0] if single else dF), dW


def direct_readout(F, W):
    """Projection without the bank (the memory-free variant)."""
    return np.asarray(F, dtype=np.float64) @ W.T


def direct_readout_backward(F, W, dL_dout):
    g = np.asarray(dL_dout, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite upstream gradient")
    F = np.asarray(F, dtype=np.float64)
    return g @ W, g.T @ F if F.ndim == 2 else np.outer(g, F)


def pixel_language_target(p, masks):
    """Embedding of the smallest mask containing pixel ``p = (row, col)``, or None.

    ``masks`` are lifted masks (with ``scale3d``) in any order.
    """
    r, c = p
    best = None
    for m in masks:
        if m.pixels[r, c] and (best is None or m.scale3d < best.scale3d):
            best = m
    if best is None:
        return None
    e = np.asarray(best.embedding, dtype=np.float64)
    return e / np.linalg.norm(e)


def language_targets(sup):
    """(H*W, D) per-pixel targets from the smallest covering mask, and a validity mask."""
    H, W = sup.shape
    if not sup.masks:
        return np.zeros((H * W, 0)), np.zeros(H * W, dtype=bool)
    D = len(sup.masks[0].embedding)
    out = np.zeros((H * W, D))
    size = np.full(H * W, np.inf)
    for m in sup.masks:
        sel = m.pixels.reshape(-1) & (m.scale3d < size)
        e = np.asarray(m.embedding, dtype=np.float64)
        out[sel] = e / np.linalg.norm(e)
        size[sel] = m.scale3d
    return out, np.isfinite(size)
