"""Scale-conditioned mask supervision.

Masks are lifted to 3D and given a physical size. A set of S scale levels
partitions that size axis; at level s a mask stays active at pixel p unless a
smaller mask M_j also covers p with s <= size(M_j) < size(mask). Two pixels
correspond at level s when they share an active mask.

Level indices are 0-based: level 0 is the finest, level S-1 the coarsest.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyLiftError

SIZE_FLOOR = 1e-6


@dataclass
class LiftedMask:
    mask_index: int
    scale3d: float
    pixels: np.ndarray      # (H, W) bool
    label_id: int = 0
    embedding: np.ndarray = None


@dataclass
class ScaleSupervision:
    levels: np.ndarray          # (S,) strictly ascending
    masks: list                 # LiftedMask, ordered coarse -> fine
    shape: tuple
    _tables: np.ndarray = field(default=None, repr=False)

    @property
    def n_masks(self):
        return len(self.masks)

    @property
    def n_levels(self):
        return len(self.levels)

    def with_levels(self, levels):
        return ScaleSupervision(np.asarray(levels, dtype=np.float64), self.masks, self.shape)

    @property
    def tables(self):
        """(S, H*W, N) bool identity vectors for every level and pixel."""
        if self._tables is None:
            self._tables = _identity_tables(self)
        return self._tables

    def identity_at(self, level_index, flat_pixels):
        return self.tables[level_index][flat_pixels]

    def correspondence_matrices(self, flat_pixels, level_indices=None):
        """(S', n, n) bool: Corr_m for all sampled pixel pairs at the selected levels."""
        idx = range(self.n_levels) if level_indices is None else level_indices
        out = []
        for s in idx:
            V = self.tables[s][flat_pixels].astype(np.float64)
            out.append(V @ V.T > 0)
        return np.stack(out) if out else np.zeros((0, len(flat_pixels), len(flat_pixels)), bool)

    def level_bitmasks(self, flat_pixels, level_indices=None):
        """(S', n) uint64 bitmasks of the active masks, or None when N > 64."""
        if self.n_masks > 64:
            return None
        idx = list(range(self.n_levels)) if level_indices is None else list(level_indices)
        weights = np.left_shift(np.uint64(1), np.arange(self.n_masks, dtype=np.uint64))
        out = np.zeros((len(idx), len(flat_pixels)), dtype=np.uint64)
        for k, s in enumerate(idx):
            T = self.tables[s][flat_pixels]
            out[k] = np.bitwise_or.reduce(np.where(T, weights[None, :], np.uint64(0)), axis=1) \
                if self.n_masks else 0
        return out

    def labeled_pixels(self):
        """Flat indices of pixels covered by at least one mask."""
        if not self.masks:
            return np.zeros(0, dtype=int)
        cover = np.any(np.stack([m.pixels for m in self.masks]), axis=0)
        return np.flatnonzero(cover)

    def debug_label_images(self):
        """Per level: label id of the largest active mask at each pixel (0 where none)."""
        H, W = self.shape
        out = np.zeros((self.n_levels, H, W), dtype=np.int32)
        for s in range(self.n_levels):
            T = self.tables[s]
            # masks are coarse -> fine, so the first active column is the largest
            has = T.any(axis=1)
            first = np.argmax(T, axis=1)
            labels = np.array([m.label_id for m in self.masks], dtype=np.int32)
            img = np.where(has, labels[first] if len(labels) else 0, 0)
            out[s] = img.reshape(H, W)
        return out


def lift_mask_scale(mask, pointmap, confidence, mask_index=0):
    """3D size of a mask: bounding-box diagonal of its confident camera-frame points."""
    sel = np.asarray(mask.pixels, dtype=bool) & (np.asarray(confidence) > 0)
    if not sel.any():
        raise EmptyLiftError(f"mask {mask_index} has no confident pixel")
    pts = np.asarray(pointmap, dtype=np.float64)[sel]
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    return LiftedMask(mask_index, max(diag, SIZE_FLOOR), np.asarray(mask.pixels, dtype=bool),
                      int(getattr(mask, "label_id", 0)),
                      getattr(mask, "embedding", None))


def compute_levels(scales, S):
    """S ascending levels at the (k - 0.5)/S nearest-rank quantiles of ``scales``."""
    x = np.sort(np.asarray(scales, dtype=np.float64))
    if x.size == 0:
        raise ValueError("need at least one scale")
    if S < 1:
        raise ValueError("S must be >= 1")
    n = x.size
    levels = np.empty(S)
    for k in range(S):
        frac = (k + 0.5) / S
        rank = max(1, int(np.ceil(frac * n - 1e-12)))
        levels[k] = x[rank - 1]
    for k in range(1, S):
        if levels[k] <= levels[k - 1]:
            levels[k] = max(levels[k] + k * 1e-9, np.nextafter(levels[k - 1], np.inf))
    return levels


def lift_frame(frame, skip_empty=True):
    """Lift every mask of ``frame``; masks without confident pixels are dropped."""
    out = []
    for i, m in enumerate(frame.masks):
        try:
            out.append(lift_mask_scale(m, frame.pointmap, frame.confidence, i))
        except EmptyLiftError:
            if not skip_empty:
                raise
    return out


def build_supervision(lifted, levels, shape):
    """Order lifted masks coarse -> fine and bind them to ``levels``."""
    ordered = sorted(lifted, key=lambda m: (-m.scale3d, m.mask_index))
    return ScaleSupervision(np.asarray(levels, dtype=np.float64), ordered, tuple(shape))


def _identity_tables(sup):
    H, W = sup.shape
    N = sup.n_masks
    if N == 0:
        return np.zeros((sup.n_levels, H * W, 0), dtype=bool)
    member = np.stack([m.pixels.reshape(-1) for m in sup.masks], axis=1)   # (HW, N)
    size = np.array([m.scale3d for m in sup.masks])
    out = np.empty((sup.n_levels, H * W, N), dtype=bool)
    for si, s in enumerate(sup.levels):
        # suppress[j, i]: mask j can suppress mask i at this level
        suppress = (size[:, None] < size[None, :]) & (size[:, None] >= s)
        blocked = (member.astype(np.float64) @ suppress.astype(np.float64)) > 0
        out[si] = member & ~blocked
    return out


def identity_vector(sup, level_index, p):
    """Binary N-vector of masks active at pixel ``p = (row, col)`` and the given level."""
    r, c = p
    return sup.tables[level_index][r * sup.shape[1] + c].astype(np.int64)


def mask_correspondence(sup, level_index, p1, p2):
    """1 if the two pixels share an active mask at the level, else 0."""
    return int(identity_vector(sup, level_index, p1) @ identity_vector(sup, level_index, p2) > 0)


def level_selection(n_levels, mode):
    """Level indices used for training: all, only the coarsest, or only the finest."""
    if mode == "multi":
        return list(range(n_levels))
    if mode == "coarse":
        return [n_levels - 1]
    if mode == "fine":
        return [0]
    raise ValueError(f"unknown scale mode {mode!r}")
