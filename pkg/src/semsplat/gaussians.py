"""Structure-of-arrays container for the Gaussian map."""
from dataclasses import dataclass, fields

import numpy as np

PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "color_logits", "features")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianMap:
    """N Gaussians; every attribute is stored unconstrained.

    quats are (w, x, y, z); log_scales are per-axis logs of standard deviations;
    opacity and color are logits; features are the d-dim semantic vectors.
    """
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    color_logits: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        n = self.means.shape[0]
        for f in fields(self):
            arr = getattr(self, f.name)
            if arr.shape[0] != n:
                raise ValueError(f"{f.name} has {arr.shape[0]} rows, expected {n}")

    @classmethod
    def empty(cls, d=16):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                   np.zeros(0), np.zeros((0, 3)), np.zeros((0, d)))

    def __len__(self):
        return self.means.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def colors(self):
        return sigmoid(self.color_logits)

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return GaussianMap(**{k: v.copy() for k, v in self.params().items()})

    def concat(self, other):
        return GaussianMap(**{k: np.concatenate([v, getattr(other, k)], axis=0)
                              for k, v in self.params().items()})

    def subset(self, keep):
        return GaussianMap(**{k: v[keep] for k, v in self.params().items()})

    def normalize_quats(self):
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)


@dataclass
class GradientBuffer:
    """Per-Gaussian gradients, one array per attribute of :class:`GaussianMap`."""
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    color_logits: np.ndarray
    features: np.ndarray

    @classmethod
    def zeros_like(cls, gmap):
        return cls(**{k: np.zeros_like(v, dtype=np.float64) for k, v in gmap.params().items()})

    def as_dict(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def accumulate(self, other):
        for name in PARAM_NAMES:
            getattr(self, name)[...] += getattr(other, name)

    def zero(self):
        for name in PARAM_NAMES:
            getattr(self, name)[...] = 0.0

    def all_finite(self):
        return all(np.all(np.isfinite(getattr(self, n))) for n in PARAM_NAMES)
