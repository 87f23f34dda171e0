"""Run configuration and TOML loading.

A config file holds top-level pipeline keys plus optional ``[tracker]``,
``[lr]`` and ``[synth]`` tables. Unknown keys are rejected.
"""
import dataclasses
from dataclasses import dataclass, field

import tomli

from .errors import ConfigError
from .scene_synth import SynthConfig
from .tracking import TrackerConfig


@dataclass
class LearningRates:
    means: float = 1.6e-4          # multiplied by the scene extent
    quats: float = 1e-3
    log_scales: float = 5e-3
    opacity_logits: float = 5e-2
    color_logits: float = 2.5e-3
    features: float = 2.5e-3
    projection: float = 1e-3
    head: float = 1e-3


@dataclass
class PipelineConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    lr: LearningRates = field(default_factory=LearningRates)
    lambda_rgb: float = 1.0
    lambda_corr: float = 0.05
    lambda_lang: float = 0.05
    lambda_ssim: float = 0.2
    lambda_ce: float = 1.0
    n_levels: int = 4
    n_samples: int = 2000
    tau_m: float = 0.9
    feature_dim: int = 16
    temperature: float = 1.0
    base_iters: int = 30000
    desk_scale: float = 1.0 / 15.0
    iters_per_event: int = 0           # 0: split the budget evenly over events
    init_stride: int = 2
    init_conf_threshold: float = 0.0
    coverage_threshold: float = 0.5
    closed_set: bool = False
    scale_mode: str = "multi"          # multi | coarse | fine
    use_memory: bool = True
    pair_noise: float = 0.0
    max_skip_fraction: float = 0.2
    holdout_stride: int = 1
    eval_layer: int = 0
    seed: int = 0

    @property
    def total_iters(self):
        return max(1, int(round(self.base_iters * self.desk_scale)))

    def validate(self):
        if not 0.0 < self.desk_scale <= 1.0:
            raise ConfigError("desk_scale must lie in (0, 1]")
        if self.base_iters <= 0:
            raise ConfigError("iteration budget must be positive")
        for k in ("lambda_rgb", "lambda_corr", "lambda_lang", "lambda_ssim", "lambda_ce"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative")
        if self.lambda_ssim > 1:
            raise ConfigError("lambda_ssim must not exceed 1")
        if self.n_levels < 1 or self.n_samples < 2 or self.feature_dim < 1:
            raise ConfigError("n_levels >= 1, n_samples >= 2 and feature_dim >= 1 required")
        if self.scale_mode not in ("multi", "coarse", "fine"):
            raise ConfigError(f"unknown scale_mode {self.scale_mode!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.iters_per_event < 0 or self.init_stride < 1 or self.holdout_stride < 1:
            raise ConfigError("iters_per_event >= 0, init_stride >= 1, holdout_stride >= 1 required")
        if not 0.0 <= self.max_skip_fraction <= 1.0:
            raise ConfigError("max_skip_fraction must lie in [0, 1]")
        try:
            self.tracker.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


# overrides that turn the full configuration into each ablation
ABLATIONS = {
    "no_contrastive": {"lambda_corr": 0.0},
    "no_memory": {"use_memory": False},
    "only_coarse": {"scale_mode": "coarse"},
    "only_fine": {"scale_mode": "fine"},
}


def variant_config(name, **overrides):
    """Default configuration for ``"full"`` or one of :data:`ABLATIONS`."""
    if name != "full" and name not in ABLATIONS:
        raise ConfigError(f"unknown variant {name!r}")
    return PipelineConfig(**{**ABLATIONS.get(name, {}), **overrides}).validate()


def _fill(cls, values, where):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    out = {}
    for k, v in values.items():
        default = names[k].default
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"{where}.{k} must be a boolean")
        if isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if isinstance(default, int) and not isinstance(default, bool) and isinstance(v, float):
            if not v.is_integer():
                raise ConfigError(f"{where}.{k} must be an integer")
            v = int(v)
        if default is not dataclasses.MISSING and not isinstance(default, type(v)) and not (
                isinstance(default, float) and isinstance(v, float)):
            raise ConfigError(f"{where}.{k}: expected {type(default).__name__}, got {type(v).__name__}")
        out[k] = v
    return cls(**out)


def pipeline_config_from_dict(d):
    d = dict(d)
    d.pop("synth", None)
    tracker = _fill(TrackerConfig, d.pop("tracker", {}), "tracker")
    lr = _fill(LearningRates, d.pop("lr", {}), "lr")
    cfg = _fill(PipelineConfig, d, "config")
    cfg.tracker, cfg.lr = tracker, lr
    return cfg.validate()


def synth_config_from_dict(d):
    cfg = _fill(SynthConfig, dict(d.get("synth", {})), "synth")
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def read_toml(path):
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_pipeline_config(path=None):
    return pipeline_config_from_dict(read_toml(path) if path else {})


def load_synth_config(path=None):
    return synth_config_from_dict(read_toml(path) if path else {})
