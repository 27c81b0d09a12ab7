"""
Experiment configuration.

A configuration file is a flat JSON object. Each key is a field of exactly
one of the sections below; missing keys take the documented defaults and
unknown keys are rejected.
"""
import dataclasses
import json
import logging
import os
import typing
from dataclasses import dataclass
from dataclasses import field
from typing import Optional
from typing import Tuple

from retarget.core import ConfigParseError
from retarget.core import ConfigurationError
from retarget.data import SYNTHETIC_PATTERNS
from retarget.models import ArchitectureSpec

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "RETARGET_DATA_ROOT"

PROTOCOLS = ("synthetic", "mnist", "folder", "video")
G_OLD_STRATEGIES = ("fixed_epoch", "average_all_previous")


@dataclass(frozen=True)
class HyperParams:
    """Scalar knobs of both training phases.

    Attributes
    ----------
    lambda_recon : float
        Weight of the reconstruction term in phase one.
    alpha : float
        Weight of real images against reconstructions in phase two.
    beta : float
        Weight of old-generator reconstructions against pseudo anomalies.
    noise_sigma : float
        Standard deviation of the denoising corruption.
    lr_g, lr_d_phase1, lr_d_phase2 : float
        Adam learning rates; phase two runs at half the phase-one rate.
    phase1_epochs, phase2_iterations : int
        Length of both phases.
    tau : float
        Decision threshold on D(G(X)).
    seed : int
        Seed of every random draw of a run.
    batch_size, phase2_batch_size : int
        Images per step; in phase two, per stream.
    """

    lambda_recon: float = 0.2
    alpha: float = 0.1
    beta: float = 0.001
    noise_sigma: float = 0.1
    lr_g: float = 1e-3
    lr_d_phase1: float = 1e-4
    lr_d_phase2: float = 5e-5
    phase1_epochs: int = 25
    phase2_iterations: int = 75
    tau: float = 0.5
    seed: int = 0
    batch_size: int = 64
    phase2_batch_size: int = 64

    def validate(self):
        _require(self.lambda_recon >= 0, "lambda_recon", "must be >= 0")
        _require(0 <= self.alpha <= 1, "alpha", "must lie in [0, 1]")
        _require(0 <= self.beta <= 1, "beta", "must lie in [0, 1]")
        _require(self.noise_sigma >= 0, "noise_sigma", "must be >= 0")
        for key in ("lr_g", "lr_d_phase1", "lr_d_phase2"):
            _require(getattr(self, key) > 0, key, "must be > 0")
        _require(self.phase1_epochs >= 1, "phase1_epochs", "must be >= 1")
        _require(self.phase2_iterations >= 0, "phase2_iterations", "must be >= 0")
        _require(0 <= self.tau <= 1, "tau", "must lie in [0, 1]")
        _require(self.batch_size >= 1, "batch_size", "must be >= 1")
        _require(self.phase2_batch_size >= 2, "phase2_batch_size", "must be >= 2 to form pairs")
        return self


@dataclass(frozen=True)
class ProtocolConfig:
    """Which data to use and how to cut it into train and test splits."""

    protocol: str = "synthetic"
    data_root: Optional[str] = None
    inlier_digit: int = 0
    outlier_ratio: float = 0.1
    n_inlier_classes: int = 1
    max_per_class: int = 150
    outlier_class: str = "257.clutter"
    folder_test_fraction: Optional[float] = None
    train_videos: str = "Train"
    test_videos: str = "Test"
    patch_size: int = 45
    patch_stride: int = 25
    motion_threshold: float = 0.005
    synthetic_train: int = 256
    synthetic_test_inliers: int = 128
    synthetic_pattern: str = "fixed"
    synthetic_noise: float = 0.05

    def validate(self):
        _require(self.protocol in PROTOCOLS, "protocol", "must be one of {}".format(", ".join(PROTOCOLS)))
        _require(0 <= self.inlier_digit <= 9, "inlier_digit", "must lie in 0..9")
        _require(0.1 <= self.outlier_ratio <= 0.5, "outlier_ratio", "must lie in [0.1, 0.5]")
        _require(self.n_inlier_classes in (1, 3, 5), "n_inlier_classes", "must be 1, 3 or 5")
        _require(self.max_per_class >= 1, "max_per_class", "must be >= 1")
        _require(self.folder_test_fraction is None or 0 < self.folder_test_fraction < 1,
                 "folder_test_fraction", "must lie in (0, 1)")
        _require(self.patch_size >= 1, "patch_size", "must be >= 1")
        _require(self.patch_stride >= 1, "patch_stride", "must be >= 1")
        _require(self.synthetic_train >= 2, "synthetic_train", "must be >= 2")
        _require(self.synthetic_test_inliers >= 1, "synthetic_test_inliers", "must be >= 1")
        _require(self.synthetic_pattern in SYNTHETIC_PATTERNS, "synthetic_pattern",
                 "must be one of {}".format(", ".join(SYNTHETIC_PATTERNS)))
        _require(0 <= self.synthetic_noise <= 1, "synthetic_noise", "must lie in [0, 1]")
        return self

    def resolved_data_root(self):
        root = self.data_root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ConfigParseError("data_root", "not set and ${} is empty".format(DATA_ROOT_ENV))
        return root


@dataclass(frozen=True)
class RunOptions:
    """Bookkeeping of a run: where outputs go and which variant runs."""

    output_dir: str = "runs/default"
    g_old_strategy: str = "fixed_epoch"
    g_old_epoch: int = 1
    variant: str = "full"
    phase2_checkpoint_every: int = 5
    deterministic: bool = False
    stability_epoch_start: int = 20
    stability_epoch_stop: int = 30
    g_old_sweep_stop: int = 10
    histogram_bins: int = 20
    eval_batch_size: int = 256
    num_workers: int = 0

    def validate(self):
        from retarget.trainer import VARIANT_PRESETS

        _require(self.g_old_strategy in G_OLD_STRATEGIES, "g_old_strategy",
                 "must be one of {}".format(", ".join(G_OLD_STRATEGIES)))
        _require(self.g_old_epoch >= 1, "g_old_epoch", "must be >= 1")
        _require(self.variant in VARIANT_PRESETS, "variant",
                 "must be one of {}".format(", ".join(VARIANT_PRESETS)))
        _require(self.phase2_checkpoint_every >= 1, "phase2_checkpoint_every", "must be >= 1")
        _require(self.stability_epoch_start >= 1, "stability_epoch_start", "must be >= 1")
        _require(self.stability_epoch_stop >= self.stability_epoch_start, "stability_epoch_stop",
                 "must be >= stability_epoch_start")
        _require(self.g_old_sweep_stop >= 1, "g_old_sweep_stop", "must be >= 1")
        _require(self.histogram_bins >= 1, "histogram_bins", "must be >= 1")
        _require(self.eval_batch_size >= 1, "eval_batch_size", "must be >= 1")
        _require(self.num_workers >= 0, "num_workers", "must be >= 0")
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    hyper: HyperParams = field(default_factory=HyperParams)
    arch: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def validate(self):
        self.hyper.validate()
        self.protocol.validate()
        self.run.validate()
        try:
            self.arch.validate()
        except ConfigurationError as exc:
            raise ConfigParseError("arch", str(exc))
        return self

    def to_flat_dict(self):
        flat = {}
        for section in SECTIONS:
            for f in dataclasses.fields(section):
                value = getattr(getattr(self, SECTIONS[section]), f.name)
                flat[f.name] = list(value) if isinstance(value, tuple) else value
        return flat

    def replace(self, **overrides):
        """New config with flat keys replaced, validated."""
        flat = self.to_flat_dict()
        flat.update(overrides)
        return from_flat_dict(flat)


SECTIONS = {
    HyperParams: "hyper",
    ArchitectureSpec: "arch",
    ProtocolConfig: "protocol",
    RunOptions: "run",
}


def _require(condition, key, message):
    if not condition:
        raise ConfigParseError(key, message)


def _owners():
    owners = {}
    for section in SECTIONS:
        hints = typing.get_type_hints(section)
        for f in dataclasses.fields(section):
            owners[f.name] = (section, hints[f.name])
    return owners


def _coerce(key, value, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(key, value, inner)
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigParseError(key, "expected a list, got {!r}".format(value))
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(key, v, args[0]) for v in value)
        if len(value) != len(args):
            raise ConfigParseError(key, "expected {} items, got {}".format(len(args), len(value)))
        return tuple(_coerce(key, v, a) for v, a in zip(value, args))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigParseError(key, "expected true/false, got {!r}".format(value))
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigParseError(key, "expected an integer, got {!r}".format(value))
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigParseError(key, "expected a number, got {!r}".format(value))
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigParseError(key, "expected a string, got {!r}".format(value))
        return value
    raise ConfigParseError(key, "unsupported type {}".format(hint))


def from_flat_dict(flat):
    """Build and validate a config from a flat key-value mapping.

    Raises
    ------
    ConfigParseError
        On unknown keys, type mismatches and constraint violations.
    """
    if not isinstance(flat, dict):
        raise ConfigParseError("<root>", "configuration must be a JSON object")
    owners = _owners()
    values = {section: {} for section in SECTIONS}
    for key, value in flat.items():
        if key not in owners:
            raise ConfigParseError(key, "unknown key")
        section, hint = owners[key]
        values[section][key] = _coerce(key, value, hint)
    sections = {SECTIONS[section]: section(**kwargs) for section, kwargs in values.items()}
    return ExperimentConfig(**sections).validate()


def parse_config(path):
    """Read a configuration file; an empty file gives the defaults."""
    try:
        with open(path, encoding="utf8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigParseError("<root>", "cannot read {}: {}".format(path, exc))
    if not text.strip():
        flat = {}
    else:
        try:
            flat = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigParseError("<root>", "invalid JSON: {}".format(exc))
    return from_flat_dict(flat)


def emit_config(config, path):
    """Write the resolved configuration (defaults applied)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf8") as fh:
        json.dump(config.to_flat_dict(), fh, indent=2, sort_keys=True)
    return path
