"""Deterministic RNG streams, run configuration, and shared numeric plumbing."""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

# Pixel value excluded from losses and metrics.
IGNORE = 255

EPS_BN = 1e-5
LOG_CLAMP = 1e-12


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


def make_tensor(dims, data) -> np.ndarray:
    """Build a float64 array from a flat buffer, validating shape and finiteness."""
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 for d in dims):
        raise ValueError(f"non-positive dimension in {dims}")
    buf = np.asarray(data, dtype=np.float64).reshape(-1)
    expected = int(np.prod(dims))
    if buf.size != expected:
        raise ValueError(f"buffer length {buf.size} does not match dims {dims} (need {expected})")
    if not np.all(np.isfinite(buf)):
        raise ValueError("buffer contains non-finite values")
    return buf.reshape(dims)


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {name}")
    return arr


class RngStream:
    """Deterministic random stream keyed by (root_seed, path).

    The value sequence is a pure function of the key: sibling streams never
    influence each other, so any consumer can be replayed in isolation and
    the full pipeline is reproducible from the root seed alone.
    """

    __slots__ = ("root_seed", "path", "_gen")

    def __init__(self, root_seed: int, path: tuple[str, ...] = ()):
        self.root_seed = int(root_seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        self._gen: np.random.Generator | None = None

    def derive(self, label: str) -> "RngStream":
        if not label:
            raise ValueError("stream label must be non-empty")
        return RngStream(self.root_seed, self.path + (str(label),))

    def _generator(self) -> np.random.Generator:
        if self._gen is None:
            digest = hashlib.sha256()
            digest.update(struct.pack("<Q", self.root_seed))
            for part in self.path:
                digest.update(b"\x00")
                digest.update(part.encode("utf-8"))
            self._gen = np.random.default_rng(int.from_bytes(digest.digest()[:16], "little"))
        return self._gen

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        if lo > hi:
            raise ValueError(f"uniform bounds reversed: [{lo}, {hi})")
        return lo + (hi - lo) * self._generator().random()

    def uniforms(self, lo: float, hi: float, size) -> np.ndarray:
        if lo > hi:
            raise ValueError(f"uniform bounds reversed: [{lo}, {hi})")
        return lo + (hi - lo) * self._generator().random(size)

    def integers(self, lo: int, hi: int) -> int:
        """One integer drawn uniformly from [lo, hi)."""
        return int(self._generator().integers(lo, hi))

    def normals(self, size) -> np.ndarray:
        return self._generator().standard_normal(size)

    def bernoulli(self, p: float) -> bool:
        return bool(self._generator().random() < p)

    def __repr__(self):
        return f"RngStream(seed={self.root_seed}, path={'/'.join(self.path)})"


# Table-driven registry of the ablation switches: (config key, description).
ABLATIONS = [
    ("no_aug_consistency", "disable augmentation consistency: no photometric noise, no extra crops, no flips"),
    ("no_momentum", "disable the momentum network (gamma_psi=0, momentum_period=1)"),
    ("no_photometric_noise", "segmentation-network inputs are clean (no jitter/blur/greyscale)"),
    ("no_multiscale_fusion", "supervision from the full-image momentum prediction only"),
    ("no_focal_loss", "drop the focal multiplier (focal_lambda=0)"),
    ("min_entropy_fusion", "fuse overlapping predictions by minimum entropy instead of averaging"),
    ("no_class_thresholding", "thresholds use zeta * peak confidence exactly (beta -> 0 limit)"),
    ("no_confidence_reg", "replace the momentum-network confidence weight by 1"),
    ("no_importance_sampling", "draw target images uniformly instead of class-prior weighted"),
    ("no_flipping", "never flip crops horizontally"),
]


@dataclass
class AblationFlags:
    no_aug_consistency: bool = False
    no_momentum: bool = False
    no_photometric_noise: bool = False
    no_multiscale_fusion: bool = False
    no_focal_loss: bool = False
    min_entropy_fusion: bool = False
    no_class_thresholding: bool = False
    no_confidence_reg: bool = False
    no_importance_sampling: bool = False
    no_flipping: bool = False


@dataclass
class RunConfig:
    """All hyperparameters of the pipeline, loadable from a flat key=value file."""

    num_classes: int = 6
    input_h: int = 64
    input_w: int = 64
    crops_per_image: int = 3
    min_crop_scale: float = 0.5
    gamma_chi: float = 0.99
    gamma_psi: float = 0.99
    momentum_period: int = 100
    zeta: float = 0.75
    beta: float = 1e-3
    focal_lambda: float = 3.0
    target_loss_scale: float = 5.0
    lr: float = 2.5e-4
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_source: int = 4
    batch_target_images: int = 1
    pretrain_iters: int = 3000
    adapt_iters: int = 6000
    fusion_mode: str = "average"
    eval_period: int = 500
    checkpoint_period: int = 500
    # Diagnostic hooks: force_threshold >= 0 overrides every class threshold;
    # source_only drops the target loss from the adaptation loop entirely.
    force_threshold: float = -1.0
    source_only: bool = False
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> "RunConfig":
        a = self
        checks = [
            (a.num_classes >= 2, "num_classes must be >= 2"),
            (a.input_h > 0 and a.input_w > 0, "input resolution must be positive"),
            (a.crops_per_image >= 0, "crops_per_image must be >= 0"),
            (0.0 < a.min_crop_scale <= 1.0, "min_crop_scale must lie in (0, 1]"),
            (0.0 <= a.gamma_chi <= 1.0, "gamma_chi must lie in [0, 1]"),
            (0.0 <= a.gamma_psi <= 1.0, "gamma_psi must lie in [0, 1]"),
            (a.momentum_period >= 1, "momentum_period must be >= 1"),
            (0.0 < a.zeta <= 1.0, "zeta must lie in (0, 1]"),
            (a.beta > 0.0, "beta must be positive"),
            (a.focal_lambda >= 0.0, "focal_lambda must be >= 0"),
            (a.target_loss_scale >= 0.0, "target_loss_scale must be >= 0"),
            (a.lr > 0.0, "lr must be positive"),
            (0.0 <= a.sgd_momentum < 1.0, "sgd_momentum must lie in [0, 1)"),
            (a.weight_decay >= 0.0, "weight_decay must be >= 0"),
            (a.batch_source >= 1, "batch_source must be >= 1"),
            (a.batch_target_images >= 1, "batch_target_images must be >= 1"),
            (a.pretrain_iters >= 0, "pretrain_iters must be >= 0"),
            (a.adapt_iters >= 0, "adapt_iters must be >= 0"),
            (a.fusion_mode in ("average", "min_entropy"), "fusion_mode must be 'average' or 'min_entropy'"),
            (a.eval_period >= 1, "eval_period must be >= 1"),
            (a.checkpoint_period >= 1, "checkpoint_period must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    # -- ablation-resolved views ------------------------------------------

    @property
    def effective_gamma_psi(self) -> float:
        return 0.0 if self.ablation.no_momentum else self.gamma_psi

    @property
    def effective_momentum_period(self) -> int:
        return 1 if self.ablation.no_momentum else self.momentum_period

    @property
    def effective_focal_lambda(self) -> float:
        return 0.0 if self.ablation.no_focal_loss else self.focal_lambda

    @property
    def effective_fusion_mode(self) -> str:
        return "min_entropy" if self.ablation.min_entropy_fusion else self.fusion_mode

    @property
    def photometric_enabled(self) -> bool:
        return not (self.ablation.no_photometric_noise or self.ablation.no_aug_consistency)

    @property
    def flipping_enabled(self) -> bool:
        return not (self.ablation.no_flipping or self.ablation.no_aug_consistency)

    @property
    def multiscale_enabled(self) -> bool:
        return not (self.ablation.no_multiscale_fusion or self.ablation.no_aug_consistency)

    @property
    def class_thresholding_enabled(self) -> bool:
        return not self.ablation.no_class_thresholding

    @property
    def confidence_reg_enabled(self) -> bool:
        return not self.ablation.no_confidence_reg

    @property
    def importance_sampling_enabled(self) -> bool:
        return not self.ablation.no_importance_sampling

    # -- flat text serialization ------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "ablation":
                continue
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        for f in dataclasses.fields(self.ablation):
            lines.append(f"ablation.{f.name} = {_format_value(getattr(self.ablation, f.name))}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def apply_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        cfg = dataclasses.replace(self, ablation=dataclasses.replace(self.ablation))
        for key, raw in overrides.items():
            _set_key(cfg, key, raw)
        return cfg.validate()


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"key '{key}': cannot parse boolean from {raw!r}")


_SCALAR_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig) if f.name != "ablation"}
_ABLATION_FIELDS = {f.name for f in dataclasses.fields(AblationFlags)}


def _set_key(cfg: RunConfig, key: str, raw: str) -> None:
    raw = raw.strip()
    if key.startswith("ablation."):
        name = key[len("ablation."):]
        if name not in _ABLATION_FIELDS:
            raise ConfigError(f"unknown config key '{key}'")
        setattr(cfg.ablation, name, _parse_bool(raw, key))
        return
    if key not in _SCALAR_FIELDS:
        raise ConfigError(f"unknown config key '{key}'")
    kind = _SCALAR_FIELDS[key]
    try:
        if kind == "bool" or kind is bool:
            value = _parse_bool(raw, key)
        elif kind == "int" or kind is int:
            value = int(raw)
        elif kind == "float" or kind is float:
            value = float(raw)
        else:
            value = raw
    except ValueError as exc:
        raise ConfigError(f"key '{key}': {exc}") from exc
    setattr(cfg, key, value)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse flat `key = value` text. Unknown keys are an error."""
    cfg = base if base is not None else RunConfig()
    cfg = dataclasses.replace(cfg, ablation=dataclasses.replace(cfg.ablation))
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        try:
            _set_key(cfg, key.strip(), raw)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        text = open(path, "r", encoding="utf-8").read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        return parse_config_text(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
