"""Model width presets, backbone layouts, and the training configuration.

The config file is flat ``key = value`` text (one per line, ``#`` comments);
CLI flags override file values. ``width_preset`` selects the "paper" widths
(the defaults) or the "toy" widths used by fast desk-scale runs; preset-
dependent defaults (backbone, anchors, sampling sizes) follow the preset
unless a key is set explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ValidationError


@dataclass(frozen=True)
class BackboneConfig:
    """Convolution plan: per-layer output channels and strides."""

    name: str
    channels: tuple[int, ...]
    strides: tuple[int, ...]
    kernel: int = 3
    nonlinearity: str = "relu"

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise ValidationError("backbone channels and strides must align")
        if self.nonlinearity not in ("relu", "tanh"):
            raise ValidationError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def total_stride(self) -> int:
        out = 1
        for s in self.strides:
            out *= s
        return out

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


BACKBONE_PRESETS = {
    "toy-8ch-s8": BackboneConfig("toy-8ch-s8", channels=(8, 8, 8), strides=(2, 2, 2)),
    "small-32ch-s16": BackboneConfig("small-32ch-s16", channels=(16, 24, 32, 32), strides=(2, 2, 2, 2)),
}


def backbone_preset(name: str) -> BackboneConfig:
    if name not in BACKBONE_PRESETS:
        raise ValidationError(f"unknown backbone preset {name!r}; have {sorted(BACKBONE_PRESETS)}")
    return BACKBONE_PRESETS[name]


@dataclass(frozen=True)
class ModelWidths:
    """Layer widths for one preset; `reduce_widths` feeds the sequence heads."""

    preset: str
    backbone: str
    det_fc: tuple[int, int]
    reduce_widths: tuple[int, int, int]
    lstm_hidden: int
    retrieval_fc: int
    pooled_size: int = 7

    @property
    def roi_feature_dim(self) -> int:
        return self.reduce_widths[-1]


WIDTH_PRESETS = {
    "paper": ModelWidths(
        preset="paper", backbone="small-32ch-s16", det_fc=(4096, 4096),
        reduce_widths=(4096, 2048, 512), lstm_hidden=512, retrieval_fc=256,
    ),
    "toy": ModelWidths(
        preset="toy", backbone="toy-8ch-s8", det_fc=(64, 64),
        reduce_widths=(64, 32, 16), lstm_hidden=16, retrieval_fc=32,
    ),
}

# preset-dependent training defaults, applied when the key is not set explicitly
_PRESET_TRAIN_DEFAULTS = {
    "paper": dict(
        anchor_scales=(4.0, 8.0, 16.0, 32.0),  # relative to stride
        n_sample_rois=2000, rpn_pre_nms=2000, rpn_post_nms=300,
        n_anchor_samples=256, grad_clip=10.0,
        image_short_side=600, image_max_side=1000,
    ),
    "toy": dict(
        anchor_scales=(1.5, 2.0, 3.0, 4.0),
        n_sample_rois=32, rpn_pre_nms=300, rpn_post_nms=64,
        n_anchor_samples=64, grad_clip=0.0,
        image_short_side=0, image_max_side=0,  # 0 = no resize
        inference_top_n=64, objectness_floor=0.5,
    ),
}


def widths_for_preset(name: str) -> ModelWidths:
    if name not in WIDTH_PRESETS:
        raise ValidationError(f"unknown width preset {name!r}; have {sorted(WIDTH_PRESETS)}")
    return WIDTH_PRESETS[name]


@dataclass
class TrainConfig:
    task: str = "caption"              # caption | retrieval
    mode: str = "OCN2"                 # OCN1 | OCN2 (captioning only)
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iterations: int = 200000
    n_sample_rois: int = 2000
    pos_iou: float = 0.5
    seed: int = 0
    width_preset: str = "paper"
    n_steps: int = 6
    min_count: int = 2
    # proposal plumbing
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    anchor_scales: tuple[float, ...] = (4.0, 8.0, 16.0, 32.0)
    rpn_pre_nms: int = 2000
    rpn_post_nms: int = 300
    rpn_nms_threshold: float = 0.7
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    n_anchor_samples: int = 64
    positive_fraction: float = 0.25
    append_gt_rois: bool = True
    # inference
    nms_threshold: float = 0.3
    inference_top_n: int = 300
    score_threshold: float = 0.5
    # candidate gate: at paper scale, top-300 of ~30k anchors implicitly keeps
    # only object-like proposals; with a toy anchor pool the count alone
    # cannot, so the toy preset gates candidates on objectness instead (0 = off)
    objectness_floor: float = 0.0
    # optimization extras
    grad_clip: float = 10.0
    lr_step_every: int = 0             # 0 disables step decay
    lr_step_factor: float = 1.0
    checkpoint_every: int = 1000
    # preprocessing (0 = keep original size)
    image_short_side: int = 600
    image_max_side: int = 1000

    def __post_init__(self):
        if self.task not in ("caption", "retrieval"):
            raise ValidationError(f"unknown task {self.task!r}")
        if self.mode not in ("OCN1", "OCN2"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValidationError("rates must be non-negative")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if not 0 < self.pos_iou < 1:
            raise ValidationError("pos_iou must lie in (0, 1)")
        if self.n_sample_rois < 1:
            raise ValidationError("n_sample_rois must be >= 1")
        widths_for_preset(self.width_preset)

    @property
    def widths(self) -> ModelWidths:
        return widths_for_preset(self.width_preset)

    @property
    def backbone(self) -> BackboneConfig:
        return backbone_preset(self.widths.backbone)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @staticmethod
    def from_dict(values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(TrainConfig)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(values)
        preset = kwargs.get("width_preset", TrainConfig.width_preset)
        for key, default in _PRESET_TRAIN_DEFAULTS.get(preset, {}).items():
            kwargs.setdefault(key, default)
        coerced = {}
        for name, value in kwargs.items():
            coerced[name] = _coerce(value, known[name].type)
        return TrainConfig(**coerced)

    @staticmethod
    def load(path=None, overrides: dict | None = None) -> "TrainConfig":
        """File values first, then overrides; preset defaults fill the rest."""
        values: dict = {}
        if path is not None:
            values.update(parse_config_file(path))
        if overrides:
            values.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_dict(values)

    @staticmethod
    def preset(width_preset: str, **overrides) -> "TrainConfig":
        """Config with all preset-dependent defaults resolved."""
        return TrainConfig.from_dict({"width_preset": width_preset, **overrides})


def _coerce(value, annotation: str):
    """Pull config-file strings into the dataclass field types."""
    if isinstance(annotation, type):
        annotation = annotation.__name__
    if "tuple" in annotation:
        if isinstance(value, str):
            parts = [p for p in value.replace(",", " ").split() if p]
            return tuple(float(p) for p in parts)
        return tuple(float(v) for v in value)
    if annotation == "bool":
        if isinstance(value, str):
            lowered = value.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValidationError(f"cannot parse boolean from {value!r}")
        return bool(value)
    if annotation == "int":
        return int(value)
    if annotation == "float":
        return float(value)
    return str(value)


def parse_config_file(path) -> dict:
    """Flat ``key = value`` lines; blank lines and ``#`` comments ignored."""
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values
