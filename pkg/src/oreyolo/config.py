"""Model and training configuration plus the flat ``key = value`` file format.

Keys use the experiment-table names (``depth_multiple``, ``width_multiple``,
``input_shape``, ``epoch``, ``optimizer``, ``learning_rate``, ``momentum``,
``nms_iou``, ``label_smoothing``, ``confidence``, ``mixup_probability``,
``mosaic_probability``) plus a handful of extra keys for the ablation flags and
loss gains.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from oreyolo.errors import InvalidConfigError

NECK_KINDS = ("AFPN", "PAN")
SPP_KINDS = ("SPPFCSPC", "SPPF")

# (w, h) pairs in input pixels for strides 8, 16, 32.
DEFAULT_ANCHORS: tuple[tuple[tuple[float, float], ...], ...] = (
    ((10, 13), (16, 30), (33, 23)),
    ((30, 61), (62, 45), (59, 119)),
    ((116, 90), (156, 198), (373, 326)),
)

STRIDES = (8, 16, 32)


def validate_anchors(anchors) -> tuple[tuple[tuple[float, float], ...], ...]:
    anchors = tuple(tuple((float(w), float(h)) for w, h in scale) for scale in anchors)
    if len(anchors) != 3 or any(len(scale) != 3 for scale in anchors):
        raise InvalidConfigError("anchors must be 3 scales x 3 (w, h) pairs")
    if any(w <= 0 or h <= 0 for scale in anchors for w, h in scale):
        raise InvalidConfigError("anchor dimensions must be positive")
    return anchors


@dataclass(frozen=True)
class ModelConfig:
    depth_multiple: float = 0.20
    width_multiple: float = 0.25
    num_classes: int = 2
    input_size: int = 640
    use_ema: bool = True
    neck_kind: str = "AFPN"
    spp_kind: str = "SPPFCSPC"
    ema_groups: int = 4
    # Backbone stages (0..3, shallow to deep) whose CSP3 block carries EMA.
    ema_stages: tuple[int, ...] = (3,)
    anchors: tuple[tuple[tuple[float, float], ...], ...] = DEFAULT_ANCHORS

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not 0 < self.depth_multiple <= 1:
            raise InvalidConfigError(f"depth_multiple must be in (0, 1], got {self.depth_multiple}")
        if not 0 < self.width_multiple <= 1:
            raise InvalidConfigError(f"width_multiple must be in (0, 1], got {self.width_multiple}")
        if self.num_classes < 1:
            raise InvalidConfigError("num_classes must be >= 1")
        if self.input_size <= 0 or self.input_size % 32:
            raise InvalidConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.neck_kind not in NECK_KINDS:
            raise InvalidConfigError(f"neck_kind must be one of {NECK_KINDS}, got {self.neck_kind!r}")
        if self.spp_kind not in SPP_KINDS:
            raise InvalidConfigError(f"spp_kind must be one of {SPP_KINDS}, got {self.spp_kind!r}")
        if self.ema_groups < 1:
            raise InvalidConfigError("ema_groups must be >= 1")
        if any(s not in (0, 1, 2, 3) for s in self.ema_stages):
            raise InvalidConfigError(f"ema_stages entries must be in 0..3, got {self.ema_stages}")
        validate_anchors(self.anchors)
        if self.use_ema:
            from oreyolo.layers import BACKBONE_WIDTHS, scale_channels

            for stage in self.ema_stages:
                c = scale_channels(BACKBONE_WIDTHS[stage + 1], self.width_multiple)
                if c % self.ema_groups or c // self.ema_groups < 4:
                    raise InvalidConfigError(
                        f"stage {stage} width {c} not splittable into {self.ema_groups} EMA groups of >= 4 channels"
                    )


@dataclass(frozen=True)
class LossWeights:
    alpha_box: float = 0.05
    alpha_obj: float = 1.0
    alpha_cls: float = 0.5
    # strides 8 / 16 / 32, i.e. the 80x80 / 40x40 / 20x20 maps at 640 input
    alpha_balance: tuple[float, float, float] = (4.0, 1.0, 0.4)

    def __post_init__(self) -> None:
        if min(self.alpha_box, self.alpha_obj, self.alpha_cls) < 0 or min(self.alpha_balance) < 0:
            raise InvalidConfigError("loss weights must be non-negative")
        if len(self.alpha_balance) != 3:
            raise InvalidConfigError("alpha_balance needs one weight per output scale")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    epochs: int = 100
    optimizer: str = "AdamW"
    learning_rate: float = 1e-3
    momentum: float = 0.937
    weight_decay: float = 0.0005
    lr_schedule: str = "constant"
    label_smoothing: float = 0.005
    nms_iou: float = 0.45
    confidence: float = 0.25
    mixup_prob: float = 0.5
    mosaic_prob: float = 0.5
    seed: int = 0
    batch_size: int = 16
    data: str = ""

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise InvalidConfigError("epoch must be >= 1")
        if self.optimizer != "AdamW":
            raise InvalidConfigError(f"optimizer must be AdamW, got {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise InvalidConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidConfigError("weight_decay must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise InvalidConfigError("lr_schedule must be 'constant' or 'cosine'")
        if not 0 <= self.label_smoothing < 0.5:
            raise InvalidConfigError("label_smoothing must be in [0, 0.5)")
        for name in ("nms_iou", "confidence", "mixup_prob", "mosaic_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise InvalidConfigError(f"{name} must be in [0, 1], got {v}")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")


# file key -> (section, attribute)
_KEYS: dict[str, tuple[str, str]] = {
    "depth_multiple": ("model", "depth_multiple"),
    "width_multiple": ("model", "width_multiple"),
    "input_shape": ("model", "input_size"),
    "num_classes": ("model", "num_classes"),
    "ema": ("model", "use_ema"),
    "ema_groups": ("model", "ema_groups"),
    "ema_stages": ("model", "ema_stages"),
    "neck": ("model", "neck_kind"),
    "spp": ("model", "spp_kind"),
    "anchors": ("model", "anchors"),
    "box_gain": ("loss", "alpha_box"),
    "obj_gain": ("loss", "alpha_obj"),
    "cls_gain": ("loss", "alpha_cls"),
    "balance": ("loss", "alpha_balance"),
    "epoch": ("train", "epochs"),
    "optimizer": ("train", "optimizer"),
    "learning_rate": ("train", "learning_rate"),
    "momentum": ("train", "momentum"),
    "weight_decay": ("train", "weight_decay"),
    "lr_schedule": ("train", "lr_schedule"),
    "label_smoothing": ("train", "label_smoothing"),
    "nms_iou": ("train", "nms_iou"),
    "confidence": ("train", "confidence"),
    "mixup_probability": ("train", "mixup_prob"),
    "mosaic_probability": ("train", "mosaic_prob"),
    "seed": ("train", "seed"),
    "batch_size": ("train", "batch_size"),
    "data": ("train", "data"),
}
_ATTR_TO_KEY = {v: k for k, v in _KEYS.items()}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(section: str, attr: str, text: str) -> Any:
    if attr == "anchors":
        nums = [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
        if len(nums) != 18:
            raise ValueError("anchors needs 18 numbers (3 scales x 3 anchors x w,h)")
        pairs = [(nums[i], nums[i + 1]) for i in range(0, 18, 2)]
        return validate_anchors([pairs[0:3], pairs[3:6], pairs[6:9]])
    if attr == "alpha_balance":
        return tuple(float(v) for v in text.split(","))
    if attr == "ema_stages":
        return tuple(int(v) for v in text.split(",") if v.strip())
    if attr == "input_size":
        # accepts "640" or "640x640"
        parts = text.lower().replace("×", "x").split("x")
        if len(parts) == 2 and parts[0].strip() != parts[1].strip():
            raise ValueError("only square inputs are supported")
        return int(parts[0])
    owner = {"model": ModelConfig, "loss": LossWeights, "train": TrainConfig}[section]
    kind = {f.name: f.type for f in dataclasses.fields(owner)}[attr]
    if kind == "bool":
        return _parse_bool(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text.strip()


def parse_config(text: str) -> TrainConfig:
    values: dict[str, dict[str, Any]] = {"model": {}, "loss": {}, "train": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise InvalidConfigError(f"unknown config key {key!r} (line {lineno})")
        section, attr = _KEYS[key]
        try:
            values[section][attr] = _parse_value(section, attr, value)
        except ValueError as exc:
            raise InvalidConfigError(f"bad value for {key!r} (line {lineno}): {exc}") from exc
    model = ModelConfig(**values["model"])
    loss = LossWeights(**values["loss"])
    return TrainConfig(model=model, loss=loss, **values["train"])


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        flat: list[Any] = []

        def walk(v):
            if isinstance(v, tuple):
                for item in v:
                    walk(item)
            else:
                flat.append(v)

        walk(value)
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in flat)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for section, obj in (("model", cfg.model), ("loss", cfg.loss), ("train", cfg)):
        for f in dataclasses.fields(obj):
            if section == "train" and f.name in ("model", "loss"):
                continue
            key = _ATTR_TO_KEY[(section, f.name)]
            lines.append(f"{key} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))


def model_config_to_dict(cfg: ModelConfig) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    d["ema_stages"] = list(cfg.ema_stages)
    d["anchors"] = [[list(a) for a in scale] for scale in cfg.anchors]
    return d


def model_config_from_dict(d: dict[str, Any]) -> ModelConfig:
    d = dict(d)
    d["ema_stages"] = tuple(d.get("ema_stages", (3,)))
    if "anchors" in d:
        d["anchors"] = validate_anchors(d["anchors"])
    return ModelConfig(**d)


ABLATIONS: dict[str, ModelConfig] = {
    "base": ModelConfig(use_ema=False, neck_kind="PAN", spp_kind="SPPF"),
    "sppfcspc": ModelConfig(use_ema=False, neck_kind="PAN", spp_kind="SPPFCSPC"),
    "afpn": ModelConfig(use_ema=False, neck_kind="AFPN", spp_kind="SPPF"),
    "ema": ModelConfig(use_ema=True, neck_kind="PAN", spp_kind="SPPF"),
    "afpn_ema_sppf": ModelConfig(use_ema=True, neck_kind="AFPN", spp_kind="SPPF"),
    "full": ModelConfig(),
}
