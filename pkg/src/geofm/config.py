"""Configuration dataclasses, presets, and the JSON config schema."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

import jsonschema

from .datakit import AugSpec, DatasetSpec

MODALITIES = ("HR", "MS", "SAR")
IN_CHANNELS = {"HR": 3, "MS": 10, "SAR": 2}
PATCH_SIZE = 4


def _default_merge():
    return {"HR": [True, True, True], "MS": [False, False, False], "SAR": [False, False, False]}


@dataclass
class BackboneConfig:
    base_dim: int = 32
    depths: tuple[int, int, int, int] = (2, 2, 4, 2)
    window_size: int = 8
    head_dim: int = 32
    mlp_ratio: float = 4.0
    n_prompts: int = 4
    moe_last_L: int = 2
    n_experts: int = 4
    top_k: int = 1
    apm_merge: dict[str, list[bool]] = field(default_factory=_default_merge)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        c = self.base_dim
        return (c, 2 * c, 4 * c, 8 * c)

    def heads(self, dim: int) -> int:
        return max(1, dim // self.head_dim)

    def validate(self) -> None:
        if len(self.depths) != 4:
            raise ValueError("depths must list four stages")
        if self.top_k < 1 or self.top_k > self.n_experts:
            raise ValueError(f"need 1 <= top_k <= n_experts, got k={self.top_k}, M={self.n_experts}")
        if not 0 <= self.moe_last_L <= sum(self.depths):
            raise ValueError("moe_last_L exceeds the total number of blocks")
        for m in MODALITIES:
            if len(self.apm_merge.get(m, ())) != 3:
                raise ValueError(f"apm_merge[{m!r}] must hold three flags (stages 2-4)")

    @classmethod
    def full_size(cls) -> "BackboneConfig":
        """Full-size hyperparameters; per-stage depths are a guess summing to 24."""
        return cls(base_dim=352, depths=(2, 2, 18, 2), window_size=8, head_dim=32,
                   mlp_ratio=4.0, n_prompts=4, moe_last_L=6, n_experts=8, top_k=1)


@dataclass
class FusionConfig:
    depth: int = 2
    head_dim: int = 64
    mlp_ratio: float = 4.0
    region_rows: int = 64
    region_cols: int = 64
    n_prototypes: int = 8
    proto_momentum: float = 0.99
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 3


@dataclass
class ObjectiveConfig:
    head_hidden: int = 256
    head_out: int = 256
    head_bottleneck: int = 64
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    center_momentum: float = 0.9
    n_queries: int = 16
    decoder_heads: int = 1
    n_clusters: int = 8
    n_classes: int = 4
    text_dim: int = 64
    ita_tau: float = 0.1
    lambda_mgcl: float = 1.0
    lambda_ita: float = 1.0
    lambda_qsacl: float = 1.0
    aux_weight: float = 0.01


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    seed: int = 0


@dataclass
class TrainConfig:
    total_iters: int = 300
    batch_size: int = 4
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    wd_start: float = 0.04
    wd_end: float = 0.2
    ema_start: float = 0.996
    ema_end: float = 1.0
    clip_norm: float = 3.0
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def validate(self) -> None:
        for name in ("lr_start", "lr_end", "wd_start", "wd_end", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("ema_start", "ema_end"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.total_iters < 1 or self.batch_size < 1:
            raise ValueError("total_iters and batch_size must be >= 1")


@dataclass
class PretrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    aug: AugSpec = field(default_factory=AugSpec)
    data: DatasetSpec = field(default_factory=lambda: DatasetSpec(count=128))


# -- presets ---------------------------------------------------------------

# sub-sampling activation of the HR merge at stages 2, 3, 4
APM_ABLATION = {
    "1/8": [True, True, True],
    "1/4": [True, True, False],
    "1/2": [True, False, False],
    "none": [False, False, False],
}


def apply_preset(cfg: PretrainConfig, preset: str) -> PretrainConfig:
    kind, _, value = preset.partition(":")
    if kind != "apm-ablation" or value not in APM_ABLATION:
        raise ValueError(f"unknown preset {preset!r}; expected apm-ablation:{{{','.join(APM_ABLATION)}}}")
    cfg.model.backbone.apm_merge = dict(cfg.model.backbone.apm_merge, HR=list(APM_ABLATION[value]))
    return cfg


# -- dict / JSON conversion ------------------------------------------------

def to_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def _convert(tp, value):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _from_dict(tp, value)
    if origin is tuple:
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v) for v in value)
        return tuple(_convert(a, v) for a, v in zip(args, value))
    if origin is list:
        (arg,) = typing.get_args(tp)
        return [_convert(arg, v) for v in value]
    if origin is dict:
        _, arg = typing.get_args(tp)
        return {k: _convert(arg, v) for k, v in value.items()}
    if tp is float:
        return float(value)
    return value


def _from_dict(cls, data: dict, base=None):
    """Overlay ``data`` on ``base`` (or the class defaults), recursing into sections."""
    base = cls() if base is None else base
    hints = typing.get_type_hints(cls)
    updates = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            updates[f.name] = _from_dict(tp, data[f.name], getattr(base, f.name))
        else:
            updates[f.name] = _convert(tp, data[f.name])
    return dataclasses.replace(base, **updates)


def _schema_for(tp) -> dict:
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        hints = typing.get_type_hints(tp)
        return {
            "type": "object",
            "additionalProperties": False,
            "properties": {f.name: _schema_for(hints[f.name]) for f in dataclasses.fields(tp)},
        }
    if origin is tuple:
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return {"type": "array", "items": _schema_for(args[0])}
        return {"type": "array", "prefixItems": [_schema_for(a) for a in args],
                "minItems": len(args), "maxItems": len(args)}
    if origin is list:
        return {"type": "array", "items": _schema_for(typing.get_args(tp)[0])}
    if origin is dict:
        return {"type": "object", "additionalProperties": _schema_for(typing.get_args(tp)[1])}
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    raise TypeError(f"no schema for {tp}")


CONFIG_SCHEMA = {"$schema": "https://json-schema.org/draft/2020-12/schema", **_schema_for(PretrainConfig)}


class ConfigError(ValueError):
    pass


def load_config(data: dict) -> PretrainConfig:
    """Validate a JSON document against ``CONFIG_SCHEMA`` and build the config."""
    try:
        jsonschema.validate(data, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from exc
    cfg = _from_dict(PretrainConfig, data)
    try:
        cfg.model.backbone.validate()
        cfg.train.validate()
        cfg.aug.validate()
        cfg.data.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def model_config_from_dict(data: dict) -> ModelConfig:
    return _from_dict(ModelConfig, data)
