"""Flat ``key = value`` run configuration mirroring ModelConfig and TrainConfig.

Lines are UTF-8, ``#`` starts a comment, unknown keys are fatal.  Command-line
flags are applied on top, so flags win over file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Union

from .model import ConfigError, ModelConfig
from .train import TrainConfig


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _kernels(text: str) -> tuple:
    """``"4:4,2:2,1:1"`` -> ((4, 4), (2, 2), (1, 1)); ``k`` alone means stride k."""
    pairs = []
    for part in text.split(","):
        k, _, s = part.strip().partition(":")
        pairs.append((int(k), int(s) if s else int(k)))
    return tuple(pairs)


def _optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


MODEL_KEYS: dict[str, Callable[[str], Any]] = {
    "num_classes": int,
    "use_patch_extraction": _bool,
    "use_attention_classifier": _bool,
    "patch_channels": int,
    "hidden_width": int,
    "attention_scale_mode": str,
    "pad_to": int,
    "patch_padding": str,
    "patch_kernels": _kernels,
    "backbone_tap": str,
    "backbone_activation": str,
    "backbone_init": str,
    "input_size": int,
    "dtype": str,
}

TRAIN_KEYS: dict[str, Callable[[str], Any]] = {
    "batch_size": int,
    "stage1_lr": float,
    "stage2_lr": float,
    "clip_global_norm": float,
    "plateau_patience": int,
    "plateau_factor": float,
    "plateau_min_lr": float,
    "decay_rate": float,
    "decay_steps": _optional_int,
    "early_stop_patience": int,
    "restore_best": _bool,
    "max_epochs_stage1": int,
    "max_epochs_stage2": int,
    "unfreeze_top_n": int,
    "seed": int,
}

ALL_KEYS = {**MODEL_KEYS, **TRAIN_KEYS}


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=dict)

    def set(self, key: str, value: Any) -> None:
        if key not in ALL_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def model_config(self, **defaults) -> ModelConfig:
        kwargs = dict(defaults)
        kwargs.update({k: v for k, v in self.values.items() if k in MODEL_KEYS})
        cfg = ModelConfig(**kwargs)
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig()
        for k, v in self.values.items():
            if k not in TRAIN_KEYS:
                continue
            if k.startswith("plateau_"):
                setattr(cfg.plateau, k[len("plateau_"):], v)
            else:
                setattr(cfg, k, v)
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    rc = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            rc.values[key] = ALL_KEYS[key](value.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return rc


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse_config_text(text, str(p))
