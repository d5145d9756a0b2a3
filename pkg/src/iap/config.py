"""Run configuration: defaults, ``key = value`` files and flag overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .attack import AttackConfig
from .localization import SHAPES, patch_side


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    dataset: str = "synthetic"  # "synthetic" or a directory of CIFAR-10 binary batches
    n_train: int = 3000
    n_test: int = 1000
    data_seed: int = 0
    limit: int = 200
    # model
    model: str = ""
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    batch: int = 64
    # attack
    target: int = -1  # negative: (label + 1) mod K
    patch_frac: float = 0.14
    patch_shape: str = "rect"
    stride: int = 1
    w1: float = 1.0
    w2: float = 0.0
    w3: float = 0.3
    eta: float = 2.0
    s: float = 0.9
    T: int = 1000
    reinit_limit: int = 3
    reinit_factor: float = 0.5
    update_rule: str = "iap"
    lam: float = 1e-4
    cam_resize: str = "bilinear"
    # baselines / eval
    baselines: bool = False
    mpgd_steps: int = 200
    mpgd_step: float = 1 / 255
    epsilon: float = 16 / 255
    lavan_steps: int = 1000
    lavan_step: float = 1.0
    axis: str = "patch_size"
    values: str = ""
    # run
    seed: int = 42
    out: str = "runs/default"
    workers: int = 1
    chunk: int = 25

    def validate(self) -> "RunConfig":
        if self.patch_shape not in SHAPES:
            raise ConfigError(f"patch_shape must be one of {SHAPES}, got {self.patch_shape!r}")
        if not 0 < self.patch_frac <= 1:
            raise ConfigError("patch_frac must lie in (0, 1]")
        if self.workers < 1 or self.chunk < 1 or self.limit < 1:
            raise ConfigError("workers, chunk and limit must be >= 1")
        if self.axis not in ABLATION_AXES:
            raise ConfigError(f"axis must be one of {tuple(ABLATION_AXES)}, got {self.axis!r}")
        self.attack_config((32, 32)).validate()
        return self

    def attack_config(self, image_shape) -> AttackConfig:
        side = patch_side(self.patch_frac, image_shape)
        return AttackConfig(
            w1=self.w1, w2=self.w2, w3=self.w3, eta=self.eta, s=self.s, T=self.T,
            reinit_limit=self.reinit_limit, reinit_factor=self.reinit_factor, stride=self.stride,
            patch_w=side, patch_h=side, shape=self.patch_shape, seed=self.seed, lam=self.lam,
            cam_resize=self.cam_resize, update_rule=self.update_rule,
        )

    def dump(self) -> str:
        lines = ["# effective configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


ABLATION_AXES = {
    "patch_size": ("patch_frac", [0.04, 0.08, 0.14]),
    "w3": ("w3", [0.0, 1.0, 3.0, 7.0, 10.0]),
    "update_rule": ("update_rule", ["iap", "adam"]),
    "iterations": ("T", [100, 250, 500, 1000]),
}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(name: str, kind, text: str):
    text = text.strip()
    try:
        if kind is bool or kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return text


def _types() -> dict:
    return {f.name: f.type for f in fields(RunConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    types = _types()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, types[key], value)
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then non-None ``overrides``."""
    values = {}
    if path:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(p)))
    types = _types()
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, types[key], value) if isinstance(value, str) else value
    return dataclasses.replace(RunConfig(), **values).validate()
