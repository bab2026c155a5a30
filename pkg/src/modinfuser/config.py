"""Run configuration files: sectioned ``key = value`` text.

Sections and keys::

    [train]    any TrainConfig field (epochs, batch_size, lr_g, mode, ...)
    [weights]  alpha, beta, gamma, lambda1, lambda2
    [phantom]  seed, size, lesion_prob, noise_sigma, supersample
    [paths]    data, out, resume

Unknown sections or keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import PhantomSpec
from .losses import LossWeights
from .model import MEMode
from .train import TrainConfig


class ConfigError(ValueError):
    pass


_PATH_KEYS = ("data", "out", "resume")
_PHANTOM_KEYS = ("seed", "size", "lesion_prob", "noise_sigma", "supersample")
_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "weights")
_WEIGHT_KEYS = tuple(f.name for f in fields(LossWeights))


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    paths: dict[str, str] = field(default_factory=dict)

    def as_sections(self) -> dict[str, dict[str, str]]:
        tr = {k: v for k, v in self.train.describe().items() if not k.startswith("weights.")}
        w = {f.name: repr(getattr(self.train.weights, f.name)) for f in fields(LossWeights)}
        ph = {k: repr(getattr(self.phantom, k)) for k in _PHANTOM_KEYS}
        return {"train": tr, "weights": w, "phantom": ph, "paths": dict(self.paths)}

    def dumps(self) -> str:
        lines = []
        for name, body in self.as_sections().items():
            lines.append(f"[{name}]")
            lines += [f"{k} = {v}" for k, v in body.items()]
            lines.append("")
        return "\n".join(lines)


def _parse_value(kind, raw: str, key: str):
    raw = raw.strip()
    try:
        if raw in ("None", "none", ""):
            return None
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _field_kind(default):
    if isinstance(default, bool):
        return bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


_TRAIN_KINDS = {
    "epochs": int, "batch_size": int, "lr_g": float, "lr_d": float, "mode": MEMode,
    "layers": int, "width": int, "heads": int, "ffn_mult": int, "me_classic": bool,
    "seed": int, "checkpoint_every": int, "val_every": int, "disen_detach": bool, "clip_norm": float,
    "max_steps": int, "deterministic": bool, "lr_schedule": str,
}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse config ``text`` on top of ``base`` (defaults when omitted)."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = base or RunConfig()
    train, phantom, paths = cfg.train, cfg.phantom, dict(cfg.paths)
    weights = train.weights
    allowed = {"train": _TRAIN_KEYS, "weights": _WEIGHT_KEYS, "phantom": _PHANTOM_KEYS, "paths": _PATH_KEYS}
    for section in cp.sections():
        if section not in allowed:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in allowed[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            name = f"{section}.{key}"
            if section == "train":
                try:
                    train = replace(train, **{key: _parse_value(_TRAIN_KINDS[key], raw, name)})
                except ValueError as exc:
                    if isinstance(exc, ConfigError):
                        raise
                    raise ConfigError(f"{name}: {exc}") from None
            elif section == "weights":
                weights = replace(weights, **{key: _parse_value(float, raw, name)})
            elif section == "phantom":
                kind = _field_kind(getattr(PhantomSpec(), key))
                phantom = replace(phantom, **{key: _parse_value(kind, raw, name)})
            else:
                paths[key] = raw.strip()
    return RunConfig(replace(train, weights=weights), phantom, paths)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, base)
