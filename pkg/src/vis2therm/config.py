"""Flat key-value experiment configuration.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. Keys are dotted (``gan.base_channels``) but the namespace is flat.
Values are typed by the key's declared kind; ``none`` clears an optional
value. Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .evaluation import EvalSettings
from .exceptions import ConfigError
from .finetune import FineTuneSchedule
from .gan import DiscriminatorConfig, GeneratorConfig
from .mixture import MixtureSpec, parse_regime
from .perceptual import DEFAULT_TAP
from .translator import GanHyperParams

PATH_KEYS = (
    "train_manifest",
    "val_manifest",
    "test_manifest",
    "synthetic_manifest",
    "gan_checkpoint",
    "resume_checkpoint",
    "phi_checkpoint",
    "init_checkpoint",
    "detector_checkpoint",
)


@dataclass(frozen=True)
class Key:
    kind: str  # path | str | int | float | bool | ints | floats
    default: Any = None
    optional: bool = False


def _from_dataclass(prefix: str, obj, skip: Iterable[str] = ()) -> dict[str, Key]:
    keys = {}
    for f in dataclasses.fields(obj):
        if f.name in skip:
            continue
        value = getattr(obj, f.name)
        if isinstance(value, bool):
            kind = "bool"
        elif isinstance(value, int):
            kind = "int"
        elif isinstance(value, float):
            kind = "float"
        elif isinstance(value, tuple):
            kind = "floats" if any(isinstance(v, float) for v in value) else "ints"
        elif isinstance(value, str):
            kind = "str"
        else:
            raise TypeError(f"no config kind for field {f.name}")
        keys[f"{prefix}.{f.name}"] = Key(kind, value)
    return keys


SCHEMA: dict[str, Key] = {
    **{k: Key("path", optional=True) for k in PATH_KEYS},
    "seed": Key("int", 0),
    "data.sample_stride": Key("int", 1),
    "data.min_height": Key("float", 50.0),
    "data.drop_occluded": Key("bool", True),
    **_from_dataclass("gan", GeneratorConfig()),
    **_from_dataclass("disc", DiscriminatorConfig()),
    **_from_dataclass("gan", GanHyperParams(), skip=("max_steps", "seed", "checkpoint_dir")),
    "gan.max_steps": Key("int", None, optional=True),
    "phi.tap_layer": Key("str", DEFAULT_TAP),
    "detector.width": Key("int", 16),
    "detector.backbone_depth": Key("ints", (1, 1, 2, 2, 1)),
    "detector.modality": Key("str", "thermal"),
    "detector.conf_threshold": Key("float", 0.01),
    "detector.nms_iou": Key("float", 0.45),
    **_from_dataclass("schedule", FineTuneSchedule(), skip=("grad_clip",)),
    "schedule.grad_clip": Key("float", 10.0, optional=True),
    "mixture.regime": Key("str", "real"),
    "mixture.independent": Key("bool", False),
    **_from_dataclass("eval", EvalSettings()),
    "eval.overlay_threshold": Key("float", 0.5),
    "toy.n_train": Key("int", 64),
    "toy.n_test": Key("int", 32),
    "toy.height": Key("int", 128),
    "toy.width": Key("int", 128),
}

# Desk-scale settings written by the toy-data command alongside the manifests.
TOY_SETTINGS: dict[str, str] = {
    "gan.base_channels": "16",
    "gan.num_rrdb": "1",
    "gan.growth_rate": "8",
    "disc.base_features": "16",
    "gan.lr_generator": "1e-3",
    "gan.lr_discriminator": "1e-4",
    "gan.epochs": "1000",
    "gan.max_steps": "300",
    "phi.tap_layer": "stages.stage5",
    "detector.width": "16",
    "schedule.input_size": "128,128",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str, base_dir: Path | None):
    spec = SCHEMA[key]
    text = raw.strip()
    if spec.optional and text.lower() in ("none", ""):
        return None
    try:
        if spec.kind == "path":
            path = Path(os.path.expanduser(text))
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return str(Path(os.path.normpath(path)))
        if spec.kind == "str":
            return text
        if spec.kind == "int":
            return int(text)
        if spec.kind == "float":
            return float(text)
        if spec.kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if spec.kind == "ints":
            return tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())
        if spec.kind == "floats":
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None
    raise AssertionError(spec.kind)


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        pairs[key] = value
    return pairs


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved, typed experiment settings."""

    values: Mapping[str, Any] = field(default_factory=lambda: {k: s.default for k, s in SCHEMA.items()})
    source: str | None = None

    @classmethod
    def from_pairs(
        cls, pairs: Mapping[str, str], base_dir: Path | None = None, source: str | None = None
    ) -> "ExperimentConfig":
        values = {k: s.default for k, s in SCHEMA.items()}
        for key, raw in pairs.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw, base_dir)
        return cls(values, source)

    @classmethod
    def load(cls, path=None, overrides: Mapping[str, str] | None = None) -> "ExperimentConfig":
        """Read ``path`` (optional) and apply ``overrides``; override paths resolve against the cwd."""
        pairs: dict[str, str] = {}
        base = None
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            pairs = parse_pairs(path.read_text(encoding="utf-8").splitlines(), str(path))
            base = path.resolve().parent
        cfg = cls.from_pairs(pairs, base, str(path) if path else None)
        if overrides:
            for key in overrides:
                if key not in SCHEMA:
                    raise ConfigError(f"unknown config key {key!r}")
            extra = {k: _coerce(k, v, Path.cwd()) for k, v in overrides.items()}
            cfg = cfg.with_values(**extra)
        return cfg

    def with_values(self, **updates) -> "ExperimentConfig":
        values = dict(self.values)
        values.update(updates)
        return dataclasses.replace(self, values=values)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def require(self, key: str):
        value = self.values.get(key)
        if value is None:
            raise ConfigError(f"config key {key!r} is required for this command")
        return value

    def require_path(self, key: str) -> Path:
        path = Path(self.require(key))
        if not path.exists():
            raise ConfigError(f"config key {key!r}: path does not exist: {path}")
        return path

    def optional_path(self, key: str) -> Path | None:
        return None if self.values.get(key) is None else self.require_path(key)

    def section(self, prefix: str) -> dict[str, Any]:
        prefix = prefix + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    # -- typed views ------------------------------------------------------------------

    def generator_config(self) -> GeneratorConfig:
        names = {f.name for f in dataclasses.fields(GeneratorConfig)}
        return GeneratorConfig(**{k: v for k, v in self.section("gan").items() if k in names})

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(**self.section("disc"))

    def gan_hyper(self) -> GanHyperParams:
        names = {f.name for f in dataclasses.fields(GanHyperParams)}
        kw = {k: v for k, v in self.section("gan").items() if k in names}
        return GanHyperParams(seed=self.seed, **kw)

    def schedule(self) -> FineTuneSchedule:
        return FineTuneSchedule(**self.section("schedule"))

    def mixture_spec(self) -> MixtureSpec:
        try:
            return parse_regime(self["mixture.regime"], self.seed, self["mixture.independent"])
        except ValueError as exc:
            raise ConfigError(f"config key 'mixture.regime': {exc}") from None

    def eval_settings(self) -> EvalSettings:
        names = {f.name for f in dataclasses.fields(EvalSettings)}
        return EvalSettings(**{k: v for k, v in self.section("eval").items() if k in names})

    # -- serialization -----------------------------------------------------------------

    def to_text(self, keys: Iterable[str] | None = None) -> str:
        keys = sorted(self.values) if keys is None else keys
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in keys)

    def digest(self) -> str:
        """SHA-256 over every resolved setting, independent of file layout and key order."""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def provenance(self) -> dict[str, Any]:
        return {"config_digest": self.digest(), "seed": self.seed}
