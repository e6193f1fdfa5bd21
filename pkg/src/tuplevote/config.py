"""Run configuration: one dataclass per module, flat ``key = value`` text
with ``[section]`` headers on disk."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .features import DescriptorConfig
from .pipeline import PipelineConfig
from .predictor import OracleConfig, PredictorConfig
from .refine import RefineConfig
from .scene import NoiseConfig
from .voting import FilterConfig

BUILTIN_PREFIX = "builtin:"


@dataclass(frozen=True)
class RunConfig:
    # mesh files (OBJ/PLY) or builtin:<cube|cylinder|lshape|sphere>
    meshes: tuple[str, ...] = ("builtin:lshape",)
    # object half-extents in meters; empty means the mesh's own extents
    scale: tuple[float, ...] = (0.05, 0.04, 0.03)
    views: int = 10
    pose_mode: str = "free"
    seed: int = 0
    tuples: int = 5000
    tuple_size: int = 5
    normal_k: int = 16
    decode: str = "expectation"
    refine_enabled: bool = True
    train_views: int = 2000
    tuples_per_view: int = 100
    output: str = "out"
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)

    def __post_init__(self):
        if self.tuples < 1:
            raise ValueError("tuple count K must be at least 1")
        if self.tuple_size < 2:
            raise ValueError("tuple size N must be at least 2")
        if self.scale and (len(self.scale) != 3 or min(self.scale) <= 0):
            raise ValueError("scale needs three positive half-extents")
        if self.decode not in ("expectation", "sample"):
            raise ValueError("decode must be 'expectation' or 'sample'")

    def missing_files(self) -> list[str]:
        return [m for m in self.meshes if not m.startswith(BUILTIN_PREFIX) and not Path(m).is_file()]

    def pipeline(self, workers: int = 1) -> PipelineConfig:
        return PipelineConfig(
            tuples=self.tuples, tuple_size=self.tuple_size, normal_k=self.normal_k,
            decode=self.decode, refine_enabled=self.refine_enabled, seed=self.seed,
            workers=workers, descriptor=self.descriptor, filter=self.filter, refine=self.refine,
        )


_SECTIONS = ("noise", "oracle", "predictor", "filter", "refine", "descriptor")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else str
        return tuple(kind(p.strip()) for p in text.split(",") if p.strip())
    return type(default)(text)


def _scalar_fields(obj):
    return [f for f in dataclasses.fields(obj) if f.name not in _SECTIONS]


def dumps(cfg: RunConfig = RunConfig()) -> str:
    lines = ["[run]"]
    lines += [f"{f.name} = {_format(getattr(cfg, f.name))}" for f in _scalar_fields(cfg)]
    for name in _SECTIONS:
        sub = getattr(cfg, name)
        lines += ["", f"[{name}]"]
        lines += [f"{f.name} = {_format(getattr(sub, f.name))}" for f in dataclasses.fields(sub)]
    return "\n".join(lines) + "\n"


def loads(text: str) -> RunConfig:
    """Parse config text; unspecified keys keep their defaults, unknown
    sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    base = RunConfig()
    unknown = set(parser.sections()) - {"run", *_SECTIONS}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")

    def update(obj, section):
        if section not in parser:
            return {}
        names = {f.name for f in dataclasses.fields(obj)} - set(_SECTIONS)
        out = {}
        for key, raw in parser[section].items():
            if key not in names:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            out[key] = _parse(raw, getattr(obj, key))
        return out

    subs = {name: dataclasses.replace(getattr(base, name), **update(getattr(base, name), name))
            for name in _SECTIONS}
    return dataclasses.replace(base, **update(base, "run"), **subs)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def as_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
