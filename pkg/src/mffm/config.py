"""Experiment configuration read from a sectioned ``key = value`` text file.

Example::

    [experiment]
    benchmark = darcy
    resolutions = 16, 32, 64
    n_samples = 144
    seed = 0
    variant = none
    output_dir = runs/darcy

    [data]
    length_scale = 0.1

    [model]
    hidden = 64, 32
    blocks = 4, 2

    [train]
    lr = 1e-3
    epochs_pretrain = 200
    epochs_e2e = 100
    dtype = float32

    [source]
    kind = calibrated_blur
    tau = 1.5

Per-level source settings may be given in ``[source.level_1]`` sections,
which override ``[source]`` for that level. Unknown sections or keys are
rejected so that typos fail loudly.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .source import SourceSpec
from .tensor_core import GridHierarchy
from .training import TrainConfig

BENCHMARKS = ("darcy", "burgers")
VARIANTS = ("none", "iid", "noblur", "single", "field", "multires_single", "stochastic_e2e")
MATRIX_VARIANTS = ("none", "noblur", "iid", "single", "field", "multires_single")
VARIANT_SOURCE = {"iid": "iid_matched", "noblur": "diagonal"}


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass
class DataConfig:
    length_scale: float = 0.1
    variance: float = 1.0
    viscosity: float = 0.01
    horizon: float = 1.0
    forcing: float = 1.0


@dataclass
class ExperimentConfig:
    benchmark: str = "darcy"
    resolutions: tuple[int, ...] = (16, 32, 64)
    n_samples: int = 144
    seed: int = 0
    variant: str = "none"
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    hidden: tuple[int, ...] = (64, 32)
    blocks: tuple[int, ...] = (4, 2)
    train: TrainConfig = field(default_factory=TrainConfig)
    sources: tuple[SourceSpec, ...] = ()
    k_train: int = 4
    k_val: int = 8

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"benchmark must be one of {BENCHMARKS}, got {self.benchmark!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        try:
            hier = GridHierarchy(tuple(self.resolutions))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        L = hier.n_levels
        if len(self.hidden) != L or len(self.blocks) != L:
            raise ConfigError(f"hidden and blocks need one entry per level ({L})")
        if not self.sources:
            self.sources = (SourceSpec(),) * L
        if len(self.sources) != L:
            raise ConfigError(f"need {L} source specs, got {len(self.sources)}")
        # all randomness flows from the experiment seed
        self.train = replace(self.train, seed=self.seed)
        if self.n_samples < 6:
            raise ConfigError("n_samples must be >= 6 for a 4:1:1 split")

    @property
    def hierarchy(self) -> GridHierarchy:
        return GridHierarchy(tuple(self.resolutions))

    def with_variant(self, variant: str) -> "ExperimentConfig":
        return replace(self, variant=variant)

    def to_text(self) -> str:
        """Canonical config echo; parsing it back yields an equal config."""
        cp = configparser.ConfigParser(interpolation=None)
        cp["experiment"] = {
            "benchmark": self.benchmark,
            "resolutions": ", ".join(map(str, self.resolutions)),
            "n_samples": str(self.n_samples),
            "seed": str(self.seed),
            "variant": self.variant,
            "output_dir": self.output_dir,
            "k_train": str(self.k_train),
            "k_val": str(self.k_val),
        }
        cp["data"] = {f.name: repr(getattr(self.data, f.name)) for f in fields(DataConfig)}
        cp["model"] = {"hidden": ", ".join(map(str, self.hidden)),
                       "blocks": ", ".join(map(str, self.blocks))}
        cp["train"] = {k: (v if isinstance(v, str) else repr(v)) for k, v in self.train.to_dict().items()
                       if k != "seed"}
        for level, spec in enumerate(self.sources):
            cp[f"source.level_{level}"] = {"kind": spec.kind, "tau": repr(spec.tau),
                                          "eps_num": repr(spec.eps_num)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _cast(section, name_types):
    out = {}
    for key, value in section.items():
        if key not in name_types:
            raise ConfigError(f"unknown key {key!r} in [{section.name}]")
        typ = name_types[key]
        out[key] = value if typ is str else typ(value)
    return out


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    allowed = {"experiment", "data", "model", "train", "source"}
    for name in cp.sections():
        if name not in allowed and not name.startswith("source.level_"):
            raise ConfigError(f"unknown section [{name}]")
    try:
        exp = _cast(cp["experiment"], {
            "benchmark": str, "resolutions": _ints, "n_samples": int, "seed": int, "variant": str,
            "output_dir": str, "k_train": int, "k_val": int,
        }) if cp.has_section("experiment") else {}
        data = DataConfig(**_cast(cp["data"], {f.name: float for f in fields(DataConfig)})) \
            if cp.has_section("data") else DataConfig()
        model = _cast(cp["model"], {"hidden": _ints, "blocks": _ints}) if cp.has_section("model") else {}
        train_types = {f.name: (str if f.name == "dtype" else type(f.default)) for f in fields(TrainConfig)
                       if f.name != "seed"}
        train = TrainConfig(**_cast(cp["train"], train_types)) if cp.has_section("train") else TrainConfig()
        src_types = {"kind": str, "tau": float, "eps_num": float}
        base_src = _cast(cp["source"], src_types) if cp.has_section("source") else {}
        res = exp.get("resolutions", ExperimentConfig.resolutions)
        for name in cp.sections():
            if name.startswith("source.level_") and name not in {f"source.level_{l}" for l in range(len(res) - 1)}:
                raise ConfigError(f"[{name}] does not name a level of the hierarchy")
        sources = []
        for level in range(len(res) - 1):
            name = f"source.level_{level}"
            kw = dict(base_src)
            if cp.has_section(name):
                kw.update(_cast(cp[name], src_types))
            sources.append(SourceSpec(**kw))
        return ExperimentConfig(**exp, **model, data=data, train=train, sources=tuple(sources))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
