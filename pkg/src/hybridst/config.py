"""Versioned JSON run configuration with strict key checking."""

import json
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .forest import ForestConfig
from .hybrid import HybridConfig
from .simulate import SpatioTemporalConfig, TemporalJumpsConfig
from .studies import MeshConfig

SCHEMA_VERSION = 1
STUDIES = ("spatiotemporal", "temporal-jumps")


class ConfigError(ValueError):
    pass


def sub_seed(seed, name):
    """Deterministic named child seed of a top-level seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class SimulationSection:
    study: str = "spatiotemporal"
    seed: int = None
    params: dict = field(default_factory=dict)


@dataclass
class ModelSection:
    mesh_spacing: float = MeshConfig.spacing
    mesh_margin: float = MeshConfig.margin
    rw_order: int = 2
    marginals: str = None
    interval: str = "eta"


@dataclass
class CvSection:
    blocks: int = 6


@dataclass
class OutputSection:
    directory: str = "out"
    figures: bool = False


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 1
    threads: int = 1
    simulation: SimulationSection = field(default_factory=SimulationSection)
    model: ModelSection = field(default_factory=ModelSection)
    hybrid: dict = field(default_factory=dict)
    rf: dict = field(default_factory=dict)
    cv: CvSection = field(default_factory=CvSection)
    output: OutputSection = field(default_factory=OutputSection)

    def seeds(self):
        return {name: sub_seed(self.seed, name) for name in ("data", "rf", "kmeans")}

    def data_seed(self):
        s = self.simulation.seed
        return sub_seed(self.seed, "data") if s is None else int(s)

    def forest_config(self):
        opts = {"seed": sub_seed(self.seed, "rf"), "n_threads": self.threads}
        opts.update(self.rf)
        return ForestConfig(**opts)

    def hybrid_config(self, **overrides):
        opts = dict(self.hybrid)
        opts.update(overrides)
        if "kld_subset" in opts and opts["kld_subset"] is not None:
            opts["kld_subset"] = tuple(opts["kld_subset"])
        return HybridConfig(**opts)

    def mesh_config(self):
        return MeshConfig(self.model.mesh_spacing, self.model.mesh_margin)

    def study_config(self):
        cls = SpatioTemporalConfig if self.simulation.study == "spatiotemporal" else TemporalJumpsConfig
        params = dict(self.simulation.params)
        if "gamma" in params:
            params["gamma"] = tuple(params["gamma"])
        return cls(**params)

    def to_dict(self):
        return asdict(self)


def _check_keys(section, allowed, where):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    names = [f.name for f in fields(cls)]
    _check_keys(raw, names, where)
    return cls(**raw)


def parse_config(raw):
    """Validate a decoded JSON document and return a :class:`RunConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    _check_keys(raw, [f.name for f in fields(RunConfig)], "top level")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    try:
        cfg = RunConfig(
            schema_version=version,
            seed=int(raw.get("seed", 1)),
            threads=int(raw.get("threads", 1)),
            simulation=_build(SimulationSection, raw.get("simulation", {}), "simulation"),
            model=_build(ModelSection, raw.get("model", {}), "model"),
            hybrid=dict(raw.get("hybrid", {})),
            rf=dict(raw.get("rf", {})),
            cv=_build(CvSection, raw.get("cv", {}), "cv"),
            output=_build(OutputSection, raw.get("output", {}), "output"),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg.simulation.study not in STUDIES:
        raise ConfigError(f"simulation.study must be one of {STUDIES}")
    _check_keys(cfg.hybrid, [f.name for f in fields(HybridConfig)], "hybrid")
    _check_keys(cfg.rf, [f.name for f in fields(ForestConfig)], "rf")
    study_cls = SpatioTemporalConfig if cfg.simulation.study == "spatiotemporal" else TemporalJumpsConfig
    _check_keys(cfg.simulation.params, [f.name for f in fields(study_cls)], "simulation.params")
    if cfg.model.interval not in ("eta", "predictive"):
        raise ConfigError("model.interval must be 'eta' or 'predictive'")
    if cfg.model.marginals not in (None, "plugin", "integrated"):
        raise ConfigError("model.marginals must be 'plugin' or 'integrated'")
    if cfg.threads < 1:
        raise ConfigError("threads must be at least 1")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    try:
        cfg.hybrid_config()
        cfg.forest_config()
        cfg.study_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw)
