"""Run configuration: YAML file validated section by section."""

from __future__ import annotations

import hashlib
import json
import warnings
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .atomic import CESIUM_D2, TWO_LEVEL, AtomSpec
from .detection import AnalyzerConfig, DetectionGeometry
from .field import FieldConfig, QuadrupoleField, light_shift_for
from .trajectory import MotionModel, TrapEnvironment

INTENSITY_ENVELOPE = (0.3, 3.6)
DETUNING_ENVELOPE = (-5.2, -1.1)
ATOM_PRESETS = {"cs-d2": CESIUM_D2, "two-level": TWO_LEVEL}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists (field path, message) pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{loc}: {msg}" for loc, msg in self.errors))


class EnvelopeWarning(UserWarning):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AtomSection(_Section):
    preset: Optional[Literal["cs-d2", "two-level"]] = "cs-d2"
    F_g: Optional[int] = None
    gamma: Optional[float] = None
    wavelength: Optional[float] = None
    mass: Optional[float] = None
    sat_intensity: Optional[float] = None
    g_ground: Optional[float] = None
    g_excited: Optional[float] = None

    def build(self) -> AtomSpec:
        base = ATOM_PRESETS[self.preset or "cs-d2"]
        over = {k: v for k, v in self.model_dump().items() if k != "preset" and v is not None}
        if "F_g" in over:
            over["F_e"] = over["F_g"] + 1
        kw = {k: getattr(base, k) for k in AtomSpec.__dataclass_fields__}
        kw.update(over)
        return AtomSpec(**kw)


ComplexPair = tuple[float, float]


class FieldSection(_Section):
    phi: float = 0.0
    psi: float = 0.0
    intensity: float = Field(0.7, ge=0.0)
    detuning: float = -2.7
    uniform_field: Optional[list[Union[float, ComplexPair]]] = None

    @field_validator("uniform_field")
    @classmethod
    def _three(cls, v):
        if v is not None and len(v) != 3:
            raise ValueError("uniform_field needs three components")
        return v

    def build(self, spec: AtomSpec) -> FieldConfig:
        uf = None
        if self.uniform_field is not None:
            uf = tuple(complex(c[0], c[1]) if isinstance(c, (tuple, list)) else complex(c)
                       for c in self.uniform_field)
        return FieldConfig(phi=self.phi, psi=self.psi, k=spec.k, intensity=self.intensity,
                           detuning=self.detuning, uniform_field=uf)


class QuadrupoleSection(_Section):
    enabled: bool = True
    gradient: float = Field(0.125, ge=0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)


class EnvironmentSection(_Section):
    larmor_dephasing: float = Field(0.0, ge=0.0)
    zeeman: bool = True
    b_threshold: float = Field(1e-7, ge=0.0)


class MotionSection(_Section):
    kind: Literal["static", "ballistic", "langevin"] = "static"
    r0: tuple[float, float, float] = (0.0, 0.0, 0.0)
    temperature: Optional[float] = Field(None, ge=0.0)
    c_T: Optional[float] = Field(None, ge=0.0)
    friction: float = Field(0.0, ge=0.0)
    spread: float = Field(0.0, ge=0.0)
    persistence: float = Field(10.0, gt=0.0)

    @model_validator(mode="after")
    def _one_temperature(self):
        if self.temperature is not None and self.c_T is not None:
            raise ValueError("give either temperature or c_T, not both")
        return self

    def build(self, spec: AtomSpec, field: FieldConfig) -> MotionModel:
        kw = dict(kind=self.kind, r0=tuple(self.r0), friction=self.friction, spread=self.spread,
                  persistence=self.persistence)
        if self.c_T is not None:
            return MotionModel.from_light_shift(light_shift_for(field), spec, self.c_T, **kw)
        return MotionModel(temperature=self.temperature or 0.0, **kw)


class DetectionSection(_Section):
    k_det: tuple[float, float, float] = (2 ** -0.5, 2 ** -0.5, 0.0)
    solid_angle_fraction: float = Field(0.05, ge=0.0, le=1.0)
    quantum_efficiency: float = Field(0.47, ge=0.0, le=1.0)
    dark_rate: float = Field(10.0, ge=0.0)
    stray_rate: float = Field(0.0, ge=0.0)
    resolution: float = Field(100e-9, gt=0.0)
    dead_time: float = Field(700e-9, ge=0.0)

    @field_validator("k_det")
    @classmethod
    def _unit(cls, v):
        n = float(np.linalg.norm(v))
        if not n > 0:
            raise ValueError("k_det must be non-zero")
        return tuple(float(x) / n for x in v)

    def build(self) -> DetectionGeometry:
        return DetectionGeometry(**self.model_dump())


class AnalyzerSection(_Section):
    kind: Literal["circular", "linear", "none"] = "circular"


class SimulationSection(_Section):
    dt: Optional[float] = Field(None, gt=0.0)
    motion_update: float = Field(1.0, gt=0.0)
    batch_size: int = Field(16, ge=1)


class OutputSection(_Section):
    stream: str = "clicks.bin"
    truth: Optional[str] = "truth.bin"
    report: str = "report.json"


class RunConfig(_Section):
    seed: int
    duration: float = Field(gt=0.0)
    n_atoms: int = Field(1, ge=1, le=256)
    atom: AtomSection = AtomSection()
    field: FieldSection = FieldSection()
    quadrupole: QuadrupoleSection = QuadrupoleSection()
    environment: EnvironmentSection = EnvironmentSection()
    motion: MotionSection = MotionSection()
    detection: DetectionSection = DetectionSection()
    analyzer: AnalyzerSection = AnalyzerSection()
    simulation: SimulationSection = SimulationSection()
    output: OutputSection = OutputSection()

    def envelope_warnings(self) -> list[str]:
        out = []
        lo, hi = INTENSITY_ENVELOPE
        if self.field.uniform_field is None and not lo <= self.field.intensity <= hi:
            out.append(f"field.intensity={self.field.intensity} outside the {lo}-{hi} I0 envelope")
        lo, hi = DETUNING_ENVELOPE
        if self.field.uniform_field is None and not lo <= self.field.detuning <= hi:
            out.append(f"field.detuning={self.field.detuning} outside the {lo}..{hi} Gamma envelope")
        return out

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _errors(exc: ValidationError):
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        yield loc, e["msg"]


def parse_config(data: dict, warn: bool = True) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError([("<root>", "config must be a mapping")])
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_errors(exc)) from None
    if warn:
        for msg in cfg.envelope_warnings():
            warnings.warn(msg, EnvelopeWarning, stacklevel=2)
    return cfg


def load_config(path, warn: bool = True) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([("<file>", f"YAML syntax error: {exc}")]) from None
    return parse_config(data, warn)


class Run:
    """Domain objects built from a validated RunConfig."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        try:
            self.spec = cfg.atom.build()
            self.field = cfg.field.build(self.spec)
            quad = (QuadrupoleField(cfg.quadrupole.gradient, tuple(cfg.quadrupole.center))
                    if cfg.quadrupole.enabled else None)
            self.env = TrapEnvironment(self.field, quad, cfg.environment.larmor_dephasing,
                                       cfg.environment.b_threshold, cfg.environment.zeeman)
            self.motion = cfg.motion.build(self.spec, self.field)
            self.geometry = cfg.detection.build()
            self.analyzer = AnalyzerConfig(cfg.analyzer.kind)
        except ValueError as exc:
            raise ConfigError([("<model>", str(exc))]) from None
