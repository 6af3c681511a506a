from __future__ import annotations

import hashlib
import json
import logging
import re
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Sequence, Union

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, field_validator, model_validator

from gp_core.model import Nonlinearity
from gp_core.precond import MetricKind, PrecondSpec
from gp_core.riemann import SNAPSHOT_MEMORY, PRGConfig, StageSpec

logger = logging.getLogger(__name__)

_STAGE_KEY = re.compile(r"^stage\.(\d+)\.(\w+)$")
_SECTIONS = ("model", "solve", "spectrum", "rates", "output")


class ConfigError(ValueError):
    """Invalid configuration; `paths` are the dotted keys at fault"""

    def __init__(self, message: str, paths: Optional[List[str]] = None):
        super().__init__(message)
        self.paths = paths or []

    @classmethod
    def from_validation_error(cls, error: ValidationError) -> "ConfigError":
        lines = []
        paths = []
        for item in error.errors():
            path = _dotted_path(item.get("loc", ()))
            paths.append(path)
            lines.append(f"{path}: {item.get('msg')}")
        return cls("Invalid configuration:\n  " + "\n  ".join(lines), paths)


def _dotted_path(loc: Sequence[Union[str, int]]) -> str:
    parts = list(loc)
    # solve.stages.<i>.<field> is written stage.<i+1>.<field> in config files
    if len(parts) >= 3 and parts[:2] == ["solve", "stages"] and isinstance(parts[2], int):
        return ".".join(["stage", str(parts[2] + 1)] + [str(p) for p in parts[3:]])
    return ".".join(str(p) for p in parts)


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


OrderingList = Annotated[List[Literal["amd", "natural"]], BeforeValidator(_split_list)]
FloatList = Annotated[List[float], BeforeValidator(_split_list)]
FormatList = Annotated[List[Literal["csv", "json", "npz", "prom"]], BeforeValidator(_split_list)]


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelBlock(_Block):
    R: float = Field(default=12.0, gt=0.0)
    Nr: int = Field(default=256, ge=4)
    Ntheta: int = Field(default=1024, ge=16)
    potential: Literal["harmonic", "radial_table", "zero"] = "harmonic"
    potential_scale: float = 1.0
    gamma_x: float = Field(default=1.0, gt=0.0)
    gamma_y: float = Field(default=1.0, gt=0.0)
    potential_table: Optional[str] = None
    omega: float = Field(default=0.0, ge=0.0)
    nonlinearity: Literal["cubic", "logarithmic", "lhy", "none"] = "cubic"
    eta: float = Field(default=500.0, ge=0.0)
    eta_lhy: float = Field(default=0.0, ge=0.0)
    K: float = Field(default=0.2, ge=0.0)

    @field_validator("Ntheta")
    @classmethod
    def _even_ntheta(cls, v: int) -> int:
        if v % 2:
            raise ValueError(f"Ntheta must be even, got {v}")
        return v

    @model_validator(mode="after")
    def _table_needs_path(self) -> "ModelBlock":
        if self.potential == "radial_table" and not self.potential_table:
            raise ValueError("potential=radial_table needs model.potential_table")
        return self

    @property
    def is_radial(self) -> bool:
        return self.potential != "harmonic" or self.gamma_x == self.gamma_y

    def potential_spec(self) -> Dict[str, Any]:
        spec: Dict[str, Any] = {"kind": self.potential}
        if self.potential == "harmonic":
            spec.update(scale=self.potential_scale, gamma_x=self.gamma_x, gamma_y=self.gamma_y)
        elif self.potential == "radial_table":
            spec["table_path"] = self.potential_table
        return spec

    def nonlinearity_model(self) -> Nonlinearity:
        return Nonlinearity(kind=self.nonlinearity, eta=self.eta, eta_lhy=self.eta_lhy)


class StageBlock(_Block):
    precond: MetricKind = "hessian"
    sigma0: float = Field(default=0.1, gt=0.0)
    drop_tol: float = Field(default=0.0, ge=0.0)
    ordering: Literal["amd", "natural"] = "amd"
    refresh: int = Field(default=100, ge=1)
    max_iter: int = Field(default=10000, ge=1)
    tau: float = Field(default=1.0, gt=0.0)
    step_rule: Literal["fixed", "optimal"] = "fixed"

    def precond_spec(self) -> PrecondSpec:
        return PrecondSpec(kind=self.precond, sigma0=self.sigma0, drop_tol=self.drop_tol,
                           ordering=self.ordering, refresh=self.refresh)

    def stage_spec(self) -> StageSpec:
        return StageSpec(precond=self.precond_spec(), max_iter=self.max_iter,
                         tau=self.tau, step_rule=self.step_rule)


class SolveBlock(_Block):
    stages: List[StageBlock] = Field(default_factory=lambda: [StageBlock()], min_length=1)
    tol_inf: float = Field(default=1e-12, gt=0.0)
    max_total_iter: int = Field(default=1_000_000, ge=1)
    initial_guess: Literal["gaussian", "vortex", "random", "vortex-random"] = "gaussian"
    vortex_m: int = Field(default=1, ge=0)
    noise: float = Field(default=0.1, ge=0.0)
    seed: int = 0
    snapshot_stride: int = Field(default=0, ge=0)
    snapshot_memory: int = Field(default=SNAPSHOT_MEMORY, ge=1, le=SNAPSHOT_MEMORY)
    energy_increase_rtol: float = Field(default=1e-14, ge=0.0)
    constants_path: Optional[str] = None
    inline_spectrum: bool = False

    @model_validator(mode="after")
    def _optimal_needs_constants(self) -> "SolveBlock":
        if any(s.step_rule == "optimal" for s in self.stages):
            if not self.constants_path and not self.inline_spectrum:
                raise ValueError("step_rule=optimal needs solve.constants_path or solve.inline_spectrum=true")
        return self

    def prg_config(self) -> PRGConfig:
        return PRGConfig(
            stages=[s.stage_spec() for s in self.stages],
            tol_inf=self.tol_inf,
            max_total_iter=self.max_total_iter,
            snapshot_stride=self.snapshot_stride,
            snapshot_memory=self.snapshot_memory,
            energy_increase_rtol=self.energy_increase_rtol,
        )


class SpectrumBlock(_Block):
    precond: MetricKind = "optimal-shifted"
    sigma0: float = Field(default=0.1, gt=0.0)
    drop_tol: float = Field(default=0.0, ge=0.0)
    orderings: OrderingList = Field(default_factory=lambda: ["amd"], min_length=1)
    sigma_sweep: FloatList = Field(default_factory=list)
    dense_cap: int = Field(default=8192, ge=0)
    force_iterative: bool = False
    q: int = Field(default=6, ge=1)
    theta_factor: float = Field(default=1e-6, gt=0.0)
    converged_threshold: float = Field(default=1e-8, gt=0.0)
    include_rotation: bool = True

    @field_validator("sigma_sweep")
    @classmethod
    def _positive_sigmas(cls, v: List[float]) -> List[float]:
        if any(s <= 0 for s in v):
            raise ValueError("sigma_sweep values must be positive")
        return v

    def precond_spec(self, ordering: Optional[str] = None) -> PrecondSpec:
        return PrecondSpec(kind=self.precond, sigma0=self.sigma0, drop_tol=self.drop_tol,
                           ordering=ordering or self.orderings[0])


class RatesBlock(_Block):
    window: int = Field(default=200, ge=1)
    skip_last: int = Field(default=0, ge=0)
    min_fit_points: int = Field(default=100, ge=2)
    tau: Optional[float] = Field(default=None, gt=0.0)


class OutputBlock(_Block):
    directory: Optional[str] = None
    formats: FormatList = Field(
        default_factory=lambda: ["csv", "json", "npz", "prom"])
    keep_count: int = Field(default=20, ge=1)

    def wants(self, fmt: str) -> bool:
        return fmt in self.formats


class RunConfig(_Block):
    model: ModelBlock = Field(default_factory=ModelBlock)
    solve: SolveBlock = Field(default_factory=SolveBlock)
    spectrum: SpectrumBlock = Field(default_factory=SpectrumBlock)
    rates: RatesBlock = Field(default_factory=RatesBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)

    @model_validator(mode="after")
    def _rotation_generator_needs_radial(self) -> "RunConfig":
        if self.spectrum.include_rotation and not self.model.is_radial:
            logger.info("Non-radial potential: rotation generator disabled in the kernel basis")
            self.spectrum.include_rotation = False
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Git-style blob sha1 of the canonical JSON echo"""
        data = self.canonical_json().encode("utf-8")
        return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Flat `key=value` lines into the nested dict RunConfig validates.

    `stage.N.field` lines become entries of solve.stages (N starts at 1).
    """
    nested: Dict[str, Any] = {}
    stages: Dict[int, Dict[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))

        match = _STAGE_KEY.match(key)
        if match:
            index = int(match.group(1))
            if index < 1:
                raise ConfigError(f"{source}:{lineno}: stage numbers start at 1", [key])
            stages.setdefault(index, {})[match.group(2)] = value
            continue

        section, _, field = key.partition(".")
        if section not in _SECTIONS or not field or "." in field:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'", [key])
        if section == "solve" and field == "stages":
            raise ConfigError(f"{source}:{lineno}: stages are written as stage.N.field", [key])
        nested.setdefault(section, {})[field] = value

    if stages:
        expected = list(range(1, len(stages) + 1))
        if sorted(stages) != expected:
            raise ConfigError(f"{source}: stage numbers must be consecutive from 1, got {sorted(stages)}",
                              [f"stage.{i}" for i in sorted(stages)])
        nested.setdefault("solve", {})["stages"] = [stages[i] for i in expected]
    return nested


def build_config(text: str, overrides: Sequence[str] = (), source: str = "<config>") -> RunConfig:
    """Validate config text; later `key=value` overrides win over the file"""
    full_text = text + "\n" + "\n".join(overrides)
    nested = parse_config_text(full_text, source)
    try:
        return RunConfig.model_validate(nested)
    except ValidationError as e:
        raise ConfigError.from_validation_error(e) from e


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    if path is None:
        return build_config("", overrides, source="<defaults>")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    return build_config(path.read_text(), overrides, source=str(path))


class CommandSummary(BaseModel):
    """What a subcommand reports back to the CLI for the status line and meta.json"""
    command: str
    run_dir: str
    status: str = "ok"
    artifacts: List[str] = Field(default_factory=list)
    details: Dict[str, Any] = Field(default_factory=dict)
