"""Run configuration: JSON schema with defaults, validation and a stable hash."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, field_validator, model_validator

from .conditions import SearchConfig
from .problems import PROBLEM_NAMES, Example1Params, LqParams
from .solver import EvalConfig, TrainingConfig

ProblemName = Literal["example1", "example1_reformulated", "lq_dp", "lq_smp"]
assert set(ProblemName.__args__) == set(PROBLEM_NAMES)


class ConfigError(ValueError):
    """Config rejected; ``errors`` holds (field path, message) pairs."""

    def __init__(self, errors: list[tuple[str, str]], source: str | None = None):
        self.errors = errors
        where = f"{source}: " if source else ""
        super().__init__(where + "; ".join(f"{path}: {msg}" for path, msg in errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class Example1Section(_Strict):
    d: PositiveInt = 10
    r: float = 1.0
    sigma_bar: PositiveFloat = 0.1
    kappa_y: float = 0.1
    kappa_z: float = 0.01


class LqSection(_Strict):
    mu_scale: PositiveFloat = 1.0
    r_x: PositiveFloat = 1.0
    r_z: PositiveFloat = 10.0


class TrainSection(_Strict):
    iterations: PositiveInt = 2**12
    batch: PositiveInt = 2**9
    lr0: PositiveFloat = 1e-2
    decay: PositiveFloat = 1e-2
    decay_horizon: Optional[PositiveInt] = None


class EvalSection(_Strict):
    paths: PositiveInt = 2**12
    fine_steps: PositiveInt = 10_000
    seed: int = Field(default=2**31 - 1, ge=0)


class SearchSection(_Strict):
    exponent_low: float = -6.0
    exponent_high: float = 6.0
    points_per_axis: int = Field(default=13, ge=2)
    max_refine_evals: int = Field(default=500, ge=0)
    sweep_points: int = Field(default=121, ge=2)

    @model_validator(mode="after")
    def _range(self):
        if not self.exponent_low < self.exponent_high:
            raise ValueError("exponent_low must be below exponent_high")
        return self


class RunConfig(_Strict):
    problem: ProblemName
    T: Optional[PositiveFloat] = None
    N: list[PositiveInt] = Field(default_factory=lambda: [20])
    runs: PositiveInt = 3
    seed: int = Field(default=0, ge=0)
    seeds: Optional[list[int]] = None
    precision: Literal["f32", "f64"] = "f64"
    out: Optional[str] = None
    parallel_runs: PositiveInt = 1
    example1: Example1Section = Field(default_factory=Example1Section)
    lq: LqSection = Field(default_factory=LqSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    search: SearchSection = Field(default_factory=SearchSection)

    @field_validator("N")
    @classmethod
    def _ascending(cls, v):
        if not v:
            raise ValueError("at least one N is required")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("N values must be strictly ascending")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if v is not None and (not v or any(s < 0 for s in v)):
            raise ValueError("seeds must be a non-empty list of non-negative integers")
        return v

    def run_seeds(self) -> list[int]:
        return list(self.seeds) if self.seeds is not None else [self.seed + j for j in range(self.runs)]

    def problem_params(self):
        if self.problem.startswith("example1"):
            return Example1Params(**self.example1.model_dump())
        lq = self.lq
        return LqParams.preset(mu_scale=lq.mu_scale, r_x=lq.r_x, r_z=lq.r_z)

    def training(self, N: int) -> TrainingConfig:
        t = self.train
        return TrainingConfig(
            N=N,
            batch=t.batch,
            iterations=t.iterations,
            seed=self.seed,
            precision=self.precision,
            lr0=t.lr0,
            decay=t.decay,
            decay_horizon=t.decay_horizon,
        )

    def evaluation(self) -> EvalConfig:
        return EvalConfig(**self.eval.model_dump())

    def search_config(self) -> SearchConfig:
        return SearchConfig(**self.search.model_dump())


def _errors(exc: ValidationError) -> list[tuple[str, str]]:
    return [(".".join(str(p) for p in e["loc"]) or "<root>", e["msg"]) for e in exc.errors()]


def parse_config(data: dict, source: str | None = None) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_errors(exc), source) from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([("<root>", f"invalid JSON: {exc}")], str(path)) from None
    if not isinstance(data, dict):
        raise ConfigError([("<root>", "expected a JSON object")], str(path))
    return parse_config(data, str(path))


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """sha256 of the canonical JSON form; ``out`` and ``parallel_runs`` do not affect results and are left out."""
    data = cfg.model_dump(mode="json", exclude={"out", "parallel_runs"})
    return hashlib.sha256(json.dumps(data, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
