"""Run configuration: a YAML file validated by pydantic before any compute starts."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .embedding import MERGE_MODES
from .errors import DataError, ParameterError
from .evaluation import SCENARIOS
from .model import ABLATIONS, Hyper
from .training import TrainConfig

SEED_ENV = "KRIFORMER_SEED"
DEFAULT_EPOCHS = 100


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 42
    try:
        return int(raw)
    except ValueError:
        raise ParameterError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticSection(_Strict):
    n_nodes: int = Field(20, ge=4)
    n_steps: int = Field(2000, ge=1)
    seed: int = 42


class DataSection(_Strict):
    synthetic: Optional[SyntheticSection] = None
    speeds: Optional[Path] = None
    distances: Optional[Path] = None
    missing_sentinel: Optional[float] = None
    sigma: Optional[float] = Field(None, gt=0)
    epsilon: float = Field(0.1, gt=0)
    train_fraction: float = Field(0.7, gt=0, lt=1)

    @model_validator(mode="after")
    def _one_source(self):
        files = self.speeds is not None or self.distances is not None
        if files and (self.speeds is None or self.distances is None):
            raise ValueError("speeds and distances must be given together")
        if files and self.synthetic is not None:
            raise ValueError("choose either synthetic data or speeds/distances files, not both")
        return self


class ModelSection(_Strict):
    D: int = 64
    n_heads: int = 4
    n_enc: int = 2
    n_dec: int = 2
    dropout: float = 0.2
    k_eigen: Optional[int] = None
    merge_mode: Literal[MERGE_MODES] = "add"  # type: ignore[valid-type]
    msia_mask: bool = False
    literal_threshold: bool = False
    ablation: str = "none"

    @model_validator(mode="after")
    def _check(self):
        if self.ablation != "none" and self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be none or one of {', '.join(ABLATIONS)}")
        try:
            self.hyper().validate()
        except ParameterError as exc:
            raise ValueError(str(exc)) from None
        return self

    def hyper(self) -> Hyper:
        return Hyper(C=1, D=self.D, n_heads=self.n_heads, n_enc=self.n_enc, n_dec=self.n_dec,
                     dropout=self.dropout, k=self.k_eigen, merge_mode=self.merge_mode,
                     msia_mask=self.msia_mask, literal_threshold=self.literal_threshold)


class TrainingSection(_Strict):
    window: int = Field(24, ge=1)
    stride: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(DEFAULT_EPOCHS, ge=1)
    lr: float = Field(1e-3, gt=0)
    mask_ratio: float = Field(0.3, ge=0, lt=1)
    literal_sum_loss: bool = False

    def train_config(self, mask_ratio: float | None = None) -> TrainConfig:
        return TrainConfig(window=self.window, stride=self.stride, batch_size=self.batch_size,
                           epochs=self.epochs, lr=self.lr,
                           mask_ratio=self.mask_ratio if mask_ratio is None else mask_ratio,
                           literal_sum_loss=self.literal_sum_loss)


class EvaluationSection(_Strict):
    scenarios: list[str] = ["sm3"]
    seeds: list[int] = [42]
    knn_k: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _check(self):
        bad = [s for s in self.scenarios if s.lower() not in SCENARIOS]
        if bad:
            raise ValueError(f"unknown scenarios {bad}; choose from {', '.join(SCENARIOS)}")
        if not self.seeds:
            raise ValueError("at least one evaluation seed is required")
        return self


class OutputSection(_Strict):
    dir: Path = Path("runs/default")
    record_timing: bool = False


class RunConfig(_Strict):
    seed: int = Field(default_factory=default_seed)
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    training: TrainingSection = TrainingSection()
    evaluation: EvaluationSection = EvaluationSection()
    output: OutputSection = OutputSection()

    @model_validator(mode="after")
    def _cross(self):
        n = self.data.synthetic.n_nodes if self.data.synthetic else None
        if n is not None and self.model.k_eigen is not None and self.model.k_eigen >= n:
            raise ValueError(f"k_eigen={self.model.k_eigen} must be < n_nodes={n}")
        return self

    def with_synthetic(self) -> RunConfig:
        data = self.data.model_copy(update={"synthetic": self.data.synthetic or SyntheticSection(),
                                            "speeds": None, "distances": None})
        return self.model_copy(update={"data": data})

    def resolved_paths(self, base: Path) -> RunConfig:
        """Relative paths are taken relative to the config file's directory."""
        def fix(p):
            return p if p is None or p.is_absolute() else base / p
        data = self.data.model_copy(update={"speeds": fix(self.data.speeds),
                                            "distances": fix(self.data.distances)})
        output = self.output.model_copy(update={"dir": fix(self.output.dir)})
        return self.model_copy(update={"data": data, "output": output})


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(raw: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(raw or {})
    except ValidationError as exc:
        raise ParameterError(f"invalid configuration: {_format_errors(exc)}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParameterError(f"{path}: not valid YAML: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ParameterError(f"{path}: top level must be a mapping")
    return parse_config(raw).resolved_paths(path.parent)
