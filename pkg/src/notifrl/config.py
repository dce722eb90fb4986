"""Run configuration: one JSON document with sim/reward/train/ope/sweep sections.

Unknown keys anywhere are rejected so hyperparameter typos fail fast.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .mdp import PreferenceVector


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PopulationConfig(_Strict):
    """Distributions new users are drawn from. Zero spreads give identical users."""

    base_visit_rate_mean: float = Field(2.0, ge=0)  # visits/day, lognormal
    base_visit_rate_sigma: float = Field(0.5, ge=0)  # log-space sd
    click_affinity_mean: float = -1.0  # logit offset, normal
    click_affinity_sd: float = Field(0.5, ge=0)
    fatigue_mean: float = Field(0.5, ge=0)  # initial fatigue, normal clipped at 0
    fatigue_sd: float = Field(0.5, ge=0)
    notification_boost_mean: float = Field(1.5, ge=0)  # lognormal
    notification_boost_sigma: float = Field(0.3, ge=0)
    disable_threshold_mean: float = 3.0  # normal
    disable_threshold_sd: float = Field(0.5, ge=0)


class DynamicsConfig(_Strict):
    quality_mean: float = 0.0
    quality_sd: float = Field(1.0, ge=0)
    click_quality_coef: float = 1.0
    click_fatigue_coef: float = Field(0.4, ge=0)
    disable_penalty: float = Field(1.5, ge=0)  # extra click logit drop per unit fatigue above threshold
    fatigue_per_send: float = Field(1.0, ge=0)
    fatigue_decay_hours: float = Field(24.0, gt=0)
    boost_decay_hours: float = Field(3.0, gt=0)
    visit_fatigue_coef: float = Field(0.5, ge=0)  # visit-rate suppression above threshold
    click_visit_delay_hours: float = Field(0.1, ge=0)  # mean delay from click to its visit
    session_noise: float = Field(0.0, ge=0)  # sd of the mean-one per-window visit-rate multiplier
    fatigue_effects: bool = True


class BaselineConfig(_Strict):
    """Supervised-style send rule: SEND iff session_lift + beta * p_click > threshold."""

    beta: float = 1.0
    threshold: float = 0.35
    click_quality_coef: float = 1.0
    click_recent_sends_coef: float = 0.3
    session_lift_per_visit_rate: float = 0.12


class SimConfig(_Strict):
    n_users: int = Field(1000, ge=0)
    horizon_days: float = Field(7.0, gt=0)
    candidate_arrival_rate: float = Field(6.0, gt=0)  # candidates/day
    arrival_process: Literal["poisson", "regular"] = "poisson"
    epsilon: float = Field(0.3, ge=0, le=1)
    rng_seed: int = 0
    population: PopulationConfig = PopulationConfig()
    dynamics: DynamicsConfig = DynamicsConfig()
    baseline: BaselineConfig = BaselineConfig()

    @property
    def horizon_hours(self) -> float:
        return self.horizon_days * 24.0


class PrefsConfig(_Strict):
    w_s: float = 1.0
    w_c: float = 1.0
    w_v: float = 0.6

    @model_validator(mode="after")
    def _nonzero(self):
        if self.w_s == 0 and self.w_c == 0 and self.w_v == 0:
            raise ValueError("at least one preference weight must be nonzero")
        return self

    def to_prefs(self) -> PreferenceVector:
        return PreferenceVector(self.w_s, self.w_c, self.w_v)


class RewardConfig(_Strict):
    prefs: PrefsConfig = PrefsConfig()
    use_predicted_clicks: bool = True
    use_predicted_sessions: bool = False
    holdout_fraction: float = Field(0.0, ge=0, lt=1)
    click_fit_iterations: int = Field(500, ge=1)
    seed: int = 0


class TrainConfig(_Strict):
    gamma: float = Field(0.98, gt=0, le=1)  # per hour
    alpha: float = Field(1.0, ge=0)
    batch_size: int = Field(256, ge=1)
    epochs: int = Field(20, ge=0)
    target_sync_every: int = Field(100, ge=1)
    learning_rate: float = Field(1e-3, ge=0)
    optimizer: Literal["sgd", "momentum"] = "sgd"
    momentum: float = Field(0.9, ge=0, lt=1)
    hidden_dims: List[int] = [64, 32]
    activation: Literal["relu", "tanh"] = "relu"
    target_kind: Literal["ddqn", "dqn"] = "ddqn"
    normalize_features: bool = True
    seed: int = 0

    @field_validator("hidden_dims")
    @classmethod
    def _positive_widths(cls, v):
        if any(h < 1 for h in v):
            raise ValueError("hidden widths must be positive")
        return v


class OpeConfig(_Strict):
    smoothing: Literal["epsilon_greedy", "softmax", "greedy"] = "epsilon_greedy"  # greedy: simulator only
    epsilon: float = Field(0.05, gt=0, le=1)
    temperature: float = Field(1.0, gt=0)
    gamma: float = Field(0.98, gt=0, le=1)  # discount for the scalarized return
    metric_gamma: float = Field(1.0, gt=0, le=1)  # discount for per-metric totals
    self_normalized: bool = False
    n_episodes: int = Field(1000, ge=1)  # ground-truth simulator episodes
    eval_seed: int = 12345


class SweepConfig(_Strict):
    preferences: List[PrefsConfig] = [PrefsConfig()]
    alphas: List[float] = [1.0]
    gammas: List[float] = [0.98]
    learning_rates: List[float] = [1e-3]
    replications: int = Field(1, ge=1)
    base_seed: int = 0

    @model_validator(mode="after")
    def _nonempty(self):
        for name in ("preferences", "alphas", "gammas", "learning_rates"):
            if not getattr(self, name):
                raise ValueError(f"sweep grid axis {name!r} is empty")
        if any(a < 0 for a in self.alphas):
            raise ValueError("alphas must be non-negative")
        if any(not 0 < g <= 1 for g in self.gammas):
            raise ValueError("gammas must lie in (0, 1]")
        return self


class PipelineConfig(_Strict):
    format_version: int = 1
    sim: SimConfig = SimConfig()
    reward: RewardConfig = RewardConfig()
    train: TrainConfig = TrainConfig()
    ope: OpeConfig = OpeConfig()
    sweep: SweepConfig = SweepConfig()


def digest(model: BaseModel) -> str:
    """sha256 over the canonical JSON of a config model."""
    blob = json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def parse_config(data: dict) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(f"invalid config: {_format_validation(err)}") from None


def load_config(path: Optional[str | Path]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return parse_config(data)
