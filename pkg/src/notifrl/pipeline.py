"""In-process orchestration shared by the CLI commands and sweeps."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import PipelineConfig, PrefsConfig, RewardConfig, SimConfig, SweepConfig, TrainConfig
from .dataset import Dataset
from .errors import ConfigError, DataError, NotifRLError
from .mdp import Action, PreferenceVector
from .ope import PolicyEvaluation, evaluate_policy_metrics
from .rewards import ClickModel, RewardSpec, SessionModel, build_scalar_rewards, fit_click_model, fit_session_model
from .sim import GroundTruth, true_policy_value
from .trainer import QPolicy, Smoothing, TrainReport, policy_propensity, train

log = logging.getLogger(__name__)


@dataclass
class RewardModels:
    click: Optional[ClickModel] = None
    session: Optional[SessionModel] = None


def fit_reward_models(dataset: Dataset, cfg: RewardConfig) -> RewardModels:
    """Fit the click model, plus the session model when both actions are logged."""
    table = dataset.table()
    click = fit_click_model(dataset, iterations=cfg.click_fit_iterations, seed=cfg.seed,
                            holdout_fraction=cfg.holdout_fraction)
    session = None
    if np.any(table.actions == Action.NOT_SEND) and np.any(table.actions == Action.SEND):
        session = fit_session_model(dataset, seed=cfg.seed, holdout_fraction=cfg.holdout_fraction)
    elif cfg.use_predicted_sessions:
        raise DataError("predicted sessions requested but the dataset lacks one of the actions")
    return RewardModels(click, session)


def reward_spec(cfg: RewardConfig, models: Optional[RewardModels], prefs: Optional[PreferenceVector] = None) -> RewardSpec:
    models = models or RewardModels()
    spec = RewardSpec(
        prefs=prefs or cfg.prefs.to_prefs(),
        use_predicted_clicks=cfg.use_predicted_clicks,
        use_predicted_sessions=cfg.use_predicted_sessions,
        click_model=models.click,
        session_model=models.session,
    )
    spec.validate()
    return spec


def check_schema(dataset: Dataset, models: Optional[RewardModels]) -> None:
    if models is None:
        return
    for name, model in (("click", models.click), ("session", models.session)):
        if model is not None and model.schema and tuple(model.schema) != tuple(dataset.schema):
            raise DataError(f"{name} model feature schema does not match the dataset schema")


def train_policy(
    dataset: Dataset,
    reward_cfg: RewardConfig,
    train_cfg: TrainConfig,
    models: Optional[RewardModels] = None,
    prefs: Optional[PreferenceVector] = None,
) -> Tuple[QPolicy, TrainReport, RewardSpec]:
    check_schema(dataset, models)
    spec = reward_spec(reward_cfg, models, prefs)
    rewards = build_scalar_rewards(dataset, spec)
    policy, report = train(dataset, rewards, train_cfg)
    return policy, report, spec


def target_propensities(dataset: Dataset, policy: QPolicy, smoothing: Smoothing) -> np.ndarray:
    smoothing.validate(for_ope=True)
    if policy.schema and dataset.schema and tuple(policy.schema) != tuple(dataset.schema):
        raise DataError("checkpoint feature schema does not match the dataset schema")
    table = dataset.table()
    if len(table) == 0:
        return np.zeros(0)
    probs = policy_propensity(policy, table.states, smoothing)
    return probs[np.arange(len(table)), table.actions]


def evaluate(
    dataset: Dataset,
    policy: QPolicy,
    smoothing: Smoothing,
    prefs: PreferenceVector,
    gamma: float,
    metric_gamma: float = 1.0,
    self_normalized: bool = False,
) -> PolicyEvaluation:
    tp = target_propensities(dataset, policy, smoothing)
    return evaluate_policy_metrics(dataset, tp, prefs, gamma, metric_gamma, self_normalized=self_normalized)


def ground_truth(
    policy: QPolicy,
    sim_cfg: SimConfig,
    smoothing: Smoothing,
    n_episodes: int,
    gamma: float,
    prefs: PreferenceVector,
    seed: int,
) -> GroundTruth:
    """Simulator value of the same smoothed policy that OPE evaluates."""
    return true_policy_value(policy.sim_policy(smoothing), sim_cfg, n_episodes, gamma, prefs, seed)


SWEEP_COLUMNS = [
    "cell", "replication", "seed", "w_s", "w_c", "w_v", "alpha", "gamma", "learning_rate", "status",
    "volume", "volume_se", "sessions", "sessions_se", "clicks", "clicks_se", "ctr_proxy",
    "scalarized", "scalarized_se", "ess", "max_weight", "error",
]


@dataclass(frozen=True)
class SweepCell:
    index: int
    prefs: PrefsConfig
    alpha: float
    gamma: float
    learning_rate: float


def sweep_cells(spec: SweepConfig) -> List[SweepCell]:
    grid = itertools.product(spec.preferences, spec.alphas, spec.gammas, spec.learning_rates)
    return [SweepCell(i, p, a, g, lr) for i, (p, a, g, lr) in enumerate(grid)]


def sweep_seed(spec: SweepConfig, replication: int) -> int:
    return spec.base_seed + replication


def _run_cell(args) -> Dict:
    cell, rep, seed, dataset, config, models = args
    row = {
        "cell": cell.index, "replication": rep, "seed": seed,
        "w_s": cell.prefs.w_s, "w_c": cell.prefs.w_c, "w_v": cell.prefs.w_v,
        "alpha": cell.alpha, "gamma": cell.gamma, "learning_rate": cell.learning_rate,
    }
    try:
        train_cfg = config.train.model_copy(update={
            "alpha": cell.alpha, "gamma": cell.gamma, "learning_rate": cell.learning_rate, "seed": seed,
        })
        prefs = cell.prefs.to_prefs()
        policy, _, _ = train_policy(dataset, config.reward, train_cfg, models, prefs)
        ev = evaluate(dataset, policy, Smoothing.from_config(config.ope), prefs, config.ope.gamma,
                      config.ope.metric_gamma, config.ope.self_normalized)
        ctr = ev.ctr_proxy
        row.update({
            "status": "ok",
            "volume": ev["volume"].value, "volume_se": ev["volume"].stderr,
            "sessions": ev["sessions"].value, "sessions_se": ev["sessions"].stderr,
            "clicks": ev["clicks"].value, "clicks_se": ev["clicks"].stderr,
            "ctr_proxy": "" if ctr is None else ctr,
            "scalarized": ev["scalarized"].value, "scalarized_se": ev["scalarized"].stderr,
            "ess": ev["scalarized"].effective_sample_size,
            "max_weight": ev["scalarized"].diagnostics.max_weight,
            "error": "",
        })
    except NotifRLError as err:
        log.warning("sweep cell %d replication %d failed: %s", cell.index, rep, err)
        row.update({k: "" for k in SWEEP_COLUMNS if k not in row})
        row.update({"status": "failed", "error": str(err)})
    return row


def run_sweep(
    dataset: Dataset,
    config: PipelineConfig,
    models: Optional[RewardModels] = None,
    workers: int = 1,
) -> List[Dict]:
    """Train and evaluate every grid cell x replication; rows sorted by (cell, seed)."""
    spec = config.sweep
    if (config.reward.use_predicted_clicks or config.reward.use_predicted_sessions) and models is None:
        raise ConfigError("the reward spec needs fitted reward models for this sweep")
    jobs = [
        (cell, rep, sweep_seed(spec, rep), dataset, config, models)
        for cell in sweep_cells(spec)
        for rep in range(spec.replications)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    return sorted(rows, key=lambda r: (r["cell"], r["seed"], r["replication"]))
