"""Logged offline dataset: trajectories plus feature schema and provenance."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .errors import DataError
from .mdp import TransitionTable, Trajectory, validate_trajectory

FEATURE_SCHEMA: Tuple[str, ...] = (
    "badge_count",
    "hours_since_last_visit",
    "sends_past_day",
    "sends_past_week",
    "hours_since_last_send",
    "candidate_quality_score",
    "profile_base_visit_rate",
    "profile_click_affinity",
)


@dataclass(eq=False)
class Dataset:
    trajectories: List[Trajectory]
    schema: Tuple[str, ...] = FEATURE_SCHEMA
    provenance: Dict = field(default_factory=dict)
    _table: Optional[TransitionTable] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.schema = tuple(self.schema)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and self.provenance == other.provenance
            and self.trajectories == other.trajectories
        )

    @property
    def n_features(self) -> int:
        return len(self.schema)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def table(self) -> TransitionTable:
        """Flat column view, cached on first use."""
        if self._table is None:
            self._table = TransitionTable.from_trajectories(self.trajectories, self.n_features)
        return self._table

    def violations(self) -> List[str]:
        out = []
        for traj in self.trajectories:
            for v in validate_trajectory(traj):
                out.append(f"episode {traj.episode_id}: {v}")
            for k, step in enumerate(traj.steps):
                if len(step.state) != self.n_features:
                    out.append(f"episode {traj.episode_id}: state width differs from schema at step {k}")
        return out

    def check(self) -> None:
        problems = self.violations()
        if problems:
            shown = "; ".join(problems[:5])
            raise DataError(f"{len(problems)} dataset invariant violation(s): {shown}")
