"""Engagement metrics computed from simulated event logs.

Event timestamps are hours; session splitting uses minutes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

SESSION_GAP_MINUTES = 30.0


@dataclass
class EventLog:
    user_id: str
    horizon: float
    visits: List[float] = field(default_factory=list)
    sends: List[Tuple[float, int]] = field(default_factory=list)  # (time, step)
    clicks: List[Tuple[float, int]] = field(default_factory=list)  # (time, step of the send)


@dataclass
class Metrics:
    sessions: int
    wau: int
    volume: int
    ctr: Optional[float]  # None when no user received a notification
    clicks: int = 0
    visits: int = 0

    @property
    def ctr_defined(self) -> bool:
        return self.ctr is not None


def session_count(visit_minutes: Sequence[float], gap_minutes: float = SESSION_GAP_MINUTES) -> int:
    """Number of maximal runs of visits whose consecutive gaps are < ``gap_minutes``."""
    t = np.asarray(visit_minutes, dtype=np.float64)
    if t.size == 0:
        return 0
    gaps = np.diff(t)
    if np.any(gaps < 0):
        raise ValueError("visit timestamps must be sorted")
    return int(1 + np.count_nonzero(gaps >= gap_minutes))


def _user_ctr(log: EventLog, start: float, end: float) -> Optional[float]:
    sends_by_day: Dict[int, int] = {}
    send_day: Dict[int, int] = {}
    for t, step in log.sends:
        if start <= t <= end:
            day = int(np.floor(t / 24.0))
            sends_by_day[day] = sends_by_day.get(day, 0) + 1
            send_day[step] = day
    if not sends_by_day:
        return None
    clicks_by_day: Dict[int, int] = {}
    for _, step in log.clicks:
        # clicks are credited to the day their notification was sent
        if step in send_day:
            day = send_day[step]
            clicks_by_day[day] = clicks_by_day.get(day, 0) + 1
    ratios = [clicks_by_day.get(d, 0) / n for d, n in sends_by_day.items()]
    return float(np.mean(ratios))


def compute_metrics(logs: Sequence[EventLog], period: Tuple[float, float] = (0.0, 168.0)) -> Metrics:
    """Sessions, weekly actives, notification volume and per-user daily CTR.

    ``period`` is an inclusive ``(start, end)`` window in hours, normally one
    week. CTR is the mean over users of that user's average daily
    clicks/sends, counting only days with at least one send.
    """
    start, end = period
    sessions = wau = volume = clicks = visits = 0
    user_ctrs = []
    for log in logs:
        v = [t * 60.0 for t in log.visits if start <= t <= end]
        n_sessions = session_count(sorted(v))
        sessions += n_sessions
        visits += len(v)
        if n_sessions > 0:
            wau += 1
        volume += sum(1 for t, _ in log.sends if start <= t <= end)
        sent_steps = {step for t, step in log.sends if start <= t <= end}
        clicks += sum(1 for _, step in log.clicks if step in sent_steps)
        c = _user_ctr(log, start, end)
        if c is not None:
            user_ctrs.append(c)
    ctr = float(np.mean(user_ctrs)) if user_ctrs else None
    return Metrics(sessions=sessions, wau=wau, volume=volume, ctr=ctr, clicks=clicks, visits=visits)
