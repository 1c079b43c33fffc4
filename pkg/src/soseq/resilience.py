"""Recovery-time / performance-loss resilience metrics extracted from
performance trajectories: stage times t1-t4, T, D, M, and total loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class StageTimes:
    """Attack/response stage boundaries measured on a performance series.

    t1: attack launch (from the event log); t2: first degradation crossing
    after t1; t3: first logged response between t2 and t4; t4: start of
    sustained recovery. Any stage can be absent.
    """

    t1: Optional[float]
    t2: Optional[float]
    t3: Optional[float]
    t4: Optional[float]
    nominal: float
    classification: str  # "no impact" | "recovered" | "non-resilient (breakdown)"


@dataclass(frozen=True)
class ResilienceReport:
    t1: Optional[float]
    t2: Optional[float]
    t3: Optional[float]
    t4: Optional[float]
    T: float  # response duration t4 - t2; 0 with no impact; inf with no recovery
    D: float  # sustained post-recovery loss (tail mean, floored at 0)
    M: float  # maximum loss during the response stage
    total_loss: float  # time integral of performance shortfall from t1 on
    nominal: float
    verdict: bool


def segment_stages(
    t: np.ndarray,
    perf: np.ndarray,
    nominal_level: float,
    eps_deg: float = 0.1,
    eps_rec: float = 0.05,
    dwell: float = 10.0,
    events: Sequence[tuple[float, str]] = (),
) -> StageTimes:
    """Locate the attack stages on a performance trajectory.

    Degradation is a drop below (1 - eps_deg) * nominal after the logged
    attack launch; recovery requires staying at or above (1 - eps_rec) *
    nominal for a full ``dwell`` window. The detection time t3 comes from the
    event log, not the curve.
    """
    if nominal_level <= 0:
        raise ValueError(f"nominal_level {nominal_level:g} must be positive")
    if not (0 < eps_rec <= eps_deg < 1):
        raise ValueError("require 0 < eps_rec <= eps_deg < 1")
    if dwell < 0:
        raise ValueError("dwell must be nonnegative")
    t = np.asarray(t, dtype=float)
    perf = np.asarray(perf, dtype=float)
    if t.shape != perf.shape or t.ndim != 1:
        raise ValueError("t and perf must be matching 1-d arrays")

    t1 = min((tv for tv, kind in events if kind == "attack-launched"), default=None)
    if t1 is None:
        return StageTimes(None, None, None, None, nominal_level, "no impact")

    deg_threshold = (1.0 - eps_deg) * nominal_level
    rec_threshold = (1.0 - eps_rec) * nominal_level
    after = t >= t1 - 1e-12
    degraded = after & (perf < deg_threshold)
    idx2 = np.flatnonzero(degraded)
    if idx2.size == 0:
        return StageTimes(float(t1), None, None, None, nominal_level, "no impact")
    k2 = int(idx2[0])
    t2 = float(t[k2])

    dt = float(t[1] - t[0]) if t.size > 1 else 0.0
    dwell_steps = int(math.ceil(dwell / dt - 1e-9)) if dt > 0 else 0
    below = (perf < rec_threshold).astype(np.int64)
    bad_prefix = np.concatenate([[0], np.cumsum(below)])
    t4 = None
    last_start = perf.size - 1 - dwell_steps
    for k in range(k2, last_start + 1):
        if bad_prefix[k + dwell_steps + 1] - bad_prefix[k] == 0:
            t4 = float(t[k])
            break

    t3 = None
    for tv, kind in sorted(events):
        if kind == "response-triggered" and tv >= t2 - 1e-12:
            if t4 is None or tv <= t4 + 1e-12:
                t3 = float(tv)
            break

    cls = "recovered" if t4 is not None else "non-resilient (breakdown)"
    return StageTimes(float(t1), t2, t3, t4, nominal_level, cls)


def td_metrics(
    stages: StageTimes,
    t: np.ndarray,
    perf: np.ndarray,
    tail_window: float,
    T_target: float,
    D_target: float,
) -> ResilienceReport:
    """Resilience metrics for a segmented trajectory.

    T = t4 - t2 (0 with no impact, inf with no recovery); M is the largest
    shortfall during [t2, t4]; D is the shortfall mean over the trailing
    ``tail_window``; total_loss integrates the clipped shortfall from t1 on.
    """
    t = np.asarray(t, dtype=float)
    perf = np.asarray(perf, dtype=float)
    span = float(t[-1] - t[0])
    if tail_window > span + 1e-12:
        raise ValueError(f"tail_window {tail_window:g} exceeds series span {span:g}")
    nominal = stages.nominal
    shortfall = nominal - perf

    if stages.t2 is None:
        T = 0.0
        M = 0.0
    else:
        t_hi = stages.t4 if stages.t4 is not None else float(t[-1])
        window = (t >= stages.t2 - 1e-12) & (t <= t_hi + 1e-12)
        M = float(np.max(shortfall[window]))
        T = (t_hi - stages.t2) if stages.t4 is not None else math.inf

    tail = t >= t[-1] - tail_window - 1e-12
    D = max(0.0, float(np.mean(shortfall[tail])))

    start = stages.t1 if stages.t1 is not None else float(t[0])
    loss_mask = t >= start - 1e-12
    total_loss = float(
        np.trapezoid(np.clip(shortfall[loss_mask], 0.0, None), t[loss_mask])
    )

    report = ResilienceReport(
        t1=stages.t1,
        t2=stages.t2,
        t3=stages.t3,
        t4=stages.t4,
        T=T,
        D=D,
        M=M,
        total_loss=total_loss,
        nominal=nominal,
        verdict=False,
    )
    return replace(report, verdict=is_td_resilient(report, T_target, D_target))


def is_td_resilient(report: ResilienceReport, T_target: float, D_target: float) -> bool:
    """Closed-inequality check: recovered within T_target at loss at most D_target."""
    if T_target <= 0 or D_target <= 0:
        raise ValueError("targets must be positive")
    return report.T <= T_target and report.D <= D_target


def report_to_dict(report: ResilienceReport) -> dict:
    """JSON-ready mapping; absent stages are None, an infinite T is "inf"."""
    return {
        "t1": report.t1,
        "t2": report.t2,
        "t3": report.t3,
        "t4": report.t4,
        "T": "inf" if math.isinf(report.T) else report.T,
        "D": report.D,
        "M": report.M,
        "total_loss": report.total_loss,
        "nominal": report.nominal,
        "verdict": report.verdict,
    }
