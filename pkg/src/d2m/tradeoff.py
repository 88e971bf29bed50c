"""Hardware-aware reward, penalty-exponent calibration, and Pareto filtering
over (latency, score) candidates.

The reward multiplies a candidate's benchmark score by (latency / base)^w
with w < 0 penalizing slow candidates; w is calibrated from the deployment
platform's empirical rule "scaling latency by f buys a relative gain g" so
that such trades leave the reward unchanged.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DegenerateCalibration, EmptyRecord, InvalidConfig, IoFailure, NonPositiveLatency


@dataclass(frozen=True)
class CandidateEvaluation:
    """(depth, latency, score) of one candidate, with its filled-in reward."""

    config_id: str
    retained_depth: int
    latency_ms: float
    score: float
    reward: float | None = None


def reward(score: float, latency_ms: float, base_latency_ms: float,
           exponent: float) -> float:
    """score * (latency / base)^exponent."""
    if latency_ms <= 0 or base_latency_ms <= 0:
        raise NonPositiveLatency(
            f"latencies must be positive, got {latency_ms} and {base_latency_ms}"
        )
    return score * (latency_ms / base_latency_ms) ** exponent


def calibrate_w(latency_factor: float, relative_gain: float) -> float:
    """The exponent making score*gain at latency*factor reward-neutral:
    w = -ln(gain) / ln(factor)."""
    if latency_factor <= 1.0:
        raise DegenerateCalibration(
            f"latency_factor must exceed 1, got {latency_factor}"
        )
    if relative_gain <= 0.0:
        raise DegenerateCalibration(f"relative_gain must be positive, got {relative_gain}")
    return -math.log(relative_gain) / math.log(latency_factor)


def evaluate_candidates(candidates: Sequence[CandidateEvaluation],
                        base_latency_ms: float, exponent: float,
                        ) -> tuple[list[CandidateEvaluation], CandidateEvaluation]:
    """Fill in rewards and report the argmax (ties go to lower latency)."""
    if not candidates:
        raise EmptyRecord("evaluate_candidates needs at least one candidate")
    evaluated = [
        replace(c, reward=reward(c.score, c.latency_ms, base_latency_ms, exponent))
        for c in candidates
    ]
    best = min(evaluated, key=lambda c: (-c.reward, c.latency_ms))
    return evaluated, best


def pareto_frontier(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Non-dominated subset of (latency, score) points, latency ascending.

    q dominates p when q is no slower and no worse with at least one strict
    inequality; exact duplicates never dominate each other, so both survive.
    """
    if not points:
        raise EmptyRecord("pareto_frontier needs at least one point")
    survivors = []
    for i, (lat_p, score_p) in enumerate(points):
        dominated = False
        for j, (lat_q, score_q) in enumerate(points):
            if j == i:
                continue
            if (lat_q <= lat_p and score_q >= score_p
                    and (lat_q < lat_p or score_q > score_p)):
                dominated = True
                break
        if not dominated:
            survivors.append((i, lat_p, score_p))
    survivors.sort(key=lambda t: (t[1], t[2], t[0]))
    return [(lat, score) for _, lat, score in survivors]


# --- CSV interchange -----------------------------------------------------------

_HEADER = ["config_id", "depth", "latency_ms", "score", "reward"]


def read_candidates_csv(source) -> list[CandidateEvaluation]:
    """Parse a candidate CSV; the reward column is optional and may be blank.
    Leading '#' comment lines are skipped."""
    try:
        if isinstance(source, (str, Path)):
            with open(source, newline="", encoding="utf-8") as handle:
                rows = [r for r in csv.reader(handle) if r and not r[0].startswith("#")]
        else:
            rows = [r for r in csv.reader(source) if r and not r[0].startswith("#")]
    except OSError as exc:
        raise IoFailure(f"cannot read candidates: {exc}") from exc
    if not rows or [c.strip() for c in rows[0][:4]] != _HEADER[:4]:
        raise InvalidConfig("candidate CSV must start with header "
                            "config_id,depth,latency_ms,score[,reward]")
    out = []
    for row in rows[1:]:
        if len(row) < 4:
            raise InvalidConfig(f"candidate row too short: {row}")
        rew = float(row[4]) if len(row) > 4 and row[4].strip() else None
        out.append(CandidateEvaluation(config_id=row[0], retained_depth=int(row[1]),
                                       latency_ms=float(row[2]), score=float(row[3]),
                                       reward=rew))
    if not out:
        raise EmptyRecord("candidate CSV has no data rows")
    return out


def write_candidates_csv(candidates: Iterable[CandidateEvaluation], destination,
                         header_comment: str | None = None) -> None:
    """Emit candidates with rewards rounded to two decimals (presentation
    precision; recompute for anything downstream)."""
    rows: list[list[str]] = []
    if header_comment:
        rows.append([f"# {header_comment}"])
    rows.append(_HEADER)
    for c in candidates:
        rew = "" if c.reward is None else f"{c.reward:.2f}"
        rows.append([c.config_id, str(c.retained_depth), f"{c.latency_ms:.6g}",
                     f"{c.score:.6g}", rew])
    try:
        if isinstance(destination, (str, Path)):
            with open(destination, "w", newline="", encoding="utf-8") as handle:
                csv.writer(handle).writerows(rows)
        else:
            csv.writer(destination).writerows(rows)
    except OSError as exc:
        raise IoFailure(f"cannot write candidates: {exc}") from exc
