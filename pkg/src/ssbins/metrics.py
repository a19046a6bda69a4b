"""Legitimacy, durations and the per-run record.

All duration metrics return a :class:`Duration`; a censored duration means the
event never happened within the round budget and ``rounds`` holds the budget.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, NamedTuple

import numpy as np


class TracingRequired(RuntimeError):
    """Raised when a per-ball metric is requested from an anonymous run."""


class RuleError(ValueError):
    pass


class Duration(NamedTuple):
    rounds: int
    censored: bool = False


class RuleForm(str, Enum):
    BALANCED = "balanced"
    SCALED = "scaled"
    ADDITIVE = "additive"


@dataclass(frozen=True)
class LegitimacyRule:
    """Max-load threshold with an explicit constant; logarithms are base 2.

    ``balanced``  ceil(alpha * log2 n)
    ``scaled``    ceil(alpha * (m/n) * log2 n)
    ``additive``  ceil(alpha * (m/n + log2 n))
    """

    alpha: float = 4.0
    form: RuleForm = RuleForm.BALANCED

    def __post_init__(self):
        if not self.alpha > 0:
            raise RuleError(f"alpha must be positive, got {self.alpha}")
        object.__setattr__(self, "form", RuleForm(self.form))

    def threshold(self, n: int, m: int) -> int:
        lg = math.log2(n)
        if self.form is RuleForm.BALANCED:
            raw = self.alpha * lg
        elif self.form is RuleForm.SCALED:
            raw = self.alpha * (m / n) * lg
        else:
            raw = self.alpha * (m / n + lg)
        # guard against 4*log2(16) landing a hair above 16.0
        thr = math.ceil(round(raw, 9))
        floor = -(-m // n)
        if thr < floor:
            raise RuleError(
                f"threshold {thr} is below the average load ceil(m/n)={floor}; "
                "no configuration could be legitimate"
            )
        return thr


def _loads(c) -> np.ndarray:
    return np.asarray(getattr(c, "loads", c))


def max_load(c) -> int:
    """Largest queue size. Accepts a Configuration or a plain load vector."""
    return int(_loads(c).max())


def empty_fraction(c) -> float:
    loads = _loads(c)
    return float(np.count_nonzero(loads == 0) / len(loads))


def is_legitimate(c, rule: LegitimacyRule) -> bool:
    loads = _loads(c)
    return max_load(loads) <= rule.threshold(len(loads), int(loads.sum()))


@dataclass
class RunRecord:
    """Metric stream and summary of one seeded trajectory.

    Sample arrays hold one entry per sampled round (every ``stride`` rounds
    plus the first and last). Rounds are absolute; ``start_round`` is where the
    run began.
    """

    process: str
    n: int
    m: int
    threshold: int
    start_round: int
    budget: int
    rounds_run: int = 0
    stride: int = 1
    seed: int | None = None
    echo: dict[str, Any] = field(default_factory=dict)
    sample_round: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    sample_max: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    sample_empty: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float64))
    sample_faulty: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    start_legitimate: bool = True
    first_legit: int | None = None
    first_violation: int | None = None
    overall_max: int = 0
    mean_empty_fraction: float = 0.0
    moves_total: int = 0
    balls_inserted: int = 0
    fault_rounds: list[int] = field(default_factory=list)
    recoveries: list[Duration] = field(default_factory=list)
    checkpoint_max: dict[int, int] = field(default_factory=dict)
    stopped_early: bool = False
    final: Any = field(default=None, repr=False, compare=False)

    @property
    def end_round(self) -> int:
        return self.start_round + self.rounds_run

    @property
    def sample_legitimate(self) -> np.ndarray:
        return self.sample_max <= self.threshold

    @property
    def trace(self):
        return None if self.final is None else self.final.trace

    def rows(self) -> list[dict[str, Any]]:
        return [
            {
                "process": self.process,
                "round": int(r),
                "max_load": int(mx),
                "empty_fraction": float(e),
                "legitimate": bool(mx <= self.threshold),
                "faulty": bool(f),
            }
            for r, mx, e, f in zip(
                self.sample_round, self.sample_max, self.sample_empty, self.sample_faulty
            )
        ]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(row) + "\n" for row in self.rows())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=SAMPLE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()


SAMPLE_COLUMNS = ["process", "round", "max_load", "empty_fraction", "legitimate", "faulty"]


def _rule_threshold(record: RunRecord, rule: LegitimacyRule | None) -> int | None:
    """None when the record's own streamed threshold applies."""
    if rule is None:
        return None
    thr = rule.threshold(record.n, record.m)
    if thr == record.threshold:
        return None
    if record.stride != 1:
        raise ValueError(
            "re-evaluating a record under a different rule needs every round sampled (stride 1)"
        )
    return thr


def convergence_time(record: RunRecord, rule: LegitimacyRule | None = None) -> Duration:
    """Rounds from the start until the first legitimate configuration."""
    thr = _rule_threshold(record, rule)
    if thr is None:
        first = record.first_legit
    else:
        hits = record.sample_round[record.sample_max <= thr]
        first = int(hits[0]) if len(hits) else None
    if first is None:
        return Duration(record.rounds_run, censored=True)
    return Duration(first - record.start_round)


def stability_horizon(record: RunRecord, rule: LegitimacyRule | None = None) -> Duration:
    """Rounds until the first violation of a run that started legitimate."""
    thr = _rule_threshold(record, rule)
    if thr is None:
        if not record.start_legitimate:
            raise ValueError("stability horizon needs a legitimate starting configuration")
        first = record.first_violation
    else:
        bad = record.sample_round[record.sample_max > thr]
        if len(bad) and bad[0] == record.start_round:
            raise ValueError("stability horizon needs a legitimate starting configuration")
        first = int(bad[0]) if len(bad) else None
    if first is None:
        return Duration(record.rounds_run, censored=True)
    return Duration(first - record.start_round)


def _trace_of(obj):
    trace = getattr(obj, "trace", obj)
    if trace is None:
        raise TracingRequired("per-ball metrics need a traced run")
    return trace


def progress(trace, from_round: int, to_round: int, ball: int | None = None):
    """Forwarding events in rounds ``[from_round, to_round)``.

    ``trace`` may be a BallTrace, a traced Configuration or a RunRecord. Both
    window ends must be the run start, the current round, or a recorded
    progress checkpoint. Returns an int for one ball, else a vector over balls.
    """
    tr = _trace_of(trace)
    if not from_round <= to_round <= tr.round:
        raise ValueError(f"bad window [{from_round}, {to_round}) at round {tr.round}")
    if from_round == to_round:
        delta = np.zeros(len(tr.progress), dtype=np.int64)
    else:
        delta = tr.cumulative(to_round) - tr.cumulative(from_round)
    return int(delta[ball]) if ball is not None else delta


def parallel_cover_time(record: RunRecord) -> Duration:
    """Rounds until every ball has visited every node, measured from the start."""
    tr = _trace_of(record)
    if (tr.cover_round < 0).any():
        return Duration(record.rounds_run, censored=True)
    return Duration(int(tr.cover_round.max()) - record.start_round)
