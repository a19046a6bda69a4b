"""Faulty rounds: an adversary re-assigns every ball at scheduled times.

A fault fires at the start of its round, before any ball is selected. Ball
history (visited nodes, progress) survives the fault; the node a ball is
dropped on counts as visited.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ssbins.graph import Graph
from ssbins.metrics import LegitimacyRule, RunRecord
from ssbins.process import Configuration, Observer, Strategy, _drive
from ssbins.streams import RandomStream, Streams


class FaultSpecError(ValueError):
    pass


@dataclass(frozen=True)
class FaultPolicy:
    kind: str  # all_in_one | reshuffle | custom
    target: int = 0
    counts: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("all_in_one", "reshuffle", "custom"):
            raise FaultSpecError(f"unknown fault policy {self.kind!r}")
        if self.kind == "custom" and self.counts is None:
            raise FaultSpecError("custom fault policy needs a count vector")

    @classmethod
    def all_in_one(cls, target: int = 0) -> FaultPolicy:
        return cls("all_in_one", target=target)

    @classmethod
    def uniform_reshuffle(cls) -> FaultPolicy:
        return cls("reshuffle")

    @classmethod
    def custom(cls, counts: Sequence[int]) -> FaultPolicy:
        return cls("custom", counts=tuple(int(x) for x in counts))


@dataclass(frozen=True)
class FaultSchedule:
    """When faults fire.

    ``periodic`` fires at every positive multiple of ``period``;
    ``bernoulli`` fires independently with probability ``rate`` in each round
    after the first; ``at_rounds`` fires at the listed rounds.
    """

    trigger: str
    policy: FaultPolicy
    period: int = 0
    rate: float = 0.0
    rounds: tuple[int, ...] = ()

    def __post_init__(self):
        if self.trigger == "periodic":
            if self.period < 1:
                raise FaultSpecError(f"period must be >= 1, got {self.period}")
        elif self.trigger == "bernoulli":
            if not 0.0 <= self.rate <= 1.0:
                raise FaultSpecError(f"rate must lie in [0, 1], got {self.rate}")
        elif self.trigger == "at_rounds":
            if any(b <= a for a, b in zip(self.rounds, self.rounds[1:])):
                raise FaultSpecError("fault rounds must be strictly increasing")
            if any(t < 0 for t in self.rounds):
                raise FaultSpecError("fault rounds must be non-negative")
        else:
            raise FaultSpecError(f"unknown trigger {self.trigger!r}")

    @classmethod
    def periodic(cls, period: int, policy: FaultPolicy) -> FaultSchedule:
        return cls("periodic", policy, period=period)

    @classmethod
    def bernoulli(cls, rate: float, policy: FaultPolicy) -> FaultSchedule:
        return cls("bernoulli", policy, rate=rate)

    @classmethod
    def at_rounds(cls, rounds: Iterable[int], policy: FaultPolicy) -> FaultSchedule:
        return cls("at_rounds", policy, rounds=tuple(int(t) for t in rounds))

    def realize(self, start: int, end: int, r: RandomStream | None = None) -> list[int]:
        """Fault rounds in ``[start, end)``. Bernoulli uses one draw per round after ``start``."""
        if self.trigger == "periodic":
            first = max(self.period, -(-start // self.period) * self.period)
            return list(range(first, end, self.period))
        if self.trigger == "at_rounds":
            return [t for t in self.rounds if start <= t < end]
        if end - start <= 1:
            return []
        if r is None:
            raise FaultSpecError("bernoulli schedule needs a random stream")
        hits = np.flatnonzero(r.take(end - start - 1) < self.rate)
        return (hits + start + 1).tolist()


def _new_queues(c: Configuration, policy: FaultPolicy, r: RandomStream | None) -> list[list[int]]:
    n, m = c.n, c.m
    if policy.kind == "all_in_one":
        if not 0 <= policy.target < n:
            raise FaultSpecError(f"fault target {policy.target} out of range for n={n}")
        counts = np.zeros(n, np.int64)
        counts[policy.target] = m
    elif policy.kind == "custom":
        counts = np.asarray(policy.counts, np.int64)
        if len(counts) != n or (counts < 0).any() or counts.sum() != m:
            raise FaultSpecError(
                f"fault counts must be {n} non-negative values summing to m={m}"
            )
    else:
        if r is None:
            raise FaultSpecError("reshuffle needs a random stream")
        where = r.integers(n, m)
        queues = [[] for _ in range(n)]
        for b, v in enumerate(where.tolist()):
            queues[v].append(b)
        return queues
    queues, nxt_id = [], 0
    for x in counts.tolist():
        queues.append(list(range(nxt_id, nxt_id + x)))
        nxt_id += x
    return queues


def apply_fault(c: Configuration, policy: FaultPolicy, r: RandomStream | None = None) -> Configuration:
    """Copy of ``c`` with balls re-assigned per ``policy`` (m draws for a reshuffle)."""
    out = c.copy()
    out.relocate(_new_queues(out, policy, r))
    return out


def faulty_run(
    c0: Configuration,
    g: Graph,
    strategy: Strategy,
    rounds: int,
    schedule: FaultSchedule,
    streams: Streams,
    rule: LegitimacyRule | None = None,
    observers: Iterable[Observer] = (),
    stride: int | None = None,
    checkpoints=(),
    stop_on_cover: bool = False,
    shuffle_arrivals: bool = True,
) -> RunRecord:
    """Like :func:`ssbins.process.run`, with faults fired per ``schedule``.

    ``record.recoveries`` holds, per fault, the rounds until the next
    legitimate configuration (censored at the next fault or the end).
    """
    faults = schedule.realize(c0.round, c0.round + rounds, streams.env)

    def hit(c: Configuration) -> None:
        c.relocate(_new_queues(c, schedule.policy, streams.env))

    return _drive(c0, g, strategy, rounds, streams, rule=rule, observers=observers,
                  stride=stride, checkpoints=checkpoints, stop_on_cover=stop_on_cover,
                  shuffle_arrivals=shuffle_arrivals, fault_rounds=faults, on_fault=hit)
