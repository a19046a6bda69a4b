"""Reference processes: memoryless re-assignment, the dominating process and
the single-ball walk with its coupon-collector mean."""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

from ssbins import _kernels as K
from ssbins.graph import Graph, TopologyError
from ssbins.metrics import LegitimacyRule, RunRecord
from ssbins.process import (
    Configuration,
    MoveRecord,
    Strategy,
    _drive,
    _step,
    default_stride,
)
from ssbins.streams import RandomStream, Streams


class BaselineKind(str, Enum):
    MEMORYLESS = "memoryless"
    DOMINATING = "dominating"
    SINGLE_BALL = "single_ball"


def memoryless_step(m: int, n: int, r: RandomStream) -> np.ndarray:
    """Throw ``m`` balls into ``n`` bins independently; one draw per ball."""
    if m < 1 or n < 1:
        raise ValueError(f"need m, n >= 1, got m={m}, n={n}")
    return np.bincount(r.integers(n, m), minlength=n).astype(np.int64)


def memoryless_run(
    m: int,
    n: int,
    rounds: int,
    r: RandomStream,
    rule: LegitimacyRule | None = None,
    stride: int | None = None,
) -> RunRecord:
    """Record of ``rounds`` independent throws. Round 0 is itself a throw."""
    rule = rule or LegitimacyRule()
    thr = rule.threshold(n, m)
    stride = stride or default_stride(rounds)
    maxes = np.empty(rounds + 1, np.int64)
    empties = np.empty(rounds + 1, np.float64)
    for t in range(rounds + 1):
        loads = memoryless_step(m, n, r)
        maxes[t] = loads.max()
        empties[t] = np.count_nonzero(loads == 0) / n
    keep = np.arange(rounds + 1)
    keep = keep[(keep % stride == 0) | (keep == rounds)]
    legit = np.flatnonzero(maxes <= thr)
    bad = np.flatnonzero(maxes > thr)
    return RunRecord(
        process=BaselineKind.MEMORYLESS.value,
        n=n,
        m=m,
        threshold=thr,
        start_round=0,
        budget=rounds,
        rounds_run=rounds,
        stride=stride,
        sample_round=keep,
        sample_max=maxes[keep],
        sample_empty=empties[keep],
        sample_faulty=np.zeros(len(keep), bool),
        start_legitimate=bool(maxes[0] <= thr),
        first_legit=int(legit[0]) if len(legit) else None,
        first_violation=int(bad[0]) if len(bad) else None,
        overall_max=int(maxes.max()),
        mean_empty_fraction=float(empties.mean()),
        moves_total=m * rounds,
    )


def dominating_step(
    c: Configuration, g: Graph, strategy: Strategy, streams: Streams
) -> tuple[Configuration, MoveRecord]:
    """Add a ball to every empty node, then take one ordinary round.

    Load-only: ``c`` must be anonymous.
    """
    return _step(c, g, strategy, streams, dominating=True)


def dominating_run(
    c0: Configuration,
    g: Graph,
    rounds: int,
    streams: Streams,
    rule: LegitimacyRule | None = None,
    checkpoints=(),
    stride: int | None = None,
) -> RunRecord:
    """The legitimacy threshold stays the one for the initial ball count."""
    return _drive(c0, g, Strategy.FIFO, rounds, streams, rule=rule, stride=stride,
                  checkpoints=checkpoints, dominating=True,
                  process=BaselineKind.DOMINATING.value)


def single_ball_cover_time(g: Graph, start: int, r: RandomStream) -> int:
    """Hops of an undelayed uniform walk from ``start`` until every node is seen."""
    if not g.connected:
        raise TopologyError("graph is disconnected; a single walk can never cover it")
    if not 0 <= start < g.n:
        raise IndexError(f"start node {start} out of range for n={g.n}")
    visited = np.zeros(g.n, dtype=np.bool_)
    visited[start] = True
    state = np.array([start, 0, 1], dtype=np.int64)
    block = 4 * g.n + 64
    while state[2] < g.n:
        r.reserve(block)
        pos = K.walk_cover(g.code, g.n, g.offsets, g.targets, r.buf, r.pos, block, visited, state)
        r.advance(int(pos))
    return int(state[1])


def coupon_collector_mean(n: int) -> float:
    """Exact mean cover time of the uniform walk on the complete graph K_n."""
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    return (n - 1) * math.fsum(1.0 / i for i in range(1, n))
