"""The repeated balls-into-bins engine.

One round is synchronous. Every node that is non-empty at the start of the
round detaches one ball (per the queue strategy), each detached ball gets a
uniform neighbor of its source, and arrivals are appended at the tail of the
destination queue, so a ball moves at most one hop per round.

Configurations come in two modes. ``anonymous`` keeps only queue sizes.
``traced`` keeps the queues themselves (doubly linked lists over ball ids)
plus a :class:`BallTrace`. Under one seed both modes produce the same load
trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from ssbins import _kernels as K
from ssbins.graph import Graph
from ssbins.metrics import Duration, LegitimacyRule, RunRecord
from ssbins.streams import RandomStream, Streams

DRAW_BLOCK = 1 << 20
MAX_SAMPLES = 10_000


class PlacementError(ValueError):
    pass


class SimulationError(RuntimeError):
    def __init__(self, round_: int, message: str):
        super().__init__(f"round {round_}: {message}")
        self.round = round_


class Strategy(str, Enum):
    FIFO = "fifo"
    LIFO = "lifo"
    UNIFORM_RANDOM = "random"

    @property
    def code(self) -> int:
        return {"fifo": K.FIFO, "lifo": K.LIFO, "random": K.RANDOM}[self.value]


@dataclass(frozen=True)
class Placement:
    kind: str
    target: int = 0
    counts: tuple[int, ...] | None = None

    @classmethod
    def one_per_node(cls) -> Placement:
        return cls("one_per_node")

    @classmethod
    def all_in_one(cls, target: int = 0) -> Placement:
        return cls("all_in_one", target=target)

    @classmethod
    def uniform_random(cls) -> Placement:
        return cls("uniform_random")

    @classmethod
    def custom(cls, counts: Sequence[int]) -> Placement:
        return cls("custom", counts=tuple(int(x) for x in counts))

    def loads(self, n: int, m: int, r: RandomStream | None = None) -> np.ndarray:
        """Load vector for ``m`` balls on ``n`` nodes.

        ``one_per_node`` deals balls round-robin, so it is one ball per node
        when ``m == n``. ``uniform_random`` draws one value per ball.
        """
        if m < 1:
            raise PlacementError(f"need at least one ball, got m={m}")
        if self.kind == "one_per_node":
            loads = np.full(n, m // n, dtype=np.int64)
            loads[: m % n] += 1
        elif self.kind == "all_in_one":
            if not 0 <= self.target < n:
                raise PlacementError(f"target node {self.target} out of range for n={n}")
            loads = np.zeros(n, dtype=np.int64)
            loads[self.target] = m
        elif self.kind == "uniform_random":
            if r is None:
                raise PlacementError("uniform placement needs a random stream")
            loads = np.bincount(r.integers(n, m), minlength=n).astype(np.int64)
        elif self.kind == "custom":
            loads = np.asarray(self.counts, dtype=np.int64)
            if len(loads) != n:
                raise PlacementError(f"custom placement has {len(loads)} counts for {n} nodes")
            if (loads < 0).any():
                raise PlacementError("custom placement has negative counts")
            if loads.sum() != m:
                raise PlacementError(f"custom counts sum to {loads.sum()}, expected m={m}")
        else:
            raise PlacementError(f"unknown placement {self.kind!r}")
        return loads


@dataclass
class BallTrace:
    """Per-ball history: visited nodes (bitsets), forwarding count, cover round.

    ``checkpoints`` maps a round to the cumulative progress vector at that
    round; the start round is always present and the live counters stand for
    the current round.
    """

    n: int
    visited: np.ndarray
    visited_count: np.ndarray
    progress: np.ndarray
    cover_round: np.ndarray
    round: int = 0
    checkpoints: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def start(cls, n: int, location: np.ndarray, round_: int = 0) -> BallTrace:
        m = len(location)
        tr = cls(
            n=n,
            visited=np.zeros((m, (n + 63) // 64), dtype=np.uint64),
            visited_count=np.zeros(m, dtype=np.int64),
            progress=np.zeros(m, dtype=np.int64),
            cover_round=np.full(m, -1, dtype=np.int64),
            round=round_,
        )
        tr.mark(location, round_)
        tr.checkpoints[round_] = tr.progress.copy()
        return tr

    def mark(self, location: np.ndarray, round_: int) -> None:
        """Record that each ball ``b`` is at ``location[b]`` at ``round_``."""
        balls = np.arange(len(location))
        words = location >> 6
        bits = np.left_shift(np.uint64(1), (location & 63).astype(np.uint64))
        fresh = (self.visited[balls, words] & bits) == 0
        self.visited[balls, words] |= bits
        self.visited_count += fresh
        newly = fresh & (self.visited_count == self.n) & (self.cover_round < 0)
        self.cover_round[newly] = round_

    def visited_nodes(self, ball: int) -> set[int]:
        bits = np.unpackbits(self.visited[ball].view(np.uint8), bitorder="little")
        return set(np.flatnonzero(bits[: self.n]).tolist())

    def cumulative(self, round_: int) -> np.ndarray:
        if round_ == self.round:
            return self.progress
        if round_ in self.checkpoints:
            return self.checkpoints[round_]
        raise KeyError(f"no progress checkpoint at round {round_}")

    def copy(self) -> BallTrace:
        return BallTrace(
            n=self.n,
            visited=self.visited.copy(),
            visited_count=self.visited_count.copy(),
            progress=self.progress.copy(),
            cover_round=self.cover_round.copy(),
            round=self.round,
            checkpoints={k: v.copy() for k, v in self.checkpoints.items()},
        )


@dataclass
class Configuration:
    n: int
    loads: np.ndarray
    round: int = 0
    mode: str = "anonymous"
    head: np.ndarray | None = None
    tail: np.ndarray | None = None
    nxt: np.ndarray | None = None
    prv: np.ndarray | None = None
    location: np.ndarray | None = None
    trace: BallTrace | None = None

    @property
    def m(self) -> int:
        return int(self.loads.sum())

    @property
    def traced(self) -> bool:
        return self.mode == "traced"

    @classmethod
    def from_loads(cls, loads: Sequence[int], traced: bool = False, round_: int = 0) -> Configuration:
        """Balls 0..m-1 fill nodes in ascending index order when traced."""
        loads = np.array(loads, dtype=np.int64)
        if not traced:
            return cls(n=len(loads), loads=loads, round=round_)
        queues = []
        nxt_id = 0
        for x in loads:
            queues.append(list(range(nxt_id, nxt_id + x)))
            nxt_id += x
        return cls.from_queues(queues, round_=round_)

    @classmethod
    def from_queues(cls, queues: Sequence[Sequence[int]], round_: int = 0) -> Configuration:
        """Traced configuration from explicit queues (head first)."""
        n = len(queues)
        ids = sorted(b for q in queues for b in q)
        m = len(ids)
        if ids != list(range(m)):
            raise PlacementError("queues must hold each ball id 0..m-1 exactly once")
        c = cls(
            n=n,
            loads=np.array([len(q) for q in queues], dtype=np.int64),
            round=round_,
            mode="traced",
            head=np.full(n, -1, dtype=np.int64),
            tail=np.full(n, -1, dtype=np.int64),
            nxt=np.full(m, -1, dtype=np.int64),
            prv=np.full(m, -1, dtype=np.int64),
            location=np.zeros(m, dtype=np.int64),
        )
        c._link(queues)
        c.trace = BallTrace.start(n, c.location, round_)
        return c

    def _link(self, queues: Sequence[Sequence[int]]) -> None:
        self.head[:] = -1
        self.tail[:] = -1
        for v, q in enumerate(queues):
            prev = -1
            for b in q:
                self.prv[b] = prev
                if prev >= 0:
                    self.nxt[prev] = b
                else:
                    self.head[v] = b
                self.location[b] = v
                prev = b
            if prev >= 0:
                self.nxt[prev] = -1
                self.tail[v] = prev
        self.loads[:] = [len(q) for q in queues]

    def queues(self) -> list[list[int]]:
        if not self.traced:
            raise ValueError("anonymous configurations have no ball identities")
        out = []
        for v in range(self.n):
            q, b = [], self.head[v]
            while b >= 0:
                q.append(int(b))
                b = self.nxt[b]
            out.append(q)
        return out

    def relocate(self, queues: Sequence[Sequence[int]]) -> None:
        """Replace queue contents in place, keeping ball history."""
        if self.traced:
            self._link(queues)
            self.trace.mark(self.location, self.round)
        else:
            self.loads[:] = [len(q) for q in queues]

    def copy(self) -> Configuration:
        def cp(a):
            return None if a is None else a.copy()

        return Configuration(
            n=self.n,
            loads=self.loads.copy(),
            round=self.round,
            mode=self.mode,
            head=cp(self.head),
            tail=cp(self.tail),
            nxt=cp(self.nxt),
            prv=cp(self.prv),
            location=cp(self.location),
            trace=None if self.trace is None else self.trace.copy(),
        )


@dataclass
class MoveRecord:
    """Moves of one round, listed in ascending source order."""

    round: int
    sources: np.ndarray
    destinations: np.ndarray
    balls: np.ndarray | None = None


def init_config(
    g: Graph,
    m: int,
    placement: Placement,
    traced: bool = False,
    r: RandomStream | None = None,
) -> Configuration:
    loads = placement.loads(g.n, m, r)
    return Configuration.from_loads(loads, traced=traced)


class Observer(Protocol):
    def __call__(self, config: Configuration, moves: MoveRecord) -> bool | None: ...


class _Engine:
    """Drives the compiled loops over one mutable configuration."""

    def __init__(self, c: Configuration, g: Graph, strategy: Strategy, streams: Streams,
                 threshold: int, stride: int, shuffle_arrivals: bool = True,
                 dominating: bool = False, stop_on_cover: bool = False):
        if c.n != g.n:
            raise ValueError(f"configuration has {c.n} nodes, graph has {g.n}")
        if dominating and c.traced:
            raise ValueError("the dominating process is load-only; use an anonymous configuration")
        self.c, self.g, self.strategy, self.streams = c, g, Strategy(strategy), streams
        self.threshold, self.stride = threshold, stride
        self.shuffle_arrivals, self.dominating = shuffle_arrivals, dominating
        self.stop_on_cover = stop_on_cover
        n = g.n
        self.srcs = np.zeros(n, np.int64)
        self.dsts = np.zeros(n, np.int64)
        self.balls = np.zeros(n, np.int64)
        self.perm = np.zeros(n, np.int64)
        self.out = np.zeros(K.N_OUT, np.int64)
        self.covered = 0 if c.trace is None else int((c.trace.cover_round >= 0).sum())

    def advance(self, rounds: int, sink: _Stats) -> int:
        """Run up to ``rounds`` rounds; returns how many ran."""
        c, g, s = self.c, self.g, self.streams
        n = g.n
        total = 0
        block = max(1, DRAW_BLOCK // n)
        while total < rounds:
            if self.stop_on_cover and c.traced and self.covered == len(c.nxt):
                break
            want = min(rounds - total, block)
            s.dest.reserve(n * want)
            cap = want // self.stride + 2
            s_round = np.empty(cap, np.int64)
            s_max = np.empty(cap, np.int64)
            s_empty = np.empty(cap, np.int64)
            out = self.out
            if c.traced:
                tr = c.trace
                s.order.reserve(2 * n * want)
                K.traced_rounds(
                    g.code, n, g.offsets, g.targets, c.loads, c.head, c.tail, c.nxt, c.prv,
                    c.location, tr.visited, tr.visited_count, tr.progress, tr.cover_round,
                    self.strategy.code, self.shuffle_arrivals, self.stop_on_cover, self.covered,
                    s.dest.buf, s.dest.pos, s.order.buf, s.order.pos, want, c.round,
                    self.threshold, self.stride, s_round, s_max, s_empty,
                    self.srcs, self.dsts, self.balls, self.perm, out,
                )
                s.order.advance(int(out[10]))
                self.covered = int(out[11])
            else:
                K.anonymous_rounds(
                    g.code, n, g.offsets, g.targets, c.loads, self.dominating,
                    s.dest.buf, s.dest.pos, want, c.round, self.threshold, self.stride,
                    s_round, s_max, s_empty, self.srcs, self.dsts, out,
                )
            s.dest.advance(int(out[1]))
            done = int(out[0])
            ns = int(out[8])
            c.round += done
            if c.trace is not None:
                c.trace.round = c.round
            sink.absorb(out, s_round[:ns], s_max[:ns], s_empty[:ns])
            total += done
            if done < want:
                break
        return total

    def last_moves(self) -> MoveRecord:
        k = int(self.out[9])
        return MoveRecord(
            round=self.c.round - 1,
            sources=self.srcs[:k].copy(),
            destinations=self.dsts[:k].copy(),
            balls=self.balls[:k].copy() if self.c.traced else None,
        )


class _Stats:
    def __init__(self, n: int):
        self.n = n
        self.rounds, self.maxes, self.empties, self.faulty = [], [], [], []
        self.first_legit = None
        self.first_violation = None
        self.overall = 0
        self.sum_empty = 0.0
        self.observed = 0
        self.moves = 0
        self.inserted = 0
        # first legitimate round since the last fault (or since the start)
        self.legit_mark = None

    def snapshot(self, c: Configuration, threshold: int, faulty: bool = False) -> None:
        """Fold in the configuration at its current round (not produced by a kernel)."""
        mx = int(c.loads.max())
        empty = float(np.count_nonzero(c.loads == 0) / c.n)
        legit = mx <= threshold
        if legit and self.first_legit is None:
            self.first_legit = c.round
        if not legit and self.first_violation is None:
            self.first_violation = c.round
        self.legit_mark = c.round if legit else None
        self.overall = max(self.overall, mx)
        if self.rounds and self.rounds[-1][-1] == c.round:
            # a fault rewrote the configuration already sampled at this round
            self.maxes[-1][-1] = mx
            self.empties[-1][-1] = empty
            self.faulty[-1][-1] = faulty
        else:
            self.sum_empty += empty
            self.observed += 1
            self._append([c.round], [mx], [empty], [faulty])

    def _append(self, rounds, maxes, empties, faulty) -> None:
        self.rounds.append(np.asarray(rounds, np.int64))
        self.maxes.append(np.asarray(maxes, np.int64))
        self.empties.append(np.asarray(empties, np.float64))
        self.faulty.append(np.asarray(faulty, bool))

    def absorb(self, out, s_round, s_max, s_empty) -> None:
        if out[0] == 0:
            return
        if out[2] >= 0:
            if self.first_legit is None:
                self.first_legit = int(out[2])
            if self.legit_mark is None:
                self.legit_mark = int(out[2])
        if out[3] >= 0 and self.first_violation is None:
            self.first_violation = int(out[3])
        self.overall = max(self.overall, int(out[4]))
        self.sum_empty += out[5] / self.n
        self.observed += int(out[0])
        self.moves += int(out[6])
        self.inserted += int(out[7])
        self._append(s_round, s_max, s_empty / self.n, np.zeros(len(s_round), bool))

    def close(self, c: Configuration) -> None:
        if self.rounds[-1][-1] != c.round:
            self._append([c.round], [int(c.loads.max())],
                         [np.count_nonzero(c.loads == 0) / c.n], [False])

    def fill(self, rec: RunRecord) -> None:
        rec.sample_round = np.concatenate(self.rounds)
        rec.sample_max = np.concatenate(self.maxes)
        rec.sample_empty = np.concatenate(self.empties)
        rec.sample_faulty = np.concatenate(self.faulty)
        rec.first_legit = self.first_legit
        rec.first_violation = self.first_violation
        rec.overall_max = self.overall
        rec.mean_empty_fraction = self.sum_empty / self.observed
        rec.moves_total = self.moves
        rec.balls_inserted = self.inserted


def default_stride(rounds: int) -> int:
    return 1 if rounds <= MAX_SAMPLES else math.ceil(rounds / MAX_SAMPLES)


def _drive(
    c0: Configuration,
    g: Graph,
    strategy: Strategy,
    rounds: int,
    streams: Streams,
    rule: LegitimacyRule | None = None,
    observers: Iterable[Observer] = (),
    stride: int | None = None,
    checkpoints: Iterable[int] = (),
    stop_on_cover: bool = False,
    shuffle_arrivals: bool = True,
    dominating: bool = False,
    process: str = "base",
    fault_rounds: Sequence[int] = (),
    on_fault: Callable[[Configuration], None] | None = None,
) -> RunRecord:
    if rounds < 0:
        raise ValueError(f"round budget must be non-negative, got {rounds}")
    rule = rule or LegitimacyRule()
    observers = list(observers)
    c = c0.copy()
    n, m = c.n, c.m
    threshold = rule.threshold(n, m)
    stride = stride or default_stride(rounds)
    start, end = c.round, c.round + rounds
    rec = RunRecord(process=process, n=n, m=m, threshold=threshold,
                    start_round=start, budget=rounds, stride=stride)
    eng = _Engine(c, g, strategy, streams, threshold, stride, shuffle_arrivals,
                  dominating, stop_on_cover)
    st = _Stats(n)
    st.snapshot(c, threshold)
    rec.start_legitimate = st.first_legit == start

    faults = sorted(t for t in set(fault_rounds) if start <= t < end)
    cps = {t for t in checkpoints if start <= t <= end}
    fault_set = set(faults)
    open_fault = None

    def close_fault(now: int, censored: bool) -> None:
        nonlocal open_fault
        if open_fault is not None:
            rec.recoveries.append(Duration(now - open_fault, censored))
            open_fault = None

    def at_round() -> None:
        nonlocal open_fault
        t = c.round
        if t in fault_set:
            close_fault(t, censored=True)
            on_fault(c)
            rec.fault_rounds.append(t)
            st.snapshot(c, threshold, faulty=True)
            if st.legit_mark == t:
                rec.recoveries.append(Duration(0))
            else:
                open_fault = t
        if t in cps and t not in rec.checkpoint_max:
            rec.checkpoint_max[t] = int(c.loads.max())
            if c.trace is not None:
                c.trace.checkpoints[t] = c.trace.progress.copy()

    for stop in sorted(fault_set | cps | {end}):
        at_round()
        while c.round < stop:
            before = c.round
            eng.advance(1 if observers else stop - c.round, st)
            if open_fault is not None and st.legit_mark is not None:
                close_fault(st.legit_mark, censored=False)
            if c.round == before:
                break
            if observers:
                moves = eng.last_moves()
                halt = False
                for obs in observers:
                    try:
                        halt = bool(obs(c, moves)) or halt
                    except Exception as exc:
                        raise SimulationError(c.round, f"observer failed: {exc!r}") from exc
                if halt:
                    break
        if c.round < stop:
            rec.stopped_early = True
            break
    if c.round == end:
        at_round()
    close_fault(c.round, censored=True)
    st.close(c)
    st.fill(rec)
    rec.rounds_run = c.round - start
    rec.final = c
    return rec


def step(
    c: Configuration,
    g: Graph,
    strategy: Strategy,
    streams: Streams,
    shuffle_arrivals: bool = True,
) -> tuple[Configuration, MoveRecord]:
    """One synchronous round on a copy of ``c``."""
    return _step(c, g, strategy, streams, shuffle_arrivals)


def _step(c, g, strategy, streams, shuffle_arrivals=True, dominating=False):
    new = c.copy()
    eng = _Engine(new, g, strategy, streams, threshold=np.iinfo(np.int64).max, stride=1,
                  shuffle_arrivals=shuffle_arrivals, dominating=dominating)
    eng.advance(1, _Stats(g.n))
    return new, eng.last_moves()


def run(
    c0: Configuration,
    g: Graph,
    strategy: Strategy,
    rounds: int,
    streams: Streams,
    rule: LegitimacyRule | None = None,
    observers: Iterable[Observer] = (),
    stride: int | None = None,
    checkpoints: Iterable[int] = (),
    stop_on_cover: bool = False,
    shuffle_arrivals: bool = True,
) -> RunRecord:
    """Apply ``rounds`` rounds to a copy of ``c0`` and collect metrics.

    Observers are called after every round with the configuration and that
    round's moves; returning True stops the run. Without observers the rounds
    run in compiled blocks, with identical results. ``stop_on_cover`` ends a
    traced run once every ball has visited every node. The final
    configuration is ``record.final``.
    """
    return _drive(c0, g, strategy, rounds, streams, rule=rule, observers=observers,
                  stride=stride, checkpoints=checkpoints, stop_on_cover=stop_on_cover,
                  shuffle_arrivals=shuffle_arrivals)
