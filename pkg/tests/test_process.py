import itertools

import numpy as np
import pytest
from scipy.stats import chisquare

from ssbins import (
    Configuration,
    LegitimacyRule,
    Placement,
    PlacementError,
    SimulationError,
    Strategy,
    derive_seed,
    init_config,
    make_complete,
    make_random_regular,
    make_ring,
    make_streams,
    max_load,
    run,
    step,
)
from ssbins.process import default_stride

STRATEGIES = list(Strategy)


def test_placements_k4():
    g = make_complete(4)
    assert init_config(g, 4, Placement.one_per_node()).loads.tolist() == [1, 1, 1, 1]
    assert init_config(g, 4, Placement.all_in_one(2)).loads.tolist() == [0, 0, 4, 0]
    assert init_config(g, 6, Placement.one_per_node()).loads.tolist() == [2, 2, 1, 1]


def test_custom_placement_checks_sum():
    g = make_complete(3)
    assert init_config(g, 3, Placement.custom([0, 1, 2])).loads.tolist() == [0, 1, 2]
    with pytest.raises(PlacementError):
        init_config(g, 4, Placement.custom([0, 1, 2]))
    with pytest.raises(PlacementError):
        init_config(g, 3, Placement.custom([3, 0]))


def test_uniform_placement_binomial_mean():
    g = make_complete(2)
    node0 = [
        init_config(g, 100, Placement.uniform_random(), r=make_streams(s).env).loads[0]
        for s in range(10_000)
    ]
    assert abs(np.mean(node0) - 50) < 1


def test_traced_ids_ascending_by_node():
    c = Configuration.from_loads([2, 0, 3], traced=True)
    assert c.queues() == [[0, 1], [], [2, 3, 4]]
    assert c.location.tolist() == [0, 0, 2, 2, 2]


def test_step_k2_balanced_is_absorbing(streams):
    g = make_complete(2)
    c = Configuration.from_loads([1, 1])
    for _ in range(5):
        c, moves = step(c, g, Strategy.FIFO, streams)
        assert c.loads.tolist() == [1, 1]
        assert moves.sources.tolist() == [0, 1]
        assert moves.destinations.tolist() == [1, 0]


def test_step_k2_traced_fifo(streams):
    g = make_complete(2)
    c = Configuration.from_queues([[0, 1], []])
    c2, moves = step(c, g, Strategy.FIFO, streams)
    assert c2.queues() == [[1], [0]]
    assert moves.balls.tolist() == [0]
    assert c.queues() == [[0, 1], []]  # input untouched
    assert c2.round == 1


def test_step_lifo_takes_newest(streams):
    c2, _ = step(Configuration.from_queues([[0, 1], []]), make_complete(2), Strategy.LIFO, streams)
    assert c2.queues() == [[0], [1]]


def test_arrivals_join_the_tail(streams):
    g = make_complete(2)
    c2, _ = step(Configuration.from_queues([[0], [1, 2]]), g, Strategy.FIFO, streams)
    assert c2.queues() == [[1], [2, 0]]


def test_k3_one_step_distribution():
    """Node 0 sends one ball to node 1 or 2, each with probability 1/2 (enumeration)."""
    g = make_complete(3)
    c = Configuration.from_loads([3, 0, 0])
    outcomes = []
    for seed in range(10_000):
        c2, _ = step(c, g, Strategy.FIFO, make_streams(seed))
        assert max_load(c2) == 2
        assert sorted(c2.loads.tolist()) == [0, 1, 2]
        outcomes.append(tuple(c2.loads.tolist()))
    at1 = outcomes.count((2, 1, 0))
    at2 = outcomes.count((2, 0, 1))
    assert at1 + at2 == 10_000
    assert abs(at1 / 10_000 - 0.5) < 0.02
    assert chisquare([at1, at2]).pvalue > 1e-3


def test_uniform_random_selection_is_uniform():
    g = make_complete(2)
    c = Configuration.from_queues([[0, 1, 2], []])
    picked = [
        step(c, g, Strategy.UNIFORM_RANDOM, make_streams(s))[1].balls[0] for s in range(3000)
    ]
    counts = np.bincount(picked, minlength=3)
    assert chisquare(counts).pvalue > 1e-3


def test_arrival_order_random_vs_source():
    # balls 0 and 1 both land on node 2 of K3 half the time; their order should vary
    g = make_complete(3)
    c = Configuration.from_queues([[0], [1], []])
    orders = set()
    for seed in range(400):
        c2, _ = step(c, g, Strategy.FIFO, make_streams(seed))
        if len(c2.queues()[2]) == 2:
            orders.add(tuple(c2.queues()[2]))
    assert orders == {(0, 1), (1, 0)}
    for seed in range(100):
        c2, _ = step(c, g, Strategy.FIFO, make_streams(seed), shuffle_arrivals=False)
        if len(c2.queues()[2]) == 2:
            assert c2.queues()[2] == [0, 1]


def test_run_zero_rounds(streams):
    g = make_complete(4)
    rec = run(Configuration.from_loads([1, 1, 1, 1]), g, "fifo", 0, streams)
    assert rec.sample_round.tolist() == [0]
    assert rec.rounds_run == 0


def test_run_k2_forced(streams):
    rec = run(Configuration.from_loads([2, 0]), make_complete(2), "fifo", 1, streams)
    assert rec.final.loads.tolist() == [1, 1]


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_conservation_and_one_out_rule(strategy):
    g = make_complete(8)
    c0 = init_config(g, 8, Placement.one_per_node(), traced=True)
    prev = {"loads": c0.loads.copy()}

    def check(c, moves):
        assert c.loads.sum() == 8
        assert sorted(b for q in c.queues() for b in q) == list(range(8))
        assert moves.sources.tolist() == np.flatnonzero(prev["loads"] > 0).tolist()
        prev["loads"] = c.loads.copy()

    rec = run(c0, g, strategy, 1000, make_streams(3), observers=[check])
    assert rec.rounds_run == 1000


@pytest.mark.parametrize("n", [4, 16, 64])
@pytest.mark.parametrize("strategy", STRATEGIES)
def test_mode_equivalence(n, strategy):
    g = make_complete(n)
    seed = derive_seed(0, "equiv", n, strategy.value)
    trajectories = []
    for traced in (False, True):
        c0 = init_config(g, n, Placement.uniform_random(), traced=traced, r=make_streams(seed).env)
        seen = []
        run(c0, g, strategy, 1000, make_streams(seed), observers=[lambda c, _: seen.append(c.loads.copy())])
        trajectories.append(np.array(seen))
    assert trajectories[0].shape == (1000, n)
    assert np.array_equal(trajectories[0], trajectories[1])


def test_mode_equivalence_on_ring_and_regular():
    for g in (make_ring(16), make_random_regular(16, 3, seed=2)):
        a = run(Configuration.from_loads([16] + [0] * 15), g, "random", 1000, make_streams(1), stride=1)
        b = run(Configuration.from_loads([16] + [0] * 15, traced=True), g, "random", 1000,
                make_streams(1), stride=1)
        assert np.array_equal(a.sample_max, b.sample_max)
        assert np.array_equal(a.final.loads, b.final.loads)


def test_fast_path_matches_observer_path():
    g = make_complete(32)
    c0 = init_config(g, 32, Placement.all_in_one(0), traced=True)
    fast = run(c0, g, "fifo", 500, make_streams(9), stride=1)
    slow = run(c0, g, "fifo", 500, make_streams(9), stride=1, observers=[lambda c, m: None])
    assert fast.to_jsonl() == slow.to_jsonl()
    assert np.array_equal(fast.trace.progress, slow.trace.progress)
    assert np.array_equal(fast.trace.visited, slow.trace.visited)


def test_determinism_bytes():
    g = make_ring(20)
    c0 = init_config(g, 40, Placement.all_in_one(3), traced=True)
    a = run(c0, g, "random", 3000, make_streams(5))
    b = run(c0, g, "random", 3000, make_streams(5))
    assert a.to_jsonl() == b.to_jsonl()
    assert a.to_csv() == b.to_csv()


def test_observer_failure_reports_round(streams):
    def boom(c, moves):
        if c.round == 7:
            raise RuntimeError("nope")

    with pytest.raises(SimulationError, match="round 7") as info:
        run(Configuration.from_loads([1, 1, 1]), make_complete(3), "fifo", 20, streams,
            observers=[boom])
    assert info.value.round == 7


def test_observer_can_stop(streams):
    rec = run(Configuration.from_loads([1, 1, 1]), make_complete(3), "fifo", 100, streams,
              observers=[lambda c, m: c.round >= 5])
    assert rec.rounds_run == 5 and rec.stopped_early
    assert rec.sample_round[-1] == 5


def test_trace_invariants():
    g = make_complete(12)
    c0 = init_config(g, 12, Placement.one_per_node(), traced=True)

    def check(c, moves):
        tr = c.trace
        assert (tr.progress <= c.round).all()
        assert (tr.visited_count <= g.n).all()
        assert ((tr.cover_round >= 0) == (tr.visited_count == g.n)).all()
        for b in range(0, 12, 5):
            assert len(tr.visited_nodes(b)) == tr.visited_count[b]
            assert c.location[b] in tr.visited_nodes(b)

    run(c0, g, "fifo", 400, make_streams(2), observers=[check])


def test_stop_on_cover(streams):
    g = make_complete(6)
    rec = run(init_config(g, 6, Placement.one_per_node(), traced=True), g, "fifo", 10_000,
              streams, stop_on_cover=True)
    assert rec.stopped_early
    assert rec.rounds_run == rec.trace.cover_round.max()


def test_sampling_stride():
    assert default_stride(10_000) == 1
    assert default_stride(20_000) == 2
    assert default_stride(10**6) == 100
    g = make_complete(4)
    rec = run(Configuration.from_loads([1, 1, 1, 1]), g, "fifo", 25, make_streams(0), stride=10)
    assert rec.sample_round.tolist() == [0, 10, 20, 25]


def test_dominating_needs_anonymous(streams):
    from ssbins.baselines import dominating_step

    with pytest.raises(ValueError):
        dominating_step(Configuration.from_loads([1, 0], traced=True), make_complete(2), "fifo", streams)


def test_mismatched_graph_rejected(streams):
    with pytest.raises(ValueError):
        run(Configuration.from_loads([1, 1]), make_complete(3), "fifo", 1, streams)


def test_legitimacy_streamed_every_round():
    # with stride 10 the sampled rounds miss the violation, the streamed summary must not
    g = make_complete(16)
    rule = LegitimacyRule(alpha=0.75)  # threshold 3
    for seed in itertools.count():
        rec = run(Configuration.from_loads([1] * 16), g, "fifo", 200, make_streams(seed),
                  rule=rule, stride=1)
        if rec.first_violation is not None and rec.first_violation % 10:
            break
    coarse = run(Configuration.from_loads([1] * 16), g, "fifo", 200, make_streams(seed),
                 rule=rule, stride=10)
    assert coarse.first_violation == rec.first_violation
