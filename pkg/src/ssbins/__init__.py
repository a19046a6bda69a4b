"""Repeated balls-into-bins simulation with probabilistic self-stabilization metrics."""

from ssbins.graph import (
    Graph,
    GenerationError,
    TopologyError,
    load_edge_list,
    make_complete,
    make_random_regular,
    make_ring,
    sample_neighbor,
)
from ssbins.streams import RandomStream, Streams, derive_seed, make_streams
from ssbins.process import (
    BallTrace,
    Configuration,
    MoveRecord,
    Placement,
    PlacementError,
    SimulationError,
    Strategy,
    init_config,
    run,
    step,
)
from ssbins.metrics import (
    Duration,
    LegitimacyRule,
    RunRecord,
    TracingRequired,
    convergence_time,
    empty_fraction,
    is_legitimate,
    max_load,
    parallel_cover_time,
    progress,
    stability_horizon,
)

__version__ = "0.1.0"

__all__ = [
    "BallTrace",
    "Configuration",
    "Duration",
    "GenerationError",
    "Graph",
    "LegitimacyRule",
    "MoveRecord",
    "Placement",
    "PlacementError",
    "RandomStream",
    "RunRecord",
    "SimulationError",
    "Strategy",
    "Streams",
    "TopologyError",
    "TracingRequired",
    "convergence_time",
    "derive_seed",
    "empty_fraction",
    "init_config",
    "is_legitimate",
    "load_edge_list",
    "make_complete",
    "make_random_regular",
    "make_ring",
    "make_streams",
    "max_load",
    "parallel_cover_time",
    "progress",
    "run",
    "sample_neighbor",
    "stability_horizon",
    "step",
]
