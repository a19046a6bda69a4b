"""Declarative sweeps over (n, m) cells with seeded repetitions.

Config files hold one ``[experiment-id]`` section per experiment with
``key = value`` lines; ``#`` starts a comment. Every repetition gets its own
seed from :func:`ssbins.streams.derive_seed` over
``(master seed, experiment id, n, m, repetition)``, so results do not depend on
worker count or completion order.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.stats import binomtest

from ssbins.adversary import FaultPolicy, FaultSchedule, faulty_run
from ssbins.baselines import dominating_run, memoryless_run, single_ball_cover_time
from ssbins.graph import Graph, load_edge_list, make_complete, make_random_regular, make_ring
from ssbins.metrics import (
    Duration,
    LegitimacyRule,
    RuleForm,
    RunRecord,
    convergence_time,
    parallel_cover_time,
    progress,
    stability_horizon,
)
from ssbins.process import Placement, Strategy, init_config, run
from ssbins.streams import derive_seed, make_streams

PROCESSES = ("base", "dominating", "memoryless", "single_ball")

RESULT_COLUMNS = [
    "experiment_id",
    "process",
    "seed",
    "n",
    "m",
    "topology",
    "strategy",
    "alpha",
    "convergence_time",
    "convergence_censored",
    "stability_horizon",
    "stability_censored",
    "parallel_cover_time",
    "cover_censored",
    "min_progress",
    "max_load_overall",
    "mean_empty_fraction",
]


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line
        self.key = None


def _no(message: str):
    raise ValueError(message)


# -- expressions ---------------------------------------------------------------

_BUDGET = re.compile(
    r"^\s*(?:(?P<c>\d+(?:\.\d+)?)\s*\*?\s*)?"
    r"(?P<var>n(?:\s*(?:\^|\*\*)\s*2|\s*\*?\s*log2\s*\(?\s*n\s*\)?)?)?\s*$"
)


def eval_budget(expr: str | int, n: int) -> int:
    """Evaluate ``c``, ``c*n``, ``c*n*log2(n)`` or ``c*n^2`` (``c`` optional) at ``n``.

    Forms like ``16n``, ``n^2``, ``2 n log2 n`` are accepted. Non-integral
    results round up.
    """
    if isinstance(expr, int):
        value = expr
    else:
        mt = _BUDGET.match(expr)
        if not mt or (mt["c"] is None and mt["var"] is None):
            raise ConfigError(f"bad round expression {expr!r}")
        c = float(mt["c"]) if mt["c"] is not None else 1.0
        var = re.sub(r"\s+", "", mt["var"] or "")
        if not var:
            value = c
        elif var == "n":
            value = c * n
        elif "log2" in var:
            value = c * n * math.log2(n)
        else:
            value = c * n * n
        value = math.ceil(round(value, 9))
    if value < 0:
        raise ConfigError(f"round expression {expr!r} is negative at n={n}")
    return int(value)


def eval_m(rule: str, n: int) -> list[int]:
    rule = rule.strip()
    if rule == "equal_n":
        return [n]
    if rule == "n_log_n":
        return [n * math.ceil(math.log2(n))]
    try:
        values = [eval_budget(x.strip(), n) for x in rule.split(",")]
    except ConfigError:
        raise ConfigError(f"bad ball-count rule {rule!r}") from None
    if any(v < 1 for v in values):
        raise ConfigError(f"ball counts must be positive, got {rule!r}")
    return values


def check_topology(text: str) -> None:
    """Syntax check only; building the graph happens per cell."""
    kind, _, arg = text.partition(":")
    if kind in ("complete", "ring") and not arg:
        return
    if kind == "regular" and arg.isdigit():
        return
    if kind == "file" and arg:
        return
    raise ConfigError(f"bad topology {text!r}; expected complete, ring, regular:D or file:PATH")


def parse_topology(text: str, n: int, seed: int) -> Graph:
    check_topology(text)
    kind, _, arg = text.partition(":")
    if kind == "complete":
        return make_complete(n)
    if kind == "ring":
        return make_ring(n)
    if kind == "regular":
        return make_random_regular(n, int(arg), seed)
    if kind == "file":
        return load_edge_list(arg, n=n)
    raise ConfigError(f"unknown topology {text!r}")


def parse_placement(text: str) -> Placement:
    kind, _, arg = text.partition(":")
    if kind == "spread":
        return Placement.one_per_node()
    if kind == "point":
        return Placement.all_in_one(int(arg or 0))
    if kind == "random":
        return Placement.uniform_random()
    if kind == "file":
        return Placement.custom([int(x) for x in Path(arg).read_text().split()])
    raise ConfigError(f"unknown placement {text!r}")


def parse_faults(text: str, n: int) -> FaultSchedule:
    """``TRIGGER:ARG:POLICY[:POLICY_ARG]``, e.g. ``periodic:8n:all_in_one:0``,
    ``bernoulli:0.001:reshuffle`` or ``at:10 20 30:custom:4 0 0 0``."""
    parts = text.split(":")
    if len(parts) < 3:
        raise ConfigError(f"bad fault spec {text!r}")
    trigger, arg, policy_kind, *rest = parts
    policy_arg = rest[0] if rest else ""
    if policy_kind == "all_in_one":
        policy = FaultPolicy.all_in_one(int(policy_arg or 0))
    elif policy_kind == "reshuffle":
        policy = FaultPolicy.uniform_reshuffle()
    elif policy_kind == "custom":
        policy = FaultPolicy.custom([int(x) for x in policy_arg.replace(",", " ").split()])
    else:
        raise ConfigError(f"unknown fault policy {policy_kind!r}")
    if trigger == "periodic":
        return FaultSchedule.periodic(eval_budget(arg, n), policy)
    if trigger == "bernoulli":
        return FaultSchedule.bernoulli(float(arg), policy)
    if trigger == "at":
        return FaultSchedule.at_rounds([int(x) for x in arg.replace(",", " ").split()], policy)
    raise ConfigError(f"unknown fault trigger {trigger!r}")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# -- specs ---------------------------------------------------------------------


@dataclass
class ExperimentSpec:
    id: str
    n: list[int]
    topology: str = "complete"
    m: str = "equal_n"
    process: str = "base"
    strategy: str = "fifo"
    placement: str = "spread"
    rule: str = "balanced"
    alpha: float = 4.0
    rounds: str = "16n"
    repetitions: int = 1
    seed: int = 0
    faults: str | None = None
    trace: bool = False
    stop_on_cover: bool = False
    arrival: str = "random"
    stride: int | None = None
    checkpoints: list[str] = field(default_factory=list)
    progress_constant: float = 8.0
    recovery_window: str = "8n"
    seed_key: str | None = None
    description: str = ""

    def __post_init__(self):
        checks = [
            ("repetitions", lambda: self.repetitions >= 1 or _no("must be >= 1")),
            ("n", lambda: (self.n and all(n >= 1 for n in self.n)) or _no("need positive node counts")),
            ("topology", lambda: check_topology(self.topology)),
            ("process", lambda: self.process in PROCESSES or _no(f"unknown process {self.process!r}")),
            ("arrival", lambda: self.arrival in ("random", "source") or _no("must be random or source")),
            ("strategy", lambda: Strategy(self.strategy)),
            ("placement", lambda: self.placement.startswith("file:") or parse_placement(self.placement)),
            ("rule", lambda: RuleForm(self.rule)),
            ("alpha", self.legitimacy),
            ("rounds", lambda: [eval_budget(self.rounds, n) for n in self.n]),
            ("m", lambda: [eval_m(self.m, n) for n in self.n]),
            ("faults", lambda: self.faults is None or [parse_faults(self.faults, n) for n in self.n]),
            ("checkpoints", lambda: [eval_budget(cp, n) for cp in self.checkpoints for n in self.n]),
            ("recovery_window", lambda: [eval_budget(self.recovery_window, n) for n in self.n]),
        ]
        for key, check in checks:
            try:
                check()
            except ValueError as exc:
                err = ConfigError(f"experiment {self.id!r}, {key}: {exc}")
                err.key = key
                raise err from None

    def legitimacy(self) -> LegitimacyRule:
        return LegitimacyRule(alpha=self.alpha, form=self.rule)

    def cells(self) -> list[tuple[int, int]]:
        return [(n, m) for n in self.n for m in eval_m(self.m, n)]


_INT_KEYS = {"repetitions", "seed", "stride"}
_FLOAT_KEYS = {"alpha", "progress_constant"}
_BOOL_KEYS = {"trace", "stop_on_cover"}


def spec_from_dict(ident: str, values: dict[str, str], lines: dict[str, int] | None = None) -> ExperimentSpec:
    lines = lines or {}
    kwargs: dict[str, Any] = {"id": ident}
    known = set(ExperimentSpec.__dataclass_fields__) - {"id"}
    for key, raw in values.items():
        line = lines.get(key)
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", line)
        try:
            if key == "n":
                kwargs[key] = [int(x) for x in raw.replace(",", " ").split()]
            elif key == "checkpoints":
                kwargs[key] = [x.strip() for x in raw.split(",") if x.strip()]
            elif key in _INT_KEYS:
                kwargs[key] = int(raw)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(raw)
            elif key in _BOOL_KEYS:
                kwargs[key] = _bool(raw)
            else:
                kwargs[key] = raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", line) from None
    if "n" not in kwargs:
        raise ConfigError(f"experiment {ident!r} has no 'n'", lines.get("__section__"))
    try:
        return ExperimentSpec(**kwargs)
    except ConfigError as exc:
        line = lines.get(exc.key, lines.get("__section__"))
        raise ConfigError(str(exc), line) from None


def parse_config(text: str) -> list[ExperimentSpec]:
    sections: list[tuple[str, dict[str, str], dict[str, int]]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            ident = line[1:-1].strip()
            if any(ident == s[0] for s in sections):
                raise ConfigError(f"duplicate experiment {ident!r}", lineno)
            sections.append((ident, {}, {"__section__": lineno}))
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if not sections:
            raise ConfigError("setting outside any [experiment] section", lineno)
        key = key.strip()
        _, values, lines = sections[-1]
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        values[key] = value.strip()
        lines[key] = lineno
    if not sections:
        raise ConfigError("no experiments defined")
    return [spec_from_dict(ident, values, lines) for ident, values, lines in sections]


def load_config(path: str | Path) -> list[ExperimentSpec]:
    return parse_config(Path(path).read_text())


# -- statistics ----------------------------------------------------------------


def estimate_whp(successes: int, trials: int) -> tuple[float, float, float]:
    """Success fraction with its 95% Wilson score interval."""
    if trials < 1 or not 0 <= successes <= trials:
        raise ValueError(f"need 0 <= successes <= trials and trials >= 1, got {successes}/{trials}")
    ci = binomtest(successes, trials).proportion_ci(confidence_level=0.95, method="wilson")
    frac = successes / trials
    return frac, min(float(ci.low), frac), max(float(ci.high), frac)


def scaling_fit(points) -> tuple[float, float, float]:
    """Least-squares line through (log n, log value).

    Returns (exponent, intercept, max relative residual), natural logs.
    """
    pts = [(float(n), float(v)) for n, v in points]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 points, got {len(pts)}")
    if any(n <= 0 or v <= 0 for n, v in pts):
        raise ValueError("scaling fit needs positive n and values")
    x = np.log([n for n, _ in pts])
    y = np.log([v for _, v in pts])
    slope, intercept = np.polyfit(x, y, 1)
    fitted = np.exp(intercept + slope * x)
    resid = float(np.max(np.abs(np.exp(y) / fitted - 1.0)))
    return float(slope), float(intercept), resid


def censored_median(durations: list[Duration]) -> Duration | None:
    """Median with censored values ranked above everything observed.

    Censored when the middle of the ranking falls among censored values.
    """
    if not durations:
        return None
    ranked = sorted(durations, key=lambda d: (d.censored, d.rounds))
    k = len(ranked)
    mid = [ranked[(k - 1) // 2], ranked[k // 2]]
    if any(d.censored for d in mid):
        return Duration(max(d.rounds for d in ranked if d.censored), censored=True)
    return Duration(int(np.ceil((mid[0].rounds + mid[1].rounds) / 2)))


# -- runs ----------------------------------------------------------------------


@dataclass
class RunSummary:
    experiment_id: str
    process: str
    seed: int
    n: int
    m: int
    topology: str
    strategy: str
    alpha: float
    repetition: int
    convergence: Duration | None = None
    stability: Duration | None = None
    cover: Duration | None = None
    min_progress: int | None = None
    max_load_overall: int | None = None
    mean_empty_fraction: float | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    def row(self) -> dict[str, Any]:
        def dur(d):
            return ("", "") if d is None else (d.rounds, int(d.censored))

        conv, conv_c = dur(self.convergence)
        stab, stab_c = dur(self.stability)
        cov, cov_c = dur(self.cover)
        return {
            "experiment_id": self.experiment_id,
            "process": self.process,
            "seed": self.seed,
            "n": self.n,
            "m": self.m,
            "topology": self.topology,
            "strategy": self.strategy,
            "alpha": self.alpha,
            "convergence_time": conv,
            "convergence_censored": conv_c,
            "stability_horizon": stab,
            "stability_censored": stab_c,
            "parallel_cover_time": cov,
            "cover_censored": cov_c,
            "min_progress": "" if self.min_progress is None else self.min_progress,
            "max_load_overall": "" if self.max_load_overall is None else self.max_load_overall,
            "mean_empty_fraction": (
                "" if self.mean_empty_fraction is None else repr(round(self.mean_empty_fraction, 12))
            ),
        }


def _empty_quantiles(rec: RunRecord) -> dict[str, float] | None:
    if rec.first_legit is None:
        return None
    tail = rec.sample_empty[rec.sample_round >= rec.first_legit]
    if not len(tail):
        return None
    qs = np.quantile(tail, [0.05, 0.25, 0.5, 0.75, 0.95])
    return {f"q{int(p * 100):02d}": float(v) for p, v in zip([0.05, 0.25, 0.5, 0.75, 0.95], qs)}


def run_seed(spec: ExperimentSpec, n: int, m: int, rep: int) -> int:
    """Experiments sharing a ``seed_key`` get paired seeds."""
    return derive_seed(spec.seed, spec.seed_key or spec.id, n, m, rep)


def run_single(spec: ExperimentSpec, n: int, m: int, rep: int, seed: int | None = None,
               graph: Graph | None = None) -> tuple[RunSummary, RunRecord | None]:
    """One repetition of one cell; ``seed`` overrides the derived seed."""
    if seed is None:
        seed = run_seed(spec, n, m, rep)
    rule = spec.legitimacy()
    budget = eval_budget(spec.rounds, n)
    if graph is None:
        graph = parse_topology(spec.topology, n,
                               derive_seed(spec.seed, spec.seed_key or spec.id, "graph", n))
    streams = make_streams(seed)
    summary = RunSummary(
        experiment_id=spec.id,
        process=spec.process,
        seed=seed,
        n=n,
        m=m,
        topology=graph.label,
        strategy=spec.strategy,
        alpha=spec.alpha,
        repetition=rep,
    )
    if spec.process == "single_ball":
        start = int(streams.env.integers(n, 1)[0])
        summary.cover = Duration(single_ball_cover_time(graph, start, streams.dest))
        return summary, None
    if spec.process == "memoryless":
        rec = memoryless_run(m, n, budget, streams.dest, rule=rule, stride=spec.stride)
    else:
        c0 = init_config(graph, m, parse_placement(spec.placement),
                         traced=spec.trace, r=streams.env)
        checkpoints = [eval_budget(cp, n) for cp in spec.checkpoints]
        if spec.process == "dominating":
            rec = dominating_run(c0, graph, budget, streams, rule=rule,
                                 checkpoints=checkpoints, stride=spec.stride)
        elif spec.faults:
            rec = faulty_run(c0, graph, spec.strategy, budget, parse_faults(spec.faults, n),
                             streams, rule=rule, stride=spec.stride, checkpoints=checkpoints,
                             stop_on_cover=spec.stop_on_cover,
                             shuffle_arrivals=spec.arrival == "random")
        else:
            rec = run(c0, graph, spec.strategy, budget, streams, rule=rule,
                      stride=spec.stride, checkpoints=checkpoints,
                      stop_on_cover=spec.stop_on_cover,
                      shuffle_arrivals=spec.arrival == "random")
    rec.seed = seed
    summary.convergence = convergence_time(rec)
    if rec.start_legitimate:
        summary.stability = stability_horizon(rec)
    summary.max_load_overall = rec.overall_max
    summary.mean_empty_fraction = rec.mean_empty_fraction
    if rec.trace is not None:
        summary.cover = parallel_cover_time(rec)
        summary.min_progress = int(progress(rec, rec.start_round, rec.end_round).min())
        floor = rec.rounds_run / (spec.progress_constant * math.log2(n))
        summary.extras["progress_ok"] = summary.min_progress >= floor
    if rec.checkpoint_max:
        summary.extras["checkpoint_max"] = {str(k): v for k, v in sorted(rec.checkpoint_max.items())}
    if rec.fault_rounds:
        window = eval_budget(spec.recovery_window, n)
        summary.extras["faults"] = len(rec.fault_rounds)
        summary.extras["worst_recovery"] = max(d.rounds for d in rec.recoveries)
        summary.extras["recovered_all"] = all(
            not d.censored and d.rounds <= window for d in rec.recoveries
        )
    quantiles = _empty_quantiles(rec)
    if quantiles:
        summary.extras["empty_after_convergence"] = quantiles
    return summary, rec


def _run_task(args) -> RunSummary:
    spec, n, m, rep = args
    return run_single(spec, n, m, rep)[0]


# -- sweeps --------------------------------------------------------------------


def _fraction(flags: list[bool]) -> dict[str, float] | None:
    if not flags:
        return None
    frac, lo, hi = estimate_whp(sum(flags), len(flags))
    return {"fraction": frac, "lower": lo, "upper": hi, "runs": len(flags)}


def _median_dict(durations: list[Duration | None]) -> dict[str, Any] | None:
    med = censored_median([d for d in durations if d is not None])
    return None if med is None else {"rounds": med.rounds, "censored": med.censored}


@dataclass
class Cell:
    n: int
    m: int
    runs: list[RunSummary]

    def aggregate(self) -> dict[str, Any]:
        runs = self.runs
        out: dict[str, Any] = {"n": self.n, "m": self.m, "runs": len(runs)}
        conv = [r.convergence for r in runs if r.convergence is not None]
        if conv:
            out["converged"] = _fraction([not d.censored for d in conv])
            out["median_convergence"] = _median_dict(conv)
        stab = [r.stability for r in runs if r.stability is not None]
        if stab:
            out["stable"] = _fraction([d.censored for d in stab])
            out["median_stability"] = _median_dict(stab)
        cov = [r.cover for r in runs if r.cover is not None]
        if cov:
            out["covered"] = _fraction([not d.censored for d in cov])
            out["median_cover"] = _median_dict(cov)
        loads = [r.max_load_overall for r in runs if r.max_load_overall is not None]
        if loads:
            out["median_max_load"] = float(np.median(loads))
        empties = [r.mean_empty_fraction for r in runs if r.mean_empty_fraction is not None]
        if empties:
            out["median_mean_empty_fraction"] = float(np.median(empties))
        prog = [r.extras["progress_ok"] for r in runs if "progress_ok" in r.extras]
        if prog:
            out["progress_ok"] = _fraction(prog)
        rec_ok = [r.extras["recovered_all"] for r in runs if "recovered_all" in r.extras]
        if rec_ok:
            out["recovered_all"] = _fraction(rec_ok)
        cps = [r.extras["checkpoint_max"] for r in runs if "checkpoint_max" in r.extras]
        if cps:
            out["median_checkpoint_max"] = {
                t: float(np.median([cp[t] for cp in cps])) for t in cps[0]
            }
        quant = [r.extras["empty_after_convergence"] for r in runs
                 if "empty_after_convergence" in r.extras]
        if quant:
            out["empty_after_convergence"] = {
                q: float(np.median([x[q] for x in quant])) for q in quant[0]
            }
            out["empty_stays_above_0.05"] = all(x["q05"] > 0.05 for x in quant)
        return out


@dataclass
class SweepResult:
    spec: ExperimentSpec
    cells: list[Cell]

    @property
    def summaries(self) -> list[RunSummary]:
        return [r for c in self.cells for r in c.runs]

    def fits(self) -> dict[str, Any]:
        out = {}
        for key in ("median_convergence", "median_cover"):
            pts = []
            for cell in self.cells:
                med = cell.aggregate().get(key)
                if med and not med["censored"] and med["rounds"] > 0:
                    pts.append((cell.n, med["rounds"]))
            if len({n for n, _ in pts}) >= 3 and len(pts) == len(self.cells):
                slope, intercept, resid = scaling_fit(pts)
                out[key] = {"exponent": slope, "intercept": intercept, "max_residual": resid}
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "experiment": asdict(self.spec),
            "cells": [c.aggregate() for c in self.cells],
            "fits": self.fits(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self, header: bool = True) -> str:
        return summaries_csv(self.summaries, header=header)


def summaries_csv(summaries: list[RunSummary], header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    if header:
        writer.writeheader()
    writer.writerows(r.row() for r in summaries)
    return buf.getvalue()


def default_workers() -> int:
    return int(os.environ.get("SSBINS_WORKERS", "1"))


def run_experiment(spec: ExperimentSpec, workers: int | None = None) -> SweepResult:
    """All repetitions of every cell, merged by (cell, repetition)."""
    workers = workers or default_workers()
    tasks = [(spec, n, m, rep) for n, m in spec.cells() for rep in range(spec.repetitions)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    return assemble(spec, results)


def assemble(spec: ExperimentSpec, results: list[RunSummary]) -> SweepResult:
    """Group summaries into cells; input order does not matter."""
    order = {cell: i for i, cell in enumerate(spec.cells())}
    ranked = sorted(results, key=lambda r: (order[(r.n, r.m)], r.repetition))
    cells = []
    for n, m in spec.cells():
        runs = [r for r in ranked if (r.n, r.m) == (n, m)]
        if len(runs) != spec.repetitions:
            raise RuntimeError(f"cell n={n}, m={m} has {len(runs)} runs, expected {spec.repetitions}")
        cells.append(Cell(n, m, runs))
    return SweepResult(spec, cells)
