"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from collections import defaultdict
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from ssbins import __version__
from ssbins.adversary import FaultSpecError
from ssbins.experiments import (
    RESULT_COLUMNS,
    ConfigError,
    ExperimentSpec,
    SweepResult,
    censored_median,
    default_workers,
    estimate_whp,
    eval_m,
    parse_config,
    run_experiment,
    run_single,
    scaling_fit,
    summaries_csv,
)
from ssbins.graph import TopologyError
from ssbins.metrics import Duration, RuleError
from ssbins.process import PlacementError, SimulationError

USAGE_ERRORS = (ConfigError, TopologyError, PlacementError, FaultSpecError, RuleError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _provenance(command: str, config) -> None:
    print(f"# ssbins {__version__} {command} " + json.dumps(config, sort_keys=True))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _check_header(path: Path) -> None:
    with open(path) as fh:
        header = next(csv.reader(fh), [])
    if header != RESULT_COLUMNS:
        raise ConfigError(f"{path} has a different column layout; refusing to append")


def _append_results(path: Path, result: SweepResult) -> None:
    """Append rows, writing the header only for a new file; refuse a foreign schema."""
    if path.exists() and path.stat().st_size:
        _check_header(path)
        with open(path, "a") as fh:
            fh.write(result.to_csv(header=False))
    else:
        _write(path, result.to_csv())


def _done_ids(path: Path) -> set[str]:
    if not path.exists() or not path.stat().st_size:
        return set()
    _check_header(path)
    with open(path) as fh:
        return {row["experiment_id"] for row in csv.DictReader(fh)}


def _spec_from_flags(args, ident: str, process: str = "base") -> ExperimentSpec:
    return ExperimentSpec(
        id=ident,
        n=[args.n],
        topology=args.topology,
        m=str(args.m),
        process=process,
        strategy=getattr(args, "strategy", "fifo"),
        placement=getattr(args, "placement", "spread"),
        rule=getattr(args, "rule", "balanced"),
        alpha=getattr(args, "alpha", 4.0),
        rounds=args.rounds,
        seed=args.seed,
        faults=getattr(args, "faults", None),
        trace=getattr(args, "trace", False),
        stop_on_cover=getattr(args, "stop_on_cover", False),
        arrival=getattr(args, "arrival", "random"),
        stride=getattr(args, "stride", None),
        checkpoints=list(getattr(args, "checkpoints", None) or []),
    )


def _single(args, ident: str, process: str) -> int:
    spec = _spec_from_flags(args, ident, process)
    (m,) = eval_m(spec.m, args.n)[:1]
    _provenance(ident, asdict(spec))
    summary, rec = run_single(spec, args.n, m, 0, seed=args.seed)
    out = Path(args.out)
    if rec is not None:
        rec.echo = asdict(spec)
        _write(out / "record.jsonl", rec.to_jsonl())
        _write(out / "record.csv", rec.to_csv())
    _write(out / "summary.csv", summaries_csv([summary]))
    row = summary.row()
    print(", ".join(f"{k}={row[k]}" for k in
                    ("convergence_time", "stability_horizon", "parallel_cover_time",
                     "max_load_overall")))
    return 0


def cmd_simulate(args) -> int:
    return _single(args, "simulate", "base")


def cmd_baseline(args) -> int:
    return _single(args, f"baseline-{args.kind}", args.kind)


def cmd_cover(args) -> int:
    spec = ExperimentSpec(
        id="cover",
        n=[args.n],
        topology=args.topology,
        m=str(args.m),
        strategy=args.strategy,
        placement=args.placement,
        rounds=args.rounds,
        repetitions=args.runs,
        seed=args.seed,
        trace=True,
        stop_on_cover=True,
    )
    _provenance("cover", asdict(spec))
    result = run_experiment(spec, workers=args.workers)
    out = Path(args.out)
    _write(out / "results.csv", result.to_csv())
    _write(out / "cover.json", result.to_json())
    for cell in result.cells:
        agg = cell.aggregate()
        med = agg["median_cover"]
        cov = agg["covered"]
        tag = " (censored)" if med["censored"] else ""
        print(f"n={cell.n} m={cell.m} runs={agg['runs']} median cover={med['rounds']}{tag} "
              f"covered={cov['fraction']:.3f} [{cov['lower']:.3f}, {cov['upper']:.3f}]")
    return 0


def _sweep_specs(specs: list[ExperimentSpec], workers: int, out: Path, command: str) -> int:
    results_path = out / "results.csv"
    done = _done_ids(results_path)
    for spec in specs:
        _provenance(command, asdict(spec))
        if spec.id in done:
            print(f"{spec.id}: already in {results_path}, skipped")
            continue
        result = run_experiment(spec, workers=workers)
        _append_results(results_path, result)
        _write(out / f"{spec.id}.json", result.to_json())
        print(f"{spec.id}: {len(result.summaries)} runs")
    return 0


def cmd_sweep(args) -> int:
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {args.config}: {exc.strerror}") from None
    specs = parse_config(text)
    return _sweep_specs(specs, args.workers, Path(args.out), "sweep")


def preset_names() -> list[str]:
    files = resources.files("ssbins") / "presets"
    return sorted(p.name[:-4] for p in files.iterdir() if p.name.endswith(".ini"))


def preset_text(name: str) -> str:
    if name not in preset_names():
        raise ConfigError(f"unknown preset {name!r}; try 'presets list'")
    return (resources.files("ssbins") / "presets" / f"{name}.ini").read_text()


def cmd_presets(args) -> int:
    if args.action == "list":
        for name in preset_names():
            first = preset_text(name).splitlines()[0].lstrip("# ").strip()
            print(f"{name:20s} {first}")
        return 0
    if not args.name:
        raise UsageError(f"presets {args.action} needs a preset name")
    text = preset_text(args.name)
    if args.action == "show":
        sys.stdout.write(text)
        return 0
    return _sweep_specs(parse_config(text), args.workers, Path(args.out), f"preset {args.name}")


def _dur(row, value_key, flag_key) -> Duration | None:
    if row[value_key] == "":
        return None
    return Duration(int(row[value_key]), row[flag_key] == "1")


def cmd_report(args) -> int:
    path = Path(args.results)
    try:
        with open(path) as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != RESULT_COLUMNS:
                raise ConfigError(f"{path}: column layout does not match the results schema")
            rows = list(reader)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        print("no runs")
        return 0
    groups: dict[str, dict[tuple[int, int], list[dict]]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        groups[row["experiment_id"]][(int(row["n"]), int(row["m"]))].append(row)
    for exp, cells in groups.items():
        print(f"== {exp}")
        conv_points = []
        for (n, m), cell in sorted(cells.items()):
            print(f"  n={n} m={m} runs={len(cell)} process={cell[0]['process']}")
            for label, key, flag, success_if_censored in (
                ("converged", "convergence_time", "convergence_censored", False),
                ("stable", "stability_horizon", "stability_censored", True),
                ("covered", "parallel_cover_time", "cover_censored", False),
            ):
                durs = [d for d in (_dur(r, key, flag) for r in cell) if d is not None]
                if not durs:
                    continue
                hits = sum(d.censored == success_if_censored for d in durs)
                frac, lo, hi = estimate_whp(hits, len(durs))
                med = censored_median(durs)
                tag = "+ (censored)" if med.censored else ""
                print(f"    {label:9s} {frac:.3f} [{lo:.3f}, {hi:.3f}]  median {key} {med.rounds}{tag}")
                if key == "convergence_time" and not med.censored and med.rounds > 0:
                    conv_points.append((n, med.rounds))
            loads = [int(r["max_load_overall"]) for r in cell if r["max_load_overall"] != ""]
            if loads:
                print(f"    median max load {float(np.median(loads)):g}")
        if len({n for n, _ in conv_points}) >= 3:
            slope, _, resid = scaling_fit(conv_points)
            print(f"  convergence scaling exponent {slope:.3f} (max residual {resid:.3f})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssbins", description="Repeated balls-into-bins laboratory.")
    p.add_argument("--version", action="version", version=f"ssbins {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, rounds="16n"):
        sp.add_argument("--topology", default="complete",
                        help="complete | ring | regular:D | file:PATH")
        sp.add_argument("--n", type=int, required=True)
        sp.add_argument("--m", default="equal_n", help="integer, expression, equal_n or n_log_n")
        sp.add_argument("--rounds", default=rounds, help="e.g. 1000, 16n, n^2, 2n*log2n")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="out")

    sim = sub.add_parser("simulate", help="one seeded run")
    common(sim)
    sim.add_argument("--strategy", choices=["fifo", "lifo", "random"], default="fifo")
    sim.add_argument("--placement", default="spread", help="spread | point:IDX | random | file:PATH")
    sim.add_argument("--alpha", type=float, default=4.0)
    sim.add_argument("--rule", choices=["balanced", "scaled", "additive"], default="balanced")
    sim.add_argument("--trace", action="store_true")
    sim.add_argument("--faults", help="e.g. periodic:8n:all_in_one:0")
    sim.add_argument("--stride", type=int)
    sim.add_argument("--stop-on-cover", action="store_true")
    sim.add_argument("--arrival", choices=["random", "source"], default="random")
    sim.set_defaults(func=cmd_simulate)

    base = sub.add_parser("baseline", help="one run of a reference process")
    common(base)
    base.add_argument("--kind", choices=["memoryless", "dominating", "single_ball"], required=True)
    base.add_argument("--alpha", type=float, default=4.0)
    base.add_argument("--rule", choices=["balanced", "scaled", "additive"], default="balanced")
    base.add_argument("--checkpoints", nargs="*", help="rounds at which to record the max load")
    base.set_defaults(func=cmd_baseline)

    cov = sub.add_parser("cover", help="parallel cover time over repeated traced runs")
    common(cov, rounds="n^2")
    cov.add_argument("--strategy", choices=["fifo", "lifo", "random"], default="fifo")
    cov.add_argument("--placement", default="spread")
    cov.add_argument("--runs", type=int, default=10)
    cov.add_argument("--workers", type=int, default=default_workers())
    cov.set_defaults(func=cmd_cover)

    sw = sub.add_parser("sweep", help="run every experiment in a config file")
    sw.add_argument("config")
    sw.add_argument("--workers", type=int, default=default_workers())
    sw.add_argument("--out", default="out")
    sw.set_defaults(func=cmd_sweep)

    pre = sub.add_parser("presets", help="list, show or run shipped experiment presets")
    pre.add_argument("action", choices=["list", "show", "run"])
    pre.add_argument("name", nargs="?")
    pre.add_argument("--workers", type=int, default=default_workers())
    pre.add_argument("--out", default="out")
    pre.set_defaults(func=cmd_presets)

    rep = sub.add_parser("report", help="summarize a results CSV")
    rep.add_argument("results")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SimulationError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - last-resort exit code contract
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
