"""
Command-line entry point: ``run``/``sweep``, ``verify`` and ``bounds``.

Config files are INI-style with ``[run]``, ``[sweep]`` and ``[verify]``
sections; keys are addressed as flat dotted names (``run.m``,
``sweep.p``). List-valued keys take comma-separated values. Command-line
flags override file values.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import itertools
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import analysis, engine
from .analysis import Check, TheoryConstants
from .engine import RunConfig
from .errors import ConfigurationError, IntegrityError, MirrorGossipError
from .mirror import MirrorMap
from .topology import GraphSchedule, mixing_constants

log = logging.getLogger("mirror_gossip")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INTEGRITY = 0, 1, 2, 3

SWEEP_AXES = ("p", "density", "alpha", "m", "eta")
SUMMARY_COLUMNS = ("strategy", "p", "m", "density", "alpha", "eta", "seeds", "mean_min_loss",
                   "min_min_loss", "mean_final_accuracy", "threshold",
                   "mean_iterations_to_threshold", "converged_runs", "errors")

_RUN_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _convert(type_name: str, raw: str):
    base = type_name.replace("Optional[", "").rstrip("]")
    if type_name.startswith("Optional") and raw.strip().lower() in ("", "none"):
        return None
    return {"int": int, "float": float, "bool": _parse_bool, "str": str}[base](raw.strip())


def read_config(path) -> Dict[str, str]:
    """Flatten an INI file into ``{"section.key": raw_value}``."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return {f"{sec}.{key}": val for sec in parser.sections() for key, val in parser[sec].items()}


def _list(raw: str, cast) -> list:
    return [cast(tok) for tok in raw.replace(",", " ").split()]


@dataclass
class ExperimentSpec:
    base: RunConfig
    axes: Dict[str, list] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=lambda: [0])
    out: Path = Path("out")
    threshold: Optional[float] = None
    threshold_factor: float = 1.05
    save_topology: Optional[str] = None
    load_topology: Optional[str] = None
    save_trace: bool = False
    # verify-only
    verify_powers: List[float] = field(default_factory=lambda: [1.0, 3.0, 5.0])
    verify_losses: List[str] = field(default_factory=lambda: ["logistic"])
    samples: int = 10_000
    zeta: Optional[float] = None
    trace: Optional[str] = None

    def __post_init__(self):
        for name in SWEEP_AXES:
            self.axes.setdefault(name, [getattr(self.base, name)])
            if not self.axes[name]:
                raise ConfigurationError(f"sweep.{name}: empty sweep axis")
        if not self.seeds:
            raise ConfigurationError("sweep.seeds: no seeds")
        if self.threshold is not None and self.threshold <= 0:
            raise ConfigurationError("sweep.threshold must be positive")
        if self.threshold_factor <= 0:
            raise ConfigurationError("sweep.threshold_factor must be positive")

    def cells(self):
        for p, density, alpha, m, eta in itertools.product(*(self.axes[a] for a in SWEEP_AXES)):
            yield self.base.replace(p=p, density=density, alpha=alpha, m=m, eta=eta)


def build_spec(values: Dict[str, str], overrides: Optional[dict] = None) -> ExperimentSpec:
    """Turn flattened config values plus CLI overrides into an :class:`ExperimentSpec`."""
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    run_kw, spec_kw, axes = {}, {}, {}
    for key, raw in values.items():
        section, _, name = key.partition(".")
        try:
            if section == "run":
                if name not in _RUN_TYPES:
                    raise ConfigurationError(f"{key}: unknown field")
                run_kw[name] = _convert(_RUN_TYPES[name], raw)
            elif section == "sweep":
                if name in SWEEP_AXES:
                    axes[name] = _list(raw, int if name == "m" else float)
                elif name == "seeds":
                    spec_kw["seeds"] = _list(raw, int)
                elif name in ("threshold", "threshold_factor"):
                    spec_kw[name] = float(raw)
                elif name == "out":
                    spec_kw["out"] = Path(raw.strip())
                else:
                    raise ConfigurationError(f"{key}: unknown field")
            elif section == "verify":
                if name == "p":
                    spec_kw["verify_powers"] = _list(raw, float)
                elif name == "losses":
                    spec_kw["verify_losses"] = _list(raw, str)
                elif name == "samples":
                    spec_kw["samples"] = int(raw)
                elif name == "zeta":
                    spec_kw["zeta"] = float(raw)
                elif name == "trace":
                    spec_kw["trace"] = raw.strip()
                else:
                    raise ConfigurationError(f"{key}: unknown field")
            else:
                raise ConfigurationError(f"{key}: unknown section {section!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"{key}: {exc}") from exc

    for name in ("iters", "strategy", "rescale", "B", "loss", "classes", "dim", "per_class",
                 "separation", "l2", "grad_clip"):
        if name in overrides:
            run_kw["T" if name == "iters" else name] = overrides[name]
    for name in SWEEP_AXES:
        if overrides.get(name):
            axes[name] = list(overrides[name])
    if overrides.get("seed"):
        spec_kw["seeds"] = list(overrides["seed"])
    for name in ("out", "threshold", "save_topology", "load_topology", "save_trace",
                 "zeta", "trace", "samples"):
        if name in overrides:
            spec_kw[name] = Path(overrides[name]) if name == "out" else overrides[name]
    if "verify_p" in overrides:
        spec_kw["verify_powers"] = list(overrides["verify_p"])

    try:
        base = RunConfig(**run_kw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    return ExperimentSpec(base=base, axes=axes, **spec_kw)


def _tag(cfg: RunConfig) -> str:
    return (f"{cfg.strategy}_p{cfg.p:g}_m{cfg.m}_d{cfg.density:g}_a{cfg.alpha:g}"
            f"_eta{cfg.eta:g}_s{cfg.seed}")


def _suffixed(path: str, tag: str, many: bool) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}_{tag}{p.suffix}") if many else p


def _oracle_threshold(cfg: RunConfig, problem, cache: dict, factor: float) -> float:
    key = (cfg.loss, cfg.m, cfg.alpha, cfg.seed, cfg.classes, cfg.dim, cfg.per_class,
           cfg.separation, cfg.l2, cfg.data_path)
    if key not in cache:
        _, f_star = analysis.centralized_oracle(problem.losses, problem.shards, tolerance=1e-6)
        cache[key] = f_star
    return factor * cache[key]


def run_sweep(spec: ExperimentSpec, threads: Optional[int] = None) -> List[dict]:
    """
    Execute every sweep cell for every seed, writing one CSV and one JSON
    summary per run plus ``summary.csv``. Failed runs are recorded and the
    sweep continues.
    """
    spec.out.mkdir(parents=True, exist_ok=True)
    cells = list(spec.cells())
    many = len(cells) * len(spec.seeds) > 1
    oracle_cache: dict = {}
    results = []
    for cell in cells:
        runs = []
        for seed in spec.seeds:
            cfg = cell.replace(seed=seed, record_trace=spec.save_trace)
            tag = _tag(cfg)
            entry = {"tag": tag, "config": cfg}
            try:
                problem = engine.build_problem(cfg)
                if spec.load_topology:
                    schedule = GraphSchedule.load(_suffixed(spec.load_topology, tag, many))
                else:
                    schedule = engine.build_schedule(cfg)
                if spec.save_topology:
                    schedule.save(_suffixed(spec.save_topology, tag, many))
                metrics = engine.run(cfg, schedule=schedule, problem=problem, threads=threads)
                threshold = spec.threshold
                if threshold is None:
                    threshold = _oracle_threshold(cfg, problem, oracle_cache,
                                                  spec.threshold_factor)
                metrics.to_csv(spec.out / f"{tag}.csv")
                summary = metrics.summary(threshold)
                if spec.save_trace:
                    trace_path = spec.out / f"{tag}.trace.npz"
                    engine.save_trace(metrics.trace, trace_path)
                    summary["trace"] = str(trace_path)
                (spec.out / f"{tag}.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
                entry.update(metrics=metrics, summary=summary, error=None)
            except MirrorGossipError as exc:
                log.error("run %s failed: %s", tag, exc)
                entry.update(metrics=None, summary=None, error=f"{type(exc).__name__}: {exc}")
            runs.append(entry)
        results.append({"cell": cell, "runs": runs})
    _write_summary(spec.out / "summary.csv", results)
    return results


def _write_summary(path: Path, results: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for res in results:
            cell = res["cell"]
            ok = [r["summary"] for r in res["runs"] if r["error"] is None]
            errors = [r["error"] for r in res["runs"] if r["error"] is not None]
            mins = [s["min_loss"] for s in ok]
            accs = [s["final_accuracy"] for s in ok if s["final_accuracy"] is not None]
            iters = [s["iterations_to_threshold"] for s in ok if s["iterations_to_threshold"] >= 0]
            thresholds = sorted({s["threshold"] for s in ok})
            writer.writerow([
                cell.strategy, f"{cell.p:g}", cell.m, f"{cell.density:g}", f"{cell.alpha:g}",
                f"{cell.eta:g}", len(res["runs"]),
                repr(float(np.mean(mins))) if mins else "",
                repr(float(np.min(mins))) if mins else "",
                repr(float(np.mean(accs))) if accs else "",
                ";".join(repr(t) for t in thresholds),
                repr(float(np.mean(iters))) if iters else "-1",
                len(iters), " | ".join(errors),
            ])


# --- verify -------------------------------------------------------------------

def verify(spec: ExperimentSpec, threads: Optional[int] = None) -> dict:
    """
    Run the full inequality suite and return a JSON-ready document whose
    ``passed`` flag is true iff every check passed.
    """
    base = spec.base
    if spec.zeta is not None:
        mixing_constants(base.m, spec.zeta, base.B)  # fails fast on kappa >= 1
    checks: List[Check] = []
    runs = []

    if spec.trace:
        trace = engine.load_trace(spec.trace)
        t = trace.gradients.shape[0] - 1
        for k in sorted({0, t // 2, t}):
            res = engine.unrolled_state_check(trace, t, k)
            checks.append(Check(f"unrolled_trace_k{k}", res.ok, dataclasses.asdict(res)))

    checks.append(analysis.uniform_convexity_suite(spec.verify_powers, spec.samples, base.seed))
    schedule = engine.build_schedule(base.replace(record_trace=False))
    checks.append(analysis.mixing_bound_suite(schedule))

    for loss in spec.verify_losses:
        for p in spec.verify_powers:
            cfg = base.replace(p=p, loss=loss, record_trace=True, record_bounds=True,
                               strategy="aims")
            problem = engine.build_problem(cfg)
            metrics = engine.run(cfg, schedule=engine.build_schedule(cfg), problem=problem,
                                 threads=threads)
            x_star, f_star = analysis.centralized_oracle(problem.losses, problem.shards)
            zeta = spec.zeta if spec.zeta is not None else metrics.zeta
            consts = TheoryConstants.build(m=cfg.m, zeta=zeta, B=cfg.B, mmap=cfg.mirror_map,
                                           G_l=cfg.grad_clip, eta=cfg.eta, T=cfg.T)
            report = analysis.theory_report(metrics, x_star, f_star, consts)
            t = cfg.T - 1
            for k in sorted({0, t // 2, t}):
                res = engine.unrolled_state_check(metrics.trace, t, k)
                report.checks.append(Check(f"unrolled_k{k}", res.ok, dataclasses.asdict(res)))
            for c in report.checks:
                c.name = f"{loss}/p={p:g}/{c.name}"
            checks.extend(report.checks)
            runs.append({"loss": loss, "p": p, **report.to_dict()})

    checks.append(analysis.amgm_sweep(spec.samples, base.seed))
    checks.append(analysis.skew_sweep(spec.samples, base.seed))
    passed = all(c.passed for c in checks)
    return {"passed": passed, "checks": [dataclasses.asdict(c) for c in checks], "runs": runs}


# --- argument parsing -----------------------------------------------------------

def _add_run_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("config", nargs="?", help="INI config file")
    sp.add_argument("--config", dest="config_flag", help="INI config file")
    sp.add_argument("--p", type=float, action="append", help="mirror power (repeatable)")
    sp.add_argument("--m", type=int, action="append", help="device count (repeatable)")
    sp.add_argument("--density", type=float, action="append", help="link density (repeatable)")
    sp.add_argument("--alpha", type=float, action="append", help="Dirichlet alpha (repeatable)")
    sp.add_argument("--eta", type=float, action="append", help="learning rate (repeatable)")
    sp.add_argument("--seed", type=int, action="append", help="replicate seed (repeatable)")
    sp.add_argument("--iters", type=int, help="iterations T")
    sp.add_argument("--B", type=int, help="connectivity window")
    sp.add_argument("--loss", choices=("logistic", "quadratic"))
    sp.add_argument("--classes", type=int)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--per-class", dest="per_class", type=int)
    sp.add_argument("--separation", type=float)
    sp.add_argument("--strategy", choices=engine.STRATEGIES)
    sp.add_argument("--rescale", action="store_true", default=None,
                    help="rescale mirror states before mixing")
    sp.add_argument("--save-topology", dest="save_topology")
    sp.add_argument("--load-topology", dest="load_topology")
    sp.add_argument("--save-trace", dest="save_trace", action="store_true", default=None)
    sp.add_argument("--threshold", type=float, help="absolute loss threshold")
    sp.add_argument("--out", help="output directory (run) or report file (verify)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mirror-gossip",
                                     description="Mirror-space gossip learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep"):
        _add_run_flags(sub.add_parser(name, help="execute runs over the sweep cross-product"))
    vp = sub.add_parser("verify", help="run the inequality suite; nonzero exit on failure")
    _add_run_flags(vp)
    vp.add_argument("--zeta", type=float, help="override the mixing lower bound")
    vp.add_argument("--trace", help="recorded trace to re-check")
    vp.add_argument("--samples", type=int, help="draws per randomized suite")
    vp.add_argument("--verify-p", dest="verify_p", type=float, action="append")
    bp = sub.add_parser("bounds", help="print mixing constants and corollary rates")
    bp.add_argument("--m", type=int, required=True)
    bp.add_argument("--T", "--iters", dest="T", type=int, required=True)
    bp.add_argument("--r", type=float, default=2.0)
    bp.add_argument("--zeta", type=float)
    bp.add_argument("--B", type=int, default=1)
    bp.add_argument("--eta", type=float)
    return parser


def _spec_from_args(args) -> ExperimentSpec:
    path = args.config_flag or args.config
    values = read_config(path) if path else {}
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("config", "config_flag", "command", "verbose")}
    return build_spec(values, overrides)


def cmd_run(args) -> int:
    spec = _spec_from_args(args)
    results = run_sweep(spec)
    failed = [r for res in results for r in res["runs"] if r["error"]]
    print(f"wrote {sum(len(r['runs']) for r in results)} runs to {spec.out}")
    for r in failed:
        print(f"  {r['tag']}: {r['error']}", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_verify(args) -> int:
    spec = _spec_from_args(args)
    if args.out is None:
        spec.out = None
    doc = verify(spec)
    text = json.dumps(doc, indent=2, default=analysis._jsonable)
    if spec.out:
        Path(spec.out).write_text(text)
    else:
        print(text)
    if not doc["passed"]:
        first = next(c for c in doc["checks"] if not c["passed"])
        print(f"FAILED {first['name']}: {json.dumps(first['detail'], default=analysis._jsonable)}",
              file=sys.stderr)
        return EXIT_FAIL
    print("all checks passed", file=sys.stderr)
    return EXIT_OK


def cmd_bounds(args) -> int:
    out = {"m": args.m, "T": args.T, "r": args.r}
    if args.zeta is not None:
        c = mixing_constants(args.m, args.zeta, args.B)
        out.update(zeta=args.zeta, B=args.B, vartheta=c.vartheta, kappa=c.kappa)
    rate, eta_star = analysis.corollary_rates(args.m, args.T, args.r, "optimal")
    out.update(optimal_rate=rate, optimal_eta=eta_star)
    rate2, _ = analysis.corollary_rates(args.m, args.T, 2.0, "optimal")
    out["linear_aggregation_rate"] = rate2
    if args.eta is not None:
        out["rate_at_eta"] = analysis.corollary_rates(args.m, args.T, args.r, args.eta)[0]
    for k, v in out.items():
        print(f"{k} = {v:.6g}" if isinstance(v, float) else f"{k} = {v}")
    return EXIT_OK


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "sweep": cmd_run, "verify": cmd_verify, "bounds": cmd_bounds}
    try:
        return handler[args.command](args)
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
