"""Batch command-line interface.

Subcommands: ``simulate`` (ground-truth trials), ``detect`` (quality control
of one trial), ``evaluate`` (benchmark a directory of simulated trials), and
``render`` (SVG heatmaps). All outputs are deterministic given flags and
seed, except ``timings.csv`` which records wall-clock measurements.

Exit codes: 0 ok/stationary, 10 nonstationarity flagged, 2 usage, 3 input
data error, 4 model fitting error, 5 configuration error, 20 simulation
gave up, 21 missing truth sidecar.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_FIT = 4
EXIT_CONFIG = 5
EXIT_FLAGGED = 10
EXIT_SIMULATION = 20
EXIT_NO_SIDECAR = 21

_EPILOG = """\
exit codes:
  0   success (detect: exactly one patch, trial looks stationary)
  10  detect: more than one patch, trial flagged for inspection
  2   usage error
  3   input data error (CSV parse, duplicate plots, empty trial)
  4   model fitting failed (insufficient data, degenerate values)
  5   configuration error (priors, variants, flags)
  20  simulation could not produce distinct patches
  21  trial is missing its truth sidecar
"""


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1)
    except ImportError:
        pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridpatch",
        description="Detection of mean and covariance nonstationarity in "
        "grid-indexed trial data via stationary patch partitioning.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate ground-truth trials")
    shape = sim.add_mutually_exclusive_group(required=True)
    shape.add_argument("--shape", help="grid as RxC, e.g. 10x31")
    shape.add_argument("--shapes", help="file with one RxC per line")
    sim.add_argument("--n", type=int, required=True, help="number of trials")
    sim.add_argument("--priors", help="JSON priors file (default priors otherwise)")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--min-patch", type=int, default=8)

    det = sub.add_parser("detect", help="quality-control one trial CSV")
    det.add_argument("--input", required=True, help="trial CSV")
    det.add_argument("--design", help="design CSV row,col,block[,variety]")
    det.add_argument("--analysis-family", default="iid",
                     help="field family for the first-stage fit (default iid)")
    det.add_argument("--score", default="cv_nll", choices=["cv_nll", "bic", "aic"])
    det.add_argument("--tree", default="binary", choices=["binary", "quad"])
    det.add_argument("--tree-score", default="bic", choices=["cv_nll", "bic", "aic"])
    det.add_argument("--identify", default="top_down",
                     choices=["top_down", "bottom_up"])
    det.add_argument("--families", default="iid,ar1r,ar1c,ar1rc",
                     help="comma list of iid,ar1r,ar1c,ar1rc")
    det.add_argument("--nugget", action="store_true",
                     help="also try nugget variants of correlated families")
    det.add_argument("--threshold", default="decisive",
                     choices=[t.value for t in _thresholds()])
    det.add_argument("--adjacency", default="rook", choices=["rook", "queen"])
    det.add_argument("--min-plots", type=int, default=6)
    det.add_argument("--folds", type=int, default=5)
    det.add_argument("--seed", type=int, default=0)
    det.add_argument("--out", help="write QC report JSON here")
    det.add_argument("--dump-tree", action="store_true",
                     help="write the index tree next to the report")

    ev = sub.add_parser("evaluate", help="benchmark a directory of simulated trials")
    ev.add_argument("--trials", required=True, help="directory from `simulate`")
    ev.add_argument("--variants", required=True,
                    help="comma list of top_down,bottom_up,binary_oracle,quad_oracle")
    ev.add_argument("--out", required=True, help="output directory")
    ev.add_argument("--score", default="cv_nll", choices=["cv_nll", "bic", "aic"])
    ev.add_argument("--tree-score", default="bic", choices=["cv_nll", "bic", "aic"])
    ev.add_argument("--families", default="iid,ar1r,ar1c,ar1rc")
    ev.add_argument("--nugget", action="store_true")
    ev.add_argument("--threshold", default="decisive",
                    choices=[t.value for t in _thresholds()])
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--jobs", type=int, default=1)

    ren = sub.add_parser("render", help="render a trial or report as SVG")
    ren.add_argument("--input", required=True, help="trial CSV or report JSON")
    ren.add_argument("--report", help="overlay this report's final partition")
    ren.add_argument("--out", required=True, help="output SVG path")

    return parser


def _thresholds():
    from .grf import EvidenceLevel

    return list(EvidenceLevel)


def _parse_families(tokens: str, nugget: bool):
    from .grf import GrfFamily

    fams = [GrfFamily.parse(tok) for tok in tokens.split(",") if tok.strip()]
    if nugget:
        fams += [
            GrfFamily(f.correlation, True)
            for f in fams
            if not f.nugget and f.min_plots > 2
        ]
    return tuple(dict.fromkeys(fams))


def _pipeline_config(args) -> "PipelineConfig":
    from .grf import EvidenceLevel, ScoreKind
    from .grid import Adjacency
    from .segment import IdentifyKind, PipelineConfig
    from .tree import SplitConstraints, TreeKind

    return PipelineConfig(
        tree=TreeKind(getattr(args, "tree", "binary")),
        identify=IdentifyKind(getattr(args, "identify", "top_down")),
        score=ScoreKind(args.score),
        tree_score=ScoreKind(args.tree_score),
        candidates=_parse_families(args.families, args.nugget),
        adjacency=Adjacency(getattr(args, "adjacency", "rook")),
        threshold=EvidenceLevel(args.threshold),
        constraints=SplitConstraints(min_plots=getattr(args, "min_plots", 6)),
        cv_folds=getattr(args, "folds", 5),
        seed=args.seed,
    )


def _shape_from_token(token: str):
    from .errors import ConfigError
    from .grid import GridShape

    try:
        rows, cols = token.lower().split("x")
        return GridShape.full(int(rows), int(cols))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad shape {token!r}, expected RxC") from exc


def cmd_simulate(args) -> int:
    from .errors import ConfigError, SimulationError
    from .simulate import PriorConfig, load_priors, run_study

    if args.n < 1:
        print("error: --n must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.shapes:
            tokens = [
                ln.strip()
                for ln in Path(args.shapes).read_text().splitlines()
                if ln.strip()
            ]
            shapes = [_shape_from_token(tok) for tok in tokens]
        else:
            shapes = [_shape_from_token(args.shape)]
        priors = (
            load_priors(Path(args.priors).read_text()) if args.priors else PriorConfig()
        )
        trials = run_study(shapes, priors, args.n, args.seed,
                           min_patch_plots=args.min_patch)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for idx, sim in enumerate(trials):
        stem = f"trial_{idx:04d}"
        (out / f"{stem}.csv").write_text(sim.trial_csv())
        (out / f"{stem}.truth.json").write_text(
            json.dumps(sim.truth_dict(), sort_keys=True, indent=1) + "\n"
        )
    print(f"wrote {len(trials)} trials to {out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    from .analysis import build_design, gls_fit, parse_design_csv
    from .errors import (
        ConfigError,
        DegenerateDataError,
        DesignError,
        GridPatchError,
        InsufficientDataError,
        NumericalError,
        ParseError,
    )
    from .grf import GrfFamily
    from .grid import parse_trial
    from .segment import build_tree, detect, report_to_dict
    from .grf import FitCache

    try:
        config = _pipeline_config(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        trial = parse_trial(Path(args.input).read_text())
        if args.design:
            blocks, varieties = parse_design_csv(Path(args.design).read_text())
            design = build_design(trial, blocks, varieties)
            first = gls_fit(trial, design, GrfFamily.parse(args.analysis_family))
            trial = first.marginal_residuals
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ParseError, DesignError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        report = detect(trial, config)
    except (InsufficientDataError, NumericalError, DegenerateDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except GridPatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT
    doc = report_to_dict(report)
    if args.out:
        Path(args.out).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    if args.dump_tree:
        tree = build_tree(trial, config, FitCache(trial, config.cv_folds, config.seed))
        tree_path = (
            Path(args.out).with_suffix(".tree.json") if args.out else Path("tree.json")
        )
        tree_path.write_text(tree.to_json() + "\n")
    name = Path(args.input).name
    print(
        f"trial={name} patches={report.m} flag={str(report.flagged).lower()} "
        f"evidence={report.evidence:.6g}"
    )
    return EXIT_FLAGGED if report.flagged else EXIT_OK


def _load_sim_trial(csv_path: Path):
    from .grid import parse_trial, runs_to_coords, Partition, Patch
    from .grf import GrfFamily, GrfParams
    from .simulate import SimTrial

    sidecar = csv_path.with_suffix("").with_suffix(".truth.json")
    if not sidecar.exists():
        return None
    doc = json.loads(sidecar.read_text())
    trial = parse_trial(csv_path.read_text())

    def part_of(key):
        return Partition(
            [
                Patch(int(pid), frozenset(runs_to_coords(runs)))
                for pid, runs in sorted(doc[key].items(), key=lambda kv: int(kv[0]))
            ],
            trial.shape,
        )

    models = {
        int(pid): (
            GrfFamily.parse(m["family"]),
            GrfParams(
                mu=m["mu"], sigma2=m["sigma2"], rho_r=m["rho_r"],
                rho_c=m["rho_c"], phi=m["phi"],
            ),
        )
        for pid, m in doc["true_models"].items()
    }
    return SimTrial(
        trial=trial,
        true_partition=part_of("true_partition"),
        oracle_partition=part_of("oracle_partition"),
        true_models=models,
        seed=doc["seed"],
        separation_bf=doc["separation_bf"],
        param_redraws=doc["param_redraws"],
        geometry_redraws=doc["geometry_redraws"],
    )


def cmd_evaluate(args) -> int:
    from .errors import ConfigError
    from .evaluate import parse_variants, run_benchmark

    try:
        config = _pipeline_config(args)
        variants = parse_variants(args.variants.split(","))
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    trial_dir = Path(args.trials)
    csvs = sorted(trial_dir.glob("trial_*.csv"))
    if not csvs:
        print(f"error: no trial_*.csv under {trial_dir}", file=sys.stderr)
        return EXIT_DATA
    sims = []
    for path in csvs:
        sim = _load_sim_trial(path)
        if sim is None:
            print(f"error: missing sidecar for {path.name}", file=sys.stderr)
            return EXIT_NO_SIDECAR
        sims.append(sim)
    summary = run_benchmark(sims, config, variants, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(summary.to_csv())
    (out / "aggregates.json").write_text(
        json.dumps(summary.aggregates, sort_keys=True, indent=1) + "\n"
    )
    timing_lines = ["trial_index,variant,wall_s"]
    for rec, wall in zip(summary.records, summary.timings):
        timing_lines.append(f"{rec.trial_index},{rec.variant},{wall:.3f}")
    (out / "timings.csv").write_text("\n".join(timing_lines) + "\n")
    print(f"wrote {len(summary.records)} rows to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .errors import ParseError
    from .grid import Partition, Patch, GridShape, parse_trial, runs_to_coords
    from .render import svg_heatmap

    path = Path(args.input)
    trial = None
    partition = None
    try:
        if path.suffix == ".json":
            partition = _partition_from_report(json.loads(path.read_text()))
        else:
            trial = parse_trial(path.read_text())
        if args.report:
            partition = _partition_from_report(json.loads(Path(args.report).read_text()))
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ParseError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: bad input ({exc})", file=sys.stderr)
        return EXIT_DATA
    Path(args.out).write_text(svg_heatmap(trial, partition))
    print(f"wrote {args.out}")
    return EXIT_OK


def _partition_from_report(doc):
    from .grid import GridShape, Partition, Patch, runs_to_coords

    stage = doc["stages"]["final"]
    patches = [
        Patch(p["id"], frozenset(runs_to_coords(p["coords"])))
        for p in stage["patches"]
    ]
    coords = frozenset().union(*(p.coords for p in patches))
    rows = max(i for i, _ in coords) + 1
    cols = max(j for _, j in coords) + 1
    return Partition(patches, GridShape(rows, cols, coords))


def main(argv=None) -> int:
    _limit_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "detect": cmd_detect,
        "evaluate": cmd_evaluate,
        "render": cmd_render,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
