"""Command-line entry point: ``dfcformer {synth,cv,gradcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

import argparse
import dataclasses
import sys

from . import io
from .dfc import WindowSpec, extract
from .evaluation import run_ablation, run_cv
from .exceptions import ConfigError, ContractError, DataError, NumericalError
from .gradcheck import format_report, run_gradcheck
from .synthcohort import generate_cohort

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _override(config, args):
    """Apply command-line flags on top of the config file."""
    window = config.window
    if getattr(args, "window_length", None) is not None or getattr(args, "stride", None) is not None:
        window = WindowSpec(args.window_length or window.length, args.stride or window.stride)
    evaluation = config.eval
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "folds", None) is not None:
        updates["folds"] = args.folds
    if getattr(args, "variant", None) is not None:
        updates["variant"] = args.variant
    if getattr(args, "ablate", False):
        updates["ablate"] = True
    evaluation = dataclasses.replace(evaluation, **updates)
    synth = config.synth
    if getattr(args, "seed", None) is not None and args.command == "synth":
        synth = dataclasses.replace(synth, seed=args.seed)
    return dataclasses.replace(config, window=window, eval=evaluation, synth=synth)


def cmd_synth(args):
    config = _override(io.load_config(args.config), args)
    dataset = generate_cohort(config.synth, config.window)
    io.write_cohort(args.out, dataset)
    n_subjects = len({s.subject_id for s in dataset.scans})
    print(f"subjects {n_subjects}  scans {len(dataset.scans)}  "
          f"N {config.synth.n_rois}  L_total {config.synth.n_timepoints}  -> {args.out}")
    return EXIT_OK


def cmd_cv(args):
    config = _override(io.load_config(args.config), args)
    scans = [extract(s, config.window) for s in io.load_manifest_scans(args.manifest)]

    def progress(variant, fold):
        print(f"{variant:7s} fold {fold.fold}: acc {fold.metrics.acc:.3f}", file=sys.stderr)

    ev = config.eval
    model = dataclasses.replace(config.model, variant=ev.variant)
    if ev.ablate:
        results = run_ablation(scans, model, config.train, ev.folds, ev.seed, progress=progress)
    else:
        results = {ev.variant: run_cv(scans, model, config.train, ev.folds, ev.seed, progress=progress)}
    io.write_results(args.out, io.results_document(config, results, args.manifest))
    print(f"{'Method':8s} " + " ".join(f"{m.upper():>6s}" for m in ("acc", "sen", "spe", "auc", "f1")))
    for name, cv in results.items():
        cells = " ".join("   n/a" if cv.mean[m] is None else f"{100 * cv.mean[m]:6.1f}"
                         for m in ("acc", "sen", "spe", "auc", "f1"))
        print(f"{name:8s} {cells}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_gradcheck(args.seed if args.seed is not None else 0, corrupt=args.inject_fault)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def build_parser():
    parser = argparse.ArgumentParser(prog="dfcformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="cohort seed (overrides synth.seed)")
    p.add_argument("--window-length", type=int)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cv", help="cross-validate on a manifest of scans")
    p.add_argument("manifest")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", required=True, help="results file")
    p.add_argument("--seed", type=int, help="fold and training seed (overrides eval.seed)")
    p.add_argument("--folds", type=int)
    p.add_argument("--ablate", action="store_true", help="run all four variants on paired folds")
    p.add_argument("--variant", choices=["full", "s-only", "t-only", "os-fc"])
    p.add_argument("--window-length", type=int)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    p.add_argument("--seed", type=int)
    p.add_argument("--inject-fault", metavar="PARAM", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, ContractError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
