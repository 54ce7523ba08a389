"""Command-line experiment runner.

    mfcl run <config.yaml|preset:NAME> [--seed S] [--scale X] [--out DIR]
    mfcl sweep <config.yaml|preset:NAME> [--seed S] [--scale X] [--out DIR]
    mfcl plot <report-dir>
    mfcl presets

Relative output directories are placed under $MFCL_OUT_ROOT when it is set.
Exit codes: 0 ok, 2 invalid config, 3 training diverged, 1 other errors.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config, load_preset
from .experiment import emit_plot_data, run_experiment, run_sweep
from .perf import tune_allocator
from .train import TrainingDiverged


def _resolve_config(spec):
    if spec.startswith("preset:"):
        return load_preset(spec[len("preset:"):])
    return load_config(spec)


def _add_common(p):
    p.add_argument("config", help="config YAML path, or preset:NAME")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--scale", type=float, default=None,
                   help="override iteration-budget scale factor in (0, 1]")
    p.add_argument("--out", default=None, help="override output directory")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mfcl",
        description="Multifidelity continual learning experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    _add_common(run_p)

    sweep_p = sub.add_parser("sweep", help="run every sweep grid point")
    _add_common(sweep_p)

    plot_p = sub.add_parser("plot", help="emit plot-data CSVs from a report dir")
    plot_p.add_argument("report_dir")

    sub.add_parser("presets", help="list shipped presets")

    args = parser.parse_args(argv)
    tune_allocator()
    try:
        if args.command == "presets":
            from importlib import resources
            names = sorted(p.name[:-5]
                           for p in (resources.files("mfcl") / "presets").iterdir()
                           if p.name.endswith(".yaml"))
            print("\n".join(names))
            return 0
        if args.command == "plot":
            written = emit_plot_data(args.report_dir)
            for path in written:
                print(path)
            return 0
        config = _resolve_config(args.config)
        if args.command == "run":
            report = run_experiment(config, seed=args.seed, scale=args.scale,
                                    out=args.out, verbose=not args.quiet)
            print(f"final {report['metric_name']}: {report['final_rmse']:.6g}")
            print(f"report: {report['out_dir']}/report.json")
            return 0
        if args.command == "sweep":
            summary = run_sweep(config, seed=args.seed, scale=args.scale,
                                out=args.out, verbose=not args.quiet)
            print(f"best grid point: {summary['best']}")
            print(f"summary: {summary['out_dir']}/sweep_summary.json")
            return 0
    except ConfigError as e:
        print(e, file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"training diverged: {e} (partial artifacts preserved)",
              file=sys.stderr)
        return 3
    except (FileNotFoundError, OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
