"""Command line: ``stochstab list | show | run``.

Exit codes: 0 every requested certificate passed, 1 some certificate failed,
2 invalid scenario or arguments, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import builtins as bi
from .scenario import ScenarioError, builtin_scenario, dump_scenario, from_dict, load_scenario

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
ENV_OUT_DIR = "STOCHSTAB_OUT_DIR"
DEFAULT_OUT_DIR = "stochstab-out"


def list_builtins() -> dict:
    return bi.list_builtins()


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochstab",
                                description="Verify, synthesize and simulate almost-sure stabilization scenarios.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="list built-in scenarios")

    show = sub.add_parser("show", help="print a scenario (built-in or file) with all defaults filled in")
    show.add_argument("scenario", nargs="?", help="scenario YAML file")
    show.add_argument("--builtin", metavar="ID")

    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("scenario", nargs="?", help="scenario YAML file")
    run.add_argument("--builtin", metavar="ID", help="run a built-in scenario")
    run.add_argument("--seed", type=int, help="override simulate.master_seed")
    run.add_argument("--paths", type=int, help="override simulate.paths")
    run.add_argument("--dt", type=float, help="override simulate.dt")
    run.add_argument("--horizon", type=float, help="override simulate.horizon")
    run.add_argument("--out-dir", help=f"output root (default ${ENV_OUT_DIR} or ./{DEFAULT_OUT_DIR})")
    run.add_argument("--no-figures", action="store_true", help="emit the plot script but skip rendering")
    return p


def _resolve(args):
    if bool(args.scenario) == bool(args.builtin):
        raise ScenarioError("give either a scenario file or --builtin ID")
    return builtin_scenario(args.builtin) if args.builtin else load_scenario(args.scenario)


def _with_overrides(sc, args):
    over = {"seed": "master_seed", "paths": "paths", "dt": "dt", "horizon": "horizon"}
    sim = {key: getattr(args, opt) for opt, key in over.items() if getattr(args, opt) is not None}
    if not sim:
        return sc
    data = sc.to_dict()
    data["simulate"] = {**data.get("simulate", {}), **sim}
    return from_dict(data)


def _out_root(args) -> Path:
    return Path(args.out_dir or os.environ.get(ENV_OUT_DIR) or DEFAULT_OUT_DIR)


def _print_summary(report, written, out):
    out.write(f"scenario\t{report.scenario['name']}\n")
    for err in report.errors:
        out.write(f"error\t{err['stage']}\t{err['type']}: {err['message']}\n")
    for name, cert in report.certificates.items():
        extra = ""
        for key in ("fraction", "bounded_fraction", "median_rate", "max_ratio"):
            if cert.get(key) is not None:
                extra = f"\t{key}={cert[key]:.6g}"
                break
        out.write(f"certificate\t{name}\t{'PASS' if cert['passed'] else 'FAIL'}{extra}\n")
    out.write(f"verdict\t{'PASS' if report.verdict else 'FAIL'}\n")
    for key in ("report", "timings", "plot_script"):
        if key in written:
            out.write(f"{key}\t{written[key]}\n")
    if "csv" in written:
        out.write(f"csv\t{len(written['csv'])} file(s) in {written['csv'][0].parent}\n")
    for f in written.get("figures", []):
        out.write(f"figure\t{f}\n")


def main(argv=None) -> int:
    from .pipeline import run, write_outputs

    args = _parser().parse_args(argv)
    out, err = sys.stdout, sys.stderr
    if args.command == "list":
        for bid, desc in list_builtins().items():
            out.write(f"{bid}\t{desc}\n")
        return EXIT_OK
    try:
        sc = _resolve(args)
        if args.command == "show":
            out.write(dump_scenario(sc))
            return EXIT_OK
        sc = _with_overrides(sc, args)
    except ScenarioError as exc:
        err.write(f"stochstab: invalid scenario: {exc}\n")
        return EXIT_CONFIG
    except OSError as exc:
        err.write(f"stochstab: {exc}\n")
        return EXIT_IO
    report = run(sc)
    try:
        written = write_outputs(report, _out_root(args) / sc.name, sc, figures=not args.no_figures)
    except OSError as exc:
        err.write(f"stochstab: could not write outputs: {exc}\n")
        return EXIT_IO
    _print_summary(report, written, out)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
