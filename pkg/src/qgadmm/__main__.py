"""Command line: ``python3 -m qgadmm {run,sweep,cdf}``.

Exit codes: 0 success, 2 bad configuration, 3 solver failure. Set
``QGADMM_LOG`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from pathlib import Path

from . import harness
from .solvers import SolverError

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


def _overrides(args) -> dict:
    return {
        "algorithm": getattr(args, "algo", None),
        "seeds": getattr(args, "seed", None),
        "rho": getattr(args, "rho", None),
        "bits": getattr(args, "bits", None),
    }


def _report(runs) -> None:
    for seed, run in runs.items():
        s = run.summary
        if s.censored:
            print(f"{s.algorithm} seed={seed}: censored after {s.iterations} iterations (loss {s.final_loss:.3e})")
        else:
            print(f"{s.algorithm} seed={seed}: target at iteration {s.iterations_to_target}, "
                  f"{s.bits_to_target} bits, {s.energy_to_target:.4e} J")


def cmd_run(args) -> int:
    config = harness.load_config(args.config, **_overrides(args))
    runs = harness.run_experiment(config)
    harness.write_outputs(runs, config, args.out)
    _report(runs)
    return EXIT_OK


def _split(raw, cast):
    return [cast(v) for v in raw.split(",")] if raw else [None]


def cmd_sweep(args) -> int:
    base = harness.load_config(args.config, seeds=args.seed)
    algos = args.algos.split(",") if args.algos else [base.algorithm]
    combos = itertools.product(algos, _split(args.rhos, float), _split(args.bits_list, str), _split(args.workers, int))
    index = []
    for algo, rho, bits, n in combos:
        kw = {"algorithm": algo}
        if rho is not None:
            kw["rho"] = rho
        if bits is not None:
            kw["bits"] = bits
        if n is not None:
            kw["n_workers"] = n
        config = base.replace(**kw)
        tag = f"{algo}_rho{config.rho:g}_bits{config.bit_policy().replace(':', '')}_n{config.n_workers}"
        runs = harness.run_experiment(config)
        harness.write_outputs(runs, config, Path(args.out) / tag)
        _report(runs)
        index.append(tag)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return EXIT_OK


def cmd_cdf(args) -> int:
    lines = ["algorithm,energy_j,quantile"]
    for path in args.summaries:
        summaries = harness.read_summaries(path)
        for energy, q in harness.energy_cdf(summaries):
            lines.append(f"{summaries[0].algorithm},{energy!r},{q!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qgadmm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one algorithm over the configured seeds")
    run.add_argument("--config", help="key = value config file")
    run.add_argument("--algo")
    run.add_argument("--seed", help="seed list, e.g. 0,3 or 0-19")
    run.add_argument("--rho")
    run.add_argument("--bits", help="e.g. 2, fixed:8 or adaptive:2")
    run.add_argument("--out", default="results")
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="run a matrix of algorithms, rho, bits and worker counts")
    sw.add_argument("--config")
    sw.add_argument("--seed")
    sw.add_argument("--algos", help="comma separated")
    sw.add_argument("--rhos")
    sw.add_argument("--bits-list", dest="bits_list")
    sw.add_argument("--workers")
    sw.add_argument("--out", default="results")
    sw.set_defaults(func=cmd_sweep)

    cdf = sub.add_parser("cdf", help="energy-to-target CDF from summary JSON files")
    cdf.add_argument("summaries", nargs="+")
    cdf.add_argument("--out")
    cdf.set_defaults(func=cmd_cdf)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("QGADMM_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (harness.ConfigError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as e:
        print(f"solver error: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
