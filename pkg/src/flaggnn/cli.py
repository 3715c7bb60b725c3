"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 dataset error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from flaggnn.config import dump_config, load_config
from flaggnn.errors import ConfigError, DatasetError, DivergenceError
from flaggnn.experiments import (ExperimentSpec, noise_gaps, run_experiment, seeds_from_range,
                                 sigmas_from_list)

VERBS = {
    "run": "single",
    "sweep-seeds": "sweep-seeds",
    "compare": "compare-strategies",
    "free-budget": "free-budget",
    "noise-sweep": "noise-sweep",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flaggnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch metrics")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seeds", help="seed range a..b or list a,b,c (default: config seed)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
        if verb == "noise-sweep":
            p.add_argument("--sigmas", required=True, help="comma-separated noise levels")

    mk = sub.add_parser("make-dataset", help="write a synthetic dataset and a matching config")
    mk.add_argument("kind", choices=("toy", "citation-like"))
    mk.add_argument("--out", required=True)
    mk.add_argument("--seed", type=int, default=0)
    return parser


def _make_dataset(args) -> int:
    from flaggnn.data import make_citation_like, make_toy_dataset, write_node_dataset
    from flaggnn.train import DataSpec, TrainConfig

    data = make_toy_dataset(seed=args.seed) if args.kind == "toy" else make_citation_like(seed=args.seed)
    paths = write_node_dataset(args.out, data)
    cfg = TrainConfig(data=DataSpec(graph=paths["edges"].name, features=paths["features"].name,
                                    labels=paths["labels"].name, split=paths["split"].name))
    (Path(args.out) / "config.ini").write_text(dump_config(cfg))
    print(f"wrote {args.kind} dataset ({data.graph.num_nodes} nodes) to {args.out}")
    return 0


def _run(args) -> int:
    cfg = load_config(args.config, args.overrides)
    seeds = seeds_from_range(args.seeds) if args.seeds else (cfg.seed,)
    sigmas = sigmas_from_list(args.sigmas) if getattr(args, "sigmas", None) else ()
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"--out: cannot create {out}: {e.strerror}") from None
    spec = ExperimentSpec(VERBS[args.verb], cfg, out, seeds, sigmas, args.jobs)
    result = run_experiment(spec)
    if spec.kind == "single":
        sel = result["selected"]
        print(f"selected epoch {sel['epoch']}: val {sel['val_acc']:.4f} test {sel['test_acc']:.4f}")
    else:
        for row in result:
            prefix = f"sigma={row['sigma']:g} " if "sigma" in row else ""
            print(f"{prefix}{row['arm']:>10} M={row['M']} test {row['test_mean']:.4f} "
                  f"+- {row['test_std']:.4f} forwards {row['forwards']:.0f}")
        if spec.kind == "noise-sweep":
            for sigma, gap in noise_gaps(result).items():
                print(f"sigma={sigma:g} fgsm-clean gap {gap:+.4f}")
    print(f"results in {out}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "make-dataset":
            return _make_dataset(args)
        return _run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DatasetError as e:
        print(f"dataset error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
