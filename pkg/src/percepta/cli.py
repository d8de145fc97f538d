"""Command-line entry points.

Subcommands:

    attack        one metric-mode attack on a dataset item or a PNG
    benchmark     per-class batch attacks with a report directory
    linf-compare  max-norm attacks with and without bisection
    agreement     spread / L1-divergence statistics over a selection log
    serve         start the session service for the browser UI
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from percepta.attack import AttackProblem, BisectionConfig, run_attack
from percepta.bench import (
    PRESET_COLOR,
    PRESET_PER_PIXEL,
    AttackSettings,
    analyze_agreement,
    run_benchmark,
    run_linf_comparison,
    write_run_directory,
)
from percepta.classifiers import LinearSpec, load_weights
from percepta.datasets import ingest_idx, ingest_png_dir
from percepta.fitness import NormKind
from percepta.images import from_png_bytes, to_png_bytes


def _add_classifier_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--weights", required=True, help="classifier weights document")


def _add_dataset_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--images", help="IDX images file")
    parser.add_argument("--labels", help="IDX labels file")
    parser.add_argument("--png-dir", help="directory of PNGs with labels.json")


def _load_dataset(args):
    if args.png_dir:
        return ingest_png_dir(args.png_dir)
    if not (args.images and args.labels):
        raise SystemExit("need --images/--labels or --png-dir")
    return ingest_idx(args.images, args.labels)


def _norm(value: str) -> NormKind:
    try:
        return NormKind(value)
    except ValueError:
        raise SystemExit(f"unknown norm {value!r}; choose from L0, L1, L2, Linf")


def cmd_attack(args) -> int:
    classifier = load_weights(args.weights)
    if args.png:
        reference = from_png_bytes(Path(args.png).read_bytes())
        label = args.label
        if label is None:
            raise SystemExit("--label is required with --png")
    else:
        dataset = _load_dataset(args)
        reference = dataset.images[args.index]
        label = int(dataset.labels[args.index])
    problem = AttackProblem(
        reference=reference,
        reference_label=int(label),
        classifier=classifier,
        target_label=args.target,
        parameterization="color_darkening" if args.color else "per_pixel",
        iterations=args.iterations,
        strategy_overrides={
            "population_size": args.population,
            "parent_count": args.parents,
        },
    )
    bisection = BisectionConfig() if args.bisection else None
    result = run_attack(
        problem,
        bisection=bisection,
        rng_seed=args.seed,
        fitness_kind=_norm(args.norm),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(json.dumps(result.to_document(), indent=1))
    (out / "adversarial.png").write_bytes(to_png_bytes(result.adversarial))
    print(
        f"success={result.success} label={result.adversarial_label} "
        f"avg_pert={result.distances.average_perturbation * 100:.2f}% "
        f"queries={result.queries_used}"
    )
    return 0 if result.success else 1


def cmd_benchmark(args) -> int:
    dataset = _load_dataset(args)
    classifier = load_weights(args.weights)
    settings = AttackSettings(
        norm=_norm(args.norm),
        iterations=args.iterations,
        population_size=args.population,
        parent_count=args.parents,
        bisection=BisectionConfig() if args.bisection else None,
        query_budget=args.query_budget,
    )
    report = run_benchmark(
        dataset,
        classifier,
        settings,
        per_class=args.per_class,
        seed=args.seed,
        out_dir=args.out,
        workers=args.workers,
    )
    print(report.to_text())
    return 0


def cmd_linf_compare(args) -> int:
    dataset = _load_dataset(args)
    classifier = load_weights(args.weights)
    settings = AttackSettings(
        norm=NormKind.LINF,
        iterations=args.iterations,
        population_size=args.population,
        parent_count=args.parents,
    )
    comparison = run_linf_comparison(
        dataset,
        classifier,
        seed=args.seed,
        per_class=args.per_class,
        settings=settings,
        out_dir=args.out,
        workers=args.workers,
    )
    print(f"{'class':>5} {'pure linf%':>11} {'bisect linf%':>13}")
    for cls, row in comparison["per_class"].items():
        pure = row["pure_linf_pct"]
        refined = row["bisection_linf_pct"]
        print(
            f"{cls:>5} {pure if pure is None else round(pure, 2)!s:>11} "
            f"{refined if refined is None else round(refined, 2)!s:>13}"
        )
    return 0


def cmd_agreement(args) -> int:
    report = analyze_agreement(args.log)
    print(f"participants: {report['participants']}, stimuli: {report['stimuli']}")
    print(f"choice spread: {report['spread']:.4f}")
    if report["l1_divergence"] is not None:
        print(f"divergence from L1 ranking: {report['l1_divergence']:.4f}")
    for row in report["per_stimulus"]:
        div = row["l1_divergence"]
        print(
            f"  {row['stimulus']}: spread {row['spread']:.4f}"
            + ("" if div is None else f", L1 divergence {div:.4f}")
        )
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from percepta.service import SessionStore, create_app, create_classifier_app

    if args.classifier_weights:
        app = create_classifier_app(load_weights(args.classifier_weights))
    else:
        store = SessionStore(args.sessions_dir, timeout_seconds=args.timeout_hours * 3600)
        app = create_app(store)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="percepta")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attack", help="attack one input")
    _add_classifier_args(p)
    _add_dataset_args(p)
    p.add_argument("--index", type=int, default=0, help="dataset item to attack")
    p.add_argument("--png", help="attack a single PNG instead of a dataset item")
    p.add_argument("--label", type=int, help="true label for --png")
    p.add_argument("--target", type=int, help="targeted attack label")
    p.add_argument("--norm", default="L1")
    p.add_argument("--iterations", type=int, default=PRESET_PER_PIXEL["iterations"])
    p.add_argument("--population", type=int, default=PRESET_PER_PIXEL["population_size"])
    p.add_argument("--parents", type=int, default=PRESET_PER_PIXEL["parent_count"])
    p.add_argument("--color", action="store_true", help="channel-darkening search space")
    p.add_argument("--bisection", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="attack-out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("benchmark", help="batch attacks with a report")
    _add_classifier_args(p)
    _add_dataset_args(p)
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--norm", default="L1")
    p.add_argument("--iterations", type=int, default=PRESET_PER_PIXEL["iterations"])
    p.add_argument("--population", type=int, default=PRESET_PER_PIXEL["population_size"])
    p.add_argument("--parents", type=int, default=PRESET_PER_PIXEL["parent_count"])
    p.add_argument("--bisection", action="store_true")
    p.add_argument("--query-budget", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="run directory for reports and PNGs")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("linf-compare", help="max-norm attacks with/without bisection")
    _add_classifier_args(p)
    _add_dataset_args(p)
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--iterations", type=int, default=PRESET_COLOR["iterations"])
    p.add_argument("--population", type=int, default=PRESET_COLOR["population_size"])
    p.add_argument("--parents", type=int, default=PRESET_COLOR["parent_count"])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_linf_compare)

    p = sub.add_parser("agreement", help="agreement statistics over a selection log")
    p.add_argument("--log", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("serve", help="start the session service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8431)
    p.add_argument("--sessions-dir", default="sessions")
    p.add_argument("--timeout-hours", type=float, default=24.0)
    p.add_argument(
        "--classifier-weights",
        help="serve this weights document behind POST /classify instead",
    )
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
