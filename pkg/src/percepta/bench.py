"""Batch attack benchmarks and the agreement-analysis report.

A benchmark run samples per-class correctly classified items, attacks
each with the metric oracle, and aggregates success rates and mean
perturbation percentages per class.  Every run writes an audit
directory: the config snapshot, the adversarial PNG per item, the
machine-readable report (timing-free so identical seeds reproduce it
byte for byte) and an aligned-column text table with timings.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from percepta.attack import AttackProblem, AttackResult, BisectionConfig, run_attack
from percepta.classifiers import ClassifierSpec, QueryLedger, classify_batch
from percepta.datasets import DatasetHandle
from percepta.fitness import NormKind
from percepta.images import to_png_bytes
from percepta.selection import SelectionLog, agreement_spread, agreement_vs_l1

# paper-style presets per perturbation mode
PRESET_PER_PIXEL = {"iterations": 180, "population_size": 4, "parent_count": 2}
PRESET_COLOR = {"iterations": 3, "population_size": 240, "parent_count": 120}
PRESET_PERCEPTION = {"iterations": 3, "population_size": 20, "parent_count": 5}


@dataclass
class AttackSettings:
    norm: NormKind = NormKind.L1
    iterations: int = PRESET_PER_PIXEL["iterations"]
    population_size: int = PRESET_PER_PIXEL["population_size"]
    parent_count: int = PRESET_PER_PIXEL["parent_count"]
    parameterization: str = "per_pixel"
    bisection: Optional[BisectionConfig] = None
    query_budget: Optional[int] = None
    initial_step: Optional[float] = None
    extra_overrides: dict = field(default_factory=dict)

    def strategy_overrides(self) -> dict:
        overrides = {
            "population_size": self.population_size,
            "parent_count": self.parent_count,
        }
        overrides.update(self.extra_overrides)
        return overrides

    def to_document(self) -> dict:
        return {
            "norm": self.norm.value,
            "iterations": self.iterations,
            "population_size": self.population_size,
            "parent_count": self.parent_count,
            "parameterization": self.parameterization,
            "bisection": None
            if self.bisection is None
            else {
                "max_steps": self.bisection.max_steps,
                "min_interval": self.bisection.min_interval,
            },
            "query_budget": self.query_budget,
            "initial_step": self.initial_step,
            "extra_overrides": self.extra_overrides,
        }


@dataclass
class ItemOutcome:
    dataset_index: int
    label: int
    result: AttackResult
    seconds: float


@dataclass
class BenchmarkReport:
    settings: AttackSettings
    seed: int
    items: list[ItemOutcome]
    skipped_classes: list[int]

    def classes(self) -> list[int]:
        return sorted({item.label for item in self.items})

    def per_class(self) -> dict[int, dict]:
        table = {}
        for cls in self.classes():
            rows = [i for i in self.items if i.label == cls]
            successes = [i for i in rows if i.result.success]
            table[cls] = {
                "count": len(rows),
                "success_rate_pct": 100.0 * len(successes) / len(rows),
                "mean_average_perturbation_pct": (
                    100.0
                    * float(
                        np.mean(
                            [i.result.distances.average_perturbation for i in successes]
                        )
                    )
                    if successes
                    else None
                ),
                "mean_linf_pct": (
                    100.0 * float(np.mean([i.result.distances.linf for i in successes]))
                    if successes
                    else None
                ),
                "mean_queries": float(np.mean([i.result.queries_used for i in rows])),
            }
        return table

    def overall(self) -> dict:
        successes = [i for i in self.items if i.result.success]
        return {
            "items": len(self.items),
            "success_rate_pct": (
                100.0 * len(successes) / len(self.items) if self.items else 0.0
            ),
            "mean_average_perturbation_pct": (
                100.0
                * float(
                    np.mean([i.result.distances.average_perturbation for i in successes])
                )
                if successes
                else None
            ),
            "mean_linf_pct": (
                100.0 * float(np.mean([i.result.distances.linf for i in successes]))
                if successes
                else None
            ),
            "total_queries": int(sum(i.result.queries_used for i in self.items)),
        }

    def to_document(self) -> dict:
        """Machine-readable report; deliberately excludes wall-clock timing."""
        return {
            "settings": self.settings.to_document(),
            "seed": self.seed,
            "skipped_classes": self.skipped_classes,
            "per_class": {str(k): v for k, v in self.per_class().items()},
            "overall": self.overall(),
            "items": [
                {
                    "dataset_index": item.dataset_index,
                    "label": item.label,
                    **item.result.to_document(),
                }
                for item in self.items
            ],
        }

    def to_text(self) -> str:
        lines = []
        header = f"{'class':>5} {'n':>4} {'success%':>9} {'avg pert%':>10} {'linf%':>8} {'queries':>8}"
        lines.append(header)
        lines.append("-" * len(header))
        for cls, row in self.per_class().items():
            pert = row["mean_average_perturbation_pct"]
            linf = row["mean_linf_pct"]
            lines.append(
                f"{cls:>5} {row['count']:>4} {row['success_rate_pct']:>9.1f} "
                f"{pert if pert is None else round(pert, 2)!s:>10} "
                f"{linf if linf is None else round(linf, 2)!s:>8} "
                f"{row['mean_queries']:>8.1f}"
            )
        overall = self.overall()
        mean_pert = overall["mean_average_perturbation_pct"]
        lines.append("-" * len(header))
        lines.append(
            f"overall: {overall['success_rate_pct']:.1f}% success over "
            f"{overall['items']} items, mean perturbation "
            f"{'n/a' if mean_pert is None else f'{mean_pert:.2f}%'}"
        )
        seconds = [item.seconds for item in self.items]
        if seconds:
            lines.append(
                f"wall clock: {float(np.mean(seconds)):.2f}s per item "
                f"({float(np.sum(seconds)):.1f}s total)"
            )
        return "\n".join(lines)


def sample_correct_items(
    dataset: DatasetHandle,
    classifier: ClassifierSpec,
    per_class: int,
    seed: int,
) -> tuple[list[int], list[int]]:
    """Per class, randomly pick correctly classified items.

    Returns (chosen dataset indices, classes skipped for lack of any
    correctly classified item).
    """
    predictions = classify_batch(classifier, [img.ravel() for img in dataset.images])
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    skipped: list[int] = []
    for cls in sorted(set(dataset.labels.tolist())):
        pool = [
            i
            for i in range(dataset.count)
            if dataset.labels[i] == cls and predictions[i] == cls
        ]
        if not pool:
            skipped.append(cls)
            continue
        take = min(per_class, len(pool))
        chosen.extend(rng.choice(pool, size=take, replace=False).tolist())
    return chosen, skipped


def _attack_item(
    dataset: DatasetHandle,
    classifier: ClassifierSpec,
    settings: AttackSettings,
    index: int,
    seed: int,
) -> ItemOutcome:
    problem = AttackProblem(
        reference=dataset.images[index],
        reference_label=int(dataset.labels[index]),
        classifier=classifier,
        parameterization=settings.parameterization,
        iterations=settings.iterations,
        strategy_overrides=settings.strategy_overrides(),
    )
    item_seed = int(
        np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0]
    )
    started = time.perf_counter()
    result = run_attack(
        problem,
        rng_seed=item_seed,
        fitness_kind=settings.norm,
        bisection=settings.bisection,
        query_budget=settings.query_budget,
        ledger=QueryLedger(),
        initial_step=settings.initial_step,
    )
    return ItemOutcome(
        dataset_index=index,
        label=int(dataset.labels[index]),
        result=result,
        seconds=time.perf_counter() - started,
    )


def run_benchmark(
    dataset: DatasetHandle,
    classifier: ClassifierSpec,
    settings: AttackSettings,
    per_class: int,
    seed: int,
    out_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
) -> BenchmarkReport:
    if per_class <= 0:
        report = BenchmarkReport(settings=settings, seed=seed, items=[], skipped_classes=[])
        if out_dir is not None:
            write_run_directory(report, out_dir)
        return report
    chosen, skipped = sample_correct_items(dataset, classifier, per_class, seed)

    def job(index: int) -> ItemOutcome:
        return _attack_item(dataset, classifier, settings, index, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            items = list(pool.map(job, chosen))
    else:
        items = [job(i) for i in chosen]
    items.sort(key=lambda item: item.dataset_index)
    report = BenchmarkReport(
        settings=settings, seed=seed, items=items, skipped_classes=skipped
    )
    if out_dir is not None:
        write_run_directory(report, out_dir)
    return report


def write_run_directory(report: BenchmarkReport, out_dir: Union[str, Path]) -> None:
    out = Path(out_dir)
    (out / "items").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps({"settings": report.settings.to_document(), "seed": report.seed}, indent=1)
    )
    (out / "report.json").write_text(json.dumps(report.to_document(), indent=1))
    (out / "report.txt").write_text(report.to_text() + "\n")
    (out / "timings.json").write_text(
        json.dumps(
            {str(item.dataset_index): item.seconds for item in report.items}, indent=1
        )
    )
    for item in report.items:
        png = to_png_bytes(item.result.adversarial)
        (out / "items" / f"item_{item.dataset_index:05d}_adv.png").write_bytes(png)


def run_linf_comparison(
    dataset: DatasetHandle,
    classifier: ClassifierSpec,
    seed: int,
    per_class: int = 10,
    settings: Optional[AttackSettings] = None,
    bisection: Optional[BisectionConfig] = BisectionConfig(),
    out_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
) -> dict:
    """Max-norm attacks with and without the bisection stage, shared seeds.

    Passing ``bisection=None`` disables the refinement pass, which then
    trivially reproduces the pure column.
    """
    if settings is None:
        settings = AttackSettings(norm=NormKind.LINF, **PRESET_COLOR, parameterization="per_pixel")
    pure = run_benchmark(dataset, classifier, settings, per_class, seed, workers=workers)
    refined_settings = AttackSettings(**{**settings.__dict__, "bisection": bisection})
    if bisection is None:
        refined_settings = settings
    refined = run_benchmark(
        dataset, classifier, refined_settings, per_class, seed, workers=workers
    )
    comparison = {
        "seed": seed,
        "per_class": {},
        "settings": settings.to_document(),
    }
    pure_table, refined_table = pure.per_class(), refined.per_class()
    for cls in sorted(pure_table):
        comparison["per_class"][str(cls)] = {
            "pure_linf_pct": pure_table[cls]["mean_linf_pct"],
            "bisection_linf_pct": refined_table[cls]["mean_linf_pct"],
        }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "linf_comparison.json").write_text(json.dumps(comparison, indent=1))
        write_run_directory(pure, out / "pure")
        write_run_directory(refined, out / "bisection")
    return comparison


def analyze_agreement(log_path: Union[str, Path]) -> dict:
    """Spread and L1-divergence statistics with a per-stimulus breakdown."""
    log = SelectionLog.load(log_path)
    epsilon = agreement_spread(log)
    has_l1 = all(s.l1_selection is not None for s in log.stimuli)
    e_div = agreement_vs_l1(log) if has_l1 else None
    per_stimulus = []
    for j, stim in enumerate(log.stimuli):
        single = SelectionLog(
            population_size=log.population_size,
            parent_count=log.parent_count,
            stimuli=[stim],
        )
        per_stimulus.append(
            {
                "stimulus": stim.label or str(j),
                "spread": agreement_spread(single),
                "l1_divergence": agreement_vs_l1(single) if has_l1 else None,
            }
        )
    return {
        "participants": len(log.stimuli[0].participant_selections),
        "stimuli": len(log.stimuli),
        "spread": epsilon,
        "l1_divergence": e_div,
        "per_stimulus": per_stimulus,
    }
