"""Attack orchestration: sample, decode, classify, select, update.

One attack session is a strictly sequential loop over generations.  The
engine exposes each generation as a selection request so the choice of
top-K candidates can come from a metric, a simulated observer, or a
human on the other side of the session service; ``run_attack`` wraps the
loop for synchronous oracles.  A bisection stage can then walk the found
point coordinate-wise back toward the reference, shrinking the largest
perturbation while re-checking misclassification after every move.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from percepta.classifiers import ClassifierSpec, QueryLedger, classify_batch
from percepta.cma import (
    Population,
    Selection,
    StrategyConfig,
    StrategyState,
    init_strategy,
    sample_population,
    update_strategy,
)
from percepta.fitness import NormKind, PenaltyParams, average_perturbation, norm_distance
from percepta.selection import (
    CandidateView,
    DarkeningOracle,
    MetricOracle,
    SelectionRequest,
    SelectionResponse,
    validate_response,
)

PER_PIXEL = "per_pixel"
COLOR_DARKENING = "color_darkening"

# per-pixel 0.22 calibrated on the bundled digit fixtures: large enough
# to cross typical decision boundaries, small enough that first hits
# land near them with only a few parents per generation
DEFAULT_STEP = {PER_PIXEL: 0.22, COLOR_DARKENING: 0.25}


class ReferenceLabelError(ValueError):
    """The classifier does not agree with the declared reference label."""


class OracleAborted(RuntimeError):
    """The selection oracle gave up (for a human: closed the session)."""


@dataclass
class AttackProblem:
    """Reference input, black-box classifier, and the perturbation space."""

    reference: np.ndarray          # (channels, height, width) in [0, 1]
    reference_label: int
    classifier: ClassifierSpec
    target_label: Optional[int] = None
    parameterization: str = PER_PIXEL
    iterations: int = 180
    strategy_overrides: Optional[dict] = None
    luminance_only: bool = False   # per-pixel: one shared value per spatial pixel

    def __post_init__(self) -> None:
        self.reference = np.asarray(self.reference, dtype=float)

    def validate(self) -> None:
        if self.reference.ndim != 3:
            raise ValueError(
                f"reference must be (channels, height, width), got {self.reference.shape}"
            )
        if not np.all(np.isfinite(self.reference)):
            raise ValueError("reference contains non-finite values")
        if self.reference.min() < 0.0 or self.reference.max() > 1.0:
            raise ValueError("reference pixels must lie in [0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.parameterization not in (PER_PIXEL, COLOR_DARKENING):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.parameterization == COLOR_DARKENING and self.reference.shape[0] != 3:
            raise ValueError("color darkening needs a 3-channel reference")
        if self.target_label is not None and self.target_label == self.reference_label:
            raise ValueError("target label must differ from the reference label")

    def search_dimension(self) -> int:
        if self.parameterization == COLOR_DARKENING:
            return 3
        if self.luminance_only:
            return self.reference.shape[1] * self.reference.shape[2]
        return self.reference.size

    def initial_mean(self) -> np.ndarray:
        if self.parameterization == COLOR_DARKENING:
            return np.ones(3)
        return np.zeros(self.search_dimension())

    def goal_met(self, label: int) -> bool:
        if self.target_label is not None:
            return label == self.target_label
        return label != self.reference_label


@dataclass
class BisectionConfig:
    max_steps: int = 200
    min_interval: float = 1.0 / 255.0

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if not 0.0 < self.min_interval < 1.0:
            raise ValueError("min_interval must lie in (0, 1)")


@dataclass
class Distances:
    l1: float
    l2: float
    linf: float
    average_perturbation: float


@dataclass
class AttackResult:
    adversarial: np.ndarray
    adversarial_label: int
    success: bool
    distances: Distances
    generations_used: int
    queries_used: int
    bisection_applied: bool
    history: list[float]

    def to_document(self) -> dict:
        return {
            "adversarial_label": self.adversarial_label,
            "success": self.success,
            "l1": self.distances.l1,
            "l2": self.distances.l2,
            "linf": self.distances.linf,
            "average_perturbation": self.distances.average_perturbation,
            "generations_used": self.generations_used,
            "queries_used": self.queries_used,
            "bisection_applied": self.bisection_applied,
            "history": self.history,
        }


def decode_candidate(problem: AttackProblem, search_point: np.ndarray) -> np.ndarray:
    """Map a raw search point to a feasible image.

    Clamping happens only here; the strategy itself lives in unclamped
    search space so the distribution update stays unbiased.
    """
    point = np.asarray(search_point, dtype=float).ravel()
    expected = problem.search_dimension()
    if point.size != expected:
        raise ValueError(f"search point has length {point.size}, expected {expected}")
    ref = problem.reference
    if problem.parameterization == COLOR_DARKENING:
        betas = np.clip(point, 0.0, 1.0)
        return ref * betas[:, None, None]
    if problem.luminance_only:
        perturbation = point.reshape(1, ref.shape[1], ref.shape[2])
    else:
        perturbation = point.reshape(ref.shape)
    return np.clip(ref + perturbation, 0.0, 1.0)


def measure_distances(problem: AttackProblem, adversarial: np.ndarray) -> Distances:
    ref = problem.reference
    return Distances(
        l1=norm_distance(NormKind.L1, adversarial, ref),
        l2=norm_distance(NormKind.L2, adversarial, ref),
        linf=norm_distance(NormKind.LINF, adversarial, ref),
        average_perturbation=average_perturbation(adversarial, ref),
    )


@dataclass
class _PendingGeneration:
    population: Population
    images: np.ndarray        # (L, channels, height, width)
    labels: list[int]
    selectable: list[bool]


@dataclass
class _Best:
    fitness: float
    image: np.ndarray
    label: int


class AttackEngine:
    """Stepwise attack driver; one instance per session.

    The loop is: ``awaiting_request()`` samples and classifies the next
    generation (skipping over generations with nothing selectable via
    the internal metric fallback), ``submit()`` feeds a selection back,
    ``result()`` finalizes once all generations ran.  Everything is
    deterministic given the seed and the submitted selections.
    """

    def __init__(
        self,
        problem: AttackProblem,
        bisection: Optional[BisectionConfig] = None,
        rng_seed: int = 0,
        fitness_kind: NormKind = NormKind.L1,
        penalty: PenaltyParams = PenaltyParams(),
        query_budget: Optional[int] = None,
        ledger: Optional[QueryLedger] = None,
        session_id: str = "local",
        verify_reference: bool = True,
        initial_step: Optional[float] = None,
    ):
        problem.validate()
        self.problem = problem
        self.bisection = bisection
        self.rng_seed = int(rng_seed)
        self.fitness_kind = fitness_kind
        self.penalty = penalty
        self.query_budget = query_budget
        self.ledger = ledger if ledger is not None else QueryLedger()
        self.session_id = session_id

        self._queries_at_start = self.ledger.total_queries
        if verify_reference:
            observed = classify_batch(
                problem.classifier, [problem.reference.ravel()], self.ledger
            )[0]
            if observed != problem.reference_label:
                raise ReferenceLabelError(
                    f"classifier labels the reference {observed}, "
                    f"not the declared {problem.reference_label}; "
                    "attacks start from correctly classified inputs"
                )

        if initial_step is None:
            initial_step = DEFAULT_STEP[problem.parameterization]
        self.initial_step = float(initial_step)
        self.config, self.state = init_strategy(
            problem.search_dimension(),
            problem.strategy_overrides,
            problem.initial_mean(),
            self.initial_step,
        )
        self.generation = 0                  # completed updates
        self.pending: Optional[_PendingGeneration] = None
        self.best: Optional[_Best] = None
        self.history: list[float] = []
        self.final_pick_image: Optional[np.ndarray] = None
        self.fallback_generations: list[int] = []
        self.finished = problem.iterations == 0
        self._result: Optional[AttackResult] = None

    # -- stepping ---------------------------------------------------------

    def _seed_for(self, generation: int) -> int:
        return int(
            np.random.SeedSequence([self.rng_seed, generation]).generate_state(
                1, dtype=np.uint64
            )[0]
        )

    def _budget_left(self) -> Optional[int]:
        if self.query_budget is None:
            return None
        return self.query_budget - (self.ledger.total_queries - self._queries_at_start)

    def _candidate_fitness(self, point: np.ndarray, image: np.ndarray, met: bool) -> float:
        if self.problem.parameterization == COLOR_DARKENING:
            if met:
                return float(3.0 - np.clip(point, 0.0, 1.0).sum())
            return self.penalty.m_color
        d = norm_distance(self.fitness_kind, image, self.problem.reference)
        return d if met else self.penalty.m1 + self.penalty.m2 * d

    def _sample_generation(self) -> None:
        left = self._budget_left()
        if left is not None and left < self.config.population_size:
            self.finished = True
            return
        population = sample_population(
            self.state, self.config, self._seed_for(self.generation)
        )
        # candidates are judged as the 8-bit images a viewer (or a stored
        # PNG) would see, so recorded successes re-verify exactly
        images = np.rint(
            np.stack([decode_candidate(self.problem, p) for p in population.candidates])
            * 255.0
        ) / 255.0
        labels = classify_batch(
            self.problem.classifier,
            [img.ravel() for img in images],
            self.ledger,
            generation=self.generation,
        )
        selectable = [self.problem.goal_met(lab) for lab in labels]

        gen_best = np.inf
        for point, image, label, met in zip(
            population.candidates, images, labels, selectable
        ):
            f = self._candidate_fitness(point, image, met)
            gen_best = min(gen_best, f)
            if met and (self.best is None or f < self.best.fitness):
                self.best = _Best(fitness=f, image=image.copy(), label=label)
        self.history.append(float(gen_best))
        self.pending = _PendingGeneration(population, images, labels, selectable)

    def _build_request(self) -> SelectionRequest:
        assert self.pending is not None
        return SelectionRequest(
            session_id=self.session_id,
            generation=self.generation + 1,
            reference_image=self.problem.reference,
            candidates=[
                CandidateView(index=i, image=img, selectable=sel)
                for i, (img, sel) in enumerate(
                    zip(self.pending.images, self.pending.selectable)
                )
            ],
            k_required=self.config.parent_count,
            search_points=self.pending.population.candidates,
        )

    def _fallback_selection(self) -> Selection:
        # nothing selectable: rank everything by the penalized L1 distance
        # so the search keeps moving instead of stalling the oracle
        distances = [
            norm_distance(NormKind.L1, img, self.problem.reference)
            for img in self.pending.images
        ]
        order = sorted(range(len(distances)), key=lambda i: (distances[i], i))
        self.fallback_generations.append(self.generation)
        return Selection(order[: self.config.parent_count], ordered=True)

    def _apply_selection(self, selection: Selection) -> None:
        self.state = update_strategy(
            self.state, self.config, self.pending.population, selection
        )
        self.pending = None
        self.generation += 1
        if self.generation >= self.problem.iterations:
            self.finished = True

    def awaiting_request(self) -> Optional[SelectionRequest]:
        """The next selection request, or None once the run is over."""
        while not self.finished:
            if self.pending is None:
                self._sample_generation()
                continue
            if any(self.pending.selectable):
                return self._build_request()
            self._apply_selection(self._fallback_selection())
        return None

    def submit(self, response: SelectionResponse, ranked: bool = True) -> None:
        if self.pending is None:
            raise RuntimeError("no generation is awaiting a selection")
        validate_response(self._build_request(), response)
        if response.final_pick is not None:
            self.final_pick_image = self.pending.images[response.final_pick].copy()
        self._apply_selection(Selection(response.chosen, ordered=ranked))

    # -- finalization -----------------------------------------------------

    def result(self) -> AttackResult:
        if not self.finished:
            raise RuntimeError("attack still has generations left")
        if self._result is not None:
            return self._result

        if self.final_pick_image is not None:
            adversarial = self.final_pick_image
        elif self.best is not None:
            adversarial = self.best.image
        else:
            adversarial = self.problem.reference.copy()

        label = classify_batch(
            self.problem.classifier, [adversarial.ravel()], self.ledger
        )[0]
        success = self.problem.goal_met(label)

        bisection_applied = False
        if success and self.bisection is not None:
            refined = bisection_refine(
                self.problem,
                adversarial,
                self.bisection,
                ledger=self.ledger,
                budget_left=self._budget_left(),
            )
            bisection_applied = True
            if not np.array_equal(refined, adversarial):
                adversarial = refined
                label = classify_batch(
                    self.problem.classifier, [adversarial.ravel()], self.ledger
                )[0]
                success = self.problem.goal_met(label)

        self._result = AttackResult(
            adversarial=adversarial,
            adversarial_label=label,
            success=success,
            distances=measure_distances(self.problem, adversarial),
            generations_used=self.generation,
            queries_used=self.ledger.total_queries - self._queries_at_start,
            bisection_applied=bisection_applied,
            history=list(self.history),
        )
        return self._result

    # -- persistence ------------------------------------------------------

    def snapshot(self) -> tuple[dict, dict]:
        """(scalar metadata, numpy arrays) capturing the full engine state."""
        meta = {
            "rng_seed": self.rng_seed,
            "initial_step": self.initial_step,
            "generation": self.generation,
            "finished": self.finished,
            "history": self.history,
            "fallback_generations": self.fallback_generations,
            "fitness_kind": self.fitness_kind.value,
            "query_budget": self.query_budget,
            "queries_total": self.ledger.total_queries,
            "queries_per_generation": self.ledger.per_generation,
            "queries_at_start": self._queries_at_start,
            "step_size": self.state.step_size,
            "chi_n": self.state.chi_n,
            "state_generation": self.state.generation,
            "has_pending": self.pending is not None,
            "pending_labels": self.pending.labels if self.pending else None,
            "pending_selectable": self.pending.selectable if self.pending else None,
            "pending_generation": self.pending.population.generation if self.pending else None,
            "best_fitness": self.best.fitness if self.best else None,
            "best_label": self.best.label if self.best else None,
        }
        arrays = {
            "mean": self.state.mean,
            "covariance": self.state.covariance,
            "path_cov": self.state.path_cov,
            "path_step": self.state.path_step,
            "eig_values": self.state.eig_values,
            "eig_vectors": self.state.eig_vectors,
        }
        if self.pending is not None:
            arrays["pending_candidates"] = self.pending.population.candidates
            arrays["pending_raw_steps"] = self.pending.population.raw_steps
            arrays["pending_images"] = self.pending.images
        if self.best is not None:
            arrays["best_image"] = self.best.image
        if self.final_pick_image is not None:
            arrays["final_pick_image"] = self.final_pick_image
        return meta, arrays

    @classmethod
    def restore(
        cls,
        problem: AttackProblem,
        meta: dict,
        arrays: dict,
        bisection: Optional[BisectionConfig] = None,
        penalty: PenaltyParams = PenaltyParams(),
        session_id: str = "local",
    ) -> "AttackEngine":
        engine = cls(
            problem,
            bisection=bisection,
            rng_seed=meta["rng_seed"],
            fitness_kind=NormKind(meta["fitness_kind"]),
            penalty=penalty,
            query_budget=meta.get("query_budget"),
            session_id=session_id,
            verify_reference=False,
            initial_step=meta.get("initial_step"),
        )
        engine.state = StrategyState(
            mean=arrays["mean"],
            covariance=arrays["covariance"],
            step_size=meta["step_size"],
            path_cov=arrays["path_cov"],
            path_step=arrays["path_step"],
            generation=meta["state_generation"],
            chi_n=meta["chi_n"],
            eig_values=arrays["eig_values"],
            eig_vectors=arrays["eig_vectors"],
        )
        engine.generation = meta["generation"]
        engine.finished = meta["finished"]
        engine.history = list(meta["history"])
        engine.fallback_generations = list(meta["fallback_generations"])
        engine.ledger.total_queries = meta["queries_total"]
        engine.ledger.per_generation = list(meta["queries_per_generation"])
        engine._queries_at_start = meta["queries_at_start"]
        if meta["has_pending"]:
            engine.pending = _PendingGeneration(
                population=Population(
                    candidates=arrays["pending_candidates"],
                    raw_steps=arrays["pending_raw_steps"],
                    generation=meta["pending_generation"],
                ),
                images=arrays["pending_images"],
                labels=list(meta["pending_labels"]),
                selectable=list(meta["pending_selectable"]),
            )
        if meta["best_fitness"] is not None:
            engine.best = _Best(
                fitness=meta["best_fitness"],
                image=arrays["best_image"],
                label=meta["best_label"],
            )
        if "final_pick_image" in arrays:
            engine.final_pick_image = arrays["final_pick_image"]
        return engine


def run_attack(
    problem: AttackProblem,
    oracle=None,
    bisection: Optional[BisectionConfig] = None,
    rng_seed: int = 0,
    fitness_kind: NormKind = NormKind.L1,
    penalty: PenaltyParams = PenaltyParams(),
    query_budget: Optional[int] = None,
    ledger: Optional[QueryLedger] = None,
    initial_step: Optional[float] = None,
) -> AttackResult:
    """Run the full loop with a synchronous selection oracle."""
    if oracle is None:
        if problem.parameterization == COLOR_DARKENING:
            oracle = DarkeningOracle()
        else:
            oracle = MetricOracle(kind=fitness_kind, params=penalty)
    engine = AttackEngine(
        problem,
        bisection=bisection,
        rng_seed=rng_seed,
        fitness_kind=fitness_kind,
        penalty=penalty,
        query_budget=query_budget,
        ledger=ledger,
        initial_step=initial_step,
    )
    while (request := engine.awaiting_request()) is not None:
        response = oracle.select(request)
        if not response.chosen:
            raise OracleAborted("selection oracle returned no choice")
        engine.submit(response, ranked=oracle.ranked)
    return engine.result()


def bisection_refine(
    problem: AttackProblem,
    start: np.ndarray,
    config: BisectionConfig,
    ledger: Optional[QueryLedger] = None,
    budget_left: Optional[int] = None,
) -> np.ndarray:
    """Shrink the largest coordinate gaps toward the reference.

    Up to ``max_steps`` times: pick the unfrozen coordinate farthest from
    the reference (lowest index on ties) and binary-search it between the
    reference value and the current value.  A midpoint that stays
    misclassified becomes the new current value; one that does not raises
    the inner bracket end instead.  The coordinate freezes once its
    bracket is narrower than ``min_interval``.  The result is always
    misclassified and never farther from the reference, in any
    coordinate and hence in the max norm, than the start.
    """
    start = np.asarray(start, dtype=float)
    reference = problem.reference
    if start.shape != reference.shape:
        raise ValueError(f"start shape {start.shape} != reference {reference.shape}")

    queries_left = [budget_left if budget_left is not None else None]

    def misclassified(img: np.ndarray) -> bool:
        if queries_left[0] is not None:
            queries_left[0] -= 1
        label = classify_batch(problem.classifier, [img.ravel()], ledger)[0]
        return problem.goal_met(label)

    def budget_spent() -> bool:
        return queries_left[0] is not None and queries_left[0] <= 0

    if not misclassified(start):
        raise ValueError("bisection must start from a misclassified input")

    current = start.ravel().copy()
    ref = reference.ravel()
    frozen = np.abs(current - ref) <= config.min_interval

    for _ in range(config.max_steps):
        if frozen.all() or budget_spent():
            break
        gaps = np.where(frozen, -np.inf, np.abs(current - ref))
        i = int(np.argmax(gaps))
        low = ref[i]  # bracket end nearest the reference
        while abs(current[i] - low) > config.min_interval and not budget_spent():
            # midpoints snap to the interval grid so tested points equal
            # what an 8-bit artifact of them would hold
            mid = np.rint((low + current[i]) / 2.0 / config.min_interval) * config.min_interval
            if mid == current[i] or mid == low:
                mid = (low + current[i]) / 2.0
            trial = current.copy()
            trial[i] = mid
            if misclassified(trial.reshape(reference.shape)):
                current = trial
            else:
                low = mid
        frozen[i] = True

    return current.reshape(reference.shape)
