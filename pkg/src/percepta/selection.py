"""Top-K candidate selection: the pluggable ranking boundary.

A selection request carries one generation's candidates with a
selectable flag (false exactly when the candidate still classifies like
the reference).  Oracles answer with up to K chosen indices: the metric
oracle ranks by penalized distance, the simulated observer by a hidden
weighted distance, and a live human answers through the session service.
This module also computes the agreement statistics over recorded
selection logs: the spread of choices across participants and their
divergence from the plain L1 ranking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import numpy as np

from percepta.fitness import NormKind, PenaltyParams, norm_distance


@dataclass
class CandidateView:
    index: int
    image: np.ndarray
    selectable: bool


@dataclass
class SelectionRequest:
    session_id: str
    generation: int
    reference_image: np.ndarray
    candidates: list[CandidateView]
    k_required: int
    # raw search-space points, populated by the attack engine for oracles
    # that rank in search space; never serialized for human display
    search_points: Optional[np.ndarray] = None

    def selectable_indices(self) -> list[int]:
        return [c.index for c in self.candidates if c.selectable]


@dataclass
class SelectionResponse:
    chosen: list[int]
    final_pick: Optional[int] = None


def validate_response(request: SelectionRequest, response: SelectionResponse) -> None:
    selectable = set(request.selectable_indices())
    if not response.chosen:
        raise ValueError("selection must contain at least one index")
    if len(set(response.chosen)) != len(response.chosen):
        raise ValueError("selection indices must be distinct")
    if len(response.chosen) > request.k_required:
        raise ValueError(
            f"selection has {len(response.chosen)} indices, limit is {request.k_required}"
        )
    bad = [i for i in response.chosen if i not in selectable]
    if bad:
        raise ValueError(f"indices {bad} are not selectable in this generation")
    if response.final_pick is not None and response.final_pick not in selectable:
        raise ValueError(f"final pick {response.final_pick} is not selectable")


def metric_ranking(
    request: SelectionRequest, kind: NormKind, params: PenaltyParams
) -> list[int]:
    """All candidate indices ordered by penalized distance, ties by index."""
    scored = []
    for cand in request.candidates:
        d = norm_distance(kind, cand.image, request.reference_image)
        fitness = d if cand.selectable else params.m1 + params.m2 * d
        scored.append((fitness, cand.index))
    scored.sort()
    return [index for _, index in scored]


def metric_select(
    request: SelectionRequest,
    kind: NormKind = NormKind.L1,
    params: PenaltyParams = PenaltyParams(),
) -> SelectionResponse:
    """Top-K of the penalized ranking, bounded by how many are selectable."""
    selectable = set(request.selectable_indices())
    ranked = [i for i in metric_ranking(request, kind, params) if i in selectable]
    return SelectionResponse(chosen=ranked[: request.k_required])


def simulated_human_select(
    request: SelectionRequest, hidden_weights: np.ndarray
) -> SelectionResponse:
    """Rank selectable candidates by a hidden per-pixel weighted L1 distance."""
    hidden_weights = np.asarray(hidden_weights, dtype=float)
    if hidden_weights.shape != request.reference_image.shape:
        raise ValueError(
            f"weight map shape {hidden_weights.shape} does not match image shape "
            f"{request.reference_image.shape}"
        )
    scored = []
    for cand in request.candidates:
        if not cand.selectable:
            continue
        d = float(np.sum(hidden_weights * np.abs(cand.image - request.reference_image)))
        scored.append((d, cand.index))
    scored.sort()
    return SelectionResponse(chosen=[index for _, index in scored[: request.k_required]])


class SelectionOracle(Protocol):
    ranked: bool

    def select(self, request: SelectionRequest) -> SelectionResponse: ...


class MetricOracle:
    """Automated oracle ranking by penalized Lp distance; order is meaningful."""

    ranked = True

    def __init__(self, kind: NormKind = NormKind.L1, params: PenaltyParams = PenaltyParams()):
        self.kind = kind
        self.params = params

    def select(self, request: SelectionRequest) -> SelectionResponse:
        return metric_select(request, self.kind, self.params)


class DarkeningOracle:
    """Ranks selectable candidates by total darkening of their channel factors."""

    ranked = True

    def select(self, request: SelectionRequest) -> SelectionResponse:
        if request.search_points is None:
            raise ValueError("request carries no search points to rank")
        scored = []
        for cand in request.candidates:
            if not cand.selectable:
                continue
            betas = np.clip(request.search_points[cand.index], 0.0, 1.0)
            scored.append((float(3.0 - betas.sum()), cand.index))
        scored.sort()
        return SelectionResponse(
            chosen=[index for _, index in scored[: request.k_required]]
        )


class SimulatedHumanOracle:
    """Deterministic observer with a hidden spatial weighting; order-free."""

    ranked = False

    def __init__(self, hidden_weights: np.ndarray):
        self.hidden_weights = np.asarray(hidden_weights, dtype=float)

    def select(self, request: SelectionRequest) -> SelectionResponse:
        return simulated_human_select(request, self.hidden_weights)


@dataclass
class StimulusRecord:
    """All selections gathered for one stimulus (one candidate screen)."""

    participant_selections: list[list[int]]
    l1_selection: Optional[list[int]] = None
    label: str = ""


@dataclass
class SelectionLog:
    """Study log: n_e stimuli, each selected from by the same n_p participants."""

    population_size: int
    parent_count: int
    stimuli: list[StimulusRecord] = field(default_factory=list)

    def validate(self, require_l1: bool = False) -> None:
        if not self.stimuli:
            raise ValueError("selection log is empty")
        n_p = len(self.stimuli[0].participant_selections)
        if n_p == 0:
            raise ValueError("selection log has no participants")
        for j, stim in enumerate(self.stimuli):
            if len(stim.participant_selections) != n_p:
                raise ValueError(
                    f"stimulus {j} has {len(stim.participant_selections)} participants, "
                    f"expected {n_p}"
                )
            rows = list(stim.participant_selections)
            if require_l1:
                if stim.l1_selection is None:
                    raise ValueError(f"stimulus {j} is missing its L1 selection")
                rows.append(stim.l1_selection)
            for row in rows:
                if len(set(row)) != self.parent_count:
                    raise ValueError(
                        f"stimulus {j}: selection {row} does not contain exactly "
                        f"{self.parent_count} distinct indices"
                    )
                if any(not 0 <= i < self.population_size for i in row):
                    raise ValueError(f"stimulus {j}: index out of range in {row}")

    def to_document(self) -> dict:
        return {
            "population_size": self.population_size,
            "parent_count": self.parent_count,
            "stimuli": [
                {
                    "label": s.label,
                    "l1_selection": s.l1_selection,
                    "participant_selections": s.participant_selections,
                }
                for s in self.stimuli
            ],
        }

    @classmethod
    def from_document(cls, doc: dict) -> "SelectionLog":
        return cls(
            population_size=int(doc["population_size"]),
            parent_count=int(doc["parent_count"]),
            stimuli=[
                StimulusRecord(
                    participant_selections=[list(map(int, row)) for row in s["participant_selections"]],
                    l1_selection=None
                    if s.get("l1_selection") is None
                    else list(map(int, s["l1_selection"])),
                    label=str(s.get("label", "")),
                )
                for s in doc["stimuli"]
            ],
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_document(), indent=1))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SelectionLog":
        return cls.from_document(json.loads(Path(path).read_text()))


def _indicator(indices: Sequence[int], length: int) -> np.ndarray:
    h = np.zeros(length)
    h[list(indices)] = 1.0
    return h


def _mean_vectors(log: SelectionLog) -> np.ndarray:
    return np.array(
        [
            np.mean(
                [_indicator(row, log.population_size) for row in s.participant_selections],
                axis=0,
            )
            for s in log.stimuli
        ]
    )


def agreement_spread(log: SelectionLog) -> float:
    """Average halved L1 gap between each participant and the participant mean.

    Zero when everyone picks identically; the division by two counts each
    swapped choice once, since the indicator vectors are complementary
    wherever they differ.
    """
    log.validate()
    means = _mean_vectors(log)
    n_p = len(log.stimuli[0].participant_selections)
    total = 0.0
    for j, stim in enumerate(log.stimuli):
        for row in stim.participant_selections:
            total += float(
                np.abs(_indicator(row, log.population_size) - means[j]).sum()
            ) / 2.0
    return total / (n_p * len(log.stimuli))


def agreement_vs_l1(log: SelectionLog) -> float:
    """Average halved L1 gap between the metric selection and the participant mean."""
    log.validate(require_l1=True)
    means = _mean_vectors(log)
    total = 0.0
    for j, stim in enumerate(log.stimuli):
        total += float(
            np.abs(_indicator(stim.l1_selection, log.population_size) - means[j]).sum()
        ) / 2.0
    return total / len(log.stimuli)
