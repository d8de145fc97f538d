"""Covariance matrix adaptation evolution strategy.

The strategy keeps a multivariate normal search distribution
``N(mean, step_size^2 * covariance)`` and refines it from the top-K
candidates of each sampled generation.  Selection is externalized: the
caller supplies the chosen candidate indices, so the ranking can come
from a metric, a simulation, or a human.  The update never needs fitness
values, only the selected subset (and optionally its order).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

LOG_DECREASING = "log_decreasing"
UNIFORM_TOP_K = "uniform_top_k"

# Eigenvalues below EIGENVALUE_FLOOR_SCALE * trace(C)/n are clamped up;
# anything unrecoverable (non-finite, trace <= 0) aborts the run.
EIGENVALUE_FLOOR_SCALE = 1e-14


class DivergenceError(RuntimeError):
    """Covariance lost positive-definiteness beyond the repair tolerance."""


def expected_step_norm(dimension: int) -> float:
    """E||N(0, I_n)|| = sqrt(2) * Gamma((n+1)/2) / Gamma(n/2), via log-gamma."""
    if dimension < 1:
        raise ValueError(f"dimension must be >= 1, got {dimension}")
    half = dimension / 2.0
    return math.sqrt(2.0) * math.exp(math.lgamma(half + 0.5) - math.lgamma(half))


def default_weights(population_size: int, parent_count: int, weight_mode: str) -> np.ndarray:
    """Selection weights of length L: positive over the first K ranks, zero after.

    log_decreasing: w_s proportional to ln(K+1) - ln(s), normalized to sum 1.
    uniform_top_k:  w_s = 1/K for s <= K.
    """
    w = np.zeros(population_size)
    if weight_mode == LOG_DECREASING:
        raw = np.log(parent_count + 1.0) - np.log(np.arange(1, parent_count + 1))
        w[:parent_count] = raw / raw.sum()
    elif weight_mode == UNIFORM_TOP_K:
        w[:parent_count] = 1.0 / parent_count
    else:
        raise ValueError(f"unknown weight_mode {weight_mode!r}")
    return w


@dataclass
class StrategyConfig:
    """Hyperparameters of the search distribution update.

    All learning rates default to the canonical dimension-dependent
    recipe (see ``init_strategy``); every field can be overridden.
    """

    dimension: int
    population_size: int
    parent_count: int
    weights: np.ndarray
    learn_mean: float
    learn_rank_one: float
    learn_rank_k: float
    learn_path: float
    learn_step: float
    damping_step: float
    weight_mode: str = LOG_DECREASING
    diagonal_covariance: bool = False

    def validate(self) -> None:
        n, L, K = self.dimension, self.population_size, self.parent_count
        if n < 1:
            raise ValueError(f"dimension must be positive, got {n}")
        if L < 2:
            raise ValueError(f"population_size must be >= 2, got {L}")
        if not 1 <= K < L:
            raise ValueError(f"parent_count must satisfy 1 <= K < L, got K={K}, L={L}")
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (L,):
            raise ValueError(f"weights must have length L={L}, got shape {w.shape}")
        head = w[:K]
        if abs(head.sum() - 1.0) > 1e-12:
            raise ValueError(f"top-K weights must sum to 1, got {head.sum()!r}")
        if np.any(np.diff(head) > 0) or head[-1] <= 0.0:
            raise ValueError("top-K weights must be non-increasing and positive")
        if np.any(w[K:] > 0.0):
            raise ValueError("weights beyond rank K must be <= 0")
        if not 0.0 < self.learn_mean <= 1.0:
            raise ValueError(f"learn_mean must be in (0, 1], got {self.learn_mean}")
        if self.learn_rank_one < 0.0 or self.learn_rank_k < 0.0:
            raise ValueError("rank update learning rates must be >= 0")
        if self.learn_rank_one + self.learn_rank_k * w.sum() > 1.0 + 1e-12:
            raise ValueError("learn_rank_one + learn_rank_k * sum(weights) must be <= 1")
        if not 0.0 < self.learn_path <= 1.0:
            raise ValueError(f"learn_path must be in (0, 1], got {self.learn_path}")
        if not 0.0 < self.learn_step < 1.0:
            raise ValueError(f"learn_step must be in (0, 1), got {self.learn_step}")
        if self.damping_step <= 0.0:
            raise ValueError(f"damping_step must be positive, got {self.damping_step}")
        kappa = effective_kappa(self)
        if not 1.0 - 1e-9 <= kappa <= K + 1e-9:
            raise ValueError(f"effective kappa {kappa} outside [1, K]")


@dataclass
class StrategyState:
    """Current search distribution plus the two evolution paths.

    ``eig_values``/``eig_vectors`` cache the decomposition
    ``covariance = B diag(eig_values) B^T`` of the stored covariance;
    sampling and the conjugate-path update reuse it, so each update pays
    for exactly one eigendecomposition.
    """

    mean: np.ndarray
    covariance: np.ndarray
    step_size: float
    path_cov: np.ndarray
    path_step: np.ndarray
    generation: int
    chi_n: float
    eig_values: np.ndarray = field(repr=False, default=None)
    eig_vectors: np.ndarray = field(repr=False, default=None)

    def __post_init__(self) -> None:
        if self.eig_values is None or self.eig_vectors is None:
            vals, vecs = _decompose(self.covariance, diagonal=False)
            self.eig_values, self.eig_vectors = vals, vecs


@dataclass
class Population:
    """One generation of candidates; candidates[i] = mean + step_size * raw_steps[i]."""

    candidates: np.ndarray  # (L, n)
    raw_steps: np.ndarray   # (L, n)
    generation: int


@dataclass
class Selection:
    """Indices of the chosen candidates, best first when ``ordered``.

    With ``ordered=False`` the update is forced to uniform weights over
    the set, making it invariant to any permutation of the indices.
    """

    ranked_indices: Sequence[int]
    ordered: bool = True


def init_strategy(
    dimension: int,
    config_overrides: Optional[dict] = None,
    initial_mean: Optional[np.ndarray] = None,
    initial_step: float = 1.0,
) -> tuple[StrategyConfig, StrategyState]:
    """Build a config with defaults for every unset field and a fresh state.

    The state starts from the identity covariance, zero evolution paths
    and generation 0.  Default population size is 4 + floor(3 ln n) with
    K = L // 2; learning rates follow the canonical recipe in terms of
    kappa = 1 / sum(w_s^2).
    """
    if dimension < 1:
        raise ValueError(f"dimension must be positive, got {dimension}")
    if initial_step <= 0.0:
        raise ValueError(f"initial_step must be positive, got {initial_step}")
    overrides = dict(config_overrides or {})

    L = int(overrides.pop("population_size", 4 + int(3 * math.log(dimension))))
    K = int(overrides.pop("parent_count", max(1, L // 2)))
    mode = overrides.pop("weight_mode", LOG_DECREASING)
    weights = overrides.pop("weights", None)
    if weights is None:
        if not 1 <= K < L:
            raise ValueError(f"parent_count must satisfy 1 <= K < L, got K={K}, L={L}")
        weights = default_weights(L, K, mode)
    weights = np.asarray(weights, dtype=float)

    kappa = 1.0 / float(np.sum(weights[:K] ** 2))
    n = dimension
    c1 = 2.0 / ((n + 1.3) ** 2 + kappa)
    c2 = min(1.0 - c1, 2.0 * (kappa - 2.0 + 1.0 / kappa) / ((n + 2.0) ** 2 + kappa))
    c2 = max(c2, 0.0)
    c_step = (kappa + 2.0) / (n + kappa + 5.0)
    defaults = dict(
        dimension=n,
        population_size=L,
        parent_count=K,
        weights=weights,
        learn_mean=1.0,
        learn_rank_one=c1,
        learn_rank_k=c2,
        learn_path=4.0 / (n + 4.0),
        learn_step=c_step,
        damping_step=1.0 + 2.0 * max(0.0, math.sqrt((kappa - 1.0) / (n + 1.0)) - 1.0) + c_step,
        weight_mode=mode,
        diagonal_covariance=False,
    )
    defaults.update(overrides)
    config = StrategyConfig(**defaults)
    config.validate()

    if initial_mean is None:
        initial_mean = np.zeros(n)
    initial_mean = np.asarray(initial_mean, dtype=float)
    if initial_mean.shape != (n,):
        raise ValueError(f"initial_mean must have shape ({n},), got {initial_mean.shape}")

    state = StrategyState(
        mean=initial_mean.copy(),
        covariance=np.eye(n),
        step_size=float(initial_step),
        path_cov=np.zeros(n),
        path_step=np.zeros(n),
        generation=0,
        chi_n=expected_step_norm(n),
        eig_values=np.ones(n),
        eig_vectors=np.eye(n),
    )
    return config, state


def effective_kappa(config: StrategyConfig) -> float:
    """kappa = 1 / sum over the top-K weights squared."""
    head = np.asarray(config.weights, dtype=float)[: config.parent_count]
    return 1.0 / float(np.sum(head**2))


def sample_population(state: StrategyState, config: StrategyConfig, rng_seed: int) -> Population:
    """Draw L candidates ``mean + step_size * z`` with ``z ~ N(0, covariance)``.

    z is formed as B D u from the cached decomposition C = B D^2 B^T with
    u standard normal, so a fixed seed gives a fixed population.
    """
    if not np.all(np.isfinite(state.covariance)):
        raise DivergenceError("covariance contains non-finite entries")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rng_seed)))
    L, n = config.population_size, config.dimension
    u = rng.standard_normal((L, n))
    scale = np.sqrt(np.maximum(state.eig_values, 0.0))
    steps = (u * scale) @ state.eig_vectors.T
    candidates = state.mean + state.step_size * steps
    return Population(candidates=candidates, raw_steps=steps, generation=state.generation + 1)


def update_strategy(
    state: StrategyState,
    config: StrategyConfig,
    population: Population,
    selection: Selection,
) -> StrategyState:
    """One full distribution update from the selected candidates.

    Applies, in order: mean recombination over the selection, evolution
    path accumulation, conjugate path accumulation (using C^{-1/2} of the
    pre-update covariance), the rank-one plus rank-K covariance update,
    and the step size adaptation against the expected step norm.
    """
    idx = np.asarray(list(selection.ranked_indices), dtype=int)
    if idx.size == 0:
        raise ValueError("selection must contain at least one index")
    L = config.population_size
    if np.any(idx < 0) or np.any(idx >= L):
        raise ValueError(f"selection indices must lie in [0, {L})")
    if len(set(idx.tolist())) != idx.size:
        raise ValueError("selection indices must be distinct")
    if idx.size > config.parent_count:
        raise ValueError(
            f"selection has {idx.size} indices, more than parent_count {config.parent_count}"
        )
    if population.generation != state.generation + 1:
        raise ValueError(
            f"population generation {population.generation} does not follow "
            f"state generation {state.generation}"
        )

    uniform = (not selection.ordered) or config.weight_mode == UNIFORM_TOP_K
    if uniform:
        # Canonical index order makes the update bitwise permutation-invariant.
        idx = np.sort(idx)
        weights = np.full(idx.size, 1.0 / idx.size)
    else:
        head = np.asarray(config.weights, dtype=float)[: idx.size]
        weights = head / head.sum()
    kappa = 1.0 / float(np.sum(weights**2))

    xs = population.candidates[idx]
    zs = population.raw_steps[idx]
    mean_old = state.mean
    gamma = state.step_size

    mean_new = mean_old + config.learn_mean * np.sum(
        weights[:, None] * (xs - mean_old), axis=0
    )
    displacement = (mean_new - mean_old) / gamma

    c3 = config.learn_path
    path_cov_new = (1.0 - c3) * state.path_cov + math.sqrt(c3 * (2.0 - c3) * kappa) * displacement

    # C^{-1/2} v = B D^{-1} B^T v, from the decomposition of the previous covariance.
    c_step = config.learn_step
    rotated = state.eig_vectors.T @ displacement
    whitened = state.eig_vectors @ (rotated / np.sqrt(state.eig_values))
    path_step_new = (1.0 - c_step) * state.path_step + math.sqrt(
        c_step * (2.0 - c_step) * kappa
    ) * whitened

    c1, c2 = config.learn_rank_one, config.learn_rank_k
    base = 1.0 - c1 - c2 * float(weights.sum())
    if config.diagonal_covariance:
        diag = (
            base * np.diag(state.covariance)
            + c1 * path_cov_new**2
            + c2 * np.sum(weights[:, None] * zs**2, axis=0)
        )
        cov_new = np.diag(diag)
    else:
        cov_new = (
            base * state.covariance
            + c1 * np.outer(path_cov_new, path_cov_new)
            + c2 * (zs.T * weights) @ zs
        )
    cov_new, vals, vecs = _repair_covariance(cov_new, diagonal=config.diagonal_covariance)

    step_new = gamma * math.exp(
        (c_step / config.damping_step)
        * (float(np.linalg.norm(path_step_new)) / state.chi_n - 1.0)
    )

    return StrategyState(
        mean=mean_new,
        covariance=cov_new,
        step_size=step_new,
        path_cov=path_cov_new,
        path_step=path_step_new,
        generation=state.generation + 1,
        chi_n=state.chi_n,
        eig_values=vals,
        eig_vectors=vecs,
    )


def _decompose(covariance: np.ndarray, diagonal: bool) -> tuple[np.ndarray, np.ndarray]:
    if diagonal:
        return np.diag(covariance).copy(), np.eye(covariance.shape[0])
    vals, vecs = np.linalg.eigh(covariance)
    return vals, vecs


def _repair_covariance(
    cov: np.ndarray, diagonal: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetrize and clamp tiny eigenvalues; raise once drift is unrecoverable."""
    if not np.all(np.isfinite(cov)):
        raise DivergenceError("covariance update produced non-finite entries")
    cov = (cov + cov.T) / 2.0
    n = cov.shape[0]
    trace = float(np.trace(cov))
    if trace <= 0.0:
        raise DivergenceError(f"covariance trace collapsed to {trace}")
    floor = EIGENVALUE_FLOOR_SCALE * trace / n
    vals, vecs = _decompose(cov, diagonal)
    if np.min(vals) < floor:
        vals = np.maximum(vals, floor)
        cov = (vecs * vals) @ vecs.T
        cov = (cov + cov.T) / 2.0
    return cov, vals, vecs


def minimize(
    objective: Callable[[np.ndarray], float],
    initial_mean: np.ndarray,
    initial_step: float,
    generations: int,
    seed: int = 0,
    config_overrides: Optional[dict] = None,
) -> tuple[np.ndarray, float, list[float]]:
    """Plain metric-ranked minimization loop, mostly for sanity checks.

    Returns the best point seen, its objective value, and the
    per-generation best-value trace.
    """
    initial_mean = np.asarray(initial_mean, dtype=float)
    config, state = init_strategy(
        initial_mean.size, config_overrides, initial_mean, initial_step
    )
    best_x, best_f = initial_mean.copy(), float(objective(initial_mean))
    trace: list[float] = []
    seeds = np.random.SeedSequence(seed).generate_state(generations, dtype=np.uint64)
    for g in range(generations):
        population = sample_population(state, config, int(seeds[g]))
        values = np.array([objective(x) for x in population.candidates])
        order = np.argsort(values, kind="stable")
        if values[order[0]] < best_f:
            best_f = float(values[order[0]])
            best_x = population.candidates[order[0]].copy()
        chosen = order[: config.parent_count]
        state = update_strategy(state, config, population, Selection(chosen, ordered=True))
        trace.append(best_f)
    return best_x, best_f, trace
