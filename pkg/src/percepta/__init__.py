"""Black-box adversarial example toolkit.

CMA-ES search over image perturbations, driven by an interchangeable
top-K selection oracle: an automated Lp ranking, a simulated observer,
or a live human behind the session service.
"""

from percepta.attack import (
    AttackEngine,
    AttackProblem,
    AttackResult,
    BisectionConfig,
    bisection_refine,
    decode_candidate,
    run_attack,
)
from percepta.classifiers import (
    LinearSpec,
    MlpSpec,
    QueryLedger,
    RemoteSpec,
    classify_batch,
    load_weights,
    save_weights,
)
from percepta.cma import (
    DivergenceError,
    Population,
    Selection,
    StrategyConfig,
    StrategyState,
    effective_kappa,
    init_strategy,
    minimize,
    sample_population,
    update_strategy,
)
from percepta.datasets import DatasetHandle, ingest_idx, ingest_png_dir
from percepta.fitness import (
    NormKind,
    PenaltyParams,
    average_perturbation,
    color_fitness,
    norm_distance,
    penalized_fitness,
)
from percepta.selection import (
    MetricOracle,
    SelectionLog,
    SelectionRequest,
    SelectionResponse,
    SimulatedHumanOracle,
    agreement_spread,
    agreement_vs_l1,
    metric_select,
    simulated_human_select,
)

__version__ = "0.1.0"
