"""Data-mixture optimisation for supervised fine-tuning.

Fit a transfer-augmented power-law loss model per domain from a few
perturbation runs, then pick domain weights that minimise the summed
predicted validation loss at a target token budget.
"""

__version__ = "0.1.0"

from .scaling_model import (  # noqa: E402
    DegenerateInputError,
    DomainParams,
    ModelDomainError,
    domain_loss,
    effective_transfer,
    objective_gradient,
    total_objective,
)
from .fitting import FitOptions, FitResult, LossObservation, fit_all_domains, fit_domain, huber  # noqa: E402
from .optimizer import (  # noqa: E402
    OptimizationReport,
    OptimizerOptions,
    budget_sweep,
    grid_search,
    kkt_residual,
    optimize_weights,
)
from .planner import (  # noqa: E402
    MixPlan,
    SamplingSpec,
    baseline_weights,
    emit_run_manifests,
    ingest_losses,
    make_plan,
    run_pipeline,
)
from .simulator import GroundTruth, recovery_experiment, simulate_losses  # noqa: E402

# Estimated parameters for instruction following, math and code
# (Llama3.2-3B, unit sample 660k tokens per domain).
TABLE1_PARAMS = (
    DomainParams(C=1.1562, k=0.1948, alpha=0.5288, beta=0.0510, E=1.0967, name="IF"),
    DomainParams(C=0.7512, k=0.0401, alpha=0.4467, beta=0.0430, E=1.4934, name="Math"),
    DomainParams(C=0.9820, k=0.1235, alpha=0.5235, beta=0.0439, E=1.2679, name="Code"),
)
