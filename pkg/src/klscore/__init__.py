"""Set inference for incomplete discrete-outcome models.

Pipeline: enumerate the events that pin down the model's density polytope,
project the observed conditional pmf onto it by minimizing KL divergence,
differentiate the profiled objective into per-outcome scores, and invert a
chi-square score test over a parameter grid.  A Monte Carlo harness
reproduces size/power experiments on calibrated entry-game designs.
"""

from .ccp import (
    BsplineCcp,
    CellMeanCcp,
    Dataset,
    default_basis_dim,
    fit_bspline,
    fit_cell_mean,
)
from .errors import (
    ConfigError,
    DomainError,
    EmptyConfidenceSetError,
    InfeasiblePolytopeError,
    KlscoreError,
    KktResidualError,
    NumericError,
)
from .events import ConstraintSet, EventSet, OutcomeSpace, build_constraints, enumerate_events, prune_redundant
from .inference import (
    ConfidenceSet,
    CovEstimates,
    TestOutcome,
    box_grid,
    confidence_set,
    counterfactual_ci,
    covariance_hat,
    pseudo_true_grid,
    rao_statistic,
    regularize,
)
from .mc import (
    DgpConfig,
    RejectionTable,
    default_config,
    dgp_probs,
    mle_completed,
    pseudo_true_point,
    simulate_correct,
    simulate_misspecified,
    simulate_uniform_game,
    size_power_experiment,
    table1_theta,
    uniform_dgp_pmf,
)
from .models import (
    ChoiceSetModel,
    EntryGameModel,
    EntryGameTheta,
    EtaTriple,
    ModelSpec,
    UniformEntryGameModel,
    choiceset_model_nu,
    entry_probability,
    entry_region_probs,
    eta,
    model_from_config,
    uniform_game_nu,
)
from .numerics import (
    SeededRng,
    bvn_cdf,
    bvn_rect,
    chi2_quantile,
    fd_gradient,
    std_normal_cdf,
)
from .projection import (
    ProjectionResult,
    expected_profiled_loglik,
    kl_divergence,
    profiled_loglik,
    project_closed_form,
    project_generic,
)
from .score import (
    ScoreMatrix,
    SmoothingConfig,
    average_score,
    observation_scores,
    score_closed_form,
    score_multiplier,
    score_smoothed,
)

__version__ = "0.1.0"
