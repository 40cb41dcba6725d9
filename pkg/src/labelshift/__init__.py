"""Label-shift density-ratio estimation and importance-weighted training."""

from .data import (
    GaussianMixtureSpec,
    RelaxedShiftSpec,
    ShiftSpec,
    equidistant_means,
    gen_gaussian_mixture,
    load_idx,
    perturb_relaxed,
    posterior_matrix,
    relax_m_preset,
    relaxed_preset,
    resample_by_marginal,
    sample_dirichlet_marginal,
    true_posterior,
    uniform_marginal,
)
from .estimators import (
    EstimateReport,
    EstimatorOptions,
    empirical_objective,
    empirical_objective_gradient,
    estimate_bbse,
    estimate_mlls_em,
    estimate_mlls_gd,
    estimate_rlls,
    estimate_vrls,
    project_to_simplex,
    solve_mlls,
    unregularized,
)
from .federated import (
    Federation,
    FederationConfig,
    FederationNode,
    FederationResult,
    NodeSpec,
    ServerOptimizer,
    aggregate_ratios,
    build_federation,
    crossnode_listing_ratios,
    estimated_weight_vectors,
    evaluate,
    exchange_marginals,
    local_test_marginal,
    run_federation,
    train_global,
    true_weight_vectors,
)
from .metrics import TrialSummary, loglog_slope, ratio_mse, summarize
from .predictor import (
    Predictor,
    PredictorConfig,
    entropy_penalty,
    init_predictor,
    load_predictor,
    loss_gradient,
    mean_loss,
    predict_proba,
    regularized_loss,
    save_predictor,
    train_predictor,
)
from .types import (
    LabeledDataset,
    LabelMarginal,
    PROB_FLOOR,
    ProbabilityMatrix,
    RatioVector,
    make_marginal,
    ratio_from_marginals,
)

__version__ = "0.1.0"
