"""Semidiscrete optimal-transport couplings for flow matching.

Fit one dual potential value per dataset point by stochastic ascent with
a chi-square stopping rule, then pair fresh noise to data in O(N) at
training time. Includes baseline couplings (independent, minibatch OT),
exact small-instance oracles, and a toy flow-matching laboratory with
score recovery and guidance resampling.
"""

from .numerics import Rng, logsumexp_weighted, sample_gaussian, softmax_b_eps
from .costs import (
    AugmentedPoint,
    CostConfig,
    ProjectionMatrix,
    cost,
    cost_matrix,
    estimate_cost_std,
    fit_pca,
)
from .semidual import (
    DiscreteNoise,
    GaussianNoise,
    MarginalEstimate,
    Potential,
    TargetMeasure,
    chi2_estimator,
    chi2_exact,
    marginal_estimate,
    responsibilities,
    semidual_value,
    soft_c_transform,
    stochastic_gradient,
    transport_cost_estimate,
)
from .solver import SolverConfig, lr_schedule, smoothness_bound, solve_sdot
from .coupling import (
    CachedMinibatchCoupling,
    PairBatch,
    assign,
    assign_batch,
    couple_independent,
    couple_minibatch_ot,
    hungarian,
    laguerre_contains,
    oracle_discrete_ot,
    sinkhorn_log,
)
from .flow import (
    FlowModel,
    GuidanceConfig,
    IndependentCoupling,
    MinibatchOTCoupling,
    SDCoupling,
    TrainConfig,
    Trajectory,
    curvature,
    delta_eps_toy,
    fm_loss_and_grad,
    guided_sample,
    integrate,
    interpolate,
    score_from_velocity,
    train_flow,
)
from .container import MetricsWriter, read_container, write_container

__version__ = "0.1.0"
