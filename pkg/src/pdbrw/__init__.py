"""Branching random walk with exponential-weight random selection.

A population of N particles on the line branches into Poisson clouds of
children each generation; N survivors are drawn without replacement with
probability proportional to exp(beta * position).  The package provides the
simulation engines, the Poisson-Dirichlet stick-breaking machinery behind
them, merger-rate tables and coalescent simulators for the genealogy, and
Monte Carlo estimators with confidence intervals for the quantitative
behavior (front speed, pair-coalescence rate, weight tails, merger-size
regimes).
"""

from .brw import (
    INFINITY,
    BRWConfig,
    GenealogyRecord,
    PopulationState,
    log_sum_exp,
    run,
    step,
)
from .coalescent import (
    CoalescentTrajectory,
    LambdaMeasure,
    Partition,
    RateTable,
    coag,
    first_merger_distribution,
    lambda_rate,
    restrict,
    sample_pd_weights,
    simulate_lambda_coalescent,
)
from .distributions import (
    PDParams,
    PPPSample,
    StickSample,
    mittag_leffler_moment,
    phi_moment,
    psi_alpha,
    sample_beta,
    sample_ppp_above,
    sample_ppp_top_k,
    stick_breaking,
    tail_weight_bound,
)
from .errors import ParameterError, ResourceCapError
from .estimators import (
    EstimatorReport,
    ScalingConstants,
    estimate_cn,
    estimate_speed,
    merger_statistics,
    pd_diagnostics,
    weight_tail_curve,
)
from .rng import DEFAULT_SEED, seed_stream

__version__ = "0.1.0"
