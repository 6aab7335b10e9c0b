"""Monte Carlo estimators with confidence intervals.

Every estimator derives one independent stream per replicate from
(master_seed, replicate_index), reduces per-replicate results in index
order, and reports a CLT standard error, so results are byte-identical
regardless of how many worker threads run the replicates.  The worker pool
is capped by the PDBRW_THREADS environment variable (default 1).
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import brw
from .coalescent import (
    LambdaMeasure,
    first_merger_distribution,
    sample_pd_weights,
)
from .distributions import (
    PDParams,
    mittag_leffler_moment,
    phi_moment,
    psi_alpha,
    stick_breaking,
)
from .errors import ParameterError
from .rng import seed_stream

__all__ = [
    "EstimatorReport",
    "ScalingConstants",
    "estimate_speed",
    "estimate_cn",
    "weight_tail_curve",
    "WeightTailResult",
    "TailPoint",
    "pd_diagnostics",
    "merger_statistics",
    "MergerStatistics",
    "first_merger_size_mc",
]


def worker_count() -> int:
    return max(1, int(os.environ.get("PDBRW_THREADS", "1")))


def _map_replicates(worker, n_replicates: int, master_seed: int):
    """worker(index, rng) per replicate; results returned in index order."""
    threads = worker_count()
    if threads == 1:
        return [worker(i, seed_stream(master_seed, i)) for i in range(n_replicates)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [
            pool.submit(worker, i, seed_stream(master_seed, i))
            for i in range(n_replicates)
        ]
        return [f.result() for f in futures]


@dataclass
class EstimatorReport:
    """A point estimate with its CLT error bar and the analytic target, if any."""

    name: str
    params: dict
    estimate: float
    std_error: float
    n_samples: int
    reference: float | None = None
    elapsed_seconds: float = 0.0

    @property
    def ci95(self) -> tuple:
        half = 1.96 * self.std_error
        return (self.estimate - half, self.estimate + half)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "params": self.params,
            "estimate": self.estimate,
            "std_error": self.std_error,
            "n_samples": self.n_samples,
            "ci95": list(self.ci95),
            "reference": self.reference,
            "elapsed_seconds": self.elapsed_seconds,
        }


def _pooled_report(name, params, values, reference, t0) -> EstimatorReport:
    values = np.asarray(values, dtype=float)
    n = values.size
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return EstimatorReport(
        name=name,
        params=params,
        estimate=float(values.mean()),
        std_error=se,
        n_samples=n,
        reference=reference,
        elapsed_seconds=time.perf_counter() - t0,
    )


@dataclass(frozen=True)
class ScalingConstants:
    """Scale constants of the weight-driven coalescent.

    lam = 1 + theta/alpha, and the coalescent time scale grows like
    L(N) = c * (log N)**lam with
    c = 1 / (Gamma(1 - theta/alpha) * Gamma(1 - alpha)**(theta/alpha)
             * Gamma(1 + theta)).
    The constant is defined in the multiple-merger regime theta < alpha; at
    the boundary the leading Gamma factor has a pole.
    """

    alpha: float
    theta: float = 0.0

    def __post_init__(self):
        PDParams(self.alpha, self.theta)  # domain check
        if not self.theta < self.alpha:
            raise ParameterError(
                "scale constants require theta < alpha (multiple-merger regime)"
            )

    @property
    def lam(self) -> float:
        return 1.0 + self.theta / self.alpha

    @property
    def c_alpha_theta(self) -> float:
        log_c = -(
            gammaln(1.0 - self.theta / self.alpha)
            + (self.theta / self.alpha) * gammaln(1.0 - self.alpha)
            + gammaln(1.0 + self.theta)
        )
        return float(np.exp(log_c))

    def big_l(self, n_particles: int) -> float:
        return self.c_alpha_theta * np.log(n_particles) ** self.lam

    def tail_reference(self, x: float) -> float:
        """Limit of L(N) * P(largest weight > x): ((1-x)/x)**lam / (lam G(lam) G(2-lam))."""
        lam = self.lam
        if not 0.0 < x < 1.0:
            raise ParameterError(f"x must lie in (0, 1), got {x}")
        return float(
            ((1.0 - x) / x) ** lam
            * np.exp(-gammaln(lam) - gammaln(2.0 - lam))
            / lam
        )


def estimate_speed(
    config: brw.BRWConfig,
    t_steps: int,
    n_replicates: int,
    master_seed: int,
) -> EstimatorReport:
    """Front speed: mean x_eq increment, pooled across replicates and steps.

    Increments are i.i.d. across steps (one step depends on the state only
    through x_eq), so pooling t_steps * n_replicates of them is a plain CLT
    estimate.  The reference field carries log log N.
    """
    if t_steps * n_replicates < 100:
        raise ParameterError("need at least 100 pooled increments")
    t0 = time.perf_counter()
    increments_only = config.engine in ("direct", "exponential_model")

    def one_replicate(_, rng):
        inc = np.empty(t_steps)
        if increments_only:
            for t in range(t_steps):
                inc[t] = brw.step_increment(config, rng)
            return inc
        state = brw.PopulationState.from_positions(np.zeros(config.n_particles))
        for t in range(t_steps):
            new_state, _, _ = brw.step(state, config, rng)
            inc[t] = new_state.x_eq - state.x_eq
            state = new_state
        return inc

    pooled = np.concatenate(_map_replicates(one_replicate, n_replicates, master_seed))
    reference = (
        float(np.log(np.log(config.n_particles))) if config.n_particles >= 2 else None
    )
    return _pooled_report(
        "speed",
        {
            "n_particles": config.n_particles,
            "beta": config.beta,
            "engine": config.engine,
            "variant": config.variant,
            "t_steps": t_steps,
            "n_replicates": n_replicates,
            "seed": master_seed,
        },
        pooled,
        reference,
        t0,
    )


def estimate_cn(
    params: PDParams,
    n_particles: int,
    n_replicates: int,
    mode: str,
    master_seed: int,
) -> EstimatorReport:
    """Probability that two random lineages share a parent one step back.

    ``semi_analytic`` averages the conditional collision probability
    sum(theta**2) over weight draws; ``empirical_pair`` lets two tagged
    lineages actually pick parents and counts collisions.  Both estimate the
    same number.  The reference is the asymptotic (1 - theta/alpha) / L(N),
    available in the multiple-merger regime |theta| < alpha.
    """
    if mode not in ("semi_analytic", "empirical_pair"):
        raise ParameterError(f"unknown mode {mode!r}")
    t0 = time.perf_counter()

    def one_replicate(_, rng):
        w = sample_pd_weights(params, n_particles, rng)
        if mode == "semi_analytic":
            return w.pair_coalescence_probability()
        picks = rng.choice(w.n, size=2, p=w.theta)
        return float(picks[0] == picks[1])

    values = _map_replicates(one_replicate, n_replicates, master_seed)
    reference = None
    if -params.alpha < params.theta < params.alpha:
        sc = ScalingConstants(params.alpha, params.theta)
        reference = float((1.0 - params.theta / params.alpha) / sc.big_l(n_particles))
    return _pooled_report(
        "c_n",
        {
            "alpha": params.alpha,
            "theta": params.theta,
            "n_particles": n_particles,
            "mode": mode,
            "n_replicates": n_replicates,
            "seed": master_seed,
        },
        values,
        reference,
        t0,
    )


@dataclass
class TailPoint:
    x: float
    scaled_tail: float
    std_error: float
    reference: float


@dataclass
class WeightTailResult:
    """Scaled tail of the largest weight on a grid, plus the scaled mean of
    the second-largest weight from the same draws."""

    points: list
    second_weight: EstimatorReport


def weight_tail_curve(
    params: PDParams,
    n_particles: int,
    x_grid,
    n_replicates: int,
    master_seed: int,
) -> WeightTailResult:
    """Empirical L(N) * P(largest weight > x) on a grid, with the analytic
    limit ((1-x)/x)**lam / (lam G(lam) G(2-lam)) as reference."""
    x_grid = np.asarray(list(x_grid), dtype=float)
    if np.any(x_grid <= 0.0) or np.any(x_grid >= 1.0):
        raise ParameterError("grid values must lie in (0, 1)")
    t0 = time.perf_counter()
    sc = ScalingConstants(params.alpha, params.theta)
    big_l = sc.big_l(n_particles)

    def one_replicate(_, rng):
        w = sample_pd_weights(params, n_particles, rng)
        top, second = w.order_stats[0], w.order_stats[1]
        return np.concatenate([(top > x_grid).astype(float), [second]])

    rows = np.array(_map_replicates(one_replicate, n_replicates, master_seed))
    hits, second = rows[:, : x_grid.size], rows[:, -1]
    points = []
    for i, x in enumerate(x_grid):
        p = hits[:, i].mean()
        se = np.sqrt(p * (1.0 - p) / n_replicates)
        points.append(
            TailPoint(
                x=float(x),
                scaled_tail=float(big_l * p),
                std_error=float(big_l * se),
                reference=sc.tail_reference(float(x)),
            )
        )
    second_report = _pooled_report(
        "second_weight_scaled_mean",
        {
            "alpha": params.alpha,
            "theta": params.theta,
            "n_particles": n_particles,
            "n_replicates": n_replicates,
            "seed": master_seed,
        },
        np.log(n_particles) * second,
        None,
        t0,
    )
    return WeightTailResult(points=points, second_weight=second_report)


def pd_diagnostics(
    params: PDParams,
    n_sticks: int,
    n_replicates: int,
    master_seed: int,
    gamma: float = 1.0,
) -> dict:
    """Convergence diagnostics of one stick-breaking draw of length n.

    Returns reports keyed by name:

    - ``rescaled_residual_moment``: E[(n**((1-a)/a) m_n)**gamma] against its
      Gamma-ratio limit,
    - ``series_centering``: E[s_n] - psi_alpha * log n (converges to an
      unidentified constant; only boundedness is meaningful),
    - ``sigma_over_log_n``: E[sigma_n] / log n against the Mittag-Leffler
      first moment when theta = 0.
    """
    if n_sticks < 100:
        raise ParameterError("n_sticks must be at least 100")
    t0 = time.perf_counter()
    a = params.alpha
    scale = gamma * (1.0 - a) / a * np.log(n_sticks)

    def one_replicate(_, rng):
        sticks = stick_breaking(params, n_sticks, rng)
        m_term = np.exp(gamma * sticks.log_m[-1] + scale)
        return m_term, sticks.s[-1], sticks.sigma[-1]

    rows = np.array(_map_replicates(one_replicate, n_replicates, master_seed))
    base_params = {
        "alpha": params.alpha,
        "theta": params.theta,
        "n_sticks": n_sticks,
        "n_replicates": n_replicates,
        "seed": master_seed,
    }
    log_n = np.log(n_sticks)
    reports = {
        "rescaled_residual_moment": _pooled_report(
            "rescaled_residual_moment",
            dict(base_params, gamma=gamma),
            rows[:, 0],
            phi_moment(params, gamma),
            t0,
        ),
        "series_centering": _pooled_report(
            "series_centering",
            base_params,
            rows[:, 1] - psi_alpha(a) * log_n,
            None,
            t0,
        ),
        "sigma_over_log_n": _pooled_report(
            "sigma_over_log_n",
            base_params,
            rows[:, 2] / log_n,
            mittag_leffler_moment(a, 1.0) if params.theta == 0.0 else None,
            t0,
        ),
    }
    return reports


@dataclass
class MergerStatistics:
    """Empirical first-merger-size distribution against its analytic target."""

    sizes: np.ndarray
    counts: np.ndarray
    frequencies: np.ndarray
    reference: np.ndarray
    chi2: float
    n_merged: int
    n_no_merger: int


def merger_statistics(
    trajectories: list, n_lineages: int, measure: LambdaMeasure
) -> MergerStatistics:
    """Tabulate the size of the first non-trivial merger across trajectories.

    Trajectories that never merge within their horizon are counted apart and
    excluded from the frequency table.  The chi-square statistic against the
    analytic first-merger distribution pools adjacent size bins until every
    expected count is at least 5.
    """
    sizes = np.arange(2, n_lineages + 1)
    counts = np.zeros(sizes.size, dtype=int)
    n_no_merger = 0
    for traj in trajectories:
        k = traj.first_merger_size()
        if k == 0:
            n_no_merger += 1
        else:
            counts[k - 2] += 1
    n_merged = int(counts.sum())
    reference = first_merger_distribution(n_lineages, measure)
    frequencies = counts / n_merged if n_merged else np.zeros_like(counts, dtype=float)

    chi2 = float("nan")
    if n_merged:
        expected = reference * n_merged
        # pool adjacent bins until each expected count reaches 5
        pooled_obs, pooled_exp = [], []
        acc_o, acc_e = 0.0, 0.0
        for o, e in zip(counts, expected):
            acc_o += o
            acc_e += e
            if acc_e >= 5.0:
                pooled_obs.append(acc_o)
                pooled_exp.append(acc_e)
                acc_o, acc_e = 0.0, 0.0
        if acc_e > 0.0 and pooled_exp:
            pooled_obs[-1] += acc_o
            pooled_exp[-1] += acc_e
        if pooled_exp:
            chi2 = float(
                sum((o - e) ** 2 / e for o, e in zip(pooled_obs, pooled_exp))
            )
    return MergerStatistics(
        sizes=sizes,
        counts=counts,
        frequencies=frequencies,
        reference=reference,
        chi2=chi2,
        n_merged=n_merged,
        n_no_merger=n_no_merger,
    )


def first_merger_size_mc(
    params: PDParams,
    n_particles: int,
    n_replicates: int,
    master_seed: int,
) -> EstimatorReport:
    """Probability that the first merger of 3 tagged lineages is a triple.

    Because the weight draws are independent across generations, the law of
    the first merger is a ratio of one-step expectations: conditionally on
    the weights, three lineages all collide with probability p3 = sum
    theta**3 and some merger happens with probability 3 p2 - 2 p3, so the
    first merger is a triple with probability E[p3] / E[3 p2 - 2 p3].  This
    collapses the waiting-time loop into one weight draw per replicate.
    """
    t0 = time.perf_counter()

    def one_replicate(_, rng):
        w = sample_pd_weights(params, n_particles, rng)
        p2 = float(np.sum(w.theta**2))
        p3 = float(np.sum(w.theta**3))
        return p3, 3.0 * p2 - 2.0 * p3

    rows = np.array(_map_replicates(one_replicate, n_replicates, master_seed))
    num, den = rows[:, 0], rows[:, 1]
    estimate = num.mean() / den.mean()
    # delta-method error bar for the ratio of means
    n = n_replicates
    cov = np.cov(num, den, ddof=1)
    grad = np.array([1.0 / den.mean(), -num.mean() / den.mean() ** 2])
    se = float(np.sqrt(grad @ cov @ grad / n))
    return EstimatorReport(
        name="first_merger_triple_probability",
        params={
            "alpha": params.alpha,
            "theta": params.theta,
            "n_particles": n_particles,
            "n_replicates": n_replicates,
            "seed": master_seed,
        },
        estimate=float(estimate),
        std_error=se,
        n_samples=n,
        reference=None,
        elapsed_seconds=time.perf_counter() - t0,
    )
