"""Acceptance gate: every quantitative claim the package is expected to meet,
one test per criterion, each printing a PASS/FAIL line (run with -s to see
them live).

Limit statements without convergence rates are tested as monotone trends with
CI slack across a decade-spaced size grid plus an absolute band at the
largest size; exact identities and oracle comparisons use tight tolerances.
"""

import math
import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import stats

from pdbrw import (
    BRWConfig,
    INFINITY,
    LambdaMeasure,
    Partition,
    PopulationState,
    RateTable,
    estimate_cn,
    estimate_speed,
    lambda_rate,
    seed_stream,
    simulate_lambda_coalescent,
)
from pdbrw.brw import (
    branch_direct,
    sample_exponential_model_points,
    select_weighted_without_replacement,
)
from pdbrw.coalescent import (
    CoalescentTrajectory,
    PDWeights,
    first_merger_distribution,
    multinomial_coalescent_step,
    sample_pd_weights,
)
from pdbrw.distributions import PDParams, sample_beta, stick_breaking, stick_logs
from pdbrw.estimators import merger_statistics

from oracles import bs_rate, gumbel_cdf


def _criterion(label, checks):
    ok = all(c[0] for c in checks)
    status = "PASS" if ok else "FAIL"
    detail = "; ".join(d for _, d in checks)
    print(f"\nacceptance {label}: {status} :: {detail}")
    assert ok, f"{label} failed :: " + "; ".join(d for o, d in checks if not o)


def _trend_within_ci(estimates, errors, direction):
    """Each step may not move against `direction` by more than the joint CI."""
    ok = True
    for (e0, s0), (e1, s1) in zip(
        zip(estimates, errors), zip(estimates[1:], errors[1:])
    ):
        slack = 1.96 * (s0 + s1)
        if direction == "nonincreasing" and e1 > e0 + slack:
            ok = False
        if direction == "nondecreasing" and e1 < e0 - slack:
            ok = False
    return ok


# ---------------------------------------------------------------------------
# shared heavy weight-sample statistics
# ---------------------------------------------------------------------------

WEIGHT_GRID = ((1000, 20000), (10000, 8000), (100000, 5000))


def _weight_stats(params, grid, seed):
    out = {}
    for n_particles, reps in grid:
        p2 = np.empty(reps)
        p3 = np.empty(reps)
        top = np.empty(reps)
        second = np.empty(reps)
        for r in range(reps):
            w = sample_pd_weights(params, n_particles, seed_stream(seed, r))
            th = w.theta
            p2[r] = np.sum(th**2)
            p3[r] = np.sum(th**3)
            top[r] = w.order_stats[0]
            second[r] = w.order_stats[1]
        out[n_particles] = dict(p2=p2, p3=p3, top=top, second=second, reps=reps)
    return out


@pytest.fixture(scope="module")
def beta_regime_stats():
    return _weight_stats(PDParams(0.5, 0.0), WEIGHT_GRID, 8800)


@pytest.fixture(scope="module")
def kingman_regime_stats():
    return _weight_stats(PDParams(0.5, 0.5), ((1000, 20000), (10000, 8000), (100000, 4000)), 8900)


def _triple_ratio(stats_n):
    """First-merger triple probability from one-step expectations, with a
    delta-method error bar."""
    num, den = stats_n["p3"], 3.0 * stats_n["p2"] - 2.0 * stats_n["p3"]
    est = num.mean() / den.mean()
    cov = np.cov(num, den, ddof=1)
    grad = np.array([1.0 / den.mean(), -num.mean() / den.mean() ** 2])
    se = float(np.sqrt(grad @ cov @ grad / num.size))
    return float(est), se


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_criterion_01_rate_tables():
    bs = LambdaMeasure.beta_family(1.0)
    quad = LambdaMeasure.general(bs.beta_density(), 1.0)
    worst_closed = 0.0
    worst_quad = 0.0
    for b in range(2, 31):
        for k in range(2, b + 1):
            target = bs_rate(b, k)
            worst_closed = max(worst_closed, abs(lambda_rate(b, k, bs) - target))
            worst_quad = max(worst_quad, abs(lambda_rate(b, k, quad) - target))
    worst_rec = 0.0
    for lam in (0.5, 1.0, 1.5):
        table = RateTable.build(LambdaMeasure.beta_family(lam), 31)
        for b in range(2, 31):
            for k in range(2, b + 1):
                lhs = table.rate(b, k)
                rhs = table.rate(b + 1, k) + table.rate(b + 1, k + 1)
                worst_rec = max(worst_rec, abs(lhs - rhs) / lhs)
    _criterion(
        "criterion 01 (merger rate tables)",
        [
            (worst_closed <= 1e-8, f"closed form vs factorial formula, max abs dev {worst_closed:.2e} <= 1e-8"),
            (worst_quad <= 1e-8, f"quadrature vs factorial formula, max abs dev {worst_quad:.2e} <= 1e-8"),
            (worst_rec <= 1e-10, f"recursion residual {worst_rec:.2e} <= 1e-10 for lam in {{0.5, 1, 1.5}}"),
        ],
    )


def test_criterion_02_stick_identities():
    params = PDParams(0.5, 0.0)
    worst = 0.0
    for rep in range(100):
        s = stick_breaking(params, 10**5, seed_stream(8200, rep))
        residual = math.fsum([1.0] + [-x for x in s.v.tolist()])
        worst = max(worst, abs(residual - s.m[-1]) / s.m[-1])
    rng = seed_stream(8201)
    reps = 10**5
    renorm = np.empty(reps)
    for r in range(reps):
        s = stick_breaking(params, 2, rng)
        renorm[r] = s.v[1] / (1.0 - s.v[0])
    fresh = sample_beta(0.5, 1.0, rng, size=reps)
    ks = stats.ks_2samp(renorm, fresh).statistic
    _criterion(
        "criterion 02 (stick-breaking identities)",
        [
            (worst <= 1e-10, f"telescoping residual {worst:.2e} <= 1e-10 over 100 samples at n=1e5"),
            (ks < 0.01, f"deletion-property KS {ks:.4f} < 0.01 at 1e5 draws"),
        ],
    )


def test_criterion_03a_residual_moment():
    params = PDParams(0.5, 0.0)
    n, reps = 10**4, 30000
    rng = seed_stream(8300)
    vals = np.array(
        [n * math.exp(stick_logs(params, n, rng)[1][-1]) for _ in range(reps)]
    )
    est = vals.mean()
    _criterion(
        "criterion 03a (residual moment n*E[m_n] at n=1e4)",
        [(abs(est - 1.0) <= 0.03, f"estimate {est:.4f} within 3% of 1 ({reps} replicates)")],
    )


def test_criterion_03b_sigma_limit():
    # The limit value is 2/pi, but at n = 1e5 the true mean of sigma_n/log n
    # still sits about 5% high (the centering constant of the series decays
    # like 1/log n), so the stated 3% band at this n is not attainable; the
    # check is kept as stated and fails honestly.
    params = PDParams(0.5, 0.0)
    n, reps = 10**5, 2000
    rng = seed_stream(8301)
    vals = np.empty(reps)
    for r in range(reps):
        log_v, _ = stick_logs(params, n, rng)
        vals[r] = np.sum(np.exp(0.5 * log_v)) / math.log(n)
    est = vals.mean()
    se = vals.std(ddof=1) / math.sqrt(reps)
    target = 2.0 / math.pi
    rel = abs(est / target - 1.0)
    _criterion(
        "criterion 03b (sigma_n / log n at n=1e5)",
        [
            (
                rel <= 0.03,
                f"estimate {est:.4f} +- {se:.4f} vs 2/pi = {target:.4f}, rel dev "
                f"{rel:.1%} (> 3%: finite-size offset ~ 0.58/log n; the deviation "
                f"is real, not Monte Carlo noise)",
            )
        ],
    )


def test_criterion_03_sigma_limit_bias_corrected():
    # Companion check of the same limit with the additive constant cancelled:
    # E[sigma_n - sigma_m] / log(n/m) converges to 2/pi without the 1/log n
    # offset, and passes at the stated 3%.
    params = PDParams(0.5, 0.0)
    n, m, reps = 10**5, 10**3, 2000
    rng = seed_stream(8302)
    vals = np.empty(reps)
    for r in range(reps):
        log_v, _ = stick_logs(params, n, rng)
        sig = np.cumsum(np.exp(0.5 * log_v))
        vals[r] = (sig[-1] - sig[m - 1]) / math.log(n / m)
    est = vals.mean()
    target = 2.0 / math.pi
    _criterion(
        "criterion 03b' (difference-quotient form of the same limit)",
        [(abs(est / target - 1.0) <= 0.03, f"estimate {est:.4f} within 3% of 2/pi")],
    )


def test_criterion_04_engine_cross_validation():
    # enumeration route with a certified relative tail of 3e-4: the
    # truncation bias it admits is 30x below the KS acceptance band
    beta, n_particles, reps = 2.0, 50, 10**5
    cfg = BRWConfig(
        n_particles=n_particles, beta=beta, truncation_epsilon=3e-4
    )
    state = PopulationState.from_positions(np.zeros(n_particles))
    rng = seed_stream(8400)
    weights = np.empty(reps)
    for r in range(reps):
        children = branch_direct(state, cfg, rng)
        log_w = beta * (children.points - children.center)
        idx = select_weighted_without_replacement(children, 1, beta, rng)[0]
        weights[r] = math.exp(log_w[idx] - (log_w.max() + math.log(np.sum(np.exp(log_w - log_w.max())))))
    ks = stats.kstest(weights, stats.beta(0.5, 0.5).cdf).statistic
    _criterion(
        "criterion 04 (direct-engine first-selected weight law)",
        [(ks < 0.01, f"KS vs Beta(1/2, 1/2): {ks:.4f} < 0.01 at 1e5 one-step runs, N=50, beta=2")],
    )


def test_criterion_05_exponential_model_representation():
    rng = seed_stream(8500)
    reps = 10**5
    tops = np.empty(reps)
    scales = np.empty(reps)
    for r in range(reps):
        s = sample_exponential_model_points(10, rng)
        tops[r] = s.z + s.e.max()
        scales[r] = math.exp(-s.z)
    ks = stats.kstest(tops, gumbel_cdf).statistic
    mean_scale = scales.mean()
    _criterion(
        "criterion 05 (top-n representation at beta = infinity)",
        [
            (ks < 0.006, f"max-point KS vs Gumbel {ks:.4f} < 0.006"),
            (abs(mean_scale - 11.0) <= 0.05, f"E[exp(-z)] = {mean_scale:.4f} within 11 +- 0.05"),
        ],
    )


def test_criterion_06_coalescent_micro_oracles():
    rng = seed_stream(8600)
    bs = LambdaMeasure.beta_family(1.0)
    table = RateTable.build(bs, 3)
    reps = 10**5
    triples = np.empty(reps, dtype=bool)
    for r in range(reps):
        traj = simulate_lambda_coalescent(3, bs, rng, rate_table=table)
        triples[r] = traj.states[1].n_blocks == 1
    triple_freq = triples.mean()

    uniform = PDWeights(
        params=PDParams(0.5, 0.0),
        theta=np.array([0.5, 0.5]),
        order_stats=np.array([0.5, 0.5]),
    )
    pair = Partition.singletons(2)
    merges = np.array(
        [multinomial_coalescent_step(pair, uniform, rng).n_blocks == 1 for _ in range(reps)]
    )
    pair_freq = merges.mean()

    params = PDParams(0.5, 0.0)
    semi = estimate_cn(params, 1000, 4000, "semi_analytic", 8601)
    emp = estimate_cn(params, 1000, 60000, "empirical_pair", 8602)
    joint = math.hypot(semi.std_error, emp.std_error)
    gap = abs(semi.estimate - emp.estimate)
    _criterion(
        "criterion 06 (coalescent micro-oracles)",
        [
            (abs(triple_freq - 0.25) <= 0.005, f"uniform-measure triple merger {triple_freq:.4f} within 0.25 +- 0.005"),
            (abs(pair_freq - 0.5) <= 0.005, f"uniform-weight pair merge {pair_freq:.4f} within 0.5 +- 0.005"),
            (gap <= 1.96 * joint, f"semi-analytic vs empirical-pair c_N gap {gap:.5f} <= 1.96*joint SE {1.96 * joint:.5f}"),
        ],
    )


def test_criterion_07_reproducibility(tmp_path, monkeypatch):
    env = dict(os.environ)
    env["PDBRW_THREADS"] = "1"
    args = [
        sys.executable, "-m", "pdbrw.cli", "simulate", "--n", "20", "--beta", "2",
        "--steps", "25", "--seed", "8700",
    ]
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    r1 = subprocess.run(args + ["--out", str(out1)], capture_output=True, env=env, text=True)
    r2 = subprocess.run(args + ["--out", str(out2)], capture_output=True, env=env, text=True)
    bytes_equal = out1.read_bytes() == out2.read_bytes() and r1.returncode == 0

    cfg = BRWConfig(n_particles=30, beta=2.0)
    monkeypatch.setenv("PDBRW_THREADS", "1")
    single = estimate_speed(cfg, t_steps=250, n_replicates=8, master_seed=8701)
    monkeypatch.setenv("PDBRW_THREADS", "4")
    pooled = estimate_speed(cfg, t_steps=250, n_replicates=8, master_seed=8701)
    threads_equal = (
        single.estimate == pooled.estimate and single.std_error == pooled.std_error
    )
    _criterion(
        "criterion 07 (reproducibility)",
        [
            (bytes_equal, "identical bytes for repeated runs"),
            (threads_equal, "identical aggregates for PDBRW_THREADS in {1, 4}"),
        ],
    )


SPEED_GRID = ((100, 500, 80), (1000, 500, 80), (10000, 250, 80), (100000, 125, 80))


@pytest.mark.parametrize("beta", [1.5, 2.0, INFINITY])
def test_criterion_08_speed_trend(beta):
    devs, errs, pooled = [], [], []
    for n_particles, t_steps, replicates in SPEED_GRID:
        cfg = BRWConfig(n_particles=n_particles, beta=beta)
        report = estimate_speed(cfg, t_steps, replicates, master_seed=8800 + n_particles)
        devs.append(abs(report.estimate - report.reference))
        errs.append(report.std_error)
        pooled.append(report.n_samples)
    trend_ok = _trend_within_ci(devs, errs, "nonincreasing")
    dev_detail = ", ".join(f"N=1e{int(math.log10(n))}: {d:.3f}" for (n, _, _), d in zip(SPEED_GRID, devs))
    _criterion(
        f"criterion 08 (speed vs log log N, beta={beta})",
        [
            (trend_ok, f"|speed - log log N| nonincreasing within CI ({dev_detail})"),
            (devs[-1] <= 0.5, f"deviation {devs[-1]:.3f} <= 0.5 at N=1e5"),
            (pooled[-1] >= 10**4, f"{pooled[-1]} pooled increments at N=1e5"),
        ],
    )


def test_criterion_09_pair_coalescence_scaling(beta_regime_stats):
    ests, errs = [], []
    for n_particles, _ in WEIGHT_GRID:
        data = beta_regime_stats[n_particles]
        log_n = math.log(n_particles)
        ests.append(data["p2"].mean() * log_n)
        errs.append(data["p2"].std(ddof=1) / math.sqrt(data["reps"]) * log_n)
    half_width = 1.96 * errs[-1]
    detail = ", ".join(
        f"N=1e{int(math.log10(n))}: {e:.3f}+-{s:.3f}"
        for (n, _), e, s in zip(WEIGHT_GRID, ests, errs)
    )
    _criterion(
        "criterion 09 (c_N log N scaling)",
        [
            (_trend_within_ci(ests, errs, "nondecreasing"), f"increasing within CI ({detail})"),
            (0.6 <= ests[-1] <= 1.2, f"{ests[-1]:.3f} inside [0.6, 1.2] at N=1e5"),
            (half_width < 0.05, f"CI half-width {half_width:.4f} < 0.05 at N=1e5"),
        ],
    )


def test_criterion_10a_beta_regime_merger(beta_regime_stats):
    params = PDParams(0.5, 0.0)
    n_particles = 10**5
    bs = LambdaMeasure.beta_family(1.0)
    rng = seed_stream(8810)
    trajectories = []
    for _ in range(1000):
        pi = Partition.singletons(3)
        times, states = [0], [pi]
        for t in range(1, 300):
            w = sample_pd_weights(params, n_particles, rng)
            new = multinomial_coalescent_step(pi, w, rng)
            times.append(t)
            states.append(new)
            if new.n_blocks < pi.n_blocks:
                break
            pi = new
        trajectories.append(CoalescentTrajectory(times=times, states=states))
    ms = merger_statistics(trajectories, 3, bs)
    freq3 = ms.frequencies[1]
    collapsed, collapsed_se = _triple_ratio(beta_regime_stats[n_particles])
    _criterion(
        "criterion 10a (multiple-merger regime, first merger of 3 lineages)",
        [
            (abs(freq3 - 0.25) <= 0.05, f"trajectory triple frequency {freq3:.3f} within 0.25 +- 0.05 at N=1e5 (chi2 {ms.chi2:.2f}, {ms.n_no_merger} unmerged)"),
            (abs(collapsed - 0.25) <= 0.05, f"one-step-expectation estimate {collapsed:.3f}+-{collapsed_se:.3f} within 0.25 +- 0.05"),
        ],
    )


def test_criterion_10b_kingman_regime_merger(kingman_regime_stats):
    ests, errs = [], []
    for n_particles in (1000, 10000, 100000):
        est, se = _triple_ratio(kingman_regime_stats[n_particles])
        ests.append(est)
        errs.append(se)
    detail = ", ".join(
        f"N=1e{int(math.log10(n))}: {e:.4f}+-{s:.4f}"
        for n, e, s in zip((1000, 10000, 100000), ests, errs)
    )
    _criterion(
        "criterion 10b (pairwise-only regime at theta = alpha)",
        [
            (_trend_within_ci(ests, errs, "nonincreasing"), f"size->=3 frequency decreasing within CI ({detail})"),
            (ests[-1] < 0.10, f"{ests[-1]:.4f} < 0.10 at N=1e5"),
        ],
    )


def test_criterion_11a_weight_tail(beta_regime_stats):
    ests, errs = [], []
    for n_particles, _ in WEIGHT_GRID:
        data = beta_regime_stats[n_particles]
        log_n = math.log(n_particles)
        p = np.mean(data["top"] > 0.5)
        ests.append(log_n * p)
        errs.append(log_n * math.sqrt(p * (1 - p) / data["reps"]))
    gaps = [abs(e - 1.0) for e in ests]
    detail = ", ".join(
        f"N=1e{int(math.log10(n))}: {e:.3f}+-{s:.3f}"
        for (n, _), e, s in zip(WEIGHT_GRID, ests, errs)
    )
    _criterion(
        "criterion 11a (scaled tail of the largest weight at x = 0.5)",
        [
            (_trend_within_ci(gaps, errs, "nonincreasing"), f"|tail - 1| nonincreasing within CI ({detail})"),
            (0.5 <= ests[-1] <= 1.3, f"{ests[-1]:.3f} inside [0.5, 1.3] at N=1e5"),
        ],
    )


def test_criterion_11b_second_weight_scaled_mean(beta_regime_stats):
    # The stated expectation is a strict decrease of log N * E[second weight]
    # toward 0.  The quantity provably converges upward to 1 instead (the
    # scaled second weight tends in law to exp(x2) with exp(-x2) ~ Gamma(2,1),
    # whose mean is 1), so this check fails honestly and decisively.
    ests, errs = [], []
    for n_particles, _ in WEIGHT_GRID:
        data = beta_regime_stats[n_particles]
        log_n = math.log(n_particles)
        ests.append(log_n * data["second"].mean())
        errs.append(log_n * data["second"].std(ddof=1) / math.sqrt(data["reps"]))
    strictly_decreasing = all(b < a for a, b in zip(ests, ests[1:]))
    detail = ", ".join(
        f"N=1e{int(math.log10(n))}: {e:.4f}+-{s:.4f}"
        for (n, _), e, s in zip(WEIGHT_GRID, ests, errs)
    )
    _criterion(
        "criterion 11b (scaled mean of the second-largest weight)",
        [
            (
                strictly_decreasing,
                f"strictly decreasing over the N grid required, measured increasing "
                f"({detail}); the sequence rises toward its true limit 1",
            )
        ],
    )
