"""Primitive samplers and closed-form moments.

This module holds the building blocks everything else consumes: a Beta
sampler that stays accurate for very small shape parameters, generators for
the Poisson point process with intensity ``exp(-x) dx``, the two-parameter
stick-breaking construction (size-biased Poisson-Dirichlet weights), and the
Gamma-function moment formulas attached to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import ParameterError, ResourceCapError

__all__ = [
    "PDParams",
    "StickSample",
    "PPPSample",
    "sample_beta",
    "sample_ppp_top_k",
    "sample_ppp_above",
    "tail_weight_bound",
    "stick_breaking",
    "psi_alpha",
    "phi_moment",
    "mittag_leffler_moment",
]

# Refuse Poisson draws with mean beyond this many atoms.
PPP_COUNT_CAP = 50_000_000


@dataclass(frozen=True)
class PDParams:
    """Parameters (alpha, theta) of the two-parameter Poisson-Dirichlet family.

    Requires ``0 < alpha < 1`` and ``theta > -alpha``.
    """

    alpha: float
    theta: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.theta > -self.alpha:
            raise ParameterError(
                f"theta must exceed -alpha, got theta={self.theta}, alpha={self.alpha}"
            )


@dataclass
class StickSample:
    """One stick-breaking realization of length n.

    Arrays are indexed j = 1..n (position j-1):

    - ``y``:     stick fractions, y[j] ~ Beta(1 - alpha, theta + j*alpha)
    - ``v``:     size-biased weights, v[j] = y[j] * prod_{i<j}(1 - y[i])
    - ``m``:     residual mass, m[j] = prod_{i<=j}(1 - y[i]) = 1 - sum_{i<=j} v[i]
    - ``s``:     partial sums of y[j]**alpha * j**(alpha-1)
    - ``sigma``: partial sums of v[j]**alpha

    ``log_v`` and ``log_m`` are exact log-space companions of ``v`` and ``m``;
    they stay finite long after the linear arrays would underflow.  The linear
    ``v`` and ``m`` are coupled so that ``1 - v.sum() == m[-1]`` holds to a few
    ulp, not merely to the rounding of independent exponentials.
    """

    params: PDParams
    y: np.ndarray
    v: np.ndarray
    m: np.ndarray
    s: np.ndarray
    sigma: np.ndarray
    log_v: np.ndarray = field(repr=False, default=None)
    log_m: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return self.y.shape[0]


@dataclass
class PPPSample:
    """Ranked atoms of a PPP(exp(-x) dx) down to a cutoff.

    ``points`` is strictly decreasing and every atom at or above ``cutoff``
    is present (the top-k construction sets the cutoff at the k-th atom
    itself).  ``tail_weight_bound`` is the expected weight exp(beta*x)
    carried by the atoms below the cutoff, filled in when the sample is
    attached to a weight exponent beta > 1.
    """

    points: np.ndarray
    cutoff: float
    tail_weight_bound: float | None = None


def _log_gamma_draw(shape, rng: np.random.Generator, size=None):
    """log of Gamma(shape, 1) variates, stable for arbitrarily small shapes.

    Uses the boost identity G_a = G_{a+1} * U**(1/a): the log never underflows
    even when the linear variate would be far below the smallest subnormal.
    """
    shape = np.asarray(shape, dtype=float)
    if np.any(shape <= 0.0):
        raise ParameterError("gamma shape must be positive")
    if size is None:
        size = shape.shape
    g = rng.gamma(shape + 1.0, size=size)
    log_u = np.log1p(-rng.random(size=size))  # log of Uniform(0, 1], never -inf
    return np.log(g) + log_u / shape


def _log_beta_pair(a, b, rng: np.random.Generator, size=None):
    """Return (log y, log(1-y)) for y ~ Beta(a, b), computed in log space."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a <= 0.0) or np.any(b <= 0.0):
        raise ParameterError("Beta shape parameters must be positive")
    if size is None:
        size = np.broadcast_shapes(a.shape, b.shape)
    log_x = _log_gamma_draw(np.broadcast_to(a, size), rng)
    log_z = _log_gamma_draw(np.broadcast_to(b, size), rng)
    log_total = np.logaddexp(log_x, log_z)
    return log_x - log_total, log_z - log_total


def sample_beta(a: float, b: float, rng: np.random.Generator, size=None):
    """Draw from Beta(a, b) via the log-space Gamma-ratio construction.

    Accurate for shape parameters down to 1e-3 and below, where rejection
    samplers lose mass to underflow.  Returns a scalar when ``size`` is None,
    else an array.  Raises ParameterError for nonpositive shapes.
    """
    scalar = size is None
    log_y, _ = _log_beta_pair(
        float(a), float(b), rng, size=() if scalar else (int(size),)
    )
    y = np.exp(log_y)
    # Keep the documented open-interval contract at float resolution.
    tiny = np.nextafter(0.0, 1.0)
    below_one = np.nextafter(1.0, 0.0)
    y = np.clip(y, tiny, below_one)
    return float(y) if scalar else y


def sample_ppp_top_k(k: int, rng: np.random.Generator, beta: float | None = None) -> PPPSample:
    """The k largest atoms of a PPP(exp(-x) dx), ranked decreasingly.

    The atoms are x_j = -log(G_j) with G_j the ordered arrival times of a
    unit-rate Poisson process on the positive axis (cumulative sums of
    standard exponentials); the construction is exact, not a truncation of
    some larger sample.  ``cutoff`` is the k-th atom.
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    arrivals = np.cumsum(rng.exponential(size=int(k)))
    points = -np.log(arrivals)
    cutoff = float(points[-1])
    bound = tail_weight_bound(cutoff, beta) if beta is not None else None
    return PPPSample(points=points, cutoff=cutoff, tail_weight_bound=bound)


def sample_ppp_above(
    cutoff: float,
    rng: np.random.Generator,
    beta: float | None = None,
    count_cap: float = PPP_COUNT_CAP,
) -> PPPSample:
    """All atoms of a PPP(exp(-x) dx) above ``cutoff``, ranked decreasingly.

    The atom count is Poisson(exp(-cutoff)) and each atom is cutoff plus a
    standard exponential.  Cutoffs so low that the expected count exceeds
    ``count_cap`` are refused with ResourceCapError.
    """
    mean_count = np.exp(-cutoff)
    if mean_count > count_cap:
        raise ResourceCapError(
            f"expected atom count {mean_count:.3g} above cutoff {cutoff} "
            f"exceeds cap {count_cap:.3g}; raise the cutoff"
        )
    n = rng.poisson(mean_count)
    points = np.sort(cutoff + rng.exponential(size=n))[::-1]
    bound = tail_weight_bound(cutoff, beta) if beta is not None else None
    return PPPSample(points=points, cutoff=float(cutoff), tail_weight_bound=bound)


def sample_ppp_band(lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    """Atoms of a PPP(exp(-x) dx) in (lo, hi), ranked decreasingly.

    Exact by restriction independence: count ~ Poisson(exp(-lo) - exp(-hi)),
    positions i.i.d. with the normalized intensity on the band (inverse CDF).
    """
    if not lo < hi:
        raise ParameterError(f"need lo < hi, got ({lo}, {hi})")
    mass = np.exp(-lo) - np.exp(-hi)
    if mass > PPP_COUNT_CAP:
        raise ResourceCapError(
            f"expected atom count {mass:.3g} in band ({lo}, {hi}) exceeds cap"
        )
    n = rng.poisson(mass)
    u = rng.random(size=n)
    points = -np.log(np.exp(-hi) + u * mass)
    return np.sort(points)[::-1]


def tail_weight_bound(cutoff: float, beta: float) -> float:
    """Expected total weight exp(beta*x) of the PPP atoms below ``cutoff``.

    Equals exp((beta-1)*cutoff) / (beta-1); finite only for beta > 1, which is
    the same constraint that makes exponential-weight selection well defined.
    """
    if not beta > 1.0:
        raise ParameterError(f"weight exponent must exceed 1, got {beta}")
    return float(np.exp((beta - 1.0) * cutoff) / (beta - 1.0))


def _residual_pass(y: np.ndarray):
    """Linear weights and residuals coupled so 1 - sum(v) = m holds exactly.

    The residual is carried as a compensated (value, error) pair through
    error-free two-sum steps, so every m_j is the correctly rounded value of
    1 - v_1 - ... - v_j even when it is many orders of magnitude below the
    individual weights.  A plain cumulative product drifts by an absolute
    O(n * eps), which swamps small residuals.
    """
    n = y.shape[0]
    v = np.empty(n)
    m = np.empty(n)
    hi, lo = 1.0, 0.0
    for i, yi in enumerate(y.tolist()):
        vi = hi * yi
        t = hi - vi
        err = (hi - t) - vi  # exact: t + err == hi - vi (Fast2Sum, hi >= vi)
        lo += err
        # renormalize the pair
        hi = t + lo
        lo = (t - hi) + lo
        v[i] = vi
        m[i] = hi
    return v, m


def stick_breaking(params: PDParams, n: int, rng: np.random.Generator) -> StickSample:
    """Break the stick n times with fractions Y_j ~ Beta(1-alpha, theta+j*alpha).

    Products are accumulated in log space (the residual mass decays
    polynomially and its log is the quantity of interest), while the linear
    ``v``/``m`` arrays come from a compensated residual pass that preserves
    the telescoping identity 1 - sum(v) = m at float64 resolution.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    alpha, theta = params.alpha, params.theta
    j = np.arange(1, n + 1, dtype=float)
    log_y, log_1my = _log_beta_pair(
        np.full(n, 1.0 - alpha), theta + j * alpha, rng, size=(n,)
    )
    log_m = np.cumsum(log_1my)
    log_v = log_y + np.concatenate(([0.0], log_m[:-1]))

    y = np.exp(log_y)
    v, m = _residual_pass(y)

    s = np.cumsum(np.exp(alpha * log_y) * j ** (alpha - 1.0))
    sigma = np.cumsum(np.exp(alpha * log_v))
    return StickSample(
        params=params, y=y, v=v, m=m, s=s, sigma=sigma, log_v=log_v, log_m=log_m
    )


def stick_logs(params: PDParams, n: int, rng: np.random.Generator):
    """(log v, log m) alone, skipping the linear arrays.

    Consumes the generator exactly like ``stick_breaking`` (same draws in the
    same order), so the values agree bit for bit with the full sample; use it
    where only log-scale quantities matter and n is large.
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    j = np.arange(1, n + 1, dtype=float)
    log_y, log_1my = _log_beta_pair(
        np.full(n, 1.0 - params.alpha), params.theta + j * params.alpha, rng, size=(n,)
    )
    log_m = np.cumsum(log_1my)
    log_v = log_y + np.concatenate(([0.0], log_m[:-1]))
    return log_v, log_m


def psi_alpha(alpha: float) -> float:
    """The centering constant alpha**(-alpha) / Gamma(1 - alpha)."""
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    return float(np.exp(-alpha * np.log(alpha) - gammaln(1.0 - alpha)))


def phi_moment(params: PDParams, gamma: float) -> float:
    """Limit moment of the rescaled residual mass.

    E[(n**((1-alpha)/alpha) * m_n)**gamma] converges to

        alpha**gamma * G(theta+1) * G((theta+gamma)/alpha + 1)
                     / (G(theta+gamma+1) * G(theta/alpha + 1))

    with G the Gamma function; the moment diverges at gamma <= -(theta+alpha).
    """
    alpha, theta = params.alpha, params.theta
    if not gamma > -(theta + alpha):
        raise ParameterError(
            f"gamma must exceed -(theta + alpha) = {-(theta + alpha)}, got {gamma}"
        )
    log_val = (
        gamma * np.log(alpha)
        + gammaln(theta + 1.0)
        + gammaln((theta + gamma) / alpha + 1.0)
        - gammaln(theta + gamma + 1.0)
        - gammaln(theta / alpha + 1.0)
    )
    return float(np.exp(log_val))


def mittag_leffler_moment(alpha: float, p: float) -> float:
    """p-th moment of the Mittag-Leffler(alpha) law: G(p+1) / (G(p*alpha+1) * G(1-alpha)**p)."""
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    if not p > -1.0:
        raise ParameterError(f"p must exceed -1, got {p}")
    log_val = gammaln(p + 1.0) - gammaln(p * alpha + 1.0) - p * gammaln(1.0 - alpha)
    return float(np.exp(log_val))
