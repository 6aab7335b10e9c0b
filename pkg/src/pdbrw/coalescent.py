"""Partitions, coagulation, merger rates, and coalescent simulators.

Covers three layers: exact combinatorics on partitions of {1..n}
(coagulation, restriction), merger-rate tables for exchangeable coalescents
driven by a finite measure on [0,1] (closed form for the Beta family,
quadrature for anything else), and the two simulators the rate tables are
checked against: the continuous-time coalescent itself and the discrete-time
chain driven by multinomial resampling from Poisson-Dirichlet weights, which
is exactly the one-generation ancestry law of the branching random walk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.special import betaln, gammaln

from .brw import GenealogyRecord
from .distributions import PDParams, stick_logs
from .errors import ParameterError

__all__ = [
    "Partition",
    "LambdaMeasure",
    "RateTable",
    "PDWeights",
    "CoalescentTrajectory",
    "coag",
    "restrict",
    "lambda_rate",
    "total_merger_rate",
    "sample_pd_weights",
    "multinomial_coalescent_step",
    "ancestral_partition",
    "simulate_lambda_coalescent",
    "first_merger_distribution",
]


class Partition:
    """A partition of {1..n} in canonical form.

    Blocks are stored sorted internally and ordered by their least element,
    which makes equality, hashing, and the string codec deterministic.
    """

    __slots__ = ("blocks", "n")

    def __init__(self, blocks, n: int | None = None):
        cleaned = []
        seen = set()
        for block in blocks:
            block = tuple(sorted(set(int(i) for i in block)))
            if not block:
                continue
            if seen & set(block):
                raise ParameterError("blocks must be disjoint")
            seen.update(block)
            cleaned.append(block)
        if not cleaned:
            raise ParameterError("a partition needs at least one nonempty block")
        if n is None:
            n = max(seen)
        if min(seen) < 1 or max(seen) > n or len(seen) != n:
            raise ParameterError(f"blocks must cover 1..{n} exactly")
        cleaned.sort(key=lambda b: b[0])
        self.blocks = tuple(cleaned)
        self.n = n

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls([(i,) for i in range(1, n + 1)], n=n)

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        """Partition grouping positions 1..len(labels) by equal label."""
        groups: dict = {}
        for i, lab in enumerate(labels, start=1):
            groups.setdefault(lab, []).append(i)
        return cls(groups.values(), n=len(labels))

    @classmethod
    def from_string(cls, text: str) -> "Partition":
        return cls([b.split() for b in text.split("|")])

    def to_string(self) -> str:
        return "|".join(" ".join(str(i) for i in b) for b in self.blocks)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def block_of(self, i: int) -> int:
        """Index (1-based, canonical order) of the block containing i."""
        for k, b in enumerate(self.blocks, start=1):
            if i in b:
                return k
        raise ParameterError(f"{i} is not an element of this partition")

    def __eq__(self, other):
        return isinstance(other, Partition) and self.blocks == other.blocks

    def __hash__(self):
        return hash(self.blocks)

    def __repr__(self):
        return f"Partition({self.to_string()!r})"


def coag(pi: Partition, pi_prime: Partition) -> Partition:
    """Coagulate pi by pi_prime: block j of the result is the union of the
    pi-blocks indexed by block j of pi_prime.

    pi_prime must cover {1..pi.n_blocks}; indices beyond that are ignored.
    """
    b = pi.n_blocks
    covered = set()
    merged = []
    for group in pi_prime.blocks:
        members = [i for i in group if i <= b]
        covered.update(members)
        if members:
            merged.append(tuple(sorted(x for i in members for x in pi.blocks[i - 1])))
    if len(covered) != b:
        raise ParameterError(
            f"coagulating partition must cover all {b} blocks, covers {len(covered)}"
        )
    return Partition(merged, n=pi.n)


def restrict(pi: Partition, m: int) -> Partition:
    """Restriction of pi to {1..m}; empty intersections are dropped."""
    if not 1 <= m <= pi.n:
        raise ParameterError(f"m must lie in [1, {pi.n}], got {m}")
    kept = [tuple(i for i in b if i <= m) for b in pi.blocks]
    return Partition([b for b in kept if b], n=m)


@dataclass(frozen=True)
class LambdaMeasure:
    """A finite measure on [0,1] driving an exchangeable coalescent.

    Three kinds: the Beta(2-lam, lam) probability family for lam in (0, 2)
    (lam = 1 is the uniform measure, the Bolthausen-Sznitman coalescent), the
    unit atom at 0 (Kingman: only pairwise mergers), and a general density
    given by a callback.
    """

    kind: str
    lam: float | None = None
    density: Callable[[float], float] | None = None
    total_mass: float = 1.0

    @classmethod
    def beta_family(cls, lam: float) -> "LambdaMeasure":
        if not 0.0 < lam < 2.0:
            raise ParameterError(f"beta-family parameter must lie in (0, 2), got {lam}")
        return cls(kind="beta_family", lam=lam)

    @classmethod
    def kingman(cls) -> "LambdaMeasure":
        return cls(kind="kingman_dirac0")

    @classmethod
    def general(cls, density: Callable[[float], float], total_mass: float) -> "LambdaMeasure":
        return cls(kind="general", density=density, total_mass=float(total_mass))

    def beta_density(self) -> Callable[[float], float]:
        """Density of the Beta(2-lam, lam) member, for quadrature cross-checks."""
        if self.kind != "beta_family":
            raise ParameterError("beta_density is only defined for the beta family")
        lam = self.lam
        norm = math.exp(-gammaln(lam) - gammaln(2.0 - lam))
        return lambda x: norm * x ** (1.0 - lam) * (1.0 - x) ** (lam - 1.0)


def lambda_rate(b: int, k: int, measure: LambdaMeasure) -> float:
    """Rate at which a fixed k-tuple of the current b blocks merges:
    the integral of x**(k-2) (1-x)**(b-k) against the measure.

    Beta family in closed form through log-Beta; the unit atom at 0 gives 1
    for pairs and 0 otherwise; general measures go through adaptive
    quadrature with the endpoints isolated (the density may blow up at either
    end), to 1e-10 absolute.
    """
    if not (k >= 2 and b >= k):
        raise ParameterError(f"need 2 <= k <= b, got k={k}, b={b}")
    if measure.kind == "beta_family":
        lam = measure.lam
        return math.exp(betaln(k - lam, b - k + lam) - betaln(2.0 - lam, lam))
    if measure.kind == "kingman_dirac0":
        return 1.0 if k == 2 else 0.0
    if measure.kind == "general":
        f = measure.density

        def integrand(x):
            return x ** (k - 2) * (1.0 - x) ** (b - k) * f(x)

        val, _ = quad(
            integrand, 0.0, 1.0, points=[0.0, 0.5, 1.0],
            epsabs=1e-12, epsrel=1e-12, limit=500,
        )
        return val
    raise ParameterError(f"unknown measure kind {measure.kind!r}")


def total_merger_rate(b: int, measure: LambdaMeasure) -> float:
    """Total event rate with b blocks: sum over k of C(b,k) * rate(b,k)."""
    return float(
        sum(math.comb(b, k) * lambda_rate(b, k, measure) for k in range(2, b + 1))
    )


@dataclass
class RateTable:
    """Merger rates lambda[b][k] for 2 <= k <= b <= b_max, materialized once."""

    measure: LambdaMeasure
    b_max: int
    rates: dict = field(default_factory=dict)

    @classmethod
    def build(cls, measure: LambdaMeasure, b_max: int) -> "RateTable":
        if b_max < 2:
            raise ParameterError(f"b_max must be >= 2, got {b_max}")
        rates = {
            (b, k): lambda_rate(b, k, measure)
            for b in range(2, b_max + 1)
            for k in range(2, b + 1)
        }
        return cls(measure=measure, b_max=b_max, rates=rates)

    def rate(self, b: int, k: int) -> float:
        return self.rates[(b, k)]

    def rows(self):
        """(b, k, rate) triples in deterministic order, for export."""
        for b in range(2, self.b_max + 1):
            for k in range(2, b + 1):
                yield b, k, self.rates[(b, k)]


@dataclass
class PDWeights:
    """Multinomial resampling weights built from one stick-breaking draw.

    ``theta[j]`` is proportional to v[j]**alpha (sampling order) and the
    whole vector sums to 1; ``order_stats`` is the same vector sorted
    decreasingly.
    """

    params: PDParams
    theta: np.ndarray
    order_stats: np.ndarray

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    def pair_coalescence_probability(self) -> float:
        """Probability two tagged lineages pick the same parent, given the weights."""
        return float(np.sum(self.theta**2))


def sample_pd_weights(params: PDParams, n_particles: int, rng: np.random.Generator) -> PDWeights:
    """Draw stick weights of length N and normalize v**alpha to sum to 1."""
    if n_particles < 2:
        raise ParameterError(f"n_particles must be >= 2, got {n_particles}")
    log_w = params.alpha * stick_logs(params, n_particles, rng)[0]
    w = np.exp(log_w - log_w.max())
    theta = w / w.sum()
    return PDWeights(params=params, theta=theta, order_stats=np.sort(theta)[::-1])


def multinomial_coalescent_step(
    pi: Partition, weights: PDWeights, rng: np.random.Generator
) -> Partition:
    """One backward step: every block independently picks a parent label with
    the given probabilities, and blocks with equal labels coagulate."""
    labels = rng.choice(weights.n, size=pi.n_blocks, p=weights.theta)
    return coag(pi, Partition.from_labels(labels))


@dataclass
class CoalescentTrajectory:
    """A coalescent path: partition states at increasing times.

    Times are generation counts for discrete chains and event times for the
    continuous-time coalescent.
    """

    times: list
    states: list

    def n_blocks(self) -> np.ndarray:
        return np.array([s.n_blocks for s in self.states])

    def first_merger_size(self) -> int:
        """Largest block size created at the first non-trivial merger; 0 if
        the trajectory never merges."""
        base = self.states[0]
        for state in self.states[1:]:
            if state.n_blocks < base.n_blocks:
                born = [b for b in state.blocks if b not in base.blocks]
                return max(len(b) for b in born)
            base = state
        return 0


def ancestral_partition(
    genealogy: GenealogyRecord, sample: list, t_back: int
) -> CoalescentTrajectory:
    """Ancestry partitions of a sample from the final recorded generation.

    Time runs backward: state 0 is all singletons; state t groups two sampled
    individuals together when their lineages hit a common ancestor within t
    generations.  ``sample`` holds 0-based individual indices in the final
    generation; ``t_back`` may not exceed the recorded horizon.
    """
    horizon = len(genealogy)
    if t_back > horizon:
        raise ParameterError(f"t_back={t_back} exceeds recorded horizon {horizon}")
    sample = list(sample)
    if len(set(sample)) != len(sample):
        raise ParameterError("sample indices must be distinct")
    lineages = np.asarray(sample, dtype=int)
    states = [Partition.singletons(len(sample))]
    times = [0]
    for t in range(1, t_back + 1):
        parents = genealogy.parents[horizon - t]
        if lineages.min() < 0 or lineages.max() >= parents.shape[0]:
            raise ParameterError("sample index out of range for the recorded genealogy")
        lineages = parents[lineages]
        states.append(Partition.from_labels(lineages.tolist()))
        times.append(t)
    return CoalescentTrajectory(times=times, states=states)


def simulate_lambda_coalescent(
    n: int, measure: LambdaMeasure, rng: np.random.Generator,
    rate_table: RateTable | None = None,
) -> CoalescentTrajectory:
    """Continuous-time coalescent started from n singleton blocks.

    With b blocks the total event rate is sum_k C(b,k) rate(b,k); waiting
    times are exponential, the merger size k is drawn proportionally to
    C(b,k) rate(b,k), and the k merging blocks are uniform.  Stops at one
    block.
    """
    if n < 2:
        raise ParameterError(f"n must be >= 2, got {n}")
    if rate_table is None:
        rate_table = RateTable.build(measure, n)
    state = Partition.singletons(n)
    t = 0.0
    times, states = [t], [state]
    while state.n_blocks > 1:
        b = state.n_blocks
        by_size = np.array(
            [math.comb(b, k) * rate_table.rate(b, k) for k in range(2, b + 1)]
        )
        total = by_size.sum()
        t += rng.exponential(1.0 / total)
        k = 2 + rng.choice(b - 1, p=by_size / total)
        chosen = rng.choice(b, size=k, replace=False)
        group_blocks = [tuple(int(i) + 1 for i in chosen)]
        group_blocks += [(i,) for i in range(1, b + 1) if i - 1 not in chosen]
        state = coag(state, Partition(group_blocks, n=b))
        times.append(t)
        states.append(state)
    return CoalescentTrajectory(times=times, states=states)


def first_merger_distribution(n: int, measure: LambdaMeasure) -> np.ndarray:
    """Probability that the first merger among n blocks has size k, for
    k = 2..n: C(n,k) rate(n,k) / total rate."""
    if n < 2:
        raise ParameterError(f"n must be >= 2, got {n}")
    by_size = np.array(
        [math.comb(n, k) * lambda_rate(n, k, measure) for k in range(2, n + 1)]
    )
    return by_size / by_size.sum()
