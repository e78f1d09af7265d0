"""Randomly perturbed distributions via binned random reweighting.

A target law on [0, 1] is split into ``m`` equal bins; each of ``K``
perturbed distributions multiplies the bin probabilities by i.i.d. positive
random weights ``W_j^k`` and renormalizes. Arbitrary data spaces are reached
through a measurable transform ``h`` applied to the reweighted uniform, so a
single weight scheme induces a dense, correlated shift of every functional
of the data distribution at once.

The strength and correlation of the induced shifts is summarized by the
distributional covariance matrix

    sigma_w[i, j] = Cov(W^i, W^j) / (E[W^i] E[W^j]),

which every scheme here can report analytically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import gamma as gamma_dist

from .rng import split_uniform, substream

_RESAMPLE_CAP = 100

__all__ = [
    "WeightLaw",
    "lognormal_law",
    "gamma_law",
    "uniform_law",
    "IndependentWeights",
    "GaussianCopulaWeights",
    "RandomWalkWeights",
    "MixtureWeights",
    "PerturbationScheme",
    "PerturbedWorld",
    "realize_world",
    "sample_uniform",
    "sample_dataset",
    "shift_target",
    "TargetDistribution",
    "uniform_target",
    "gaussian_target",
    "exponential_target",
    "table_target",
    "multivariate_target",
]


class PerturbError(RuntimeError):
    """Raised when a weight scheme cannot produce valid (positive) weights."""


# ---------------------------------------------------------------------------
# Marginal weight laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightLaw:
    """Marginal law of one bin weight; must have positive support.

    Families
    --------
    lognormal : params = (mu, sigma) of the underlying normal
    gamma     : params = (shape, scale)
    uniform   : params = (lo, hi) with lo > 0 (lo == hi gives constant
                weights, i.e. no perturbation)
    """

    family: str
    a: float
    b: float

    def __post_init__(self):
        if self.family == "lognormal":
            if self.b < 0:
                raise ValueError("lognormal sigma must be >= 0")
        elif self.family == "gamma":
            if self.a <= 0 or self.b <= 0:
                raise ValueError("gamma shape and scale must be > 0")
        elif self.family == "uniform":
            if self.a <= 0 or self.b < self.a:
                raise ValueError("uniform weight law needs 0 < lo <= hi")
        else:
            raise ValueError(f"unknown weight family {self.family!r}")

    @property
    def mean(self) -> float:
        if self.family == "lognormal":
            return math.exp(self.a + 0.5 * self.b**2)
        if self.family == "gamma":
            return self.a * self.b
        return 0.5 * (self.a + self.b)

    @property
    def var(self) -> float:
        if self.family == "lognormal":
            return (math.exp(self.b**2) - 1.0) * math.exp(2 * self.a + self.b**2)
        if self.family == "gamma":
            return self.a * self.b**2
        return (self.b - self.a) ** 2 / 12.0

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.family == "lognormal":
            return rng.lognormal(self.a, self.b, size=size)
        if self.family == "gamma":
            return rng.gamma(self.a, self.b, size=size)
        return rng.uniform(self.a, self.b, size=size)

    def ppf(self, q: np.ndarray) -> np.ndarray:
        if self.family == "lognormal":
            return np.exp(self.a + self.b * ndtri(q))
        if self.family == "gamma":
            return gamma_dist.ppf(q, self.a, scale=self.b)
        return self.a + (self.b - self.a) * np.asarray(q)


def lognormal_law(mu: float = 0.0, sigma: float = 0.5) -> WeightLaw:
    return WeightLaw("lognormal", mu, sigma)


def gamma_law(shape: float, scale: float) -> WeightLaw:
    return WeightLaw("gamma", shape, scale)


def uniform_law(lo: float, hi: float) -> WeightLaw:
    return WeightLaw("uniform", lo, hi)


# ---------------------------------------------------------------------------
# Weight models (joint law across the K distributions)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndependentWeights:
    """Weights drawn independently across distributions and bins."""

    laws: tuple[WeightLaw, ...]

    @property
    def n_dists(self) -> int:
        return len(self.laws)

    def mean_w(self) -> np.ndarray:
        return np.array([law.mean for law in self.laws])

    def sigma_w(self) -> np.ndarray:
        rel = [law.var / law.mean**2 for law in self.laws]
        return np.diag(rel)

    def draw(self, rng: np.random.Generator, m: int) -> np.ndarray:
        return np.stack([law.draw(rng, m) for law in self.laws])


@dataclass(frozen=True)
class GaussianCopulaWeights:
    """Cross-distribution correlation via shared Gaussian innovations.

    Per bin, one multivariate normal draw with correlation ``copula_corr``
    is mapped through the marginal quantile functions. For lognormal
    marginals the induced relative covariance is exact
    (``exp(sigma_i sigma_j rho) - 1``); for other marginals it is computed
    by Gauss-Hermite quadrature, so the achieved sigma_w (and its distortion
    from the requested copula correlation) is always reported analytically.
    """

    laws: tuple[WeightLaw, ...]
    copula_corr: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        c = np.asarray(self.copula_corr, dtype=float)
        k = len(self.laws)
        if c.shape != (k, k):
            raise ValueError("copula_corr must be K x K")
        if not np.allclose(c, c.T):
            raise ValueError("copula_corr must be symmetric")
        if not np.allclose(np.diag(c), 1.0):
            raise ValueError("copula_corr must have unit diagonal")
        if np.linalg.eigvalsh(c).min() < -1e-10:
            raise ValueError("copula_corr must be positive semidefinite")

    @property
    def n_dists(self) -> int:
        return len(self.laws)

    def _corr(self) -> np.ndarray:
        return np.asarray(self.copula_corr, dtype=float)

    def mean_w(self) -> np.ndarray:
        return np.array([law.mean for law in self.laws])

    def sigma_w(self) -> np.ndarray:
        corr = self._corr()
        k = self.n_dists
        out = np.empty((k, k))
        for i in range(k):
            out[i, i] = self.laws[i].var / self.laws[i].mean**2
            for j in range(i + 1, k):
                out[i, j] = out[j, i] = _copula_rel_cov(
                    self.laws[i], self.laws[j], corr[i, j]
                )
        return out

    def draw(self, rng: np.random.Generator, m: int) -> np.ndarray:
        corr = self._corr()
        chol = np.linalg.cholesky(corr + 1e-14 * np.eye(self.n_dists))
        z = chol @ rng.standard_normal((self.n_dists, m))
        q = _clip_unit(ndtr(z))
        return np.stack([law.ppf(q[i]) for i, law in enumerate(self.laws)])


def _clip_unit(q: np.ndarray) -> np.ndarray:
    # keep quantile arguments strictly inside (0, 1); the clipped mass is
    # below 1e-16 and irrelevant at any achievable Monte Carlo precision
    return np.clip(q, 1e-16, 1.0 - 1e-16)


def _copula_rel_cov(law_i: WeightLaw, law_j: WeightLaw, rho: float) -> float:
    """Cov(W_i, W_j) / (E W_i E W_j) under a Gaussian copula with corr rho."""
    if law_i.family == "lognormal" and law_j.family == "lognormal":
        return math.exp(law_i.b * law_j.b * rho) - 1.0
    if rho == 0.0:
        return 0.0
    # E[g_i(Z1) g_j(Z2)] with Z2 = rho Z1 + sqrt(1-rho^2) Z, by nested
    # Gauss-Hermite quadrature on the probabilists' weight.
    nodes, wts = np.polynomial.hermite_e.hermegauss(64)
    wts = wts / math.sqrt(2 * math.pi)
    gi = law_i.ppf(_clip_unit(ndtr(nodes)))
    s = math.sqrt(max(0.0, 1.0 - rho * rho))
    z2 = rho * nodes[:, None] + s * nodes[None, :]
    gj = law_j.ppf(_clip_unit(ndtr(z2)))
    e_prod = float(wts @ (gj @ wts * gi))
    return e_prod / (law_i.mean * law_j.mean) - 1.0


@dataclass(frozen=True)
class RandomWalkWeights:
    """Time-ordered distributions: each weight is the previous one plus
    an independent mean-zero Gaussian innovation (per bin)."""

    base: WeightLaw
    innovation_sd: float
    n_dists: int

    def __post_init__(self):
        if self.innovation_sd < 0:
            raise ValueError("innovation_sd must be >= 0")
        if self.n_dists < 1:
            raise ValueError("n_dists must be >= 1")

    def mean_w(self) -> np.ndarray:
        return np.full(self.n_dists, self.base.mean)

    def sigma_w(self) -> np.ndarray:
        k = self.n_dists
        idx = np.arange(k)
        steps = np.minimum.outer(idx, idx).astype(float)
        cov = self.base.var + self.innovation_sd**2 * steps
        return cov / self.base.mean**2

    def draw(self, rng: np.random.Generator, m: int) -> np.ndarray:
        w = np.empty((self.n_dists, m))
        w[0] = self.base.draw(rng, m)
        for k in range(1, self.n_dists):
            w[k] = w[k - 1] + rng.normal(0.0, self.innovation_sd, size=m)
        bad = np.where((w <= 0).any(axis=0))[0]
        for _ in range(_RESAMPLE_CAP):
            if bad.size == 0:
                break
            w[0, bad] = self.base.draw(rng, bad.size)
            for k in range(1, self.n_dists):
                w[k, bad] = w[k - 1, bad] + rng.normal(
                    0.0, self.innovation_sd, size=bad.size
                )
            bad = bad[(w[:, bad] <= 0).any(axis=0)]
        if bad.size:
            raise PerturbError(
                "nonpositive weights persisted after "
                f"{_RESAMPLE_CAP} resampling rounds; reduce innovation_sd"
            )
        return w


@dataclass(frozen=True)
class MixtureWeights:
    """Some distributions are noisy convex-ish combinations of base ones.

    ``coefficients[d][b]`` weights base ``b`` in derived distribution ``d``;
    each derived weight adds independent N(0, noise_sd[d]^2) noise. The
    resulting sigma_w follows from bilinearity of covariance.
    """

    base_laws: tuple[WeightLaw, ...]
    coefficients: tuple[tuple[float, ...], ...]
    noise_sd: tuple[float, ...]

    def __post_init__(self):
        b = len(self.base_laws)
        for row in self.coefficients:
            if len(row) != b:
                raise ValueError("each coefficient row must have one entry per base law")
        if len(self.noise_sd) != len(self.coefficients):
            raise ValueError("need one noise_sd per derived distribution")
        if any(s < 0 for s in self.noise_sd):
            raise ValueError("noise_sd must be >= 0")

    @property
    def n_dists(self) -> int:
        return len(self.base_laws) + len(self.coefficients)

    def mean_w(self) -> np.ndarray:
        base_means = np.array([law.mean for law in self.base_laws])
        derived = [float(np.dot(row, base_means)) for row in self.coefficients]
        return np.concatenate([base_means, derived])

    def sigma_w(self) -> np.ndarray:
        b = len(self.base_laws)
        d = len(self.coefficients)
        base_var = np.array([law.var for law in self.base_laws])
        c = np.asarray(self.coefficients, dtype=float)  # (d, b)
        cov = np.zeros((b + d, b + d))
        cov[:b, :b] = np.diag(base_var)
        cov[b:, :b] = c * base_var[None, :]
        cov[:b, b:] = cov[b:, :b].T
        cov[b:, b:] = (c * base_var[None, :]) @ c.T + np.diag(
            np.asarray(self.noise_sd) ** 2
        )
        means = self.mean_w()
        if np.any(means <= 0):
            raise ValueError("derived mixture weights must have positive mean")
        return cov / np.outer(means, means)

    def draw(self, rng: np.random.Generator, m: int) -> np.ndarray:
        base = np.stack([law.draw(rng, m) for law in self.base_laws])
        c = np.asarray(self.coefficients, dtype=float)
        derived = c @ base
        for d_idx in range(derived.shape[0]):
            derived[d_idx] += rng.normal(0.0, self.noise_sd[d_idx], size=m)
            bad = np.where(derived[d_idx] <= 0)[0]
            for _ in range(_RESAMPLE_CAP):
                if bad.size == 0:
                    break
                derived[d_idx, bad] = c[d_idx] @ base[:, bad] + rng.normal(
                    0.0, self.noise_sd[d_idx], size=bad.size
                )
                bad = bad[derived[d_idx, bad] <= 0]
            if bad.size:
                raise PerturbError(
                    "nonpositive weight realized in mixture component "
                    f"{d_idx} after {_RESAMPLE_CAP} resampling rounds; "
                    "reduce noise_sd"
                )
        return np.concatenate([base, derived], axis=0)


# ---------------------------------------------------------------------------
# Scheme and realized world
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationScheme:
    """Generative recipe for one realized set of perturbed distributions."""

    m: int
    weight_law: IndependentWeights | GaussianCopulaWeights | RandomWalkWeights | MixtureWeights
    seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("need at least m = 2 bins")

    @property
    def n_dists(self) -> int:
        return self.weight_law.n_dists


@dataclass(frozen=True)
class PerturbedWorld:
    """One realization of bin weights plus the analytic sigma_w.

    Immutable after construction; sampling takes an explicit generator, so
    worlds are safe to share across threads.
    """

    weights: np.ndarray  # (K, m)
    sigma_w: np.ndarray  # (K, K)
    mean_w: np.ndarray  # (K,)
    m: int

    def __post_init__(self):
        if self.weights.shape != (self.sigma_w.shape[0], self.m):
            raise ValueError("weights must be (K, m)")
        if not np.allclose(self.sigma_w, self.sigma_w.T):
            raise ValueError("sigma_w must be symmetric")
        if np.linalg.eigvalsh(self.sigma_w).min() < -1e-8:
            raise ValueError("sigma_w must be positive semidefinite")
        if np.any(self.weights <= 0):
            raise ValueError("all realized weights must be strictly positive")

    @property
    def n_dists(self) -> int:
        return self.weights.shape[0]


def realize_world(scheme: PerturbationScheme, rng: np.random.Generator | None = None) -> PerturbedWorld:
    """Draw the bin-weight matrix for one world.

    Reproducible: with ``rng`` omitted, the stream is derived from
    ``scheme.seed`` alone.
    """
    if rng is None:
        rng = substream(scheme.seed, lane=0)
    w = scheme.weight_law.draw(rng, scheme.m)
    return PerturbedWorld(
        weights=w,
        sigma_w=scheme.weight_law.sigma_w(),
        mean_w=scheme.weight_law.mean_w(),
        m=scheme.m,
    )


def sample_uniform(world: PerturbedWorld, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n values from the k-th reweighted uniform distribution.

    A bin is selected with probability proportional to its weight, then the
    value is uniform within the bin. Conditioned on the weights the draws
    are i.i.d.
    """
    if not 0 <= k < world.n_dists:
        raise IndexError(f"dataset index {k} out of range [0, {world.n_dists})")
    if n < 1:
        raise ValueError("n must be >= 1")
    w = world.weights[k]
    cum = np.cumsum(w / w.sum())
    cum[-1] = 1.0
    bins = np.searchsorted(cum, rng.random(n), side="right")
    return (bins + rng.random(n)) / world.m


def sample_dataset(
    world: PerturbedWorld,
    k: int,
    n: int,
    target: "TargetDistribution",
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample n rows from the k-th perturbed version of ``target``.

    Returns shape (n,) for scalar targets and (n, d) for multivariate ones.
    """
    u = sample_uniform(world, k, n, rng)
    return target.transform(u)


def shift_target(world: PerturbedWorld) -> PerturbedWorld:
    """Re-express a (K+1)-distribution world relative to its last member.

    The last weight row is designated as the new reference distribution; the
    remaining K keep their realized weights, and sigma_w becomes
    ``A sigma_w A^T`` with ``A = [I_K | -1]``, the covariance of shifts
    measured against the new (itself random) reference.
    """
    kp1 = world.n_dists
    if kp1 < 2:
        raise ValueError("need at least 2 distributions to designate a new target")
    k = kp1 - 1
    a = np.hstack([np.eye(k), -np.ones((k, 1))])
    return PerturbedWorld(
        weights=world.weights[:k],
        sigma_w=a @ world.sigma_w @ a.T,
        mean_w=world.mean_w[:k],
        m=world.m,
    )


# ---------------------------------------------------------------------------
# Target distributions (transforms of the uniform)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetDistribution:
    """A data law written as a measurable transform of a uniform variable.

    ``transform`` maps an array of uniforms in (0, 1) to data: shape (n,)
    for scalar laws or (n, d) for multivariate ones. ``moments``, when
    known, holds the declared (mean, variance) per coordinate so that the
    transform can be validated against its intended law.
    """

    name: str
    transform: Callable[[np.ndarray], np.ndarray]
    columns: tuple[str, ...] | None = None
    moments: tuple[tuple[float, float], ...] | None = None


def uniform_target() -> TargetDistribution:
    return TargetDistribution("uniform", lambda u: u, moments=((0.5, 1.0 / 12.0),))


def gaussian_target(mean: float = 0.0, sd: float = 1.0) -> TargetDistribution:
    return TargetDistribution(
        f"gaussian({mean}, {sd})",
        lambda u: mean + sd * ndtri(u),
        moments=((mean, sd**2),),
    )


def exponential_target(rate: float = 1.0) -> TargetDistribution:
    if rate <= 0:
        raise ValueError("rate must be > 0")
    return TargetDistribution(
        f"exponential({rate})",
        lambda u: -np.log1p(-u) / rate,
        moments=((1.0 / rate, 1.0 / rate**2),),
    )


def table_target(quantiles: Sequence[float], values: Sequence[float]) -> TargetDistribution:
    """Piecewise-linear quantile table: transform(u) = interp(u, quantiles, values)."""
    q = np.asarray(quantiles, dtype=float)
    v = np.asarray(values, dtype=float)
    if q.ndim != 1 or q.shape != v.shape or q.size < 2:
        raise ValueError("quantiles and values must be 1-d arrays of equal length >= 2")
    if q[0] != 0.0 or q[-1] != 1.0 or np.any(np.diff(q) <= 0):
        raise ValueError("quantiles must increase from 0 to 1")
    if np.any(np.diff(v) < 0):
        raise ValueError("values must be nondecreasing")
    return TargetDistribution("table", lambda u: np.interp(u, q, v))


def multivariate_target(
    parts: Sequence[TargetDistribution],
    columns: Sequence[str] | None = None,
    name: str | None = None,
) -> TargetDistribution:
    """Build a multivariate law from one uniform by digit interleaving.

    The single uniform is split into ``len(parts)`` exactly independent
    streams (disjoint mantissa bits) and each part's transform is applied to
    its own stream, giving statistically independent coordinates. Dependent
    coordinates require a user-supplied joint transform instead.
    """
    parts = tuple(parts)
    if len(parts) < 2:
        raise ValueError("need at least two parts")
    if columns is not None and len(columns) != len(parts):
        raise ValueError("columns must match number of parts")

    def transform(u: np.ndarray) -> np.ndarray:
        streams = split_uniform(u, len(parts))
        return np.column_stack([p.transform(streams[i]) for i, p in enumerate(parts)])

    moments = None
    if all(p.moments is not None and len(p.moments) == 1 for p in parts):
        moments = tuple(p.moments[0] for p in parts)
    return TargetDistribution(
        name or "paired(" + ", ".join(p.name for p in parts) + ")",
        transform,
        columns=tuple(columns) if columns is not None else None,
        moments=moments,
    )


def check_regime(m: int, n_min: int, warn_ratio: float = 10.0) -> None:
    """Warn when sampling noise is not clearly dominated by the shift scale."""
    import warnings

    if n_min < warn_ratio * m:
        warnings.warn(
            f"n/m ratio {n_min / m:.1f} is below {warn_ratio:.0f}; sampling "
            "uncertainty may not be negligible relative to distributional "
            "uncertainty",
            stacklevel=2,
        )
