"""Natural exponential families on the natural-parameter scale.

Each family is the one-dimensional density

    p(x | theta) = exp(x * theta + h(x) - g(theta)),

where g is the log-cumulant (log-partition) function and h the log base
measure.  Everything downstream works with theta directly, never with the
mean parametrisation, so the only things a family has to provide are g,
its derivative (the mean map), h, the domain of theta, the support of x,
a sampler, and the conjugate-prior kernel

    log k(theta; lam, nu) = lam * theta - nu * g(theta),

which is the log density (up to normalisation) of the standard conjugate
prior with hyperparameters (lam, nu).

All functions broadcast over numpy arrays and accept scalars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

LOG_2PI = math.log(2.0 * math.pi)


class DomainError(ValueError):
    """A natural parameter lies outside the family's domain."""


class SupportError(ValueError):
    """An observation lies outside the family's support."""


@dataclass(frozen=True)
class ConjugateHyper:
    """Hyperparameters of the conjugate kernel exp(lam*theta - nu*g(theta)).

    nu acts as a prior pseudo-count and must be positive; lam is the prior
    pseudo-sum of observations.  Families put extra constraints on lam
    (checked by Family.validate_hyper): for Bernoulli the implied Beta
    parameters lam+1 and nu-lam+1 must be positive, so 0 < lam < nu is
    required there.
    """

    lam: float
    nu: float

    def __post_init__(self):
        if not (np.isfinite(self.lam) and np.isfinite(self.nu)):
            raise ValueError("conjugate hyperparameters must be finite")
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")


class Family:
    """Base class; concrete families are stateless singletons."""

    name = "base"

    # domain / support ----------------------------------------------------

    def in_domain(self, theta):
        """Elementwise check that theta is a valid natural parameter."""
        raise NotImplementedError

    def in_support(self, x):
        """Elementwise check that x is a possible observation."""
        raise NotImplementedError

    def _require_domain(self, theta):
        ok = self.in_domain(theta)
        if not np.all(ok):
            raise DomainError(f"{self.name}: natural parameter outside domain")

    def _require_support(self, x):
        ok = self.in_support(x)
        if not np.all(ok):
            raise SupportError(f"{self.name}: observation outside support")

    # the four defining functions -----------------------------------------

    def log_cumulant(self, theta):
        """g(theta).  Raises DomainError outside the domain."""
        self._require_domain(theta)
        return self._g(theta)

    def mean_param(self, theta):
        """g'(theta), the mean of x under theta."""
        self._require_domain(theta)
        return self._gprime(theta)

    def log_base(self, x):
        """h(x).  Raises SupportError outside the support."""
        self._require_support(x)
        return self._h(x)

    def log_pdf(self, x, theta):
        """log p(x | theta) = x*theta + h(x) - g(theta)."""
        self._require_support(x)
        self._require_domain(theta)
        return self.log_pdf_unchecked(x, theta)

    def log_pdf_unchecked(self, x, theta):
        # hot path for the likelihood; caller has already validated
        return np.asarray(x) * np.asarray(theta) + self._h(x) - self._g(theta)

    def conj_log_kernel(self, theta, hyper: ConjugateHyper):
        """lam*theta - nu*g(theta), elementwise."""
        self._require_domain(theta)
        return hyper.lam * np.asarray(theta, dtype=float) - hyper.nu * self._g(theta)

    def sample(self, theta, rng: np.random.Generator):
        """Draw x ~ p(. | theta) elementwise."""
        self._require_domain(theta)
        return self._sample(theta, rng)

    def validate_hyper(self, hyper: ConjugateHyper):
        """Raise ValueError if (lam, nu) is not admissible for this family."""
        # nu > 0 is already enforced by ConjugateHyper

    # internals ------------------------------------------------------------

    def _g(self, theta):
        raise NotImplementedError

    def _gprime(self, theta):
        raise NotImplementedError

    def _h(self, x):
        raise NotImplementedError

    def _sample(self, theta, rng):
        raise NotImplementedError

    def __repr__(self):
        return f"<family {self.name}>"


class BernoulliLogit(Family):
    """x in {0, 1}, theta the log-odds, g(theta) = log(1 + e^theta).

    The conjugate prior with kernel exp(lam*theta - nu*g(theta)) is a
    Beta(lam + 1, nu - lam + 1) on the mean scale.
    """

    name = "bernoulli"

    def in_domain(self, theta):
        return np.isfinite(theta)

    def in_support(self, x):
        x = np.asarray(x)
        return (x == 0) | (x == 1)

    def _g(self, theta):
        # overflow-safe log(1 + e^theta): logaddexp branches at theta = 0
        return np.logaddexp(0.0, theta)

    def _gprime(self, theta):
        return special.expit(theta)

    def _h(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def _sample(self, theta, rng):
        p = special.expit(theta)
        return (rng.random(size=np.shape(theta)) < p).astype(float)

    def validate_hyper(self, hyper):
        if not (0.0 < hyper.lam < hyper.nu):
            raise ValueError(
                f"bernoulli needs 0 < lam < nu for a proper Beta prior, "
                f"got lam={hyper.lam}, nu={hyper.nu}"
            )


class PoissonLog(Family):
    """x in {0, 1, 2, ...}, theta the log-rate, g(theta) = e^theta."""

    name = "poisson"

    def in_domain(self, theta):
        return np.isfinite(theta)

    def in_support(self, x):
        x = np.asarray(x)
        return np.isfinite(x) & (x >= 0) & (x == np.floor(x))

    def _g(self, theta):
        with np.errstate(over="ignore"):
            return np.exp(theta)

    def _gprime(self, theta):
        with np.errstate(over="ignore"):
            return np.exp(theta)

    def _h(self, x):
        return -special.gammaln(np.asarray(x, dtype=float) + 1.0)

    def _sample(self, theta, rng):
        rate = np.exp(theta)
        if np.any(rate > 1e15):
            raise ValueError("poisson rate too large to sample")
        return rng.poisson(rate, size=np.shape(theta)).astype(float)


class GaussianUnitVariance(Family):
    """x real with unit variance, theta the mean, g(theta) = theta^2 / 2."""

    name = "gaussian"

    def in_domain(self, theta):
        return np.isfinite(theta)

    def in_support(self, x):
        return np.isfinite(x)

    def _g(self, theta):
        theta = np.asarray(theta, dtype=float)
        return 0.5 * theta * theta

    def _gprime(self, theta):
        return np.asarray(theta, dtype=float)

    def _h(self, x):
        x = np.asarray(x, dtype=float)
        return -0.5 * x * x - 0.5 * LOG_2PI

    def _sample(self, theta, rng):
        return np.asarray(theta, dtype=float) + rng.standard_normal(np.shape(theta))


class ExponentialRate(Family):
    """x >= 0 with rate -theta, theta < 0, g(theta) = -log(-theta).

    The domain is the open half-line; the rest of the code must keep
    iterates strictly negative, which the prior does via its -inf region.
    """

    name = "exponential"

    def in_domain(self, theta):
        theta = np.asarray(theta)
        return np.isfinite(theta) & (theta < 0)

    def in_support(self, x):
        x = np.asarray(x)
        return np.isfinite(x) & (x >= 0)

    def _g(self, theta):
        return -np.log(-np.asarray(theta, dtype=float))

    def _gprime(self, theta):
        return -1.0 / np.asarray(theta, dtype=float)

    def _h(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def _sample(self, theta, rng):
        scale = -1.0 / np.asarray(theta, dtype=float)
        return rng.exponential(scale, size=np.shape(theta))


BERNOULLI = BernoulliLogit()
POISSON = PoissonLog()
GAUSSIAN_UNIT = GaussianUnitVariance()
EXPONENTIAL = ExponentialRate()

FAMILIES = {
    "bernoulli": BERNOULLI,
    "bernoulli_logit": BERNOULLI,
    "poisson": POISSON,
    "poisson_log": POISSON,
    "gaussian": GAUSSIAN_UNIT,
    "gaussian_unit": GAUSSIAN_UNIT,
    "exponential": EXPONENTIAL,
    "exponential_rate": EXPONENTIAL,
}


def get_family(name) -> Family:
    """Look up a family by name; passes Family instances through."""
    if isinstance(name, Family):
        return name
    try:
        return FAMILIES[str(name).lower()]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; known: bernoulli, poisson, "
                         f"gaussian, exponential") from None
