"""Response families for circular local likelihood fitting.

Each family supplies the per-observation log-likelihood contribution
l(g, y) in the transformed mean g, its first two derivatives, the link
between the conditional mean and g, and how the variance of the score
is estimated: case A families expose a known variance function v(g),
case B families defer to a pilot estimator.

Conventions that matter downstream:

* Normal: the dispersion sigma scales the objective but not its
  maximizer, so fitting profiles it out (default sigma = 1).  Where a
  variance is genuinely needed the family is treated as case B.
* Gamma: the full likelihood needs the unknown shape, so the fit uses
  the quasi-likelihood in the log mean, l(g, y) = -y*exp(-g) - g, whose
  score has the same root in g; the shape only enters simulation.
* Poisson drops the log(y!) term (constant in g).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, logit

from .errors import InvalidArgumentError, ResponseDomainError
from .quadrature import wrap_angles


@dataclass(frozen=True)
class Family:
    """Base response family; concrete families override the numerics."""

    name = "base"
    var_case = "B"

    def loglik(self, g, y):
        raise NotImplementedError

    def score(self, g, y):
        raise NotImplementedError

    def curvature(self, g, y):
        raise NotImplementedError

    def link(self, mu):
        """Transformation T mapping the conditional mean to g."""
        raise NotImplementedError

    def inv_link(self, g):
        raise NotImplementedError

    def expected_curvature(self, g):
        """E[l''(g, Y) | g true], used by Fisher scoring working responses."""
        raise NotImplementedError

    def variance_function(self, g):
        """v(g) = Var[l'(g, Y) | g true] for case A families, else None."""
        return None

    def validate_responses(self, y):
        raise NotImplementedError

    def draw(self, rng, g):
        """Sample responses with transformed mean g (simulation use)."""
        raise NotImplementedError

    def init_mean(self, mean):
        """Clamp a raw weighted response mean into the link's domain."""
        return mean


@dataclass(frozen=True)
class NormalFamily(Family):
    sigma: float = 1.0

    name = "normal"
    var_case = "B"

    def loglik(self, g, y):
        return -0.5 * (np.asarray(y, float) - g) ** 2 / self.sigma**2

    def score(self, g, y):
        return (np.asarray(y, float) - g) / self.sigma**2

    def curvature(self, g, y):
        return np.broadcast_to(-1.0 / self.sigma**2, np.broadcast(g, y).shape).copy()

    def link(self, mu):
        return np.asarray(mu, float)

    def inv_link(self, g):
        return np.asarray(g, float)

    def expected_curvature(self, g):
        return np.broadcast_to(-1.0 / self.sigma**2, np.shape(g)).copy()

    def validate_responses(self, y):
        bad = ~np.isfinite(y)
        if np.any(bad):
            raise ResponseDomainError(
                f"normal responses must be finite (first bad row {int(np.argmax(bad))})"
            )

    def draw(self, rng, g):
        g = np.asarray(g, float)
        return g + self.sigma * rng.standard_normal(g.shape)


@dataclass(frozen=True)
class BernoulliFamily(Family):
    name = "bernoulli"
    var_case = "A"

    def loglik(self, g, y):
        return np.asarray(y, float) * g - np.logaddexp(0.0, g)

    def score(self, g, y):
        return np.asarray(y, float) - expit(g)

    def curvature(self, g, y):
        p = expit(g)
        return np.broadcast_to(-p * (1.0 - p), np.broadcast(g, y).shape).copy()

    def link(self, mu):
        return logit(mu)

    def inv_link(self, g):
        return expit(g)

    def expected_curvature(self, g):
        p = expit(g)
        return -p * (1.0 - p)

    def variance_function(self, g):
        p = expit(g)
        return p * (1.0 - p)

    def validate_responses(self, y):
        bad = ~np.isin(y, (0.0, 1.0))
        if np.any(bad):
            raise ResponseDomainError(
                f"bernoulli responses must be 0 or 1 (first bad row {int(np.argmax(bad))})"
            )

    def init_mean(self, mean):
        return np.clip(mean, 1e-3, 1.0 - 1e-3)

    def draw(self, rng, g):
        return (rng.random(np.shape(g)) < expit(g)).astype(float)


@dataclass(frozen=True)
class PoissonFamily(Family):
    name = "poisson"
    var_case = "A"

    def loglik(self, g, y):
        # log(y!) dropped: constant in g.
        return np.asarray(y, float) * g - np.exp(g)

    def score(self, g, y):
        return np.asarray(y, float) - np.exp(g)

    def curvature(self, g, y):
        return np.broadcast_to(-np.exp(g), np.broadcast(g, y).shape).copy()

    def link(self, mu):
        return np.log(mu)

    def inv_link(self, g):
        return np.exp(g)

    def expected_curvature(self, g):
        return -np.exp(g)

    def variance_function(self, g):
        return np.exp(g)

    def validate_responses(self, y):
        y = np.asarray(y, float)
        bad = ~np.isfinite(y) | (y < 0) | (y != np.floor(y))
        if np.any(bad):
            raise ResponseDomainError(
                "poisson responses must be nonnegative integers "
                f"(first bad row {int(np.argmax(bad))})"
            )

    def init_mean(self, mean):
        return np.maximum(mean, 1e-8)

    def draw(self, rng, g):
        return rng.poisson(np.exp(g)).astype(float)


@dataclass(frozen=True)
class GammaFamily(Family):
    shape: Optional[float] = None

    name = "gamma"
    var_case = "B"

    def loglik(self, g, y):
        return -np.asarray(y, float) * np.exp(-g) - g

    def score(self, g, y):
        return np.asarray(y, float) * np.exp(-g) - 1.0

    def curvature(self, g, y):
        return -np.asarray(y, float) * np.exp(-g)

    def link(self, mu):
        return np.log(mu)

    def inv_link(self, g):
        return np.exp(g)

    def expected_curvature(self, g):
        # E[Y | g] = exp(g) cancels the exp(-g) factor in l''.
        return np.broadcast_to(-1.0, np.shape(g)).copy()

    def validate_responses(self, y):
        y = np.asarray(y, float)
        bad = ~np.isfinite(y) | (y <= 0)
        if np.any(bad):
            raise ResponseDomainError(
                f"gamma responses must be > 0 (first bad row {int(np.argmax(bad))})"
            )

    def init_mean(self, mean):
        return np.maximum(mean, 1e-8)

    def draw(self, rng, g):
        if self.shape is None:
            raise InvalidArgumentError("gamma simulation needs the shape parameter")
        mu = np.exp(np.asarray(g, float))
        # shape alpha with rate alpha/mu gives mean exactly mu.
        return rng.gamma(self.shape, mu / self.shape)


def normal(sigma=1.0):
    if not np.isfinite(sigma) or sigma <= 0:
        raise InvalidArgumentError("sigma must be positive")
    return NormalFamily(sigma=float(sigma))


def bernoulli():
    return BernoulliFamily()


def poisson():
    return PoissonFamily()


def gamma(shape=None):
    if shape is not None and (not np.isfinite(shape) or shape <= 0):
        raise InvalidArgumentError("gamma shape must be positive")
    return GammaFamily(shape=None if shape is None else float(shape))


_FACTORIES = {"normal": normal, "bernoulli": bernoulli, "poisson": poisson, "gamma": gamma}


def family_by_name(name, **kwargs):
    try:
        return _FACTORIES[name](**kwargs)
    except KeyError:
        raise InvalidArgumentError(f"unknown family {name!r}") from None


@dataclass(frozen=True)
class CircularSample:
    """Paired angles in [0, 2pi) and responses.

    Angles are reduced mod 2pi at construction and both arrays are frozen;
    response validation against a family happens once, at ingestion,
    through :func:`make_sample` (fitting code then trusts the data).
    """

    angles: np.ndarray
    responses: np.ndarray

    def __post_init__(self):
        theta = wrap_angles(np.atleast_1d(np.asarray(self.angles, dtype=float)))
        y = np.atleast_1d(np.asarray(self.responses, dtype=float))
        if theta.ndim != 1 or y.ndim != 1:
            raise InvalidArgumentError("angles and responses must be 1-d")
        if theta.size != y.size or theta.size < 1:
            raise InvalidArgumentError("angles and responses must align, n >= 1")
        if not np.all(np.isfinite(theta)):
            raise InvalidArgumentError("angles must be finite")
        theta.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "angles", theta)
        object.__setattr__(self, "responses", y)

    @property
    def n(self):
        return self.angles.size


def make_sample(angles, responses, family=None):
    """Build a validated CircularSample (family check happens here, once)."""
    sample = CircularSample(angles, responses)
    if family is not None:
        family.validate_responses(sample.responses)
    return sample


def loglik(family, g, y):
    """Per-observation log-likelihood contribution l(g, y)."""
    family.validate_responses(np.atleast_1d(np.asarray(y, dtype=float)))
    out = family.loglik(np.asarray(g, dtype=float), np.asarray(y, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def score_curvature(family, g, y):
    """Analytic (l'(g, y), l''(g, y)); l'' < 0 for all supported families."""
    family.validate_responses(np.atleast_1d(np.asarray(y, dtype=float)))
    g = np.asarray(g, dtype=float)
    y = np.asarray(y, dtype=float)
    lp, lpp = family.score(g, y), family.curvature(g, y)
    if np.ndim(lp) == 0 or (np.ndim(g) == 0 and np.ndim(y) == 0):
        return float(lp), float(lpp)
    return lp, lpp


def variance_function(family, g):
    """v(g) for case A families; None marks case B (pilot estimator)."""
    out = family.variance_function(np.asarray(g, dtype=float))
    if out is None:
        return None
    return float(out) if np.ndim(out) == 0 else out
