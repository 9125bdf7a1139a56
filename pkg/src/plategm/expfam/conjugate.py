"""Conjugate priors: posterior updates, log-evidence, summaries and draws.

Parameterisations follow the node families:

* ``DirichletPrior(alpha)`` over a probability vector; ``BetaPrior(a, b)`` over
  the probability of outcome 1.
* ``NormalGammaPrior(theta0, sigma0, alpha0, beta0)``: precision
  ``tau ~ Gamma(alpha0/2, rate=beta0/2)`` and weights
  ``w | tau ~ N(theta0, (tau * sigma0)^-1)``.
* ``GaussianPrior(mean0, prec0)`` for weights under a known precision.
* ``GammaPrior(a, b)`` (shape, rate) for a Gaussian precision or a Gamma rate.
* ``NormalWishartPrior(mu0, n0, delta0, scale0)``: ``lam ~ Wishart(delta0,
  scale0)``, ``mu | lam ~ N(mu0, (n0 * lam)^-1)``.
* ``WishartPrior(delta0, scale0)`` for a precision matrix with known mean.

All evidence arithmetic happens in log space; log-determinants come from
Cholesky factors and a non positive definite matrix is an error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar

import numpy as np
from scipy.special import digamma, gammaln, multigammaln

from plategm.expfam.stats import SufficientStats

__all__ = [
    "NumericError",
    "SummaryError",
    "ConjugatePrior",
    "DirichletPrior",
    "BetaPrior",
    "NormalGammaPrior",
    "GaussianPrior",
    "GammaPrior",
    "NormalWishartPrior",
    "WishartPrior",
    "posterior",
    "log_evidence",
    "posterior_summary",
    "sample_param",
]

LOG_PI = float(np.log(np.pi))
LOG_2PI = float(np.log(2.0 * np.pi))


class NumericError(ArithmeticError):
    """Non-finite or ill-conditioned intermediate value."""


class SummaryError(ValueError):
    """Requested summary is undefined for the given parameters."""


def logdet_pd(m: np.ndarray, what: str = "matrix") -> float:
    try:
        c = np.linalg.cholesky(np.asarray(m, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"{what} is not positive definite") from exc
    return float(2.0 * np.sum(np.log(np.diag(c))))


def _solve_pd(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    c = np.linalg.cholesky(m)
    return np.linalg.solve(c.T, np.linalg.solve(c, v))


def _log_mvbeta(alpha: np.ndarray) -> float:
    return float(np.sum(gammaln(alpha)) - gammaln(np.sum(alpha)))


def _finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")
    return float(value)


class ConjugatePrior:
    """Common interface; concrete priors are frozen dataclasses."""

    stats_kind: ClassVar[str] = ""
    roles: ClassVar[tuple[str, ...]] = ()

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def empty_stats(self) -> SufficientStats:
        return SufficientStats.zeros(self.stats_kind, self.dim)

    def _check(self, stats: SufficientStats) -> None:
        if stats.kind != self.stats_kind or stats.dim != self.dim:
            raise TypeError(
                f"{type(self).__name__} cannot use {stats.kind}({stats.dim}) statistics"
            )

    def posterior(self, stats: SufficientStats) -> "ConjugatePrior":
        raise NotImplementedError

    def log_evidence(self, stats: SufficientStats) -> float:
        raise NotImplementedError

    def mean(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def mode(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def log_moment(self) -> dict[str, np.ndarray]:
        raise SummaryError(f"{type(self).__name__} has no log-moment summary")

    def sample(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def log_density(self, values: dict[str, np.ndarray]) -> float:
        """Log prior density at ``values`` (keys are :attr:`roles`)."""
        raise NotImplementedError


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DirichletPrior(ConjugatePrior):
    alpha: np.ndarray

    stats_kind: ClassVar[str] = "categorical"
    roles: ClassVar[tuple[str, ...]] = ("theta",)

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        if a.ndim != 1 or a.size < 2 or np.any(~(a > 0)):
            raise ValueError("Dirichlet parameters must be a positive vector of length >= 2")
        object.__setattr__(self, "alpha", a)

    @property
    def dim(self) -> int:
        return self.alpha.size

    def posterior(self, stats):
        self._check(stats)
        return type(self)._from_alpha(self.alpha + stats["counts"])

    @classmethod
    def _from_alpha(cls, alpha):
        return cls(alpha)

    def log_evidence(self, stats):
        self._check(stats)
        if stats.n == 0:
            return 0.0
        value = _log_mvbeta(self.alpha + stats["counts"]) - _log_mvbeta(self.alpha)
        return _finite(value, "Dirichlet log-evidence")

    def _theta(self, p: np.ndarray) -> np.ndarray:
        return p

    def mean(self):
        return {"theta": self._theta(self.alpha / self.alpha.sum())}

    def mode(self):
        if np.any(self.alpha < 1.0) or self.alpha.sum() <= self.dim:
            raise SummaryError("Dirichlet mode undefined when some alpha < 1")
        return {"theta": self._theta((self.alpha - 1.0) / (self.alpha.sum() - self.dim))}

    def log_moment(self):
        """E[log theta_j] = digamma(alpha_j) - digamma(sum alpha)."""
        return {"log_theta": digamma(self.alpha) - digamma(self.alpha.sum())}

    def sample(self, rng):
        g = rng.gamma(self.alpha)
        return {"theta": self._theta(g / g.sum())}

    def _vector(self, theta) -> np.ndarray:
        return np.asarray(theta, dtype=float)

    def log_density(self, values):
        p = self._vector(values["theta"])
        return float(np.sum((self.alpha - 1.0) * np.log(p)) - _log_mvbeta(self.alpha))


class BetaPrior(DirichletPrior):
    """Beta(a, b) over P(x = 1); stored as a two-outcome Dirichlet (b, a)."""

    def __init__(self, a: float, b: float):
        super().__init__(np.array([b, a], dtype=float))

    @classmethod
    def _from_alpha(cls, alpha):
        return cls(alpha[1], alpha[0])

    @property
    def a(self) -> float:
        return float(self.alpha[1])

    @property
    def b(self) -> float:
        return float(self.alpha[0])

    def _theta(self, p):
        return np.float64(p[1])

    def _vector(self, theta):
        t = float(theta)
        return np.array([1.0 - t, t])

    def __repr__(self) -> str:
        return f"BetaPrior(a={self.a!r}, b={self.b!r})"


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPrior(ConjugatePrior):
    """Gaussian weights with precision ``prec0`` under a known noise precision."""

    mean0: np.ndarray
    prec0: np.ndarray

    stats_kind: ClassVar[str] = "linear"
    roles: ClassVar[tuple[str, ...]] = ("w",)

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean0, dtype=float))
        p = np.asarray(self.prec0, dtype=float).reshape(m.size, m.size)
        logdet_pd(p, "prior precision")
        object.__setattr__(self, "mean0", m)
        object.__setattr__(self, "prec0", p)

    @property
    def dim(self):
        return self.mean0.size

    def posterior(self, stats):
        self._check(stats)
        prec = self.prec0 + stats["S"]
        mean = _solve_pd(prec, self.prec0 @ self.mean0 + stats["q"])
        return GaussianPrior(mean, prec)

    def log_evidence(self, stats):
        self._check(stats)
        if stats.n == 0:
            return 0.0
        post = self.posterior(stats)
        quad = (
            stats["ysq"]
            + self.mean0 @ self.prec0 @ self.mean0
            - post.mean0 @ post.prec0 @ post.mean0
        )
        value = (
            -0.5 * stats["ndim"] * LOG_2PI
            + 0.5 * stats["logdet"]
            + 0.5 * logdet_pd(self.prec0, "prior precision")
            - 0.5 * logdet_pd(post.prec0, "posterior precision")
            - 0.5 * quad
        )
        return _finite(value, "Gaussian log-evidence")

    def mean(self):
        return {"w": self.mean0.copy()}

    mode = mean

    def sample(self, rng):
        c = np.linalg.cholesky(self.prec0)
        return {"w": self.mean0 + np.linalg.solve(c.T, rng.standard_normal(self.dim))}

    def log_density(self, values):
        r = np.atleast_1d(values["w"]) - self.mean0
        return float(
            0.5 * (logdet_pd(self.prec0) - self.dim * LOG_2PI) - 0.5 * r @ self.prec0 @ r
        )


@dataclass(frozen=True)
class GammaPrior(ConjugatePrior):
    """Gamma(shape a, rate b) prior for a Gaussian precision or a Gamma rate.

    ``kind`` selects the likelihood: ``scale`` (Gaussian residuals) or
    ``gamma-rate``.
    """

    a: float
    b: float
    kind: str = "scale"

    roles: ClassVar[tuple[str, ...]] = ("tau",)

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("Gamma prior parameters must be positive")
        if self.kind not in ("scale", "gamma-rate"):
            raise ValueError(f"unknown Gamma likelihood kind '{self.kind}'")

    @property
    def stats_kind(self) -> str:  # type: ignore[override]
        return self.kind

    @property
    def dim(self):
        return 1

    def _update(self, stats):
        self._check(stats)
        if self.kind == "scale":
            return self.a + 0.5 * stats.n, self.b + 0.5 * float(stats["r2"])
        return self.a + float(stats["alpha"]), self.b + float(stats["x"])

    def posterior(self, stats):
        a, b = self._update(stats)
        return GammaPrior(a, b, self.kind)

    def log_evidence(self, stats):
        if stats.n == 0:
            self._check(stats)
            return 0.0
        an, bn = self._update(stats)
        base = gammaln(an) - gammaln(self.a) + self.a * np.log(self.b) - an * np.log(bn)
        if self.kind == "scale":
            value = -0.5 * stats.n * LOG_2PI + base
        else:
            value = float(stats["h"]) + base
        return _finite(value, "Gamma log-evidence")

    def mean(self):
        return {"tau": np.float64(self.a / self.b)}

    def mode(self):
        if self.a < 1.0:
            raise SummaryError("Gamma mode undefined for shape < 1")
        return {"tau": np.float64((self.a - 1.0) / self.b)}

    def log_moment(self):
        return {"log_tau": np.float64(digamma(self.a) - np.log(self.b))}

    def sample(self, rng):
        return {"tau": np.float64(rng.gamma(self.a) / self.b)}

    def log_density(self, values):
        t = float(values["tau"])
        return float(self.a * np.log(self.b) - gammaln(self.a) + (self.a - 1) * np.log(t) - self.b * t)


@dataclass(frozen=True)
class NormalGammaPrior(ConjugatePrior):
    """Joint prior over regression weights and noise precision."""

    theta0: np.ndarray
    sigma0: np.ndarray
    alpha0: float
    beta0: float

    stats_kind: ClassVar[str] = "linear"
    roles: ClassVar[tuple[str, ...]] = ("w", "tau")

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.theta0, dtype=float))
        s = np.asarray(self.sigma0, dtype=float).reshape(m.size, m.size)
        logdet_pd(s, "prior precision scale")
        if not (self.alpha0 > 0 and self.beta0 > 0):
            raise ValueError("alpha0 and beta0 must be positive")
        object.__setattr__(self, "theta0", m)
        object.__setattr__(self, "sigma0", s)
        object.__setattr__(self, "alpha0", float(self.alpha0))
        object.__setattr__(self, "beta0", float(self.beta0))

    @property
    def dim(self):
        return self.theta0.size

    def posterior(self, stats):
        self._check(stats)
        sn = self.sigma0 + stats["S"]
        tn = _solve_pd(sn, self.sigma0 @ self.theta0 + stats["q"])
        beta = (
            self.beta0
            + float(stats["ysq"])
            + self.theta0 @ self.sigma0 @ self.theta0
            - tn @ sn @ tn
        )
        return NormalGammaPrior(tn, sn, self.alpha0 + stats.n, max(beta, 1e-300))

    def log_evidence(self, stats):
        self._check(stats)
        if stats.n == 0:
            return 0.0
        post = self.posterior(stats)
        value = (
            -0.5 * stats.n * LOG_PI
            + 0.5 * logdet_pd(self.sigma0, "prior precision scale")
            - 0.5 * logdet_pd(post.sigma0, "posterior precision scale")
            + gammaln(0.5 * post.alpha0)
            - gammaln(0.5 * self.alpha0)
            + 0.5 * self.alpha0 * np.log(self.beta0)
            - 0.5 * post.alpha0 * np.log(post.beta0)
        )
        return _finite(value, "Normal-Gamma log-evidence")

    def mean(self):
        return {"w": self.theta0.copy(), "tau": np.float64(self.alpha0 / self.beta0)}

    def mode(self):
        shape = 0.5 * (self.alpha0 + self.dim) - 1.0
        if shape <= 0:
            raise SummaryError("Normal-Gamma mode undefined for small alpha")
        return {"w": self.theta0.copy(), "tau": np.float64(shape / (0.5 * self.beta0))}

    def log_moment(self):
        return {"log_tau": np.float64(digamma(0.5 * self.alpha0) - np.log(0.5 * self.beta0))}

    def sample(self, rng):
        tau = rng.gamma(0.5 * self.alpha0) / (0.5 * self.beta0)
        c = np.linalg.cholesky(self.sigma0 * tau)
        w = self.theta0 + np.linalg.solve(c.T, rng.standard_normal(self.dim))
        return {"w": w, "tau": np.float64(tau)}

    def log_density(self, values):
        tau = float(values["tau"])
        g = GammaPrior(0.5 * self.alpha0, 0.5 * self.beta0).log_density({"tau": tau})
        return g + GaussianPrior(self.theta0, self.sigma0 * tau).log_density({"w": values["w"]})


@dataclass(frozen=True)
class WishartPrior(ConjugatePrior):
    """Wishart(delta0, scale0) for a precision matrix with known mean."""

    delta0: float
    scale0: np.ndarray

    stats_kind: ClassVar[str] = "wishart"
    roles: ClassVar[tuple[str, ...]] = ("lam",)

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.scale0, dtype=float))
        logdet_pd(s, "Wishart scale")
        if not self.delta0 > s.shape[0] - 1:
            raise ValueError("Wishart degrees of freedom must exceed d - 1")
        object.__setattr__(self, "scale0", s)
        object.__setattr__(self, "delta0", float(self.delta0))

    @property
    def dim(self):
        return self.scale0.shape[0]

    def posterior(self, stats):
        self._check(stats)
        inv = np.linalg.inv(self.scale0) + stats["rr"]
        return WishartPrior(self.delta0 + stats.n, np.linalg.inv(inv))

    def log_evidence(self, stats):
        self._check(stats)
        if stats.n == 0:
            return 0.0
        d = self.dim
        post = self.posterior(stats)
        value = (
            -0.5 * stats.n * d * LOG_PI
            - 0.5 * self.delta0 * logdet_pd(self.scale0, "Wishart scale")
            + 0.5 * post.delta0 * logdet_pd(post.scale0, "Wishart scale")
            + multigammaln(0.5 * post.delta0, d)
            - multigammaln(0.5 * self.delta0, d)
        )
        return _finite(value, "Wishart log-evidence")

    def mean(self):
        return {"lam": self.delta0 * self.scale0}

    def mode(self):
        k = self.delta0 - self.dim - 1
        if k <= 0:
            raise SummaryError("Wishart mode undefined for delta <= d + 1")
        return {"lam": k * self.scale0}

    def log_moment(self):
        d = self.dim
        value = (
            digamma(0.5 * (self.delta0 - np.arange(d))).sum()
            + d * np.log(2.0)
            + logdet_pd(self.scale0)
        )
        return {"logdet_lam": np.float64(value)}

    def sample(self, rng):
        from plategm.expfam.families import sample_wishart

        return {"lam": sample_wishart(rng, self.delta0, self.scale0)}

    def log_density(self, values):
        x = np.asarray(values["lam"], dtype=float)
        d = self.dim
        n = self.delta0
        return float(
            0.5 * (n - d - 1) * logdet_pd(x)
            - 0.5 * np.trace(np.linalg.solve(self.scale0, x))
            - 0.5 * n * d * np.log(2.0)
            - 0.5 * n * logdet_pd(self.scale0)
            - multigammaln(0.5 * n, d)
        )


@dataclass(frozen=True)
class NormalWishartPrior(ConjugatePrior):
    """Joint prior over a Gaussian mean vector and precision matrix."""

    mu0: np.ndarray
    n0: float
    delta0: float
    scale0: np.ndarray

    stats_kind: ClassVar[str] = "mvnormal"
    roles: ClassVar[tuple[str, ...]] = ("mu", "lam")

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        s = np.asarray(self.scale0, dtype=float).reshape(mu.size, mu.size)
        logdet_pd(s, "Wishart scale")
        if not self.n0 > 0:
            raise ValueError("N0 must be positive")
        if not self.delta0 > mu.size - 1:
            raise ValueError("Wishart degrees of freedom must exceed d - 1")
        object.__setattr__(self, "mu0", mu)
        object.__setattr__(self, "scale0", s)
        object.__setattr__(self, "n0", float(self.n0))
        object.__setattr__(self, "delta0", float(self.delta0))

    @property
    def dim(self):
        return self.mu0.size

    def posterior(self, stats):
        self._check(stats)
        nn = self.n0 + stats.n
        mun = (self.n0 * self.mu0 + stats["x"]) / nn
        inv = (
            np.linalg.inv(self.scale0)
            + stats["xx"]
            + self.n0 * np.outer(self.mu0, self.mu0)
            - nn * np.outer(mun, mun)
        )
        inv = 0.5 * (inv + inv.T)
        return NormalWishartPrior(mun, nn, self.delta0 + stats.n, np.linalg.inv(inv))

    def log_evidence(self, stats):
        self._check(stats)
        if stats.n == 0:
            return 0.0
        d = self.dim
        post = self.posterior(stats)
        value = (
            -0.5 * stats.n * d * LOG_PI
            + 0.5 * d * (np.log(self.n0) - np.log(post.n0))
            - 0.5 * self.delta0 * logdet_pd(self.scale0, "Wishart scale")
            + 0.5 * post.delta0 * logdet_pd(post.scale0, "Wishart scale")
            + multigammaln(0.5 * post.delta0, d)
            - multigammaln(0.5 * self.delta0, d)
        )
        return _finite(value, "Normal-Wishart log-evidence")

    def _wishart(self) -> WishartPrior:
        return WishartPrior(self.delta0, self.scale0)

    def mean(self):
        return {"mu": self.mu0.copy(), "lam": self.delta0 * self.scale0}

    def mode(self):
        k = self.delta0 - self.dim
        if k <= 0:
            raise SummaryError("Normal-Wishart mode undefined for delta <= d")
        return {"mu": self.mu0.copy(), "lam": k * self.scale0}

    def log_moment(self):
        return {"logdet_lam": self._wishart().log_moment()["logdet_lam"]}

    def sample(self, rng):
        lam = self._wishart().sample(rng)["lam"]
        c = np.linalg.cholesky(self.n0 * lam)
        mu = self.mu0 + np.linalg.solve(c.T, rng.standard_normal(self.dim))
        return {"mu": mu, "lam": lam}

    def log_density(self, values):
        lam = np.asarray(values["lam"], dtype=float)
        w = self._wishart().log_density({"lam": lam})
        return w + GaussianPrior(self.mu0, self.n0 * lam).log_density({"w": values["mu"]})


# ---------------------------------------------------------------------------
# functional interface


def posterior(prior: ConjugatePrior, stats: SufficientStats) -> ConjugatePrior:
    """Conjugate posterior parameters after observing ``stats``."""
    return prior.posterior(stats)


def log_evidence(prior: ConjugatePrior, stats: SufficientStats) -> float:
    """Log marginal likelihood of the data summarised by ``stats``."""
    return prior.log_evidence(stats)


def posterior_summary(post: ConjugatePrior, request: str = "mean") -> dict[str, np.ndarray]:
    """Closed-form summary: ``mean``, ``mode``, ``log-moment`` or ``moment-of-t``.

    ``moment-of-t`` returns the expected natural statistics of the prior
    family itself via the link function (see :mod:`plategm.expfam.descriptor`).
    """
    if request == "mean":
        return post.mean()
    if request == "mode":
        return post.mode()
    if request == "log-moment":
        return post.log_moment()
    if request == "moment-of-t":
        from plategm.expfam.descriptor import prior_descriptor

        desc, theta = prior_descriptor(post)
        return {"t": desc.expected_t(theta)}
    raise SummaryError(f"unknown summary '{request}'")


def sample_param(post: ConjugatePrior, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Draw parameter values from ``post``."""
    return post.sample(rng)
