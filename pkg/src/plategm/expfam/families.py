"""Node distributions used in model files.

Each family evaluates a log-density vectorised over leading batch axes and
returns gradients with respect to the value and every argument.  Arguments
arrive already broadcast to a common batch rank ``nb``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import digamma, gammaln, multigammaln, xlogy

__all__ = [
    "Domain",
    "Family",
    "FAMILY_NAMES",
    "SupportError",
    "make_family",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class SupportError(ValueError):
    """Raised when a value or argument lies outside a family's support."""


@dataclass(frozen=True)
class Domain:
    """Value domain of a node.

    ``kind`` is one of ``discrete``, ``real``, ``positive-real``,
    ``real-vector``, ``simplex``, ``unit-interval`` (a binary probability)
    or ``positive-definite-matrix``.  ``size`` is
    the arity for discrete domains and the dimension otherwise.
    """

    kind: str
    size: int = 1

    @property
    def shape(self) -> tuple:
        if self.kind == "real-vector":
            return (self.size,)
        if self.kind == "simplex":
            return (self.size,)
        if self.kind == "positive-definite-matrix":
            return (self.size, self.size)
        return ()

    @property
    def is_discrete(self) -> bool:
        return self.kind == "discrete"

    def __str__(self) -> str:
        if self.kind in ("real", "positive-real", "unit-interval"):
            return self.kind
        return f"{self.kind}({self.size})"


def _rank(x: np.ndarray, nb: int) -> int:
    return np.ndim(x) - nb


class Family:
    """Base class for node distributions."""

    name: str = ""
    n_args: int = 0
    # value rank of each argument; None means "any"
    arg_ranks: tuple = ()

    def domain(self, arg_shapes: list[tuple]) -> Domain:
        raise NotImplementedError

    def logpdf(self, x: np.ndarray, args: list[np.ndarray], nb: int) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x, args, nb) -> tuple[Optional[np.ndarray], list[Optional[np.ndarray]]]:
        """Gradients of :meth:`logpdf` with respect to ``x`` and each argument."""
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, args: list[np.ndarray], nb: int) -> np.ndarray:
        raise NotImplementedError

    def in_support(self, x: np.ndarray, nb: int) -> np.ndarray:
        """Boolean batch array marking in-support values."""
        raise NotImplementedError

    def check_args(self, args: list[np.ndarray], nb: int) -> None:
        """Raise :class:`SupportError` if arguments are invalid."""

    def source_name(self) -> str:
        return self.name


# ---------------------------------------------------------------------------
# discrete families


class Bernoulli(Family):
    name = "Bernoulli"
    n_args = 1
    arg_ranks = (0,)

    def domain(self, arg_shapes):
        return Domain("discrete", 2)

    def logpdf(self, x, args, nb):
        (p,) = args
        return xlogy(x, p) + xlogy(1.0 - x, 1.0 - p)

    def grad(self, x, args, nb):
        (p,) = args
        with np.errstate(divide="ignore", invalid="ignore"):
            gp = np.where(x == 1, 1.0 / p, -1.0 / (1.0 - p))
        return None, [gp]

    def sample(self, rng, args, nb):
        (p,) = args
        return (rng.random(np.shape(p)) < p).astype(float)

    def in_support(self, x, nb):
        return (x == 0) | (x == 1)

    def check_args(self, args, nb):
        p = args[0]
        if np.any((p < 0) | (p > 1)) or np.any(~np.isfinite(p)):
            raise SupportError("Bernoulli probability must lie in [0, 1]")


def _take_last(table: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``table[..., x]`` with batch broadcasting between table and x."""
    xi = np.asarray(x).astype(np.int64)
    shape = np.broadcast_shapes(table.shape[:-1], xi.shape)
    t = np.broadcast_to(table, shape + table.shape[-1:])
    xi = np.broadcast_to(xi, shape)
    return np.take_along_axis(t, xi[..., None], axis=-1)[..., 0]


def _one_hot(x: np.ndarray, k: int, shape: tuple) -> np.ndarray:
    xi = np.broadcast_to(np.asarray(x).astype(np.int64), shape[:-1])
    out = np.zeros(shape)
    np.put_along_axis(out, xi[..., None], 1.0, axis=-1)
    return out


class Multinomial(Family):
    """Single categorical draw over ``0..C-1`` with probability vector theta."""

    name = "Multinomial"
    n_args = 1
    arg_ranks = (1,)

    def domain(self, arg_shapes):
        return Domain("discrete", int(arg_shapes[0][-1]))

    def logpdf(self, x, args, nb):
        (theta,) = args
        with np.errstate(divide="ignore"):
            return np.log(_take_last(theta, x))

    def grad(self, x, args, nb):
        (theta,) = args
        shape = np.broadcast_shapes(theta.shape[:-1], np.shape(x)) + theta.shape[-1:]
        oh = _one_hot(x, theta.shape[-1], shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(oh > 0, oh / np.broadcast_to(theta, shape), 0.0)
        return None, [g]

    def sample(self, rng, args, nb):
        (theta,) = args
        cdf = np.cumsum(theta, axis=-1)
        u = rng.random(theta.shape[:-1] + (1,)) * cdf[..., -1:]
        return np.minimum((u > cdf).sum(axis=-1), theta.shape[-1] - 1).astype(float)

    def in_support(self, x, nb):
        return np.isfinite(x) & (x == np.round(x)) & (x >= 0)

    def check_args(self, args, nb):
        theta = args[0]
        if np.any(theta < 0) or not np.all(np.isfinite(theta)):
            raise SupportError("Multinomial probabilities must be non-negative")


class Table(Family):
    """Conditional probability table.

    ``Table([p1, p2], [probs...])`` lists probabilities row-major over the
    parent values followed by the child value.
    """

    name = "Table"
    n_args = 2
    arg_ranks = (1, 1)

    def __init__(self, parent_arities: tuple[int, ...], n_probs: int):
        self.parent_arities = tuple(int(a) for a in parent_arities)
        rows = int(np.prod(self.parent_arities)) if self.parent_arities else 1
        if n_probs % rows or n_probs // rows < 2:
            raise SupportError(
                f"Table has {n_probs} entries which is not a multiple >= 2 of {rows} parent rows"
            )
        self.arity = n_probs // rows

    def domain(self, arg_shapes):
        return Domain("discrete", self.arity)

    def _row(self, parents: np.ndarray) -> np.ndarray:
        row = np.zeros(parents.shape[:-1], dtype=np.int64)
        for j, a in enumerate(self.parent_arities):
            row = row * a + parents[..., j].astype(np.int64)
        return row

    def _cond(self, args):
        parents, probs = args
        k = self.arity
        if not self.parent_arities:
            return probs
        row = self._row(parents)
        shape = np.broadcast_shapes(row.shape, probs.shape[:-1])
        idx = np.broadcast_to(row, shape)[..., None] * k + np.arange(k)
        return np.take_along_axis(np.broadcast_to(probs, shape + probs.shape[-1:]), idx, axis=-1)

    def logpdf(self, x, args, nb):
        with np.errstate(divide="ignore"):
            return np.log(_take_last(self._cond(args), x))

    def grad(self, x, args, nb):
        parents, probs = args
        k = self.arity
        cond = self._cond(args)
        shape = np.broadcast_shapes(cond.shape[:-1], np.shape(x))
        flat = np.zeros(shape + probs.shape[-1:])
        pos = np.broadcast_to(np.asarray(x).astype(np.int64), shape)
        if self.parent_arities:
            pos = np.broadcast_to(self._row(parents), shape) * k + pos
        val = np.broadcast_to(_take_last(cond, x), shape)
        np.put_along_axis(flat, pos[..., None], (1.0 / val)[..., None], axis=-1)
        return None, [None, flat]

    def sample(self, rng, args, nb):
        return Multinomial().sample(rng, [self._cond(args)], nb)

    def in_support(self, x, nb):
        return (x == np.round(x)) & (x >= 0) & (x < self.arity)

    def check_args(self, args, nb):
        probs = args[1]
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise SupportError("Table probabilities must be non-negative")


# ---------------------------------------------------------------------------
# continuous scalar families


class Gaussian(Family):
    """Univariate Gaussian parameterised by mean and precision."""

    name = "Gaussian"
    n_args = 2
    arg_ranks = (0, 0)

    def domain(self, arg_shapes):
        return Domain("real")

    def logpdf(self, x, args, nb):
        mu, tau = args
        with np.errstate(divide="ignore", invalid="ignore"):
            return 0.5 * (np.log(tau) - LOG_2PI) - 0.5 * tau * (x - mu) ** 2

    def grad(self, x, args, nb):
        mu, tau = args
        r = x - mu
        return -tau * r, [tau * r, 0.5 / tau - 0.5 * r**2]

    def sample(self, rng, args, nb):
        mu, tau = args
        shape = np.broadcast_shapes(np.shape(mu), np.shape(tau))
        return mu + rng.standard_normal(shape) / np.sqrt(tau)

    def in_support(self, x, nb):
        return np.isfinite(x)

    def check_args(self, args, nb):
        if np.any(args[1] <= 0):
            raise SupportError("Gaussian precision must be positive")


class GaussianLinear(Family):
    """``y ~ Gaussian(dot(w, basis), precision)``."""

    name = "GaussianLinear"
    n_args = 3
    arg_ranks = (1, 1, 0)

    def domain(self, arg_shapes):
        if arg_shapes[0] != arg_shapes[1]:
            raise SupportError("GaussianLinear weights and basis differ in length")
        return Domain("real")

    def logpdf(self, x, args, nb):
        w, b, tau = args
        mean = np.sum(w * b, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            return 0.5 * (np.log(tau) - LOG_2PI) - 0.5 * tau * (x - mean) ** 2

    def grad(self, x, args, nb):
        w, b, tau = args
        r = x - np.sum(w * b, axis=-1)
        tr = (tau * r)[..., None]
        return -tau * r, [tr * b, tr * w, 0.5 / tau - 0.5 * r**2]

    def sample(self, rng, args, nb):
        w, b, tau = args
        mean = np.sum(w * b, axis=-1)
        shape = np.broadcast_shapes(mean.shape, np.shape(tau))
        return mean + rng.standard_normal(shape) / np.sqrt(tau)

    def in_support(self, x, nb):
        return np.isfinite(x)

    def check_args(self, args, nb):
        if np.any(args[2] <= 0):
            raise SupportError("GaussianLinear precision must be positive")


class Gamma(Family):
    """Gamma with shape and rate."""

    name = "Gamma"
    n_args = 2
    arg_ranks = (0, 0)

    def domain(self, arg_shapes):
        return Domain("positive-real")

    def logpdf(self, x, args, nb):
        a, b = args
        with np.errstate(divide="ignore", invalid="ignore"):
            return a * np.log(b) - gammaln(a) + xlogy(a - 1.0, x) - b * x

    def grad(self, x, args, nb):
        a, b = args
        return (a - 1.0) / x - b, [np.log(b) - digamma(a) + np.log(x), a / b - x]

    def sample(self, rng, args, nb):
        a, b = args
        shape = np.broadcast_shapes(np.shape(a), np.shape(b))
        return rng.gamma(np.broadcast_to(a, shape)) / b

    def in_support(self, x, nb):
        return np.isfinite(x) & (x > 0)

    def check_args(self, args, nb):
        if np.any(args[0] <= 0) or np.any(args[1] <= 0):
            raise SupportError("Gamma shape and rate must be positive")


class Beta(Family):
    """Beta over the probability of outcome 1 of a binary variable."""

    name = "Beta"
    n_args = 2
    arg_ranks = (0, 0)

    def domain(self, arg_shapes):
        return Domain("unit-interval", 2)

    def logpdf(self, x, args, nb):
        a, b = args
        with np.errstate(divide="ignore", invalid="ignore"):
            return (
                xlogy(a - 1.0, x)
                + xlogy(b - 1.0, 1.0 - x)
                - (gammaln(a) + gammaln(b) - gammaln(a + b))
            )

    def grad(self, x, args, nb):
        a, b = args
        ab = digamma(a + b)
        gx = (a - 1.0) / x - (b - 1.0) / (1.0 - x)
        return gx, [np.log(x) - digamma(a) + ab, np.log1p(-x) - digamma(b) + ab]

    def sample(self, rng, args, nb):
        a, b = args
        shape = np.broadcast_shapes(np.shape(a), np.shape(b))
        return rng.beta(np.broadcast_to(a, shape), np.broadcast_to(b, shape))

    def in_support(self, x, nb):
        return (x > 0) & (x < 1)

    def check_args(self, args, nb):
        if np.any(args[0] <= 0) or np.any(args[1] <= 0):
            raise SupportError("Beta parameters must be positive")


# ---------------------------------------------------------------------------
# vector and matrix families


class Dirichlet(Family):
    name = "Dirichlet"
    n_args = 1
    arg_ranks = (1,)

    def domain(self, arg_shapes):
        k = int(arg_shapes[0][-1])
        if k < 2:
            raise SupportError("Dirichlet needs at least two components")
        return Domain("simplex", k)

    def logpdf(self, x, args, nb):
        (alpha,) = args
        with np.errstate(divide="ignore", invalid="ignore"):
            return (
                np.sum(xlogy(alpha - 1.0, x), axis=-1)
                + gammaln(alpha.sum(axis=-1))
                - gammaln(alpha).sum(axis=-1)
            )

    def grad(self, x, args, nb):
        (alpha,) = args
        shape = np.broadcast_shapes(np.shape(x), alpha.shape)
        ga = np.log(x) + digamma(alpha.sum(axis=-1, keepdims=True)) - digamma(alpha)
        return np.broadcast_to((alpha - 1.0) / x, shape), [np.broadcast_to(ga, shape)]

    def sample(self, rng, args, nb):
        (alpha,) = args
        g = rng.gamma(alpha)
        return g / g.sum(axis=-1, keepdims=True)

    def in_support(self, x, nb):
        return np.all(x > 0, axis=-1) & (np.abs(np.sum(x, axis=-1) - 1.0) < 1e-9)

    def check_args(self, args, nb):
        if np.any(args[0] <= 0):
            raise SupportError("Dirichlet parameters must be positive")


def _chol_logdet(m: np.ndarray) -> np.ndarray:
    try:
        c = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise SupportError("matrix is not positive definite") from exc
    return 2.0 * np.sum(np.log(np.diagonal(c, axis1=-2, axis2=-1)), axis=-1)


def _is_pd(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    sym = np.all(np.abs(m - np.swapaxes(m, -1, -2)) <= 1e-10 * (1 + np.abs(m)), axis=(-1, -2))
    eig = np.linalg.eigvalsh(np.where(np.isfinite(m), m, 0.0))
    return sym & np.all(eig > 0, axis=-1) & np.all(np.isfinite(m), axis=(-1, -2))


class MvGaussian(Family):
    """Multivariate Gaussian with mean vector and precision matrix."""

    name = "MvGaussian"
    n_args = 2
    arg_ranks = (1, 2)

    def domain(self, arg_shapes):
        d = int(arg_shapes[0][-1])
        if arg_shapes[1] != (d, d):
            raise SupportError("MvGaussian precision must be a d x d matrix")
        return Domain("real-vector", d)

    def logpdf(self, x, args, nb):
        mu, lam = args
        r = x - mu
        d = r.shape[-1]
        quad = np.einsum("...i,...ij,...j->...", r, lam, r)
        return 0.5 * (_chol_logdet(lam) - d * LOG_2PI) - 0.5 * quad

    def grad(self, x, args, nb):
        mu, lam = args
        r = x - mu
        lr = np.einsum("...ij,...j->...i", lam, r)
        inv = np.linalg.inv(lam)
        glam = 0.5 * (np.swapaxes(inv, -1, -2) - r[..., :, None] * r[..., None, :])
        return -lr, [lr, glam]

    def sample(self, rng, args, nb):
        mu, lam = args
        shape = np.broadcast_shapes(mu.shape, lam.shape[:-1])
        c = np.linalg.cholesky(lam)
        z = rng.standard_normal(shape)
        # x = mu + L^{-T} z has covariance lam^{-1}
        ct = np.broadcast_to(np.swapaxes(c, -1, -2), shape + shape[-1:])
        return mu + np.linalg.solve(ct, z[..., None])[..., 0]

    def in_support(self, x, nb):
        return np.all(np.isfinite(x), axis=-1)

    def check_args(self, args, nb):
        if not np.all(_is_pd(args[1])):
            raise SupportError("MvGaussian precision must be symmetric positive definite")


class Wishart(Family):
    """Wishart with degrees of freedom ``dof`` and scale matrix ``V`` (mean dof*V)."""

    name = "Wishart"
    n_args = 2
    arg_ranks = (0, 2)

    def domain(self, arg_shapes):
        d = int(arg_shapes[1][-1])
        return Domain("positive-definite-matrix", d)

    def logpdf(self, x, args, nb):
        n, v = args
        d = x.shape[-1]
        vinv = np.linalg.inv(v)
        tr = np.einsum("...ij,...ji->...", vinv, x)
        n = np.asarray(n)
        return (
            0.5 * (n - d - 1.0) * _chol_logdet(x)
            - 0.5 * tr
            - 0.5 * n * d * np.log(2.0)
            - 0.5 * n * _chol_logdet(v)
            - _mvgammaln(0.5 * n, d)
        )

    def grad(self, x, args, nb):
        n, v = args
        d = x.shape[-1]
        xinv = np.linalg.inv(x)
        vinv = np.linalg.inv(v)
        n = np.asarray(n)
        gx = 0.5 * (n - d - 1.0)[..., None, None] * np.swapaxes(xinv, -1, -2) - 0.5 * np.swapaxes(
            vinv, -1, -2
        )
        gn = (
            0.5 * _chol_logdet(x)
            - 0.5 * d * np.log(2.0)
            - 0.5 * _chol_logdet(v)
            - 0.5 * _mvdigamma(0.5 * n, d)
        )
        xv = np.einsum("...ij,...jk,...kl->...il", vinv, x, vinv)
        gv = 0.5 * np.swapaxes(xv, -1, -2) - 0.5 * n[..., None, None] * np.swapaxes(vinv, -1, -2)
        return gx, [gn, gv]

    def sample(self, rng, args, nb):
        n, v = args
        return sample_wishart(rng, n, v)

    def in_support(self, x, nb):
        return _is_pd(x)

    def check_args(self, args, nb):
        n, v = args
        d = v.shape[-1]
        if np.any(n <= d - 1):
            raise SupportError("Wishart degrees of freedom must exceed dimension - 1")
        if not np.all(_is_pd(v)):
            raise SupportError("Wishart scale must be symmetric positive definite")


def _mvgammaln(a: np.ndarray, d: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    j = np.arange(d)
    return 0.25 * d * (d - 1) * np.log(np.pi) + gammaln(a[..., None] - 0.5 * j).sum(axis=-1)


def _mvdigamma(a: np.ndarray, d: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return digamma(a[..., None] - 0.5 * np.arange(d)).sum(axis=-1)


def sample_wishart(rng: np.random.Generator, n, v) -> np.ndarray:
    """Bartlett decomposition draw from Wishart(n, V), batched over leading axes."""
    v = np.asarray(v, dtype=float)
    n = np.asarray(n, dtype=float)
    d = v.shape[-1]
    batch = np.broadcast_shapes(n.shape, v.shape[:-2])
    n = np.broadcast_to(n, batch)
    chol = np.broadcast_to(np.linalg.cholesky(v), batch + (d, d))
    a = np.zeros(batch + (d, d))
    for i in range(d):
        a[..., i, i] = np.sqrt(rng.chisquare(n - i))
        for j in range(i):
            a[..., i, j] = rng.standard_normal(batch)
    la = chol @ a
    return la @ np.swapaxes(la, -1, -2)


# multigammaln is used by the conjugate engine; re-exported for callers
mvgammaln = multigammaln

_FAMILIES = {
    cls.name: cls
    for cls in (Bernoulli, Multinomial, Gaussian, GaussianLinear, Gamma, Beta, Dirichlet, MvGaussian, Wishart)
}
FAMILY_NAMES = tuple(sorted(list(_FAMILIES) + ["Table"]))


def make_family(name: str, **kwargs) -> Family:
    """Instantiate a family by its model-file name."""
    if name == "Table":
        return Table(kwargs["parent_arities"], kwargs["n_probs"])
    try:
        return _FAMILIES[name]()
    except KeyError:
        raise KeyError(f"unknown family '{name}'") from None
