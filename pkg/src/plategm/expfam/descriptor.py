"""Exponential-family descriptors ``p(x | theta) = h(x) exp(sum w_i(theta) t_i(x)) / Z(theta)``.

Each descriptor works with a flat parameter vector ``theta`` and supplies the
Jacobian ``dw/dtheta`` and gradient ``d log Z / dtheta`` in closed form, so
expected statistics follow from the link identity
``E[t] = (dw/dtheta)^-T d log Z/dtheta`` without sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import digamma, gammaln, multigammaln

__all__ = ["FamilyDescriptor", "descriptor", "prior_descriptor", "log_density"]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class FamilyDescriptor:
    """The (h, Z, w, t) quadruple of one family with k natural statistics."""

    tag: str
    k: int
    log_h: Callable[[np.ndarray], float]
    log_z: Callable[[np.ndarray], float]
    w: Callable[[np.ndarray], np.ndarray]
    t: Callable[[np.ndarray], np.ndarray]
    dw: Callable[[np.ndarray], np.ndarray]
    dlog_z: Callable[[np.ndarray], np.ndarray]
    meta: dict = field(default_factory=dict)

    def log_density(self, theta, x) -> float:
        theta = np.asarray(theta, dtype=float)
        return float(self.log_h(x) + self.w(theta) @ self.t(x) - self.log_z(theta))

    def expected_t(self, theta) -> np.ndarray:
        """Expected natural statistics via the link function."""
        theta = np.asarray(theta, dtype=float)
        jac = self.dw(theta)  # jac[i, j] = d w_i / d theta_j
        return np.linalg.lstsq(jac.T, self.dlog_z(theta), rcond=None)[0]


def _bernoulli() -> FamilyDescriptor:
    return FamilyDescriptor(
        "bernoulli",
        1,
        log_h=lambda x: 0.0,
        log_z=lambda th: -np.log1p(-th[0]),
        w=lambda th: np.array([np.log(th[0] / (1.0 - th[0]))]),
        t=lambda x: np.array([float(x)]),
        dw=lambda th: np.array([[1.0 / (th[0] * (1.0 - th[0]))]]),
        dlog_z=lambda th: np.array([1.0 / (1.0 - th[0])]),
    )


def _multinomial(c: int) -> FamilyDescriptor:
    # theta holds the first C-1 probabilities; theta_C = 1 - sum(theta)
    def last(th):
        return 1.0 - np.sum(th)

    def dw(th):
        return np.diag(1.0 / th) + 1.0 / last(th)

    return FamilyDescriptor(
        f"multinomial({c})",
        c - 1,
        log_h=lambda x: 0.0,
        log_z=lambda th: -np.log(last(th)),
        w=lambda th: np.log(th / last(th)),
        t=lambda x: (np.arange(c - 1) == int(x)).astype(float),
        dw=dw,
        dlog_z=lambda th: np.full(c - 1, 1.0 / last(th)),
        meta={"C": c},
    )


def _gaussian_linear(basis: np.ndarray) -> FamilyDescriptor:
    b = np.asarray(basis, dtype=float)
    d = b.size

    # theta = (beta_1..beta_d, tau); w = (tau * beta, -tau / 2); t(y) = (y * b, y^2)
    def w(th):
        return np.concatenate([th[-1] * th[:-1], [-0.5 * th[-1]]])

    def log_z(th):
        beta, tau = th[:-1], th[-1]
        return 0.5 * LOG_2PI - 0.5 * np.log(tau) + 0.5 * tau * (beta @ b) ** 2

    def dw(th):
        beta, tau = th[:-1], th[-1]
        jac = np.zeros((d + 1, d + 1))
        jac[:d, :d] = tau * np.eye(d)
        jac[:d, d] = beta
        jac[d, d] = -0.5
        return jac

    def dlog_z(th):
        beta, tau = th[:-1], th[-1]
        m = beta @ b
        return np.concatenate([tau * m * b, [-0.5 / tau + 0.5 * m**2]])

    return FamilyDescriptor(
        f"gaussian-linear({d})",
        d + 1,
        log_h=lambda y: 0.0,
        log_z=log_z,
        w=w,
        t=lambda y: np.concatenate([float(y) * b, [float(y) ** 2]]),
        dw=dw,
        dlog_z=dlog_z,
        meta={"basis": b},
    )


def _gamma(alpha: float) -> FamilyDescriptor:
    # theta = (rate,), alpha fixed
    return FamilyDescriptor(
        "gamma",
        1,
        log_h=lambda x: (alpha - 1.0) * np.log(x),
        log_z=lambda th: gammaln(alpha) - alpha * np.log(th[0]),
        w=lambda th: np.array([-th[0]]),
        t=lambda x: np.array([float(x)]),
        dw=lambda th: np.array([[-1.0]]),
        dlog_z=lambda th: np.array([-alpha / th[0]]),
        meta={"alpha": alpha},
    )


def _dirichlet(c: int) -> FamilyDescriptor:
    return FamilyDescriptor(
        f"dirichlet({c})",
        c,
        log_h=lambda x: 0.0,
        log_z=lambda th: float(np.sum(gammaln(th)) - gammaln(np.sum(th))),
        w=lambda th: th - 1.0,
        t=lambda x: np.log(np.asarray(x, dtype=float)),
        dw=lambda th: np.eye(c),
        dlog_z=lambda th: digamma(th) - digamma(np.sum(th)),
        meta={"C": c},
    )


def _mv_gaussian(d: int) -> FamilyDescriptor:
    # theta = (mu (d), vec(L) (d*d)); t(x) = (x, vec(x x^T))
    def split(th):
        return th[:d], th[d:].reshape(d, d)

    def w(th):
        mu, lam = split(th)
        return np.concatenate([lam @ mu, -0.5 * lam.ravel()])

    def log_z(th):
        mu, lam = split(th)
        return 0.5 * mu @ lam @ mu - 0.5 * np.linalg.slogdet(lam)[1] + 0.5 * d * LOG_2PI

    def dw(th):
        mu, lam = split(th)
        jac = np.zeros((d + d * d, d + d * d))
        jac[:d, :d] = lam
        # d (L mu)_i / d L_jk = delta_ij mu_k
        for i in range(d):
            for k in range(d):
                jac[i, d + i * d + k] = mu[k]
        jac[d:, d:] = -0.5 * np.eye(d * d)
        return jac

    def dlog_z(th):
        mu, lam = split(th)
        g_mu = 0.5 * (lam + lam.T) @ mu
        g_lam = 0.5 * np.outer(mu, mu) - 0.5 * np.linalg.inv(lam).T
        return np.concatenate([g_mu, g_lam.ravel()])

    return FamilyDescriptor(
        f"mv-gaussian({d})",
        d + d * d,
        log_h=lambda x: 0.0,
        log_z=log_z,
        w=w,
        t=lambda x: np.concatenate([np.asarray(x, float), np.outer(x, x).ravel()]),
        dw=dw,
        dlog_z=dlog_z,
        meta={"d": d},
    )


def _wishart(d: int) -> FamilyDescriptor:
    # theta = (delta, vec(V)); t(X) = (log|X|, vec X)
    def split(th):
        return th[0], th[1:].reshape(d, d)

    def w(th):
        n, v = split(th)
        return np.concatenate([[0.5 * (n - d - 1.0)], -0.5 * np.linalg.inv(v).ravel()])

    def log_z(th):
        n, v = split(th)
        return 0.5 * n * d * np.log(2.0) + 0.5 * n * np.linalg.slogdet(v)[1] + multigammaln(0.5 * n, d)

    def dw(th):
        n, v = split(th)
        vinv = np.linalg.inv(v)
        jac = np.zeros((1 + d * d, 1 + d * d))
        jac[0, 0] = 0.5
        # d (V^-1)_ij / d V_kl = -(V^-1)_ik (V^-1)_lj
        jac[1:, 1:] = 0.5 * np.einsum("ik,lj->ijkl", vinv, vinv).reshape(d * d, d * d)
        return jac

    def dlog_z(th):
        n, v = split(th)
        vinv = np.linalg.inv(v)
        g_n = 0.5 * d * np.log(2.0) + 0.5 * np.linalg.slogdet(v)[1] + 0.5 * digamma(
            0.5 * (n - np.arange(d))
        ).sum()
        return np.concatenate([[g_n], 0.5 * n * vinv.T.ravel()])

    return FamilyDescriptor(
        f"wishart({d})",
        1 + d * d,
        log_h=lambda x: 0.0,
        log_z=log_z,
        w=w,
        t=lambda x: np.concatenate([[np.linalg.slogdet(x)[1]], np.asarray(x, float).ravel()]),
        dw=dw,
        dlog_z=dlog_z,
        meta={"d": d},
    )


def descriptor(tag: str, **meta) -> FamilyDescriptor:
    """Descriptor for ``bernoulli``, ``multinomial`` (C), ``gaussian-linear``
    (basis), ``gamma`` (alpha), ``dirichlet`` (C), ``mv-gaussian`` (d) or
    ``wishart`` (d)."""
    if tag == "bernoulli":
        return _bernoulli()
    if tag == "multinomial":
        return _multinomial(int(meta["C"]))
    if tag == "gaussian-linear":
        return _gaussian_linear(meta["basis"])
    if tag == "gamma":
        return _gamma(float(meta["alpha"]))
    if tag == "dirichlet":
        return _dirichlet(int(meta["C"]))
    if tag == "mv-gaussian":
        return _mv_gaussian(int(meta["d"]))
    if tag == "wishart":
        return _wishart(int(meta["d"]))
    raise KeyError(f"unknown family tag '{tag}'")


def log_density(fam: FamilyDescriptor, theta, obs) -> float:
    """Log-density from the descriptor; ``-inf`` outside the support."""
    with np.errstate(all="ignore"):
        try:
            value = fam.log_density(theta, obs)
        except (ValueError, np.linalg.LinAlgError):
            return -np.inf
    return value if np.isfinite(value) else -np.inf


def prior_descriptor(prior) -> tuple[FamilyDescriptor, np.ndarray]:
    """Descriptor and parameter vector of a conjugate prior viewed as a family."""
    from plategm.expfam import conjugate as cj

    if isinstance(prior, cj.DirichletPrior):
        return _dirichlet(prior.dim), prior.alpha
    if isinstance(prior, cj.GammaPrior):
        return _gamma(prior.a), np.array([prior.b])
    if isinstance(prior, cj.GaussianPrior):
        d = prior.dim
        return _mv_gaussian(d), np.concatenate([prior.mean0, prior.prec0.ravel()])
    if isinstance(prior, cj.WishartPrior):
        d = prior.dim
        return _wishart(d), np.concatenate([[prior.delta0], prior.scale0.ravel()])
    raise cj.SummaryError(f"no single-family descriptor for {type(prior).__name__}")
