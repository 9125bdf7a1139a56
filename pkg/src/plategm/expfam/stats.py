"""Mergeable sufficient statistics stored as raw (unnormalised) sums."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import gammaln

__all__ = ["SufficientStats", "StatsError", "accumulate", "STAT_KINDS"]


class StatsError(ValueError):
    """Observation outside the support of the statistics' family."""


# kind -> (names of the sum fields)
STAT_KINDS = {
    # categorical draws over 0..C-1
    "categorical": ("counts",),
    # y_i = B_i w + noise with known precision matrix L_i (times an optional unknown scalar)
    "linear": ("S", "q", "ysq", "ndim", "logdet"),
    # squared residuals for an unknown Gaussian precision
    "scale": ("r2",),
    # Gamma(alpha_i, rate) observations for an unknown rate
    "gamma-rate": ("x", "alpha", "h"),
    # vector observations for an unknown mean and precision
    "mvnormal": ("x", "xx"),
    # residual outer products for an unknown precision matrix
    "wishart": ("rr",),
}


def _zeros(kind: str, dim: int) -> dict[str, np.ndarray]:
    if kind == "categorical":
        return {"counts": np.zeros(dim)}
    if kind == "linear":
        return {
            "S": np.zeros((dim, dim)),
            "q": np.zeros(dim),
            "ysq": np.zeros(()),
            "ndim": np.zeros(()),
            "logdet": np.zeros(()),
        }
    if kind == "scale":
        return {"r2": np.zeros(())}
    if kind == "gamma-rate":
        return {"x": np.zeros(()), "alpha": np.zeros(()), "h": np.zeros(())}
    if kind == "mvnormal":
        return {"x": np.zeros(dim), "xx": np.zeros((dim, dim))}
    if kind == "wishart":
        return {"rr": np.zeros((dim, dim))}
    raise StatsError(f"unknown statistics kind '{kind}'")


@dataclass(frozen=True)
class SufficientStats:
    """Weighted case count ``n`` plus family-specific sums of t(x)."""

    kind: str
    dim: int
    n: float = 0.0
    sums: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.sums:
            object.__setattr__(self, "sums", _zeros(self.kind, self.dim))

    @classmethod
    def zeros(cls, kind: str, dim: int = 1) -> "SufficientStats":
        return cls(kind, int(dim))

    def merge(self, other: "SufficientStats") -> "SufficientStats":
        if (self.kind, self.dim) != (other.kind, other.dim):
            raise StatsError(f"cannot merge {self.kind}({self.dim}) with {other.kind}({other.dim})")
        sums = {k: self.sums[k] + other.sums[k] for k in self.sums}
        return SufficientStats(self.kind, self.dim, self.n + other.n, sums)

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        return self.merge(other)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.sums[key]

    @property
    def t_vector(self) -> np.ndarray:
        """All sums flattened into one vector, in field order."""
        return np.concatenate([np.ravel(self.sums[k]) for k in STAT_KINDS[self.kind]])

    def allclose(self, other: "SufficientStats", atol: float = 1e-12) -> bool:
        return (
            self.kind == other.kind
            and abs(self.n - other.n) <= atol
            and np.allclose(self.t_vector, other.t_vector, rtol=0, atol=atol)
        )


def _weights(weight, n: int) -> np.ndarray:
    w = np.broadcast_to(np.asarray(weight, dtype=float), (n,))
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise StatsError("weights must be finite and non-negative")
    return w


def accumulate(stats: SufficientStats, obs, weight=1.0) -> SufficientStats:
    """Add weighted observations to ``stats``; returns a new value.

    ``obs`` is one case or a batch with cases on the leading axis.  Layout per
    kind:

    * categorical: integer values.
    * linear: tuple ``(B, y, L)`` with ``B`` of shape (N, m, d) or (N, d),
      ``y`` (N, m) or (N,), ``L`` precision (N, m, m), (N,) or scalar.
    * scale: residuals (N,).
    * gamma-rate: tuple ``(x, alpha)``.
    * mvnormal: vectors (N, d).
    * wishart: residual vectors (N, d).
    """
    kind, dim = stats.kind, stats.dim
    s = {k: np.array(v, dtype=float) for k, v in stats.sums.items()}
    if kind == "categorical":
        x = np.atleast_1d(np.asarray(obs, dtype=float))
        w = _weights(weight, x.shape[0])
        if np.any((x != np.round(x)) | (x < 0) | (x >= dim)):
            raise StatsError(f"categorical value outside 0..{dim - 1}")
        s["counts"] += np.bincount(x.astype(np.int64), weights=w, minlength=dim)
        n = w.sum()
    elif kind == "linear":
        b, y, lam = obs
        b = np.asarray(b, dtype=float)
        y = np.asarray(y, dtype=float)
        if b.ndim == 1 and dim == b.shape[0] and y.ndim == 0:
            b, y = b[None, :], y[None]
        if b.ndim == 2:
            b = b[:, None, :]
            y = y.reshape(-1, 1)
        nobs, m = b.shape[0], b.shape[1]
        lam = np.asarray(lam, dtype=float)
        if lam.ndim <= 1:
            lam = np.broadcast_to(lam.reshape(-1, 1, 1) if lam.ndim else lam, (nobs, 1, 1)) * np.eye(m)
        lam = np.broadcast_to(lam, (nobs, m, m))
        if not np.all(np.isfinite(y)):
            raise StatsError("linear observation must be finite")
        w = _weights(weight, nobs)
        lb = np.einsum("nij,njk->nik", lam, b)
        ly = np.einsum("nij,nj->ni", lam, y)
        s["S"] += np.einsum("n,nij,nik->jk", w, b, lb)
        s["q"] += np.einsum("n,nij,ni->j", w, b, ly)
        s["ysq"] += np.einsum("n,ni,ni->", w, y, ly)
        s["ndim"] += w.sum() * m
        s["logdet"] += np.dot(w, np.linalg.slogdet(lam)[1])
        n = w.sum()
    elif kind == "scale":
        r = np.atleast_1d(np.asarray(obs, dtype=float))
        w = _weights(weight, r.shape[0])
        if not np.all(np.isfinite(r)):
            raise StatsError("residual must be finite")
        s["r2"] += np.dot(w, r**2)
        n = w.sum()
    elif kind == "gamma-rate":
        x, alpha = obs
        x = np.atleast_1d(np.asarray(x, dtype=float))
        alpha = np.broadcast_to(np.asarray(alpha, dtype=float), x.shape)
        if np.any(~(x > 0)):
            raise StatsError("gamma observation must be positive")
        w = _weights(weight, x.shape[0])
        s["x"] += np.dot(w, x)
        s["alpha"] += np.dot(w, alpha)
        s["h"] += np.dot(w, (alpha - 1.0) * np.log(x) - gammaln(alpha))
        n = w.sum()
    elif kind == "mvnormal":
        x = np.asarray(obs, dtype=float).reshape(-1, dim)
        w = _weights(weight, x.shape[0])
        s["x"] += w @ x
        s["xx"] += np.einsum("n,ni,nj->ij", w, x, x)
        n = w.sum()
    elif kind == "wishart":
        r = np.asarray(obs, dtype=float).reshape(-1, dim)
        w = _weights(weight, r.shape[0])
        s["rr"] += np.einsum("n,ni,nj->ij", w, r, r)
        n = w.sum()
    else:
        raise StatsError(f"unknown statistics kind '{kind}'")
    return SufficientStats(kind, dim, stats.n + float(n), s)
