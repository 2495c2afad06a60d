"""Special functions, chi-square quantiles, seeded RNG streams, finite differences.

The bivariate normal rectangle probability is computed from Owen's T function,
which is accurate to roughly machine precision for any correlation in (-1, 1);
the accuracy contract here is 1e-10 absolute.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special as sp

from .errors import DomainError, EvaluationError

# Parameter space for correlations excludes +-1; validated value must satisfy
# |rho| <= RHO_MAX.
RHO_MAX = 0.99

DEFAULT_FD_STEP = 1e-6


def validate_rho(rho: float, limit: float = RHO_MAX) -> float:
    rho = float(rho)
    if not np.isfinite(rho) or abs(rho) > limit:
        raise DomainError(f"correlation must satisfy |rho| <= {limit}, got {rho}")
    return rho


def std_normal_cdf(z):
    """Standard normal CDF. Rejects non-finite input; vectorized otherwise."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DomainError("std_normal_cdf requires finite input")
    out = sp.ndtr(z)
    return float(out) if out.ndim == 0 else out


def std_normal_pdf(z):
    z = np.asarray(z, dtype=float)
    out = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return float(out) if out.ndim == 0 else out


def _owens_phi2(h, k, rho):
    """P(X <= h, Y <= k) for standard bivariate normal with correlation rho.

    Owen (1956): Phi2 = (Phi(h) + Phi(k))/2 - T(h, a_h) - T(k, a_k) - c,
    with c = 1/2 when the quadrant signs disagree.  Finite h, k only.
    """
    h = np.asarray(h, dtype=float)
    k = np.asarray(k, dtype=float)
    s = np.sqrt((1.0 - rho) * (1.0 + rho))
    with np.errstate(divide="ignore", invalid="ignore"):
        ah = (k / h - rho) / s
        ak = (h / k - rho) / s
        # h == 0: k/h is +-inf or nan (when k == 0 too); owens_t handles +-inf.
        ah = np.where(h == 0.0, np.sign(k) * np.inf, ah)
        ak = np.where(k == 0.0, np.sign(h) * np.inf, ak)
    c = np.where((h * k < 0.0) | ((h * k == 0.0) & (h + k < 0.0)), 0.5, 0.0)
    val = 0.5 * (sp.ndtr(h) + sp.ndtr(k)) - sp.owens_t(h, ah) - sp.owens_t(k, ak) - c
    both_zero = (h == 0.0) & (k == 0.0)
    if np.any(both_zero):
        val = np.where(both_zero, 0.25 + np.arcsin(rho) / (2.0 * np.pi), val)
    return val


def bvn_cdf(h, k, rho):
    """P(X <= h, Y <= k), standard bivariate normal, |rho| <= RHO_MAX.

    Accepts +-inf limits and broadcasts over h, k.
    """
    rho = validate_rho(rho)
    h0, k0 = np.broadcast_arrays(np.asarray(h, float), np.asarray(k, float))
    scalar = h0.ndim == 0
    h = np.atleast_1d(h0).copy()
    k = np.atleast_1d(k0).copy()
    out = np.zeros(h.shape, dtype=float)
    neg_inf = (h == -np.inf) | (k == -np.inf)
    h_inf = np.isposinf(h)
    k_inf = np.isposinf(k)
    both_fin = ~neg_inf & ~h_inf & ~k_inf
    out[h_inf & k_inf] = 1.0
    sel = h_inf & ~k_inf & ~neg_inf
    out[sel] = sp.ndtr(k[sel])
    sel = k_inf & ~h_inf & ~neg_inf
    out[sel] = sp.ndtr(h[sel])
    if np.any(both_fin):
        out[both_fin] = _owens_phi2(h[both_fin], k[both_fin], rho)
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if scalar else out


def bvn_rect(lo1, hi1, lo2, hi2, rho):
    """P(lo1 <= X < hi1, lo2 <= Y < hi2) for standard bivariate normal.

    +-inf bounds are allowed; inverted bounds raise.  Broadcasts over the
    four limit arguments.  Absolute accuracy is far inside 1e-10.
    """
    rho = validate_rho(rho)
    lo1, hi1, lo2, hi2 = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (lo1, hi1, lo2, hi2))
    )
    if np.any(np.isnan(lo1)) or np.any(np.isnan(hi1)) or np.any(np.isnan(lo2)) or np.any(np.isnan(hi2)):
        raise DomainError("bvn_rect bounds must not be NaN")
    if np.any(lo1 > hi1) or np.any(lo2 > hi2):
        raise DomainError("bvn_rect requires lo <= hi in both coordinates")
    scalar = lo1.ndim == 0
    lo1, hi1, lo2, hi2 = (np.atleast_1d(a) for a in (lo1, hi1, lo2, hi2))
    val = (
        bvn_cdf(hi1, hi2, rho)
        - bvn_cdf(lo1, hi2, rho)
        - bvn_cdf(hi1, lo2, rho)
        + bvn_cdf(lo1, lo2, rho)
    )
    val = np.clip(np.atleast_1d(val), 0.0, 1.0)
    return float(val[0]) if scalar else val


def bvn_pdf(h, k, rho):
    """Standard bivariate normal density; zero at infinite arguments."""
    h = np.atleast_1d(np.asarray(h, dtype=float))
    k = np.atleast_1d(np.asarray(k, dtype=float))
    h, k = np.broadcast_arrays(h, k)
    s2 = (1.0 - rho) * (1.0 + rho)
    finite = np.isfinite(h) & np.isfinite(k)
    hf = np.where(finite, h, 0.0)
    kf = np.where(finite, k, 0.0)
    val = np.exp(-(hf * hf - 2.0 * rho * hf * kf + kf * kf) / (2.0 * s2)) / (
        2.0 * np.pi * np.sqrt(s2)
    )
    return np.where(finite, val, 0.0)


def chi2_cdf(df: int, x):
    return sp.chdtr(df, x)


def chi2_quantile(df: int, p: float) -> float:
    """Inverse chi-square CDF with df degrees of freedom at probability p."""
    if not (isinstance(df, (int, np.integer)) and df >= 1):
        raise DomainError(f"df must be a positive integer, got {df}")
    if not (0.0 < p < 1.0):
        raise DomainError(f"p must be in (0, 1), got {p}")
    return float(sp.chdtri(df, 1.0 - p))


def fd_gradient(f, theta, step: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a vector."""
    theta = np.asarray(theta, dtype=float)
    grad = np.empty(theta.size, dtype=float)
    for j in range(theta.size):
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += step
        tm[j] -= step
        fp = f(tp)
        fm = f(tm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(
                f"non-finite function value in finite difference at coordinate {j}"
            )
        grad[j] = (fp - fm) / (2.0 * step)
    return grad


@dataclass(frozen=True)
class SeededRng:
    """Counter-based stream of pseudo-random numbers.

    Identical (seed, stream_id) always reproduce the same draws; distinct
    stream ids give statistically independent streams, so parallel tasks can
    each own a substream without coordinating.  Nested substreams extend the
    spawn path and therefore never collide with sibling streams.
    """

    seed: int
    stream_id: int = 0
    _path: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2**64):
            raise DomainError("seed must be an unsigned 64-bit integer")
        if not (0 <= int(self.stream_id) < 2**64):
            raise DomainError("stream_id must be an unsigned 64-bit integer")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed), spawn_key=tuple(self._path) + (int(self.stream_id),)
        )
        return np.random.Generator(np.random.Philox(ss))

    def substream(self, stream_id: int) -> "SeededRng":
        return SeededRng(
            self.seed, stream_id, _path=tuple(self._path) + (int(self.stream_id),)
        )
