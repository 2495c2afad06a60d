"""Per-outcome score columns of the profiled log-likelihood, three ways.

* closed form - explicit gradients for pair-profile models, discontinuous
  across the three pair regions (ties resolve to the interior region);
* multiplier - generic construction from the projection's active set, by
  differentiating the optimality system of the convex program;
* smoothed - Gaussian-smoothing simulation estimator for models without a
  differentiable closed form, with bandwidth c * (n R)^(-1/4).

All three satisfy, at region-interior points, the conditional identity
sum_y p(y|x) s(y|x) = d/dtheta of the profiled log-likelihood.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ConfigError,
    DegenerateModelError,
    DomainError,
    InstabilityError,
    KktResidualError,
    NumericError,
    RankDeficiencyError,
)
from .events import build_constraints
from .models import ModelSpec
from .numerics import SeededRng
from .projection import (
    TIE_TOL,
    _greedy_independent_rows,
    batched_profile_logq,
    classify_region,
    profiled_loglik,
    project_generic,
)

ETA_FLOOR = 1e-10
LSTSQ_RESID_TOL = 1e-8
METHODS = ("closed_form", "multiplier", "smoothed")


@dataclass
class ScoreMatrix:
    """d_theta x M matrix of per-outcome score columns at one (theta, x)."""

    values: np.ndarray
    theta: np.ndarray
    x: np.ndarray
    method: str

    def column(self, y_idx: int) -> np.ndarray:
        return self.values[:, y_idx]


@dataclass(frozen=True)
class SmoothingConfig:
    """Tuning for the Gaussian-smoothing score estimator.

    The bandwidth is c_sigma * (n * draws)^(-1/4); c_sigma must lie in the
    recommended window [0.03, 0.12] and draws must be at least 100.
    """

    c_sigma: float = 0.075
    draws: int = 1000
    n: int | None = None

    def __post_init__(self):
        if not (0.03 <= self.c_sigma <= 0.12):
            raise ConfigError(f"c_sigma must be in [0.03, 0.12], got {self.c_sigma}")
        if self.draws < 100:
            raise ConfigError(f"draws must be at least 100, got {self.draws}")

    @property
    def sigma(self) -> float:
        if self.n is None:
            raise ConfigError("smoothing bandwidth needs the sample size; call with_n")
        return self.c_sigma * (self.n * self.draws) ** (-0.25)

    def with_n(self, n: int) -> "SmoothingConfig":
        return replace(self, n=int(n))


def _check_eta_floor(*denoms):
    if min(denoms) < ETA_FLOOR:
        raise DegenerateModelError(
            "profiled density is not bounded away from zero "
            f"(smallest denominator {min(denoms):.2e})"
        )


def score_closed_form(model: ModelSpec, theta, x, p0x,
                      tie_tol: float = TIE_TOL) -> ScoreMatrix:
    """Closed-form score columns for a pair-profile model."""
    if not model.supports_profile:
        raise ConfigError("model does not expose a pair profile")
    theta = np.asarray(theta, dtype=float)
    prof = model.profile(theta, x, grad=True)
    p0 = np.asarray(p0x, dtype=float)
    m = prof.space.size
    d = model.param_dim
    region, _, _ = classify_region(
        p0[prof.idx_a], p0[prof.idx_b], prof.eta1, prof.eta2, prof.eta3, tie_tol
    )
    values = np.zeros((d, m))
    _check_eta_floor(*prof.fixed_mass, prof.eta1)
    for j, idx in enumerate(prof.fixed_idx):
        values[:, idx] = prof.fixed_grad[j] / prof.fixed_mass[j]
    g1, g2, g3 = prof.eta_grad
    if region == 1:
        values[:, prof.idx_a] = g1 / prof.eta1
        values[:, prof.idx_b] = g1 / prof.eta1
    elif region == 2:
        _check_eta_floor(prof.eta2, prof.eta1 - prof.eta2)
        values[:, prof.idx_a] = g2 / prof.eta2
        values[:, prof.idx_b] = (g1 - g2) / (prof.eta1 - prof.eta2)
    else:
        _check_eta_floor(prof.eta3, prof.eta1 - prof.eta3)
        values[:, prof.idx_a] = g3 / prof.eta3
        values[:, prof.idx_b] = (g1 - g3) / (prof.eta1 - prof.eta3)
    return ScoreMatrix(values, theta, np.atleast_1d(np.asarray(x, float)), "closed_form")


def score_multiplier(model: ModelSpec, theta, x, p0x) -> ScoreMatrix:
    """Score columns from the projection's active constraints.

    Differentiates the optimality system of the projection at the active set:
    with B the active representers, D = diag(q*^2 / p0) and E the stacked
    containment gradients, the column for outcome m is
    E (B'DB)^{-1} (B'D)[:, m] / q*(m).  Dependent active representers are
    dropped greedily in enumeration order (the value gradient is insensitive
    to which representation is kept).
    """
    theta = np.asarray(theta, dtype=float)
    p0 = np.asarray(p0x, dtype=float)
    cs = build_constraints(model, theta, x)
    res = project_generic(p0, cs)
    q = res.q_star
    m = cs.space.size
    rows = cs.representer_matrix().T  # (C, M)
    vals = rows @ q
    active = [i for i in range(cs.n_constraints)
              if cs.is_equality[i] or (vals[i] - cs.lower[i]) <= 1e-7]
    keep = _greedy_independent_rows(rows, active)
    if len(keep) < len(active):
        dropped = [tuple(cs.events[i].labels) for i in active if i not in keep]
        warnings.warn(
            f"dropping {len(dropped)} dependent active constraint(s): {dropped}",
            RuntimeWarning, stacklevel=2,
        )
    b_tilde = rows[keep].T  # (M, S)
    r = p0 / q
    kappa, *_ = np.linalg.lstsq(b_tilde, r, rcond=None)
    resid = np.max(np.abs(b_tilde @ kappa - r))
    if resid > LSTSQ_RESID_TOL:
        raise KktResidualError(
            f"multiplier system residual {resid:.2e} exceeds {LSTSQ_RESID_TOL:.0e}; "
            "projection optimality conditions are inconsistent"
        )
    e_mat = np.column_stack([model.grad_nu(theta, cs.events[i], x) for i in keep])
    d_w = q**2 / p0
    w = (b_tilde * d_w[:, None]).T @ b_tilde  # B'DB, (S, S)
    try:
        c_mat = np.linalg.solve(w, (b_tilde * d_w[:, None]).T)  # (S, M)
    except np.linalg.LinAlgError as exc:
        names = [tuple(cs.events[i].labels) for i in keep]
        raise RankDeficiencyError(
            f"active representers are rank-deficient after pruning: {names}"
        ) from exc
    values = (e_mat @ c_mat) / q[None, :]
    return ScoreMatrix(values, theta, np.atleast_1d(np.asarray(x, float)), "multiplier")


def score_smoothed(model: ModelSpec, theta, y_idx: int, x, p_hat_x,
                   cfg: SmoothingConfig, rng: SeededRng,
                   return_se: bool = False):
    """Gaussian-smoothing estimate of one score column.

    Averages [f(theta + sigma Z) - f(theta)] Z / sigma over standard normal
    draws Z, where f is the profiled log-density of outcome y.  Draws leaving
    the parameter space (where the projection is undefined) are resampled;
    more than 10 percent rejections aborts.  With ``return_se`` the
    coordinatewise Monte Carlo standard error of the estimate is returned as
    a second value.
    """
    theta = np.asarray(theta, dtype=float)
    sigma = cfg.sigma
    d = model.param_dim
    gen = rng.generator()

    def f_batch(thetas):
        if model.supports_profile:
            batch = model.profile_theta_batch(thetas, x)
            return batched_profile_logq(batch, p_hat_x, y_idx)
        out = np.empty(len(thetas))
        for i, t in enumerate(thetas):
            cs = build_constraints(model, t, x)
            q = project_generic(np.asarray(p_hat_x, float), cs).q_star
            out[i] = np.log(max(q[y_idx], 1e-300))
        return out

    f0 = float(f_batch(theta[None, :])[0])
    accepted = np.empty((cfg.draws, d))
    got = 0
    rejected = 0
    while got < cfg.draws:
        want = cfg.draws - got
        z = gen.standard_normal((want, d))
        ok = model.theta_in_space(theta[None, :] + sigma * z)
        n_ok = int(ok.sum())
        accepted[got : got + n_ok] = z[ok]
        got += n_ok
        rejected += want - n_ok
        if rejected > 0.1 * cfg.draws:
            raise InstabilityError(
                f"{rejected} of {got + rejected} smoothing draws left the "
                f"parameter space at bandwidth {sigma:.2e}"
            )
    fvals = f_batch(theta[None, :] + sigma * accepted)
    summands = accepted * (fvals - f0)[:, None] / sigma
    est = summands.mean(axis=0)
    if not return_se:
        return est
    se = summands.std(axis=0, ddof=1) / np.sqrt(cfg.draws)
    return est, se


def _phat_matrix(p_hat, X, m) -> np.ndarray:
    """Evaluate a fitted CCP (or accept a precomputed matrix) at covariate rows."""
    if hasattr(p_hat, "eval_matrix"):
        return p_hat.eval_matrix(X)
    arr = np.asarray(p_hat, dtype=float)
    if arr.ndim == 1:
        arr = np.tile(arr, (X.shape[0], 1))
    if arr.shape != (X.shape[0], m):
        raise ConfigError("p_hat matrix has wrong shape")
    return arr


def _profile_column_arrays(model, theta, X, P, tie_tol=TIE_TOL):
    """(n, M, d) closed-form score columns for every outcome at each row."""
    batch = model.profile_x_batch(theta, X, grad=True)
    n = X.shape[0]
    d = model.param_dim
    m = model.outcome_space.size
    idx_a, idx_b = batch["idx_a"], batch["idx_b"]
    eta_arr = batch["eta"]
    eta_g = batch["eta_grad"]
    pa, pb = P[:, idx_a], P[:, idx_b]
    if np.any(pa + pb <= 0):
        raise DomainError("estimated pair probabilities must be positive")
    share = pa / (pa + pb)
    z2 = share * eta_arr[:, 0] - eta_arr[:, 1]
    z3 = share * eta_arr[:, 0] - eta_arr[:, 2]
    region = np.ones(n, dtype=int)
    region[z2 > tie_tol] = 2
    region[z3 < -tie_tol] = 3
    gap2 = eta_arr[:, 0] - eta_arr[:, 1]
    gap3 = eta_arr[:, 0] - eta_arr[:, 2]
    used = np.concatenate(
        [batch["fixed"].ravel(), eta_arr[:, 0],
         eta_arr[region == 2, 1], gap2[region == 2],
         eta_arr[region == 3, 2], gap3[region == 3]]
    )
    if used.size and np.min(used) < ETA_FLOOR:
        raise DegenerateModelError(
            "profiled density is not bounded away from zero on this dataset"
        )
    col_a = eta_g[:, 0] / eta_arr[:, 0, None]
    col_b = col_a.copy()
    m2 = region == 2
    m3 = region == 3
    col_a[m2] = eta_g[m2, 1] / eta_arr[m2, 1, None]
    col_b[m2] = (eta_g[m2, 0] - eta_g[m2, 1]) / gap2[m2, None]
    col_a[m3] = eta_g[m3, 2] / eta_arr[m3, 2, None]
    col_b[m3] = (eta_g[m3, 0] - eta_g[m3, 2]) / gap3[m3, None]
    cols = np.empty((n, m, d))
    cols[:, idx_a, :] = col_a
    cols[:, idx_b, :] = col_b
    for j, idx in enumerate(batch["fixed_idx"]):
        cols[:, idx, :] = batch["fixed_grad"][:, j, :] / batch["fixed"][:, j, None]
    return cols


def _closed_form_observation_scores(model, theta, X, y, P, tie_tol=TIE_TOL):
    # identical (x, p_hat) rows share their columns; with discrete covariates
    # this collapses the dataset to a handful of distinct evaluations
    n = X.shape[0]
    key = np.hstack([X, P])
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    dx = X.shape[1]
    if uniq.shape[0] <= n // 4:
        cols = _profile_column_arrays(model, theta, uniq[:, :dx], uniq[:, dx:], tie_tol)
        return cols[inverse, y, :]
    cols = _profile_column_arrays(model, theta, X, P, tie_tol)
    return cols[np.arange(n), y, :]


def expected_score_given_x(model: ModelSpec, theta, X, P,
                           tie_tol: float = TIE_TOL) -> np.ndarray:
    """(n, d) conditional score means sum_y P(y|x) s(y|x) at covariate rows X.

    Uses the closed-form columns; equals the theta-gradient of the profiled
    log-likelihood at region-interior points.
    """
    theta = np.asarray(theta, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    P = np.asarray(P, dtype=float)
    batch = model.profile_x_batch(theta, X, grad=True)
    idx_a, idx_b = batch["idx_a"], batch["idx_b"]
    eta_arr, eta_g = batch["eta"], batch["eta_grad"]
    share = P[:, idx_a] / (P[:, idx_a] + P[:, idx_b])
    z2 = share * eta_arr[:, 0] - eta_arr[:, 1]
    z3 = share * eta_arr[:, 0] - eta_arr[:, 2]
    region = np.ones(X.shape[0], dtype=int)
    region[z2 > tie_tol] = 2
    region[z3 < -tie_tol] = 3
    col_a = eta_g[:, 0] / eta_arr[:, 0, None]
    col_b = col_a.copy()
    m2, m3 = region == 2, region == 3
    col_a[m2] = eta_g[m2, 1] / eta_arr[m2, 1, None]
    col_b[m2] = (eta_g[m2, 0] - eta_g[m2, 1]) / (eta_arr[m2, 0] - eta_arr[m2, 1])[:, None]
    col_a[m3] = eta_g[m3, 2] / eta_arr[m3, 2, None]
    col_b[m3] = (eta_g[m3, 0] - eta_g[m3, 2]) / (eta_arr[m3, 0] - eta_arr[m3, 2])[:, None]
    out = P[:, idx_a, None] * col_a + P[:, idx_b, None] * col_b
    for j, idx in enumerate(batch["fixed_idx"]):
        out += P[:, idx, None] * batch["fixed_grad"][:, j, :] / batch["fixed"][:, j, None]
    return out


def observation_scores(model: ModelSpec, theta, dataset, p_hat,
                       method: str = "closed_form",
                       cfg: SmoothingConfig | None = None,
                       rng: SeededRng | None = None) -> np.ndarray:
    """(n, d_theta) per-observation scores for a dataset.

    The smoothed method draws an independent substream per observation, so
    results do not depend on evaluation order or worker count.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown score method {method!r}")
    theta = np.asarray(theta, dtype=float)
    X = np.atleast_2d(np.asarray(dataset.covariates, dtype=float))
    y = np.asarray(dataset.outcomes, dtype=int)
    m = model.outcome_space.size
    P = _phat_matrix(p_hat, X, m)
    if method == "closed_form":
        if not model.supports_profile:
            raise ConfigError("closed_form scores need a pair-profile model")
        return _closed_form_observation_scores(model, theta, X, y, P)
    if method == "multiplier":
        n = X.shape[0]
        out = np.empty((n, model.param_dim))
        cache: dict = {}
        errors = []
        for i in range(n):
            key = (X[i].tobytes(), P[i].tobytes())
            if key not in cache:
                try:
                    cache[key] = score_multiplier(model, theta, X[i], P[i]).values
                except NumericError as exc:
                    errors.append((i, str(exc)))
                    cache[key] = None
            if cache[key] is None:
                errors.append((i, "projection failed"))
                continue
            out[i] = cache[key][:, y[i]]
        if errors:
            idx = sorted({i for i, _ in errors})
            raise NumericError(f"score evaluation failed at observations {idx[:10]}")
        return out
    # smoothed
    if cfg is None:
        raise ConfigError("smoothed scores need a SmoothingConfig")
    if rng is None:
        raise ConfigError("smoothed scores need a SeededRng")
    n = X.shape[0]
    cfg = cfg.with_n(n) if cfg.n is None else cfg
    out = np.empty((n, model.param_dim))
    for i in range(n):
        out[i] = score_smoothed(model, theta, int(y[i]), X[i], P[i], cfg, rng.substream(i))
    return out


def average_score(model: ModelSpec, theta, dataset, p_hat,
                  method: str = "closed_form",
                  cfg: SmoothingConfig | None = None,
                  rng: SeededRng | None = None) -> np.ndarray:
    """Sample average of the per-observation scores."""
    return observation_scores(model, theta, dataset, p_hat, method, cfg, rng).mean(axis=0)


def conditional_score_identity_gap(model, theta, x, p0x, method: str = "closed_form",
                                   fd_step: float = 1e-6) -> float:
    """Max-norm gap between the p0-weighted score columns and a central
    finite difference of the profiled log-likelihood (diagnostic helper)."""
    from .numerics import fd_gradient

    if method == "closed_form":
        sm = score_closed_form(model, theta, x, p0x)
    else:
        sm = score_multiplier(model, theta, x, p0x)
    p0 = np.asarray(p0x, dtype=float)
    weighted = sm.values @ p0
    fd = fd_gradient(lambda t: profiled_loglik(model, t, x, p0x), np.asarray(theta, float), fd_step)
    return float(np.max(np.abs(weighted - fd)))
