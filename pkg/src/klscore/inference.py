"""Score-covariance regularization, the quadratic-form test, and grid sets.

The test statistic is T_n = (sqrt(n) s_bar)' SigmaTilde^{-1} (sqrt(n) s_bar)
with SigmaTilde = SigmaHat + max(eps - det(XiHat), 0) * PsiHat, where PsiHat
is the diagonal of SigmaHat and XiHat the associated correlation matrix.
The adjustment keeps the weight matrix nonsingular, is equivariant to
rescaling individual score coordinates, and leaves SigmaHat untouched
whenever the correlation determinant is at least eps.  Critical values come
from the chi-square distribution with d_theta degrees of freedom and are the
same at every candidate parameter, so building a confidence set is a plain
grid sweep.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .ccp import Dataset
from .errors import (
    ConfigError,
    DomainError,
    EmptyConfidenceSetError,
    NumericError,
    SingularDirectionError,
)
from .models import ModelSpec
from .numerics import SeededRng, chi2_quantile
from .projection import (
    as_population,
    batched_profile_loglik,
    build_constraints,
    kl_divergence,
    project_generic,
)
from .score import SmoothingConfig, observation_scores

DEFAULT_EPSILON = 0.05


@dataclass
class CovEstimates:
    """Score covariance with its regularized version."""

    sigma_hat: np.ndarray
    psi_hat: np.ndarray
    xi_hat: np.ndarray
    sigma_tilde: np.ndarray
    epsilon: float


@dataclass
class TestOutcome:
    t_n: float
    df: int
    critical: float
    reject: bool
    n: int

    def to_dict(self) -> dict:
        return {
            "t_n": float(self.t_n),
            "df": int(self.df),
            "critical": float(self.critical),
            "reject": bool(self.reject),
            "n": int(self.n),
        }


@dataclass
class ConfidenceSet:
    grid: np.ndarray
    accepted: np.ndarray
    alpha: float
    statistics: np.ndarray
    critical: float
    errors: dict

    @property
    def accepted_points(self) -> np.ndarray:
        return self.grid[self.accepted]


@dataclass
class PseudoTrueResult:
    grid: np.ndarray
    d_values: np.ndarray
    accepted: np.ndarray
    min_d: float
    tol: float

    @property
    def accepted_points(self) -> np.ndarray:
        return self.grid[self.accepted]


def covariance_from_scores(scores: np.ndarray, inflation: float = 1.0) -> np.ndarray:
    """Centered outer-product average of per-observation scores."""
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    n, d = scores.shape
    if n < d + 1:
        import warnings

        warnings.warn(f"only {n} observations for a {d}-dimensional score; "
                      "covariance is rank deficient", RuntimeWarning, stacklevel=2)
    centered = scores - scores.mean(axis=0)
    return inflation * (centered.T @ centered) / n


def covariance_hat(model: ModelSpec, theta, dataset: Dataset, p_hat,
                   method: str = "closed_form", cfg: SmoothingConfig | None = None,
                   rng: SeededRng | None = None) -> np.ndarray:
    """Sample score covariance; the smoothed method inflates by (1 + 1/draws)."""
    scores = observation_scores(model, theta, dataset, p_hat, method, cfg, rng)
    inflation = 1.0 + 1.0 / cfg.draws if (method == "smoothed" and cfg is not None) else 1.0
    return covariance_from_scores(scores, inflation)


def regularize(sigma_hat: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> CovEstimates:
    """Determinant-triggered ridge on the score covariance.

    Scale equivariant: rescaling score coordinate j by c_j rescales the
    output by the same diagonal factors.
    """
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    psi = np.diag(sigma_hat).copy()
    bad = np.where(psi <= 0.0)[0]
    if bad.size:
        raise SingularDirectionError(
            f"score coordinate(s) {bad.tolist()} have zero variance"
        )
    scale = 1.0 / np.sqrt(psi)
    xi = sigma_hat * np.outer(scale, scale)
    bump = max(epsilon - float(np.linalg.det(xi)), 0.0)
    sigma_tilde = sigma_hat + bump * np.diag(psi)
    return CovEstimates(sigma_hat, psi, xi, sigma_tilde, float(epsilon))


def rao_from_scores(scores: np.ndarray, alpha: float, epsilon: float = DEFAULT_EPSILON,
                    inflation: float = 1.0) -> TestOutcome:
    """Quadratic-form statistic from a matrix of per-observation scores."""
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    n, d = scores.shape
    if not (0.0 < alpha < 1.0):
        raise ConfigError("alpha must be in (0, 1)")
    s_bar = scores.mean(axis=0)
    cov = regularize(covariance_from_scores(scores, inflation), epsilon)
    try:
        cho = linalg.cho_factor(cov.sigma_tilde)
    except linalg.LinAlgError as exc:
        raise NumericError("regularized covariance is numerically singular") from exc
    z = np.sqrt(n) * s_bar
    t_n = float(z @ linalg.cho_solve(cho, z))
    critical = chi2_quantile(d, 1.0 - alpha)
    return TestOutcome(t_n=t_n, df=d, critical=critical, reject=t_n > critical, n=n)


def rao_statistic(model: ModelSpec, theta, dataset: Dataset, p_hat,
                  alpha: float = 0.05, epsilon: float = DEFAULT_EPSILON,
                  method: str = "closed_form", cfg: SmoothingConfig | None = None,
                  rng: SeededRng | None = None) -> TestOutcome:
    """Score test of one candidate parameter against the data."""
    d = model.param_dim
    if dataset.n < d + 1:
        raise ConfigError(f"need at least {d + 1} observations, got {dataset.n}")
    scores = observation_scores(model, theta, dataset, p_hat, method, cfg, rng)
    inflation = 1.0 + 1.0 / cfg.draws if (method == "smoothed" and cfg is not None) else 1.0
    return rao_from_scores(scores, alpha, epsilon, inflation)


def box_grid(bounds, counts) -> np.ndarray:
    """Cartesian grid over a box: bounds [(lo, hi)] per dim, counts per dim."""
    axes = [np.linspace(lo, hi, int(c)) for (lo, hi), c in zip(bounds, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([ax.ravel() for ax in mesh])


def _cs_chunk(args):
    model, grid_chunk, dataset, p_matrix, alpha, epsilon, method, cfg, seed = args
    rng = None if seed is None else SeededRng(seed)
    stats = np.full(len(grid_chunk), np.nan)
    errors = {}
    for j, theta in enumerate(grid_chunk):
        try:
            out = rao_statistic(model, theta, dataset, p_matrix, alpha, epsilon,
                                method, cfg, rng)
            stats[j] = out.t_n
        except (NumericError, DomainError) as exc:
            errors[j] = str(exc)
    return stats, errors


def confidence_set(model: ModelSpec, grid, dataset: Dataset, alpha: float,
                   epsilon: float, p_hat, method: str = "closed_form",
                   cfg: SmoothingConfig | None = None, seed: int | None = None,
                   threads: int = 1) -> ConfidenceSet:
    """Sweep a parameter grid, keeping points whose statistic clears the
    shared chi-square critical value.

    The CCP estimate is fitted once by the caller and reused at every point.
    Per-point numerical failures are recorded and the point is marked
    rejected; the sweep continues.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[0] == 0:
        raise ConfigError("grid must be nonempty")
    critical = chi2_quantile(model.param_dim, 1.0 - alpha)
    # evaluate the first stage at the data once; the grid loop reuses it
    from .score import _phat_matrix

    p_matrix = _phat_matrix(p_hat, np.atleast_2d(dataset.covariates),
                            model.outcome_space.size)
    n_chunks = max(1, min(threads * 4, grid.shape[0])) if threads > 1 else 1
    chunks = np.array_split(np.arange(grid.shape[0]), n_chunks)
    tasks = [
        (model, grid[idx], dataset, p_matrix, alpha, epsilon, method, cfg, seed)
        for idx in chunks if idx.size
    ]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_cs_chunk, tasks))
    else:
        results = [_cs_chunk(t) for t in tasks]
    stats = np.full(grid.shape[0], np.nan)
    errors = {}
    for idx, (st, err) in zip([c for c in chunks if c.size], results):
        stats[idx] = st
        for j, msg in err.items():
            errors[int(idx[j])] = msg
    accepted = np.where(np.isnan(stats), False, stats <= critical)
    return ConfidenceSet(grid, accepted, alpha, stats, critical, errors)


def pseudo_true_grid(model: ModelSpec, grid, population, tol: float | None = None,
                     method: str = "auto") -> PseudoTrueResult:
    """Grid approximation of the divergence-minimizing parameter set.

    Computes D(theta) = sum_x w(x) KL(p0(.|x) || q*_theta(.|x)) over the grid
    and keeps points within `tol` of the minimum.  The default tolerance
    1e-8 + 1e-6 |min D| targets population inputs evaluated on fine grids.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    pop = as_population(population)
    use_profile = model.supports_profile and method in ("auto", "closed_form")
    d_values = np.zeros(grid.shape[0])
    for x, p0x, w in pop:
        entropy = float(np.sum(p0x[p0x > 0] * np.log(p0x[p0x > 0])))
        if use_profile:
            batch = model.profile_theta_batch(grid, x)
            d_values += w * (entropy - batched_profile_loglik(batch, p0x))
        else:
            for i, theta in enumerate(grid):
                cs = build_constraints(model, theta, x)
                d_values[i] += w * kl_divergence(p0x, project_generic(p0x, cs).q_star)
    min_d = float(np.min(d_values))
    if tol is None:
        tol = 1e-8 + 1e-6 * abs(min_d)
    accepted = d_values <= min_d + tol
    return PseudoTrueResult(grid, d_values, accepted, min_d, float(tol))


def counterfactual_ci(cs: ConfidenceSet, functional) -> tuple:
    """Interval [min, max] of a scalar functional over the accepted points."""
    pts = cs.accepted_points
    if pts.shape[0] == 0:
        raise EmptyConfidenceSetError(
            "confidence set is empty; no interval can be formed"
        )
    vals = np.array([float(functional(theta)) for theta in pts])
    return float(vals.min()), float(vals.max())
