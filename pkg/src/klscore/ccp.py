"""Nonparametric first-stage estimation of the conditional outcome probabilities.

Cell means handle discrete covariates; a tensor-product B-spline series
handles continuous ones (rescaled to the unit cube, least squares per
outcome).  Estimates are floored at a small clip level and renormalized by
mixing toward the floor, so every evaluated pmf stays on the simplex with
mass at least `clip` on each outcome.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import (
    ConfigError,
    DomainError,
    ExtrapolationError,
    OverparameterizationError,
    UnseenCovariateError,
)
from .events import OutcomeSpace

DEFAULT_CLIP = 1e-3
COND_LIMIT = 1e12


@dataclass
class Dataset:
    """Outcome indices with covariate rows over a fixed outcome space."""

    outcomes: np.ndarray
    covariates: np.ndarray
    outcome_space: OutcomeSpace

    def __post_init__(self):
        self.outcomes = np.asarray(self.outcomes, dtype=int)
        self.covariates = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        if self.outcomes.size < 1:
            raise ConfigError("dataset must contain at least one observation")
        if self.covariates.shape[0] != self.outcomes.size:
            raise ConfigError("covariate rows must match the number of outcomes")
        if not np.all(np.isfinite(self.covariates)):
            raise ConfigError("covariates must be finite")
        if np.any(self.outcomes < 0) or np.any(self.outcomes >= self.outcome_space.size):
            raise ConfigError("outcome index out of range")

    @property
    def n(self) -> int:
        return self.outcomes.size

    @classmethod
    def from_labels(cls, labels, covariates, space: OutcomeSpace) -> "Dataset":
        idx = np.array([space.index(l) for l in labels], dtype=int)
        return cls(idx, covariates, space)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            d = self.covariates.shape[1]
            writer.writerow(["outcome"] + [f"x{j + 1}" for j in range(d)])
            for yi, row in zip(self.outcomes, self.covariates):
                writer.writerow([self.outcome_space.labels[yi]] + [repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path, space: OutcomeSpace) -> "Dataset":
        labels = []
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "outcome":
                raise ConfigError("dataset CSV must have an 'outcome' first column")
            for rec in reader:
                labels.append(rec[0])
                rows.append([float(v) for v in rec[1:]])
        return cls.from_labels(labels, np.array(rows, dtype=float), space)


def _clip_mix(p_raw: np.ndarray, clip: float) -> np.ndarray:
    """Mix toward the clip floor: p -> clip + (1 - M*clip) * p.

    Keeps the simplex exactly and guarantees mass >= clip per outcome.
    """
    m = p_raw.shape[-1]
    if clip == 0.0:
        return p_raw
    return clip + (1.0 - m * clip) * p_raw


def _validate_clip(clip: float, m: int) -> float:
    if not (0.0 <= clip < 1.0 / m):
        raise ConfigError(f"clip must be in [0, 1/{m}), got {clip}")
    return float(clip)


class CcpEstimate:
    """Common surface of fitted conditional-choice-probability estimators."""

    kind: str
    clip: float
    basis_dim: int
    outcome_space: OutcomeSpace

    def eval(self, y, x) -> float:
        idx = self.outcome_space.index(y) if isinstance(y, str) else int(y)
        return float(self.eval_matrix(np.atleast_2d(np.asarray(x, float)))[0, idx])

    def eval_matrix(self, X) -> np.ndarray:
        raise NotImplementedError

    def to_json(self) -> str:
        raise NotImplementedError


class CellMeanCcp(CcpEstimate):
    """Frequency estimator per distinct covariate value."""

    kind = "cell_mean"

    def __init__(self, clip: float = DEFAULT_CLIP):
        self.clip = clip
        self._cells: dict = {}
        self.basis_dim = 0

    def fit(self, data: Dataset) -> "CellMeanCcp":
        m = data.outcome_space.size
        self.clip = _validate_clip(self.clip, m)
        self.outcome_space = data.outcome_space
        counts: dict = {}
        for yi, row in zip(data.outcomes, data.covariates):
            key = tuple(float(v) for v in row)
            if key not in counts:
                counts[key] = np.zeros(m)
            counts[key][yi] += 1.0
        if len(counts) > 10**4:
            raise ConfigError(
                f"{len(counts)} distinct covariate values; cell means need at most 10^4"
            )
        self._cells = {k: v / v.sum() for k, v in counts.items()}
        self.basis_dim = len(self._cells)
        return self

    def raw_cell(self, x) -> np.ndarray:
        """Pre-clip cell frequencies at one covariate value."""
        key = tuple(float(v) for v in np.atleast_1d(np.asarray(x, float)))
        if key not in self._cells:
            raise UnseenCovariateError(f"no observations at covariate value {key}")
        return self._cells[key].copy()

    def eval_matrix(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        uniq, inverse = np.unique(X, axis=0, return_inverse=True)
        table = np.empty((uniq.shape[0], self.outcome_space.size))
        for i, row in enumerate(uniq):
            table[i] = _clip_mix(self.raw_cell(row), self.clip)
        return table[inverse.ravel()]

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "clip": self.clip,
                "labels": list(self.outcome_space.labels),
                "cells": [[list(k), [float(p) for p in v]] for k, v in self._cells.items()],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "CellMeanCcp":
        obj = json.loads(text)
        est = cls(clip=obj["clip"])
        est.outcome_space = OutcomeSpace(obj["labels"])
        est._cells = {tuple(k): np.asarray(v, dtype=float) for k, v in obj["cells"]}
        est.basis_dim = len(est._cells)
        return est


def _quantile_knots(x: np.ndarray, n_interior: int, degree: int) -> np.ndarray:
    """Clamped knot vector on [0,1] with interior knots at sample quantiles."""
    if n_interior > 0:
        probs = np.linspace(0, 1, n_interior + 2)[1:-1]
        interior = np.quantile(x, probs)
        interior = np.clip(interior, 1e-9, 1 - 1e-9)
        interior = np.maximum.accumulate(interior)  # nondecreasing under ties
    else:
        interior = np.empty(0)
    return np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])


def _design_1d(x: np.ndarray, knots: np.ndarray, degree: int) -> np.ndarray:
    xx = np.clip(x, 0.0, 1.0 - 1e-12)
    return BSpline.design_matrix(xx, knots, degree).toarray()


class BsplineCcp(CcpEstimate):
    """Tensor-product B-spline series estimator on rescaled covariates.

    Covariates are affinely mapped to [0,1]^d using the training range;
    evaluation outside that range raises.  Optional discrete columns stratify
    the fit: one spline fit per discrete cell, falling back to the pooled fit
    (with a warning) when a cell has fewer than 5 * basis_dim observations.
    """

    kind = "bspline"

    def __init__(self, degree: int = 3, knots_per_dim=None, clip: float = DEFAULT_CLIP,
                 discrete_cols=()):
        self.degree = int(degree)
        self.knots_per_dim = knots_per_dim
        self.clip = clip
        self.discrete_cols = tuple(int(c) for c in discrete_cols)
        self._fits: dict = {}

    # one spline fit = (knots per dim, coefficient matrix (K, M))
    def _fit_block(self, Xc: np.ndarray, y: np.ndarray, m: int):
        n, d = Xc.shape
        interior = self.knots_per_dim if self.knots_per_dim is not None else [0] * d
        if len(interior) != d:
            raise ConfigError("knots_per_dim length must match continuous dimension")
        knots = [_quantile_knots(Xc[:, j], int(interior[j]), self.degree) for j in range(d)]
        design = self._design(Xc, knots)
        k_dim = design.shape[1]
        if k_dim >= n:
            raise OverparameterizationError(f"basis dimension {k_dim} >= sample size {n}")
        gram = design.T @ design
        indicators = np.zeros((n, m))
        indicators[np.arange(n), y] = 1.0
        if np.linalg.cond(gram) > COND_LIMIT:
            coef = np.linalg.pinv(design) @ indicators
        else:
            coef = np.linalg.solve(gram, design.T @ indicators)
        return knots, coef

    def _design(self, Xc: np.ndarray, knots) -> np.ndarray:
        mats = [_design_1d(Xc[:, j], knots[j], self.degree) for j in range(Xc.shape[1])]
        design = mats[0]
        for mat in mats[1:]:
            design = (design[:, :, None] * mat[:, None, :]).reshape(Xc.shape[0], -1)
        return design

    def fit(self, data: Dataset) -> "BsplineCcp":
        m = data.outcome_space.size
        self.clip = _validate_clip(self.clip, m)
        self.outcome_space = data.outcome_space
        d_all = data.covariates.shape[1]
        self.cont_cols = tuple(j for j in range(d_all) if j not in self.discrete_cols)
        if not self.cont_cols:
            raise ConfigError("no continuous columns; use cell means instead")
        Xc = data.covariates[:, self.cont_cols]
        self._lo = Xc.min(axis=0)
        self._hi = Xc.max(axis=0)
        span = np.where(self._hi > self._lo, self._hi - self._lo, 1.0)
        self._span = span
        Xu = (Xc - self._lo) / span
        pooled = self._fit_block(Xu, data.outcomes, m)
        self._fits = {None: pooled}
        self.basis_dim = pooled[1].shape[0]
        if self.discrete_cols:
            rows_by_cell: dict = {}
            for i, row in enumerate(data.covariates):
                key = tuple(float(row[c]) for c in self.discrete_cols)
                rows_by_cell.setdefault(key, []).append(i)
            for key, idx in rows_by_cell.items():
                idx = np.asarray(idx)
                if idx.size < 5 * self.basis_dim:
                    warnings.warn(
                        f"discrete cell {key} has {idx.size} rows; using the pooled fit",
                        RuntimeWarning, stacklevel=2,
                    )
                    continue
                self._fits[key] = self._fit_block(Xu[idx], data.outcomes[idx], m)
        return self

    def _unit(self, X: np.ndarray) -> np.ndarray:
        Xc = X[:, self.cont_cols]
        Xu = (Xc - self._lo) / self._span
        if np.any(Xu < -1e-9) or np.any(Xu > 1 + 1e-9):
            raise ExtrapolationError("covariate outside the range used for fitting")
        return np.clip(Xu, 0.0, 1.0)

    def eval_matrix(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Xu = self._unit(X)
        m = self.outcome_space.size
        raw = np.empty((X.shape[0], m))
        if not self.discrete_cols:
            knots, coef = self._fits[None]
            raw = self._design(Xu, knots) @ coef
        else:
            for i in range(X.shape[0]):
                key = tuple(float(X[i, c]) for c in self.discrete_cols)
                knots, coef = self._fits.get(key, self._fits[None])
                raw[i] = self._design(Xu[i : i + 1], knots) @ coef
        raw = np.clip(raw, 0.0, 1.0)
        total = raw.sum(axis=1, keepdims=True)
        raw = np.where(total > 0, raw / np.maximum(total, 1e-12), 1.0 / m)
        return _clip_mix(raw, self.clip)

    def to_json(self) -> str:
        fits = []
        for key, (knots, coef) in self._fits.items():
            fits.append(
                {
                    "cell": None if key is None else list(key),
                    "knots": [list(map(float, kv)) for kv in knots],
                    "coef": [[float(v) for v in row] for row in coef],
                }
            )
        return json.dumps(
            {
                "kind": self.kind,
                "degree": self.degree,
                "clip": self.clip,
                "labels": list(self.outcome_space.labels),
                "cont_cols": list(self.cont_cols),
                "discrete_cols": list(self.discrete_cols),
                "lo": [float(v) for v in self._lo],
                "span": [float(v) for v in self._span],
                "fits": fits,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "BsplineCcp":
        obj = json.loads(text)
        est = cls(degree=obj["degree"], clip=obj["clip"], discrete_cols=obj["discrete_cols"])
        est.outcome_space = OutcomeSpace(obj["labels"])
        est.cont_cols = tuple(obj["cont_cols"])
        est._lo = np.asarray(obj["lo"], dtype=float)
        est._span = np.asarray(obj["span"], dtype=float)
        est._hi = est._lo + est._span
        est._fits = {}
        for f in obj["fits"]:
            key = None if f["cell"] is None else tuple(f["cell"])
            est._fits[key] = (
                [np.asarray(kv, dtype=float) for kv in f["knots"]],
                np.asarray(f["coef"], dtype=float),
            )
        est.basis_dim = est._fits[None][1].shape[0]
        return est


def fit_cell_mean(data: Dataset, clip: float = DEFAULT_CLIP) -> CellMeanCcp:
    """Cell-mean conditional choice probabilities for discrete covariates."""
    return CellMeanCcp(clip=clip).fit(data)


def fit_bspline(data: Dataset, degree: int = 3, knots_per_dim=None,
                clip: float = DEFAULT_CLIP, discrete_cols=()) -> BsplineCcp:
    """Tensor-product B-spline series estimate of the conditional pmf."""
    return BsplineCcp(degree=degree, knots_per_dim=knots_per_dim, clip=clip,
                      discrete_cols=discrete_cols).fit(data)


def default_basis_dim(n: int, d_x: int, alpha_smooth: float, kappa0: float = 1.0) -> int:
    """Series dimension from the rate rule round(kappa0 * (n/ln n)^(d/(2a+d))),
    rounded to the nearest tensor-product-feasible value m^d.

    Returns 0 when there are no continuous covariates (cell means apply).
    """
    if d_x == 0:
        return 0
    if n < 50:
        raise DomainError("basis-dimension rule needs n >= 50")
    k_scalar = kappa0 * (n / np.log(n)) ** (d_x / (2.0 * alpha_smooth + d_x))
    k_rounded = max(1, round(k_scalar))
    m_per_dim = max(1, round(k_rounded ** (1.0 / d_x)))
    return int(m_per_dim**d_x)
