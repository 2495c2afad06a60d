"""Concrete incomplete models behind one interface.

Three models are provided:

* ``EntryGameModel`` - two-player entry game with bivariate-normal payoff
  shocks; outcome support {(0,0),(0,1),(1,0),(1,1)} where the latent-shock
  region admitting both (1,0) and (0,1) makes the model incomplete.
* ``UniformEntryGameModel`` - analytically tractable variant with
  Uniform[0,1]^2 shocks, interaction -0.5 + theta_j * x, and no (0,0) outcome.
* ``ChoiceSetModel`` - three alternatives with a latent binary choice set,
  yielding two ceiling constraints on the outcome distribution.

Each model exposes the containment functional nu(theta, A, x) (probability
that the predicted outcome set is contained in the event A) and its analytic
theta-gradient.  The two game models additionally expose a "pair profile":
the point-identified outcome masses plus the (eta1, eta2, eta3) bracket on the
(1,0)/(0,1) pair, which is all that closed-form projection and scoring need.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy import special as sp

from .errors import ConfigError, DomainError
from .events import EventSet, OutcomeSpace
from .numerics import bvn_pdf, std_normal_pdf, validate_rho

DEFAULT_DELTA_CAP = -1e-3
ENTRY_RHO_LIMIT = 0.9

ENTRY_LABELS = ("(0,0)", "(0,1)", "(1,0)", "(1,1)")
UNIFORM_LABELS = ("(1,1)", "(0,1)", "(1,0)")


@dataclass(frozen=True)
class EtaTriple:
    """Pair-outcome bracket: total pair mass and upper/lower bounds on (1,0)."""

    eta1: float
    eta2: float
    eta3: float

    def __post_init__(self):
        e1, e2, e3 = self.eta1, self.eta2, self.eta3
        tol = 1e-9
        if not (-tol <= e3 <= e2 + tol and e2 <= e1 + tol and e1 <= 1.0 + tol):
            raise DomainError(f"eta ordering violated: {e1}, {e2}, {e3}")


@dataclass(frozen=True)
class EntryGameTheta:
    """Structural parameters of the two-player entry game."""

    beta1: np.ndarray
    delta1: float
    beta2: np.ndarray
    delta2: float
    rho: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "beta1", np.asarray(self.beta1, dtype=float))
        object.__setattr__(self, "beta2", np.asarray(self.beta2, dtype=float))


# ---------------------------------------------------------------------------
# Entry game core: region probabilities and gradients from rectangle limits.
#
# With a_j = -x_j'beta_j and b_j = a_j - delta_j (so b_j >= a_j when
# delta_j <= 0), the shock space partitions into
#   S00 = (-inf,a1) x (-inf,a2)
#   S11 = [b1,inf) x [b2,inf)
#   S10 = [b1,inf) x (-inf,b2)  union  [a1,b1) x (-inf,a2)
#   S01 = (-inf,a1) x [a2,inf)  union  [a1,b1) x [b2,inf)
#   M   = [a1,b1) x [a2,b2)     (both (1,0) and (0,1) are equilibria)
# ---------------------------------------------------------------------------


def _phi2(h, k, rho):
    """Finite-argument bivariate normal CDF, vectorized (internal, no checks)."""
    from .numerics import _owens_phi2

    if rho == 0.0:
        return sp.ndtr(h) * sp.ndtr(k)
    return _owens_phi2(np.asarray(h, float), np.asarray(k, float), rho)


def _region_probs_from_limits(a1, b1, a2, b2, rho):
    """Masses of (S00, S11, S10, S01, M); arrays broadcast, last axis appended."""
    a1, b1, a2, b2 = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (a1, b1, a2, b2))
    )
    pa1, pb1, pa2, pb2 = sp.ndtr(a1), sp.ndtr(b1), sp.ndtr(a2), sp.ndtr(b2)
    paa = _phi2(a1, a2, rho)
    pab = _phi2(a1, b2, rho)
    pba = _phi2(b1, a2, rho)
    pbb = _phi2(b1, b2, rho)
    f00 = paa
    f11 = 1.0 - pb1 - pb2 + pbb
    f10 = pb2 - pbb + pba - paa
    f01 = pb1 - pbb + pab - paa
    fm = pbb - pab - pba + paa
    out = np.stack([f00, f11, f10, f01, fm], axis=-1)
    return np.clip(out, 0.0, 1.0)


def _cond_cdf(z, u, rho):
    """Phi((z - rho*u)/sqrt(1-rho^2)) used in d/du Phi2(u, z)."""
    s = np.sqrt((1.0 - rho) * (1.0 + rho))
    return sp.ndtr((z - rho * u) / s)


def _region_grads_from_limits(a1, b1, a2, b2, rho, with_rho=False):
    """Derivatives of the five region masses w.r.t. (a1, b1, a2, b2[, rho]).

    Returns an array of shape broadcast(...) + (5, 4) ordered like
    ``_region_probs_from_limits``; with ``with_rho`` the last axis is 5.
    """
    a1, b1, a2, b2 = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (a1, b1, a2, b2))
    )
    ph_a1, ph_b1 = std_normal_pdf(a1), std_normal_pdf(b1)
    ph_a2, ph_b2 = std_normal_pdf(a2), std_normal_pdf(b2)
    # dPhi2(u,v)/du = phi(u) * Phi((v - rho u)/s)
    d1_aa = ph_a1 * _cond_cdf(a2, a1, rho)
    d1_ab = ph_a1 * _cond_cdf(b2, a1, rho)
    d1_ba = ph_b1 * _cond_cdf(a2, b1, rho)
    d1_bb = ph_b1 * _cond_cdf(b2, b1, rho)
    d2_aa = ph_a2 * _cond_cdf(a1, a2, rho)
    d2_ba = ph_a2 * _cond_cdf(b1, a2, rho)
    d2_ab = ph_b2 * _cond_cdf(a1, b2, rho)
    d2_bb = ph_b2 * _cond_cdf(b1, b2, rho)
    zeros = np.zeros_like(a1)
    # rows: region; cols: (a1, b1, a2, b2)
    g00 = np.stack([d1_aa, zeros, d2_aa, zeros], axis=-1)
    g11 = np.stack([zeros, d1_bb - ph_b1, zeros, d2_bb - ph_b2], axis=-1)
    g10 = np.stack([-d1_aa, d1_ba - d1_bb, d2_ba - d2_aa, ph_b2 - d2_bb], axis=-1)
    g01 = np.stack([d1_ab - d1_aa, ph_b1 - d1_bb, -d2_aa, d2_ab - d2_bb], axis=-1)
    gm = np.stack([d1_aa - d1_ab, d1_bb - d1_ba, d2_aa - d2_ba, d2_bb - d2_ab], axis=-1)
    grads = np.stack([g00, g11, g10, g01, gm], axis=-2)
    if not with_rho:
        return grads
    r_aa = bvn_pdf(a1, a2, rho)
    r_ab = bvn_pdf(a1, b2, rho)
    r_ba = bvn_pdf(b1, a2, rho)
    r_bb = bvn_pdf(b1, b2, rho)
    dr = np.stack(
        [
            r_aa,
            r_bb,
            -r_bb + r_ba - r_aa,
            -r_bb + r_ab - r_aa,
            r_bb - r_ab - r_ba + r_aa,
        ],
        axis=-1,
    )
    return np.concatenate([grads, dr[..., None]], axis=-1)


def entry_region_probs(theta: EntryGameTheta, x1, x2) -> np.ndarray:
    """Region masses (S00, S11, S10, S01, M) at covariate pair (x1, x2)."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    rho = validate_rho(theta.rho, ENTRY_RHO_LIMIT)
    a1 = -float(x1 @ theta.beta1)
    a2 = -float(x2 @ theta.beta2)
    b1 = a1 - theta.delta1
    b2 = a2 - theta.delta2
    return _region_probs_from_limits(a1, b1, a2, b2, rho)


def eta(theta: EntryGameTheta, x1, x2) -> EtaTriple:
    """Pair-mass bracket implied by the entry game at (x1, x2)."""
    f = entry_region_probs(theta, x1, x2)
    return EtaTriple(eta1=float(1.0 - f[0] - f[1]), eta2=float(f[2] + f[4]), eta3=float(f[2]))


@dataclass
class PairProfile:
    """Point-identified masses plus the bracketed (1,0)/(0,1) pair.

    The polytope of outcome distributions is
      q[fixed_idx[j]] = fixed_mass[j],
      q[idx_a] + q[idx_b] = eta1,   eta3 <= q[idx_a] <= eta2.
    Gradients are populated on request.
    """

    space: OutcomeSpace
    fixed_idx: tuple
    fixed_mass: np.ndarray
    idx_a: int
    idx_b: int
    eta1: float
    eta2: float
    eta3: float
    fixed_grad: np.ndarray | None = None
    eta_grad: np.ndarray | None = None


class ModelSpec(ABC):
    """Interface every incomplete model implements."""

    outcome_space: OutcomeSpace
    param_dim: int
    supports_profile: bool = False

    @abstractmethod
    def param_bounds(self) -> list:
        """Per-coordinate (lo, hi) bounds of the parameter space."""

    @abstractmethod
    def validate_theta(self, theta) -> np.ndarray:
        """Check theta against the parameter space; return it as an array."""

    @abstractmethod
    def nu(self, theta, event: EventSet, x) -> float:
        """Containment functional: P(predicted outcome set is inside the event)."""

    @abstractmethod
    def grad_nu(self, theta, event: EventSet, x) -> np.ndarray:
        """Analytic theta-gradient of ``nu``."""

    def equality_event_masks(self, x):
        """Masks of events the model declares point-identified, or None."""
        return None

    def theta_in_space(self, thetas) -> np.ndarray:
        """Vectorized membership check against the parameter box."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        ok = np.ones(thetas.shape[0], dtype=bool)
        for j, (lo, hi) in enumerate(self.param_bounds()):
            ok &= (thetas[:, j] >= lo) & (thetas[:, j] <= hi)
        return ok

    def profile(self, theta, x, grad: bool = False) -> PairProfile:
        raise NotImplementedError

    def profile_x_batch(self, theta, X, grad: bool = False):
        raise NotImplementedError

    def profile_theta_batch(self, thetas, x):
        raise NotImplementedError

    def to_config(self) -> dict:
        raise NotImplementedError


def _event_has(event: EventSet, idx: int) -> bool:
    return bool(event.mask >> idx & 1)


class EntryGameModel(ModelSpec):
    """Bivariate-probit entry game over raw covariate rows.

    ``x1_cols``/``x2_cols`` select each player's covariates from a raw row; an
    intercept is prepended, so beta_j has len(xj_cols) + 1 coordinates.  The
    parameter vector is [beta1, delta1, beta2, delta2] plus a trailing rho
    when ``rho_in_theta`` is set.  Interaction effects are capped at
    ``delta_cap`` < 0 so the support of the predicted set does not vary over
    the parameter space.
    """

    supports_profile = True

    def __init__(self, x1_cols, x2_cols, rho: float = 0.0, rho_in_theta: bool = False,
                 delta_cap: float = DEFAULT_DELTA_CAP, rho_limit: float = ENTRY_RHO_LIMIT):
        if delta_cap >= 0:
            raise ConfigError("delta_cap must be negative")
        self.outcome_space = OutcomeSpace(ENTRY_LABELS)
        self.x1_cols = tuple(int(c) for c in x1_cols)
        self.x2_cols = tuple(int(c) for c in x2_cols)
        self.k1 = len(self.x1_cols) + 1
        self.k2 = len(self.x2_cols) + 1
        self.rho_in_theta = bool(rho_in_theta)
        self.rho_fixed = validate_rho(rho, rho_limit)
        self.rho_limit = float(rho_limit)
        self.delta_cap = float(delta_cap)
        self.param_dim = self.k1 + self.k2 + 2 + (1 if rho_in_theta else 0)
        self.idx_delta1 = self.k1
        self.idx_delta2 = self.k1 + 1 + self.k2
        self._region_memo: dict = {}
        self._i00 = self.outcome_space.index("(0,0)")
        self._i01 = self.outcome_space.index("(0,1)")
        self._i10 = self.outcome_space.index("(1,0)")
        self._i11 = self.outcome_space.index("(1,1)")

    # -- parameter packing ---------------------------------------------------

    def pack(self, egt: EntryGameTheta) -> np.ndarray:
        parts = [egt.beta1, [egt.delta1], egt.beta2, [egt.delta2]]
        if self.rho_in_theta:
            parts.append([egt.rho])
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def unpack(self, theta) -> EntryGameTheta:
        theta = np.asarray(theta, dtype=float)
        k1, k2 = self.k1, self.k2
        rho = theta[-1] if self.rho_in_theta else self.rho_fixed
        return EntryGameTheta(
            beta1=theta[:k1],
            delta1=float(theta[k1]),
            beta2=theta[k1 + 1 : k1 + 1 + k2],
            delta2=float(theta[k1 + 1 + k2]),
            rho=float(rho),
        )

    def param_bounds(self) -> list:
        bounds = [(-np.inf, np.inf)] * self.param_dim
        bounds[self.idx_delta1] = (-np.inf, self.delta_cap)
        bounds[self.idx_delta2] = (-np.inf, self.delta_cap)
        if self.rho_in_theta:
            bounds[-1] = (-self.rho_limit, self.rho_limit)
        return bounds

    def validate_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.param_dim,):
            raise DomainError(f"theta must have {self.param_dim} coordinates")
        if theta[self.idx_delta1] > self.delta_cap or theta[self.idx_delta2] > self.delta_cap:
            raise DomainError(
                f"interaction effects must be <= {self.delta_cap}, got "
                f"{theta[self.idx_delta1]}, {theta[self.idx_delta2]}"
            )
        if self.rho_in_theta:
            validate_rho(theta[-1], self.rho_limit)
        return theta

    # -- design handling -----------------------------------------------------

    def design(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        x1 = np.concatenate([[1.0], x[list(self.x1_cols)]])
        x2 = np.concatenate([[1.0], x[list(self.x2_cols)]])
        return x1, x2

    def design_batch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ones = np.ones((X.shape[0], 1))
        x1 = np.hstack([ones, X[:, list(self.x1_cols)]])
        x2 = np.hstack([ones, X[:, list(self.x2_cols)]])
        return x1, x2

    def _limits_batch(self, theta, X):
        egt = self.unpack(self.validate_theta(theta))
        x1, x2 = self.design_batch(X)
        a1 = -(x1 @ egt.beta1)
        a2 = -(x2 @ egt.beta2)
        return a1, a1 - egt.delta1, a2, a2 - egt.delta2, egt.rho, x1, x2

    # -- containment functional ----------------------------------------------

    def region_probs(self, theta, x) -> np.ndarray:
        # memoized: constraint building evaluates many events at one (theta, x)
        theta = np.asarray(theta, dtype=float)
        x = np.asarray(x, dtype=float)
        key = (theta.tobytes(), x.tobytes())
        hit = self._region_memo.get(key)
        if hit is None:
            hit = self.region_probs_batch(theta, np.atleast_2d(x))[0]
            if len(self._region_memo) > 4096:
                self._region_memo.clear()
            self._region_memo[key] = hit
        return hit

    def region_probs_batch(self, theta, X) -> np.ndarray:
        a1, b1, a2, b2, rho, _, _ = self._limits_batch(theta, X)
        return _region_probs_from_limits(a1, b1, a2, b2, rho)

    def region_grads_batch(self, theta, X) -> np.ndarray:
        """(n, 5, d) theta-gradients of the region masses."""
        a1, b1, a2, b2, rho, x1, x2 = self._limits_batch(theta, X)
        lim = _region_grads_from_limits(a1, b1, a2, b2, rho, with_rho=self.rho_in_theta)
        n = x1.shape[0]
        out = np.zeros((n, 5, self.param_dim))
        da1, db1, da2, db2 = lim[..., 0], lim[..., 1], lim[..., 2], lim[..., 3]
        out[:, :, : self.k1] = -(da1 + db1)[..., None] * x1[:, None, :]
        out[:, :, self.idx_delta1] = -db1
        out[:, :, self.k1 + 1 : self.k1 + 1 + self.k2] = -(da2 + db2)[..., None] * x2[:, None, :]
        out[:, :, self.idx_delta2] = -db2
        if self.rho_in_theta:
            out[:, :, -1] = lim[..., 4]
        return out

    def _nu_weights(self, event: EventSet) -> np.ndarray:
        """Weights of (S00, S11, S10, S01, M) in nu(event)."""
        w = np.zeros(5)
        w[0] = 1.0 if _event_has(event, self._i00) else 0.0
        w[1] = 1.0 if _event_has(event, self._i11) else 0.0
        w[2] = 1.0 if _event_has(event, self._i10) else 0.0
        w[3] = 1.0 if _event_has(event, self._i01) else 0.0
        w[4] = 1.0 if (_event_has(event, self._i10) and _event_has(event, self._i01)) else 0.0
        return w

    def nu(self, theta, event: EventSet, x) -> float:
        return float(self.region_probs(theta, x) @ self._nu_weights(event))

    def grad_nu(self, theta, event: EventSet, x) -> np.ndarray:
        grads = self.region_grads_batch(theta, np.atleast_2d(np.asarray(x, float)))[0]
        return self._nu_weights(event) @ grads

    # -- pair profile ----------------------------------------------------------

    def profile(self, theta, x, grad: bool = False) -> PairProfile:
        X = np.atleast_2d(np.asarray(x, dtype=float))
        f = self.region_probs_batch(theta, X)[0]
        eta1 = 1.0 - f[0] - f[1]
        prof = PairProfile(
            space=self.outcome_space,
            fixed_idx=(self._i00, self._i11),
            fixed_mass=np.array([f[0], f[1]]),
            idx_a=self._i10,
            idx_b=self._i01,
            eta1=float(eta1),
            eta2=float(f[2] + f[4]),
            eta3=float(f[2]),
        )
        if grad:
            g = self.region_grads_batch(theta, X)[0]
            prof.fixed_grad = np.stack([g[0], g[1]])
            prof.eta_grad = np.stack([-(g[0] + g[1]), g[2] + g[4], g[2]])
        return prof

    def profile_x_batch(self, theta, X, grad: bool = False):
        f = self.region_probs_batch(theta, X)
        fixed = f[:, [0, 1]]
        etas = np.stack([1.0 - f[:, 0] - f[:, 1], f[:, 2] + f[:, 4], f[:, 2]], axis=1)
        if not grad:
            return {"fixed_idx": (self._i00, self._i11), "idx_a": self._i10,
                    "idx_b": self._i01, "fixed": fixed, "eta": etas}
        g = self.region_grads_batch(theta, X)
        fixed_g = g[:, [0, 1], :]
        eta_g = np.stack([-(g[:, 0] + g[:, 1]), g[:, 2] + g[:, 4], g[:, 2]], axis=1)
        return {"fixed_idx": (self._i00, self._i11), "idx_a": self._i10, "idx_b": self._i01,
                "fixed": fixed, "eta": etas, "fixed_grad": fixed_g, "eta_grad": eta_g}

    def profile_theta_batch(self, thetas, x):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        x1, x2 = self.design(x)
        k1, k2 = self.k1, self.k2
        rho = self.rho_fixed
        if self.rho_in_theta and np.ptp(thetas[:, -1]) > 0:
            # fall back to per-theta evaluation when rho varies across the batch
            rows = [self.profile(t, x) for t in thetas]
            fixed = np.array([r.fixed_mass for r in rows])
            etas = np.array([[r.eta1, r.eta2, r.eta3] for r in rows])
            return {"fixed_idx": (self._i00, self._i11), "idx_a": self._i10,
                    "idx_b": self._i01, "fixed": fixed, "eta": etas}
        if self.rho_in_theta:
            rho = float(thetas[0, -1])
        a1 = -(thetas[:, :k1] @ x1)
        b1 = a1 - thetas[:, k1]
        a2 = -(thetas[:, k1 + 1 : k1 + 1 + k2] @ x2)
        b2 = a2 - thetas[:, self.idx_delta2]
        f = _region_probs_from_limits(a1, b1, a2, b2, rho)
        fixed = f[:, [0, 1]]
        etas = np.stack([1.0 - f[:, 0] - f[:, 1], f[:, 2] + f[:, 4], f[:, 2]], axis=1)
        return {"fixed_idx": (self._i00, self._i11), "idx_a": self._i10,
                "idx_b": self._i01, "fixed": fixed, "eta": etas}

    def to_config(self) -> dict:
        return {
            "model": "entry_probit",
            "params": {
                "x1_cols": list(self.x1_cols),
                "x2_cols": list(self.x2_cols),
                "rho": self.rho_fixed,
                "rho_in_theta": self.rho_in_theta,
                "delta_cap": self.delta_cap,
            },
        }


class UniformEntryGameModel(ModelSpec):
    """Entry game with Uniform[0,1]^2 shocks and interaction -0.5 + theta_j * x.

    The outcome space is {(1,1), (0,1), (1,0)}: with nonnegative shocks a
    player facing no rival always enters, so (0,0) never occurs.  At x = 0
    the containment functional does not depend on theta at all.
    """

    supports_profile = True

    def __init__(self, box=(-0.45, 0.0), offset: float = -0.5):
        self.outcome_space = OutcomeSpace(UNIFORM_LABELS)
        self.param_dim = 2
        self.box = (float(box[0]), float(box[1]))
        self.offset = float(offset)
        self._i11 = self.outcome_space.index("(1,1)")
        self._i01 = self.outcome_space.index("(0,1)")
        self._i10 = self.outcome_space.index("(1,0)")

    def param_bounds(self) -> list:
        return [self.box, self.box]

    def validate_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (2,):
            raise DomainError("theta must have 2 coordinates")
        lo, hi = self.box
        if np.any(theta < lo - 1e-12) or np.any(theta > hi + 1e-12):
            raise DomainError(f"theta outside [{lo}, {hi}]^2: {theta.tolist()}")
        return theta

    def _v(self, theta, xval):
        # v_j = 1 + delta_j(x) = 1 + offset + theta_j * x
        theta = np.asarray(theta, dtype=float)
        return 1.0 + self.offset + theta * float(xval)

    def _support_masses(self, theta, xval):
        v1, v2 = self._v(theta, xval)
        return np.array([v1 * v2, (1 - v1) * v2, v1 * (1 - v2), (1 - v1) * (1 - v2)])

    def _support_grads(self, theta, xval):
        v1, v2 = self._v(theta, xval)
        x = float(xval)
        return np.array(
            [
                [x * v2, x * v1],
                [-x * v2, x * (1 - v1)],
                [x * (1 - v2), -x * v1],
                [-x * (1 - v2), -x * (1 - v1)],
            ]
        )

    def _weights(self, event: EventSet) -> np.ndarray:
        has11 = _event_has(event, self._i11)
        has01 = _event_has(event, self._i01)
        has10 = _event_has(event, self._i10)
        return np.array(
            [1.0 * has11, 1.0 * has01, 1.0 * has10, 1.0 * (has01 and has10)]
        )

    def nu(self, theta, event: EventSet, x) -> float:
        xval = np.atleast_1d(np.asarray(x, float))[0]
        return float(self._weights(event) @ self._support_masses(self.validate_theta(theta), xval))

    def grad_nu(self, theta, event: EventSet, x) -> np.ndarray:
        xval = np.atleast_1d(np.asarray(x, float))[0]
        return self._weights(event) @ self._support_grads(self.validate_theta(theta), xval)

    def profile(self, theta, x, grad: bool = False) -> PairProfile:
        xval = np.atleast_1d(np.asarray(x, float))[0]
        m = self._support_masses(self.validate_theta(theta), xval)
        prof = PairProfile(
            space=self.outcome_space,
            fixed_idx=(self._i11,),
            fixed_mass=np.array([m[0]]),
            idx_a=self._i10,
            idx_b=self._i01,
            eta1=float(1.0 - m[0]),
            eta2=float(m[2] + m[3]),
            eta3=float(m[2]),
        )
        if grad:
            g = self._support_grads(theta, xval)
            prof.fixed_grad = g[[0]]
            prof.eta_grad = np.stack([-g[0], g[2] + g[3], g[2]])
        return prof

    def profile_x_batch(self, theta, X, grad: bool = False):
        theta = self.validate_theta(theta)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        xv = X[:, 0]
        v1 = 1.0 + self.offset + theta[0] * xv
        v2 = 1.0 + self.offset + theta[1] * xv
        g11 = v1 * v2
        g10 = v1 * (1 - v2)
        gm = (1 - v1) * (1 - v2)
        out = {
            "fixed_idx": (self._i11,),
            "idx_a": self._i10,
            "idx_b": self._i01,
            "fixed": g11[:, None],
            "eta": np.stack([1.0 - g11, g10 + gm, g10], axis=1),
        }
        if grad:
            d_g11 = np.stack([xv * v2, xv * v1], axis=1)
            d_g10 = np.stack([xv * (1 - v2), -xv * v1], axis=1)
            d_gm = np.stack([-xv * (1 - v2), -xv * (1 - v1)], axis=1)
            out["fixed_grad"] = d_g11[:, None, :]
            out["eta_grad"] = np.stack([-d_g11, d_g10 + d_gm, d_g10], axis=1)
        return out

    def profile_theta_batch(self, thetas, x):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        xval = float(np.atleast_1d(np.asarray(x, float))[0])
        v = 1.0 + self.offset + thetas * xval
        v1, v2 = v[:, 0], v[:, 1]
        g11 = v1 * v2
        g10 = v1 * (1 - v2)
        gm = (1 - v1) * (1 - v2)
        fixed = g11[:, None]
        etas = np.stack([1.0 - g11, g10 + gm, g10], axis=1)
        return {"fixed_idx": (self._i11,), "idx_a": self._i10, "idx_b": self._i01,
                "fixed": fixed, "eta": etas}

    def to_config(self) -> dict:
        return {"model": "entry_uniform", "params": {"box": list(self.box), "offset": self.offset}}


def uniform_game_nu(theta, event_labels, x, model: UniformEntryGameModel | None = None) -> float:
    """Containment functional of the uniform-shock entry game."""
    model = model or UniformEntryGameModel()
    event = EventSet.from_labels(event_labels, model.outcome_space)
    return model.nu(np.asarray(theta, float), event, x)


class ChoiceSetModel(ModelSpec):
    """Discrete choice over {1,2,3} with a latent binary choice set.

    The predicted choice set is {1,2} with probability
    eta(theta; z) = 1 - (a_z)^theta and {2,3} otherwise, where a_z is the
    z-specific scale in (0, 1).  The covariate is an index into
    (az_low, az_high).  The implied outcome polytope is
    q(1) <= eta(theta; z), q(3) <= 1 - eta(theta; z).
    """

    def __init__(self, az_low: float, az_high: float, theta_max: float = 50.0):
        for a in (az_low, az_high):
            if not (0.0 < a < 1.0):
                raise ConfigError(f"scale parameters must lie in (0, 1), got {a}")
        self.outcome_space = OutcomeSpace(("1", "2", "3"))
        self.az = (float(az_low), float(az_high))
        self.param_dim = 1
        self.theta_max = float(theta_max)
        self._i1 = 0
        self._i2 = 1
        self._i3 = 2

    def param_bounds(self) -> list:
        return [(1e-8, self.theta_max)]

    def validate_theta(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (1,) or not (theta[0] > 0):
            raise DomainError("theta must be a positive scalar")
        return theta

    def _az(self, x) -> float:
        idx = int(round(float(np.atleast_1d(np.asarray(x, float))[0])))
        if idx not in (0, 1):
            raise DomainError("covariate must be 0 (low) or 1 (high)")
        return self.az[idx]

    def eta_value(self, theta, x) -> float:
        az = self._az(x)
        return 1.0 - az ** float(np.atleast_1d(theta)[0])

    def nu(self, theta, event: EventSet, x) -> float:
        theta = self.validate_theta(theta)
        e = self.eta_value(theta, x)
        has12 = _event_has(event, self._i1) and _event_has(event, self._i2)
        has23 = _event_has(event, self._i2) and _event_has(event, self._i3)
        return e * has12 + (1.0 - e) * has23

    def grad_nu(self, theta, event: EventSet, x) -> np.ndarray:
        theta = self.validate_theta(theta)
        az = self._az(x)
        de = -(az ** float(theta[0])) * np.log(az)
        has12 = _event_has(event, self._i1) and _event_has(event, self._i2)
        has23 = _event_has(event, self._i2) and _event_has(event, self._i3)
        return np.array([de * has12 - de * has23])

    def to_config(self) -> dict:
        return {"model": "choiceset", "params": {"az_low": self.az[0], "az_high": self.az[1]}}


def choiceset_model_nu(theta, event_labels, x, model: ChoiceSetModel) -> float:
    event = EventSet.from_labels(event_labels, model.outcome_space)
    return model.nu(theta, event, x)


def entry_probability(model: EntryGameModel, x, d: int):
    """Counterfactual functional: player-1 entry probability with the rival
    action fixed at d."""
    x1, _ = model.design(x)

    def functional(theta):
        egt = model.unpack(np.asarray(theta, float))
        return float(sp.ndtr(x1 @ egt.beta1 + egt.delta1 * d))

    return functional


def model_from_config(cfg: dict) -> ModelSpec:
    """Build a model from its JSON-style configuration."""
    if not isinstance(cfg, dict) or "model" not in cfg:
        raise ConfigError("model config must be a dict with a 'model' key")
    kind = cfg["model"]
    params = cfg.get("params", {})
    if kind == "entry_probit":
        return EntryGameModel(
            x1_cols=params.get("x1_cols", [0]),
            x2_cols=params.get("x2_cols", [1]),
            rho=params.get("rho", 0.0),
            rho_in_theta=params.get("rho_in_theta", False),
            delta_cap=params.get("delta_cap", DEFAULT_DELTA_CAP),
        )
    if kind == "entry_uniform":
        return UniformEntryGameModel(
            box=tuple(params.get("box", (-0.45, 0.0))), offset=params.get("offset", -0.5)
        )
    if kind == "choiceset":
        if "az_low" not in params or "az_high" not in params:
            raise ConfigError("choiceset model requires az_low and az_high")
        return ChoiceSetModel(params["az_low"], params["az_high"])
    raise ConfigError(f"unknown model kind: {kind!r}")
