"""KL projection of an observed conditional pmf onto a model polytope.

Two routes are provided.  ``project_generic`` solves the strictly concave
program  max_q sum_y p0(y) ln q(y)  over the polytope {q in simplex:
q'b_A >= nu_A, equality where flagged} with a log-barrier interior path and a
Newton polish on the detected active set, returning multipliers that satisfy
the optimality system to 1e-9 in max norm.  ``project_closed_form`` evaluates
the explicit solution available for pair-profile models (point-identified
outcomes plus one bracketed pair) and is used both as a fast path and as an
independent cross-check of the generic solver.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import (
    ConfigError,
    DegenerateModelError,
    DomainError,
    InfeasiblePolytopeError,
    KktResidualError,
)
from .events import ConstraintSet, build_constraints
from .models import ModelSpec, PairProfile

KKT_TOL = 1e-9
ACTIVE_TOL = 1e-7
QSTAR_FLOOR = 1e-8
TIE_TOL = 1e-10

REGION_NAMES = {1: "Theta1", 2: "Theta2", 3: "Theta3"}


@dataclass
class ProjectionResult:
    """Solution of one conditional KL projection."""

    q_star: np.ndarray
    lam: np.ndarray | None
    active: list | None
    kl: float
    loglik: float
    region: str | None = None
    constraints: ConstraintSet | None = None
    qstar_floor_violated: bool = False

    def to_dict(self) -> dict:
        return {
            "q_star": [float(v) for v in self.q_star],
            "lambda": None if self.lam is None else [float(v) for v in self.lam],
            "active": None if self.active is None else [int(i) for i in self.active],
            "kl": float(self.kl),
            "loglik": float(self.loglik),
            "region": self.region,
        }


def kl_divergence(p, q) -> float:
    """sum_{y: p(y)>0} p(y) ln(p(y)/q(y)); +inf when q vanishes on supp(p)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DomainError("p and q must have equal length")
    supp = p > 0.0
    if np.any(q[supp] <= 0.0):
        warnings.warn("support of p not contained in support of q; KL is +inf",
                      RuntimeWarning, stacklevel=2)
        return float("inf")
    val = float(np.sum(p[supp] * np.log(p[supp] / q[supp])))
    return max(val, 0.0) if val > -1e-12 else val


def _validate_p0(p0, m) -> np.ndarray:
    p0 = np.asarray(p0, dtype=float)
    if p0.shape != (m,):
        raise DomainError(f"p0 must have {m} coordinates")
    if np.any(p0 <= 0.0):
        raise DomainError("p0 must be strictly positive on every outcome")
    if abs(p0.sum() - 1.0) > 1e-8:
        raise DomainError("p0 must sum to one")
    return p0 / p0.sum()


def _loglik(p0, q) -> float:
    return float(p0 @ np.log(np.maximum(q, QSTAR_FLOOR)))


def _floor_check(q) -> bool:
    if np.min(q) < QSTAR_FLOOR:
        warnings.warn(
            f"projected density has mass below {QSTAR_FLOOR}; "
            "positivity margin assumption is violated at this point",
            RuntimeWarning, stacklevel=3,
        )
        return True
    return False


def _greedy_independent_rows(rows: np.ndarray, order) -> list:
    """Indices (subset of `order`) whose rows are linearly independent,
    scanning in the given order and skipping rows that add no rank."""
    kept = []
    basis = None
    for i in order:
        cand = rows[i][None, :] if basis is None else np.vstack([basis, rows[i]])
        if np.linalg.matrix_rank(cand) > (0 if basis is None else basis.shape[0]):
            kept.append(i)
            basis = cand
    return kept


def _phase_one(p0, a_eq, b_eq, a_in, b_in, m):
    """Strictly feasible point via a max-min-slack LP."""
    n_in = a_in.shape[0]
    c = np.zeros(m + 1)
    c[-1] = -1.0
    a_ub = np.zeros((n_in + m, m + 1))
    b_ub = np.zeros(n_in + m)
    if n_in:
        a_ub[:n_in, :m] = -a_in
        a_ub[:n_in, -1] = 1.0
        b_ub[:n_in] = -b_in
    a_ub[n_in:, :m] = -np.eye(m)
    a_ub[n_in:, -1] = 1.0
    a_eq_lp = np.hstack([a_eq, np.zeros((a_eq.shape[0], 1))])
    res = linprog(
        c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq_lp, b_eq=b_eq,
        bounds=[(0.0, 1.0)] * m + [(-1.0, 0.5)], method="highs",
    )
    if not res.success:
        raise InfeasiblePolytopeError(f"constraint polytope is infeasible: {res.message}")
    s_star = -res.fun
    if s_star < 1e-11:
        raise InfeasiblePolytopeError(
            "constraint polytope has no usable interior "
            f"(max-min slack {s_star:.2e}); the containment values are "
            "inconsistent or degenerate at this parameter value"
        )
    return res.x[:m]


def _newton_center(q, t, p0, a_in, b_in, a_eq, tol: float = 1e-9):
    """One barrier centering: max t*p0'ln q + sum ln(slack) s.t. a_eq q = b_eq.

    Moderate accuracy suffices; the active-set polish recovers full precision.
    """
    m = q.size
    n_eq = a_eq.shape[0]
    have_in = a_in.shape[0] > 0

    def objective(qv):
        if qv.min() <= 0.0:
            return -np.inf
        val = t * float(p0 @ np.log(qv))
        if have_in:
            sl = a_in @ qv - b_in
            if sl.min() <= 0.0:
                return -np.inf
            val += float(np.sum(np.log(sl)))
        return val

    for _ in range(60):
        grad = t * p0 / q
        hess_mat = np.diag(t * p0 / q**2)
        if have_in:
            slack = a_in @ q - b_in
            grad = grad + a_in.T @ (1.0 / slack)
            hess_mat += (a_in / slack[:, None] ** 2).T @ a_in
        kkt = np.zeros((m + n_eq, m + n_eq))
        kkt[:m, :m] = hess_mat
        kkt[:m, m:] = a_eq.T
        kkt[m:, :m] = a_eq
        rhs = np.concatenate([grad, np.zeros(n_eq)])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        dq = sol[:m]
        decrement = float(grad @ dq)
        if decrement <= tol:
            break
        # largest step keeping q and the slacks strictly positive
        alpha = 1.0
        neg = dq < 0
        if np.any(neg):
            alpha = min(alpha, 0.99 * float(np.min(-q[neg] / dq[neg])))
        if have_in:
            ds = a_in @ dq
            negs = ds < 0
            if np.any(negs):
                alpha = min(alpha, 0.99 * float(np.min(-slack[negs] / ds[negs])))
        f0 = objective(q)
        while alpha > 1e-14 and objective(q + alpha * dq) < f0 + 0.25 * alpha * decrement:
            alpha *= 0.5
        if alpha <= 1e-14:
            break
        q = q + alpha * dq
    return q


def _polish(q, p0, c_mat, d_vec):
    """Newton solve of max p0'ln q s.t. c_mat q = d_vec, from a feasible start.

    Returns (q, y) with stationarity p0/q = c_mat' y satisfied to near machine
    precision.
    """
    m = q.size
    k = c_mat.shape[0]
    y = np.linalg.lstsq(c_mat.T, p0 / q, rcond=None)[0]
    for _ in range(100):
        res_s = p0 / q - c_mat.T @ y
        res_p = c_mat @ q - d_vec
        err = max(np.max(np.abs(res_s)), np.max(np.abs(res_p)))
        if err < 1e-12:
            break
        jac = np.zeros((m + k, m + k))
        jac[:m, :m] = -np.diag(p0 / q**2)
        jac[:m, m:] = -c_mat.T
        jac[m:, :m] = c_mat
        rhs = -np.concatenate([res_s, res_p])
        try:
            step = np.linalg.solve(jac, rhs)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(jac, rhs, rcond=None)[0]
        dq, dy = step[:m], step[m:]
        alpha = 1.0
        neg = dq < 0
        if np.any(neg):
            alpha = min(alpha, 0.99 * float(np.min(-q[neg] / dq[neg])))
        q = q + alpha * dq
        y = y + alpha * dy
    return q, y


def project_generic(p0x, cs: ConstraintSet, kkt_tol: float = KKT_TOL) -> ProjectionResult:
    """Project p0x onto the polytope of a constraint set by maximizing
    sum p0 ln q.

    The constraint set must contain the full-outcome equality (sum q = 1).
    Raises ``InfeasiblePolytopeError`` when the polytope is empty and
    ``KktResidualError`` when the optimality system cannot be met.
    """
    m = cs.space.size
    p0 = _validate_p0(p0x, m)
    b_mat = cs.representer_matrix()  # (M, C)
    lower = cs.lower
    is_eq = cs.is_equality
    full_mask = (1 << m) - 1
    if not any(ev.mask == full_mask and eq for ev, eq in zip(cs.events, is_eq)):
        raise ConfigError("constraint set must include the full-outcome equality")

    eq_idx = np.where(is_eq)[0]
    in_idx = np.where(~is_eq)[0]
    rows = b_mat.T  # (C, M)
    keep_eq = _greedy_independent_rows(rows, list(eq_idx))
    a_eq = rows[keep_eq]
    b_eq = lower[keep_eq]
    # consistency of dropped (dependent) equality rows is checked on the result
    a_in = rows[in_idx] if in_idx.size else np.zeros((0, m))
    b_in = lower[in_idx] if in_idx.size else np.zeros(0)

    eq_res0 = np.max(np.abs(rows[eq_idx] @ p0 - lower[eq_idx])) if eq_idx.size else 0.0
    in_res0 = np.min(a_in @ p0 - b_in) if in_idx.size else np.inf
    if eq_res0 <= 1e-12 and in_res0 >= 1e-9:
        q = p0.copy()
    else:
        q = _phase_one(p0, a_eq, b_eq, a_in, b_in, m)
        if a_in.shape[0]:
            t = 10.0
            while True:
                q = _newton_center(q, t, p0, a_in, b_in, a_eq)
                if a_in.shape[0] / t < 1e-8:
                    break
                t *= 100.0
        else:
            q = _newton_center(q, 1.0, p0, a_in, b_in, a_eq)

    # active-set polish with multiplier sign corrections
    act = [int(i) for i in in_idx if (rows[i] @ q - lower[i]) <= ACTIVE_TOL]
    for _ in range(len(in_idx) + 2):
        order = keep_eq + act
        keep = _greedy_independent_rows(rows, order)
        c_mat = rows[keep]
        d_vec = lower[keep]
        q, y = _polish(q, p0, c_mat, d_vec)
        lam = np.zeros(cs.n_constraints)
        lam[keep] = -y
        wrong = [i for i in keep if (not is_eq[i]) and lam[i] < -1e-8]
        viol = [int(i) for i in in_idx
                if i not in act and (rows[i] @ q - lower[i]) < -1e-12]
        if not wrong and not viol:
            break
        for i in wrong:
            act.remove(i)
        act.extend(viol)
    else:
        raise KktResidualError("active-set refinement did not settle")

    # audit the optimality system on the full constraint list
    stat = np.max(np.abs(p0 / q + b_mat @ lam))
    vals = rows @ q
    prim_eq = np.max(np.abs(vals[eq_idx] - lower[eq_idx])) if eq_idx.size else 0.0
    prim_in = max(0.0, float(np.max(lower[in_idx] - vals[in_idx]))) if in_idx.size else 0.0
    dual = max(0.0, float(np.max(-lam[in_idx]))) if in_idx.size else 0.0
    comp = np.max(np.abs(lam[in_idx] * (vals[in_idx] - lower[in_idx]))) if in_idx.size else 0.0
    resid = max(stat, prim_eq, prim_in, dual, comp)
    if not np.isfinite(resid) or resid > kkt_tol:
        raise KktResidualError(f"KKT residual {resid:.2e} exceeds tolerance {kkt_tol:.0e}")

    binding = [int(i) for i in range(cs.n_constraints)
               if is_eq[i] or (vals[i] - lower[i]) <= ACTIVE_TOL]
    return ProjectionResult(
        q_star=q,
        lam=lam,
        active=binding,
        kl=kl_divergence(p0, q),
        loglik=_loglik(p0, q),
        constraints=cs,
        qstar_floor_violated=_floor_check(q),
    )


# ---------------------------------------------------------------------------
# Closed form for pair-profile models
# ---------------------------------------------------------------------------


def classify_region(p_a, p_b, eta1, eta2, eta3, tie_tol: float = TIE_TOL):
    """Region of the profiled solution given the observed pair split.

    Returns 1 when the observed (1,0)-share of the pair, scaled by eta1, lies
    inside [eta3, eta2]; 2 when it exceeds eta2; 3 when it falls below eta3.
    Ties within `tie_tol` resolve to region 1.
    """
    if p_a + p_b <= 0:
        raise DomainError("pair outcomes need positive combined probability")
    share = p_a / (p_a + p_b)
    z2 = share * eta1 - eta2  # > 0 -> region 2
    z3 = share * eta1 - eta3  # < 0 -> region 3
    if z2 > tie_tol:
        return 2, z2, z3
    if z3 < -tie_tol:
        return 3, z2, z3
    return 1, z2, z3


def profiled_q_from_profile(prof: PairProfile, p0x, tie_tol: float = TIE_TOL):
    """Closed-form projected density and region tag for a pair profile."""
    m = prof.space.size
    p0 = _validate_p0(p0x, m)
    if prof.eta1 <= 1e-10:
        raise DegenerateModelError("pair mass eta1 is (numerically) zero")
    region, _, _ = classify_region(
        p0[prof.idx_a], p0[prof.idx_b], prof.eta1, prof.eta2, prof.eta3, tie_tol
    )
    share = p0[prof.idx_a] / (p0[prof.idx_a] + p0[prof.idx_b])
    if region == 1:
        qa = share * prof.eta1
    elif region == 2:
        qa = prof.eta2
    else:
        qa = prof.eta3
    q = np.empty(m)
    for j, idx in enumerate(prof.fixed_idx):
        q[idx] = prof.fixed_mass[j]
    q[prof.idx_a] = qa
    q[prof.idx_b] = prof.eta1 - qa
    return q, region


def project_closed_form(model: ModelSpec, theta, x, p0x,
                        tie_tol: float = TIE_TOL) -> ProjectionResult:
    """Closed-form KL projection for models exposing a pair profile."""
    if not model.supports_profile:
        raise ConfigError("model does not support closed-form projection")
    prof = model.profile(np.asarray(theta, float), x, grad=False)
    q, region = profiled_q_from_profile(prof, p0x, tie_tol)
    p0 = _validate_p0(p0x, model.outcome_space.size)
    return ProjectionResult(
        q_star=q,
        lam=None,
        active=None,
        kl=kl_divergence(p0, q),
        loglik=_loglik(p0, q),
        region=REGION_NAMES[region],
        qstar_floor_violated=_floor_check(q),
    )


def batched_profile_loglik(batch: dict, p0x) -> np.ndarray:
    """Profiled log-likelihood for a batch of pair profiles (shared x, p0).

    `batch` is the dict returned by ``profile_theta_batch``: fixed masses of
    shape (T, F) and eta of shape (T, 3).  The bracketed-pair solution is the
    clip of the proportional split onto [eta3, eta2].
    """
    p0 = np.asarray(p0x, dtype=float)
    fixed = batch["fixed"]
    eta_arr = batch["eta"]
    idx_a, idx_b = batch["idx_a"], batch["idx_b"]
    share = p0[idx_a] / (p0[idx_a] + p0[idx_b])
    qa = np.clip(share * eta_arr[:, 0], eta_arr[:, 2], eta_arr[:, 1])
    qb = eta_arr[:, 0] - qa
    total = np.zeros(fixed.shape[0])
    for j, idx in enumerate(batch["fixed_idx"]):
        total += p0[idx] * np.log(np.maximum(fixed[:, j], QSTAR_FLOOR))
    total += p0[idx_a] * np.log(np.maximum(qa, QSTAR_FLOOR))
    total += p0[idx_b] * np.log(np.maximum(qb, QSTAR_FLOOR))
    rest = [i for i in range(p0.size) if i not in batch["fixed_idx"] and i not in (idx_a, idx_b)]
    if rest:
        raise ConfigError("pair profile does not cover the outcome space")
    return total


def batched_profile_logq(batch: dict, p0x, y_idx: int) -> np.ndarray:
    """ln q*_theta(y) across a batch of pair profiles (shared x, p0, outcome)."""
    p0 = np.asarray(p0x, dtype=float)
    eta_arr = batch["eta"]
    idx_a, idx_b = batch["idx_a"], batch["idx_b"]
    share = p0[idx_a] / (p0[idx_a] + p0[idx_b])
    qa = np.clip(share * eta_arr[:, 0], eta_arr[:, 2], eta_arr[:, 1])
    if y_idx == idx_a:
        qy = qa
    elif y_idx == idx_b:
        qy = eta_arr[:, 0] - qa
    else:
        j = list(batch["fixed_idx"]).index(y_idx)
        qy = batch["fixed"][:, j]
    return np.log(np.maximum(qy, QSTAR_FLOOR))


def profiled_loglik(model: ModelSpec, theta, x, p0x, method: str = "auto") -> float:
    """sum_y p0(y|x) ln q*_theta(y|x): the per-covariate profiled objective."""
    if method not in ("auto", "closed_form", "generic"):
        raise ConfigError(f"unknown method {method!r}")
    use_closed = model.supports_profile if method == "auto" else (method == "closed_form")
    if use_closed:
        return project_closed_form(model, theta, x, p0x).loglik
    cs = build_constraints(model, theta, x)
    return project_generic(p0x, cs).loglik


def as_population(population) -> list:
    """Normalize a population spec to [(x, p0x, weight)] with weights summing to 1."""
    items = []
    for entry in population:
        if len(entry) == 3:
            x, p0x, w = entry
        elif len(entry) == 2:
            x, p0x = entry
            w = 1.0
        else:
            raise ConfigError("population entries must be (x, p0, weight) or (x, p0)")
        if w < 0:
            raise ConfigError("population weights must be nonnegative")
        items.append((np.atleast_1d(np.asarray(x, float)), np.asarray(p0x, float), float(w)))
    if not items:
        raise DomainError("population must contain at least one covariate point")
    total = sum(w for _, _, w in items)
    if total <= 0:
        raise ConfigError("population weights must not all vanish")
    return [(x, p, w / total) for x, p, w in items]


def expected_profiled_loglik(model: ModelSpec, theta, population, method: str = "auto") -> float:
    """Weighted average of the profiled log-likelihood over covariate values."""
    pop = as_population(population)
    return sum(w * profiled_loglik(model, theta, x, p0x, method) for x, p0x, w in pop)
