"""Events over a finite outcome space and the linear constraint system they induce.

An event is a bitmask over the outcome labels.  A constraint set collects
lower bounds q'b_A >= nu(A) over a family of events, with per-event equality
flags detected through the containment/capacity duality
nu(A) + nu(complement of A) = 1.  The full-outcome event (sum-to-one) is
always included as an equality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linprog

from .errors import CapacityError, ConfigError, InfeasiblePolytopeError, ModelConsistencyError

MAX_OUTCOMES = 16
EQUALITY_TOL = 1e-10
NU_RANGE_TOL = 1e-10


@dataclass(frozen=True)
class OutcomeSpace:
    """Ordered finite outcome support."""

    labels: tuple

    def __init__(self, labels):
        object.__setattr__(self, "labels", tuple(str(l) for l in labels))
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError("outcome labels must be distinct")
        if not (2 <= len(self.labels) <= MAX_OUTCOMES):
            raise CapacityError(
                f"outcome space size must be in [2, {MAX_OUTCOMES}], got {len(self.labels)}"
            )

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)


@dataclass(frozen=True)
class EventSet:
    """Subset of an outcome space stored as a bitmask."""

    mask: int
    space: OutcomeSpace

    def __post_init__(self):
        if not (0 <= self.mask < (1 << self.space.size)):
            raise ConfigError("event mask out of range for the outcome space")

    @classmethod
    def from_indices(cls, indices, space: OutcomeSpace) -> "EventSet":
        mask = 0
        for i in indices:
            mask |= 1 << int(i)
        return cls(mask, space)

    @classmethod
    def from_labels(cls, labels, space: OutcomeSpace) -> "EventSet":
        return cls.from_indices([space.index(l) for l in labels], space)

    @classmethod
    def full(cls, space: OutcomeSpace) -> "EventSet":
        return cls((1 << space.size) - 1, space)

    @property
    def cardinality(self) -> int:
        return bin(self.mask).count("1")

    @property
    def indices(self) -> tuple:
        return tuple(i for i in range(self.space.size) if self.mask >> i & 1)

    @property
    def labels(self) -> tuple:
        return tuple(self.space.labels[i] for i in self.indices)

    def representer(self) -> np.ndarray:
        """0/1 vector b with b[m] = 1 iff outcome m belongs to the event."""
        b = np.zeros(self.space.size, dtype=float)
        for i in self.indices:
            b[i] = 1.0
        return b

    def complement(self) -> "EventSet":
        return EventSet(((1 << self.space.size) - 1) ^ self.mask, self.space)

    def union(self, other: "EventSet") -> "EventSet":
        return EventSet(self.mask | other.mask, self.space)

    def intersect(self, other: "EventSet") -> "EventSet":
        return EventSet(self.mask & other.mask, self.space)


def enumerate_events(space: OutcomeSpace) -> list:
    """All nonempty events with cardinality up to ceil(M/2).

    Together with the complementary bounds implied by equality flags this
    family carries every restriction the containment functional imposes on
    the supported model classes.  Order is deterministic: by cardinality,
    then by mask value.
    """
    m = space.size
    if m > MAX_OUTCOMES:
        raise CapacityError(f"outcome space too large: {m} > {MAX_OUTCOMES}")
    half = (m + 1) // 2
    masks = [msk for msk in range(1, 1 << m) if bin(msk).count("1") <= half]
    masks.sort(key=lambda msk: (bin(msk).count("1"), msk))
    return [EventSet(msk, space) for msk in masks]


@dataclass
class ConstraintSet:
    """Linear lower-bound system q'b_A >= nu(A) with equality flags."""

    space: OutcomeSpace
    events: list
    lower: np.ndarray
    is_equality: np.ndarray
    theta_snapshot: np.ndarray | None = None
    x_snapshot: np.ndarray | None = None

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.is_equality = np.asarray(self.is_equality, dtype=bool)
        if len(self.events) != self.lower.size or self.lower.size != self.is_equality.size:
            raise ConfigError("events, lower, and is_equality must have equal length")
        if np.any(self.lower < -NU_RANGE_TOL) or np.any(self.lower > 1.0 + NU_RANGE_TOL):
            raise ModelConsistencyError("containment values outside [0, 1]")

    @property
    def n_constraints(self) -> int:
        return len(self.events)

    def representer_matrix(self) -> np.ndarray:
        """(M, C) matrix whose columns are the event representers."""
        return np.column_stack([ev.representer() for ev in self.events])

    def feasible(self, q, tol: float = 1e-9) -> bool:
        q = np.asarray(q, dtype=float)
        b = self.representer_matrix()
        vals = q @ b
        ok_eq = np.all(np.abs(vals[self.is_equality] - self.lower[self.is_equality]) <= tol)
        ok_in = np.all(vals[~self.is_equality] >= self.lower[~self.is_equality] - tol)
        return bool(ok_eq and ok_in and np.all(q >= -tol))

    def to_json(self) -> str:
        return json.dumps(
            {
                "events": [list(ev.labels) for ev in self.events],
                "lower": [float(v) for v in self.lower],
                "equality": [bool(v) for v in self.is_equality],
            }
        )


def build_constraints(model, theta, x, events=None, eq_tol: float = EQUALITY_TOL) -> ConstraintSet:
    """Evaluate the model's containment functional on an event family.

    The family defaults to `enumerate_events`; the full-outcome event is
    appended with value 1 as an equality.  An event is flagged as an equality
    when nu(A) + nu(A^c) = 1 within `eq_tol` (the complement evaluated through
    the model even when its cardinality exceeds the enumeration cutoff), or
    when the model declares it point-identified via `equality_event_masks`.
    """
    theta = np.asarray(theta, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    model.validate_theta(theta)
    space = model.outcome_space
    if events is None:
        events = enumerate_events(space)
    events = list(events) + [EventSet.full(space)]
    hints = model.equality_event_masks(x)
    lower = np.empty(len(events))
    is_eq = np.zeros(len(events), dtype=bool)
    for i, ev in enumerate(events):
        nu = float(model.nu(theta, ev, x))
        if nu < -NU_RANGE_TOL or nu > 1.0 + NU_RANGE_TOL:
            raise ModelConsistencyError(
                f"nu({ev.labels}) = {nu} outside [0, 1] for theta={theta.tolist()}"
            )
        lower[i] = min(max(nu, 0.0), 1.0)
        if ev.mask == EventSet.full(space).mask:
            is_eq[i] = True
            lower[i] = 1.0
            continue
        if hints is not None and ev.mask in hints:
            is_eq[i] = True
            continue
        nu_c = float(model.nu(theta, ev.complement(), x))
        is_eq[i] = abs(lower[i] + nu_c - 1.0) <= eq_tol
    return ConstraintSet(space, events, lower, is_eq, theta.copy(), x.copy())


def _redundancy_bounds(b_i, others_b, others_lower, others_eq, m):
    """Min and max of q'b_i over the polytope defined by the other constraints."""
    a_ub = []
    b_ub = []
    a_eq = []
    b_eq = []
    for b, lo, eq in zip(others_b, others_lower, others_eq):
        if eq:
            a_eq.append(b)
            b_eq.append(lo)
        else:
            a_ub.append(-b)
            b_ub.append(-lo)
    kw = dict(
        A_ub=np.array(a_ub) if a_ub else None,
        b_ub=np.array(b_ub) if b_ub else None,
        A_eq=np.array(a_eq) if a_eq else None,
        b_eq=np.array(b_eq) if b_eq else None,
        bounds=[(0.0, 1.0)] * m,
        method="highs",
    )
    lo_res = linprog(b_i, **kw)
    if not lo_res.success:
        raise InfeasiblePolytopeError(
            "constraint polytope infeasible while testing redundancy: " + str(lo_res.message)
        )
    hi_res = linprog(-b_i, **kw)
    return float(lo_res.fun), float(-hi_res.fun)


def prune_redundant(cs: ConstraintSet, tol: float = 1e-12) -> ConstraintSet:
    """Drop constraints that do not change the polytope.

    Exact duplicates are collapsed first (keeping the strongest bound).
    Equalities whose representers are linearly dependent on earlier-kept
    equalities are dropped (their values are consistent by feasibility); the
    full-outcome normalization is always retained.  An inequality is removed
    when its bound cannot be violated under the remaining constraints.
    Purely an optimization: projections are insensitive to redundant
    constraints.
    """
    by_mask = {}
    order = []
    for ev, lo, eq in zip(cs.events, cs.lower, cs.is_equality):
        if ev.mask in by_mask:
            old_lo, old_eq = by_mask[ev.mask]
            by_mask[ev.mask] = (max(old_lo, lo), bool(old_eq or eq))
        else:
            by_mask[ev.mask] = (float(lo), bool(eq))
            order.append(ev)
    full_mask = EventSet.full(cs.space).mask

    # equalities: greedy independence scan, full-outcome event aside
    kept = []
    basis = None
    for ev in order:
        lo, eq = by_mask[ev.mask]
        if not eq:
            kept.append(ev)
            continue
        if ev.mask == full_mask:
            kept.append(ev)
            continue
        row = ev.representer()[None, :]
        cand = row if basis is None else np.vstack([basis, row])
        if np.linalg.matrix_rank(cand) > (0 if basis is None else basis.shape[0]):
            basis = cand
            kept.append(ev)

    # inequalities: LP redundancy test against the current kept set
    for ev in [e for e in kept if not by_mask[e.mask][1]]:
        lo, _ = by_mask[ev.mask]
        others = [e for e in kept if e is not ev]
        ob = [e.representer() for e in others]
        ol = [by_mask[e.mask][0] for e in others]
        oe = [by_mask[e.mask][1] for e in others]
        mn, _mx = _redundancy_bounds(ev.representer(), ob, ol, oe, cs.space.size)
        if mn >= lo - tol:
            kept = others
    lower = np.array([by_mask[e.mask][0] for e in kept])
    is_eq = np.array([by_mask[e.mask][1] for e in kept])
    return replace(cs, events=kept, lower=lower, is_equality=is_eq)
