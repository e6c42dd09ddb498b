"""Exact identification arithmetic for a binary confounder / binary feedback
scenario.

Notation used throughout: ``pz1`` is p(z=1), ``pz1_a`` is p(z=1 | a),
``pr1_a`` is p(r=1 | a). The optional proxy block holds, for w in {0, 1},
``pz1_aw[w]`` = p(z=1 | a, w) and ``pr1_aw[w]`` = p(r=1 | a, w). The unknown
joint p(z, r | a) is stored as the four cells ``p00, p01, p10, p11`` indexed
by (z, r).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import (
    ConsistencyError,
    DegeneracyError,
    DomainError,
    InconsistentScenarioError,
    NonIdentifiableError,
)

TOL = 1e-9


@dataclass(frozen=True)
class DiscreteScenario:
    pz1: float
    pz1_a: float
    pr1_a: float
    pz1_aw: Optional[tuple[float, float]] = None
    pr1_aw: Optional[tuple[float, float]] = None

    def __post_init__(self):
        values = [self.pz1, self.pz1_a, self.pr1_a]
        if (self.pz1_aw is None) != (self.pr1_aw is None):
            raise DomainError("proxy block needs both p(z=1|a,w) and p(r=1|a,w)")
        if self.pz1_aw is not None:
            if len(self.pz1_aw) != 2 or len(self.pr1_aw) != 2:
                raise DomainError("proxy block must give values for w = 0 and w = 1")
            values += list(self.pz1_aw) + list(self.pr1_aw)
        for v in values:
            if not (0.0 <= v <= 1.0) or not np.isfinite(v):
                raise DomainError(f"probability {v} outside [0, 1]")

    @property
    def has_proxy(self) -> bool:
        return self.pz1_aw is not None


@dataclass(frozen=True)
class JointTable:
    p00: float
    p01: float
    p10: float
    p11: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p00, self.p01, self.p10, self.p11])

    def __getitem__(self, zr: tuple[int, int]) -> float:
        z, r = zr
        return self.as_array()[2 * z + r]


class UniquenessCheck(NamedTuple):
    identifiable: bool
    margin: float


class NoProxyInterval(NamedTuple):
    p11: tuple[float, float]
    outcome: tuple[float, float]


def _require_nondegenerate(s: DiscreteScenario) -> None:
    if s.pz1_a <= TOL or s.pz1_a >= 1.0 - TOL:
        raise DegeneracyError(f"p(z=1|a) = {s.pz1_a} is degenerate; it must lie strictly inside (0, 1)")


def _outcome(s: DiscreteScenario, p01: float, p11: float) -> float:
    return (1.0 - s.pz1) * p01 / (1.0 - s.pz1_a) + s.pz1 * p11 / s.pz1_a


def potential_outcome_from_joint(scenario: DiscreteScenario, joint: JointTable) -> float:
    """p(r^a = 1) from the g-formula over a binary confounder."""
    _require_nondegenerate(scenario)
    cells = joint.as_array()
    checks = {
        "cells are non-negative": cells.min() >= -TOL,
        "cells sum to 1": abs(cells.sum() - 1.0) <= TOL,
        "p10 + p11 = p(z=1|a)": abs(joint.p10 + joint.p11 - scenario.pz1_a) <= TOL,
        "p01 + p11 = p(r=1|a)": abs(joint.p01 + joint.p11 - scenario.pr1_a) <= TOL,
    }
    for name, ok in checks.items():
        if not ok:
            raise ConsistencyError(f"joint table violates marginal constraint: {name}")
    return _outcome(scenario, joint.p01, joint.p11)


def joint_from_p11(scenario: DiscreteScenario, p11: float) -> JointTable:
    """The unique joint consistent with the three marginals and a given p11."""
    return JointTable(
        p00=1.0 - scenario.pz1_a - scenario.pr1_a + p11,
        p01=scenario.pr1_a - p11,
        p10=scenario.pz1_a - p11,
        p11=p11,
    )


def feasible_interval_no_proxy(scenario: DiscreteScenario) -> NoProxyInterval:
    """Range of p11 and of p(r^a = 1) left open by the three marginal
    constraints alone. The outcome is affine in p11, so its extremes sit at
    the p11 endpoints."""
    _require_nondegenerate(scenario)
    lo = max(0.0, scenario.pz1_a + scenario.pr1_a - 1.0)
    hi = min(scenario.pz1_a, scenario.pr1_a)
    values = [_outcome(scenario, scenario.pr1_a - p, p) for p in (lo, hi)]
    return NoProxyInterval((lo, hi), (min(values), max(values)))


def check_uniqueness(scenario: DiscreteScenario, tol: float = TOL) -> UniquenessCheck:
    """The proxy system has a unique solution iff p(z=1|a,w) differs
    between w = 0 and w = 1."""
    if not scenario.has_proxy:
        raise DomainError("uniqueness check needs the proxy block")
    margin = abs(scenario.pz1_aw[1] - scenario.pz1_aw[0])
    return UniquenessCheck(margin > tol, margin)


def proxy_system(scenario: DiscreteScenario) -> tuple[np.ndarray, np.ndarray]:
    """The 4x4 linear system over (p00, p01, p10, p11).

    Rows: normalization, z-marginal, and one feedback constraint per proxy
    level, using p(r=1|a,w) = sum_z p(z,r=1|a) p(z|a,w) / p(z|a).
    """
    _require_nondegenerate(scenario)
    pz = (1.0 - scenario.pz1_a, scenario.pz1_a)
    rows = [[1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]]
    rhs = [1.0, scenario.pz1_a]
    for w in (1, 0):
        qz1 = scenario.pz1_aw[w]
        rows.append([0.0, (1.0 - qz1) / pz[0], 0.0, qz1 / pz[1]])
        rhs.append(scenario.pr1_aw[w])
    return np.array(rows), np.array(rhs)


def gauss_solve(a: np.ndarray, b: np.ndarray, pivot_tol: float = 1e-12) -> np.ndarray:
    """Gaussian elimination with partial pivoting for a small dense system."""
    m = np.array(a, dtype=np.float64)
    x = np.array(b, dtype=np.float64)
    n = m.shape[0]
    if m.shape != (n, n) or x.shape != (n,):
        raise DomainError("gauss_solve needs a square matrix and matching right-hand side")
    scale = max(np.abs(m).max(), 1.0)
    for col in range(n):
        piv = col + int(np.argmax(np.abs(m[col:, col])))
        if abs(m[piv, col]) <= pivot_tol * scale:
            raise NonIdentifiableError("singular linear system")
        if piv != col:
            m[[col, piv]] = m[[piv, col]]
            x[[col, piv]] = x[[piv, col]]
        for row in range(col + 1, n):
            f = m[row, col] / m[col, col]
            if f:
                m[row, col:] -= f * m[col, col:]
                x[row] -= f * x[col]
    for row in range(n - 1, -1, -1):
        x[row] = (x[row] - m[row, row + 1 :] @ x[row + 1 :]) / m[row, row]
    return x


def solve_with_proxy(scenario: DiscreteScenario) -> JointTable:
    """Recover p(z, r | a) from the proxy-augmented constraint system."""
    if not scenario.has_proxy:
        raise DomainError("solve_with_proxy needs the proxy block")
    check = check_uniqueness(scenario)
    if not check.identifiable:
        raise NonIdentifiableError(
            f"non-identifiable: uniqueness condition violated (|p(z=1|a,w=1) - p(z=1|a,w=0)| = {check.margin:.3g})"
        )
    a, b = proxy_system(scenario)
    x = gauss_solve(a, b)
    if x.min() < -TOL or x.max() > 1.0 + TOL:
        raise InconsistentScenarioError(f"proxy system solution {x.tolist()} has cells outside [0, 1]")
    x = np.clip(x, 0.0, 1.0)
    return JointTable(*map(float, x))


def adjusted_outcome(scenario: DiscreteScenario) -> float:
    """p(r^a = 1) through the unique proxy-based joint."""
    joint = solve_with_proxy(scenario)
    _require_nondegenerate(scenario)
    return _outcome(scenario, joint.p01, joint.p11)


@dataclass(frozen=True)
class ForwardModel:
    """A fully specified binary model with w independent of r given (z, a).

    ``pr1_z[z]`` = p(r=1 | a, z); ``pw1_z[z]`` = p(w=1 | a, z).
    """

    pz1: float
    pz1_a: float
    pr1_z: tuple[float, float]
    pw1_z: tuple[float, float]

    def joint(self) -> JointTable:
        pz = (1.0 - self.pz1_a, self.pz1_a)
        return JointTable(
            pz[0] * (1.0 - self.pr1_z[0]),
            pz[0] * self.pr1_z[0],
            pz[1] * (1.0 - self.pr1_z[1]),
            pz[1] * self.pr1_z[1],
        )

    def true_outcome(self) -> float:
        return (1.0 - self.pz1) * self.pr1_z[0] + self.pz1 * self.pr1_z[1]

    def scenario(self) -> DiscreteScenario:
        pz = np.array([1.0 - self.pz1_a, self.pz1_a])
        pr = np.array(self.pr1_z)
        pw1 = np.array(self.pw1_z)
        pz1_aw, pr1_aw = [], []
        for w in (0, 1):
            lik = pw1 if w == 1 else 1.0 - pw1
            post = pz * lik / (pz * lik).sum()
            pz1_aw.append(float(post[1]))
            pr1_aw.append(float(post @ pr))
        return DiscreteScenario(
            pz1=self.pz1,
            pz1_a=self.pz1_a,
            pr1_a=float(pz @ pr),
            pz1_aw=tuple(pz1_aw),
            pr1_aw=tuple(pr1_aw),
        )


def random_forward_model(rng: np.random.Generator, low: float = 0.02, high: float = 0.98) -> ForwardModel:
    """Draw a forward model with all cells strictly positive."""
    u = rng.uniform(low, high, size=6)
    return ForwardModel(float(u[0]), float(u[1]), (float(u[2]), float(u[3])), (float(u[4]), float(u[5])))
