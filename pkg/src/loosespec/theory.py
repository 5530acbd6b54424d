"""Closed forms for expected accepted length under strict and loose verification.

All functions work in double precision. With per-position acceptance
probability a, the expected accepted prefix over a K-token draft is
sum_{j=1..K} a^j = a(1-a^K)/(1-a), with the a=1 singularity removed by
its exact limit K.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .domain import MAX_DRAFT_LEN
from .errors import DomainError


def _check_unit(value: float, name: str, lo_open: bool = False, hi_open: bool = False) -> float:
    value = float(value)
    if value != value:
        raise DomainError(f"{name} is NaN")
    lo_ok = value > 0.0 if lo_open else value >= 0.0
    hi_ok = value < 1.0 if hi_open else value <= 1.0
    if not (lo_ok and hi_ok):
        lo = "(" if lo_open else "["
        hi = ")" if hi_open else "]"
        raise DomainError(f"{name} must lie in {lo}0, 1{hi}, got {value}")
    return value


def _check_k(k: int) -> int:
    if isinstance(k, bool) or not isinstance(k, int):
        raise DomainError(f"k must be an integer, got {k!r}")
    if not 1 <= k <= MAX_DRAFT_LEN:
        raise DomainError(f"k must lie in [1, {MAX_DRAFT_LEN}], got {k}")
    return k


def expected_tau_strict(alpha: float, k: int) -> float:
    """Expected accepted prefix under exact-match verification.

    alpha=1 returns K exactly (removable singularity of the closed form).
    """
    alpha = _check_unit(alpha, "alpha")
    k = _check_k(k)
    if alpha == 0.0:
        return 0.0
    if alpha == 1.0:
        return float(k)
    return alpha * (1.0 - pow(alpha, k)) / (1.0 - alpha)


def strict_acceptance_bound(alpha: float) -> float:
    """1/(1-alpha), the K-independent ceiling on the strict expectation."""
    alpha = _check_unit(alpha, "alpha", hi_open=True)
    return 1.0 / (1.0 - alpha)


def effective_alignment(alpha: float, rho: float) -> float:
    """Per-position acceptance when only a rho-fraction is strictly checked:
    1 - rho*(1-alpha)."""
    alpha = _check_unit(alpha, "alpha")
    rho = _check_unit(rho, "rho")
    return 1.0 - rho * (1.0 - alpha)


def expected_tau_loose(alpha: float, rho: float, k: int) -> float:
    """Expected accepted prefix when a (1-rho) share of positions is always
    accepted; rho=0 yields K exactly via the alpha-bar=1 limit."""
    return expected_tau_strict(effective_alignment(alpha, rho), k)


@dataclass(frozen=True)
class ScalingRatio:
    """Loose-over-strict expectation ratio.

    `exact` evaluates both closed forms at the given K; `asymptotic` is
    the 1/rho limit, reported alongside and never substituted.
    """

    exact: float
    asymptotic: float


def scaling_ratio(alpha: float, rho: float, k: int) -> ScalingRatio:
    alpha = _check_unit(alpha, "alpha", lo_open=True, hi_open=True)
    rho = _check_unit(rho, "rho", lo_open=True)
    k = _check_k(k)
    exact = expected_tau_loose(alpha, rho, k) / expected_tau_strict(alpha, k)
    return ScalingRatio(exact=exact, asymptotic=1.0 / rho)


def speedup_model(expected_tau: float, t_t: float, t_d: float, t_t_k: float, k: int) -> float:
    """Wall-clock speedup: expected_tau * T_t / (K * T_d + T_t_K)."""
    expected_tau = float(expected_tau)
    if not expected_tau >= 0.0:
        raise DomainError(f"expected_tau must be >= 0, got {expected_tau}")
    k = _check_k(k)
    for name, value in (("t_t", t_t), ("t_d", t_d), ("t_t_k", t_t_k)):
        if not float(value) > 0.0:
            raise DomainError(f"{name} must be positive, got {value}")
    return expected_tau * float(t_t) / (k * float(t_d) + float(t_t_k))


@dataclass(frozen=True)
class TheoryParams:
    """Bundle of model parameters for tabulated reports."""

    alpha: float
    rho: float
    k: int
    t_t: Optional[float] = None
    t_d: Optional[float] = None
    t_t_k: Optional[float] = None

    def has_latencies(self) -> bool:
        return self.t_t is not None and self.t_d is not None and self.t_t_k is not None

    def strict(self) -> float:
        return expected_tau_strict(self.alpha, self.k)

    def loose(self) -> float:
        return expected_tau_loose(self.alpha, self.rho, self.k)

    def ratio(self) -> ScalingRatio:
        return scaling_ratio(self.alpha, self.rho, self.k)

    def speedup(self, expected_tau: float) -> float:
        if not self.has_latencies():
            raise DomainError("latencies t_t, t_d, t_t_k are required for speedup")
        return speedup_model(expected_tau, self.t_t, self.t_d, self.t_t_k, self.k)
