"""Power-law step-size schedules and the exponent-region check."""

from __future__ import annotations

import logging
from dataclasses import dataclass

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PowerLawSchedule:
    scale: float = 1.0
    exponent: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("schedule scale must be positive")
        if self.exponent < 0:
            raise ValueError("schedule exponent must be nonnegative")

    def value_at(self, t: int) -> float:
        return value_at(self, t)

    def to_json(self) -> dict:
        return {"scale": self.scale, "exponent": self.exponent}


def value_at(schedule: PowerLawSchedule, t: int) -> float:
    """scale * t**(-exponent) for t >= 1."""
    if t < 1:
        raise ValueError(f"schedules are indexed from t = 1, got {t}")
    if schedule.exponent == 0:
        return schedule.scale
    return schedule.scale * float(t) ** (-schedule.exponent)


@dataclass(frozen=True)
class ScheduleSet:
    alpha: PowerLawSchedule     # surrogate value/gradient averaging
    beta: PowerLawSchedule      # policy mixing
    eta: PowerLawSchedule       # critic TD step
    gamma: PowerLawSchedule     # critic averaging

    @classmethod
    def from_json(cls, d: dict) -> "ScheduleSet":
        return cls(**{k: PowerLawSchedule(**d[k]) for k in ("alpha", "beta", "eta", "gamma")})

    def to_json(self) -> dict:
        return {k: getattr(self, k).to_json() for k in ("alpha", "beta", "eta", "gamma")}

    @property
    def kappas(self) -> tuple[float, float, float, float]:
        return (self.alpha.exponent, self.beta.exponent, self.eta.exponent, self.gamma.exponent)


REGION_LABELS = (
    "1 > 2*k2 - 1 > k1 > 0.5",
    "min(0.5*(k1 + k2 + k3) - 0.5, k1 + k3) > 0.6 > k4 > 0",
    "k1 + 0.5*k4 - 0.5*k3 > 1",
    "k1 + 0.5*k3 + 0.5*k4 > 1.3",
)


def validate_region(kappas) -> list[str]:
    """Labels of the exponent inequalities that fail; empty when all four groups hold.

    The exponents are those of alpha, beta, eta and gamma, in that order.
    Only the exponent algebra is checked: the summability conditions behind
    it are asymptotic and cannot be certified numerically.
    """
    k1, k2, k3, k4 = (float(k) for k in kappas)
    if min(k1, k2, k3, k4) < 0:
        raise ValueError("exponents must be nonnegative")
    checks = (
        1 > 2 * k2 - 1 > k1 > 0.5,
        min(0.5 * k1 + 0.5 * k2 + 0.5 * k3 - 0.5, k1 + k3) > 0.6 > k4 > 0,
        k1 + 0.5 * k4 - 0.5 * k3 > 1,
        k1 + 0.5 * k3 + 0.5 * k4 > 1.3,
    )
    failed = [label for label, ok in zip(REGION_LABELS, checks) if not ok]
    if failed:
        log.warning("step-size exponents %s violate: %s", (k1, k2, k3, k4), "; ".join(failed))
    return failed
