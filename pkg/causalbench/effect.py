"""Treatment-effect estimate container shared by every estimator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any

Z_95 = 1.96


class Estimand(str, Enum):
    ATE = "ATE"
    ATT = "ATT"

    @classmethod
    def parse(cls, value: str | Estimand) -> Estimand:
        if isinstance(value, Estimand):
            return value
        try:
            return cls(value.upper())
        except ValueError:
            raise ValueError(f"Unknown estimand '{value}' (expected ate or att)") from None


@dataclass(frozen=True)
class EffectEstimate:
    """Point estimate, standard error and 95% interval for one method.

    Attributes:
        method_id: Registry or config id of the method that produced it
        estimand: ATE or ATT
        tau: Point estimate
        se: Standard error (>= 0)
        ci: 95% interval, lo <= tau <= hi
        n_used: Number of units that entered the estimate
        outcome: Outcome name the estimate refers to
        flags: Numerical conditions met on the way (truncation, fallback, ...)
    """

    method_id: str
    estimand: Estimand
    tau: float
    se: float
    ci: tuple[float, float]
    n_used: int
    outcome: str = ""
    flags: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not math.isfinite(self.tau):
            raise ValueError(f"{self.method_id}: non-finite estimate {self.tau}")
        if self.se < 0 or math.isnan(self.se):
            raise ValueError(f"{self.method_id}: invalid standard error {self.se}")
        lo, hi = self.ci
        if not lo <= self.tau <= hi:
            raise ValueError(
                f"{self.method_id}: interval ({lo}, {hi}) does not contain {self.tau}"
            )

    @classmethod
    def normal(
        cls,
        method_id: str,
        estimand: Estimand,
        tau: float,
        se: float,
        n_used: int,
        outcome: str = "",
        flags: tuple[str, ...] = (),
    ) -> EffectEstimate:
        """Build an estimate with the normal 95% interval tau +/- 1.96 se."""
        tau = float(tau)
        se = float(se)
        return cls(
            method_id=method_id,
            estimand=estimand,
            tau=tau,
            se=se,
            ci=(tau - Z_95 * se, tau + Z_95 * se),
            n_used=int(n_used),
            outcome=outcome,
            flags=tuple(flags),
        )

    def relabel(self, method_id: str, outcome: str | None = None) -> EffectEstimate:
        return replace(
            self,
            method_id=method_id,
            outcome=self.outcome if outcome is None else outcome,
        )

    def with_flags(self, *flags: str) -> EffectEstimate:
        merged = tuple(dict.fromkeys((*self.flags, *flags)))
        return replace(self, flags=merged)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["estimand"] = self.estimand.value
        data["ci"] = list(self.ci)
        data["flags"] = list(self.flags)
        return data
