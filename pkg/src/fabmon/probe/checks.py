"""Consistency rules over dynamic metric values.

A rule names a metric and either numeric bounds or a freshness horizon;
each (sample, rule) breach yields one violation. Samples the directory
served stale automatically violate any freshness rule on their metric,
whatever their embedded timestamp claims.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from fabmon.core import MetricSample, Status


@dataclass(frozen=True)
class ConsistencyRule:
    metric: str
    min_value: Optional[float] = None
    max_value: Optional[float] = None
    max_age_s: Optional[int] = None
    on_violation: Status = Status.WARN

    def __post_init__(self):
        if self.min_value is not None and self.max_value is not None:
            if self.min_value > self.max_value:
                raise ValueError("rule min must be <= max")
        if self.on_violation not in (Status.WARN, Status.FAIL):
            raise ValueError("on_violation must be warn or fail")
        if self.min_value is None and self.max_value is None and self.max_age_s is None:
            raise ValueError("rule must bound something")


@dataclass(frozen=True)
class Violation:
    sample: MetricSample
    rule: ConsistencyRule
    reason: str  # below_min | above_max | too_old | stale_flagged

    def describe(self) -> str:
        s, r = self.sample, self.rule
        if self.reason == "below_min":
            detail = f"value {s.value} < min {r.min_value}"
        elif self.reason == "above_max":
            detail = f"value {s.value} > max {r.max_value}"
        elif self.reason == "stale_flagged":
            detail = "served stale by the directory"
        else:
            detail = f"sample older than {r.max_age_s}s"
        return f"{s.path} {s.metric}: {detail}"


def consistency_check(
    samples: list[tuple[MetricSample, bool]] | list[MetricSample],
    rules: list[ConsistencyRule],
    now: int,
) -> list[Violation]:
    """Evaluate every rule against every sample of its metric.

    Samples may be bare or (sample, stale_flag) pairs.
    """
    violations: list[Violation] = []
    for item in samples:
        sample, stale = item if isinstance(item, tuple) else (item, False)
        for rule in rules:
            if rule.metric != sample.metric:
                continue
            numeric = not isinstance(sample.value, str)
            if rule.min_value is not None and numeric and sample.value < rule.min_value:
                violations.append(Violation(sample, rule, "below_min"))
            if rule.max_value is not None and numeric and sample.value > rule.max_value:
                violations.append(Violation(sample, rule, "above_max"))
            if rule.max_age_s is not None:
                if stale:
                    violations.append(Violation(sample, rule, "stale_flagged"))
                elif now - sample.timestamp > rule.max_age_s * 1000:
                    violations.append(Violation(sample, rule, "too_old"))
    return violations


def default_rules(period_s: float = 30.0) -> list[ConsistencyRule]:
    """Shipped defaults: loads non-negative, percents in [0,100], freshness 3x period."""
    return [
        ConsistencyRule(metric="cpu.load1", min_value=0.0, on_violation=Status.FAIL),
        ConsistencyRule(metric="cpu.util", min_value=0.0, max_value=100.0,
                        on_violation=Status.WARN),
        ConsistencyRule(metric="cpu.load1", max_age_s=int(3 * period_s),
                        on_violation=Status.WARN),
    ]
