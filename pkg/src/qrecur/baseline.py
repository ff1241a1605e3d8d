"""Baseline cumulative-intensity estimation and the naive per-subject risk.

The cumulative log-intensity H(t) is estimated by a Nelson-Aalen-form step
function anchored at the horizon: H sums the jumps over (t, nu*] with a
minus sign, so H(nu*) = 0 exactly and mu(t) = exp{H(t)} is a nondecreasing
right-continuous step function with mu(nu*) = 1. The jump at a distinct
event time s is (# events at s) / sum_i I(C_i >= s) N_i(s), with N_i(s)
evaluated cadlag (the event at s itself counts), which keeps every
denominator strictly positive.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyRisk, NoEvents
from .records import Dataset, SubjectRecord, _readonly


@dataclass(frozen=True)
class BaselineEstimate:
    """Step-function estimate of the cumulative baseline intensity.

    H_values[k] is H evaluated at jump_times[k] (right-continuous, so the
    value holds on [jump_times[k], jump_times[k+1])); the value before the
    first jump is -sum(jump_sizes).
    """

    jump_times: np.ndarray
    jump_sizes: np.ndarray
    H_values: np.ndarray
    nu_star: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "jump_times", _readonly(self.jump_times))
        object.__setattr__(self, "jump_sizes", _readonly(self.jump_sizes))
        object.__setattr__(self, "H_values", _readonly(self.H_values))

    def H(self, t):
        """Cumulative log-intensity at scalar or array t; H(nu*) = 0 exactly."""
        t = np.asarray(t, dtype=float)
        pos = np.searchsorted(self.jump_times, t, side="right")
        below = -float(np.sum(self.jump_sizes))
        vals = np.where(pos > 0, self.H_values[np.minimum(pos, len(self.H_values)) - 1], below)
        return vals if vals.ndim else float(vals)

    def mu(self, t):
        """mu(t) = exp{H(t)}, the estimated cumulative intensity in (0, 1]."""
        h = self.H(t)
        if isinstance(h, np.ndarray):
            return np.exp(h)
        return float(np.exp(h))


def estimate_baseline(data: Dataset) -> BaselineEstimate:
    """Estimate the baseline cumulative intensity from all observed events.

    Tied event times across subjects are merged into one jump with the tie
    count in the numerator. Raises NoEvents when the dataset has no events;
    EmptyRisk cannot occur under the cadlag denominator convention and is
    raised only defensively.
    """
    times, censors = [], []
    for r in data.records:
        times.extend(r.event_times)
        censors.extend([r.censoring_time] * r.m)
    if not times:
        raise NoEvents("dataset has zero recurrent events")
    times = np.array(times)
    censors = np.array(censors)

    s, counts = np.unique(times, return_counts=True)
    # denominator at s: # event-subject pairs with event time <= s <= that
    # subject's censoring time
    order_t = np.sort(times)
    order_c = np.sort(censors)
    started = np.searchsorted(order_t, s, side="right")
    censored_out = np.searchsorted(order_c, s, side="left")
    denom = started - censored_out
    if np.any(denom <= 0):
        raise EmptyRisk("zero baseline denominator; data violate time ordering")
    jumps = counts / denom

    # H at s_k = -(sum of jumps strictly after s_k); last value exactly 0
    tail = np.concatenate([np.cumsum(jumps[::-1])[::-1][1:], [0.0]])
    return BaselineEstimate(s, jumps, -tail, data.nu_star)


def naive_gamma(
    record: SubjectRecord, baseline: BaselineEstimate, adjusted: bool = True
) -> float:
    """Per-subject risk proxy m / mu(C); the adjusted form max(1, m) / mu(C)
    keeps zero-event subjects usable for seeding the iterative fit."""
    m = record.m
    num = max(1, m) if adjusted else m
    return num / baseline.mu(record.censoring_time)
