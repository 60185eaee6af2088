"""Instrumented operation counters.

The performance claims of this package are asserted through deterministic
counters rather than wall-clock times: how many distribution (CDF)
evaluations a visibility query needs, how many per-segment density
evaluations the density-based oracle needs, and how many spherical-
harmonics fits a render performs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass


@dataclass
class CounterSnapshot:
    cdf_evals: int
    density_evals: int
    sh_fits: int
    color_samples: int


class Counters:
    """Global, lock-protected event counters."""

    def __init__(self):
        self._lock = threading.Lock()
        self.cdf_evals = 0
        self.density_evals = 0
        self.sh_fits = 0
        self.color_samples = 0

    def reset(self):
        with self._lock:
            self.cdf_evals = 0
            self.density_evals = 0
            self.sh_fits = 0
            self.color_samples = 0

    def add(self, counter: str, amount: int = 1):
        with self._lock:
            setattr(self, counter, getattr(self, counter) + int(amount))

    def snapshot(self) -> CounterSnapshot:
        with self._lock:
            return CounterSnapshot(
                self.cdf_evals, self.density_evals, self.sh_fits, self.color_samples
            )


counters = Counters()
