"""Smooth dynamic task weighting.

Each task (the reconstruction loss counts as one) gets a weight from a
softmax over its loss ratio ``Loss(t-1) / Loss(t-2)`` averaged over the
last ``m`` epochs, scaled so the weights sum to the number of tasks.
Epochs are numbered from 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, InsufficientHistory


def default_temperature(n_tasks: int) -> float:
    return 1.0 / math.sqrt(n_tasks)


@dataclass
class SdwState:
    tasks: list
    C: float | None = None
    m: int = 5
    history: dict = field(default_factory=dict)
    weights: np.ndarray = None

    def __post_init__(self):
        self.tasks = list(self.tasks)
        if not self.tasks:
            raise ConfigError("SDW needs at least one task")
        if self.C is None:
            self.C = default_temperature(self.N)
        if not self.C > 0:
            raise ConfigError(f"temperature C must be positive, got {self.C}")
        if int(self.m) < 1:
            raise ConfigError(f"window m must be >= 1, got {self.m}")
        self.m = int(self.m)
        for task in self.tasks:
            self.history.setdefault(task, [])
        if self.weights is None:
            self.weights = np.ones(self.N)

    @property
    def N(self) -> int:
        return len(self.tasks)

    @property
    def epochs_recorded(self) -> int:
        return min(len(v) for v in self.history.values())

    def record(self, losses: dict) -> None:
        """Append one epoch of per-task losses."""
        for task in self.tasks:
            self.history[task].append(float(losses[task]))

    def weight_map(self) -> dict:
        return dict(zip(self.tasks, (float(w) for w in self.weights)))


def descent_rate(state: SdwState, n, t: int) -> float:
    """``Loss_n(t-1) / Loss_n(t-2)``; ``n`` is a task name or index."""
    task = state.tasks[n] if isinstance(n, (int, np.integer)) else n
    hist = state.history[task]
    if t < 3 or len(hist) < t - 1:
        raise InsufficientHistory(f"need losses for epochs {t - 2} and {t - 1}")
    prev, before = hist[t - 2], hist[t - 3]
    if before == 0:
        raise DegenerateInputError(f"task {task!r} has zero loss at epoch {t - 2}")
    return prev / before


def update_weights(state: SdwState, t: int) -> np.ndarray:
    """Weights for epoch ``t``; all ones until two epochs are recorded."""
    width = min(state.m, t - 2)
    if width < 1:
        state.weights = np.ones(state.N)
        return state.weights
    try:
        a = np.array([
            np.mean([descent_rate(state, task, t - j + 1) for j in range(1, width + 1)])
            for task in state.tasks
        ]) / state.C
    except InsufficientHistory:
        state.weights = np.ones(state.N)
        return state.weights
    e = np.exp(a - a.max())
    state.weights = state.N * e / e.sum()
    return state.weights
