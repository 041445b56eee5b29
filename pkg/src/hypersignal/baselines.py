"""Non-learning signal controllers: a fixed cycle and MaxPressure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import LANES_PER_INTERSECTION, PHASES
from .simulator import DELTA_T, SimState


@dataclass(frozen=True)
class FixedTimePlan:
    order: tuple[int, ...] = (1, 2, 3, 4)
    durations: tuple[int, ...] = (30, 30, 30, 30)

    def __post_init__(self):
        if len(self.order) != len(self.durations) or not self.order:
            raise ValueError("order and durations must have equal, nonzero length")
        for d in self.durations:
            if d <= 0 or d % DELTA_T:
                raise ValueError(f"phase duration {d} is not a positive multiple of {DELTA_T} s")

    @classmethod
    def uniform(cls, green: int = 30) -> FixedTimePlan:
        return cls((1, 2, 3, 4), (green,) * 4)

    @property
    def cycle(self) -> int:
        return sum(self.durations)


def fixed_time_action(clock: float, plan: FixedTimePlan = FixedTimePlan()) -> int:
    t = clock % plan.cycle
    for phase, d in zip(plan.order, plan.durations):
        if t < d:
            return phase
        t -= d
    return plan.order[-1]


def phase_pressures(state: SimState, intersection: int) -> np.ndarray:
    """Pressure of phases 1..4: sum over served movements of upstream minus downstream queue."""
    base = intersection * LANES_PER_INTERSECTION
    plan = state.plan
    out = np.zeros(len(PHASES))
    for k, ph in enumerate(PHASES):
        total = 0
        for s in ph.slots():
            g = base + s
            total += len(state.queues[g]) - state.downstream_queue(plan.lane_out_link[g])
        out[k] = total
    return out


def max_pressure_action(state: SimState, intersection: int) -> int:
    # argmax returns the first maximum, i.e. the lowest phase id on ties
    return int(np.argmax(phase_pressures(state, intersection))) + 1


class FixedTimeController:
    name = "fixed"

    def __init__(self, plan: FixedTimePlan | None = None):
        self.plan = plan or FixedTimePlan()

    def __call__(self, state: SimState, obs=None) -> np.ndarray:
        return np.full(state.n_agents, fixed_time_action(state.clock, self.plan), dtype=np.int64)


class MaxPressureController:
    name = "maxpressure"

    def __call__(self, state: SimState, obs=None) -> np.ndarray:
        return np.array([max_pressure_action(state, i) for i in range(state.n_agents)], dtype=np.int64)


class RandomController:
    name = "random"

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def __call__(self, state: SimState, obs=None) -> np.ndarray:
        return self.rng.integers(1, 5, size=state.n_agents)
