"""Deterministic queue-based traffic dynamics at 1 s resolution.

Vehicles are points. A vehicle traverses a link in ``ceil(length/speed)``
seconds, then waits in the FIFO queue of the lane matching its next
movement. Every decision step lasts ``DELTA_T`` seconds; a green lane
releases one vehicle every ``SAT_HEADWAY`` seconds, starting ``YELLOW``
seconds late if the intersection switched phase at this decision. Right
turns are never stopped. A vehicle finishes its trip when it reaches the
end of the last link of its route.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .datamodel import (
    LANES_PER_INTERSECTION,
    MOVEMENTS,
    PHASES,
    RIGHT_TURN_SLOTS,
    FlowSpec,
    RoadNetwork,
    lane_slot,
)

DELTA_T = 10
YELLOW = 3
SAT_HEADWAY = 2
EPISODE_LENGTH = 3600
OBS_DIM = 4 + LANES_PER_INTERSECTION


class InvalidPhase(ValueError):
    pass


class EpisodeNotFinished(RuntimeError):
    pass


def discharge_offsets(changed: bool, yellow: int = YELLOW) -> tuple[int, ...]:
    """Seconds into a decision step at which a green lane releases a vehicle."""
    start = yellow if changed else 0
    return tuple(range(start, DELTA_T - SAT_HEADWAY + 1, SAT_HEADWAY))


@dataclass
class _Plan:
    """Static lookup tables compiled once per (network, flow)."""

    n_agents: int
    n_lanes: int
    travel: dict[str, int]
    # per flow: links of the route and, per hop, the global lane entered at
    # the end of that link (-1 on the final link)
    routes: list[tuple[str, ...]]
    hop_lane: list[tuple[int, ...]]
    hop_ticks: list[tuple[int, ...]]
    # global lane -> (flow-independent) downstream link total-queue lanes
    lane_out_link: list[str | None]
    link_entry_lanes: dict[str, tuple[int, ...]]
    min_trip: list[int]


def compile_plan(network: RoadNetwork, flow: FlowSpec) -> _Plan:
    flow.validate(network)
    agents = network.signalized
    index = {n.id: i for i, n in enumerate(agents)}
    n_lanes = len(agents) * LANES_PER_INTERSECTION
    travel = {lk.id: lk.travel_ticks for lk in network.links}

    lane_of: dict[tuple[str, str], int] = {}
    lane_out_link: list[str | None] = [None] * n_lanes
    link_entry_lanes: dict[str, tuple[int, ...]] = {}
    for node in agents:
        base = index[node.id] * LANES_PER_INTERSECTION
        table = node.movement_table
        for approach, link_id in node.incoming.items():
            lanes = []
            for mv in MOVEMENTS:
                g = base + lane_slot(approach, mv)
                lane_of[(link_id, mv)] = g
                lane_out_link[g] = table[(link_id, mv)]
                lanes.append(g)
            link_entry_lanes[link_id] = tuple(lanes)

    hop_lane, hop_ticks, min_trip = [], [], []
    for fl in flow:
        lanes = []
        for a, b in zip(fl.route, fl.route[1:]):
            node = network.node(network.link(a).to_node)
            lanes.append(lane_of[(a, node.movement_between(a, b))])
        lanes.append(-1)
        hop_lane.append(tuple(lanes))
        ticks = tuple(travel[lid] for lid in fl.route)
        hop_ticks.append(ticks)
        min_trip.append(sum(ticks))
    return _Plan(
        len(agents), n_lanes, travel, [fl.route for fl in flow], hop_lane, hop_ticks,
        lane_out_link, link_entry_lanes, min_trip,
    )


@dataclass
class SimState:
    network: RoadNetwork
    flow: FlowSpec
    seed: int
    plan: _Plan
    episode_length: int = EPISODE_LENGTH
    yellow: int = YELLOW
    clock: int = 0
    phase: np.ndarray = None  # 1-based phase per agent
    changed: np.ndarray = None
    queues: list[deque] = field(default_factory=list)
    moving: np.ndarray = None  # vehicles on a link heading to each lane
    transit: dict[int, list[int]] = field(default_factory=dict)  # arrival tick -> vehicle ids
    n_transit: int = 0
    # spawn schedule: (tick, flow index) sorted; cursor into it
    schedule: list[tuple[int, int]] = field(default_factory=list)
    cursor: int = 0
    # per-vehicle records
    v_flow: list[int] = field(default_factory=list)
    v_hop: list[int] = field(default_factory=list)
    v_enter: list[int] = field(default_factory=list)
    v_exit: list[int] = field(default_factory=list)
    completed: int = 0
    queue_trace: list[int] = field(default_factory=list)
    throughput_trace: list[int] = field(default_factory=list)

    @property
    def n_agents(self) -> int:
        return self.plan.n_agents

    @property
    def spawned(self) -> int:
        return len(self.v_flow)

    @property
    def done(self) -> bool:
        return self.clock >= self.episode_length

    def queue_lengths(self) -> np.ndarray:
        """Queued vehicles per incoming lane, shape (N, 12)."""
        q = np.fromiter((len(d) for d in self.queues), dtype=np.int64, count=self.plan.n_lanes)
        return q.reshape(self.n_agents, LANES_PER_INTERSECTION)

    def lane_counts(self) -> np.ndarray:
        """Vehicles on each incoming lane (queued plus still driving), shape (N, 12)."""
        return self.queue_lengths() + self.moving.reshape(self.n_agents, LANES_PER_INTERSECTION)

    def census(self) -> tuple[int, int, int]:
        """(in transit, queued, completed), counted from the containers themselves."""
        in_transit = sum(len(v) for v in self.transit.values())
        queued = sum(len(d) for d in self.queues)
        return in_transit, queued, self.completed

    def conserved(self) -> bool:
        t, q, c = self.census()
        return self.spawned == t + q + c

    def downstream_queue(self, out_link: str | None) -> int:
        """Total queue on the entry of ``out_link``; 0 when it leaves the network."""
        lanes = self.plan.link_entry_lanes.get(out_link, ())
        return sum(len(self.queues[g]) for g in lanes)


def observations(state: SimState) -> np.ndarray:
    """(N, 16): one-hot phase followed by the 12 lane counts."""
    obs = np.zeros((state.n_agents, OBS_DIM))
    obs[np.arange(state.n_agents), state.phase - 1] = 1.0
    obs[:, 4:] = state.lane_counts()
    return obs


def reset(
    network: RoadNetwork,
    flow: FlowSpec,
    seed: int = 0,
    episode_length: int = EPISODE_LENGTH,
    yellow: int = YELLOW,
) -> tuple[SimState, np.ndarray]:
    plan = compile_plan(network, flow)
    rng = np.random.default_rng(seed)
    schedule = []
    for k, fl in enumerate(flow):
        offset = rng.uniform(0.0, fl.interval)
        for t in fl.spawn_times(offset):
            tick = int(np.floor(t))
            if tick < episode_length:
                schedule.append((tick, k))
    schedule.sort()
    n = plan.n_agents
    state = SimState(
        network=network,
        flow=flow,
        seed=seed,
        plan=plan,
        episode_length=episode_length,
        yellow=yellow,
        phase=np.ones(n, dtype=np.int64),
        changed=np.zeros(n, dtype=bool),
        queues=[deque() for _ in range(plan.n_lanes)],
        moving=np.zeros(plan.n_lanes, dtype=np.int64),
        schedule=schedule,
    )
    return state, observations(state)


_GREEN = {p.phase_id: p.slots() for p in PHASES}


def _enter_link(state: SimState, v: int, tick: int) -> None:
    plan = state.plan
    f, hop = state.v_flow[v], state.v_hop[v]
    arrive = tick + plan.hop_ticks[f][hop]
    state.transit.setdefault(arrive, []).append(v)
    state.n_transit += 1
    lane = plan.hop_lane[f][hop]
    if lane >= 0:
        state.moving[lane] += 1


def _subtick(state: SimState, tick: int, offset: int, releases: list[list[int]]) -> None:
    plan = state.plan
    # (a) spawns
    sched = state.schedule
    while state.cursor < len(sched) and sched[state.cursor][0] == tick:
        f = sched[state.cursor][1]
        state.cursor += 1
        v = len(state.v_flow)
        state.v_flow.append(f)
        state.v_hop.append(0)
        state.v_enter.append(tick)
        state.v_exit.append(-1)
        _enter_link(state, v, tick)
    # (b) arrivals at the end of a link
    arriving = state.transit.pop(tick, None)
    if arriving:
        state.n_transit -= len(arriving)
        for v in arriving:
            lane = plan.hop_lane[state.v_flow[v]][state.v_hop[v]]
            if lane < 0:
                state.v_exit[v] = tick
                state.completed += 1
            else:
                state.moving[lane] -= 1
                state.queues[lane].append(v)
    # (c) discharge
    queues = state.queues
    for lane in releases[offset]:
        q = queues[lane]
        if q:
            v = q.popleft()
            state.v_hop[v] += 1
            _enter_link(state, v, tick)


def step(
    state: SimState,
    joint_phases,
    on_subtick: Callable[[SimState, int], None] | None = None,
) -> tuple[SimState, np.ndarray, np.ndarray, bool]:
    """Advance one decision step of ``DELTA_T`` seconds under ``joint_phases`` (1..4)."""
    if state.done:
        raise EpisodeNotFinished("episode already finished; call reset")
    phases = np.asarray(joint_phases, dtype=np.int64).reshape(-1)
    if phases.shape[0] != state.n_agents:
        raise InvalidPhase(f"expected {state.n_agents} phases, got {phases.shape[0]}")
    if np.any((phases < 1) | (phases > 4)):
        raise InvalidPhase(f"phase ids must be in 1..4, got {phases.tolist()}")
    state.changed = phases != state.phase
    state.phase = phases.copy()

    releases: list[list[int]] = [[] for _ in range(DELTA_T)]
    full = discharge_offsets(False, state.yellow)
    short = discharge_offsets(True, state.yellow)
    for i in range(state.n_agents):
        base = i * LANES_PER_INTERSECTION
        offs = short if state.changed[i] else full
        for s in _GREEN[int(phases[i])]:
            for o in offs:
                releases[o].append(base + s)
        for s in RIGHT_TURN_SLOTS:
            for o in full:
                releases[o].append(base + s)

    for offset in range(DELTA_T):
        tick = state.clock + offset
        _subtick(state, tick, offset, releases)
        if on_subtick is not None:
            on_subtick(state, tick)
    state.clock += DELTA_T
    q = state.queue_lengths()
    state.queue_trace.append(int(q.sum()))
    state.throughput_trace.append(state.completed)
    rewards = -q.sum(axis=1).astype(np.float64)
    return state, observations(state), rewards, state.done


def reward(state: SimState, agent: int) -> float:
    """Negative total queue over the agent's 12 incoming lanes."""
    return -float(state.queue_lengths()[agent].sum())


@dataclass
class MetricsRecord:
    att: float
    throughput: int
    queue_trace: list[int]
    throughput_trace: list[int]
    episode_steps: int
    spawned: int
    enter_times: list[int] = field(repr=False, default_factory=list)
    exit_times: list[int] = field(repr=False, default_factory=list)
    completed_flags: list[bool] = field(repr=False, default_factory=list)

    def summary(self) -> str:
        return f"ATT={self.att:g} throughput={self.throughput}"


def metrics(state: SimState) -> MetricsRecord:
    """Episode summary; unfinished trips are closed at the episode end."""
    if not state.done:
        raise EpisodeNotFinished(f"clock {state.clock} < episode length {state.episode_length}")
    end = state.clock
    exits = [x if x >= 0 else end for x in state.v_exit]
    n = len(exits)
    att = float(np.mean(np.subtract(exits, state.v_enter))) if n else 0.0
    return MetricsRecord(
        att=att,
        throughput=state.completed,
        queue_trace=list(state.queue_trace),
        throughput_trace=list(state.throughput_trace),
        episode_steps=len(state.queue_trace),
        spawned=n,
        enter_times=list(state.v_enter),
        exit_times=exits,
        completed_flags=[x >= 0 for x in state.v_exit],
    )


STEP_CSV_COLUMNS = ("step", "total_queue", "throughput")
VEHICLE_CSV_COLUMNS = ("vehicle", "enter_time", "exit_time", "completed")


def write_metrics_csv(record: MetricsRecord, path) -> None:
    """Per-step rows, then a ``summary`` row holding ATT and throughput."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STEP_CSV_COLUMNS)
        for k, (q, thr) in enumerate(zip(record.queue_trace, record.throughput_trace), start=1):
            w.writerow((k, q, thr))
        w.writerow(("summary", repr(record.att), record.throughput))


def write_vehicle_csv(record: MetricsRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VEHICLE_CSV_COLUMNS)
        for v, (a, b, done) in enumerate(
            zip(record.enter_times, record.exit_times, record.completed_flags)
        ):
            w.writerow((v, a, b, int(done)))


def run_episode(
    network: RoadNetwork,
    flow: FlowSpec,
    controller,
    seed: int = 0,
    episode_length: int = EPISODE_LENGTH,
) -> MetricsRecord:
    """Roll out ``controller(state, observations) -> phases`` for one episode."""
    state, obs = reset(network, flow, seed, episode_length)
    done = state.done
    while not done:
        state, obs, _, done = step(state, controller(state, obs))
    return metrics(state)
