"""Self-check suites: finite-difference gradient checks and cheap invariants.

Each suite returns a list of ``CheckResult``. The op registry is a plain
dict so a caller can swap in a deliberately broken case to confirm the
harness notices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import simulator as sim
from .baselines import FixedTimePlan, fixed_time_action, max_pressure_action, phase_pressures
from .datamodel import generate_grid
from .hypergraph import HGConfig

GRAD_TOL = 1e-3
EPSILON = 1e-4


@dataclass
class CheckResult:
    suite: str
    name: str
    max_error: float
    passed: bool
    detail: str = ""


def _p(rng, *shape, low=-1.0, high=1.0):
    return dc.Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _weighted(out: dc.Tensor, seed: int = 11) -> dc.Tensor:
    w = np.random.default_rng(seed).normal(size=out.shape)
    return dc.tsum(dc.mul(out, w))


# Each case: rng -> (loss of the listed inputs, inputs to perturb).
GradCase = Callable[[np.random.Generator], tuple[Callable[[], dc.Tensor], list[dc.Tensor]]]


def _unary(fn):
    def case(rng):
        x = _p(rng, 3, 4)
        return (lambda: _weighted(fn(x))), [x]

    return case


def _binary(fn, shape_a=(3, 4), shape_b=(3, 4)):
    def case(rng):
        a, b = _p(rng, *shape_a), _p(rng, *shape_b)
        return (lambda: _weighted(fn(a, b))), [a, b]

    return case


def _div_case(rng):
    a = _p(rng, 3, 4)
    b = _p(rng, 3, 4, low=0.5, high=2.0)
    return (lambda: _weighted(dc.div(a, b))), [a, b]


def _positive(fn):
    def case(rng):
        x = _p(rng, 3, 4, low=0.2, high=2.0)
        return (lambda: _weighted(fn(x))), [x]

    return case


def _concat_case(rng):
    a, b = _p(rng, 2, 3), _p(rng, 4, 3)
    return (lambda: _weighted(dc.concat([a, b], axis=0))), [a, b]


def _take_case(rng):
    x = _p(rng, 4, 3)
    idx = (np.array([0, 3, 3, 1]), np.array([2, 0, 0, 1]))
    return (lambda: _weighted(dc.take(x, idx))), [x]


OP_CASES: dict[str, GradCase] = {
    "matmul": _binary(dc.matmul, (3, 4), (4, 2)),
    "batched_matmul": _binary(dc.matmul, (2, 3, 4), (2, 4, 5)),
    "add": _binary(dc.add, (3, 4), (1, 4)),
    "sub": _binary(dc.sub),
    "mul": _binary(dc.mul),
    "div": _div_case,
    "scalar_mul": _unary(lambda x: dc.scale(x, -2.5)),
    "concat": _concat_case,
    "relu": _unary(dc.relu),
    "abs": _unary(dc.abs_),
    "sigmoid": _unary(dc.sigmoid),
    "tanh": _unary(dc.tanh),
    "exp": _unary(dc.exp),
    "log": _positive(dc.log),
    "sqrt": _positive(dc.sqrt),
    "power": _positive(lambda x: dc.power(x, 1.7)),
    "softmax": _unary(lambda x: dc.softmax(x, axis=-1)),
    "softmax_axis0": _unary(lambda x: dc.softmax(x, axis=0)),
    "log_softmax": _unary(lambda x: dc.log_softmax(x, axis=-1)),
    "minimum": _binary(dc.minimum),
    "sum": _unary(lambda x: dc.tsum(x, axis=1)),
    "mean": _unary(lambda x: dc.mean(x, axis=0)),
    "mse": _binary(dc.mse),
    "l1_norm": _unary(lambda x: dc.l1_norm(x, axis=-1)),
    "l2_norm": _unary(lambda x: dc.l2_norm(x, axis=-1)),
    "reshape": _unary(lambda x: dc.reshape(x, (2, 6))),
    "transpose": _unary(dc.transpose),
    "take": _take_case,
}


def gradcheck_ops(cases: dict[str, GradCase] | None = None, seed: int = 0) -> list[CheckResult]:
    cases = OP_CASES if cases is None else cases
    out = []
    for name, case in cases.items():
        loss, inputs = case(np.random.default_rng(seed))
        worst = max(dc.gradcheck(lambda _: loss(), x, EPSILON).max_rel_error for x in inputs)
        worst = float(worst)
        out.append(CheckResult("gradcheck", name, worst, worst < GRAD_TOL))
    return out


def toy_batch(rng: np.random.Generator, n_agents: int = 2, size: int = 4):
    from .masac import Batch

    def obs():
        o = np.zeros((size, n_agents, sim.OBS_DIM))
        np.put_along_axis(o, rng.integers(0, 4, size=(size, n_agents, 1)), 1.0, axis=-1)
        o[..., 4:] = rng.integers(0, 10, size=(size, n_agents, 12))
        return o

    return Batch(obs(), obs(), rng.integers(0, 4, size=(size, n_agents)), -rng.uniform(0, 1, (size, n_agents)), obs())


def gradcheck_composite(seed: int = 0, d_embed: int = 8) -> list[CheckResult]:
    """Encoder plus critic loss on a two-agent toy, checked for every critic tensor."""
    from .masac import MASAC, SACConfig

    rng = np.random.default_rng(seed)
    agent = MASAC(2, SACConfig(hg=HGConfig(d_embed=d_embed, beta=0.5), hidden=16), seed)
    batch = toy_batch(rng)
    y = agent.td_target(batch)
    out = []
    for name, param in agent.critic.params().items():
        res = dc.gradcheck(lambda _: agent.critic_loss(batch, y)[0], param, EPSILON)
        err = float(res.max_rel_error)
        out.append(CheckResult("composite", name, err, err < GRAD_TOL))
    return out


def invariant_suite(seed: int = 0) -> list[CheckResult]:
    out = []
    rng = np.random.default_rng(seed)

    z = rng.normal(scale=4, size=(50, 7))
    s = dc.softmax(z, axis=-1).data
    err = float(np.abs(s.sum(axis=-1) - 1).max())
    out.append(CheckResult("invariants", "softmax_normalised", err, bool(err < 1e-9 and np.all(s > 0))))

    net, flow = generate_grid(2, 2)
    broken = 0

    def check(state, tick):
        nonlocal broken
        broken += not state.conserved()

    state, _ = sim.reset(net, flow, seed, episode_length=600)
    while not state.done:
        state, *_ = sim.step(state, rng.integers(1, 5, size=net.n_agents), on_subtick=check)
    out.append(CheckResult("invariants", "vehicle_conservation", float(broken), broken == 0))

    plan = FixedTimePlan()
    table = [fixed_time_action(t, plan) for t in range(0, 120, 10)]
    expect = [1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]
    out.append(CheckResult("invariants", "fixed_time_table", float(table != expect), table == expect))

    mismatches = 0
    state, _ = sim.reset(net, flow, seed)
    for _ in range(60):
        state, *_ = sim.step(state, rng.integers(1, 5, size=net.n_agents))
        for i in range(net.n_agents):
            p = phase_pressures(state, i)
            mismatches += max_pressure_action(state, i) != int(np.flatnonzero(p == p.max())[0]) + 1
    out.append(CheckResult("invariants", "max_pressure_argmax", float(mismatches), bool(mismatches == 0)))

    from .masac import MASAC, SACConfig

    agent = MASAC(2, SACConfig(hg=HGConfig(d_embed=8), hidden=16), seed)
    batch = toy_batch(rng)
    y = agent.td_target(batch)
    worst = 0.0
    for beta, pick in ((0.0, 1), (1.0, 2)):
        total, *parts = agent.critic_loss(batch, y, beta=beta)
        worst = max(worst, abs(total.item() - parts[pick - 1].item()))
    out.append(CheckResult("invariants", "loss_mixing_endpoints", worst, worst <= 1e-12))
    return out


def run_all(cases: dict[str, GradCase] | None = None, seed: int = 0) -> list[CheckResult]:
    return gradcheck_ops(cases, seed) + gradcheck_composite(seed) + invariant_suite(seed)
