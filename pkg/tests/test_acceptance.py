"""Acceptance suite: one test per criterion, each at its stated tolerance.

The two training criteria share one set of runs (3x3 bidirectional grid,
50 episodes, seeds 1-3), cached for the module.
"""

import csv
import math
import time

import numpy as np

from hypersignal import baselines as bl
from hypersignal import checks, masac
from hypersignal import simulator as sim
from hypersignal.datamodel import PHASES, FlowSpec, generate_grid
from hypersignal.hypergraph import HGConfig, HypergraphEncoder

SEEDS = (1, 2, 3)
EVAL_SEEDS = (101, 102, 103)


def test_criterion_1_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    results = checks.gradcheck_ops() + checks.gradcheck_composite(seed=0, d_embed=8)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_error for r in results)
    ok = worst < 1e-3 and elapsed < 60
    verdict(1, ok, f"{len(results)} gradchecks, max rel error {worst:.2e} (< 1e-3), {elapsed:.1f} s (< 60 s)")
    assert ok, [r for r in results if not r.passed]


def _random_run(net, flow, seed):
    rng = np.random.default_rng(seed + 7919)
    broken = 0

    def check(state, tick):
        nonlocal broken
        broken += not state.conserved()

    state, obs = sim.reset(net, flow, seed)
    trail = [obs.tobytes()]
    while not state.done:
        state, obs, r, _ = sim.step(state, rng.integers(1, 5, size=net.n_agents), on_subtick=check)
        trail.append(obs.tobytes() + r.tobytes())
    rec = sim.metrics(state)
    trail.append(np.array([rec.att, rec.throughput]).tobytes())
    return broken, trail


def test_criterion_2_conservation_and_replay(verdict):
    net, flow = generate_grid(3, 3)
    t0 = time.perf_counter()
    violations, mismatches = 0, 0
    for seed in range(100):
        broken, trail = _random_run(net, flow, seed)
        violations += broken
        if seed < 10:  # replay a tenth of the episodes bit for bit
            mismatches += trail != _random_run(net, flow, seed)[1]
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and mismatches == 0 and elapsed < 60
    verdict(2, ok, f"100 episodes, {violations} conservation violations, {mismatches} replay mismatches, {elapsed:.1f} s")
    assert ok


def test_criterion_3_loss_mixing_endpoints(verdict):
    rng = np.random.default_rng(3)
    agent = masac.MASAC(3, masac.SACConfig(hg=HGConfig(d_embed=8), hidden=16), seed=3)
    worst = 0.0
    for _ in range(20):
        batch = checks.toy_batch(rng, n_agents=3, size=8)
        y = agent.td_target(batch)
        total, td, _, _, _ = agent.critic_loss(batch, y, beta=0.0)
        worst = max(worst, abs(total.item() - td.item()))
        total, _, recon, _, _ = agent.critic_loss(batch, y, beta=1.0)
        worst = max(worst, abs(total.item() - recon.item()))
    ok = worst <= 1e-12
    verdict(3, ok, f"20 random batches, max endpoint deviation {worst:.1e} (<= 1e-12)")
    assert ok


def test_criterion_4_temperature_law(verdict):
    net, flow = generate_grid(1, 1)
    cfg = masac.SACConfig(episodes=5, keep_best=False)
    res = masac.train(net, flow, cfg, seed=0)
    trace = res.alpha_trace
    decreasing = all(b < a for a, b in zip(trace, trace[1:]))
    ok = res.updates >= 500 and decreasing and min(trace) > 0
    verdict(4, ok, f"{res.updates} updates on 1x1, alpha {trace[0]:.4f} -> {trace[-1]:.4f}, strictly decreasing={decreasing}")
    assert ok


_RUNS: dict = {}


def _trained_att(zeta: float, seed: int) -> float:
    key = (zeta, seed)
    if key not in _RUNS:
        net, flow = generate_grid(3, 3, "bidirectional", 300, 90)
        cfg = masac.SACConfig(hg=HGConfig(zeta=zeta))
        res = masac.train(net, flow, cfg, seed=seed)
        _RUNS[key] = float(np.mean([masac.evaluate(res.agent, net, flow, s).att for s in EVAL_SEEDS]))
    return _RUNS[key]


def _baseline_att(controller) -> float:
    net, flow = generate_grid(3, 3, "bidirectional", 300, 90)
    return float(np.mean([sim.run_episode(net, flow, controller, s).att for s in EVAL_SEEDS]))


def test_criterion_5_ordinal_reproduction(verdict):
    t0 = time.perf_counter()
    hg = float(np.mean([_trained_att(0.1, s) for s in SEEDS]))
    fixed = _baseline_att(bl.FixedTimeController())
    mp = _baseline_att(bl.MaxPressureController())
    elapsed = time.perf_counter() - t0
    checks_ = {"HG<Fixed": hg < fixed, "MP<Fixed": mp < fixed, "HG<=1.05MP": hg <= 1.05 * mp}
    ok = all(checks_.values())
    verdict(
        5, ok,
        f"ATT HG-DRL {hg:.2f}, MaxPressure {mp:.2f}, Fixed {fixed:.2f}; "
        + ", ".join(f"{k}={v}" for k, v in checks_.items()) + f"; {elapsed / 60:.1f} min",
    )
    assert ok


def test_criterion_6_zeta_trend(verdict):
    low = [_trained_att(0.1, s) for s in SEEDS]
    high = [_trained_att(0.9, s) for s in SEEDS]
    ok = np.mean(low) <= np.mean(high)
    verdict(6, ok, f"mean ATT zeta=0.1 {np.mean(low):.2f} vs zeta=0.9 {np.mean(high):.2f} (per seed {low} / {high})")
    assert ok


def test_criterion_7_hypergraph_degeneration(verdict):
    rng = np.random.default_rng(7)
    n = 4
    enc = HypergraphEncoder(n, HGConfig(d_embed=16, zeta=math.inf), rng)
    enc.p_spa.data = rng.uniform(0, 5, size=(n, n - 1))
    enc.p_tem.data = rng.uniform(0, 5, size=(n, n))
    obs_t = checks.toy_batch(rng, n_agents=n, size=1).obs[0] * np.r_[np.ones(4), np.full(12, 0.1)]
    obs_tm1 = obs_t.copy()
    base = enc.encode(obs_t, obs_tm1)
    isolated = all(m == [] for m in base.spatial_members + base.temporal_members)
    worst = 0.0
    for other in range(1, n):
        for _ in range(5):
            pt, pm = obs_t.copy(), obs_tm1.copy()
            pt[other, 4:] += rng.uniform(0.1, 2.0, size=12)
            pm[other, 4:] += rng.uniform(0.1, 2.0, size=12)
            moved = enc.encode(pt, pm)
            worst = max(worst, float(np.abs(moved.pre_mlp.data[0] - base.pre_mlp.data[0]).max()))
            worst = max(worst, float(np.abs(moved.nodes.data[0] - base.nodes.data[0]).max()))
    ok = isolated and worst == 0.0
    verdict(7, ok, f"all hyperedges master-only={isolated}, max change at untouched node {worst:.1e}")
    assert ok


def test_criterion_8_baseline_cross_checks(verdict):
    plan = bl.FixedTimePlan()
    table = [bl.fixed_time_action(t, plan) for t in range(0, 240, 10)]
    hand = [1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4] * 2
    table_ok = table == hand

    net, _ = generate_grid(3, 3, "bidirectional", 0, 0)
    state, _ = sim.reset(net, FlowSpec(), 0)
    rng = np.random.default_rng(8)
    index = {node.id: k for k, node in enumerate(net.signalized)}
    mismatches = 0
    for _ in range(1000):
        counts = rng.integers(0, 20, size=12 * net.n_agents)
        for g, c in enumerate(counts):
            state.queues[g] = type(state.queues[g])(range(int(c)))
        for i, node in enumerate(net.signalized):
            best, best_phase = None, None
            for phase in (1, 2, 3, 4):
                total = 0
                for slot in PHASES[phase - 1].slots():
                    side, move = "ESWN"[slot // 3], "TLR"[slot % 3]
                    total += counts[i * 12 + slot]
                    dest = net.link(node.movement_table[(node.incoming[side], move)])
                    if dest.to_node in index:
                        j = index[dest.to_node]
                        k = next(s for s, lk in net.node(dest.to_node).incoming.items() if lk == dest.id)
                        a = "ESWN".index(k)
                        total -= counts[j * 12 + a * 3 : j * 12 + a * 3 + 3].sum()
                if best is None or total > best:
                    best, best_phase = total, phase
            mismatches += bl.max_pressure_action(state, i) != best_phase
    ok = table_ok and mismatches == 0
    verdict(8, ok, f"fixed-time table matches={table_ok}, max-pressure mismatches {mismatches} / {1000 * net.n_agents}")
    assert ok


def test_criterion_9_throughput_and_att_bookkeeping(verdict, tmp_path):
    net, flow = generate_grid(3, 3)
    worst, monotone = 0.0, True
    for seed, controller in ((1, bl.FixedTimeController()), (2, bl.MaxPressureController()), (3, bl.RandomController(3))):
        rec = sim.run_episode(net, flow, controller, seed)
        monotone &= all(b >= a for a, b in zip(rec.throughput_trace, rec.throughput_trace[1:]))
        path = tmp_path / f"vehicles_{seed}.csv"
        sim.write_vehicle_csv(rec, path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        recomputed = math.fsum(float(r["exit_time"]) - float(r["enter_time"]) for r in rows) / len(rows)
        worst = max(worst, abs(recomputed - rec.att))
    ok = monotone and worst <= 1e-9
    verdict(9, ok, f"throughput nondecreasing={monotone}, max ATT recomputation gap {worst:.1e} (<= 1e-9)")
    assert ok
