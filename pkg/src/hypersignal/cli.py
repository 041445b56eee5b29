"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 runtime failure.
Settings resolve as command-line flag, then config file, then built-in default.
"""

from __future__ import annotations

import csv
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import click
import numpy as np

from . import __version__, checks, masac
from . import simulator as sim
from .baselines import FixedTimeController, MaxPressureController
from .datamodel import (
    InvalidArgument,
    ParseError,
    ValidationError,
    generate_grid,
    load_flow,
    load_roadnet,
    save_flow,
    save_roadnet,
)
from .hypergraph import HGConfig

log = logging.getLogger("hypersignal")

EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 1, 2, 3
CONTROLLERS = ("fixed", "maxpressure", "hgdrl")


class RuntimeFailure(RuntimeError):
    pass


@dataclass
class RunConfig:
    # scenario
    rows: int = 3
    cols: int = 3
    mode: str = "bidirectional"
    we_rate: float = 300.0
    sn_rate: float = 90.0
    roadnet: str | None = None
    flow: str | None = None
    episode_length: int = sim.EPISODE_LENGTH
    # control
    controller: str = "hgdrl"
    checkpoint: str | None = None
    seed: int = 0
    out: str = "runs"
    # trainer
    batch_size: int = 20
    episodes: int = 50
    target_entropy: float = -0.5
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    lr_alpha: float = 1e-3
    buffer_size: int = 1000
    gamma: float = 0.98
    rho: float = 0.005
    conventional_soft_update: bool = False
    hidden: int = 64
    reward_scale: float = 0.01
    count_scale: float = 0.1
    clip_targets: bool = True
    keep_best: bool = True
    # encoder
    d_embed: int = 32
    heads: int = 1
    zeta: float = 0.1
    lam: float = 0.001
    gamma2: float = 0.2
    beta: float = 0.001

    def sac(self) -> masac.SACConfig:
        hg = HGConfig(
            d_embed=self.d_embed, heads=self.heads, zeta=self.zeta, lam=self.lam, gamma2=self.gamma2, beta=self.beta
        )
        return masac.SACConfig(
            batch_size=self.batch_size, episodes=self.episodes, target_entropy=self.target_entropy,
            lr_actor=self.lr_actor, lr_critic=self.lr_critic, lr_alpha=self.lr_alpha,
            buffer_size=self.buffer_size, gamma=self.gamma, rho=self.rho,
            conventional_soft_update=self.conventional_soft_update, hidden=self.hidden,
            reward_scale=self.reward_scale, count_scale=self.count_scale, clip_targets=self.clip_targets,
            keep_best=self.keep_best,
            episode_length=self.episode_length, hg=hg,
        )


_FIELDS = {f.name: f for f in fields(RunConfig)}
_ALIASES = {"lambda": "lam"}


def read_config_file(path: str | Path) -> dict:
    """Flat JSON object whose keys are RunConfig field names."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: expected a flat JSON object")
    out = {}
    for key, value in raw.items():
        name = _ALIASES.get(key, key)
        if name not in _FIELDS:
            raise ValidationError(f"{path}: unknown config key {key!r}")
        if isinstance(value, (dict, list)):
            raise ValidationError(f"{path}: key {key!r} must be a scalar")
        out[name] = value
    return out


def resolve_config(config_file: str | None, **flags) -> RunConfig:
    values = {}
    if config_file:
        values.update(read_config_file(config_file))
    values.update({k: v for k, v in flags.items() if v is not None and k in _FIELDS})
    cfg = RunConfig(**values)
    if cfg.controller not in CONTROLLERS:
        raise ValidationError(f"unknown controller {cfg.controller!r}")
    cfg.sac()  # surfaces range errors early
    return cfg


def load_scenario(cfg: RunConfig):
    if (cfg.roadnet is None) != (cfg.flow is None):
        raise ValidationError("--roadnet and --flow must be given together")
    if cfg.roadnet is not None:
        network = load_roadnet(cfg.roadnet)
        return network, load_flow(cfg.flow, network)
    return generate_grid(cfg.rows, cfg.cols, cfg.mode, cfg.we_rate, cfg.sn_rate)


def make_controller(cfg: RunConfig, n_agents: int):
    if cfg.controller == "fixed":
        return FixedTimeController()
    if cfg.controller == "maxpressure":
        return MaxPressureController()
    if not cfg.checkpoint:
        raise ValidationError("controller hgdrl needs --checkpoint")
    if not Path(cfg.checkpoint).is_file():
        raise ValidationError(f"checkpoint not found: {cfg.checkpoint}")
    return masac.MASAC.load(cfg.checkpoint, n_agents=n_agents)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeFailure(f"cannot create output directory {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------- options


def _scenario_options(fn):
    opts = [
        click.option("--rows", type=click.IntRange(min=1), help="Grid rows."),
        click.option("--cols", type=click.IntRange(min=1), help="Grid columns."),
        click.option("--mode", type=click.Choice(["bidirectional", "bi", "unidirectional", "uni"])),
        click.option("--we-rate", type=click.FloatRange(min=0), help="Vehicles per lane per hour, west-east."),
        click.option("--sn-rate", type=click.FloatRange(min=0), help="Vehicles per lane per hour, south-north."),
        click.option("--roadnet", type=click.Path(dir_okay=False), help="Road network JSON (overrides the grid)."),
        click.option("--flow", type=click.Path(dir_okay=False), help="Flow JSON, paired with --roadnet."),
        click.option("--episode-length", type=click.IntRange(min=1), help="Episode length in seconds."),
        click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), help="Flat JSON config."),
        click.option("--seed", type=int),
        click.option("--out", type=click.Path(file_okay=False), help="Output directory."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _trainer_options(fn):
    opts = [
        click.option("--episodes", type=click.IntRange(min=1)),
        click.option("--batch-size", type=click.IntRange(min=1)),
        click.option("--buffer-size", type=click.IntRange(min=1)),
        click.option("--target-entropy", type=float),
        click.option("--lr-actor", type=float),
        click.option("--lr-critic", type=float),
        click.option("--lr-alpha", type=float),
        click.option("--gamma", type=float),
        click.option("--rho", type=float),
        click.option("--conventional-soft-update/--printed-soft-update", default=None),
        click.option("--hidden", type=click.IntRange(min=1)),
        click.option("--reward-scale", type=float),
        click.option("--count-scale", type=float),
        click.option("--clip-targets/--no-clip-targets", default=None),
        click.option("--keep-best/--no-keep-best", default=None),
        click.option("--d-embed", type=click.IntRange(min=1)),
        click.option("--heads", type=click.IntRange(min=1)),
        click.option("--zeta", type=float),
        click.option("--lambda", "lam", type=float),
        click.option("--gamma2", type=float),
        click.option("--beta", type=float),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _version_text() -> str:
    return f"hypersignal {__version__} (python {platform.python_version()}, numpy {np.__version__})"


@click.group()
@click.version_option(version=__version__, message=_version_text())
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """Traffic signal control experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@cli.command()
@_scenario_options
def generate(config_file, **flags) -> None:
    """Write roadnet.json and flow.json for a synthetic grid."""
    cfg = resolve_config(config_file, **flags)
    network, flow = generate_grid(cfg.rows, cfg.cols, cfg.mode, cfg.we_rate, cfg.sn_rate)
    out = _out_dir(cfg)
    save_roadnet(network, out / "roadnet.json")
    save_flow(flow, out / "flow.json")
    click.echo(f"wrote {out / 'roadnet.json'} and {out / 'flow.json'} ({network.n_agents} intersections)")


@cli.command()
@_scenario_options
@_trainer_options
def train(config_file, **flags) -> None:
    """Train HG-DRL agents; writes agent.npz and train_log.csv."""
    cfg = resolve_config(config_file, **flags)
    network, flow = load_scenario(cfg)
    out = _out_dir(cfg)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")

    def report(entry: masac.EpisodeLog) -> None:
        click.echo(
            f"episode {entry.episode}: ATT={entry.att:.2f} throughput={entry.throughput} "
            f"alpha={entry.alpha:.4g} entropy={entry.mean_entropy:.3f}"
        )

    result = masac.train(network, flow, cfg.sac(), cfg.seed, on_episode=report)
    result.agent.save(out / "agent.npz")
    masac.write_train_log(result.history, out / "train_log.csv")
    kept = f" (parameters from episode {result.best_episode})" if result.best_episode else ""
    click.echo(f"saved {out / 'agent.npz'} after {result.updates} updates{kept}")


@cli.command("eval")
@_scenario_options
@click.option("--controller", type=click.Choice(CONTROLLERS))
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Trained agent for --controller hgdrl.")
def eval_cmd(config_file, **flags) -> None:
    """Run one greedy episode; prints ATT and throughput, writes steps.csv and vehicles.csv."""
    cfg = resolve_config(config_file, **flags)
    network, flow = load_scenario(cfg)
    controller = make_controller(cfg, network.n_agents)
    record = masac.evaluate(controller, network, flow, cfg.seed, cfg.episode_length)
    out = _out_dir(cfg)
    sim.write_metrics_csv(record, out / "steps.csv")
    sim.write_vehicle_csv(record, out / "vehicles.csv")
    click.echo(record.summary())


COMPARE_COLUMNS = ("controller", "runs", "att_mean", "att_std", "throughput_mean", "throughput_std")


@cli.command()
@_scenario_options
@click.option("--controllers", default="fixed,maxpressure", show_default=True, help="Comma-separated list.")
@click.option("--seeds", default="1,2,3", show_default=True, help="Comma-separated evaluation seeds.")
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Trained agent used by hgdrl.")
def compare(config_file, controllers: str, seeds: str, **flags) -> None:
    """Mean and sample standard deviation of ATT per controller over seeds."""
    names = [c.strip() for c in controllers.split(",") if c.strip()]
    bad = [c for c in names if c not in CONTROLLERS]
    if bad or not names:
        raise click.BadParameter(f"unknown controller(s): {', '.join(bad) or '(none)'}", param_hint="--controllers")
    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--seeds") from exc
    if not seed_list:
        raise click.BadParameter("no seeds given", param_hint="--seeds")
    cfg = resolve_config(config_file, **flags)
    network, flow = load_scenario(cfg)
    out = _out_dir(cfg)

    rows, per_run = [], []
    for name in names:
        cfg.controller = name
        controller = make_controller(cfg, network.n_agents)
        atts, thr = [], []
        for s in seed_list:
            rec = masac.evaluate(controller, network, flow, s, cfg.episode_length)
            atts.append(rec.att)
            thr.append(rec.throughput)
            per_run.append((name, s, repr(rec.att), rec.throughput))
        ddof = 1 if len(seed_list) > 1 else 0
        rows.append((name, len(seed_list), float(np.mean(atts)), float(np.std(atts, ddof=ddof)),
                     float(np.mean(thr)), float(np.std(thr, ddof=ddof))))

    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_COLUMNS)
        w.writerows((r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4]), repr(r[5])) for r in rows)
    with open(out / "compare_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("controller", "seed", "att", "throughput"))
        w.writerows(per_run)

    click.echo(f"{'controller':<12} {'ATT (s)':>20} {'throughput':>18}")
    for name, _, am, asd, tm, tsd in rows:
        click.echo(f"{name:<12} {am:>10.2f} ± {asd:<7.2f} {tm:>9.1f} ± {tsd:<6.1f}")


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
def selfcheck(seed: int) -> None:
    """Finite-difference gradient checks and simulator/trainer invariants."""
    results = checks.run_all(seed=seed)
    suites: dict[str, list[checks.CheckResult]] = {}
    for r in results:
        suites.setdefault(r.suite, []).append(r)
    failed = [r for r in results if not r.passed]
    for suite, items in suites.items():
        worst = max(r.max_error for r in items)
        ok = all(r.passed for r in items)
        click.echo(f"{suite:<11} {'PASS' if ok else 'FAIL'}  checks={len(items)}  max_error={worst:.3e}")
    for r in failed:
        click.echo(f"  failed: {r.suite}/{r.name} error={r.max_error:.3e}")
    if failed:
        raise RuntimeFailure(f"{len(failed)} check(s) failed")
    click.echo("selfcheck PASS")


def main(argv: list[str] | None = None) -> int:
    """Console entry; maps error classes onto exit codes."""
    try:
        rv = cli.main(args=argv, prog_name="hypersignal", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except (ParseError, ValidationError, InvalidArgument, masac.ConfigError, masac.CheckpointMismatch, ValueError,
            FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_INVALID
    except (RuntimeFailure, OSError, RuntimeError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_RUNTIME
    return rv if isinstance(rv, int) else 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
