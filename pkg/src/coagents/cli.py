"""Command-line front end: ``coagents run <config> [--trials N] [--seed S] [--out DIR]``.

Configs are JSON documents naming an experiment (``gradcheck``, ``train``,
``comdp-verify``, ``reduce-verify`` or ``option-critic``), the MDP, the
network and experiment-specific settings. Every run writes its CSV/text
outputs plus ``manifest.json`` into the output directory. Outputs contain no
timestamps, so a (config, seed) pair reproduces them byte for byte.

Exit status: 0 success, 1 invalid config or failed verification, 2 numeric
failure (singular solve, size overflow).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from importlib import metadata, resources
from pathlib import Path

import numpy as np

from . import comdp as comdp_mod
from . import reduction
from .fixtures import two_bit_network, async_fixtures, sync_fixtures
from .gradients import DEFAULT_LADDER, cosine_distance, estimate_gradient, exact_gradient
from .mdp import NumericError, TabularMdp, build_gridworld
from .network import CoagentNetwork, TopologyError
from .option_critic import (build_option_critic, exact_option_tables, intra_option_gradient, selector_gradient,
                            termination_gradient)
from .training import TrainConfig, train

log = logging.getLogger(__name__)

EXPERIMENTS = ("gradcheck", "train", "comdp-verify", "reduce-verify", "option-critic")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"field '{field_name}': {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    trials: int = 1
    mdp: dict = field(default_factory=lambda: {"type": "gridworld", "width": 3, "height": 3})
    network: dict = field(default_factory=lambda: {"type": "two_bit", "exec_prob": 0.5})
    training: dict | None = None
    batch_sizes: list = field(default_factory=lambda: list(DEFAULT_LADDER))
    settings: dict = field(default_factory=dict)
    output: str = "out"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {"experiment", "seed", "trials", "mdp", "network", "training", "batch_sizes", "settings", "output"}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown field")
        if "experiment" not in d:
            raise ConfigError("experiment", "missing")
        if d["experiment"] not in EXPERIMENTS:
            raise ConfigError("experiment", f"must be one of {', '.join(EXPERIMENTS)}")
        if "seed" not in d:
            raise ConfigError("seed", "missing (runs are never seeded from the clock)")
        if not isinstance(d["seed"], int) or isinstance(d["seed"], bool) or d["seed"] < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        cfg = cls(experiment=d["experiment"], seed=d["seed"])
        if "trials" in d:
            if not isinstance(d["trials"], int) or d["trials"] < 1:
                raise ConfigError("trials", "must be a positive integer")
            cfg.trials = d["trials"]
        for key in ("mdp", "network", "settings"):
            if key in d:
                if not isinstance(d[key], dict):
                    raise ConfigError(key, "must be an object")
                setattr(cfg, key, dict(d[key]))
        if d.get("training") is not None:
            if not isinstance(d["training"], dict):
                raise ConfigError("training", "must be an object")
            cfg.training = dict(d["training"])
        if "batch_sizes" in d:
            b = d["batch_sizes"]
            if not isinstance(b, list) or not b or any(not isinstance(x, int) or x < 2 for x in b):
                raise ConfigError("batch_sizes", "must be a non-empty list of integers >= 2")
            cfg.batch_sizes = sorted(b)
        if "output" in d:
            cfg.output = str(d["output"])
        return cfg

    def to_dict(self) -> dict:
        d = {"experiment": self.experiment, "seed": self.seed, "trials": self.trials, "mdp": self.mdp,
             "network": self.network, "batch_sizes": self.batch_sizes, "settings": self.settings,
             "output": self.output}
        if self.training is not None:
            d["training"] = self.training
        return d


def bundled_configs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("coagents").joinpath("configs").iterdir()
                  if p.name.endswith(".json"))


def load_config(path: str) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        bundled = resources.files("coagents").joinpath("configs", f"{path}.json")
        if not bundled.is_file():
            raise ConfigError("<path>", f"no config file {path!r} and no bundled config of that name")
        text = bundled.read_text()
    else:
        text = p.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(data)


def build_mdp(spec: dict) -> TabularMdp:
    kind = spec.get("type", "gridworld")
    try:
        if kind == "gridworld":
            return build_gridworld(int(spec.get("width", 3)), int(spec.get("height", 3)),
                                   start=tuple(spec.get("start", (0, 0))), goal=spec.get("goal"),
                                   step_reward=float(spec.get("step_reward", -1.0)),
                                   goal_reward=float(spec.get("goal_reward", 0.0)),
                                   discount=float(spec.get("discount", 1.0)))
        if kind == "tables":
            return TabularMdp(np.array(spec["transition"]), np.array(spec["reward_dist"]),
                              np.array(spec["reward_support"]), np.array(spec["initial_dist"]),
                              float(spec["discount"]), frozenset(spec.get("terminal_states", ())))
    except KeyError as exc:
        raise ConfigError(f"mdp.{exc.args[0]}", "missing") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError("mdp", str(exc)) from None
    raise ConfigError("mdp.type", "must be 'gridworld' or 'tables'")


def build_network(spec: dict, mdp: TabularMdp) -> CoagentNetwork:
    kind = spec.get("type", "two_bit")
    try:
        if kind == "two_bit":
            net = two_bit_network(float(spec.get("exec_prob", 0.5)), mdp.n_observations, mdp.n_actions)
        elif kind == "explicit":
            net = CoagentNetwork.from_dict(spec, mdp.n_observations)
        else:
            raise ConfigError("network.type", "must be 'two_bit' or 'explicit'")
    except (TopologyError, KeyError, TypeError) as exc:
        raise ConfigError("network", str(exc)) from None
    if net.n_actions != mdp.n_actions:
        raise ConfigError("network", f"action coagent has {net.n_actions} outputs, MDP has {mdp.n_actions} actions")
    return net


def build_train_config(spec: dict | None, seed: int) -> TrainConfig:
    if spec is None:
        raise ConfigError("training", "missing")
    spec = dict(spec)
    spec["seed"] = seed
    try:
        return TrainConfig(**spec)
    except TypeError as exc:
        raise ConfigError("training", str(exc)) from None
    except ValueError as exc:
        raise ConfigError("training", str(exc)) from None


def trial_seed(master: int, trial: int, stream: int = 0) -> int:
    """Deterministic per-trial seed derived from the master seed."""
    return int(np.random.SeedSequence([master, trial, stream]).generate_state(1)[0])


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def _stderr(x) -> float:
    x = np.asarray(x, float)
    return float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0


def run_gradcheck(cfg: ExperimentConfig):
    mdp = build_mdp(cfg.mdp)
    net = build_network(cfg.network, mdp)
    chunk = int(cfg.settings.get("chunk", 20_000))
    rows, summary = [], []
    by_batch = {b: [] for b in cfg.batch_sizes}
    for trial in range(cfg.trials):
        warm = build_train_config(cfg.training, trial_seed(cfg.seed, trial, 0))
        params = train(mdp, net, warm).params
        exact = exact_gradient(mdp, net, params)
        ests = estimate_gradient(mdp, net, params, cfg.batch_sizes[-1], trial_seed(cfg.seed, trial, 1),
                                 checkpoints=cfg.batch_sizes, chunk=chunk)
        for est in ests:
            d, _ = cosine_distance(est.mean, exact, per_coagent=True)
            rows.append((trial, est.n_episodes, float(d.mean()), _stderr(d)))
            by_batch[est.n_episodes].append(float(d.mean()))
            z = np.abs(est.z_scores(exact))
            summary.append((trial, est.n_episodes, float(z.max()), int((z >= 3.29).sum())))
        log.info("trial %d done", trial)
    agg = [(b, float(np.mean(v)), _stderr(v)) for b, v in by_batch.items()]
    return {"gradcheck.csv": _csv(rows, ["trial", "batch_size", "mean_distance", "stderr"]),
            "gradcheck_summary.csv": _csv(agg, ["batch_size", "mean_distance", "stderr"]),
            "zscores.csv": _csv(summary, ["trial", "batch_size", "max_abs_z", "n_beyond_3.29"])}, True


def run_train(cfg: ExperimentConfig):
    mdp = build_mdp(cfg.mdp)
    net = build_network(cfg.network, mdp)
    curves = []
    rows = []
    for trial in range(cfg.trials):
        res = train(mdp, net, build_train_config(cfg.training, trial_seed(cfg.seed, trial)))
        curves.append(res.returns)
        rows.extend((trial, k, float(r)) for k, r in enumerate(res.returns))
    c = np.array(curves)
    mean = [(k, float(c[:, k].mean()), _stderr(c[:, k])) for k in range(c.shape[1])]
    header = json.dumps(build_train_config(cfg.training, cfg.seed).header(), sort_keys=True)
    return {"curves.csv": _csv(rows, ["trial", "episode", "return"]),
            "mean_curve.csv": _csv(mean, ["episode", "mean_return", "stderr"]),
            "train_header.json": header + "\n"}, True


def _verify_params(net, rng, n):
    return [net.random_params(rng) for _ in range(n)]


def run_comdp_verify(cfg: ExperimentConfig):
    rng = np.random.default_rng(cfg.seed)
    n_theta = int(cfg.settings.get("thetas", 3))
    horizon = int(cfg.settings.get("horizon", 10))
    tol = float(cfg.settings.get("tol", 1e-10))
    lines, ok = [], True
    for name, mdp, net in sync_fixtures():
        for k, params in enumerate(_verify_params(net, rng, n_theta)):
            for i in range(net.m):
                rep = comdp_mod.verify_properties(mdp, net, params, i, horizon, tol)
                ok &= all(p for _, p in rep.values())
                lines.append(comdp_mod.format_report(rep, f"fixture={name} theta={k} coagent={i} "))
    return {"comdp_report.txt": "\n".join(lines) + "\n"}, ok


def run_reduce_verify(cfg: ExperimentConfig):
    rng = np.random.default_rng(cfg.seed)
    n_theta = int(cfg.settings.get("thetas", 3))
    tol = float(cfg.settings.get("tol", 1e-10))
    horizon = int(cfg.settings.get("horizon", 10))
    fixtures = async_fixtures()
    grid = build_gridworld(3, 3)
    fixtures.append(("two-bit-grid", grid, two_bit_network(0.5)))
    lines, ok = [], True

    def emit(prefix, key, dev):
        nonlocal ok
        good = dev < tol
        ok &= good
        lines.append(f"{prefix}check={key} max_deviation={dev:.3e} status={'pass' if good else 'fail'}")

    for name, mdp, net in fixtures:
        for k, params in enumerate(_verify_params(net, rng, n_theta)):
            prefix = f"fixture={name} theta={k} "
            emit(prefix, "behavior", reduction.verify_behavior_equivalence(mdp, net, params)["max_deviation"])
            J, J_aug, dev = reduction.verify_objective_equivalence(mdp, net, params)
            emit(prefix, "objective", dev)
            s1, r1 = reduction.async_marginals(mdp, net, params, horizon)
            sol = reduction.solve_augmented(mdp, net, params)
            s2, r2 = reduction.augmented_marginals(sol.aug, sol.policy, sol.start_policy, horizon)
            emit(prefix, "state_marginals", float(np.abs(s1 - s2).max()))
            emit(prefix, "reward_marginals", float(np.abs(r1 - r2).max()))
            if sol.aug.n_states * sol.aug.n_actions * sol.aug.n_states <= 10**5:
                aug = reduction.build_augmented_mdp(mdp, net)
                sync = reduction.build_sync_network(net)
                worst = 0.0
                for node in range(len(sync.coagents)):
                    rep = comdp_mod.verify_properties(aug, sync, params, node, horizon, tol)
                    worst = max(worst, max(d for d, _ in rep.values()))
                emit(prefix, "augmented_comdp_properties", worst)
    return {"reduce_report.txt": "\n".join(lines) + "\n"}, ok


def run_option_critic(cfg: ExperimentConfig):
    mdp = build_mdp(cfg.mdp)
    n_options = int(cfg.settings.get("n_options", 2))
    n_theta = int(cfg.settings.get("thetas", 5))
    tol = float(cfg.settings.get("tol", 1e-8))
    net = build_option_critic(mdp, n_options)
    rng = np.random.default_rng(cfg.seed)
    rows, ok = [], True
    for k in range(n_theta):
        params = net.network.random_params(rng)
        tables = exact_option_tables(mdp, net, params)
        generic = exact_gradient(mdp, net.network, params, tables.solution)
        special = {
            "termination": termination_gradient(tables, net, params, mdp, "qbeta"),
            "selector": selector_gradient(tables, net, params, mdp),
            "intra_option": intra_option_gradient(tables, net, params, mdp),
        }
        for b, (name, g) in enumerate(special.items()):
            dev = float(np.abs(g.ravel() - generic.block(b)).max())
            ok &= dev < tol
            rows.append((k, name, "specialized_vs_generic", dev))
        dev = float(np.abs(special["termination"] - termination_gradient(tables, net, params, mdp, "advantage")).max())
        ok &= dev < tol
        rows.append((k, "termination", "qbeta_vs_advantage", dev))
    return {"option_critic_report.csv": _csv(rows, ["theta", "block", "comparison", "max_deviation"])}, ok


RUNNERS = {"gradcheck": run_gradcheck, "train": run_train, "comdp-verify": run_comdp_verify,
           "reduce-verify": run_reduce_verify, "option-critic": run_option_critic}


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def run(cfg: ExperimentConfig, out_dir: str | Path) -> bool:
    """Run one experiment and write its outputs; returns whether all of its
    checks passed."""
    outputs, ok = RUNNERS[cfg.experiment](cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, text in sorted(outputs.items()):
        (out / name).write_text(text)
        files[name] = hashlib.sha256(text.encode()).hexdigest()
    manifest = {"config": cfg.to_dict(), "seed": cfg.seed, "trials": cfg.trials,
                "versions": {"artifact": _version(), "numpy": np.__version__},
                "outputs": files, "checks_passed": bool(ok)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return bool(ok)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="coagents", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config (path or bundled name)")
    p_run.add_argument("config")
    p_run.add_argument("--trials", type=int)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out")
    sub.add_parser("list", help="list bundled configs")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "list":
        print("\n".join(bundled_configs()))
        return 0
    try:
        cfg = load_config(args.config)
        if args.trials is not None:
            if args.trials < 1:
                raise ConfigError("trials", "must be a positive integer")
            cfg.trials = args.trials
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed", "must be a non-negative integer")
            cfg.seed = args.seed
        ok = run(cfg, args.out or cfg.output)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    if not ok:
        print("one or more checks failed; see the report in the output directory", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
