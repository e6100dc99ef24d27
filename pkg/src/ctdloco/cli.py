"""``ctdloco`` command line: train, roll out, and analyse recurrent policies.

Every subcommand reads an optional JSON experiment config, validates it
completely, and only then writes into ``--out``. Numeric outputs are CSV
with a leading ``#`` metadata line; structured outputs are JSON with a
``metadata`` field. Outputs depend only on (config, seed).
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import __version__
from . import perturbation as pl
from .env import EnvConfig
from .exceptions import ConfigurationError, NumericError, WeightFileError
from .experiments import compare_truncation, decay_from
from .fixed_points import (FixedPointFinder, local_gradient_field, write_decay_csv,
                           write_eigenvalue_csv, write_gradient_field_csv, zero_input_vector)
from .pca import (DEFAULT_SPEEDS, PCBasis, RankDeficiencyWarning, RolloutDataset,
                  collect_rollouts, explained_variance_report, fit_pca)
from .policy import PolicyNet, load_weights, save_weights
from .rollout import write_trace_csv
from .trainer import TrainConfig, train

log = logging.getLogger("ctdloco")

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIMENSION = 4
EXIT_NUMERIC = 5
EXIT_UNREADABLE = 6


class MissingInputError(FileNotFoundError):
    pass


DEFAULT_BLOCKS = {
    "rollout": {"speeds": list(DEFAULT_SPEEDS), "steps": 1000, "warmup": 200},
    "fixed_points": {"n_inits": 128, "lr": 0.01, "max_iters": 20000, "q_tol": 1e-10,
                     "merge_radius": 0.1, "tol_marginal": 0.005, "inflate": 0.25,
                     "field_extent": 1.0, "field_resolution": 11, "decay_steps": 200,
                     "decay_eps": 0.1},
    "perturb_neural": {"pc_indices": [1, 4], "magnitude": 2.0, "steps": 800, "sign": 1,
                       "t_apply": None},
    "perturb_physical": {"magnitude": 1.0, "duration_ms": 100.0, "t_apply": 200,
                         "steps_after": 1000},
    "grid": {"magnitudes": None, "durations": [100.0, 200.0], "n_agents": 100,
             "band": 0.2, "sustain_steps": 100, "horizon_steps": 1000},
    "compare": {"k_values": [4, 16]},
}
PATH_KEYS = ("weights", "basis", "dataset", "weights_k4", "weights_k16")
TOP_KEYS = {"paths", "env", "train", "seed"} | set(DEFAULT_BLOCKS)


@dataclasses.dataclass
class ExperimentConfig:
    paths: dict
    env: EnvConfig
    train: TrainConfig
    blocks: dict
    seed: int

    def resolved(self):
        return {"paths": self.paths, "env": self.env.to_dict(), "train": self.train.to_dict(),
                "seed": self.seed, **self.blocks}

    def digest(self):
        text = json.dumps(self.resolved(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_config(path=None, seed=None, overrides=None):
    """Parse and validate an experiment config; unknown keys are errors."""
    doc = {}
    if path is not None:
        if not os.path.exists(path):
            raise MissingInputError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a JSON object")
    unknown = set(doc) - TOP_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    paths = dict(doc.get("paths", {}))
    bad = set(paths) - set(PATH_KEYS)
    if bad:
        raise ConfigurationError(f"unknown path keys: {sorted(bad)}")
    for key, value in (overrides or {}).items():
        if value is not None:
            paths[key] = value
    for key, value in paths.items():
        if value is not None and not os.path.exists(value):
            raise MissingInputError(f"{key} file not found: {value}")
    blocks = {}
    for name, defaults in DEFAULT_BLOCKS.items():
        given = doc.get(name, {})
        extra = set(given) - set(defaults)
        if extra:
            raise ConfigurationError(f"unknown keys in '{name}': {sorted(extra)}")
        blocks[name] = {**defaults, **given}
    master = doc.get("seed", 0) if seed is None else seed
    train_block = dict(doc.get("train", {}))
    train_block.setdefault("seed", master)
    try:
        env = EnvConfig.from_dict(doc.get("env", {}))
        train_cfg = TrainConfig.from_dict(train_block)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    return ExperimentConfig(paths, env, train_cfg, blocks, int(master))


def _require(cfg, key):
    path = cfg.paths.get(key)
    if path is None:
        raise MissingInputError(f"this command needs paths.{key} (or --{key})")
    return path


def _meta(cfg, command):
    return {"tool": "ctdloco", "version": __version__, "command": command,
            "config_hash": cfg.digest(), "seed": cfg.seed}


def _header(cfg, command):
    m = _meta(cfg, command)
    return "# " + " ".join(f"{k}={v}" for k, v in m.items())


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def _net(cfg):
    return load_weights(_require(cfg, "weights"))


def _basis(cfg):
    return PCBasis.load(_require(cfg, "basis"))


def _check_basis(net, basis):
    if basis.dim != net.dims.state_size:
        raise ConfigurationError(
            f"basis dimension {basis.dim} != policy state size {net.dims.state_size}")


REQUIRED = {
    "rollout": ("weights",),
    "pca": ("dataset",),
    "fixed-points": ("weights", "basis"),
    "perturb-neural": ("weights", "basis"),
    "perturb-physical": ("weights",),
    "robustness-grid": ("weights",),
}


def preflight(cfg, command=None):
    """Parse every referenced input so that bad files fail before ``--out`` is touched."""
    for key in REQUIRED.get(command, ()):
        _require(cfg, key)
    net = basis = None
    for key in ("weights", "weights_k4", "weights_k16"):
        if cfg.paths.get(key):
            loaded = load_weights(cfg.paths[key])
            net = loaded if key == "weights" else net
    if cfg.paths.get("basis"):
        basis = PCBasis.load(cfg.paths["basis"])
    if net is not None and basis is not None:
        _check_basis(net, basis)
    if cfg.paths.get("dataset"):
        ds = RolloutDataset.from_csv(cfg.paths["dataset"])
        if net is not None and ds.states.shape[1] != net.dims.state_size:
            raise ConfigurationError(f"dataset dimension {ds.states.shape[1]} != policy "
                                     f"state size {net.dims.state_size}")


# commands ---------------------------------------------------------------------------


def cmd_train(cfg, out, threads=1):
    tc = cfg.train
    init = PolicyNet.random(tc.policy_dims(), seed=tc.seed)
    net, report = train(init, cfg.env, tc)
    weights = os.path.join(out, "weights.json")
    save_weights(net, weights)
    report.checkpoints.append(os.path.basename(weights))
    _write_json(os.path.join(out, "train_report.json"),
                {"metadata": _meta(cfg, "train"), "config": tc.to_dict(), **report.to_dict()})
    with open(os.path.join(out, "loss.csv"), "w") as fh:
        fh.write(_header(cfg, "train") + "\nepoch,mse\n")
        for i, v in enumerate(report.loss_curve):
            fh.write(f"{i},{v!r}\n")
    return {"weights": weights}


def cmd_rollout(cfg, out, threads=1):
    b = cfg.blocks["rollout"]
    ds = collect_rollouts(_net(cfg), cfg.env, b["speeds"], b["steps"], cfg.seed, b["warmup"])
    path = os.path.join(out, "dataset.csv")
    ds.to_csv(path, _header(cfg, "rollout"))
    return {"dataset": path}


def cmd_pca(cfg, out, threads=1):
    ds = RolloutDataset.from_csv(_require(cfg, "dataset"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RankDeficiencyWarning)
        basis = fit_pca(ds)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    path = os.path.join(out, "basis.json")
    _write_json(path, {"metadata": _meta(cfg, "pca"), **basis.to_dict()})
    with open(os.path.join(out, "variance.csv"), "w") as fh:
        fh.write(_header(cfg, "pca") + "\npc,variance,fraction,cumulative\n")
        for (i, f, c), var in zip(explained_variance_report(basis), basis.variances):
            fh.write(f"{i},{float(var)!r},{f!r},{c!r}\n")
    return {"basis": path}


def cmd_fixed_points(cfg, out, threads=1):
    net, basis = _net(cfg), _basis(cfg)
    _check_basis(net, basis)
    b = cfg.blocks["fixed_points"]
    states = None
    if cfg.paths.get("dataset"):
        states = RolloutDataset.from_csv(cfg.paths["dataset"]).states
    finder = FixedPointFinder(net, None, b["n_inits"], b["lr"], b["max_iters"], b["q_tol"],
                              b["merge_radius"], b["tol_marginal"], b["inflate"], cfg.seed)
    finder.fit(states)
    finder.save_report(os.path.join(out, "fixed_points.json"), _meta(cfg, "fixed-points"))
    header = _header(cfg, "fixed-points")
    write_eigenvalue_csv(os.path.join(out, "eigenvalues.csv"), finder.fixed_points_, header)
    x = zero_input_vector(net)
    for k, fp in enumerate(finder.fixed_points_):
        rows = local_gradient_field(net, x, fp.state, basis, b["field_extent"],
                                    b["field_resolution"])
        write_gradient_field_csv(os.path.join(out, f"gradient_field_{k}.csv"), rows, header)
        traj = decay_from(net, x, fp, b["decay_steps"], b["decay_eps"])
        write_decay_csv(os.path.join(out, f"decay_{k}.csv"), traj, fp.state, basis, header)
    return {"n_fixed_points": len(finder.fixed_points_)}


def cmd_perturb_neural(cfg, out, threads=1):
    net, basis = _net(cfg), _basis(cfg)
    _check_basis(net, basis)
    b = cfg.blocks["perturb_neural"]
    if b["t_apply"] is None:
        t_tan, t_orth, _ = pl.tangential_and_orthogonal_times(net, cfg.env, basis, 1,
                                                              seed=cfg.seed)
        times = {"tangential": t_tan, "orthogonal": t_orth}
    else:
        times = {"fixed": int(b["t_apply"])}
    header = _header(cfg, "perturb-neural")
    metrics = {}
    for pc in b["pc_indices"]:
        for label, t in times.items():
            spec = pl.NeuralPerturbationSpec(int(pc), float(b["magnitude"]), t, int(b["sign"]))
            pair = pl.neural_perturbation_experiment(net, cfg.env, basis, spec, b["steps"],
                                                     cfg.seed)
            name = f"pc{pc}_{label}"
            pl.write_trace_pair_csv(os.path.join(out, f"trace_{name}.csv"), basis, pair, header)
            metrics[name] = {"t_apply": t, "pc_index": int(pc),
                             "classification": pl.classify_tangentiality(
                                 pair.metrics["tangentiality_at_apply"]), **pair.metrics}
    _write_json(os.path.join(out, "neural_metrics.json"),
                {"metadata": _meta(cfg, "perturb-neural"), "experiments": metrics})
    return {"experiments": len(metrics)}


def cmd_perturb_physical(cfg, out, threads=1):
    net = _net(cfg)
    b = cfg.blocks["perturb_physical"]
    crit = pl.RecoveryCriterion(horizon_steps=int(b["steps_after"]))
    spec = pl.PhysicalPerturbationSpec(float(b["magnitude"]), float(b["duration_ms"]),
                                       int(b["t_apply"]))
    res = pl.physical_perturbation_trial(net, cfg.env, spec, cfg.seed, criterion=crit)
    nominal = pl.physical_perturbation_trial(net, cfg.env, dataclasses.replace(spec, magnitude=0.0),
                                             cfg.seed, criterion=crit)
    header = _header(cfg, "perturb-physical")
    write_trace_csv(os.path.join(out, "physical_trace.csv"), res.trace, 0, header)
    write_trace_csv(os.path.join(out, "physical_nominal.csv"), nominal.trace, 0, header)
    if cfg.paths.get("basis"):
        basis = _basis(cfg)
        _check_basis(net, basis)
        pair = pl.TracePair(nominal.trace, res.trace, spec)
        pl.write_trace_pair_csv(os.path.join(out, "physical_pcs.csv"), basis, pair, header)
    _write_json(os.path.join(out, "physical_metrics.json"),
                {"metadata": _meta(cfg, "perturb-physical"), "recovered": res.recovered,
                 "spec": dataclasses.asdict(spec)})
    return {"recovered": res.recovered}


def _grid(cfg, net, threads):
    b = cfg.blocks["grid"]
    crit = pl.RecoveryCriterion(b["band"], b["sustain_steps"], b["horizon_steps"])
    return pl.robustness_grid(net, cfg.env, b["magnitudes"], tuple(b["durations"]),
                              b["n_agents"], cfg.seed, threads, crit)


def cmd_robustness_grid(cfg, out, threads=1):
    rows = _grid(cfg, _net(cfg), threads)
    pl.write_grid_csv(os.path.join(out, "grid.csv"), rows, _header(cfg, "robustness-grid"))
    return {"cells": len(rows)}


def cmd_compare_bptt(cfg, out, threads=1):
    nets = {}
    for k in cfg.blocks["compare"]["k_values"]:
        if cfg.paths.get(f"weights_k{k}"):
            nets[k] = load_weights(cfg.paths[f"weights_k{k}"])
    b = cfg.blocks["grid"]
    table, nets = compare_truncation(cfg.env, cfg.train, tuple(cfg.blocks["compare"]["k_values"]),
                                     b["n_agents"], b["magnitudes"], tuple(b["durations"]),
                                     cfg.seed, threads, nets)
    header = _header(cfg, "compare-bptt")
    with open(os.path.join(out, "bptt_comparison.csv"), "w") as fh:
        fh.write(header + "\nk_trunc,recovery_area,cells,trials\n")
        for row in table:
            fh.write(f"{row['k_trunc']},{row['recovery_area']!r},{row['cells']},{row['trials']}\n")
    for k, net in nets.items():
        save_weights(net, os.path.join(out, f"weights_k{k}.json"))
    return {"table": [(r["k_trunc"], r["recovery_area"]) for r in table]}


COMMANDS = {
    "train": cmd_train,
    "rollout": cmd_rollout,
    "pca": cmd_pca,
    "fixed-points": cmd_fixed_points,
    "perturb-neural": cmd_perturb_neural,
    "perturb-physical": cmd_perturb_physical,
    "robustness-grid": cmd_robustness_grid,
    "compare-bptt": cmd_compare_bptt,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ctdloco", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=1, help="parallel workers")
        for key in ("weights", "basis", "dataset"):
            p.add_argument(f"--{key}", help=f"overrides paths.{key}")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigurationError("--seed must be a non-negative integer")
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        cfg = load_config(args.config, args.seed, {"weights": args.weights,
                                                   "basis": args.basis,
                                                   "dataset": args.dataset})
        preflight(cfg, args.command)
        os.makedirs(args.out, exist_ok=True)
        result = COMMANDS[args.command](cfg, args.out, args.threads)
    except MissingInputError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigurationError as exc:
        kind = "dimension mismatch" if "shape" in str(exc) or "dimension" in str(exc) \
            else "invalid config"
        print(f"error: {kind}: {exc}", file=sys.stderr)
        return EXIT_DIMENSION if kind == "dimension mismatch" else EXIT_CONFIG
    except WeightFileError as exc:
        print(f"error: unreadable file: {exc}", file=sys.stderr)
        return EXIT_UNREADABLE
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, default=lambda o: o.item() if isinstance(o, np.generic) else str(o)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
