"""Command-line front end.

Exit codes: 0 success, 1 usage/configuration error, 2 numerical abort
(singular ZF Gram matrix), 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .beamforming import SingularChannelError
from .channel import FormatError, generate_batch, load_batch, save_batch, split_seed
from .codebook import (
    beam_response_map, format_beam_map, init_phase_matrix, load_phase_matrix,
    save_phase_matrix, synthesize, uniform_polar_codebook,
)
from .config import ConfigError, RunConfig, load_config
from .grad import per_sample_rates
from .meta import Task, TaskError, adapt_and_evaluate, build_tasks, meta_train
from .train import TrainingAborted, save_history, train_codebook

log = logging.getLogger("nfcodebook")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def resolve_seed(args, cfg: RunConfig) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("NF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"NF_SEED must be an integer, got {env!r}") from None
    return int(cfg["seed"])


def _out_path(cfg: RunConfig, path: str) -> Path:
    p = Path(path)
    if not p.is_absolute():
        p = Path(cfg["output_dir"]) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _check_shape(theta, cfg: RunConfig, what: str):
    n = cfg.geometry.n_elements
    if theta.n != n:
        raise UsageError(f"{what} is {theta.n} x {theta.n} but the configured array has N = {n}")


def cmd_gen_data(args, cfg: RunConfig) -> int:
    seed = resolve_seed(args, cfg)
    count = cfg["dataset_size"] if args.count is None else args.count
    batch = generate_batch(cfg.geometry, cfg.scenario(args.scenario), int(count), np.random.default_rng(seed))
    save_batch(_out_path(cfg, args.out), batch)
    print(f"wrote {len(batch)} channel matrices (N={batch.n_antennas}, K={batch.n_users}) to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    seed = resolve_seed(args, cfg)
    dataset = load_batch(args.data)
    geom = cfg.geometry
    if dataset.n_antennas != geom.n_elements:
        raise UsageError(f"dataset has N = {dataset.n_antennas}, config has N = {geom.n_elements}")
    rng = np.random.default_rng(seed)
    init = _initial_phases(cfg, rng)
    result = train_codebook(cfg.train_config(seed), dataset, init, cfg.n_chains, cfg.p_max,
                            cfg.noise_power, rng, progress=args.verbose)
    save_phase_matrix(_out_path(cfg, args.out), result.theta)
    hist = args.history or str(Path(args.out).with_suffix(".loss.csv"))
    save_history(_out_path(cfg, hist), result.history)
    print(f"final batch loss {result.history[-1]:.6f}; phases written to {args.out}")
    return EXIT_OK


def _initial_phases(cfg: RunConfig, rng):
    strategy = cfg["init"]
    if strategy == "polar-seeded":
        return init_phase_matrix(strategy, cfg.geometry, rng, **cfg.baseline_grid())
    return init_phase_matrix(strategy, cfg.geometry, rng)


def _load_tasks(directory: Path) -> list[Task]:
    tasks = []
    i = 0
    while (directory / f"task{i:04d}_support.nfcb").exists():
        tasks.append(Task(load_batch(directory / f"task{i:04d}_support.nfcb"),
                          load_batch(directory / f"task{i:04d}_query.nfcb")))
        i += 1
    return tasks


def _save_tasks(directory: Path, tasks) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(tasks):
        save_batch(directory / f"task{i:04d}_support.nfcb", t.support)
        save_batch(directory / f"task{i:04d}_query.nfcb", t.query)


def cmd_meta_train(args, cfg: RunConfig) -> int:
    seed = resolve_seed(args, cfg)
    geom = cfg.geometry
    # tasks get their own stream so stored and rebuilt tasks train identically
    rng = np.random.default_rng(seed)
    tasks = _load_tasks(Path(args.tasks_dir)) if args.tasks_dir else []
    if not tasks:
        tasks = build_tasks(geom, cfg.meta_family(), int(cfg["n_tasks"]), int(cfg["support_size"]),
                            int(cfg["query_size"]), split_seed(seed, 1))
        if args.tasks_dir:
            _save_tasks(Path(args.tasks_dir), tasks)
    elif tasks[0].support.n_antennas != geom.n_elements:
        raise UsageError("stored tasks do not match the configured array size")
    init = _initial_phases(cfg, rng)
    result = meta_train(cfg.meta_config(seed), tasks, init, cfg.n_chains, cfg.p_max, cfg.noise_power, rng)
    save_phase_matrix(_out_path(cfg, args.out), result.omega)
    hist = args.history or str(Path(args.out).with_suffix(".meta.csv"))
    save_history(_out_path(cfg, hist), result.history, key="epoch", value_name="meta_loss")
    print(f"final meta loss {result.history[-1]:.6f}; omega written to {args.out}")
    return EXIT_OK


def _parse_sweep(spec: str) -> list[int]:
    try:
        key, rng = spec.split("=")
        lo, hi = rng.split("..")
        values = list(range(int(lo), int(hi) + 1))
    except ValueError:
        raise UsageError(f"bad --sweep {spec!r}; expected users=LO..HI") from None
    if key != "users" or not values or values[0] < 1:
        raise UsageError(f"bad --sweep {spec!r}; only users=LO..HI with LO >= 1 is supported")
    return values


def evaluate_rates(cfg: RunConfig, theta, scenario, n_samples: int, seed: int) -> np.ndarray:
    """Per-sample sum-rates on a fresh batch; chains are raised to K when K > M."""
    batch = generate_batch(cfg.geometry, scenario, n_samples, np.random.default_rng(seed))
    chains = max(cfg.n_chains, scenario.n_users)
    return per_sample_rates(theta, batch, chains, cfg.p_max, cfg.noise_power,
                            max_condition=float(cfg["max_condition"]), on_singular="zero")


def cmd_eval(args, cfg: RunConfig) -> int:
    seed = resolve_seed(args, cfg)
    theta = load_phase_matrix(args.theta)
    _check_shape(theta, cfg, "phase matrix")
    scenario = cfg.scenario(args.scenario)
    n = int(cfg["eval_size"] if args.samples is None else args.samples)
    codebooks = [("learned", theta)]
    if args.baseline == "uniform":
        codebooks.append(("uniform", uniform_polar_codebook(cfg.geometry, **cfg.baseline_grid())))
    users = _parse_sweep(args.sweep) if args.sweep else [scenario.n_users]
    header = ["users"] + [f"{name}_{stat}" for name, _ in codebooks for stat in ("mean", "std")]
    lines = [",".join(header)]
    for k in users:
        sc = replace(scenario, n_users=k)
        row = [str(k)]
        for _, th in codebooks:
            r = evaluate_rates(cfg, th, sc, n, seed)
            row += [f"{r.mean():.17g}", f"{r.std():.17g}"]
        lines.append(",".join(row))
    report = "\n".join(lines) + "\n"
    if args.out:
        _out_path(cfg, args.out).write_text(report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_adapt(args, cfg: RunConfig) -> int:
    seed = resolve_seed(args, cfg)
    omega = load_phase_matrix(args.omega)
    _check_shape(omega, cfg, "omega")
    steps = int(cfg["inner_steps"] if args.steps is None else args.steps)
    rate = float(cfg["inner_rate"] if args.rate is None else args.rate)
    mean, psi = adapt_and_evaluate(
        omega, cfg.scenario(args.scenario), steps, rate, int(cfg["eval_size"]), cfg.geometry,
        cfg.n_chains, cfg.p_max, cfg.noise_power, np.random.default_rng(seed),
        support_size=int(cfg["support_size"]), optimizer=cfg["inner_optimizer"],
    )
    save_phase_matrix(_out_path(cfg, args.out), psi)
    print(f"adapted_mean_sum_rate={mean:.17g}")
    return EXIT_OK


def _parse_axis(text: str, name: str, degrees: bool) -> np.ndarray:
    try:
        lo, hi, count = text.split(":")
        vals = np.linspace(float(lo), float(hi), int(count))
    except ValueError:
        raise UsageError(f"bad {name} axis {text!r}; expected MIN:MAX:COUNT") from None
    return np.deg2rad(vals) if degrees else vals


def cmd_beam_map(args, cfg: RunConfig) -> int:
    theta = load_phase_matrix(args.theta)
    _check_shape(theta, cfg, "phase matrix")
    try:
        beams = [int(b) for b in args.beams.split(",")]
    except ValueError:
        raise UsageError(f"bad --beams {args.beams!r}") from None
    az = _parse_axis(args.azimuth, "azimuth", degrees=True)
    dist = _parse_axis(args.distance, "distance", degrees=False)
    try:
        rows = beam_response_map(cfg.geometry, synthesize(theta), beams, az, dist)
    except IndexError as exc:
        raise UsageError(str(exc)) from None
    _out_path(cfg, args.out).write_text(format_beam_map(rows))
    print(f"wrote {len(rows)} beam map rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML experiment config")
    common.add_argument("--seed", type=int, default=None, help="overrides NF_SEED and the config seed")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="nfcb", description="Near-field learned codebook experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a channel dataset (NFCB)")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--scenario")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a codebook on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("meta-train", parents=[common], help="meta-train an initialisation")
    p.add_argument("--tasks-dir", help="load tasks from here, or store freshly built ones")
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("eval", parents=[common], help="report sum-rate statistics")
    p.add_argument("--theta", required=True)
    p.add_argument("--scenario")
    p.add_argument("--samples", type=int)
    p.add_argument("--sweep", help="users=LO..HI")
    p.add_argument("--baseline", choices=["uniform"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("adapt", parents=[common], help="adapt omega to a scenario")
    p.add_argument("--omega", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--rate", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("beam-map", parents=[common], help="export beam responses as CSV")
    p.add_argument("--theta", required=True)
    p.add_argument("--beams", required=True, help="comma-separated beam indices")
    p.add_argument("--azimuth", default="-60:60:121", help="MIN_DEG:MAX_DEG:COUNT")
    p.add_argument("--distance", default="0.1:1.0:46", help="MIN_M:MAX_M:COUNT")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_beam_map)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        with threadpool_limits(limits=args.threads):
            return args.func(args, cfg)
    except (ConfigError, UsageError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularChannelError, TrainingAborted, TaskError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
