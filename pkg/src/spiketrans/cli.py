"""Command-line entry point: train / eval / analyze / demo.

Configuration comes from flat ``key = value`` files with ``[scenario]``,
``[train]``, and ``[network]`` sections, overridable by flags; a flag that
contradicts the config file is an error naming the offending key.  The
``SPIKETRANS_SEED`` environment variable is the seed fallback when neither
a flag nor the config file sets one.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .analysis import (
    count_ops,
    energy_estimate,
    format_report,
    prop2_demo,
    record_density,
)
from .errors import ConfigError, SpiketransError, UsageError
from .lidar_image import LidarImageSpec, lidar_to_image, write_pgm
from .network import (
    NetworkSpec,
    build_from_checkpoint,
    count_network_flops,
    load_checkpoint,
    parameter_report,
)
from .sim import ACTIONS, ScenarioConfig, default_config, make_env, rollout
from .trainer import TrainConfig, evaluate, train

_SECTIONS = {
    "scenario": ScenarioConfig,
    "train": TrainConfig,
    "network": NetworkSpec,
}

# flag destination -> (section, key)
_FLAG_KEYS = {
    "scenario": ("scenario", "scenario"),
    "variant": ("network", "variant"),
    "steps": ("train", "total_steps"),
    "seed": ("train", "seed"),
    "lanes": ("scenario", "lanes"),
    "vehicles": ("scenario", "n_vehicles"),
    "episodes": ("train", "eval_episodes"),
}


def _coerce(raw: str, py_type):
    if py_type is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if py_type is int:
        return int(raw)
    if py_type is float:
        return float(raw)
    if py_type is tuple:
        return tuple(int(part) for part in raw.replace("(", "").replace(")", "").split(","))
    return raw


def _field_types(dc) -> dict:
    out = {}
    for f in dataclasses.fields(dc):
        origin = f.type if isinstance(f.type, type) else type(f.default)
        out[f.name] = origin
    return out


def load_config_file(path: str) -> dict:
    """Parse the sectioned key=value file into {section: {key: string}}."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        out[section] = dict(parser.items(section))
    return out


def _resolve_seed(args, file_cfg: dict) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in file_cfg.get("train", {}):
        return int(file_cfg["train"]["seed"])
    env_seed = os.environ.get("SPIKETRANS_SEED")
    if env_seed is not None:
        return int(env_seed)
    return None


def build_configs(args) -> tuple[ScenarioConfig, TrainConfig, NetworkSpec]:
    """Merge config file and flags; contradictions are errors naming the key."""
    file_cfg = load_config_file(args.config) if getattr(args, "config", None) else {}
    values = {section: {} for section in _SECTIONS}

    for section, raw_items in file_cfg.items():
        types = _field_types(_SECTIONS[section])
        for key, raw in raw_items.items():
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[section][key] = _coerce(raw, types[key])

    for flag, (section, key) in _FLAG_KEYS.items():
        given = getattr(args, flag, None)
        if given is None:
            continue
        if key in values[section] and values[section][key] != given:
            raise ConfigError(
                f"conflicting values for {section}.{key}: "
                f"--{flag} {given!r} vs config file {values[section][key]!r}"
            )
        values[section][key] = given

    seed = _resolve_seed(args, file_cfg)
    if seed is not None:
        values["train"].setdefault("seed", seed)
        values["scenario"].setdefault("seed", seed)

    scenario_name = values["scenario"].pop("scenario", "highway")
    scenario = default_config(scenario_name, **values["scenario"])
    train_cfg = TrainConfig(**values["train"])
    net_spec = NetworkSpec(**values["network"])
    return scenario, train_cfg, net_spec


# --------------------------------------------------------------------------
# Run manifest
# --------------------------------------------------------------------------


def _atomic_write_json(path: str, payload: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _manifest(out_dir: str, run_id: str, configs: dict, seeds: list) -> dict:
    return {
        "run_id": run_id,
        "code_version": __version__,
        "status": "running",
        "created_unix": time.time(),
        "seeds": seeds,
        "config": configs,
        "artifacts": {},
        "timings": {},
    }


def _config_snapshot(scenario, train_cfg, net_spec) -> dict:
    return {
        "scenario": dataclasses.asdict(scenario),
        "train": dataclasses.asdict(train_cfg),
        "network": dataclasses.asdict(net_spec),
    }


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    scenario, train_cfg, net_spec = build_configs(args)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    run_id = f"{scenario.scenario}-{net_spec.variant}-s{train_cfg.seed}"
    manifest_path = os.path.join(out_dir, "manifest.json")
    manifest = _manifest(out_dir, run_id, _config_snapshot(scenario, train_cfg, net_spec),
                         [train_cfg.seed])
    _atomic_write_json(manifest_path, manifest)

    def progress(step, total, loss):
        print(f"step {step}/{total} loss={loss if loss is not None else 'n/a'}", flush=True)

    result = train(train_cfg, scenario, net_spec, out_dir,
                   progress=progress if args.verbose else None)
    manifest["status"] = "complete"
    manifest["artifacts"] = {
        "metrics_csv": result.metrics_csv,
        "checkpoints": result.checkpoints,
    }
    manifest["timings"] = {"wall_seconds": result.wall_seconds}
    if result.last_eval is not None:
        manifest["final_eval"] = result.last_eval.as_dict()
    _atomic_write_json(manifest_path, manifest)
    print(format_report({
        "run_id": run_id,
        "steps": result.steps,
        "wall_seconds": result.wall_seconds,
        "final_loss": result.final_loss if result.final_loss is not None else "n/a",
        "metrics_csv": result.metrics_csv,
        "checkpoints": len(result.checkpoints),
    }, title="train"))
    return 0


def cmd_eval(args) -> int:
    scenario, train_cfg, _ = build_configs(args)
    ckpt = load_checkpoint(args.ckpt)
    net = build_from_checkpoint(ckpt)
    episodes = args.episodes or train_cfg.eval_episodes
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [train_cfg.seed]

    def run_one(seed: int):
        return seed, evaluate(net, scenario, n_episodes=episodes, seed=seed)

    if len(seeds) == 1:
        results = [run_one(seeds[0])]
    else:
        with ThreadPoolExecutor(max_workers=min(len(seeds), 8)) as pool:
            results = list(pool.map(run_one, seeds))
    for seed, metrics in results:
        print(format_report(metrics.as_dict(), title=f"eval seed={seed}"))
    return 0


def cmd_analyze(args) -> int:
    scenario, train_cfg, _ = build_configs(args)
    did_something = False
    if args.prop2:
        report = prop2_demo(seed=train_cfg.seed)
        witness = report.pop("witness")
        print(format_report(report, title="prop2"))
        print(format_report(witness, title="prop2 witness"))
        did_something = True
    if args.density or args.energy:
        if not args.ckpt:
            raise UsageError("--density/--energy need --ckpt")
        net = build_from_checkpoint(load_checkpoint(args.ckpt))
        if args.params:
            print(parameter_report(net))
        env = make_env(scenario, net.spec.frame_stack)
        observations = [env.reset()]
        for step in range(7):
            obs, _, done, _ = env.step(step % len(ACTIONS))
            observations.append(obs)
            if done:
                observations.append(env.reset())
                break
        stats = record_density(net, observations, encoder_seed=train_cfg.seed)
        if args.density:
            print(format_report({
                "layers": len(stats.per_layer),
                "total_events": stats.total_events,
                "total_element_steps": stats.total_element_steps,
                "mean_density": stats.mean_density,
            }, title="density"))
            if args.out:
                os.makedirs(args.out, exist_ok=True)
                csv_path = os.path.join(args.out, "density.csv")
                with open(csv_path, "w") as f:
                    f.write(stats.to_csv())
                print(f"density csv: {csv_path}")
        if args.energy:
            flops = count_network_flops(net.spec)
            report = energy_estimate(flops, stats.mean_density, net.spec.t_len)
            print(format_report(report.as_dict(), title="energy"))
        did_something = True
    elif args.params:
        if not args.ckpt:
            raise UsageError("--params needs --ckpt")
        net = build_from_checkpoint(load_checkpoint(args.ckpt))
        print(parameter_report(net))
        did_something = True
    if not did_something:
        raise UsageError("nothing to analyze: pass --prop2, --density, --energy, or --params")
    return 0


_CANNED_BEAMS = np.array(
    [[0.5, -5.0], [1.0, 0.0], [0.8, 2.0], [1.0, 0.0], [0.33, -3.0], [1.0, 0.0],
     [0.66, 1.5], [0.25, -1.0]] * 4,
    np.float32,
)


def _read_beams(path: str) -> np.ndarray:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.lower().startswith("distance"):
                continue
            parts = line.replace(",", " ").split()
            rows.append((float(parts[0]), float(parts[1])))
    if not rows:
        raise ConfigError(f"no beams parsed from {path}")
    return np.array(rows, np.float32)


def cmd_demo(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.lidar_image:
        beams = _read_beams(args.beams) if args.beams else _CANNED_BEAMS
        spec = LidarImageSpec()
        img = lidar_to_image(beams, args.ego_speed, args.ego_heading, spec)
        pgm = os.path.join(args.out, "lidar_image.pgm")
        write_pgm(pgm, img[0])
        print(format_report({
            "beams": len(beams),
            "grid_side": spec.grid_side,
            "output": pgm,
        }, title="lidar-image demo"))
        return 0
    if args.env_rollout:
        scenario, train_cfg, _ = build_configs(args)
        env = make_env(scenario)
        rng = np.random.Generator(np.random.Philox(key=np.array(
            [train_cfg.seed & ((1 << 64) - 1), 0xDE30], dtype=np.uint64)))

        def policy(obs, step):
            return int(rng.integers(len(ACTIONS)))

        pgm_dir = args.out if args.dump_pgm else None
        csv_path = os.path.join(args.out, "trajectory.csv")
        rows = rollout(env, policy, args.steps, csv_path=csv_path,
                       pgm_dir=pgm_dir, pgm_every=args.pgm_every)
        print(format_report({
            "steps": len(rows),
            "trajectory_csv": csv_path,
            "pgm_dumped": bool(pgm_dir),
        }, title="rollout demo"))
        return 0
    raise UsageError("demo needs --lidar-image or --env-rollout")


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spiketrans",
        description="Train, evaluate, and analyze spiking multi-modal Q-networks.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", choices=("highway", "roundabout"), default=None)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--lanes", type=int, default=None)
        p.add_argument("--vehicles", type=int, default=None)

    p_train = sub.add_parser("train", help="run the Q-learning loop")
    common(p_train)
    p_train.add_argument("--variant",
                         choices=("dense", "ssa", "ttsa", "unimodal4", "unimodal1"),
                         default=None)
    p_train.add_argument("--steps", type=int, default=None)
    p_train.add_argument("--episodes", type=int, default=None, help="eval episodes")
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--verbose", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--episodes", type=int, default=None)
    p_eval.add_argument("--seeds", default=None, help="comma list; fans out over threads")
    p_eval.set_defaults(func=cmd_eval)

    p_an = sub.add_parser("analyze", help="density / energy / alignment analyses")
    common(p_an)
    p_an.add_argument("--ckpt", default=None)
    p_an.add_argument("--density", action="store_true")
    p_an.add_argument("--energy", action="store_true")
    p_an.add_argument("--prop2", action="store_true")
    p_an.add_argument("--params", action="store_true", help="parameter-count report")
    p_an.add_argument("--episodes", type=int, default=None)
    p_an.add_argument("--out", default=None)
    p_an.set_defaults(func=cmd_analyze)

    p_demo = sub.add_parser("demo", help="artifact demos: rasters and rollouts")
    common(p_demo)
    p_demo.add_argument("--lidar-image", action="store_true")
    p_demo.add_argument("--beams", default=None, help="CSV of distance,velocity rows")
    p_demo.add_argument("--ego-speed", type=float, default=25.0)
    p_demo.add_argument("--ego-heading", type=float, default=0.0)
    p_demo.add_argument("--env-rollout", action="store_true")
    p_demo.add_argument("--steps", type=int, default=20)
    p_demo.add_argument("--dump-pgm", action="store_true")
    p_demo.add_argument("--pgm-every", type=int, default=1)
    p_demo.add_argument("--out", required=True)
    p_demo.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpiketransError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
