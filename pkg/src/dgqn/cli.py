"""Command-line entry point: ``dgqn train | eval | simulate | describe``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from dgqn import sim
from dgqn.baselines import CONTROLLER_KINDS, MODEL_KINDS, make_model, model_class, model_from_config
from dgqn.evaluation import episode_seed, evaluate
from dgqn.model import describe, load_params, model_config_for
from dgqn.network import NetworkError, resolve_network
from dgqn.numerics import CheckpointError
from dgqn.trainer import ConfigError, RunConfig, load_run_config, full_scale_config, thread_cap, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
DESK_EVAL_EPISODES = 20

log = logging.getLogger("dgqn")


class UsageError(Exception):
    pass


def _positive(value: str) -> int:
    n = int(value)
    if n <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgqn", description="Graph Q-network traffic signal control")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model with asynchronous actor-learners")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--network", help="network JSON path or builtin name (grid2x2, seoul15)")
    t.add_argument("--model", choices=MODEL_KINDS)
    t.add_argument("--episodes", type=_positive, help="max training episodes per actor")
    t.add_argument("--actors", type=_positive)
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir")
    t.add_argument("--paper-scale", action="store_true", help="seoul15 with the full-scale hyper-parameters")

    e = sub.add_parser("eval", help="evaluate a checkpoint or the fixed plans with greedy episodes")
    e.add_argument("--checkpoint", help="trained checkpoint (omit with --model fixed)")
    e.add_argument("--model", choices=CONTROLLER_KINDS, help="'fixed' evaluates the fixed-time plans")
    e.add_argument("--network", default=None)
    e.add_argument("--episodes", type=int, default=DESK_EVAL_EPISODES)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out-dir", default="runs/eval")
    e.add_argument("--paper-scale", action="store_true")
    e.add_argument("--stop-on-terminal", action="store_true",
                   help="end episodes at a jammed entry or the delay threshold, as in training")

    s = sub.add_parser("simulate", help="run one episode and write the per-tick event log")
    s.add_argument("--network", default="grid2x2")
    s.add_argument("--controller", default="fixed", help="fixed, all_green, or a checkpoint path")
    s.add_argument("--checkpoint", help="same as --controller <path>")
    s.add_argument("--duration", type=_positive, default=None, help="simulated seconds (default the episode horizon)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", default="runs/simulate")
    s.add_argument("--zero-demand", action="store_true", help="scale every entry volume to zero")

    d = sub.add_parser("describe", help="parameter counts and model configuration")
    d.add_argument("--checkpoint")
    d.add_argument("--model", choices=MODEL_KINDS, default="dgqn")
    d.add_argument("--network", default="grid2x2")
    d.add_argument("--config", help="JSON run config (its network and model are used)")
    d.add_argument("--json", action="store_true", help="print JSON instead of text")
    return p


# ------------------------------------------------------------------ helpers


def _network(spec: str):
    try:
        return resolve_network(spec)
    except FileNotFoundError as exc:
        raise UsageError(f"network file not found: {spec}") from exc
    except NetworkError as exc:
        raise UsageError(f"invalid network {spec}: {exc}") from exc
    except OSError as exc:
        raise UsageError(f"cannot read network {spec}: {exc}") from exc


def _load_checkpoint(path: str, network):
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        config, store, _, meta = load_params(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    try:
        model = model_from_config(config, network)
    except ValueError as exc:
        raise UsageError(f"checkpoint {path} does not fit network {network.name}: {exc}") from exc
    missing = set(model.init_params(0).names()) ^ set(store.names())
    if missing:
        raise UsageError(f"checkpoint {path} parameter names do not match a {config.kind} model: {sorted(missing)}")
    return model, store, meta


# ------------------------------------------------------------------ subcommands


def cmd_train(args) -> int:
    if args.config:
        config = load_run_config(args.config)
    elif args.paper_scale:
        config = full_scale_config()
    else:
        config = RunConfig()
    overrides = {}
    for key, attr in (("network", "network"), ("model", "model"), ("actors", "actors"),
                      ("seed", "seed"), ("out_dir", "out_dir")):
        value = getattr(args, attr)
        if value is not None:
            overrides[key] = value
    if overrides:
        config = replace(config, **overrides)
    if args.episodes is not None:
        config = replace(config, hyper=replace(config.hyper, max_episodes=args.episodes))
    thread_cap()  # validate the environment before writing anything
    network = _network(config.network)

    def progress(e):
        log.info("actor %d episode %d: mean reward %.3f, delay %.1f h, %s, eps %.3f",
                 e.actor_id, e.episode, e.mean_reward, e.total_delay_h, e.termination_cause, e.epsilon)

    result = train(config, network=network, progress=progress)
    print(f"trained {config.model} on {network.name}: {len(result.episodes)} episodes, "
          f"{result.shared.updates} updates, outputs in {result.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.episodes <= 0:
        raise UsageError("--episodes must be positive")
    default_net = "seoul15" if args.paper_scale else "grid2x2"
    network = _network(args.network or default_net)
    if args.checkpoint:
        model, store, meta = _load_checkpoint(args.checkpoint, network)
        params = store.params
        sim_cfg = sim.SimConfig(**meta["run"]["sim"]) if "run" in meta else sim.SimConfig()
        name = model.kind
    elif args.model == "fixed":
        model, params, sim_cfg, name = None, None, sim.SimConfig(), "fixed"
    else:
        raise UsageError("eval needs --checkpoint, or --model fixed for the fixed-time plans")
    report = evaluate(network, args.episodes, args.seed, model, params, sim_cfg, name=name,
                      run_to_horizon=not args.stop_on_terminal)
    jpath, cpath = report.write(args.out_dir, stem=f"eval_{name}")
    agg = report.aggregates()
    print(f"{name} on {network.name}: mean total delay {agg['mean_total_delay_h']:.2f} h "
          f"(sd {agg['std_total_delay_h']:.2f}), mean max queue {agg['mean_max_queue_m']:.1f} m "
          f"over {agg['episodes']} episodes; wrote {jpath} and {cpath}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    network = _network(args.network)
    controller = args.checkpoint or args.controller
    model = params = None
    if controller not in ("fixed", "all_green"):
        model, store, _ = _load_checkpoint(controller, network)
        params = store.params
    cfg = sim.SimConfig()
    if args.duration is not None:
        if args.duration <= cfg.t_initial_s or args.duration % cfg.delta_t_s:
            raise UsageError(f"--duration must exceed {cfg.t_initial_s} s and be a multiple of {cfg.delta_t_s} s")
        cfg = replace(cfg, t_max_s=args.duration)
    if args.zero_demand:
        network = _zero_demand(network)

    rng = np.random.default_rng(episode_seed(args.seed, 0))
    state = sim.reset(network, cfg, rng=rng)
    state.event_log = []
    history = [state.last_observation]
    rows = []
    all_green = np.ones(network.N, dtype=bool)
    while True:
        clock0 = state.clock_s
        if controller == "fixed":
            obs = sim.run_fixed_interval(state)
        elif controller == "all_green":
            sim._maybe_perturb(state)
            for _ in range(cfg.delta_t_s):
                sim.step_second(state, all_green)
            obs = sim.measure(state)
        else:
            from dgqn.model import build_state, greedy_joint_action, q_values

            S = build_state(history, model.config)
            action, _ = greedy_joint_action(q_values(model, S, params))
            obs = sim.apply_joint_action(state, action)
            history = (history + [obs])[-model.config.n_lags:]
        rows.append({"interval": len(rows), "start_s": clock0, "end_s": obs.clock_s,
                     "delay_veh_s": obs.total_delay_s, "max_queue_m": obs.max_queue_m})
        done, cause = sim.is_terminal(state)
        if done:
            break
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim.write_event_log(state, out / "events.csv")
    with open(out / "intervals.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    total_h = sum(r["delay_veh_s"] for r in rows) / 3600.0
    print(f"{controller} on {network.name}: {len(rows)} intervals, total delay {total_h:.2f} h, ended by {cause}; "
          f"wrote {out / 'events.csv'}")
    return EXIT_OK


def _zero_demand(network):
    from dgqn.network import RoadNetwork

    lgs = tuple(replace(lg, entry_volume_vph=0.0) for lg in network.lane_groups)
    return RoadNetwork(lgs, network.intersections, name=network.name, notes=network.notes)


def format_description(d: dict) -> str:
    lines = [f"model: {d['kind']}", "parameters by group:"]
    for group, n in d["parameter_counts"].items():
        lines.append(f"  {group:<10} {n:>10,d}")
    lines.append(f"  {'total':<10} {d['total_parameters']:>10,d}")
    lines.append("tensors:")
    for name, shape in d["shapes"].items():
        lines.append(f"  {name:<12} {'x'.join(map(str, shape))}")
    c = d["config"]
    lines.append(f"config: N={c['n_lane_groups']} P={c['n_features']} L={c['n_lags']} I={c['n_intersections']} "
                 f"phases={c['n_phases']} M={c['embed_dim']} activation={c['activation']}")
    lines.append(f"gamma={c['gamma']} delay cap={c['delay_cap_s']} veh*s queue cap={c['queue_cap_veh']} veh")
    return "\n".join(lines)


def cmd_describe(args) -> int:
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        try:
            config, store, _, meta = load_params(args.checkpoint)
        except CheckpointError as exc:
            raise UsageError(str(exc)) from exc
        feasible = np.array(meta.get("feasible", np.ones((config.n_intersections, config.n_phases))), dtype=bool)
        # describe only needs shapes, so an identity mask stands in for the network
        model = model_class(config.kind)(config, np.eye(config.n_lane_groups), feasible)
    else:
        kind, net_spec = args.model, args.network
        if args.config:
            rc = load_run_config(args.config)
            kind, net_spec = rc.model, rc.network
        network = _network(net_spec)
        model = make_model(kind, network, model_config_for(network, kind))
        store = model.init_params(0)
    d = describe(model, store)
    print(json.dumps(d, indent=2) if args.json else format_description(d))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "simulate": cmd_simulate, "describe": cmd_describe}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures surface as exit 3 with the message
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
