"""Command-line entry point ``aigc-edge-sim``.

Every subcommand takes ``--config``, ``--seed`` and ``--out``; outputs are
deterministic for a given seed. ``AES_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import d3pg as d3
from .approx import load_mlp, save_mlp
from .channel import PAPER_FORM_NOTE, ChannelParams, ber_table_rows
from .errors import AigcSimError
from .genmodel import build_demo_dataset, expert_policy, load_catalog, make_demo_prompts
from .harness import (
    _catalog_file,
    _dumps,
    fitted_quality,
    load_default_config,
    parse_config,
    run_experiment,
    seed_stream,
    single_round_cells,
)
from .imitation import IrlPolicy, baseline_replay_utility, default_policy, empirical_policy, train_irl
from .provision import ServiceEnv, brute_force_oracle, make_state

log = logging.getLogger("aigc_edge_sim")


def _load(args):
    if args.config:
        cfg = parse_config(args.config)
        base = Path(args.config).parent
    else:
        cfg, base = load_default_config(), None
    if args.seed is not None:
        cfg.seeds = [args.seed]
    return cfg, base


def _out(args, cfg) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in r])


def _demos(cfg, base, seed):
    catalog = load_catalog(_catalog_file(cfg, base))
    rng = seed_stream(seed, "channel")
    prompts = make_demo_prompts(cfg.demos.n_prompts, catalog, rng)
    ds = build_demo_dataset(prompts, catalog, cfg.demos.power_grid, cfg.channel, rng, cfg.demos.distance,
                            cfg.qoe.kappa)
    return catalog, prompts, ds


def _strategy_fn(args, cfg):
    if getattr(args, "irl_policy", None):
        return IrlPolicy(load_mlp(args.irl_policy), cfg.channel.p_total, cfg.irl.history)
    return None


def _scenario(args, cfg):
    if getattr(args, "scenario", None):
        doc = json.loads(Path(args.scenario).read_text(encoding="utf-8"))
        cfg.users = doc["users"]
        if "channel" in doc:
            cfg.channel = ChannelParams(**doc["channel"])
    return cfg


def cmd_channel(args) -> int:
    if args.what != "ber-table":
        raise SystemExit(f"unknown channel command {args.what!r}")
    cfg, _ = _load(args)
    out = _out(args, cfg)
    rows = ber_table_rows([0.5, 1.0, 2.0, 4.0], list(range(0, 31, 5)))
    _write_csv(out / "ber_table.csv", ["m", "snr_db", "ber_numeric", "ber_closed_paper"], rows)
    (out / "ber_note.txt").write_text(PAPER_FORM_NOTE + "\n", encoding="utf-8")
    for m, db, num, printed in rows:
        print(f"m={m:g} snr_db={db:g} numeric={num:.6e} printed_form={printed:.6e}")
    print(PAPER_FORM_NOTE)
    return 0


def cmd_build_demos(args) -> int:
    cfg, base = _load(args)
    out = _out(args, cfg)
    _, _, ds = _demos(cfg, base, cfg.seeds[0])
    ds.write(out / "demos.ndjson")
    print(json.dumps({"records": len(ds.records), "prompts": len(ds.prompts), "path": str(out / "demos.ndjson")}))
    return 0


def cmd_train_irl(args) -> int:
    cfg, base = _load(args)
    out = _out(args, cfg)
    seed = cfg.seeds[0]
    catalog, _, ds = _demos(cfg, base, seed)
    expert = expert_policy(ds)
    res = train_irl(ds, expert, cfg.irl, seed_stream(seed, "irl"), cfg.channel.p_total, catalog.n_strategies)
    _write_csv(out / "irl_curve.csv", ["epoch", "disc_loss", "gen_reward", "expert_match_rate", "utility"],
               [[r["epoch"], r["disc_loss"], r["gen_reward"], r["expert_match_rate"], r["utility"]] for r in res.curve])
    save_mlp(res.policy.net, out / "irl_policy.json")
    summary = {"expert_match_rate": res.curve[-1]["expert_match_rate"], "utility": res.curve[-1]["utility"],
               **{f"utility_{w}": baseline_replay_utility(ds, expert, w) for w in ("empirical", "random", "default")}}
    (out / "irl_summary.json").write_text(_dumps(summary), encoding="utf-8")
    print(_dumps(summary), end="")
    return 0


def _env(args, cfg, base):
    cfg = _scenario(args, cfg)
    catalog = load_catalog(_catalog_file(cfg, base))
    state = make_state(cfg.users, cfg.channel)
    return ServiceEnv(state, catalog, cfg.channel, cfg.qoe, strategy_fn=_strategy_fn(args, cfg))


def cmd_train_d3pg(args) -> int:
    cfg, base = _load(args)
    out = _out(args, cfg)
    env = _env(args, cfg, base)
    dcfg = cfg.d3pg
    if args.episodes is not None:
        dcfg = d3.D3pgConfig(**{**dcfg.to_dict(), "episodes": args.episodes})
    res = d3.train_d3pg(env, dcfg, seed_stream(cfg.seeds[0], "d3pg"))
    keys = ["episode", "reward", "qoe_sum", "cost_sum", "constraint_violations"]
    _write_csv(out / "d3pg_curve.csv", keys, [[r[k] for k in keys] for r in res.curve])
    save_mlp(res.actor.net, out / "d3pg_actor.json")
    summary = {"greedy_reward": res.greedy_reward, "greedy_action": res.greedy_action.to_dict()}
    (out / "d3pg_summary.json").write_text(_dumps(summary), encoding="utf-8")
    print(_dumps(summary), end="")
    return 0


def cmd_oracle(args) -> int:
    cfg, base = _load(args)
    out = _out(args, cfg)
    res = brute_force_oracle(_env(args, cfg, base))
    doc = {"action": res.action.to_dict(), "reward": res.reward, "n_evaluated": res.n_evaluated}
    (out / "oracle.json").write_text(_dumps(doc), encoding="utf-8")
    print(_dumps(doc), end="")
    return 0


def cmd_rounds(args) -> int:
    cfg, base = _load(args)
    out = _out(args, cfg)
    seed = cfg.seeds[0]
    catalog, prompts, ds = _demos(cfg, base, seed)
    policies = {"raw": default_policy(), "empirical": empirical_policy()}
    fn = _strategy_fn(args, cfg)
    if fn is None:
        fn = train_irl(ds, expert_policy(ds), cfg.irl, seed_stream(seed, "irl"), cfg.channel.p_total,
                       catalog.n_strategies).policy
    policies["irl"] = fn
    rs = cfg.rounds
    rng = seed_stream(seed, "rounds")
    doc = {}
    for name, pol in policies.items():
        mean, std = fitted_quality(pol, prompts, catalog, cfg.channel, rs.samples, rng, cfg.demos.distance,
                                   cfg.qoe.kappa)
        doc[name] = {"mean": mean, "std": std,
                     "single_round_cells": single_round_cells(mean, std, rs.q_values, rs.n_values, rs.confidence)}
    (out / "rounds.json").write_text(_dumps(doc), encoding="utf-8")
    print(_dumps(doc), end="")
    return 0


def cmd_run(args) -> int:
    cfg, base = _load(args)
    summary = run_experiment(cfg, _out(args, cfg), base)
    print(_dumps({k: v for k, v in summary.items() if k != "seeds"}), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aigc-edge-sim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON (default: packaged config)")
        p.add_argument("--seed", type=int, help="override the config's seed list with one seed")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        return p

    p = common(sub.add_parser("channel", help="channel utilities"))
    p.add_argument("what", choices=["ber-table"])
    p.set_defaults(func=cmd_channel)
    common(sub.add_parser("build-demos", help="write the demonstration dataset")).set_defaults(func=cmd_build_demos)
    common(sub.add_parser("train-irl", help="train the imitation policy")).set_defaults(func=cmd_train_irl)
    p = common(sub.add_parser("train-d3pg", help="train the diffusion provisioning policy"))
    p.add_argument("--scenario", help="JSON with 'users' (and optional 'channel')")
    p.add_argument("--irl-policy", help="saved IRL policy network for strategy selection")
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_train_d3pg)
    p = common(sub.add_parser("oracle", help="exhaustive best action over the discretized grid"))
    p.add_argument("--scenario")
    p.add_argument("--irl-policy")
    p.set_defaults(func=cmd_oracle)
    p = common(sub.add_parser("rounds", help="service-round grid analysis"))
    p.add_argument("--irl-policy")
    p.set_defaults(func=cmd_rounds)
    common(sub.add_parser("run", help="full experiment")).set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("AES_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AigcSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("failed: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
