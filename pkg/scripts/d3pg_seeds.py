"""Train the diffusion actor and the Gaussian ablation over several seeds.

Writes one CSV row per (actor, seed) with the greedy reward and mean power shares,
plus the oracle and static rewards for reference.

    python3 scripts/d3pg_seeds.py --scenario configs/scenario_q1.json --episodes 2000
"""

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from aigc_edge_sim import d3pg as d3
from aigc_edge_sim.harness import load_default_config, parse_config
from aigc_edge_sim.genmodel import load_catalog
from aigc_edge_sim.provision import ServiceEnv, brute_force_oracle, make_state, static_baseline


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--scenario", help="JSON with a 'users' list (default: the config's users)")
    ap.add_argument("--episodes", type=int, default=5000)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--kinds", nargs="+", default=["diffusion", "gaussian"])
    ap.add_argument("--out", default="runs/d3pg_seeds.csv")
    args = ap.parse_args(argv)

    cfg = parse_config(args.config) if args.config else load_default_config()
    users = json.loads(Path(args.scenario).read_text())["users"] if args.scenario else cfg.users
    state = make_state(users, cfg.channel)
    env = ServiceEnv(state, load_catalog(), cfg.channel, cfg.qoe)
    oracle = brute_force_oracle(env)
    static = env.expected_reward(static_baseline(state, cfg.qoe))
    print(f"oracle n={oracle.action.n.tolist()} p={np.round(oracle.action.p, 3).tolist()} "
          f"reward={oracle.reward:.4f} static={static:.4f}")

    rows = []
    for kind in args.kinds:
        for seed in range(args.seeds):
            t0 = time.perf_counter()
            dcfg = d3.D3pgConfig(**{**cfg.d3pg.to_dict(), "episodes": args.episodes, "actor_kind": kind})
            res = d3.train_d3pg(env, dcfg, np.random.default_rng(seed))
            raws = d3.act(res.actor, np.tile(state.encode(), (16, 1)), np.random.default_rng(99))
            share = np.mean([d3.decode_action(r, env.n_users, cfg.qoe.n_max, state.p_total).p for r in raws],
                            axis=0) / state.p_total
            rows.append([kind, seed, res.greedy_reward, oracle.reward, static, *share])
            print(f"{kind} seed={seed} greedy={res.greedy_reward:.4f} share={np.round(share, 3).tolist()} "
                  f"({time.perf_counter() - t0:.1f}s)", flush=True)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["actor", "seed", "greedy_reward", "oracle_reward", "static_reward",
                    *[f"share_{i}" for i in range(env.n_users)]])
        w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
