"""Train the imitation policy over several seeds and compare replay utilities.

    python3 scripts/irl_seeds.py --seeds 5
"""

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from aigc_edge_sim.genmodel import build_demo_dataset, expert_policy, load_catalog, make_demo_prompts
from aigc_edge_sim.harness import load_default_config, parse_config, seed_stream
from aigc_edge_sim.imitation import baseline_replay_utility, train_irl


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--out", default="runs/irl_seeds.csv")
    args = ap.parse_args(argv)

    cfg = parse_config(args.config) if args.config else load_default_config()
    if args.epochs is not None:
        cfg.irl.epochs = args.epochs
    catalog = load_catalog()
    header = ["seed", "expert_match", "utility_irl", "utility_empirical", "utility_random", "utility_default"]
    rows = []
    for seed in range(args.seeds):
        t0 = time.perf_counter()
        rng = seed_stream(seed, "channel")
        prompts = make_demo_prompts(cfg.demos.n_prompts, catalog, rng)
        ds = build_demo_dataset(prompts, catalog, cfg.demos.power_grid, cfg.channel, rng, cfg.demos.distance,
                                cfg.qoe.kappa)
        expert = expert_policy(ds)
        res = train_irl(ds, expert, cfg.irl, seed_stream(seed, "irl"), cfg.channel.p_total, catalog.n_strategies)
        last = res.curve[-1]
        rows.append([seed, last["expert_match_rate"], last["utility"],
                     *(baseline_replay_utility(ds, expert, w) for w in ("empirical", "random", "default"))])
        print(" ".join(f"{h}={v:.4g}" for h, v in zip(header, rows[-1])), f"({time.perf_counter() - t0:.0f}s)",
              flush=True)
    med = np.median(np.array(rows)[:, 1:], axis=0)
    print("median", " ".join(f"{h}={v:.4g}" for h, v in zip(header[1:], med)))

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
