"""Experiment orchestration: config parsing, named seed streams, the
service-round analysis, metrics CSV output and the end-to-end runner."""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from . import d3pg as d3
from .approx import save_mlp
from .channel import ChannelParams
from .errors import ConfigError, InvalidArgument
from .genmodel import build_demo_dataset, expert_policy, load_catalog, make_demo_prompts
from .imitation import (
    IrlConfig,
    baseline_replay_utility,
    default_policy,
    empirical_policy,
    evaluate_policy,
    expert_match_rate,
    train_irl,
    untrained_policy,
)
from .provision import QoEConfig, ServiceEnv, brute_force_oracle, make_state, random_baseline, static_baseline

log = logging.getLogger(__name__)

UNBOUNDED = math.inf

METRICS = frozenset({
    "irl_disc_loss", "irl_expert_match", "irl_utility", "irl_untrained_match",
    "replay_utility_irl", "replay_utility_empirical", "replay_utility_random", "replay_utility_default",
    "replay_utility_expert",
    "d3pg_reward", "d3pg_qoe_sum", "d3pg_cost_sum", "d3pg_violations", "ablation_reward",
    "d3pg_greedy_reward", "ablation_greedy_reward", "static_reward", "random_reward", "oracle_reward",
    "d3pg_power_share", "oracle_power_share",
    "single_round_cells_irl", "single_round_cells_raw", "single_round_cells_empirical",
})


@dataclass
class DemoSettings:
    n_prompts: int = 20
    power_grid: list[float] = field(default_factory=lambda: [0.15, 0.6, 1.2, 2.0, 3.0])
    distance: float = 10.0


@dataclass
class RoundSettings:
    q_values: list[float] = field(default_factory=lambda: [round(7.5 + 0.1 * i, 1) for i in range(11)])
    n_values: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    confidence: float = 0.9
    samples: int = 2000


@dataclass
class ExperimentConfig:
    users: list[dict]
    channel: ChannelParams = field(default_factory=ChannelParams)
    catalog_path: str | None = None
    irl: IrlConfig = field(default_factory=IrlConfig)
    d3pg: d3.D3pgConfig = field(default_factory=d3.D3pgConfig)
    qoe: QoEConfig = field(default_factory=QoEConfig)
    demos: DemoSettings = field(default_factory=DemoSettings)
    rounds: RoundSettings = field(default_factory=RoundSettings)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/default"
    experiment: str = "default"

    @property
    def n_users(self) -> int:
        return len(self.users)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "users": [dict(u) for u in self.users],
            "channel": self.channel.to_dict(),
            "catalog_path": self.catalog_path,
            "irl": asdict(self.irl),
            "d3pg": asdict(self.d3pg),
            "qoe": asdict(self.qoe),
            "demos": asdict(self.demos),
            "rounds": asdict(self.rounds),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }


_USER_KEYS = {"class_id", "complexity", "distance", "threshold"}


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    allowed = {"experiment", "users", "channel", "catalog_path", "irl", "d3pg", "qoe", "demos", "rounds",
               "seeds", "output_dir"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    if "users" not in doc:
        raise ConfigError("missing 'users'")
    users = doc["users"]
    if not isinstance(users, list) or not users:
        raise ConfigError("'users' must be a non-empty list")
    for i, u in enumerate(users):
        if not isinstance(u, dict) or set(u) != _USER_KEYS:
            raise ConfigError(f"users[{i}] must have exactly the keys {sorted(_USER_KEYS)}")
        if u["distance"] <= 0 or not 0 <= u["threshold"] <= 10 or not 0 <= u["complexity"] <= 1:
            raise ConfigError(f"users[{i}] out of range")
    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("'seeds' must be a non-empty list of non-negative integers")
    catalog_path = doc.get("catalog_path")
    if catalog_path is not None:
        p = Path(catalog_path)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        if not p.is_file():
            raise ConfigError(f"catalog file not found: {catalog_path}")
    cfg = ExperimentConfig(
        users=[dict(u) for u in users],
        channel=_build(ChannelParams, doc.get("channel", {}), "channel"),
        catalog_path=catalog_path,
        irl=_build(IrlConfig, doc.get("irl", {}), "irl"),
        d3pg=_build(d3.D3pgConfig, doc.get("d3pg", {}), "d3pg"),
        qoe=_build(QoEConfig, doc.get("qoe", {}), "qoe"),
        demos=_build(DemoSettings, doc.get("demos", {}), "demos"),
        rounds=_build(RoundSettings, doc.get("rounds", {}), "rounds"),
        seeds=list(seeds),
        output_dir=str(doc.get("output_dir", "runs/default")),
        experiment=str(doc.get("experiment", "default")),
    )
    catalog = load_catalog(_catalog_file(cfg, base_dir))
    if any(not 0 <= u["class_id"] < catalog.n_classes for u in cfg.users):
        raise ConfigError("user class_id outside the catalog")
    if any(not 0 < p <= cfg.channel.p_total for p in cfg.demos.power_grid):
        raise ConfigError("demo power grid must lie in (0, p_total]")
    return cfg


def _catalog_file(cfg: ExperimentConfig, base_dir: Path | None = None):
    if cfg.catalog_path is None:
        return None
    p = Path(cfg.catalog_path)
    return base_dir / p if not p.is_absolute() and base_dir is not None else p


def parse_config(path) -> ExperimentConfig:
    """Read and validate a JSON experiment config; unknown keys are rejected."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(doc, path.parent)


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2) + "\n"


def default_config_path():
    return resources.files("aigc_edge_sim.data") / "default_config.json"


def load_default_config() -> ExperimentConfig:
    return config_from_dict(json.loads(default_config_path().read_text(encoding="utf-8")))


def seed_stream(seed: int, stage: str) -> np.random.Generator:
    """Independent generator for ``stage``: the stage name's CRC32 is the spawn key."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(stage.encode("utf-8")),)))


def service_rounds(mean: float, std: float, q: float, n: int, confidence: float = 0.9) -> float:
    """Rounds needed so at least one of ``n`` images per round clears ``q`` with the given confidence.

    Returns :data:`UNBOUNDED` when a single image can never clear the threshold.
    """
    if std <= 0 or n < 1 or not 0 < confidence < 1:
        raise InvalidArgument("need std > 0, n >= 1 and confidence in (0, 1)")
    p_img = float(stats.norm.sf((q - mean) / std))
    if p_img <= 0.0:
        return UNBOUNDED
    # log space keeps tiny success probabilities from rounding to zero
    log_fail = n * math.log1p(-p_img) if p_img < 1.0 else -math.inf
    target = math.log(1.0 - confidence)
    if log_fail <= target:
        return 1

    def ok(r):
        return -math.expm1(r * log_fail) >= confidence

    r = max(1, math.ceil(target / log_fail))
    # the estimate is off by at most a step from rounding
    for _ in range(3):
        if r > 1 and ok(r - 1):
            r -= 1
        elif not ok(r):
            r += 1
    return r


def single_round_cells(mean: float, std: float, q_values, n_values, confidence: float = 0.9) -> int:
    return sum(service_rounds(mean, std, q, n, confidence) == 1 for q in q_values for n in n_values)


@dataclass
class MetricsRow:
    experiment: str
    seed: int
    step: int
    metric: str
    value: float

    def __post_init__(self) -> None:
        if self.metric not in METRICS:
            raise InvalidArgument(f"unregistered metric {self.metric!r}")


def write_metrics(rows, path) -> None:
    """CSV ``experiment,seed,step,metric,value`` with 17 significant digits, LF endings."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["experiment", "seed", "step", "metric", "value"])
        for r in rows:
            w.writerow([r.experiment, r.seed, r.step, r.metric, format(float(r.value), ".17g")])


def read_metrics(path) -> list[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [MetricsRow(r["experiment"], int(r["seed"]), int(r["step"]), r["metric"], float(r["value"]))
                for r in csv.DictReader(fh)]


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def fitted_quality(policy, prompts, catalog, channel, samples: int, rng, distance: float, kappa: float):
    """Mean and std of the raw generation quality of the strategies a policy picks."""
    ev = evaluate_policy(policy, prompts, catalog, channel, samples, rng, distance=distance, kappa=kappa)
    return float(np.mean(ev.raw_scores)), float(np.std(ev.raw_scores, ddof=1))


def _power_share(env: ServiceEnv, actor, draws: int, seed: int) -> np.ndarray:
    raws = d3.act(actor, np.tile(env.state.encode(), (draws, 1)), np.random.default_rng(seed))
    acts = [d3.decode_action(r, env.n_users, env.config.n_max, env.state.p_total) for r in raws]
    return np.mean([a.p for a in acts], axis=0) / env.state.p_total


def run_seed(cfg: ExperimentConfig, seed: int, rows: list[MetricsRow], base_dir: Path | None = None) -> dict:
    exp = cfg.experiment
    catalog = load_catalog(_catalog_file(cfg, base_dir))
    ch = cfg.channel

    def add(step, metric, value):
        rows.append(MetricsRow(exp, seed, step, metric, float(value)))

    demo_rng = seed_stream(seed, "channel")
    prompts = make_demo_prompts(cfg.demos.n_prompts, catalog, demo_rng)
    ds = build_demo_dataset(prompts, catalog, cfg.demos.power_grid, ch, demo_rng, cfg.demos.distance, cfg.qoe.kappa)
    expert = expert_policy(ds)

    irl = train_irl(ds, expert, cfg.irl, seed_stream(seed, "irl"), p_total=ch.p_total,
                    n_strategies=catalog.n_strategies)
    for r in irl.curve:
        add(r["epoch"], "irl_disc_loss", r["disc_loss"])
        add(r["epoch"], "irl_expert_match", r["expert_match_rate"])
        add(r["epoch"], "irl_utility", r["utility"])
    untrained = untrained_policy(prompts[0].embedding.size, ch.p_total, cfg.irl, catalog.n_strategies)
    untrained_match = expert_match_rate(untrained, irl.eval_states, irl.eval_labels)
    add(0, "irl_untrained_match", untrained_match)
    utilities = {"irl": irl.curve[-1]["utility"] if irl.curve else float("nan")}
    for which in ("empirical", "random", "default", "expert"):
        utilities[which] = baseline_replay_utility(ds, expert, which)
    for k, v in utilities.items():
        add(0, f"replay_utility_{k}", v)

    state = make_state(cfg.users, ch)
    env = ServiceEnv(state, catalog, ch, cfg.qoe, strategy_fn=irl.policy)
    oracle = brute_force_oracle(env)
    add(0, "oracle_reward", oracle.reward)
    for i, p in enumerate(oracle.action.p / ch.p_total):
        add(i, "oracle_power_share", p)

    results = {}
    for name, kind, stage in (("d3pg", "diffusion", "d3pg"), ("ablation", "gaussian", "ablation")):
        dcfg = d3.D3pgConfig(**{**asdict(cfg.d3pg), "actor_kind": kind})
        res = d3.train_d3pg(env, dcfg, seed_stream(seed, stage))
        results[name] = res
        for r in res.curve:
            add(r["episode"], f"{name}_reward", r["reward"])
            if name == "d3pg":
                add(r["episode"], "d3pg_qoe_sum", r["qoe_sum"])
                add(r["episode"], "d3pg_cost_sum", r["cost_sum"])
                add(r["episode"], "d3pg_violations", r["constraint_violations"])
        add(0, f"{name}_greedy_reward", res.greedy_reward)
    share = _power_share(env, results["d3pg"].actor, cfg.d3pg.eval_draws, seed)
    for i, p in enumerate(share):
        add(i, "d3pg_power_share", p)

    eval_rng = seed_stream(seed, "eval")
    static_r = env.expected_reward(static_baseline(state, cfg.qoe))
    rand_r = float(np.mean([env.expected_reward(random_baseline(state, cfg.qoe, eval_rng)) for _ in range(32)]))
    add(0, "static_reward", static_r)
    add(0, "random_reward", rand_r)

    rs = cfg.rounds
    round_rng = seed_stream(seed, "rounds")
    cells = {}
    for name, pol in (("irl", irl.policy), ("raw", default_policy()), ("empirical", empirical_policy())):
        mean, std = fitted_quality(pol, prompts, catalog, ch, rs.samples, round_rng, cfg.demos.distance, cfg.qoe.kappa)
        cells[name] = single_round_cells(mean, std, rs.q_values, rs.n_values, rs.confidence)
        add(0, f"single_round_cells_{name}", cells[name])

    return {
        "seed": seed,
        "irl_expert_match": irl.curve[-1]["expert_match_rate"] if irl.curve else float("nan"),
        "irl_untrained_match": untrained_match,
        "replay_utility": utilities,
        "oracle": {"n": oracle.action.n.tolist(), "p": oracle.action.p.tolist(), "reward": oracle.reward},
        "d3pg_greedy_reward": results["d3pg"].greedy_reward,
        "ablation_greedy_reward": results["ablation"].greedy_reward,
        "d3pg_power_share": share.tolist(),
        "static_reward": static_r,
        "random_reward": rand_r,
        "single_round_cells": cells,
        "_actor": results["d3pg"].actor,
    }


def _median(xs) -> float:
    return float(np.median(np.asarray(xs, dtype=np.float64)))


def summarize(per_seed: list[dict]) -> dict:
    u = {k: _median([s["replay_utility"][k] for s in per_seed]) for k in per_seed[0]["replay_utility"]}
    d, a = _median([s["d3pg_greedy_reward"] for s in per_seed]), _median([s["ablation_greedy_reward"] for s in per_seed])
    st = _median([s["static_reward"] for s in per_seed])
    cells = {k: _median([s["single_round_cells"][k] for s in per_seed]) for k in per_seed[0]["single_round_cells"]}

    def ratio(x, y):
        return None if y == 0 else x / y

    return {
        "median_replay_utility": u,
        "median_greedy_reward": {"d3pg": d, "ablation": a, "static": st,
                                 "random": _median([s["random_reward"] for s in per_seed])},
        "median_single_round_cells": cells,
        "single_round_ratio": {"irl_vs_raw": ratio(cells["irl"], cells["raw"]),
                               "irl_vs_empirical": ratio(cells["irl"], cells["empirical"])},
        "ordering": {
            "irl_gt_empirical_gt_random": u["irl"] > u["empirical"] > u["random"],
            "d3pg_ge_ablation_ge_static": d >= a >= st,
        },
    }


def run_experiment(cfg: ExperimentConfig, out_dir=None, base_dir: Path | None = None) -> dict:
    """Run every stage for each seed and write ``metrics.csv``, ``summary.json`` and actor snapshots.

    On failure the rows gathered so far and the error are persisted before re-raising.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(serialize_config(cfg), encoding="utf-8")
    rows: list[MetricsRow] = []
    per_seed = []
    try:
        for seed in cfg.seeds:
            log.info("seed %d", seed)
            res = run_seed(cfg, seed, rows, base_dir)
            save_mlp(res.pop("_actor").net, out / f"d3pg_actor_seed{seed}.json")
            per_seed.append(res)
    except Exception as exc:
        write_metrics(rows, out / "metrics.csv")
        (out / "summary.json").write_text(_dumps({"error": f"{type(exc).__name__}: {exc}", "seeds": per_seed}),
                                          encoding="utf-8")
        raise
    summary = {"experiment": cfg.experiment, "seeds": per_seed, **summarize(per_seed)}
    write_metrics(rows, out / "metrics.csv")
    (out / "summary.json").write_text(_dumps(summary), encoding="utf-8")
    return summary
