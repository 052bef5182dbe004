"""QoE/cost objective, the multi-user service environment, an exhaustive
oracle over a discretized action grid, and static/random baselines.

Per-user reward is ``eta_q * QoE - eta_c * cost`` when the user's latency
and quality constraints hold and ``-penalty`` otherwise; exceeding the
power budget makes the whole action infeasible (``-Q * penalty``).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import integrate, stats

from .channel import ChannelParams, allocate_power, expected_ber_shadowed, mean_snr
from .errors import InvalidArgument
from .genmodel import (
    SCORE_MAX,
    PromptSpec,
    StrategyCatalog,
    best_expected_strategy,
    degradation_factor,
    make_prompt,
    raw_quality,
)

ORACLE_QUAD_TOL = 1e-8


@dataclass
class QoEConfig:
    l_max: float = 10.0
    t_zeta: float = 1.0
    c_zeta: float = 0.25
    eta_q: float = 1.0
    eta_c: float = 0.1
    penalty: float = 5.0
    n_max: int = 5
    kappa: float = 4.0

    def __post_init__(self) -> None:
        if self.l_max <= 0 or self.t_zeta <= 0:
            raise InvalidArgument("l_max and t_zeta must be positive")
        if self.n_max < 1:
            raise InvalidArgument("n_max must be >= 1")
        if self.eta_q < 0 or self.eta_c < 0 or self.penalty <= 0:
            raise InvalidArgument("weights must be non-negative and the penalty positive")

    def to_dict(self) -> dict:
        return asdict(self)


class ConstraintViolation(Exception):
    """Raised by :func:`qoe` when a user's latency or quality constraint fails."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def latency_factor(n: int, config: QoEConfig) -> float:
    """``log_N(L_max / (N T))``; at ``N = 1`` the base-1 log is replaced by ``ln``."""
    ratio = config.l_max / (n * config.t_zeta)
    if n == 1:
        return math.log(ratio)
    return math.log(ratio) / math.log(n)


def qoe(n: int, qualities, q_th: float, config: QoEConfig) -> float:
    """Latency factor times ``ln(max quality / threshold)``."""
    if n < 1:
        raise InvalidArgument("N must be >= 1")
    if q_th <= 0:
        raise InvalidArgument("quality threshold must be positive")
    if n * config.t_zeta > config.l_max:
        raise ConstraintViolation("latency", f"N*T = {n * config.t_zeta} exceeds L_max = {config.l_max}")
    best = float(np.max(qualities))
    if best < q_th:
        raise ConstraintViolation("quality", f"max quality {best:.4f} below threshold {q_th}")
    return latency_factor(n, config) * math.log(best / q_th)


def cost(n: int, p: float, c_zeta: float) -> float:
    """``N (c_zeta + P)``: compute plus transmit spend for N inference trials."""
    if n < 1 or p < 0:
        raise InvalidArgument("need N >= 1 and P >= 0")
    return n * (c_zeta + p)


@dataclass
class ProvisionState:
    prompts: list[PromptSpec]
    distances: np.ndarray
    thresholds: np.ndarray
    p_total: float
    snr_ref: float

    def __post_init__(self) -> None:
        self.distances = np.asarray(self.distances, dtype=np.float64)
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        q = len(self.prompts)
        if q < 1 or self.distances.shape != (q,) or self.thresholds.shape != (q,):
            raise InvalidArgument("prompts, distances and thresholds must have one entry per user")
        if np.any(self.distances <= 0):
            raise InvalidArgument("distances must be positive")
        if np.any(self.thresholds < 0) or np.any(self.thresholds > SCORE_MAX):
            raise InvalidArgument("thresholds must lie in [0, 10]")

    @property
    def n_users(self) -> int:
        return len(self.prompts)

    def encode(self) -> np.ndarray:
        """Flat feature vector: embeddings, distances/100, thresholds/10, P_total/10, SNR~ in dB/100."""
        emb = np.concatenate([p.embedding for p in self.prompts])
        snr_db = 10.0 * math.log10(max(self.snr_ref, 1e-300))
        return np.concatenate([emb, self.distances / 100.0, self.thresholds / 10.0,
                               [self.p_total / 10.0, snr_db / 100.0]])

    def permuted(self, order) -> "ProvisionState":
        order = list(order)
        return ProvisionState([self.prompts[i] for i in order], self.distances[order], self.thresholds[order],
                              self.p_total, self.snr_ref)


@dataclass
class ProvisionAction:
    n: np.ndarray
    p: np.ndarray

    def __post_init__(self) -> None:
        self.n = np.asarray(self.n, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.n.shape != self.p.shape or self.n.ndim != 1:
            raise InvalidArgument("N and P must be equal-length vectors")

    def feasible(self, p_total: float, n_max: int | None = None) -> bool:
        ok = bool(np.all(self.n >= 1) and np.all(self.p >= 0) and math.fsum(self.p) <= p_total * (1 + 1e-12))
        if n_max is not None:
            ok = ok and bool(np.all(self.n <= n_max))
        return ok

    def to_dict(self) -> dict:
        return {"n": self.n.tolist(), "p": self.p.tolist()}

    def permuted(self, order) -> "ProvisionAction":
        order = list(order)
        return ProvisionAction(self.n[order], self.p[order])


def user_term(n: int, p: float, qualities, q_th: float, config: QoEConfig) -> tuple[float, dict]:
    """One user's reward contribution plus diagnostics."""
    c = cost(n, p, config.c_zeta)
    try:
        q = qoe(n, qualities, q_th, config)
    except ConstraintViolation as exc:
        return -config.penalty, {"qoe": 0.0, "cost": c, "violation": exc.kind}
    return config.eta_q * q - config.eta_c * c, {"qoe": q, "cost": c, "violation": None}


def reward(state: ProvisionState, action: ProvisionAction, qualities, config: QoEConfig) -> float:
    """Objective with penalties; ``qualities[i]`` holds user i's received scores."""
    return reward_details(state, action, qualities, config)[0]


def reward_details(state: ProvisionState, action: ProvisionAction, qualities, config: QoEConfig):
    q = state.n_users
    if action.n.shape != (q,) or len(qualities) != q:
        raise InvalidArgument("action and qualities must cover every user")
    if math.fsum(action.p) > state.p_total * (1 + 1e-12):
        return -q * config.penalty, [{"qoe": 0.0, "cost": 0.0, "violation": "power"} for _ in range(q)]
    terms, diags = [], []
    for i in range(q):
        if action.n[i] < 1:
            terms.append(-config.penalty)
            diags.append({"qoe": 0.0, "cost": 0.0, "violation": "trials"})
            continue
        t, d = user_term(int(action.n[i]), float(action.p[i]), qualities[i], float(state.thresholds[i]), config)
        terms.append(t)
        diags.append(d)
    return math.fsum(terms), diags


@lru_cache(maxsize=64)
def _ber_table(channel: ChannelParams, distance: float, points: int = 129):
    grid = np.geomspace(channel.p_total * 1e-4, channel.p_total, points)
    vals = np.array([expected_ber_shadowed(channel, float(p), distance) for p in grid])
    return np.log(grid), vals


StrategyFn = Callable[[PromptSpec, float], int]


class ServiceEnv:
    """Single-step provisioning environment over a fixed user population.

    The strategy for each user is picked by ``strategy_fn(prompt, power)``
    (default: the catalog strategy with the best expected received score).
    BER comes from a log-power interpolation table of the shadowed expected
    BER unless ``exact_ber`` is set.
    """

    def __init__(self, state: ProvisionState, catalog: StrategyCatalog, channel: ChannelParams,
                 config: QoEConfig, strategy_fn: StrategyFn | None = None, exact_ber: bool = False):
        if abs(state.p_total - channel.p_total) > 1e-12:
            raise InvalidArgument("state and channel disagree on p_total")
        self.state = state
        self.catalog = catalog
        self.channel = channel
        self.config = config
        self.exact_ber = exact_ber
        self._strategy_fn = strategy_fn
        self._tables = None if exact_ber else [_ber_table(channel, float(d)) for d in state.distances]

    @property
    def n_users(self) -> int:
        return self.state.n_users

    def ber(self, i: int, p: float) -> float:
        d = float(self.state.distances[i])
        if p <= 0:
            return 0.5
        if self.exact_ber:
            return expected_ber_shadowed(self.channel, float(p), d)
        logp, vals = self._tables[i]
        lp = math.log(p)
        if lp < logp[0]:
            return expected_ber_shadowed(self.channel, float(p), d)
        return float(np.interp(lp, logp, vals))

    def strategy(self, i: int, p: float) -> int:
        prompt = self.state.prompts[i]
        if self._strategy_fn is None:
            return best_expected_strategy(self.catalog, prompt, self.ber(i, p), self.config.kappa)
        return int(self._strategy_fn(prompt, p))

    def factor(self, i: int, k: int, p: float) -> float:
        return degradation_factor(self.catalog, self.state.prompts[i], k, self.ber(i, p), self.config.kappa)

    def step(self, action: ProvisionAction, rng: np.random.Generator) -> tuple[float, dict]:
        """Draw N_i generations per user, degrade them by the link BER, score the round."""
        qualities, strategies, bers = [], [], []
        for i in range(self.n_users):
            n = max(int(action.n[i]), 0)
            p = float(action.p[i])
            k = self.strategy(i, p)
            raw = raw_quality(self.catalog, self.state.prompts[i], k, rng, size=max(n, 1))[:n]
            qualities.append(raw * self.factor(i, k, p) if n else np.zeros(0))
            strategies.append(k)
            bers.append(self.ber(i, p))
        qualities = [q if q.size else np.zeros(1) for q in qualities]
        total, diags = reward_details(self.state, action, qualities, self.config)
        info = {
            "reward": total,
            "qoe_sum": math.fsum(d["qoe"] for d in diags),
            "cost_sum": math.fsum(d["cost"] for d in diags),
            "constraint_violations": sum(d["violation"] is not None for d in diags),
            "strategies": strategies,
            "ber": bers,
            "users": diags,
        }
        return total, info

    # expected reward, computed analytically (independent of the sampling path)

    def expected_user_term(self, i: int, n: int, p: float) -> float:
        cfg = self.config
        if n < 1 or n * cfg.t_zeta > cfg.l_max:
            return -cfg.penalty
        k = self.strategy(i, p)
        prompt = self.state.prompts[i]
        mu = float(self.catalog.mean[prompt.class_id, k])
        sigma = float(self.catalog.std[prompt.class_id, k])
        f = self.factor(i, k, p)
        q = float(self.state.thresholds[i])
        return _expected_term(n, f, mu, sigma, q, latency_factor(n, cfg), cfg.eta_q,
                              cfg.eta_c * cost(n, p, cfg.c_zeta), cfg.penalty)

    def expected_reward(self, action: ProvisionAction) -> float:
        if math.fsum(action.p) > self.state.p_total * (1 + 1e-12):
            return -self.n_users * self.config.penalty
        return math.fsum(self.expected_user_term(i, int(action.n[i]), float(action.p[i]))
                         for i in range(self.n_users))


def _expected_term(n, f, mu, sigma, q, lat, eta_q, weighted_cost, penalty) -> float:
    """E[user term] when the best of ``n`` clipped Normal(mu, sigma) draws is scaled by ``f``.

    The max of n draws has CDF ``Phi((x - mu)/sigma)^n``; clipping at 10 puts
    the remaining mass on 10 itself.
    """
    if f <= 0 or q <= 0:
        return -penalty
    x0 = q / f
    if x0 > SCORE_MAX:
        return -penalty

    def gain(x: float) -> float:
        return eta_q * lat * math.log(f * x / q) - weighted_cost

    if sigma == 0:
        m = min(max(mu, 0.0), SCORE_MAX)
        return gain(m) if m >= x0 else -penalty
    cdf_top = stats.norm.cdf((SCORE_MAX - mu) / sigma) ** n
    p_fail = stats.norm.cdf((x0 - mu) / sigma) ** n

    def density(x: float) -> float:
        z = (x - mu) / sigma
        return n * stats.norm.pdf(z) * stats.norm.cdf(z) ** (n - 1) / sigma

    body, _ = integrate.quad(lambda x: gain(x) * density(x), x0, SCORE_MAX,
                             epsabs=ORACLE_QUAD_TOL, epsrel=ORACLE_QUAD_TOL, limit=200)
    return -penalty * p_fail + body + (1.0 - cdf_top) * gain(SCORE_MAX)


@dataclass
class OracleResult:
    action: ProvisionAction
    reward: float
    n_evaluated: int
    table: dict = field(repr=False, default_factory=dict)


def power_compositions(n_users: int, quanta: int):
    """All ``(k_1..k_Q)`` with ``k_i >= 1`` summing to ``quanta``, in lexicographic order."""
    if n_users == 1:
        yield (quanta,)
        return
    for first in range(1, quanta - n_users + 2):
        for rest in power_compositions(n_users - 1, quanta - first):
            yield (first, *rest)


def default_quanta(n_users: int) -> int:
    return n_users * (20 // n_users)


def brute_force_oracle(env: ServiceEnv, quanta: int | None = None) -> OracleResult:
    """Exact argmax of expected reward over ``{1..N_max}^Q`` x the power-quanta simplex.

    Powers are ``k_i / quanta * P_total`` (a weighted split, so the budget
    holds by construction). Ties resolve to the lexicographically smallest
    ``(N, k)`` pair.
    """
    q = env.n_users
    quanta = quanta or default_quanta(q)
    per_axis = quanta - q + 1
    if q > 4 or env.config.n_max > 6 or per_axis > 21:
        raise InvalidArgument(f"grid too large for exhaustive search (Q={q}, N_max={env.config.n_max}, "
                              f"{per_axis} power points per axis)")
    p_total = env.state.p_total
    levels = range(1, per_axis + 1)
    table = {}
    for i in range(q):
        for n in range(1, env.config.n_max + 1):
            for k in levels:
                table[i, n, k] = env.expected_user_term(i, n, k * p_total / quanta)
    best_val, best = -math.inf, None
    count = 0
    for ns in itertools.product(range(1, env.config.n_max + 1), repeat=q):
        for ks in power_compositions(q, quanta):
            val = math.fsum(table[i, ns[i], ks[i]] for i in range(q))
            count += 1
            if val > best_val:
                best_val, best = val, (ns, ks)
    ns, ks = best
    action = ProvisionAction(ns, allocate_power(np.asarray(ks, dtype=np.float64), p_total))
    return OracleResult(action, best_val, count, table)


def static_baseline(state: ProvisionState, config: QoEConfig, n_trials: int = 4) -> ProvisionAction:
    """Fixed provisioning: four trials per user, equal power split."""
    q = state.n_users
    return ProvisionAction(np.full(q, min(n_trials, config.n_max)), allocate_power(np.ones(q), state.p_total))


def random_baseline(state: ProvisionState, config: QoEConfig, rng: np.random.Generator) -> ProvisionAction:
    q = state.n_users
    n = rng.integers(1, config.n_max + 1, size=q)
    share = rng.dirichlet(np.ones(q))
    util = 1.0 - rng.random()  # (0, 1]
    p = share * util * state.p_total
    return ProvisionAction(n, p)


def make_state(users: list[dict], channel: ChannelParams, embed_seed: int = 0, dim: int = 8) -> ProvisionState:
    """Build a state from scenario user dicts with keys class_id, complexity, distance, threshold."""
    prompts = [make_prompt(i, int(u["class_id"]), float(u["complexity"]), float(u["threshold"]), embed_seed, dim)
               for i, u in enumerate(users)]
    return ProvisionState(prompts, [u["distance"] for u in users], [u["threshold"] for u in users],
                          channel.p_total, mean_snr(channel, channel.p_total, 1.0))
