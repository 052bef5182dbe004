"""Diffusion-actor DDPG for joint trial-count and power provisioning.

The actor is a noise-prediction MLP ``eps(a_t, emb(t), s)`` run through a
deterministic reverse chain of ``T`` steps starting from Gaussian noise.
Twin critics with target copies score (state, raw action) pairs; the actor
is trained by backpropagating the first critic through the whole chain.
A plain deterministic-actor DDPG with Gaussian exploration is provided as
an ablation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .approx import (
    MacCounter,
    Mlp,
    Trainable,
    mlp_backward,
    mlp_forward,
    mlp_forward_cache,
    mlp_init,
    optimizer_init,
    optimizer_step,
    soft_update,
)
from .errors import InvalidArgument, NumericError
from .provision import ProvisionAction, ServiceEnv

log = logging.getLogger(__name__)

__all__ = [
    "DiffusionSchedule", "D3pgConfig", "ReplayBuffer", "make_schedule", "forward_diffuse", "timestep_embedding",
    "DiffusionActor", "GaussianActor", "denoise_action", "decode_action", "critic_target", "actor_loss",
    "soft_update", "train_d3pg", "complexity_report", "diffusion_bc_loss", "greedy_reward",
]


@dataclass
class DiffusionSchedule:
    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def beta(self) -> np.ndarray:
        return 1.0 - self.alpha

    def ab(self, t: int) -> float:
        """``alpha_bar_t`` with ``alpha_bar_0 = 1``."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def make_schedule(T: int, beta_start: float = 0.1, beta_end: float = 0.5, betas=None) -> DiffusionSchedule:
    """Linear beta ramp, ``alpha_t = 1 - beta_t``. ``betas`` overrides the ramp (values in ``[0, 1)``)."""
    if T < 1:
        raise InvalidArgument("T must be >= 1")
    if betas is None:
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise InvalidArgument(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        betas = np.linspace(beta_start, beta_end, T)
    betas = np.asarray(betas, dtype=np.float64)
    if betas.shape != (T,) or np.any(betas < 0) or np.any(betas >= 1):
        raise InvalidArgument("betas must be T values in [0, 1)")
    alpha = 1.0 - betas
    return DiffusionSchedule(T, alpha, np.cumprod(alpha))


def forward_diffuse(a0, t: int, schedule: DiffusionSchedule, rng: np.random.Generator, noise=None):
    """Closed-form jump ``sqrt(ab_t) a0 + sqrt(1 - ab_t) eps``."""
    if not 1 <= t <= schedule.T:
        raise InvalidArgument(f"t must lie in [1, {schedule.T}]")
    a0 = np.asarray(a0, dtype=np.float64)
    eps = rng.standard_normal(a0.shape) if noise is None else noise
    ab = schedule.ab(t)
    return math.sqrt(ab) * a0 + math.sqrt(1.0 - ab) * eps


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding; ``t`` scalar or array, output ``(..., dim)``."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(100.0) * np.arange(half) / max(half, 1))
    ang = t[..., None] * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


@dataclass
class DiffusionActor:
    net: Mlp
    schedule: DiffusionSchedule
    action_dim: int
    state_dim: int
    temb_dim: int = 8

    @classmethod
    def create(cls, state_dim: int, action_dim: int, schedule: DiffusionSchedule, hidden=(64, 64),
               temb_dim: int = 8, seed: int = 0) -> "DiffusionActor":
        net = mlp_init([action_dim + temb_dim + state_dim, *hidden, action_dim], "tanh", seed)
        return cls(net, schedule, action_dim, state_dim, temb_dim)

    def copy(self) -> "DiffusionActor":
        return DiffusionActor(self.net.copy(), self.schedule, self.action_dim, self.state_dim, self.temb_dim)

    def forward(self, states: np.ndarray, a_T: np.ndarray, counter: MacCounter | None = None):
        """Run the reverse chain on a batch. Returns unclipped ``a_0`` and the per-step caches."""
        sched = self.schedule
        a = a_T
        caches = []
        for t in range(sched.T, 0, -1):
            temb = np.broadcast_to(timestep_embedding(t, self.temb_dim), (a.shape[0], self.temb_dim))
            eps, cache = mlp_forward_cache(self.net, np.concatenate([a, temb, states], axis=1), counter)
            alpha = float(sched.alpha[t - 1])
            coef = (1.0 - alpha) / math.sqrt(1.0 - sched.ab(t)) if alpha < 1.0 else 0.0
            caches.append((cache, alpha, coef))
            a = (a - coef * eps) / math.sqrt(alpha)
        return a, caches

    def backward(self, caches, g_a0: np.ndarray):
        """Parameter gradients of ``<g_a0, a_0>`` accumulated over every chain step."""
        g = g_a0
        total = None
        for cache, alpha, coef in reversed(caches):
            g = g / math.sqrt(alpha)
            grads, dx = mlp_backward(self.net, cache, -coef * g)
            g = g + dx[:, : self.action_dim]
            total = grads if total is None else [a + b for a, b in zip(total, grads)]
        return total, g

    def __call__(self, states, rng: np.random.Generator, exploration_std: float = 0.0):
        return denoise_action(states, self, rng, exploration_std)


@dataclass
class GaussianActor:
    """Deterministic MLP actor; exploration is Gaussian noise on its output."""

    net: Mlp
    action_dim: int
    state_dim: int

    @classmethod
    def create(cls, state_dim: int, action_dim: int, hidden=(64, 64), seed: int = 0) -> "GaussianActor":
        return cls(mlp_init([state_dim, *hidden, action_dim], "tanh", seed), action_dim, state_dim)

    def copy(self) -> "GaussianActor":
        return GaussianActor(self.net.copy(), self.action_dim, self.state_dim)

    def forward(self, states: np.ndarray, a_T=None, counter: MacCounter | None = None):
        out, cache = mlp_forward_cache(self.net, states, counter)
        return out, cache

    def backward(self, cache, g_a0: np.ndarray):
        grads, _ = mlp_backward(self.net, cache, g_a0)
        return grads, None

    def __call__(self, states, rng: np.random.Generator, exploration_std: float = 0.0):
        s, single = _batch(states)
        a, _ = self.forward(s)
        if exploration_std > 0:
            a = a + exploration_std * rng.standard_normal(a.shape)
        a = np.clip(a, -1.0, 1.0)
        return a[0] if single else a


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def denoise_action(states, actor: DiffusionActor, rng: np.random.Generator, exploration_std: float = 0.0,
                   a_T=None) -> np.ndarray:
    """Sample ``a_T ~ N(0, I)``, run the reverse chain, add exploration noise, clip to ``[-1, 1]``."""
    s, single = _batch(states)
    if s.shape[1] != actor.state_dim:
        raise InvalidArgument(f"state dimension {s.shape[1]} != actor's {actor.state_dim}")
    if a_T is None:
        a_T = rng.standard_normal((s.shape[0], actor.action_dim))
    a_T = np.asarray(a_T, dtype=np.float64).reshape(s.shape[0], actor.action_dim)
    a0, _ = actor.forward(s, a_T)
    if exploration_std > 0:
        a0 = a0 + exploration_std * rng.standard_normal(a0.shape)
    a0 = np.clip(a0, -1.0, 1.0)
    return a0[0] if single else a0


def decode_action(raw, q: int, n_max: int, p_total: float) -> ProvisionAction:
    """First ``q`` entries pick trial counts, the last ``q`` are power logits.

    ``N_i = 1 + round((x_i + 1) / 2 * (N_max - 1))`` (halves round up) and
    ``P_i = exp(y_i) P_total / sum_j exp(y_j)``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (2 * q,):
        raise InvalidArgument(f"raw action must have length {2 * q}")
    x = np.clip(raw[:q], -1.0, 1.0)
    y = np.clip(raw[q:], -1.0, 1.0)
    n = 1 + np.floor((x + 1.0) / 2.0 * (n_max - 1) + 0.5).astype(np.int64)
    n = np.clip(n, 1, n_max)
    w = np.exp(y - y.max())
    p = w * p_total / w.sum()
    p[-1] = p_total - math.fsum(p[:-1])
    return ProvisionAction(n, p)


def _twin_min(critics, states, actions) -> np.ndarray:
    x = np.concatenate([states, actions], axis=1)
    return np.minimum(*(mlp_forward(c, x)[:, 0] for c in critics))


def critic_target(reward, gamma: float, next_states=None, terminal=True, target_actor=None,
                  target_critics=None) -> np.ndarray:
    """``y = R + gamma (1 - done) min_j Q'_j(s', pi'(s'))``."""
    r = np.atleast_1d(np.asarray(reward, dtype=np.float64))
    done = np.broadcast_to(np.asarray(terminal, dtype=bool), r.shape)
    if gamma == 0 or np.all(done):
        return r.copy()
    s2, _ = _batch(next_states)
    a2 = target_actor(s2)
    nxt = _twin_min(target_critics, s2, a2)
    return r + gamma * np.where(done, 0.0, nxt)


def actor_loss(critic: Mlp, states, actor, a_T=None, bound_penalty: float = 0.0):
    """``-mean Q(s, clip(a_0))`` plus ``bound_penalty * mean sum relu(|a_0| - 1)^2``.

    Returns ``(loss, actor parameter gradients)``; gradients flow through
    every denoising step.
    """
    s, _ = _batch(states)
    b = s.shape[0]
    if b == 0:
        raise InvalidArgument("empty batch")
    if isinstance(actor, DiffusionActor) and a_T is None:
        raise InvalidArgument("diffusion actor needs the initial noise a_T")
    a0, caches = actor.forward(s, a_T)
    a = np.clip(a0, -1.0, 1.0)
    inside = (np.abs(a0) <= 1.0).astype(np.float64)
    q, qcache = mlp_forward_cache(critic, np.concatenate([s, a], axis=1))
    over = np.maximum(np.abs(a0) - 1.0, 0.0)
    loss = -float(np.mean(q)) + bound_penalty * float(np.mean(np.sum(over**2, axis=1)))
    if not math.isfinite(loss):
        raise NumericError("actor loss is not finite")
    _, dx = mlp_backward(critic, qcache, np.full((b, 1), -1.0 / b))
    g_a0 = dx[:, s.shape[1]:] * inside + bound_penalty * 2.0 * over * np.sign(a0) / b
    grads, _ = actor.backward(caches, g_a0)
    return loss, grads


def diffusion_bc_loss(actor: DiffusionActor, states, targets, rng: np.random.Generator):
    """Noise-prediction loss ``|eps - eps(sqrt(ab_t) a0 + sqrt(1-ab_t) eps, t, s)|^2`` with ``t`` uniform."""
    s, _ = _batch(states)
    a0 = np.asarray(targets, dtype=np.float64).reshape(s.shape[0], actor.action_dim)
    b = s.shape[0]
    t = rng.integers(1, actor.schedule.T + 1, size=b)
    eps = rng.standard_normal(a0.shape)
    ab = actor.schedule.alpha_bar[t - 1][:, None]
    a_t = np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps
    x = np.concatenate([a_t, timestep_embedding(t, actor.temb_dim), s], axis=1)
    pred, cache = mlp_forward_cache(actor.net, x)
    diff = pred - eps
    loss = float(np.mean(np.sum(diff**2, axis=1)))
    grads, _ = mlp_backward(actor.net, cache, 2.0 * diff / b)
    return loss, grads


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling (with replacement)."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise InvalidArgument("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, state, action, reward: float, next_state, terminal: bool = True) -> None:
        i = self._pos
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.terminal[i] = terminal
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.size == 0:
            raise InvalidArgument("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=n)

    def sample(self, rng: np.random.Generator, n: int):
        idx = self.sample_indices(rng, n)
        return self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.terminal[idx]


@dataclass
class D3pgConfig:
    T: int = 5
    beta_start: float = 0.1
    beta_end: float = 0.5
    batch_size: int = 64
    gamma: float = 0.99
    tau: float = 0.005
    explore_std: float = 0.1
    explore_final: float = 0.01
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    episodes: int = 2000
    buffer_capacity: int = 10000
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    temb_dim: int = 8
    warmup: int = 64
    bound_penalty: float = 20.0
    eval_draws: int = 16
    actor_kind: str = "diffusion"

    def __post_init__(self) -> None:
        if self.T < 1:
            raise InvalidArgument("T must be >= 1")
        for name in ("tau", "lr_actor", "lr_critic"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise InvalidArgument(f"{name} must lie in (0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidArgument("gamma must lie in [0, 1]")
        if self.batch_size < 1 or self.episodes < 0 or self.buffer_capacity < 1:
            raise InvalidArgument("batch_size, episodes and buffer_capacity must be positive")
        if self.explore_std < 0 or self.explore_final < 0:
            raise InvalidArgument("exploration noise must be non-negative")
        if self.actor_kind not in ("diffusion", "gaussian"):
            raise InvalidArgument(f"unknown actor_kind {self.actor_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class D3pgResult:
    actor: DiffusionActor | GaussianActor
    critics: list[Mlp]
    curve: list[dict]
    greedy_reward: float
    greedy_action: ProvisionAction


class Diverged(NumericError):
    def __init__(self, message: str, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


def make_actor(config: D3pgConfig, state_dim: int, action_dim: int, seed: int):
    if config.actor_kind == "diffusion":
        return DiffusionActor.create(state_dim, action_dim, config.schedule(), config.hidden, config.temb_dim, seed)
    return GaussianActor.create(state_dim, action_dim, config.hidden, seed)


def act(actor, states, rng: np.random.Generator, exploration_std: float = 0.0, a_T=None) -> np.ndarray:
    if isinstance(actor, DiffusionActor):
        return denoise_action(states, actor, rng, exploration_std, a_T)
    return actor(states, rng, exploration_std)


def greedy_reward(env: ServiceEnv, actor, draws: int = 16, seed: int = 0) -> tuple[float, ProvisionAction]:
    """Expected reward of the noise-free policy, averaged over ``draws`` fixed initial-noise samples.

    Returns the mean and the decoded action of the first draw.
    """
    rng = np.random.default_rng(seed)
    s = env.state.encode()
    n = draws if isinstance(actor, DiffusionActor) else 1
    raws = act(actor, np.tile(s, (n, 1)), rng)
    cfg = env.config
    actions = [decode_action(r, env.n_users, cfg.n_max, env.state.p_total) for r in raws]
    vals = [env.expected_reward(a) for a in actions]
    return math.fsum(vals) / n, actions[0]


def _update(actor, opt_ref, critics, targets, target_actor, buf, config, rng) -> float:
    bs, ba, br, bs2, bd = buf.sample(rng, config.batch_size)
    y = critic_target(br, config.gamma, bs2, bd, lambda x: act(target_actor, x, rng), targets)
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite critic target")
    x = np.concatenate([bs, ba], axis=1)
    for c in critics:
        v, cache = mlp_forward_cache(c.net, x)
        g, _ = mlp_backward(c.net, cache, (2.0 * (v[:, 0] - y) / len(y))[:, None])
        c.apply(g)
    a_T = rng.standard_normal((len(bs), actor.action_dim)) if isinstance(actor, DiffusionActor) else None
    loss, grads = actor_loss(critics[0].net, bs, actor, a_T, config.bound_penalty)
    actor.net, opt_ref[0] = optimizer_step(actor.net, grads, opt_ref[0])
    target_actor.net = soft_update(target_actor.net, actor.net, config.tau)
    targets[:] = [soft_update(t, c.net, config.tau) for t, c in zip(targets, critics)]
    if not all(np.all(np.isfinite(a)) for a in actor.net.arrays()):
        raise NumericError("actor parameters became non-finite")
    return loss


def train_d3pg(env: ServiceEnv, config: D3pgConfig, rng: np.random.Generator) -> D3pgResult:
    """Single-step episodes: act, observe the sampled reward, store, update critics then actor.

    Curve rows: episode, reward, qoe_sum, cost_sum, constraint_violations.
    """
    q = env.n_users
    s = env.state.encode()
    sdim, adim = s.size, 2 * q
    seeds = rng.integers(0, 2**31, size=4)
    actor = make_actor(config, sdim, adim, int(seeds[0]))
    opt_ref = [optimizer_init(actor.net, config.lr_actor, max_grad_norm=1.0)]
    critics = [Trainable.create([sdim + adim, *config.hidden, 1], "tanh", int(sd), config.lr_critic, max_grad_norm=1.0)
               for sd in seeds[1:3]]
    targets = [c.net.copy() for c in critics]
    target_actor = actor.copy()
    buf = ReplayBuffer(config.buffer_capacity, sdim, adim)
    n_max, p_total = env.config.n_max, env.state.p_total
    curve = []
    snapshot = actor.copy()
    for ep in range(config.episodes):
        frac = ep / max(config.episodes - 1, 1)
        std = config.explore_std + (config.explore_final - config.explore_std) * frac
        raw = act(actor, s, rng, std)
        r, info = env.step(decode_action(raw, q, n_max, p_total), rng)
        buf.add(s, raw, r, s, True)
        curve.append({"episode": ep, "reward": r, "qoe_sum": info["qoe_sum"], "cost_sum": info["cost_sum"],
                      "constraint_violations": info["constraint_violations"]})
        if len(buf) < config.warmup:
            continue
        try:
            loss = _update(actor, opt_ref, critics, targets, target_actor, buf, config, rng)
        except NumericError as exc:
            raise Diverged(f"training diverged at episode {ep}: {exc}", snapshot) from exc
        if ep % 100 == 0:
            snapshot = actor.copy()
        if ep % 250 == 0:
            log.info("d3pg episode %d reward %.4f actor_loss %.4f", ep, r, loss)
    g, action = greedy_reward(env, actor, config.eval_draws, int(seeds[3]))
    return D3pgResult(actor, [c.net for c in critics], curve, g, action)


def complexity_report(config: D3pgConfig, state_dim: int, action_dim: int, critic_hidden=None) -> dict:
    """Parameter counts and measured multiply-accumulates for one action and one update."""
    actor = make_actor(config, state_dim, action_dim, 0)
    critic = mlp_init([state_dim + action_dim, *(critic_hidden or config.hidden), 1], "tanh", 0)
    s = np.zeros((1, state_dim))
    counter = MacCounter()
    actor.forward(s, np.zeros((1, action_dim)), counter)
    per_action = counter.macs
    b = config.batch_size
    # critic update: two online critics forward+backward, two target critics and the target actor forward
    per_update = (2 * 3 + 2) * b * critic.macs_per_sample() + b * per_action * 3 + b * per_action
    return {
        "T": config.T,
        "S_p": actor.net.n_params(),
        "S_q": critic.n_params(),
        "actor_macs_per_action": per_action,
        "critic_macs_per_sample": critic.macs_per_sample(),
        "macs_per_update": per_update,
        "complexity_units": (config.T + 1) * actor.net.n_params() + 2 * critic.n_params(),
    }
