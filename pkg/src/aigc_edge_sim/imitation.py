"""Adversarial imitation of the expert prompt-engineering policy.

A discriminator scores (state, strategy) pairs as expert-like; the
categorical generator policy is improved with the PPO clipped surrogate on
the discriminator-derived reward, and a value critic supplies the baseline.
Decisions are single-step (one strategy per request), so the history slot
of the state is always zero-padded.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .approx import Mlp, Trainable, mlp_backward, mlp_forward, mlp_forward_cache, mlp_init, optimizer_init
from .channel import ChannelParams, expected_ber_shadowed
from .errors import InvalidArgument, NumericError
from .genmodel import (
    EMPIRICAL_BEST,
    RAW_PROMPT,
    DemoDataset,
    ExpertPolicy,
    PromptSpec,
    StrategyCatalog,
    raw_quality,
    user_side_score,
)

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-6


@dataclass
class IrlConfig:
    clip: float = 0.2
    gamma: float = 0.99
    epochs: int = 1500
    batch_size: int = 256
    lr_generator: float = 5e-4
    lr_critic: float = 3e-3
    lr_discriminator: float = 2e-3
    history: int = 3
    ppo_epochs: int = 4
    disc_steps: int = 3
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    entropy_coef: float = 0.05
    eval_states: int = 1000

    def __post_init__(self) -> None:
        if not 0.0 < self.clip < 1.0:
            raise InvalidArgument("clip must lie in (0, 1)")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidArgument("gamma must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.history < 0:
            raise InvalidArgument("epochs, batch_size and history must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def state_dim(embed_dim: int, history: int, n_strategies: int) -> int:
    return history * n_strategies + embed_dim + 1


def encode_state(prompt: PromptSpec, power: float, p_total: float, history=(), k: int = 3,
                 n_strategies: int = 7) -> np.ndarray:
    """``[one-hot history (k slots, zero-padded), prompt embedding, power / p_total]``."""
    if not 0.0 < power <= p_total:
        raise InvalidArgument("power must lie in (0, p_total]")
    h = np.zeros((k, n_strategies))
    recent = list(history)[-k:] if k else []
    for slot, a in enumerate(recent):
        h[k - len(recent) + slot, a] = 1.0
    return np.concatenate([h.ravel(), prompt.embedding, [power / p_total]])


def encode_batch(embeddings: np.ndarray, idx: np.ndarray, powers: np.ndarray, p_total: float,
                 k: int, n_strategies: int) -> np.ndarray:
    hist = np.zeros((len(idx), k * n_strategies))
    return np.hstack([hist, embeddings[idx], (np.asarray(powers) / p_total)[:, None]])


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))


def _disc_input(states: np.ndarray, actions: np.ndarray, n_strategies: int) -> np.ndarray:
    onehot = np.zeros((len(actions), n_strategies))
    onehot[np.arange(len(actions)), actions] = 1.0
    return np.hstack([states, onehot])


def disc_prob(disc: Mlp, states, actions, n_strategies: int = 7) -> np.ndarray:
    states = np.atleast_2d(states)
    actions = np.atleast_1d(actions)
    return _sigmoid(mlp_forward(disc, _disc_input(states, actions, n_strategies))[:, 0])


def discriminator_loss(disc: Mlp, expert_batch, policy_batch, n_strategies: int = 7) -> float:
    """``-(mean log D(expert) + mean log(1 - D(policy)))`` with D clamped to [1e-6, 1-1e-6]."""
    (se, ae), (sp, ap) = expert_batch, policy_batch
    if len(ae) == 0 or len(ap) == 0:
        raise InvalidArgument("discriminator batches must be non-empty")
    de = np.clip(disc_prob(disc, se, ae, n_strategies), PROB_CLAMP, 1 - PROB_CLAMP)
    dp = np.clip(disc_prob(disc, sp, ap, n_strategies), PROB_CLAMP, 1 - PROB_CLAMP)
    return float(-(np.mean(np.log(de)) + np.mean(np.log1p(-dp))))


def discriminator_grads(disc: Mlp, expert_batch, policy_batch, n_strategies: int = 7):
    """Loss and parameter gradients of :func:`discriminator_loss` (clamp ignored in the gradient)."""
    (se, ae), (sp, ap) = expert_batch, policy_batch
    x = np.vstack([_disc_input(se, ae, n_strategies), _disc_input(sp, ap, n_strategies)])
    logits, cache = mlp_forward_cache(disc, x)
    d = _sigmoid(logits[:, 0])
    ne = len(ae)
    up = np.empty_like(d)
    up[:ne] = (d[:ne] - 1.0) / ne
    up[ne:] = d[ne:] / len(ap)
    grads, _ = mlp_backward(disc, cache, up[:, None])
    dc = np.clip(d, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = float(-(np.mean(np.log(dc[:ne])) + np.mean(np.log1p(-dc[ne:]))))
    return loss, grads


def gail_reward(disc: Mlp, state, action, n_strategies: int = 7):
    """Imitation reward ``-log(1 - D(s, a))``: non-negative, increasing in D."""
    d = np.clip(disc_prob(disc, state, action, n_strategies), PROB_CLAMP, 1 - PROB_CLAMP)
    r = -np.log1p(-d)
    return float(r[0]) if np.ndim(action) == 0 else r


def advantage(reward, gamma: float, v_now, v_next):
    return np.asarray(reward) + gamma * np.asarray(v_next) - np.asarray(v_now)


def standardize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    return (x - x.mean()) / sd if sd > 1e-12 else x - x.mean()


def ppo_clip_loss(ratios, advantages, eps: float) -> float:
    """Clipped surrogate ``mean(min(r A, clip(r, 1-eps, 1+eps) A))`` (to be maximized)."""
    r = np.asarray(ratios, dtype=np.float64)
    a = np.asarray(advantages, dtype=np.float64)
    if np.any(r <= 0):
        raise InvalidArgument("probability ratios must be positive")
    return float(np.mean(np.minimum(r * a, np.clip(r, 1 - eps, 1 + eps) * a)))


def ppo_clip_ratio_grad(ratios, advantages, eps: float) -> np.ndarray:
    """d(surrogate)/d(ratio_i); zero wherever the clipped branch is the active minimum."""
    r = np.asarray(ratios)
    a = np.asarray(advantages)
    active = r * a <= np.clip(r, 1 - eps, 1 + eps) * a
    return np.where(active, a, 0.0) / r.size


class IrlPolicy:
    """Categorical strategy policy over the IRL state encoding."""

    def __init__(self, net: Mlp, p_total: float, history: int = 3, n_strategies: int = 7, greedy: bool = True):
        self.net = net
        self.p_total = p_total
        self.history = history
        self.n_strategies = n_strategies
        self.greedy = greedy

    def probs(self, states) -> np.ndarray:
        return _softmax(mlp_forward(self.net, np.atleast_2d(states)))

    def state(self, prompt: PromptSpec, power: float) -> np.ndarray:
        return encode_state(prompt, power, self.p_total, (), self.history, self.n_strategies)

    def __call__(self, prompt: PromptSpec, power: float, rng: np.random.Generator | None = None) -> int:
        p = self.probs(self.state(prompt, power))[0]
        if self.greedy or rng is None:
            return int(np.argmax(p))
        return int(rng.choice(self.n_strategies, p=p))


class FixedStrategy:
    def __init__(self, strategy: int):
        self.strategy = strategy

    def __call__(self, prompt, power, rng=None) -> int:
        return self.strategy


class RandomStrategy:
    def __init__(self, n_strategies: int = 7):
        self.n_strategies = n_strategies

    def __call__(self, prompt, power, rng=None) -> int:
        return int(rng.integers(self.n_strategies))


def default_policy() -> FixedStrategy:
    return FixedStrategy(RAW_PROMPT)


def empirical_policy() -> FixedStrategy:
    return FixedStrategy(EMPIRICAL_BEST)


def untrained_policy(embed_dim: int, p_total: float, config: IrlConfig, n_strategies: int = 7, seed: int = 0) -> IrlPolicy:
    sizes = [state_dim(embed_dim, config.history, n_strategies), *config.hidden, n_strategies]
    net = _policy_net(sizes, seed)
    return IrlPolicy(net, p_total, config.history, n_strategies)


def _policy_net(sizes, seed) -> Mlp:
    net = mlp_init(sizes, "tanh", seed)
    # zero output layer: the initial policy is exactly uniform
    net.weights[-1][:] = 0.0
    return net


def expert_match_rate(policy: IrlPolicy, states: np.ndarray, labels: np.ndarray) -> float:
    """Mean probability the policy assigns to the expert's strategy."""
    p = policy.probs(states)
    return float(np.mean(p[np.arange(len(labels)), labels]))


def replay_utility(probs: np.ndarray, scores: np.ndarray) -> float:
    """Expected recorded user-side score when strategies are drawn from ``probs`` per demo cell."""
    return float(np.mean(np.sum(probs * scores, axis=-1)))


@dataclass
class IrlResult:
    policy: IrlPolicy
    discriminator: Mlp
    critic: Mlp
    curve: list[dict]
    eval_states: np.ndarray = field(repr=False)
    eval_labels: np.ndarray = field(repr=False)


class _DemoSampler:
    """Draws (prompt, power) states uniformly and labels them with the expert."""

    def __init__(self, dataset: DemoDataset, expert: ExpertPolicy, p_total: float, config: IrlConfig, n_strategies: int):
        self.prompts = dataset.prompts
        self.emb = np.vstack([p.embedding for p in self.prompts])
        self.expert = expert
        self.p_total = p_total
        self.cfg = config
        self.n = n_strategies
        pos = [expert._pos[p.id] for p in self.prompts]
        self._choice = expert.choice[pos]

    def sample(self, rng: np.random.Generator, size: int):
        idx = rng.integers(len(self.prompts), size=size)
        powers = self.p_total * (1.0 - rng.random(size))  # uniform on (0, p_total]
        buckets = np.argmin(np.abs(self.expert.power_grid[None, :] - powers[:, None]), axis=1)
        labels = self._choice[idx, buckets]
        return encode_batch(self.emb, idx, powers, self.p_total, self.cfg.history, self.n), labels

    def grid_states(self):
        grid = self.expert.power_grid
        idx = np.repeat(np.arange(len(self.prompts)), len(grid))
        powers = np.tile(grid, len(self.prompts))
        return encode_batch(self.emb, idx, powers, self.p_total, self.cfg.history, self.n)


def train_irl(dataset: DemoDataset, expert: ExpertPolicy, config: IrlConfig, rng: np.random.Generator,
              p_total: float | None = None, n_strategies: int = 7) -> IrlResult:
    """GAIL with a PPO generator. Curve rows: epoch, disc_loss, gen_reward, expert_match_rate, utility."""
    p_total = float(p_total if p_total is not None else max(dataset.power_grid))
    sampler = _DemoSampler(dataset, expert, p_total, config, n_strategies)
    sdim = sampler.emb.shape[1] + config.history * n_strategies + 1
    seeds = rng.integers(0, 2**31, size=4)
    eval_rng = np.random.default_rng(seeds[3])
    eval_states, eval_labels = sampler.sample(eval_rng, config.eval_states)

    gen_net = _policy_net([sdim, *config.hidden, n_strategies], int(seeds[0]))
    gen = Trainable(gen_net, optimizer_init(gen_net, config.lr_generator, max_grad_norm=1.0))
    critic = Trainable.create([sdim, *config.hidden, 1], "tanh", int(seeds[1]), config.lr_critic, max_grad_norm=1.0)
    disc = Trainable.create([sdim + n_strategies, *config.hidden, 1], "tanh", int(seeds[2]),
                            config.lr_discriminator, max_grad_norm=1.0)

    grid_states = sampler.grid_states()
    scores = dataset.score_table()[[expert._pos[p.id] for p in dataset.prompts]].reshape(len(grid_states), -1)
    policy = IrlPolicy(gen.net, p_total, config.history, n_strategies)
    curve = []
    b = config.batch_size
    for epoch in range(config.epochs):
        se, ae = sampler.sample(rng, b)
        sp, _ = sampler.sample(rng, b)
        probs_old = _softmax(mlp_forward(gen.net, sp))
        u = rng.random(b)
        ap = np.minimum((probs_old.cumsum(axis=1) < u[:, None]).sum(axis=1), n_strategies - 1)

        for _ in range(config.disc_steps):
            disc_loss, g = discriminator_grads(disc.net, (se, ae), (sp, ap), n_strategies)
            disc.apply(g)
        rewards = gail_reward(disc.net, sp, ap, n_strategies)
        values = mlp_forward(critic.net, sp)[:, 0]
        # single-step episodes: the successor value is zero
        adv = standardize(advantage(rewards, config.gamma, values, 0.0))
        p_old_a = probs_old[np.arange(b), ap]
        onehot = np.zeros((b, n_strategies))
        onehot[np.arange(b), ap] = 1.0
        for _ in range(config.ppo_epochs):
            logits, cache = mlp_forward_cache(gen.net, sp)
            p = _softmax(logits)
            ratio = p[np.arange(b), ap] / p_old_a
            g_ratio = ppo_clip_ratio_grad(ratio, adv, config.clip)
            g_logits = (g_ratio * ratio)[:, None] * (onehot - p)
            if config.entropy_coef:
                logp = np.log(np.clip(p, 1e-12, 1.0))
                ent = -np.sum(p * logp, axis=1, keepdims=True)
                g_logits += config.entropy_coef * (-p * (logp + ent)) / b
            grads, _ = mlp_backward(gen.net, cache, -g_logits)
            gen.apply(grads)

            v, vcache = mlp_forward_cache(critic.net, sp)
            target = rewards + config.gamma * 0.0
            vg, _ = mlp_backward(critic.net, vcache, (2.0 * (v[:, 0] - target) / b)[:, None])
            critic.apply(vg)

        policy.net = gen.net
        if not (np.isfinite(disc_loss) and np.all(np.isfinite(rewards))):
            raise NumericError(f"IRL diverged at epoch {epoch}: disc_loss={disc_loss}")
        curve.append({
            "epoch": epoch,
            "disc_loss": disc_loss,
            "gen_reward": float(np.mean(rewards)),
            "expert_match_rate": expert_match_rate(policy, eval_states, eval_labels),
            "utility": replay_utility(policy.probs(grid_states), scores),
        })
        if epoch % 50 == 0:
            log.info("irl epoch %d %s", epoch, curve[-1])
    return IrlResult(policy, disc.net, critic.net, curve, eval_states, eval_labels)


def baseline_replay_utility(dataset: DemoDataset, expert: ExpertPolicy, which: str) -> float:
    """Replay utility of the non-learning baselines: ``default``, ``empirical``, ``random`` or ``expert``."""
    table = dataset.score_table()[[expert._pos[p.id] for p in dataset.prompts]]
    flat = table.reshape(-1, table.shape[-1])
    n = flat.shape[1]
    probs = np.zeros_like(flat)
    if which == "default":
        probs[:, RAW_PROMPT] = 1.0
    elif which == "empirical":
        probs[:, EMPIRICAL_BEST] = 1.0
    elif which == "random":
        probs[:] = 1.0 / n
    elif which == "expert":
        probs[np.arange(len(flat)), expert.choice.reshape(-1)] = 1.0
    else:
        raise InvalidArgument(f"unknown baseline {which!r}")
    return replay_utility(probs, flat)


@dataclass
class PolicyEvaluation:
    mean_score: float
    histogram: np.ndarray
    raw_scores: np.ndarray = field(repr=False)
    user_scores: np.ndarray = field(repr=False)


def evaluate_policy(policy, prompts, catalog: StrategyCatalog, channel: ChannelParams, n_trials: int,
                    rng: np.random.Generator, powers=None, distance: float = 10.0, kappa: float = 4.0) -> PolicyEvaluation:
    """Monte-Carlo user-side score of a strategy policy over random (prompt, power) requests.

    Powers are drawn from ``powers`` (default: five levels up to ``p_total``).
    """
    if n_trials < 1:
        raise InvalidArgument("n_trials must be >= 1")
    prompts = list(prompts)
    powers = np.asarray(powers if powers is not None else channel.p_total * np.array([0.05, 0.2, 0.4, 0.7, 1.0]))
    bers = {float(p): expected_ber_shadowed(channel, float(p), distance) for p in powers}
    hist = np.zeros(catalog.n_strategies, dtype=np.int64)
    raw = np.empty(n_trials)
    user = np.empty(n_trials)
    for t in range(n_trials):
        prompt = prompts[int(rng.integers(len(prompts)))]
        power = float(powers[int(rng.integers(len(powers)))])
        k = policy(prompt, power, rng)
        hist[k] += 1
        raw[t] = float(raw_quality(catalog, prompt, k, rng))
        user[t] = float(user_side_score(raw[t], bers[power], prompt.complexity, kappa * catalog.sensitivity[k]))
    return PolicyEvaluation(float(user.mean()), hist, raw, user)
