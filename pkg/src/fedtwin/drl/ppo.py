"""PPO agent: Gaussian actor, state-value critic, clipped surrogate objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Adam, Mlp

LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class PPOConfig:
    clip_eps: float = 0.2
    lr: float = 3e-4
    epochs: int = 4
    hidden: int = 64
    init_log_std: float = -1.0
    min_log_std: float = -3.0
    max_log_std: float = 1.0
    reward_scale: float = 0.05
    normalize_advantages: bool = True
    entropy_coef: float = 0.0
    actor_out_scale: float = 0.01
    minibatch_size: int = 64  # 0 means one full-batch step per epoch


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    log_prob: float


@dataclass
class Batch:
    states: np.ndarray  # (T, K_in)
    actions: np.ndarray  # (T, K_out)
    old_log_probs: np.ndarray  # (T,)
    returns: np.ndarray  # (T,) rewards-to-go


@dataclass
class Losses:
    actor_loss: float
    critic_loss: float
    actor_grads: list[np.ndarray]  # actor params followed by log-std
    critic_grads: list[np.ndarray]
    diagnostics: dict = field(default_factory=dict)


def rewards_to_go(rewards, discount: float) -> np.ndarray:
    """J(t) = sum_{t' >= t} discount^(t'-t) r(t')."""
    out = np.zeros(len(rewards))
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + discount * acc
        out[i] = acc
    return out


def gaussian_log_prob(actions, mean, log_std) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return -0.5 * (z * z).sum(axis=-1) - log_std.sum() - 0.5 * mean.shape[-1] * LOG_2PI


class PPOAgent:
    def __init__(self, agent_id: str, in_size: int, out_size: int, cfg: PPOConfig, rng: np.random.Generator):
        self.agent_id = agent_id
        self.in_size = in_size
        self.out_size = out_size
        self.cfg = cfg
        h = cfg.hidden
        self.actor = Mlp.create((in_size, h, h, out_size), rng, out_scale=cfg.actor_out_scale)
        self.critic = Mlp.create((in_size, h, h, 1), rng)
        self.log_std = np.full(out_size, float(cfg.init_log_std))
        self.actor_opt = Adam(lr=cfg.lr)
        self.critic_opt = Adam(lr=cfg.lr)
        self.buffer: list[list[Transition]] = [[]]

    def act(self, state: np.ndarray, rng: np.random.Generator | None, deterministic: bool = False):
        mean = self.actor(state[None, :])[0]
        if deterministic or rng is None:
            action = mean.copy()
        else:
            action = mean + np.exp(self.log_std) * rng.standard_normal(self.out_size)
        logp = float(gaussian_log_prob(action[None, :], mean[None, :], self.log_std)[0])
        return action, logp

    def store(self, tr: Transition) -> None:
        if not np.isfinite(tr.log_prob):
            raise NonFiniteLoss(f"{self.agent_id}: non-finite log-probability")
        self.buffer[-1].append(tr)

    def end_episode(self) -> None:
        if self.buffer[-1]:
            self.buffer.append([])

    def buffered_transitions(self) -> int:
        return sum(len(ep) for ep in self.buffer)

    def batch(self, discount: float) -> Batch:
        eps = [ep for ep in self.buffer if ep]
        states = np.array([tr.state for ep in eps for tr in ep])
        actions = np.array([tr.action for ep in eps for tr in ep])
        logp = np.array([tr.log_prob for ep in eps for tr in ep])
        scale = self.cfg.reward_scale
        returns = np.concatenate([rewards_to_go([scale * tr.reward for tr in ep], discount) for ep in eps])
        return Batch(states, actions, logp, returns)

    def clear(self) -> None:
        self.buffer = [[]]

    def actor_params(self) -> list[np.ndarray]:
        return self.actor.params + [self.log_std]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, net, opt in (("actor", self.actor, self.actor_opt), ("critic", self.critic, self.critic_opt)):
            for i, p in enumerate(net.params):
                out[f"{name}.p{i}"] = p
            for i, m in enumerate(opt.m):
                out[f"{name}.m{i}"] = m
                out[f"{name}.v{i}"] = opt.v[i]
            out[f"{name}.step"] = np.array(opt.step_count)
        out["log_std"] = self.log_std
        return out

    def load_state_dict(self, d: dict[str, np.ndarray]) -> None:
        for name, net, opt in (("actor", self.actor, self.actor_opt), ("critic", self.critic, self.critic_opt)):
            net.params = [np.array(d[f"{name}.p{i}"]) for i in range(len(net.params))]
            n_moments = sum(1 for k in d if k.startswith(f"{name}.m"))
            opt.m = [np.array(d[f"{name}.m{i}"]) for i in range(n_moments)]
            opt.v = [np.array(d[f"{name}.v{i}"]) for i in range(n_moments)]
            opt.step_count = int(d[f"{name}.step"])
        self.log_std = np.array(d["log_std"])


def ppo_losses(agent: PPOAgent, batch: Batch, advantages: np.ndarray | None = None) -> Losses:
    """Clipped surrogate actor loss, squared-error critic loss, and their gradients.

    Advantages default to J(t) - V(s_t) from the current critic, held fixed.
    """
    eps = agent.cfg.clip_eps
    values, critic_acts = agent.critic.forward(batch.states)
    values = values[:, 0]
    if advantages is None:
        advantages = batch.returns - values
        if agent.cfg.normalize_advantages and len(advantages) > 1:
            advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    mean, actor_acts = agent.actor.forward(batch.states)
    log_std = agent.log_std
    logp = gaussian_log_prob(batch.actions, mean, log_std)
    if not np.isfinite(logp).all() or not np.isfinite(batch.old_log_probs).all():
        raise NonFiniteLoss(f"{agent.agent_id}: non-finite log-probability")
    ratio = np.exp(logp - batch.old_log_probs)
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    surrogate = np.minimum(ratio * advantages, clipped * advantages)
    entropy = float(log_std.sum() + 0.5 * len(log_std) * (1.0 + LOG_2PI))
    actor_loss = -float(surrogate.sum()) - agent.cfg.entropy_coef * entropy * len(ratio)
    critic_loss = float(((values - batch.returns) ** 2).sum())
    if not (np.isfinite(actor_loss) and np.isfinite(critic_loss)):
        raise NonFiniteLoss(f"{agent.agent_id}: non-finite loss")

    # the clipped branch carries no gradient once the ratio has left the trust region
    active = ~(((advantages > 0) & (ratio > 1.0 + eps)) | ((advantages < 0) & (ratio < 1.0 - eps)))
    d_logp = -(ratio * advantages) * active  # dL/dlogp per step
    inv_var = np.exp(-2.0 * log_std)
    diff = batch.actions - mean
    d_mean = d_logp[:, None] * diff * inv_var
    d_log_std = (d_logp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0)
    d_log_std = d_log_std - agent.cfg.entropy_coef * len(ratio)
    actor_grads = agent.actor.backward(actor_acts, d_mean) + [d_log_std]
    critic_grads = agent.critic.backward(critic_acts, (2.0 * (values - batch.returns))[:, None])
    diag = {
        "clip_fraction": float(np.mean(~active)),
        "mean_ratio": float(ratio.mean()),
        "entropy": entropy,
        "surrogate_terms": surrogate,
        "advantages": advantages,
    }
    return Losses(actor_loss, critic_loss, actor_grads, critic_grads, diag)


def update_agent(agent: PPOAgent, losses: Losses) -> None:
    """One Adam step on actor (with log-std) and critic."""
    agent.actor_opt.step(agent.actor_params(), losses.actor_grads)
    agent.critic_opt.step(agent.critic.params, losses.critic_grads)
    np.clip(agent.log_std, agent.cfg.min_log_std, agent.cfg.max_log_std, out=agent.log_std)


def _subset(batch: Batch, idx: np.ndarray) -> Batch:
    return Batch(batch.states[idx], batch.actions[idx], batch.old_log_probs[idx], batch.returns[idx])


def train_on_buffer(agent: PPOAgent, discount: float, rng: np.random.Generator | None = None) -> dict:
    """Several epochs of PPO on the buffered episodes, then clear the buffer.

    With a minibatch size and an rng, each epoch visits the buffer in shuffled
    chunks; otherwise every epoch is one full-batch step.
    """
    if agent.buffered_transitions() == 0:
        return {}
    batch = agent.batch(discount)
    values = agent.critic(batch.states)[:, 0]
    adv = batch.returns - values
    if agent.cfg.normalize_advantages and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    size = agent.cfg.minibatch_size
    last = None
    for _ in range(agent.cfg.epochs):
        if size <= 0 or rng is None or size >= len(adv):
            last = ppo_losses(agent, batch, advantages=adv)
            update_agent(agent, last)
            continue
        order = rng.permutation(len(adv))
        for start in range(0, len(adv), size):
            idx = order[start:start + size]
            last = ppo_losses(agent, _subset(batch, idx), advantages=adv[idx])
            update_agent(agent, last)
    agent.clear()
    return {"actor_loss": last.actor_loss, "critic_loss": last.critic_loss, "clip_fraction": last.diagnostics["clip_fraction"]}
