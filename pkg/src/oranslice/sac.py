"""Distributed soft actor-critic slicing agent (the xApp).

``N_m`` actors share one critic. The actors are stored as one ensemble
:class:`~oranslice.nn.DenseNet` whose leading axis indexes the actor, so
every actor keeps private weights while forward/backward passes stay
batched. Each actor emits a tanh-squashed Gaussian over per-slice scores
that :func:`~oranslice.allocation.realize_allocation` turns into RB counts.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .config import SacConfig
from .errors import NumericalFailure
from .nn import AdamState, DenseNet, apply_adam, check_finite, dense_backward, dense_forward, prefixed, unprefixed

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
REWARD_FLOOR = 1e-3
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)

SacHyper = SacConfig


# ---------------------------------------------------------------- state and reward


def encode_state(qos: np.ndarray, counts: np.ndarray, loads: np.ndarray, prev_rbs: np.ndarray,
                 targets: np.ndarray, n_users: int, load_max: np.ndarray, num_rbs: int) -> np.ndarray:
    """Concatenate (Q/lambda, N_l/N, Lambda_l/Lambda_max, previous RB shares) per DU.

    All inputs are (..., L); the result is (..., 4L).
    """
    return np.concatenate([
        qos / targets,
        counts / n_users,
        loads / load_max,
        prev_rbs / num_rbs,
    ], axis=-1)


def reward(qos: np.ndarray, targets: np.ndarray, floor: float = REWARD_FLOOR) -> np.ndarray:
    """Sum over slices of 1/arctan(relative deviation from target), deviation floored at ``floor``."""
    dev = np.maximum(np.abs(qos - targets) / targets, floor)
    return np.sum(1.0 / np.arctan(dev), axis=-1)


# ---------------------------------------------------------------- squashed Gaussian


@dataclass
class SquashCache:
    std: np.ndarray
    eps: np.ndarray
    action: np.ndarray
    clipped: np.ndarray


def squash(mu: np.ndarray, log_std_raw: np.ndarray, eps: np.ndarray) -> tuple[np.ndarray, np.ndarray, SquashCache]:
    """a = tanh(mu + std * eps) and log pi(a|s) including the tanh Jacobian."""
    log_std = np.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    u = mu + std * eps
    a = np.tanh(u)
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), stable for large |u|
    log_jac = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
    logp = np.sum(-0.5 * eps * eps - log_std - HALF_LOG_2PI - log_jac, axis=-1)
    clipped = (log_std_raw < LOG_STD_MIN) | (log_std_raw > LOG_STD_MAX)
    return a, logp, SquashCache(std, eps, a, clipped)


def squash_backward(cache: SquashCache, d_action: np.ndarray, d_logp: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the head output [mu, log_std_raw] given dL/da and dL/dlogp."""
    a = cache.action
    d_logp = d_logp[..., None]
    du = d_action * (1.0 - a * a) + d_logp * 2.0 * a
    d_log_std = -d_logp + du * cache.std * cache.eps
    d_log_std = np.where(cache.clipped, 0.0, d_log_std)
    return np.concatenate([du, d_log_std], axis=-1)


def split_head(out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    half = out.shape[-1] // 2
    return out[..., :half], out[..., half:]


def sample_action(actor: DenseNet, state: np.ndarray, rng: np.random.Generator | None = None,
                  deterministic: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Draw a squashed action and its log-probability.

    ``deterministic`` returns tanh(mean) (its log-prob is that of eps = 0).
    """
    out, _ = dense_forward(actor, state)
    if not np.all(np.isfinite(out)):
        raise NumericalFailure("actor produced non-finite output")
    mu, log_std_raw = split_head(out)
    eps = np.zeros_like(mu) if deterministic else rng.standard_normal(mu.shape)
    a, logp, _ = squash(mu, log_std_raw, eps)
    return a, logp


# ---------------------------------------------------------------- replay


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.actor = np.zeros(capacity, dtype=np.int64)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2, done=False, actor: int = 0) -> None:
        for arr in (s, a, s2):
            if not np.all(np.isfinite(arr)):
                raise NumericalFailure("non-finite transition")
        if not np.isfinite(r):
            raise NumericalFailure("non-finite reward")
        i = self.ptr
        self.s[i], self.a[i], self.r[i], self.s2[i] = s, a, r, s2
        self.done[i] = float(done)
        self.actor[i] = actor
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("sampling from an empty buffer")
        return rng.integers(0, self.size, size=n)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        idx = self.sample_indices(n, rng)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])


class DistributedReplay:
    """One ring buffer per actor; the union is what the critic trains on.

    Every actor contributes the same number of transitions per iteration, so
    drawing the same count from each buffer samples the union uniformly per
    actor share while keeping batches aligned with the actor ensemble.
    """

    def __init__(self, n_actors: int, capacity: int, state_dim: int, action_dim: int):
        per = max(1, capacity // n_actors)
        self.buffers = [ReplayBuffer(per, state_dim, action_dim) for _ in range(n_actors)]

    def __len__(self) -> int:
        return sum(len(b) for b in self.buffers)

    def add(self, actor: int, s, a, r, s2, done=False) -> None:
        self.buffers[actor].add(s, a, r, s2, done, actor)

    def sample(self, per_actor: int, rng: np.random.Generator) -> Batch:
        parts = [b.sample(per_actor, rng) for b in self.buffers]
        return Batch(*(np.stack([getattr(p, f) for p in parts]) for f in ("s", "a", "r", "s2", "done")))


# ---------------------------------------------------------------- losses


def critic_loss_grads(critic: DenseNet, s: np.ndarray, a: np.ndarray, y: np.ndarray):
    """Mean squared error between Q(s, a) and fixed targets ``y``; (loss, grads)."""
    x = np.concatenate([s, a], axis=-1).reshape(-1, s.shape[-1] + a.shape[-1])
    q, cache = dense_forward(critic, x)
    diff = q[:, 0] - y.reshape(-1)
    loss = float(np.mean(diff * diff))
    dq = (2.0 / diff.size) * diff[:, None]
    _, grads = dense_backward(critic, cache, dq)
    return loss, grads


def policy_loss_grads(actors: DenseNet, critic: DenseNet, s: np.ndarray, eps: np.ndarray, beta: float):
    """Reparameterised soft policy loss mean(beta*log pi(a|s) - Q(s, a)) per actor.

    ``s`` is (A, B, S) for an ensemble of A actors and ``eps`` the (A, B, act)
    Gaussian noise. Returns (per-actor losses (A,), grads for ``actors``).
    """
    out, a_cache = dense_forward(actors, s)
    mu, log_std_raw = split_head(out)
    act, logp, sq = squash(mu, log_std_raw, eps)
    n_act, bsz = s.shape[0], s.shape[1]
    x = np.concatenate([s, act], axis=-1).reshape(n_act * bsz, -1)
    q, c_cache = dense_forward(critic, x)
    q = q[:, 0].reshape(n_act, bsz)
    losses = np.mean(beta * logp - q, axis=1)
    dx, _ = dense_backward(critic, c_cache, np.full((n_act * bsz, 1), -1.0 / bsz))
    d_action = dx[:, s.shape[-1]:].reshape(act.shape)
    d_logp = np.full(logp.shape, beta / bsz)
    d_out = squash_backward(sq, d_action, d_logp)
    _, grads = dense_backward(actors, a_cache, d_out)
    return losses, grads


def soft_update(target: DenseNet, source: DenseNet, tau: float) -> None:
    for t, s in zip(target.params(), source.params()):
        t += tau * (s - t)
    target.version += 1


# ---------------------------------------------------------------- agent


class SacAgent:
    def __init__(self, n_actors: int, state_dim: int, action_dim: int, hyper: SacHyper, rng: np.random.Generator):
        hyper.validate()
        self.hyper = hyper
        self.n_actors = n_actors
        self.state_dim = state_dim
        self.action_dim = action_dim
        widths = list(hyper.hidden)
        self.actors = DenseNet.init([state_dim] + widths + [2 * action_dim], rng, ensemble=n_actors)
        self.critic = DenseNet.init([state_dim + action_dim] + widths + [1], rng)
        self.target = self.critic.copy()
        self.actor_opt = AdamState(lr=hyper.lr)
        self.critic_opt = AdamState(lr=hyper.lr)

    def act(self, states: np.ndarray, rng: np.random.Generator | None, deterministic: bool = False):
        """states (A, B, S): row block i is handled by actor i."""
        return sample_action(self.actors, states, rng, deterministic)

    def critic_targets(self, batch: Batch, rng: np.random.Generator) -> np.ndarray:
        """y = c r + gamma * (1 - done) * (Q_target(s', a') - beta log pi(a'|s')), a' freshly sampled.

        ``c`` is ``reward_scale``; the critic therefore works in scaled units.
        """
        h = self.hyper
        a2, logp2 = self.act(batch.s2, rng)
        x2 = np.concatenate([batch.s2, a2], axis=-1).reshape(-1, self.state_dim + self.action_dim)
        q2, _ = dense_forward(self.target, x2)
        q2 = q2[:, 0].reshape(batch.r.shape)
        return h.reward_scale * batch.r + h.gamma * (1.0 - batch.done) * (q2 - h.beta * logp2)

    def critic_update(self, batch: Batch, rng: np.random.Generator) -> float:
        y = self.critic_targets(batch, rng)
        loss, grads = critic_loss_grads(self.critic, batch.s, batch.a, y)
        if not np.isfinite(loss):
            raise NumericalFailure("critic loss is not finite")
        apply_adam(self.critic, grads, self.critic_opt)
        soft_update(self.target, self.critic, self.hyper.tau)
        return loss

    def policy_update(self, batch: Batch, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal(batch.a.shape)
        losses, grads = policy_loss_grads(self.actors, self.critic, batch.s, eps, self.hyper.beta)
        if not np.all(np.isfinite(losses)):
            raise NumericalFailure("policy loss is not finite")
        apply_adam(self.actors, grads, self.actor_opt)
        return losses

    def update(self, replay: DistributedReplay, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        per_actor = max(1, self.hyper.batch_size // self.n_actors)
        batch = replay.sample(per_actor, rng)
        critic_loss = self.critic_update(batch, rng)
        policy_losses = self.policy_update(batch, rng)
        return policy_losses, critic_loss

    def tensors(self) -> dict[str, np.ndarray]:
        out = prefixed("actors", self.actors)
        out.update(prefixed("critic", self.critic))
        out.update(prefixed("target", self.target))
        return out

    def load(self, tensors: dict[str, np.ndarray]) -> None:
        self.actors.load(unprefixed("actors", tensors))
        self.critic.load(unprefixed("critic", tensors))
        self.target.load(unprefixed("target", tensors))
        check_finite(self.actors.params() + self.critic.params(), "loaded agent")


class ConvergenceMonitor:
    """Declares convergence when the mean absolute policy-parameter change,
    averaged over the last ``window`` iterations, drops below ``tol``."""

    def __init__(self, window: int = 50, tol: float = 1e-5):
        self.window = window
        self.tol = tol
        self.deltas: deque[float] = deque(maxlen=window)

    def push(self, before: list[np.ndarray], after: list[np.ndarray]) -> bool:
        total = sum(float(np.abs(a - b).sum()) for a, b in zip(after, before))
        count = sum(a.size for a in after)
        self.deltas.append(total / count)
        return self.converged

    @property
    def converged(self) -> bool:
        return len(self.deltas) == self.window and float(np.mean(self.deltas)) < self.tol
