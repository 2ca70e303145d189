"""Small reference scenarios with exactly computable optima."""

from __future__ import annotations

import numpy as np

from .config import SimConfig
from .env import SlicingEnv
from .sac import reward


def frozen_cell_config(users: tuple[int, int, int] = (3, 1, 1), num_rbs: int = 12, seed: int = 0) -> SimConfig:
    """One DU, static users, constant traffic and fading drawn once per episode.

    Every user offers exactly its slice mean, so the per-split reward is a
    deterministic function of the RB split.
    """
    cfg = SimConfig(seed=seed)
    cfg.topology.n_dus = 1
    cfg.topology.width = cfg.topology.height = 2000.0
    cfg.topology.du_radius = 0.0
    cfg.channel.num_rbs = num_rbs
    cfg.mobility.mobile = False
    cfg.mobility.mode_switch_prob = 0.0
    cfg.mobility.mode_multipliers = (1.0, 1.0, 1.0, 1.0)
    cfg.frozen_channel = True
    for spec, n in zip(cfg.slices, users):
        spec.n_users = n
    cfg.n_actors = 1
    cfg.prediction = False
    cfg.episode_len = 50
    cfg.eval_episodes = 1
    cfg.sac.gamma = 0.5
    cfg.validate()
    return cfg


def all_splits(num_rbs: int, n_slices: int = 3):
    """Every way of writing ``num_rbs`` as an ordered sum of ``n_slices`` non-negative ints."""
    if n_slices == 1:
        yield (num_rbs,)
        return
    for first in range(num_rbs + 1):
        for rest in all_splits(num_rbs - first, n_slices - 1):
            yield (first,) + rest


def exhaustive_split_search(cfg: SimConfig, seed) -> dict[tuple[int, ...], float]:
    """Reward of every RB split on the (frozen) first state of a fresh environment."""
    env = SlicingEnv(cfg, n_replicas=1, seed=seed)
    env.reset()
    out = {}
    for split in all_splits(env.num_rbs, env.n_slices):
        rbs = np.array(split, dtype=np.int64)[None, None].repeat(env.n_dus, axis=1)
        report = env.evaluate(env.schedule(rbs))
        out[split] = float(reward(report.qos, env.targets).mean())
    return out
