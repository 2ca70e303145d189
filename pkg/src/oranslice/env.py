"""Discrete-time ORAN slicing environment.

One :class:`SlicingEnv` holds ``R`` independent replicas of the network
(all arrays carry a leading replica axis) so that several actors can be
stepped in lockstep with one set of numpy calls. Each replica draws from
its own pair of random streams: one for mobility/traffic and one for
fading. Mobility never depends on the allocation, so two runs with the same
seed see identical user trajectories whatever the policy does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .allocation import Allocation, check_slice_budget, rb_owner, realize_allocation, round_robin
from .channel import DuNode, path_gain
from .config import ConfigError, SimConfig
from .errors import ConstraintViolation
from .mobility import aggregate_load, move, step_modes


def du_positions(cfg: SimConfig) -> np.ndarray:
    """One DU at the centre, the rest evenly spaced on a ring around it."""
    topo = cfg.topology
    center = np.array([topo.width / 2, topo.height / 2])
    pos = [center]
    ring = topo.n_dus - 1
    for j in range(ring):
        ang = 2 * np.pi * j / ring
        pos.append(center + topo.du_radius * np.array([np.cos(ang), np.sin(ang)]))
    pos = np.array(pos)
    if np.any(pos < 0) or np.any(pos[:, 0] > topo.width) or np.any(pos[:, 1] > topo.height):
        raise ConfigError("DU ring does not fit inside the area")
    return pos


def du_nodes(cfg: SimConfig) -> list[DuNode]:
    return [DuNode(i, (float(x), float(y)), cfg.topology.tx_power_per_rb) for i, (x, y) in enumerate(du_positions(cfg))]


@dataclass
class EnvState:
    step: int
    positions: np.ndarray  # (R, N, 2)
    speed: np.ndarray  # (R, N)
    heading: np.ndarray  # (R, N)
    mode: np.ndarray  # (R, N) index into MODES
    assoc: np.ndarray  # (R, N) serving DU
    demand: np.ndarray  # (R, N) bits offered this slot
    counts: np.ndarray  # (R, M, L) users per DU and slice
    loads: np.ndarray  # (R, M, L) summed demand bits


@dataclass
class QosReport:
    qos: np.ndarray  # (R, M, L) Mbps
    rate: np.ndarray  # (R, N) bits/s
    served: np.ndarray  # (R, N) bits/s, demand capped
    delay: np.ndarray  # (R, N) seconds, inf when starved
    violation: np.ndarray  # (R, M, L) |Q - lambda| in Mbps
    flags: np.ndarray  # (R, M, L) violation > margin
    members: np.ndarray  # (R, M, L)


class SlicingEnv:
    def __init__(self, cfg: SimConfig, n_replicas: int = 1, seed: int | np.random.SeedSequence | None = None):
        cfg.validate()
        self.cfg = cfg
        self.n_replicas = n_replicas
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(cfg.seed if seed is None else seed)
        self._mob_rngs, self._fad_rngs = [], []
        for child in ss.spawn(n_replicas):
            mob, fad = child.spawn(2)
            self._mob_rngs.append(np.random.default_rng(mob))
            self._fad_rngs.append(np.random.default_rng(fad))

        self.du_pos = du_positions(cfg)
        self.n_dus = len(self.du_pos)
        self.n_slices = len(cfg.slices)
        self.num_rbs = cfg.channel.num_rbs
        self.powers = np.full(self.n_dus, cfg.topology.tx_power_per_rb)
        self.slice_of = np.concatenate([np.full(s.n_users, s.id) for s in cfg.slices]).astype(np.int64)
        self.n_users = len(self.slice_of)
        self.targets = np.array([s.qos_target for s in cfg.slices])
        self.margins = np.array([s.qos_margin for s in cfg.slices])
        self._user_mean = np.array([cfg.slices[sl].mean_demand for sl in self.slice_of])
        self._multipliers = np.asarray(cfg.mobility.mode_multipliers, dtype=float)
        self.bounds = (cfg.topology.width, cfg.topology.height)
        self.state: EnvState | None = None
        self.last_gains: np.ndarray | None = None
        self._fading_table: np.ndarray | None = None
        self._not_own = 1.0 - np.eye(self.n_dus)[None, :, None, :]

    # ------------------------------------------------------------ dynamics

    def reset(self) -> EnvState:
        mob = self.cfg.mobility
        shape = (self.n_replicas, self.n_users)
        pos, speed, heading, mode = [], [], [], []
        for rng in self._mob_rngs:
            pos.append(rng.uniform((0.0, 0.0), self.bounds, size=(self.n_users, 2)))
            speed.append(rng.uniform(mob.speed_min, mob.speed_max, size=self.n_users))
            heading.append(rng.uniform(0.0, 2 * np.pi, size=self.n_users))
            mode.append(rng.integers(0, 4, size=self.n_users))
        if self.cfg.frozen_channel:
            self._fading_table = np.stack([
                rng.standard_exponential((self.n_users, self.num_rbs, self.n_dus)) for rng in self._fad_rngs
            ])
        self._set_state(0, np.array(pos), np.array(speed).reshape(shape), np.array(heading).reshape(shape),
                        np.array(mode).reshape(shape))
        return self.state

    def _set_state(self, step, positions, speed, heading, mode) -> None:
        d = np.linalg.norm(positions[:, :, None, :] - self.du_pos[None, None], axis=-1)
        assoc = np.argmin(d, axis=-1)
        bits = self._multipliers[mode] * self._user_mean * self.cfg.mobility.slot
        counts, loads = aggregate_load(assoc, self.slice_of, bits, self.n_dus, self.n_slices)
        self.state = EnvState(step, positions, speed, heading, mode, assoc, bits, counts, loads)
        self._pathgain = path_gain(d, self.cfg.channel.path_loss_exp)

    def advance(self) -> EnvState:
        """Move users and update traffic modes by one slot."""
        st = self._require_state()
        mob = self.cfg.mobility
        pos, speed, heading, mode = [], [], [], []
        for r, rng in enumerate(self._mob_rngs):
            if mob.mobile:
                p, s, h = move(st.positions[r], st.speed[r], st.heading[r], mob.slot, self.bounds, rng,
                               (mob.speed_min, mob.speed_max))
            else:
                p, s, h = st.positions[r], st.speed[r], st.heading[r]
            pos.append(p)
            speed.append(s)
            heading.append(h)
            mode.append(step_modes(st.mode[r], mob.mode_switch_prob, rng))
        self._set_state(st.step + 1, np.array(pos), np.array(speed), np.array(heading), np.array(mode))
        return self.state

    def schedule(self, slice_rbs: np.ndarray) -> Allocation:
        """Round-robin the slices' RB blocks over active users of each DU."""
        st = self._require_state()
        slice_rbs = self._as_batch(slice_rbs)
        check_slice_budget(slice_rbs, self.num_rbs)
        rb_user = round_robin(slice_rbs, st.assoc, self.slice_of, st.demand > 0, self.num_rbs)
        return Allocation(slice_rbs, rb_user)

    def step(self, slice_rbs: np.ndarray) -> QosReport:
        """Advance one slot, schedule users within the slice shares, measure QoS."""
        slice_rbs = self._as_batch(slice_rbs)
        check_slice_budget(slice_rbs, self.num_rbs)  # reject before mutating anything
        self.advance()
        return self.evaluate(self.schedule(slice_rbs))

    # ------------------------------------------------------------ physics

    def validate(self, alloc: Allocation) -> None:
        st = self._require_state()
        check_slice_budget(alloc.slice_rbs, self.num_rbs)
        if alloc.rb_user.shape != (self.n_replicas, self.n_dus, self.num_rbs):
            raise ConstraintViolation(f"rb_user has shape {alloc.rb_user.shape}")
        owner = rb_owner(alloc.slice_rbs, self.num_rbs)
        held = alloc.rb_user >= 0
        if np.any(alloc.rb_user >= self.n_users):
            raise ConstraintViolation("unknown user index in rb_user")
        u = np.where(held, alloc.rb_user, 0)
        r_idx = np.arange(self.n_replicas)[:, None, None]
        m_idx = np.arange(self.n_dus)[None, :, None]
        if np.any(held & (owner < 0)):
            raise ConstraintViolation("user holds an RB that no slice owns")
        if np.any(held & (self.slice_of[u] != owner)):
            raise ConstraintViolation("user holds an RB outside its slice's block")
        if np.any(held & (st.assoc[r_idx, u] != m_idx)):
            raise ConstraintViolation("user holds an RB of a DU it is not attached to")

    def evaluate(self, alloc: Allocation, validate: bool = True) -> QosReport:
        """Rates, delays and per-slice QoS of ``alloc`` on the current state, fresh fading."""
        if validate:
            self.validate(alloc)
        st = self.state
        ch = self.cfg.channel
        n_rep, n_dus, n_rbs = alloc.rb_user.shape
        tx = alloc.rb_user >= 0
        u = np.where(tx, alloc.rb_user, 0)
        r_idx = np.arange(n_rep)[:, None, None]
        if self._fading_table is not None:
            fading = self._fading_table[r_idx, u, np.arange(n_rbs)[None, None, :]]
        else:
            fading = np.stack([rng.standard_exponential((n_dus, n_rbs, n_dus)) for rng in self._fad_rngs])
        # gains[r, m, k, j]: from DU j to the user served on RB k of DU m
        gains = self._pathgain[r_idx, u] * fading
        self.last_gains = gains
        rx = gains * self.powers
        signal = np.einsum("rmkm->rmk", rx)
        other_tx = np.transpose(tx, (0, 2, 1))[:, None, :, :] * self._not_own  # tx[r, j, k] for j != m
        interf = (rx * other_tx).sum(axis=-1)
        cap = np.where(tx, ch.rb_bandwidth * np.log2(1.0 + signal / (interf + ch.noise_var)), 0.0)

        flat_user = (np.arange(n_rep)[:, None, None] * self.n_users + u)[tx]
        rate = np.bincount(flat_user, weights=cap[tx], minlength=n_rep * self.n_users).reshape(n_rep, self.n_users)
        return self._qos(rate)

    def _qos(self, rate: np.ndarray) -> QosReport:
        st = self.state
        slot = self.cfg.mobility.slot
        served = np.minimum(rate, st.demand / slot)
        with np.errstate(divide="ignore", invalid="ignore"):
            delay = np.where(st.demand <= 0, 0.0, np.where(rate > 0, st.demand / np.where(rate > 0, rate, 1.0), np.inf))
        counts, served_sum = aggregate_load(st.assoc, self.slice_of, served, self.n_dus, self.n_slices)
        with np.errstate(divide="ignore", invalid="ignore"):
            qos = np.where(counts > 0, served_sum / np.maximum(counts, 1) / 1e6, self.targets)
        violation = np.abs(qos - self.targets)
        return QosReport(qos, rate, served, delay, violation, violation > self.margins, counts)

    # ------------------------------------------------------------ helpers

    def _require_state(self) -> EnvState:
        if self.state is None:
            raise RuntimeError("call reset() first")
        return self.state

    def _as_batch(self, slice_rbs) -> np.ndarray:
        slice_rbs = np.asarray(slice_rbs)
        if slice_rbs.ndim == 2:
            slice_rbs = np.broadcast_to(slice_rbs, (self.n_replicas,) + slice_rbs.shape)
        if slice_rbs.shape != (self.n_replicas, self.n_dus, self.n_slices):
            raise ConstraintViolation(f"slice_rbs must have shape (R, M, L), got {slice_rbs.shape}")
        return slice_rbs

    def equal_split(self) -> np.ndarray:
        counts = realize_allocation(np.zeros(self.n_slices), self.num_rbs)
        return np.broadcast_to(counts, (self.n_replicas, self.n_dus, self.n_slices)).copy()
