"""Per-link radio formulas: path loss with Rayleigh fading, interference,
Shannon rate, transmission delay and slice QoS.

These are the scalar reference forms; :mod:`oranslice.env` evaluates the same
expressions in bulk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ChannelParams, SliceSpec

MIN_DISTANCE = 1.0
INFINITE_DELAY = math.inf


@dataclass(frozen=True)
class DuNode:
    id: int
    position: tuple[float, float]
    tx_power_per_rb: float


def path_gain(distance, path_loss_exp: float):
    return np.maximum(distance, MIN_DISTANCE) ** (-path_loss_exp)


def channel_gain(ue_pos, du: DuNode, rng: np.random.Generator, path_loss_exp: float = 3.0) -> float:
    """d^-eta * |h|^2 with |h|^2 ~ Exp(1); distance clamped to 1 m."""
    d = math.dist(ue_pos, du.position)
    return float(path_gain(d, path_loss_exp) * rng.standard_exponential())


def interference(serving_du: int, rb: int, rb_user: np.ndarray, gains: np.ndarray, powers: np.ndarray) -> float:
    """Sum of p_u * gain over the other DUs that transmit on ``rb``.

    rb_user: (M, K) user per RB (-1 idle) for one network instance.
    gains: (M, K) gain from each DU to the victim UE on each RB.
    """
    total = 0.0
    for m in range(rb_user.shape[0]):
        if m != serving_du and rb_user[m, rb] >= 0:
            total += powers[m] * gains[m, rb]
    return total


def user_rate(rbs, serving_gains: np.ndarray, interference_k: np.ndarray, ch: ChannelParams, power: float) -> float:
    """B * sum_k log2(1 + p g_k / (I_k + sigma^2)) over the user's RBs (bits/s)."""
    total = 0.0
    for k in rbs:
        total += math.log2(1.0 + power * serving_gains[k] / (interference_k[k] + ch.noise_var))
    return ch.rb_bandwidth * total


def user_delay(demand, slice_spec: SliceSpec, rate):
    """Lambda * Z / c, with Lambda counted in packets of ``packet_len`` bits.

    Zero traffic gives zero delay; positive traffic at zero rate gives
    INFINITE_DELAY. Works elementwise on arrays.
    """
    demand = np.asarray(demand, dtype=float)
    rate = np.asarray(rate, dtype=float)
    bits = demand * slice_spec.packet_len
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(demand <= 0, 0.0, np.where(rate > 0, bits / np.where(rate > 0, rate, 1.0), INFINITE_DELAY))
    return float(out) if out.ndim == 0 else out


def served_rate(rate, demand_bits, slot: float):
    """Throughput the user can actually use: min(c, offered bits / slot)."""
    return np.minimum(rate, np.asarray(demand_bits, dtype=float) / slot)


def slice_qos(rates, demand_bits, slice_spec: SliceSpec, slot: float = 1.0) -> float:
    """Mean demand-capped throughput of the member users, in Mbps.

    An empty slice reports its target, i.e. no violation.
    """
    rates = np.asarray(rates, dtype=float)
    if rates.size == 0:
        return slice_spec.qos_target
    return float(np.mean(served_rate(rates, demand_bits, slot)) / 1e6)
