"""UE mobility and Markov-modulated traffic demand.

Users move with a speed redrawn every step from U[10, 20] m/s and a heading
perturbed by one of seven fixed offsets; they bounce off the area edges.
Each user sits in one of four traffic modes that switches with a small
probability per step; the mode scales the slice's mean demand.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

MODES = ("idle", "low", "mid", "high")
DIRECTION_OFFSETS = np.array([-np.pi / 3, -np.pi / 6, -np.pi / 12, 0.0, np.pi / 12, np.pi / 6, np.pi / 3])


@dataclass(frozen=True)
class UeState:
    id: int
    slice: int
    position: tuple[float, float]
    speed: float
    direction: float
    mode: int  # index into MODES


def reflect(pos: np.ndarray, heading: np.ndarray, bounds: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Mirror positions that left [0, W] x [0, H] back inside, flipping the heading."""
    pos = pos.copy()
    heading = heading.copy()
    for axis, limit in enumerate(bounds):
        coord = pos[..., axis]
        low, high = coord < 0, coord > limit
        coord[low] = -coord[low]
        coord[high] = 2 * limit - coord[high]
        hit = low | high
        heading[hit] = (np.pi - heading[hit]) if axis == 0 else -heading[hit]
        np.clip(coord, 0.0, limit, out=coord)
    return pos, np.mod(heading, 2 * np.pi)


def move(pos: np.ndarray, speed: np.ndarray, heading: np.ndarray, dt: float, bounds: tuple[float, float],
         rng: np.random.Generator, speed_range: tuple[float, float] = (10.0, 20.0)):
    """One kinematic step for arrays of users, then redraw speed and heading.

    Returns new (pos, speed, heading). Draws exactly two arrays from ``rng``
    (speeds, then offset indices) whatever the outcome.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    step = np.stack([np.cos(heading), np.sin(heading)], axis=-1) * (speed * dt)[..., None]
    pos, heading = reflect(pos + step, heading, bounds)
    new_speed = rng.uniform(speed_range[0], speed_range[1], size=speed.shape)
    offsets = DIRECTION_OFFSETS[rng.integers(0, len(DIRECTION_OFFSETS), size=heading.shape)]
    return pos, new_speed, np.mod(heading + offsets, 2 * np.pi)


def move_ue(ue: UeState, dt: float, bounds: tuple[float, float], rng: np.random.Generator,
            speed_range: tuple[float, float] = (10.0, 20.0)) -> UeState:
    pos, speed, heading = move(np.array([ue.position], dtype=float), np.array([ue.speed]),
                               np.array([ue.direction]), dt, bounds, rng, speed_range)
    return replace(ue, position=(float(pos[0, 0]), float(pos[0, 1])), speed=float(speed[0]),
                   direction=float(heading[0]))


def step_modes(modes: np.ndarray, switch_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Each mode jumps with ``switch_prob`` to a uniformly chosen *different* mode."""
    u = rng.random(size=modes.shape)
    jump = rng.integers(1, len(MODES), size=modes.shape)
    return np.where(u < switch_prob, (modes + jump) % len(MODES), modes)


def step_traffic_mode(mode: int, rng: np.random.Generator, switch_prob: float = 0.01) -> int:
    return int(step_modes(np.array([mode]), switch_prob, rng)[0])


def demand(mode, mean_demand, slot: float = 1.0, multipliers=(0.0, 0.5, 1.0, 1.5)):
    """Bits offered in one slot: mode multiplier x slice mean rate x slot length."""
    return np.asarray(multipliers, dtype=float)[mode] * mean_demand * slot


def aggregate_load(assoc: np.ndarray, slice_of: np.ndarray, bits: np.ndarray, n_dus: int, n_slices: int):
    """Per-DU per-slice user counts and summed demand.

    ``assoc`` and ``bits`` have shape (..., N); results are (..., M, L).
    """
    lead = assoc.shape[:-1]
    reps = int(np.prod(lead)) if lead else 1
    key = (np.arange(reps).reshape(lead + (1,)) * n_dus + assoc) * n_slices + slice_of
    size = reps * n_dus * n_slices
    counts = np.bincount(key.ravel(), minlength=size).reshape(lead + (n_dus, n_slices))
    loads = np.bincount(key.ravel(), weights=bits.ravel(), minlength=size).reshape(lead + (n_dus, n_slices))
    return counts, loads


# ---------------------------------------------------------------- trace files

UE_TRACE_HEADER = ("step", "user", "slice", "x", "y", "mode", "demand_bits")
LOAD_TRACE_HEADER = ("step", "du_id", "slice_id", "n_users", "load_bits")


def write_ue_trace(path: str | Path, rows) -> None:
    """rows: iterable of (step, user, slice, x, y, mode_index, bits)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(UE_TRACE_HEADER)
        for step, user, sl, x, y, mode, bits in rows:
            w.writerow([step, user, sl, repr(float(x)), repr(float(y)), MODES[mode], repr(float(bits))])


def write_load_trace(path: str | Path, counts: np.ndarray, loads: np.ndarray) -> None:
    """counts, loads: (T, M, L) arrays."""
    steps, n_dus, n_slices = counts.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOAD_TRACE_HEADER)
        for t in range(steps):
            for m in range(n_dus):
                for sl in range(n_slices):
                    w.writerow([t, m, sl, int(counts[t, m, sl]), repr(float(loads[t, m, sl]))])


def read_load_trace(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_load_trace`; returns (counts, loads) as (T, M, L)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(LOAD_TRACE_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = [(int(r["step"]), int(r["du_id"]), int(r["slice_id"]), float(r["n_users"]), float(r["load_bits"]))
                for r in reader]
    if not rows:
        raise ValueError(f"{path}: empty trace")
    arr = np.array(rows)
    steps, n_dus, n_slices = (int(arr[:, i].max()) + 1 for i in range(3))
    counts = np.zeros((steps, n_dus, n_slices))
    loads = np.zeros((steps, n_dus, n_slices))
    idx = arr[:, :3].astype(int)
    counts[idx[:, 0], idx[:, 1], idx[:, 2]] = arr[:, 3]
    loads[idx[:, 0], idx[:, 1], idx[:, 2]] = arr[:, 4]
    return counts, loads
