"""Slice-level RB shares to concrete RB ownership and per-user assignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConstraintViolation

SHARE_OFFSET = 0.01


@dataclass
class Allocation:
    """RB allocation for every DU of (possibly batched) network instances.

    slice_rbs: (..., M, L) RB counts per slice; slice l owns a contiguous
        block of RBs right after the blocks of slices 0..l-1.
    rb_user: (..., M, K) user index holding each RB, -1 when the RB is idle.
    """

    slice_rbs: np.ndarray
    rb_user: np.ndarray

    def user_rbs(self, user: int, du: int, replica: int = 0) -> list[int]:
        rb_user = self.rb_user if self.rb_user.ndim == 2 else self.rb_user[replica]
        return [int(k) for k in np.flatnonzero(rb_user[du] == user)]


def realize_allocation(raw: np.ndarray, num_rbs: int, delta: float = SHARE_OFFSET) -> np.ndarray:
    """Map tanh-squashed actions in (-1, 1)^L to integer RB counts summing to ``num_rbs``.

    Shares are (raw + 1 + delta) normalised; floors are topped up by largest
    fractional part, ties going to the lower slice index.
    """
    raw = np.clip(np.asarray(raw, dtype=float), -1.0, 1.0)
    w = raw + 1.0 + delta
    exact = w / w.sum(axis=-1, keepdims=True) * num_rbs
    base = np.floor(exact).astype(np.int64)
    remainder = num_rbs - base.sum(axis=-1, keepdims=True)
    order = np.argsort(-(exact - base), axis=-1, kind="stable")
    rank = np.argsort(order, axis=-1, kind="stable")
    return base + (rank < remainder)


def rb_owner(slice_rbs: np.ndarray, num_rbs: int) -> np.ndarray:
    """(..., L) counts -> (..., K) owning slice per RB, -1 where unowned."""
    ends = np.cumsum(slice_rbs, axis=-1)
    k = np.arange(num_rbs)
    owner = (k[..., :] >= ends[..., :, None]).sum(axis=-2)
    return np.where(owner < slice_rbs.shape[-1], owner, -1)


def check_slice_budget(slice_rbs: np.ndarray, num_rbs: int) -> None:
    slice_rbs = np.asarray(slice_rbs)
    if not np.issubdtype(slice_rbs.dtype, np.integer):
        raise ConstraintViolation("slice RB counts must be integers")
    if np.any(slice_rbs < 0):
        raise ConstraintViolation("negative slice RB count")
    total = slice_rbs.sum(axis=-1)
    if np.any(total > num_rbs):
        raise ConstraintViolation(f"slices claim {int(total.max())} RBs but only {num_rbs} exist")


def schedule_users(slice_rbs, members: Iterable[tuple[int, int, float]]) -> dict[int, list[int]]:
    """Round-robin RBs inside each slice's block among that slice's active users.

    ``members`` holds (user_id, slice_id, demand) for users attached to one
    DU. Users with zero demand get nothing. Reference version of
    :func:`round_robin` for a single DU.
    """
    slice_rbs = [int(c) for c in slice_rbs]
    active: dict[int, list[int]] = {sl: [] for sl in range(len(slice_rbs))}
    for user, sl, dem in sorted(members):
        if dem > 0:
            active[sl].append(user)
    out: dict[int, list[int]] = {}
    start = 0
    for sl, count in enumerate(slice_rbs):
        users = active[sl]
        for j in range(count):
            if users:
                out.setdefault(users[j % len(users)], []).append(start + j)
        start += count
    return out


def round_robin(slice_rbs: np.ndarray, assoc: np.ndarray, slice_of: np.ndarray, active: np.ndarray,
                num_rbs: int) -> np.ndarray:
    """Vectorised :func:`schedule_users` over replicas and DUs.

    slice_rbs (R, M, L); assoc, active (R, N); slice_of (N,). Returns
    rb_user (R, M, K).
    """
    n_rep, n_dus, n_slices = slice_rbs.shape
    owner = rb_owner(slice_rbs, num_rbs)
    starts = np.cumsum(slice_rbs, axis=-1) - slice_rbs
    group = (np.arange(n_rep)[:, None] * n_dus + assoc) * n_slices + slice_of[None, :]
    rep_idx, user_idx = np.nonzero(active)
    g_act = group[rep_idx, user_idx]
    order = np.argsort(g_act, kind="stable")
    sorted_users = user_idx[order]
    n_groups = n_rep * n_dus * n_slices
    n_act = np.bincount(g_act, minlength=n_groups)
    g_start = np.cumsum(n_act) - n_act

    owned = owner >= 0
    l_idx = np.where(owned, owner, 0)
    rb_group = (np.arange(n_rep)[:, None, None] * n_dus + np.arange(n_dus)[None, :, None]) * n_slices + l_idx
    cnt = n_act[rb_group]
    offset = np.arange(num_rbs) - np.take_along_axis(starts, l_idx, axis=-1)
    use = owned & (cnt > 0)
    pick = g_start[rb_group] + np.where(use, offset % np.maximum(cnt, 1), 0)
    rb_user = np.full(owner.shape, -1, dtype=np.int64)
    rb_user[use] = sorted_users[pick[use]]
    return rb_user
