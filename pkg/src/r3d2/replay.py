"""Prioritized episodic replay.

Whole per-seat episodes are stored (at most 80 steps each) in a ring of
slots.  Sampling is proportional to ``priority ** alpha`` through a sum
tree; parents are always recomputed from their two children, so every
internal node is exactly the float sum of its children.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from r3d2.qnet import EpisodeBatch
from r3d2.textenc import PAD

logger = logging.getLogger(__name__)

MAX_TRAJECTORY_LENGTH = 80


class NotReadyError(RuntimeError):
    pass


@dataclass(frozen=True)
class Trajectory:
    """One seat's view of one game.

    obs[t] holds observation token ids; candidates[t] is a (K_t, La) array of
    candidate action token ids (PAD-filled rows); actions[t] indexes into it.
    rewards[t] is the team reward accrued from this seat's turn t up to its
    next turn.
    """

    player_count: int
    obs: tuple[np.ndarray, ...]
    candidates: tuple[np.ndarray, ...]
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        n = len(self.obs)
        if not (len(self.candidates) == len(self.actions) == len(self.rewards) == n):
            raise ValueError("trajectory streams have different lengths")
        if n == 0:
            raise ValueError("empty trajectory")
        for t, (cands, a) in enumerate(zip(self.candidates, self.actions)):
            if not 0 <= int(a) < len(cands):
                raise ValueError(f"step {t}: chosen index {a} outside {len(cands)} candidates")

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))


class SumTree:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.leaf_base = 1
        while self.leaf_base < capacity:
            self.leaf_base *= 2
        self.nodes = np.zeros(2 * self.leaf_base, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def __getitem__(self, slot: int) -> float:
        return float(self.nodes[self.leaf_base + slot])

    def leaves(self) -> np.ndarray:
        return self.nodes[self.leaf_base : self.leaf_base + self.capacity]

    def update(self, slot: int, value: float) -> None:
        if value < 0 or not np.isfinite(value):
            raise ValueError(f"invalid priority {value}")
        i = self.leaf_base + slot
        nodes = self.nodes
        nodes[i] = value
        i //= 2
        while i:
            nodes[i] = nodes[2 * i] + nodes[2 * i + 1]
            i //= 2

    def find(self, mass: float) -> int:
        """Slot whose cumulative-mass interval contains `mass`; never a zero leaf."""
        nodes = self.nodes
        i = 1
        while i < self.leaf_base:
            left = 2 * i
            if mass < nodes[left] or nodes[left + 1] == 0.0:
                i = left
            else:
                mass -= nodes[left]
                i = left + 1
        return i - self.leaf_base


@dataclass
class SampledBatch:
    trajectories: list[Trajectory]
    weights: np.ndarray
    slots: np.ndarray
    keys: np.ndarray  # insertion counters, used to detect stale slots


def mixed_priority(td_errors: np.ndarray, eta: float = 0.9) -> float:
    abs_err = np.abs(np.asarray(td_errors, dtype=np.float64))
    if abs_err.size == 0:
        return 0.0
    return float(eta * abs_err.max() + (1.0 - eta) * abs_err.mean())


class PrioritizedReplay:
    def __init__(
        self,
        capacity: int = 50_000,
        alpha: float = 0.9,
        beta: float = 0.6,
        burn_in_frames: int = 10_000,
        eta: float = 0.9,
        max_length: int = MAX_TRAJECTORY_LENGTH,
        seed: int = 0,
    ):
        self.capacity = capacity
        self.alpha = alpha
        self.beta = beta
        self.burn_in_frames = burn_in_frames
        self.eta = eta
        self.max_length = max_length
        self.tree = SumTree(capacity)
        self.priorities = np.zeros(capacity, dtype=np.float64)
        self.slots: list[Optional[Trajectory]] = [None] * capacity
        self.keys = np.full(capacity, -1, dtype=np.int64)
        self.appended = 0
        self.frames = 0
        self.stale_updates = 0
        self.rng = np.random.default_rng(seed)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return min(self.appended, self.capacity)

    @property
    def ready(self) -> bool:
        return self.frames >= self.burn_in_frames and len(self) > 0

    def append(self, traj: Trajectory) -> int:
        if len(traj) > self.max_length:
            raise ValueError(f"trajectory of length {len(traj)} exceeds {self.max_length}")
        with self._lock:
            slot = self.appended % self.capacity
            filled = len(self)
            priority = float(self.priorities[:filled].max()) if filled else 1.0
            self.slots[slot] = traj
            self.keys[slot] = self.appended
            self._set_priority(slot, priority)
            self.appended += 1
            self.frames += len(traj)
            return slot

    def _set_priority(self, slot: int, priority: float) -> None:
        self.priorities[slot] = priority
        self.tree.update(slot, priority**self.alpha if priority > 0 else 0.0)

    def sample(self, batch_size: int = 64, beta: Optional[float] = None) -> SampledBatch:
        beta = self.beta if beta is None else beta
        with self._lock:
            if not self.ready:
                raise NotReadyError(
                    f"replay has {self.frames} frames, needs {self.burn_in_frames} before sampling"
                )
            total = self.tree.total
            if total <= 0:
                raise NotReadyError("all priorities are zero")
            segment = total / batch_size
            marks = (np.arange(batch_size) + self.rng.random(batch_size)) * segment
            slots = np.array([self.tree.find(min(m, np.nextafter(total, 0))) for m in marks])
            probs = np.array([self.tree[s] for s in slots]) / total
            weights = (len(self) * probs) ** (-beta)
            weights /= weights.max()
            return SampledBatch(
                trajectories=[self.slots[s] for s in slots],
                weights=weights,
                slots=slots,
                keys=self.keys[slots].copy(),
            )

    def update_priorities(
        self,
        slots: Sequence[int],
        td_errors: Sequence[np.ndarray],
        keys: Optional[Sequence[int]] = None,
    ) -> None:
        """Set priority = eta*max|d| + (1-eta)*mean|d| over each slot's live steps."""
        with self._lock:
            for i, (slot, errs) in enumerate(zip(slots, td_errors)):
                if keys is not None and self.keys[slot] != keys[i]:
                    self.stale_updates += 1
                    logger.debug("dropping priority update for overwritten slot %d", slot)
                    continue
                self._set_priority(int(slot), mixed_priority(errs, self.eta))

    def dump_metadata(self, path) -> None:
        """JSON lines of per-slot length, player count and priority."""
        with self._lock, open(path, "w") as f:
            for slot in range(len(self)):
                traj = self.slots[slot]
                f.write(
                    json.dumps(
                        {
                            "slot": slot,
                            "length": len(traj),
                            "player_count": traj.player_count,
                            "priority": float(self.priorities[slot]),
                        }
                    )
                    + "\n"
                )


def collate(trajectories: Sequence[Trajectory]) -> EpisodeBatch:
    """Zero-pad a list of trajectories to the batch's own longest episode."""
    B = len(trajectories)
    T = max(len(tr) for tr in trajectories)
    L = max(len(o) for tr in trajectories for o in tr.obs)
    K = max(len(c) for tr in trajectories for c in tr.candidates)
    La = max(c.shape[1] for tr in trajectories for c in tr.candidates)

    obs_ids = np.zeros((B, T, L), dtype=np.int64)
    step_mask = np.zeros((B, T), dtype=bool)
    cand_mask = np.zeros((B, T, K), dtype=bool)
    chosen = np.zeros((B, T), dtype=np.int64)
    rewards = np.zeros((B, T), dtype=np.float32)
    rows: list[np.ndarray] = []
    owners: list[tuple[int, int, int]] = []
    for b, tr in enumerate(trajectories):
        n = len(tr)
        step_mask[b, :n] = True
        chosen[b, :n] = tr.actions
        rewards[b, :n] = tr.rewards
        for t in range(n):
            obs_ids[b, t, : len(tr.obs[t])] = tr.obs[t]
            cands = tr.candidates[t]
            cand_mask[b, t, : len(cands)] = True
            padded = np.zeros((len(cands), La), dtype=np.int64)
            padded[:, : cands.shape[1]] = cands
            rows.append(padded)
            owners.extend((b, t, k) for k in range(len(cands)))
    all_rows = np.concatenate(rows)
    table, inverse = np.unique(all_rows, axis=0, return_inverse=True)
    cand_index = np.zeros((B, T, K), dtype=np.int64)
    bi, ti, ki = np.array(owners).T
    cand_index[bi, ti, ki] = inverse.reshape(-1)
    return EpisodeBatch(
        obs_ids=torch.from_numpy(obs_ids),
        obs_mask=torch.from_numpy(obs_ids != PAD),
        step_mask=torch.from_numpy(step_mask),
        action_ids=torch.from_numpy(table),
        action_mask=torch.from_numpy(table != PAD),
        cand_index=torch.from_numpy(cand_index),
        cand_mask=torch.from_numpy(cand_mask),
        chosen=torch.from_numpy(chosen),
        rewards=torch.from_numpy(rewards),
    )
