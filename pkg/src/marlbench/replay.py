"""Experience replay: ring-buffer storage and batch index strategies.

Storage is structure-of-arrays so a batch gather touches five flat numpy
arrays. Two index strategies are provided: independent uniform draws, and
windowed neighbor sampling that expands a handful of anchor indices into
contiguous index runs, which keeps most of the gather sequential in memory.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_SNAP_MAGIC = b"RBUF"
_SNAP_VERSION = 1


class InsufficientDataError(ValueError):
    """Raised when neighbor sampling cannot assemble a full batch."""


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool


@dataclass
class BatchArrays:
    """One sampled mini-batch: five aligned arrays of equal length."""

    obses_t: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    obses_tp1: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return self.obses_t.shape[0]


class ReplayBuffer:
    """Fixed-capacity ring buffer over five parallel arrays.

    Once full, each insert overwrites the oldest slot. Insertion order is
    therefore also (wrapped) memory order, which neighbor sampling relies on.
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        if obs_dim < 1 or act_dim < 1:
            raise ValueError(f"invalid dims obs={obs_dim} act={act_dim}")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def add(self, transition: Transition) -> None:
        obs = np.asarray(transition.obs, dtype=np.float64)
        act = np.asarray(transition.action, dtype=np.float64)
        next_obs = np.asarray(transition.next_obs, dtype=np.float64)
        if obs.shape != (self.obs_dim,) or next_obs.shape != (self.obs_dim,):
            raise ValueError(
                f"observation shape {obs.shape}/{next_obs.shape}, expected ({self.obs_dim},)"
            )
        if act.shape != (self.act_dim,):
            raise ValueError(f"action shape {act.shape}, expected ({self.act_dim},)")
        i = self.cursor
        self.obs[i] = obs
        self.act[i] = act
        self.rew[i] = float(transition.reward)
        self.next_obs[i] = next_obs
        self.done[i] = 1.0 if transition.done else 0.0
        self.cursor = (i + 1) % self.capacity
        if self.size < self.capacity:
            self.size += 1

    def bulk_load(
        self,
        obs: np.ndarray,
        act: np.ndarray,
        rew: np.ndarray,
        next_obs: np.ndarray,
        done: np.ndarray,
    ) -> None:
        """Overwrite the first k slots wholesale and set size = k."""
        k = obs.shape[0]
        if k > self.capacity:
            raise ValueError(f"bulk load of {k} rows exceeds capacity {self.capacity}")
        shapes = (obs.shape, act.shape, rew.shape, next_obs.shape, done.shape)
        expected = ((k, self.obs_dim), (k, self.act_dim), (k,), (k, self.obs_dim), (k,))
        if shapes != expected:
            raise ValueError(f"bulk load shapes {shapes}, expected {expected}")
        self.obs[:k] = obs
        self.act[:k] = act
        self.rew[:k] = rew
        self.next_obs[:k] = next_obs
        self.done[:k] = done
        self.size = k
        self.cursor = k % self.capacity


def make_index_uniform(rng: np.random.Generator, k: int, length: int) -> np.ndarray:
    """Draw k indices uniformly with replacement from [0, length)."""
    if length < 1:
        raise ValueError("cannot sample from an empty buffer")
    if k < 1:
        raise ValueError(f"sample count must be >= 1, got {k}")
    return rng.integers(0, length, size=k, dtype=np.int64)


def neighbor_window(i: int, n: int, d: int) -> np.ndarray:
    """Ascending indices within distance n of anchor i, excluding i itself.

    The window is clamped to [0, d), so anchors near either edge yield
    shorter windows.
    """
    if n < 1:
        raise ValueError(f"neighbor radius must be >= 1, got {n}")
    if not 0 <= i < d:
        raise IndexError(f"anchor {i} outside buffer range [0, {d})")
    lo = i - n if i >= n else 0
    hi = min(d, i + n + 1)
    return np.concatenate([np.arange(lo, i, dtype=np.int64),
                           np.arange(i + 1, hi, dtype=np.int64)])


_OFFSETS_CACHE: dict[int, np.ndarray] = {}


def _offsets(n: int) -> np.ndarray:
    offs = _OFFSETS_CACHE.get(n)
    if offs is None:
        offs = np.concatenate([np.arange(-n, 0, dtype=np.int64),
                               np.arange(1, n + 1, dtype=np.int64)])
        _OFFSETS_CACHE[n] = offs
    return offs


def neighbor_indices(anchors: np.ndarray, length: int, n: int, b: int) -> np.ndarray:
    """Expand anchors into the raw (pre-truncation) neighbor index sequence.

    Anchors are consumed in order; each contributes its full clamped window.
    Consumption stops after the first anchor that brings the running count to
    b or beyond, so the result length lies in [b, b + 2n - 1). Anchors whose
    windows would be needed but are unavailable raise InsufficientDataError.

    When every consumed anchor sits at least n away from both edges, all
    windows are exactly 2n wide and the expansion reduces to one broadcast
    add, which is the hot path during training.
    """
    if n < 1:
        raise ValueError(f"neighbor radius must be >= 1, got {n}")
    if b < 1:
        raise ValueError(f"batch size must be >= 1, got {b}")
    if length < 1:
        raise ValueError("cannot sample from an empty buffer")
    anchors = np.asarray(anchors, dtype=np.int64)
    if anchors.size and (anchors.min() < 0 or anchors.max() >= length):
        raise IndexError(f"anchor outside buffer range [0, {length})")
    m = -(-b // (2 * n))
    if anchors.size >= m:
        head = anchors[:m]
        if head.min() >= n and head.max() < length - n:
            return (head[:, None] + _offsets(n)[None, :]).ravel()
    out: list[np.ndarray] = []
    count = 0
    for i in anchors:
        w = neighbor_window(int(i), n, length)
        out.append(w)
        count += w.size
        if count >= b:
            break
    if count < b:
        raise InsufficientDataError(
            f"anchors yielded {count} indices, need {b} (length={length}, n={n})"
        )
    return np.concatenate(out)


def gather(buffer: ReplayBuffer, indices: np.ndarray) -> BatchArrays:
    """Copy the records at the given indices out of the buffer."""
    if buffer.size == 0:
        raise ValueError("cannot gather from an empty buffer")
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= buffer.size):
        raise IndexError(f"index outside filled range [0, {buffer.size})")
    return BatchArrays(
        obses_t=buffer.obs[indices],
        actions=buffer.act[indices],
        rewards=buffer.rew[indices],
        obses_tp1=buffer.next_obs[indices],
        dones=buffer.done[indices],
    )


def neighbor_batch(
    anchors: np.ndarray,
    buffer: ReplayBuffer,
    n: int,
    b: int,
) -> BatchArrays:
    """Collect a neighbor-sampled batch of exactly b records."""
    idx = neighbor_indices(anchors, buffer.size, n, b)
    return gather(buffer, idx[:b])


def collect_joint(buffers: list[ReplayBuffer], indices: np.ndarray) -> list[BatchArrays]:
    """Apply one index set to every agent's buffer, keeping rows time-aligned.

    All buffers must hold the same number of records; agents insert in
    lockstep so index k addresses the same environment step everywhere.
    """
    if not buffers:
        raise ValueError("collect_joint needs at least one buffer")
    lengths = {buf.size for buf in buffers}
    if len(lengths) != 1:
        raise ValueError(f"buffers misaligned, lengths {sorted(lengths)}")
    return [gather(buf, indices) for buf in buffers]


def save_snapshot(buffer: ReplayBuffer, path: str) -> None:
    """Dump the filled region to a versioned little-endian binary file."""
    k = buffer.size
    header = _SNAP_MAGIC + struct.pack(
        "<HQQQII",
        _SNAP_VERSION,
        buffer.capacity,
        k,
        buffer.cursor,
        buffer.obs_dim,
        buffer.act_dim,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (buffer.obs[:k], buffer.act[:k], buffer.rew[:k],
                    buffer.next_obs[:k], buffer.done[:k]):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_snapshot(path: str) -> ReplayBuffer:
    with open(path, "rb") as fh:
        blob = fh.read()
    head_len = len(_SNAP_MAGIC) + struct.calcsize("<HQQQII")
    if len(blob) < head_len or blob[: len(_SNAP_MAGIC)] != _SNAP_MAGIC:
        raise ValueError("not a replay snapshot file")
    version, capacity, size, cursor, obs_dim, act_dim = struct.unpack(
        "<HQQQII", blob[len(_SNAP_MAGIC) : head_len]
    )
    if version != _SNAP_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    buf = ReplayBuffer(int(capacity), int(obs_dim), int(act_dim))
    counts = [size * obs_dim, size * act_dim, size, size * obs_dim, size]
    expected = head_len + 8 * sum(counts)
    if len(blob) != expected:
        raise ValueError(f"snapshot length {len(blob)}, expected {expected}")
    offset = head_len
    arrays = []
    for count in counts:
        arrays.append(np.frombuffer(blob, dtype="<f8", count=int(count), offset=offset)
                      .astype(np.float64))
        offset += 8 * int(count)
    k = int(size)
    buf.bulk_load(
        arrays[0].reshape(k, obs_dim),
        arrays[1].reshape(k, act_dim),
        arrays[2],
        arrays[3].reshape(k, obs_dim),
        arrays[4],
    )
    buf.cursor = int(cursor)
    return buf
