"""
Replay memories for off-policy training.

``UniformReplayMemory`` is the classic ring buffer: every stored transition
is equally likely to be drawn, so a state-action pair that was visited k
times is drawn k times as often. ``StratifiedReplayMemory`` cancels that
multiplicity bias with a two-step draw: first a state-action key uniformly
among the keys currently stored, then a slot uniformly among that key's
transitions. Both insert and sample run in O(1).
"""

import logging
import struct
from abc import ABC, abstractmethod
from collections import Counter
from collections.abc import Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, EmptyMemoryError
from schemas import ReplayStats, SamplerKind

logger = logging.getLogger(__name__)

TransitionKey = bytes

_KEY_FORMAT = struct.Struct("<qq")


def transition_key(state: int, action: int) -> TransitionKey:
    """Canonical byte encoding of a (state, action) pair."""
    return _KEY_FORMAT.pack(state, action)


# --- Transitions ---


@dataclass(frozen=True, slots=True)
class Transition:
    """One experience tuple (s, a, r, s', terminal)."""

    state: int
    action: int
    reward: float
    next_state: int
    terminal: bool

    @property
    def key(self) -> TransitionKey:
        return transition_key(self.state, self.action)


@dataclass(frozen=True)
class TransitionBatch:
    """Struct-of-arrays view of a minibatch."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "TransitionBatch":
        """Pack a sequence of transitions into parallel arrays."""
        return cls(
            states=np.fromiter((t.state for t in transitions), dtype=np.int64),
            actions=np.fromiter((t.action for t in transitions), dtype=np.int64),
            rewards=np.fromiter((t.reward for t in transitions), dtype=np.float64),
            next_states=np.fromiter((t.next_state for t in transitions), dtype=np.int64),
            terminals=np.fromiter((t.terminal for t in transitions), dtype=np.bool_),
        )

    def __len__(self) -> int:
        return len(self.states)


# --- Per-key queue ---


class SlotQueue:
    """
    Indexable FIFO of slot indices backed by a growable ring.

    push_back is amortised O(1); pop_front and random access are O(1).
    """

    __slots__ = ("_items", "_head", "_size")

    def __init__(self, initial_capacity: int = 2) -> None:
        self._items: list[int] = [0] * max(initial_capacity, 1)
        self._head = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def __bool__(self) -> bool:
        return self._size > 0

    def __getitem__(self, position: int) -> int:
        if not 0 <= position < self._size:
            raise IndexError(f"position {position} out of range for queue of {self._size}")
        return self._items[(self._head + position) % len(self._items)]

    def __iter__(self) -> Iterator[int]:
        width = len(self._items)
        for offset in range(self._size):
            yield self._items[(self._head + offset) % width]

    def __repr__(self) -> str:
        return f"SlotQueue({list(self)})"

    def front(self) -> int:
        """Oldest slot index in the queue."""
        if not self._size:
            raise IndexError("front of empty SlotQueue")
        return self._items[self._head]

    def push_back(self, slot: int) -> None:
        """Append a slot index at the back (newest end)."""
        if self._size == len(self._items):
            self._grow()
        self._items[(self._head + self._size) % len(self._items)] = slot
        self._size += 1

    def pop_front(self) -> int:
        """Remove and return the oldest slot index."""
        if not self._size:
            raise IndexError("pop from empty SlotQueue")
        slot = self._items[self._head]
        self._head = (self._head + 1) % len(self._items)
        self._size -= 1
        return slot

    def _grow(self) -> None:
        self._items = list(self) + [0] * len(self._items)
        self._head = 0


# --- Memories ---


def _uniform_index(rng: np.random.Generator, n: int) -> int:
    # Exactly one float draw, also when n == 1.
    return min(int(rng.random() * n), n - 1)


def _uniform_indices(rng: np.random.Generator, highs: np.ndarray) -> np.ndarray:
    """One float draw per entry, mapped onto ``[0, highs[i])``."""
    highs = np.asarray(highs, dtype=np.int64)
    scaled = (rng.random(highs.shape) * highs).astype(np.int64)
    return np.minimum(scaled, highs - 1)


class ReplayMemory(ABC):
    """Fixed array of ``capacity`` slots written in circular order."""

    kind: SamplerKind

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ConfigError(f"replay capacity must be at least 1, got {capacity}")
        self._capacity = capacity
        self._slots: list[Transition | None] = [None] * capacity
        self._cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def __getitem__(self, slot: int) -> Transition:
        transition = self._slots[slot]
        if transition is None:
            raise IndexError(f"slot {slot} is empty")
        return transition

    @property
    def capacity(self) -> int:
        return self._capacity

    @property
    def cursor(self) -> int:
        return self._cursor

    @property
    def is_full(self) -> bool:
        return self._size == self._capacity

    def occupied_slots(self) -> range:
        """Occupied slot indices; occupancy is always a prefix or the whole array."""
        return range(self._size)

    def _require_samples(self) -> None:
        if not self._size:
            raise EmptyMemoryError("cannot sample from an empty replay memory")

    @abstractmethod
    def insert(self, transition: Transition) -> None:
        """Store a transition, evicting the oldest one when full."""

    @abstractmethod
    def sample(self, rng: np.random.Generator) -> Transition:
        """Draw one transition according to the memory's sampling law."""

    @abstractmethod
    def sample_indices(self, rng: np.random.Generator, m: int) -> np.ndarray:
        """Draw ``m`` slot indices with replacement according to the sampling law."""

    @abstractmethod
    def exact_distribution(self) -> dict[int, float]:
        """Probability of drawing each occupied slot."""

    @abstractmethod
    def stats(self) -> ReplayStats:
        """Occupancy and redundancy statistics."""

    def sample_batch(self, rng: np.random.Generator, m: int) -> list[Transition]:
        """
        Draw ``m`` transitions independently, with replacement.

        Args:
            rng: Replay sampling stream
            m: Batch size; 0 yields an empty list

        Returns:
            list[Transition]: The sampled transitions

        Raises:
            EmptyMemoryError: If ``m > 0`` and the memory is empty
        """
        return [self._slots[j] for j in self.sample_indices(rng, m)]  # type: ignore[misc]

    def gather(self, indices: Sequence[int] | np.ndarray) -> TransitionBatch:
        """Pack the transitions at ``indices`` into a batch."""
        return TransitionBatch.from_transitions([self[int(j)] for j in indices])

    def _write(self, transition: Transition) -> int:
        slot = self._cursor
        self._slots[slot] = transition
        self._cursor = (slot + 1) % self._capacity
        return slot


class UniformReplayMemory(ReplayMemory):
    """Ring buffer sampled uniformly over occupied slots."""

    kind = SamplerKind.UNIFORM

    def insert(self, transition: Transition) -> None:
        if self._size < self._capacity:
            self._size += 1
        self._write(transition)

    def sample(self, rng: np.random.Generator) -> Transition:
        self._require_samples()
        return self._slots[_uniform_index(rng, self._size)]  # type: ignore[return-value]

    def sample_indices(self, rng: np.random.Generator, m: int) -> np.ndarray:
        if m < 0:
            raise ValueError(f"batch size must be non-negative, got {m}")
        if m == 0:
            return np.empty(0, dtype=np.int64)
        self._require_samples()
        return _uniform_indices(rng, np.full(m, self._size))

    def exact_distribution(self) -> dict[int, float]:
        if not self._size:
            return {}
        probability = 1.0 / self._size
        return {slot: probability for slot in self.occupied_slots()}

    def stats(self) -> ReplayStats:
        # Full scan; statistics are never on the sampling path.
        counts = Counter(self[slot].key for slot in self.occupied_slots())
        return _make_stats(self._size, self._capacity, len(counts), max(counts.values(), default=0))


class StratifiedReplayMemory(ReplayMemory):
    """
    Replay memory with two-step stratified sampling.

    Each stored (state, action) key maps to a queue of the slots that hold
    its transitions, oldest first. A dense key registry with swap-remove
    deletion makes the uniform key draw O(1).
    """

    kind = SamplerKind.STRATIFIED

    def __init__(self, capacity: int) -> None:
        super().__init__(capacity)
        self._slot_keys: list[TransitionKey | None] = [None] * capacity
        self._queues: dict[TransitionKey, SlotQueue] = {}
        self._registry: list[TransitionKey] = []
        self._registry_position: dict[TransitionKey, int] = {}

    @property
    def num_keys(self) -> int:
        return len(self._registry)

    @property
    def key_registry(self) -> tuple[TransitionKey, ...]:
        return tuple(self._registry)

    def registry_position(self, key: TransitionKey) -> int:
        return self._registry_position[key]

    def keys(self) -> Iterator[TransitionKey]:
        return iter(self._queues)

    def queue(self, key: TransitionKey) -> tuple[int, ...]:
        """Slot indices stored under ``key``, oldest first."""
        return tuple(self._queues[key])

    def insert(self, transition: Transition) -> None:
        slot = self._cursor
        if self._size == self._capacity:
            self._evict(slot)
        else:
            self._size += 1

        key = transition_key(transition.state, transition.action)
        queue = self._queues.get(key)
        if queue is None:
            queue = self._queues[key] = SlotQueue()
            self._registry_position[key] = len(self._registry)
            self._registry.append(key)
        queue.push_back(slot)
        self._slot_keys[slot] = key
        self._write(transition)

    def _evict(self, slot: int) -> None:
        key = self._slot_keys[slot]
        assert key is not None
        queue = self._queues[key]
        # Circular writes keep each queue in global age order.
        evicted = queue.pop_front()
        assert evicted == slot, f"evicted slot {evicted}, expected {slot}"
        if not queue:
            del self._queues[key]
            self._unregister(key)

    def _unregister(self, key: TransitionKey) -> None:
        position = self._registry_position.pop(key)
        last = self._registry.pop()
        if position < len(self._registry):
            self._registry[position] = last
            self._registry_position[last] = position

    def sample(self, rng: np.random.Generator) -> Transition:
        self._require_samples()
        queue = self._queues[self._registry[_uniform_index(rng, len(self._registry))]]
        return self._slots[queue[_uniform_index(rng, len(queue))]]  # type: ignore[return-value]

    def sample_indices(self, rng: np.random.Generator, m: int) -> np.ndarray:
        if m < 0:
            raise ValueError(f"batch size must be non-negative, got {m}")
        if m == 0:
            return np.empty(0, dtype=np.int64)
        self._require_samples()
        positions = _uniform_indices(rng, np.full(m, len(self._registry)))
        queues = [self._queues[self._registry[position]] for position in positions]
        lengths = np.fromiter((len(queue) for queue in queues), dtype=np.int64, count=m)
        offsets = _uniform_indices(rng, lengths)
        return np.fromiter(
            (queue[int(offset)] for queue, offset in zip(queues, offsets)),
            dtype=np.int64,
            count=m,
        )

    def exact_distribution(self) -> dict[int, float]:
        num_keys = len(self._registry)
        distribution: dict[int, float] = {}
        for queue in self._queues.values():
            probability = 1.0 / (num_keys * len(queue))
            for slot in queue:
                distribution[slot] = probability
        return dict(sorted(distribution.items()))

    def stats(self) -> ReplayStats:
        max_multiplicity = max((len(queue) for queue in self._queues.values()), default=0)
        return _make_stats(self._size, self._capacity, len(self._registry), max_multiplicity)


def _make_stats(size: int, capacity: int, num_keys: int, max_multiplicity: int) -> ReplayStats:
    return ReplayStats(
        size=size,
        capacity=capacity,
        num_keys=num_keys,
        max_multiplicity=max_multiplicity,
        redundancy_fraction=(size - num_keys) / size if size else 0.0,
    )


def make_memory(sampler: SamplerKind, capacity: int) -> ReplayMemory:
    """Build an empty replay memory with the requested sampling law."""
    memory: ReplayMemory
    if sampler is SamplerKind.STRATIFIED:
        memory = StratifiedReplayMemory(capacity)
    else:
        memory = UniformReplayMemory(capacity)
    logger.debug("Created %s replay memory with capacity %d", sampler.value, capacity)
    return memory
