"""
Explicit tabular MDPs: Taxi, FrozenLake and seeded random MDPs.

Every environment is a ``TabularMdp`` holding its full transition model,
so the same object drives episodic simulation (``reset`` / ``step``) and
the brute-force oracles.
"""

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple, TextIO

import numpy as np

from errors import ConvergenceError, EpisodeFinishedError, InvalidModelError

logger = logging.getLogger(__name__)

STOCHASTIC_TOLERANCE = 1e-12

TAXI_STEP_LIMIT = 200
FROZENLAKE_STEP_LIMIT = 100
RANDOM_STEP_LIMIT = 100


# --- Model ---


class ModelEntry(NamedTuple):
    """One successor of a state-action pair: Pr(s'|s,a), s', R(s,a,s') and termination."""

    probability: float
    next_state: int
    reward: float
    terminal: bool


class EntryTable(NamedTuple):
    """Every model entry flattened into parallel arrays."""

    states: np.ndarray
    actions: np.ndarray
    probabilities: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray


Model = tuple[tuple[tuple[ModelEntry, ...], ...], ...]


def _canonical_entries(entries: tuple[ModelEntry, ...] | list[ModelEntry]) -> tuple[ModelEntry, ...]:
    merged: dict[tuple[int, float, bool], float] = {}
    for entry in entries:
        signature = (int(entry.next_state), float(entry.reward), bool(entry.terminal))
        merged[signature] = merged.get(signature, 0.0) + float(entry.probability)
    return tuple(
        ModelEntry(probability, next_state, reward, terminal)
        for (next_state, reward, terminal), probability in sorted(merged.items())
    )


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """
    Immutable (S, A, T, R) model.

    ``model[s][a]`` lists the successor entries of (s, a). Entries that
    share (s', r, terminal) are merged and rows are sorted by s', so two
    descriptions of the same dynamics produce identical models.
    """

    name: str
    num_states: int
    num_actions: int
    model: Model
    initial_distribution: np.ndarray
    gamma_default: float = 0.99
    step_limit: int = 100
    _cumulative: tuple[tuple[np.ndarray, ...], ...] = field(init=False, repr=False)
    _initial_cumulative: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.num_states < 1 or self.num_actions < 1:
            raise InvalidModelError("an MDP needs at least one state and one action")
        if len(self.model) != self.num_states or any(
            len(row) != self.num_actions for row in self.model
        ):
            raise InvalidModelError("model must have one entry list per (state, action)")
        if not 0.0 <= self.gamma_default <= 1.0:
            raise InvalidModelError(f"gamma_default {self.gamma_default} outside [0, 1]")
        if self.step_limit < 1:
            raise InvalidModelError("step_limit must be positive")

        model = tuple(tuple(_canonical_entries(entries) for entries in row) for row in self.model)
        for state, row in enumerate(model):
            for action, entries in enumerate(row):
                self._check_entries(state, action, entries)

        initial = np.asarray(self.initial_distribution, dtype=np.float64)
        if initial.shape != (self.num_states,) or np.any(initial < 0.0):
            raise InvalidModelError("initial distribution must be a probability vector over states")
        if abs(initial.sum() - 1.0) > STOCHASTIC_TOLERANCE:
            raise InvalidModelError(f"initial distribution sums to {initial.sum()!r}")
        initial.setflags(write=False)

        cumulative = tuple(
            tuple(np.cumsum([entry.probability for entry in entries]) for entries in row)
            for row in model
        )
        object.__setattr__(self, "model", model)
        object.__setattr__(self, "initial_distribution", initial)
        object.__setattr__(self, "_cumulative", cumulative)
        object.__setattr__(self, "_initial_cumulative", np.cumsum(initial))

    def _check_entries(self, state: int, action: int, entries: tuple[ModelEntry, ...]) -> None:
        if not entries:
            raise InvalidModelError(f"(s={state}, a={action}) has no successors")
        total = 0.0
        for entry in entries:
            if entry.probability < 0.0:
                raise InvalidModelError(f"(s={state}, a={action}) has a negative probability")
            if not 0 <= entry.next_state < self.num_states:
                raise InvalidModelError(
                    f"(s={state}, a={action}) points at invalid state {entry.next_state}"
                )
            total += entry.probability
        if abs(total - 1.0) > STOCHASTIC_TOLERANCE:
            raise InvalidModelError(f"(s={state}, a={action}) probabilities sum to {total!r}")

    def successors(self, state: int, action: int) -> tuple[ModelEntry, ...]:
        return self.model[state][action]

    def with_step_limit(self, step_limit: int) -> "TabularMdp":
        return replace(self, step_limit=step_limit)

    @cached_property
    def entry_table(self) -> EntryTable:
        """All entries as parallel arrays, ordered by (s, a, s')."""
        rows = [
            (state, action, *entry)
            for state, row in enumerate(self.model)
            for action, entries in enumerate(row)
            for entry in entries
        ]
        states, actions, probabilities, next_states, rewards, terminals = zip(*rows)
        return EntryTable(
            states=np.asarray(states, dtype=np.int64),
            actions=np.asarray(actions, dtype=np.int64),
            probabilities=np.asarray(probabilities, dtype=np.float64),
            next_states=np.asarray(next_states, dtype=np.int64),
            rewards=np.asarray(rewards, dtype=np.float64),
            terminals=np.asarray(terminals, dtype=np.bool_),
        )

    @property
    def num_pairs(self) -> int:
        return self.num_states * self.num_actions


def _draw(cumulative: np.ndarray, rng: np.random.Generator) -> int:
    index = int(np.searchsorted(cumulative, rng.random(), side="right"))
    return min(index, len(cumulative) - 1)


# --- Episodes ---


@dataclass
class EpisodeContext:
    """Mutable per-episode state of one simulation."""

    step_limit: int
    current_state: int = 0
    steps_taken: int = 0
    finished: bool = True

    @classmethod
    def for_mdp(cls, mdp: TabularMdp) -> "EpisodeContext":
        return cls(step_limit=mdp.step_limit)


class StepResult(NamedTuple):
    next_state: int
    reward: float
    terminal: bool
    truncated: bool


def reset(mdp: TabularMdp, ctx: EpisodeContext, rng: np.random.Generator) -> int:
    """Start a new episode from the initial distribution."""
    ctx.current_state = _draw(mdp._initial_cumulative, rng)
    ctx.steps_taken = 0
    ctx.finished = False
    return ctx.current_state


def step(mdp: TabularMdp, ctx: EpisodeContext, rng: np.random.Generator, action: int) -> StepResult:
    """
    Advance the episode by one action.

    Args:
        mdp: Environment model
        ctx: Episode being simulated
        rng: Environment dynamics stream (one draw per step)
        action: Action index

    Returns:
        StepResult: Successor, reward, termination and truncation flags

    Raises:
        EpisodeFinishedError: If the episode already ended
    """
    if ctx.finished:
        raise EpisodeFinishedError("episode already finished; call reset first")
    if not 0 <= action < mdp.num_actions:
        raise ValueError(f"action {action} outside [0, {mdp.num_actions})")

    state = ctx.current_state
    entry = mdp.model[state][action][_draw(mdp._cumulative[state][action], rng)]
    ctx.current_state = entry.next_state
    ctx.steps_taken += 1
    truncated = ctx.steps_taken >= ctx.step_limit and not entry.terminal
    ctx.finished = entry.terminal or truncated
    return StepResult(entry.next_state, entry.reward, entry.terminal, truncated)


def one_hot_encode(state: int, num_states: int) -> np.ndarray:
    """Network input for a discrete state."""
    if not 0 <= state < num_states:
        raise ValueError(f"state {state} outside [0, {num_states})")
    vector = np.zeros(num_states, dtype=np.float64)
    vector[state] = 1.0
    return vector


# --- Taxi ---

TAXI_MAP = (
    "+---------+",
    "|R: | : :G|",
    "| : | : : |",
    "| : : : : |",
    "| | : | : |",
    "|Y| : |B: |",
    "+---------+",
)
TAXI_LOCATIONS = ((0, 0), (0, 4), (4, 0), (4, 3))
TAXI_IN_CAR = len(TAXI_LOCATIONS)


def encode_taxi_state(row: int, col: int, passenger: int, destination: int) -> int:
    return ((row * 5 + col) * 5 + passenger) * 4 + destination


def decode_taxi_state(state: int) -> tuple[int, int, int, int]:
    state, destination = divmod(state, 4)
    state, passenger = divmod(state, 5)
    row, col = divmod(state, 5)
    return row, col, passenger, destination


def _taxi_successor(
    row: int, col: int, passenger: int, destination: int, action: int
) -> ModelEntry:
    new_row, new_col, new_passenger = row, col, passenger
    reward = -1.0
    terminal = False
    taxi_location = (row, col)

    if action == 0:
        new_row = min(row + 1, 4)
    elif action == 1:
        new_row = max(row - 1, 0)
    elif action == 2:
        if TAXI_MAP[1 + row][2 * col + 2] == ":":
            new_col = min(col + 1, 4)
    elif action == 3:
        if TAXI_MAP[1 + row][2 * col] == ":":
            new_col = max(col - 1, 0)
    elif action == 4:
        if passenger < TAXI_IN_CAR and taxi_location == TAXI_LOCATIONS[passenger]:
            new_passenger = TAXI_IN_CAR
        else:
            reward = -10.0
    elif action == 5:
        if taxi_location == TAXI_LOCATIONS[destination] and passenger == TAXI_IN_CAR:
            new_passenger = destination
            terminal = True
            reward = 20.0
        elif taxi_location in TAXI_LOCATIONS and passenger == TAXI_IN_CAR:
            new_passenger = TAXI_LOCATIONS.index(taxi_location)
        else:
            reward = -10.0

    next_state = encode_taxi_state(new_row, new_col, new_passenger, destination)
    return ModelEntry(1.0, next_state, reward, terminal)


def make_taxi() -> TabularMdp:
    """
    The 5x5 Taxi domain.

    500 states (25 taxi positions x 5 passenger locations x 4 destinations),
    6 actions (south, north, east, west, pickup, dropoff), deterministic.
    Episodes start with the passenger waiting somewhere other than the
    destination, uniformly over the 300 such states.
    """
    num_states, num_actions = 500, 6
    initial = np.zeros(num_states)
    model = []
    for state in range(num_states):
        row, col, passenger, destination = decode_taxi_state(state)
        if passenger < TAXI_IN_CAR and passenger != destination:
            initial[state] = 1.0
        model.append(
            tuple(
                (_taxi_successor(row, col, passenger, destination, action),)
                for action in range(num_actions)
            )
        )
    return TabularMdp(
        name="taxi",
        num_states=num_states,
        num_actions=num_actions,
        model=tuple(model),
        initial_distribution=initial / initial.sum(),
        step_limit=TAXI_STEP_LIMIT,
    )


# --- FrozenLake ---

FROZENLAKE_MAPS = {
    4: ("SFFF", "FHFH", "FFFH", "HFFG"),
    8: (
        "SFFFFFFF",
        "FFFFFFFF",
        "FFFHFFFF",
        "FFFFFHFF",
        "FFFHFFFF",
        "FHHFFFHF",
        "FHFFHFHF",
        "FFFHFFFG",
    ),
}


def _lake_move(row: int, col: int, action: int, size: int) -> tuple[int, int]:
    if action == 0:  # left
        col = max(col - 1, 0)
    elif action == 1:  # down
        row = min(row + 1, size - 1)
    elif action == 2:  # right
        col = min(col + 1, size - 1)
    elif action == 3:  # up
        row = max(row - 1, 0)
    return row, col


def make_frozenlake(size: int = 4, slippery: bool = True) -> TabularMdp:
    """
    FrozenLake on the standard 4x4 (or 8x8) map.

    A slippery move goes in the intended direction or either perpendicular
    direction with probability 1/3 each. Reaching G pays 1; holes and the
    goal are terminal and keep a terminal self-loop for every action.
    """
    if size not in FROZENLAKE_MAPS:
        raise InvalidModelError(f"no FrozenLake map of size {size}")
    grid = FROZENLAKE_MAPS[size]
    num_states, num_actions = size * size, 4
    directions = (lambda a: ((a - 1) % 4, a, (a + 1) % 4)) if slippery else (lambda a: (a,))

    model = []
    for state in range(num_states):
        row, col = divmod(state, size)
        row_entries = []
        for action in range(num_actions):
            if grid[row][col] in "GH":
                row_entries.append((ModelEntry(1.0, state, 0.0, True),))
                continue
            moves = directions(action)
            entries = []
            for direction in moves:
                new_row, new_col = _lake_move(row, col, direction, size)
                letter = grid[new_row][new_col]
                entries.append(
                    ModelEntry(
                        1.0 / len(moves),
                        new_row * size + new_col,
                        1.0 if letter == "G" else 0.0,
                        letter in "GH",
                    )
                )
            row_entries.append(tuple(entries))
        model.append(tuple(row_entries))

    initial = np.zeros(num_states)
    initial[0] = 1.0
    return TabularMdp(
        name="frozenlake",
        num_states=num_states,
        num_actions=num_actions,
        model=tuple(model),
        initial_distribution=initial,
        step_limit=FROZENLAKE_STEP_LIMIT if size == 4 else 2 * FROZENLAKE_STEP_LIMIT,
    )


# --- Random MDPs ---


def make_random_mdp(
    rng: np.random.Generator, num_states: int, num_actions: int, branching: int
) -> TabularMdp:
    """
    Seeded random MDP used as an oracle test bed.

    Each (s, a) gets ``branching`` distinct successors with probabilities
    from a normalised positive draw and rewards uniform in [-1, 1]. No
    transition is terminal; the initial distribution is uniform.
    """
    if num_states < 1 or num_actions < 1 or branching < 1:
        raise InvalidModelError("num_states, num_actions and branching must be positive")
    if branching > num_states:
        raise InvalidModelError(f"branching {branching} exceeds num_states {num_states}")

    model = []
    for _ in range(num_states):
        row = []
        for _ in range(num_actions):
            successors = rng.choice(num_states, size=branching, replace=False)
            weights = rng.uniform(0.25, 1.0, size=branching)
            rewards = rng.uniform(-1.0, 1.0, size=branching)
            probabilities = weights / weights.sum()
            # Absorb rounding so each row sums to exactly 1.
            probabilities[-1] = 1.0 - probabilities[:-1].sum()
            row.append(
                tuple(
                    ModelEntry(float(p), int(s), float(r), False)
                    for p, s, r in zip(probabilities, successors, rewards)
                )
            )
        model.append(tuple(row))
    return TabularMdp(
        name="random",
        num_states=num_states,
        num_actions=num_actions,
        model=tuple(model),
        initial_distribution=np.full(num_states, 1.0 / num_states),
        step_limit=RANDOM_STEP_LIMIT,
    )


# --- Planning and inspection ---


def bellman_backup(mdp: TabularMdp, q: np.ndarray, gamma: float) -> np.ndarray:
    """One application of the Bellman optimality operator to ``q``."""
    table = mdp.entry_table
    bootstrap = np.where(table.terminals, 0.0, q.max(axis=1)[table.next_states])
    contributions = table.probabilities * (table.rewards + gamma * bootstrap)
    flat = np.bincount(
        table.states * mdp.num_actions + table.actions,
        weights=contributions,
        minlength=mdp.num_pairs,
    )
    return flat.reshape(mdp.num_states, mdp.num_actions)


def value_iteration(
    mdp: TabularMdp,
    gamma: float | None = None,
    tol: float = 1e-10,
    max_iterations: int = 100_000,
) -> np.ndarray:
    """
    Optimal action values Q* by value iteration.

    Raises:
        ConvergenceError: If the sup-norm change stays above ``tol``
    """
    gamma = mdp.gamma_default if gamma is None else gamma
    q = np.zeros((mdp.num_states, mdp.num_actions))
    for iteration in range(max_iterations):
        updated = bellman_backup(mdp, q, gamma)
        delta = float(np.max(np.abs(updated - q)))
        q = updated
        if delta <= tol:
            logger.debug("Value iteration on %s converged in %d sweeps", mdp.name, iteration + 1)
            return q
    raise ConvergenceError(f"value iteration on {mdp.name} did not converge")


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Greedy action per state; ties go to the lowest index."""
    return np.argmax(q, axis=1)


def dump_model(mdp: TabularMdp, stream: TextIO) -> None:
    """Write one ``s a probability s' r terminal`` row per model entry."""
    stream.write("# state action probability next_state reward terminal\n")
    for state, row in enumerate(mdp.model):
        for action, entries in enumerate(row):
            for entry in entries:
                stream.write(
                    f"{state} {action} {entry.probability!r} {entry.next_state} "
                    f"{entry.reward!r} {int(entry.terminal)}\n"
                )
