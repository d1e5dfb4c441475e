"""
Brute-force expected updates and sampling laws on enumerable MDPs.

These are the ground truth for the multiplicity-bias claim: under a fixed
behaviour policy μ, uniform replay weights each state-action pair's
expected update by its stationary frequency Pr(s, a), while stratified
replay weights every reachable pair equally.
"""

import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import sparse

from agents import Parameters, QFunction, QTable, mlp_td_gradient
from errors import ConvergenceError, InvalidModelError
from replay_core import ReplayMemory, Transition
from schemas import Normalization, SamplerKind
from tabular_envs import EpisodeContext, TabularMdp, reset, step

logger = logging.getLogger(__name__)

ROW_TOLERANCE = 1e-12
OCCUPANCY_TOLERANCE = 1e-9


# --- Policies and occupancies ---


@dataclass(frozen=True, eq=False)
class BehaviorPolicy:
    """Fixed stochastic policy μ(a | s) as a |S| x |A| row-stochastic array."""

    probabilities: np.ndarray
    _cumulative: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if probabilities.ndim != 2 or np.any(probabilities < 0.0):
            raise InvalidModelError("policy must be a non-negative |S| x |A| array")
        if np.any(np.abs(probabilities.sum(axis=1) - 1.0) > ROW_TOLERANCE):
            raise InvalidModelError("policy rows must sum to 1")
        object.__setattr__(self, "probabilities", probabilities)
        object.__setattr__(self, "_cumulative", np.cumsum(probabilities, axis=1))

    def sample(self, state: int, rng: np.random.Generator) -> int:
        cumulative = self._cumulative[state]
        index = int(np.searchsorted(cumulative, rng.random(), side="right"))
        return min(index, len(cumulative) - 1)


def uniform_policy(mdp: TabularMdp) -> BehaviorPolicy:
    return BehaviorPolicy(np.full((mdp.num_states, mdp.num_actions), 1.0 / mdp.num_actions))


def epsilon_greedy_policy(q: np.ndarray, epsilon: float) -> BehaviorPolicy:
    """ε-greedy with respect to ``q``; ties go to the lowest index."""
    num_states, num_actions = q.shape
    probabilities = np.full((num_states, num_actions), epsilon / num_actions)
    probabilities[np.arange(num_states), np.argmax(q, axis=1)] += 1.0 - epsilon
    return BehaviorPolicy(probabilities)


@dataclass(frozen=True, eq=False)
class OccupancyDistribution:
    """Stationary state-action frequencies Pr(s, a)."""

    probabilities: np.ndarray
    iterations: int = 0

    def __post_init__(self) -> None:
        if np.any(self.probabilities < 0.0):
            raise InvalidModelError("occupancy has negative entries")
        if abs(self.probabilities.sum() - 1.0) > OCCUPANCY_TOLERANCE:
            raise InvalidModelError(f"occupancy sums to {self.probabilities.sum()!r}")

    @property
    def support(self) -> np.ndarray:
        """Mask of reachable (s, a) pairs."""
        return self.probabilities > 0.0

    @property
    def support_size(self) -> int:
        return int(self.support.sum())

    @property
    def state_marginal(self) -> np.ndarray:
        return self.probabilities.sum(axis=1)


def restart_operator(mdp: TabularMdp, policy: BehaviorPolicy) -> sparse.csr_matrix:
    """
    Transition matrix of the state-action chain under μ.

    Terminal transitions are redirected to the initial distribution, which
    turns an episodic task into a recurrent chain.
    """
    table = mdp.entry_table
    num_pairs = mdp.num_pairs
    pairs = table.states * mdp.num_actions + table.actions
    continuing = ~table.terminals

    to_states = sparse.csr_matrix(
        (table.probabilities[continuing], (pairs[continuing], table.next_states[continuing])),
        shape=(num_pairs, mdp.num_states),
    )
    restart_mass = np.bincount(
        pairs[table.terminals], weights=table.probabilities[table.terminals], minlength=num_pairs
    )
    if restart_mass.any():
        to_states = to_states + sparse.csr_matrix(np.outer(restart_mass, mdp.initial_distribution))

    pair_states = np.repeat(np.arange(mdp.num_states), mdp.num_actions)
    choose_action = sparse.csr_matrix(
        (policy.probabilities.ravel(), (pair_states, np.arange(num_pairs))),
        shape=(mdp.num_states, num_pairs),
    )
    return (to_states @ choose_action).tocsr()


def stationary_distribution(
    mdp: TabularMdp,
    policy: BehaviorPolicy,
    tol: float = 1e-10,
    max_iterations: int = 1_000_000,
) -> OccupancyDistribution:
    """
    Long-run Pr(s, a) of μ with terminal-to-initial restarts.

    Power iteration runs on the lazy chain ½(I + P), which shares P's
    stationary law and also converges when P is periodic. Iteration starts
    from the initial distribution, so pairs the chain cannot reach keep
    probability 0; masses below ``tol`` are clamped to 0 at the end.

    Raises:
        ConvergenceError: If the residual ‖πP − π‖₁ stays above ``tol``
    """
    if policy.probabilities.shape != (mdp.num_states, mdp.num_actions):
        raise InvalidModelError("policy shape does not match the MDP")
    transposed = restart_operator(mdp, policy).T.tocsr()
    occupancy = (mdp.initial_distribution[:, np.newaxis] * policy.probabilities).ravel()

    for iteration in range(max_iterations):
        moved = transposed @ occupancy
        if np.abs(moved - occupancy).sum() <= tol:
            break
        occupancy = 0.5 * (occupancy + moved)
    else:
        raise ConvergenceError(
            f"stationary distribution of {mdp.name} did not converge in {max_iterations} iterations"
        )

    occupancy[occupancy < tol] = 0.0
    occupancy /= occupancy.sum()
    logger.debug("Stationary distribution of %s after %d iterations", mdp.name, iteration)
    return OccupancyDistribution(
        occupancy.reshape(mdp.num_states, mdp.num_actions), iterations=iteration
    )


def ideal_distribution(mdp: TabularMdp) -> dict[tuple[int, int, int], float]:
    """Pr(s' | s, a) / |S x A| for every (s, a, s') of the model."""
    scale = 1.0 / mdp.num_pairs
    distribution: dict[tuple[int, int, int], float] = {}
    for state, row in enumerate(mdp.model):
        for action, entries in enumerate(row):
            for entry in entries:
                key = (state, action, entry.next_state)
                distribution[key] = distribution.get(key, 0.0) + entry.probability * scale
    return distribution


# --- Expected updates ---


def expected_td_errors(
    mdp: TabularMdp, q_online: QFunction, q_target: QFunction, gamma: float
) -> np.ndarray:
    """Σ_{s'} Pr(s'|s,a) δ(s, a, s') for every pair, as a |S| x |A| array."""
    table = mdp.entry_table
    all_states = np.arange(mdp.num_states)
    predicted = q_online.q_values(all_states)[table.states, table.actions]
    bootstrap = q_target.q_values(all_states).max(axis=1)[table.next_states]
    deltas = table.rewards + gamma * np.where(table.terminals, 0.0, bootstrap) - predicted
    flat = np.bincount(
        table.states * mdp.num_actions + table.actions,
        weights=table.probabilities * deltas,
        minlength=mdp.num_pairs,
    )
    return flat.reshape(mdp.num_states, mdp.num_actions)


def expected_q_updates(mdp: TabularMdp, table: QTable) -> np.ndarray:
    """Expected tabular Q-Learning change α Σ_{s'} Pr(s'|s,a) δ for every pair."""
    return table.learning_rate * expected_td_errors(mdp, table, table, table.discount)


def expected_q_update(mdp: TabularMdp, table: QTable, s: int, a: int) -> float:
    """Expected tabular Q-Learning change of entry Q(s, a)."""
    deltas = [
        entry.reward
        + (0.0 if entry.terminal else table.discount * table.values[entry.next_state].max())
        - table.values[s, a]
        for entry in mdp.successors(s, a)
    ]
    probabilities = [entry.probability for entry in mdp.successors(s, a)]
    return table.learning_rate * float(np.dot(probabilities, deltas))


def sampling_weights(
    occupancy: OccupancyDistribution,
    mode: SamplerKind,
    normalization: Normalization = Normalization.REACHABLE,
) -> np.ndarray:
    """Per-pair weight each replay law gives to a pair's expected update."""
    if mode is SamplerKind.UNIFORM:
        return occupancy.probabilities
    if normalization is Normalization.FULL:
        return np.full(occupancy.probabilities.shape, 1.0 / occupancy.probabilities.size)
    support = occupancy.support
    return support / support.sum()


def expected_dqn_update(
    mdp: TabularMdp,
    policy: BehaviorPolicy,
    net: QFunction,
    target_net: QFunction,
    gamma: float,
    alpha: float,
    mode: SamplerKind,
    normalization: Normalization = Normalization.REACHABLE,
    occupancy: OccupancyDistribution | None = None,
) -> Parameters:
    """
    Expected parameter change of one replayed DQN step.

    Uniform: α Σ Pr(s,a) Σ_{s'} Pr(s'|s,a) δ ∇θQ(s,a;θ).
    Stratified: the Pr(s,a) factor is replaced by 1/K, K being the number
    of reachable pairs (or |S x A| with ``Normalization.FULL``).

    Args:
        occupancy: Precomputed stationary distribution of ``policy``, if any

    Returns:
        Parameters: Update shaped like ``net.parameters``
    """
    occupancy = occupancy or stationary_distribution(mdp, policy)
    weights = sampling_weights(occupancy, mode, normalization)
    coefficients = alpha * weights * expected_td_errors(mdp, net, target_net, gamma)
    states, actions = np.divmod(np.arange(mdp.num_pairs), mdp.num_actions)
    return net.weighted_gradient(states, actions, coefficients.ravel())


# --- Replay-side estimates ---


def collect_transitions(
    mdp: TabularMdp,
    policy: BehaviorPolicy,
    steps: int,
    rng: np.random.Generator,
    memory: ReplayMemory,
    start: Literal["initial", "stationary"] = "initial",
    occupancy: OccupancyDistribution | None = None,
) -> None:
    """
    Run μ for ``steps`` transitions with restarts and store all of them.

    Episodes are never truncated. With ``start="stationary"`` the first
    state is drawn from the stationary state marginal, so transient states
    outside the recurrent class never enter the memory.
    """
    ctx = EpisodeContext(step_limit=steps + 1)
    state = reset(mdp, ctx, rng)
    if start == "stationary":
        occupancy = occupancy or stationary_distribution(mdp, policy)
        state = ctx.current_state = int(rng.choice(mdp.num_states, p=occupancy.state_marginal))

    for _ in range(steps):
        action = policy.sample(state, rng)
        next_state, reward, terminal, _ = step(mdp, ctx, rng, action)
        memory.insert(Transition(state, action, reward, next_state, terminal))
        if terminal:
            state = reset(mdp, ctx, rng)
        else:
            state = next_state


def empirical_sampling_distribution(
    memory: ReplayMemory,
    rng: np.random.Generator,
    draws: int,
    by: Literal["slot", "pair"] = "slot",
) -> dict:
    """
    Observed frequencies of ``draws`` samples from ``memory``.

    Returns:
        dict: slot index -> frequency, or (state, action) -> frequency
    """
    if draws < 1:
        raise ValueError("draws must be positive")
    indices = memory.sample_indices(rng, draws)
    slot_counts = np.bincount(indices, minlength=memory.capacity)
    slots = np.flatnonzero(slot_counts)
    if by == "slot":
        return {int(slot): slot_counts[slot] / draws for slot in slots}
    pair_counts: Counter[tuple[int, int]] = Counter()
    for slot in slots:
        transition = memory[int(slot)]
        pair_counts[(transition.state, transition.action)] += int(slot_counts[slot])
    return {pair: count / draws for pair, count in sorted(pair_counts.items())}


def sampled_update(
    memory: ReplayMemory,
    rng: np.random.Generator,
    net: QFunction,
    target_net: QFunction,
    gamma: float,
    alpha: float,
    draws: int,
    chunk: int = 65_536,
) -> Parameters:
    """Monte-Carlo estimate of α E[δ ∇θQ] under the memory's sampling law."""
    if draws < 1:
        raise ValueError("draws must be positive")
    total = [np.zeros_like(p) for p in net.parameters]
    remaining = draws
    while remaining:
        size = min(chunk, remaining)
        batch = memory.gather(memory.sample_indices(rng, size))
        # mlp_td_gradient is −(1/m) Σ δ ∇Q.
        for accumulated, grad in zip(total, mlp_td_gradient(net, target_net, batch, gamma)):
            accumulated -= size * grad
        remaining -= size
    return [alpha * accumulated / draws for accumulated in total]


# --- Report ---


def oracle_report(
    mdp: TabularMdp,
    policy: BehaviorPolicy,
    gamma: float | None = None,
    alpha: float = 1.0,
    table: QTable | None = None,
) -> str:
    """
    Plain-text tables of the sampling laws and expected updates.

    Rows cover every (s, a) pair in index order; the output depends only on
    the inputs.
    """
    gamma = mdp.gamma_default if gamma is None else gamma
    table = table or QTable.zeros(mdp.num_states, mdp.num_actions, min(alpha, 1.0), gamma)
    occupancy = stationary_distribution(mdp, policy)
    q_learning = expected_q_updates(mdp, table)
    uniform = expected_dqn_update(
        mdp, policy, table, table, gamma, table.learning_rate, SamplerKind.UNIFORM,
        occupancy=occupancy,
    )[0]
    stratified = expected_dqn_update(
        mdp, policy, table, table, gamma, table.learning_rate, SamplerKind.STRATIFIED,
        occupancy=occupancy,
    )[0]
    stratified_full = expected_dqn_update(
        mdp, policy, table, table, gamma, table.learning_rate, SamplerKind.STRATIFIED,
        Normalization.FULL, occupancy=occupancy,
    )[0]

    out = io.StringIO()
    out.write(f"# env={mdp.name} states={mdp.num_states} actions={mdp.num_actions}\n")
    out.write(f"# gamma={gamma!r} alpha={table.learning_rate!r} reachable_pairs={occupancy.support_size}\n")
    out.write("\n## occupancy and expected updates\n")
    out.write(
        f"{'state':>6} {'action':>6} {'pr_sa':>14} {'q_learning':>14} "
        f"{'uniform':>14} {'stratified':>14} {'strat_full':>14}\n"
    )
    for state in range(mdp.num_states):
        for action in range(mdp.num_actions):
            out.write(
                f"{state:>6} {action:>6} {occupancy.probabilities[state, action]:>14.8f} "
                f"{q_learning[state, action]:>14.8f} {uniform[state, action]:>14.8f} "
                f"{stratified[state, action]:>14.8f} {stratified_full[state, action]:>14.8f}\n"
            )
    out.write("\n## ideal sampling distribution\n")
    out.write(f"{'state':>6} {'action':>6} {'next':>6} {'probability':>14}\n")
    for (state, action, next_state), probability in sorted(ideal_distribution(mdp).items()):
        out.write(f"{state:>6} {action:>6} {next_state:>6} {probability:>14.8f}\n")
    return out.getvalue()
