"""
Tabular Q-Learning and a small DQN that train from any replay memory.

Both parameterisations implement the ``QFunction`` protocol: batched
Q-values plus ``weighted_gradient``, the sum of per-sample gradients of
Q(s, a; θ) scaled by caller-supplied weights. TD errors, the DQN
semi-gradient and the oracles in ``bias_oracle`` are all written against
that protocol.
"""

import logging
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

if sys.version_info >= (3, 11):
    from typing import Self
else:
    from typing_extensions import Self

import numpy as np

from errors import ShapeMismatchError
from replay_core import ReplayMemory, Transition, TransitionBatch

logger = logging.getLogger(__name__)

Parameters = list[np.ndarray]


class QFunction(Protocol):
    """Action-value function over a discrete state space."""

    @property
    def num_states(self) -> int: ...

    @property
    def num_actions(self) -> int: ...

    @property
    def parameters(self) -> Parameters: ...

    def q_values(self, states: np.ndarray) -> np.ndarray: ...

    def weighted_gradient(
        self, states: np.ndarray, actions: np.ndarray, weights: np.ndarray
    ) -> Parameters: ...

    def copy(self) -> Self: ...


def _check_same_shapes(left: Parameters, right: Parameters) -> None:
    if len(left) != len(right) or any(a.shape != b.shape for a, b in zip(left, right)):
        raise ShapeMismatchError(
            f"parameter shapes {[a.shape for a in left]} != {[b.shape for b in right]}"
        )


# --- Q-table ---


@dataclass
class QTable:
    """Lookup table Q(s, a) with its own step size and discount."""

    values: np.ndarray
    learning_rate: float = 0.5
    discount: float = 0.99

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeMismatchError("Q-table values must be a |S| x |A| array")
        if not 0.0 <= self.learning_rate <= 1.0 or not 0.0 <= self.discount <= 1.0:
            raise ValueError("learning_rate and discount must lie in [0, 1]")

    @classmethod
    def zeros(
        cls, num_states: int, num_actions: int, learning_rate: float = 0.5, discount: float = 0.99
    ) -> "QTable":
        return cls(np.zeros((num_states, num_actions)), learning_rate, discount)

    @property
    def num_states(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_actions(self) -> int:
        return int(self.values.shape[1])

    @property
    def parameters(self) -> Parameters:
        return [self.values]

    def q_values(self, states: np.ndarray) -> np.ndarray:
        return self.values[np.asarray(states, dtype=np.int64)]

    def weighted_gradient(
        self, states: np.ndarray, actions: np.ndarray, weights: np.ndarray
    ) -> Parameters:
        # ∇Q(s, a) is the indicator of entry (s, a).
        gradient = np.zeros_like(self.values)
        np.add.at(gradient, (np.asarray(states), np.asarray(actions)), np.asarray(weights))
        return [gradient]

    def copy(self) -> "QTable":
        return QTable(self.values.copy(), self.learning_rate, self.discount)


# --- Multilayer perceptron ---


class Mlp:
    """
    Fully connected network with tanh hidden layers and a linear output.

    Parameters are ordered ``[W1, b1, W2, b2, ...]`` with ``W`` shaped
    (fan_out, fan_in), so layer l computes ``W_l x + b_l``.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> None:
        if not weights or len(weights) != len(biases):
            raise ShapeMismatchError("an MLP needs one bias vector per weight matrix")
        for index, (weight, bias) in enumerate(zip(weights, biases)):
            if weight.ndim != 2 or bias.shape != (weight.shape[0],):
                raise ShapeMismatchError(f"layer {index}: weight {weight.shape}, bias {bias.shape}")
            if index and weight.shape[1] != weights[index - 1].shape[0]:
                raise ShapeMismatchError(f"layer {index} does not chain onto layer {index - 1}")
        self._parameters: Parameters = []
        for weight, bias in zip(weights, biases):
            self._parameters.append(np.array(weight, dtype=np.float64))
            self._parameters.append(np.array(bias, dtype=np.float64))

    @classmethod
    def initialize(cls, layer_sizes: Sequence[int], rng: np.random.Generator) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        if len(layer_sizes) < 2 or any(size < 1 for size in layer_sizes):
            raise ShapeMismatchError(f"invalid layer sizes {list(layer_sizes)}")
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def parameters(self) -> Parameters:
        return self._parameters

    @property
    def weights(self) -> Parameters:
        return self._parameters[0::2]

    @property
    def biases(self) -> Parameters:
        return self._parameters[1::2]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [weight.shape[0] for weight in self.weights]

    @property
    def num_states(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_actions(self) -> int:
        return self.layer_sizes[-1]

    def _activations(self, inputs: np.ndarray) -> list[np.ndarray]:
        activations = [inputs]
        layers = list(zip(self.weights, self.biases))
        for weight, bias in layers[:-1]:
            activations.append(np.tanh(activations[-1] @ weight.T + bias))
        weight, bias = layers[-1]
        activations.append(activations[-1] @ weight.T + bias)
        return activations

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        """Outputs for a (m, in) batch of arbitrary real inputs."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        if inputs.shape[1] != self.num_states:
            raise ShapeMismatchError(f"expected inputs of width {self.num_states}, got {inputs.shape[1]}")
        return self._activations(inputs)[-1]

    def _one_hot(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        if states.size and (states.min() < 0 or states.max() >= self.num_states):
            raise ShapeMismatchError(f"state index outside [0, {self.num_states})")
        return np.eye(self.num_states)[states]

    def q_values(self, states: np.ndarray) -> np.ndarray:
        return self.predict(self._one_hot(states))

    def backward(self, inputs: np.ndarray, output_gradient: np.ndarray) -> Parameters:
        """Vector-Jacobian product of ``output_gradient`` through the network."""
        activations = self._activations(inputs)
        gradient = output_gradient
        grads: Parameters = []
        for layer in range(len(self.weights) - 1, -1, -1):
            grads.append(gradient.sum(axis=0))
            grads.append(gradient.T @ activations[layer])
            if layer:
                gradient = (gradient @ self.weights[layer]) * (1.0 - activations[layer] ** 2)
        grads.reverse()
        return grads

    def weighted_gradient(
        self, states: np.ndarray, actions: np.ndarray, weights: np.ndarray
    ) -> Parameters:
        states = np.asarray(states, dtype=np.int64)
        output_gradient = np.zeros((len(states), self.num_actions))
        output_gradient[np.arange(len(states)), np.asarray(actions)] = weights
        return self.backward(self._one_hot(states), output_gradient)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def load(self, parameters: Parameters) -> None:
        """Overwrite parameters in place with exact copies of ``parameters``."""
        _check_same_shapes(self._parameters, parameters)
        for target, source in zip(self._parameters, parameters):
            target[...] = source


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Q-values for one input vector: tanh hidden layers, linear output."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatchError("mlp_forward expects a single input vector")
    return net.predict(x[np.newaxis, :])[0]


# --- Target network, optimiser, exploration ---


@dataclass
class TargetNetwork:
    """Time-delayed copy θ⁻ of the online parameters."""

    network: Mlp
    sync_period: int = 500

    def __post_init__(self) -> None:
        if self.sync_period < 1:
            raise ValueError("sync_period must be positive")

    @classmethod
    def of(cls, online: Mlp, sync_period: int = 500) -> "TargetNetwork":
        return cls(online.copy(), sync_period)

    def sync(self, online: Mlp) -> None:
        self.network.load(online.parameters)


@dataclass
class AdamState:
    """Adam moment estimates with bias correction."""

    first_moment: Parameters
    second_moment: Parameters
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def for_parameters(cls, parameters: Parameters, **hyperparameters: float) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p) for p in parameters],
            second_moment=[np.zeros_like(p) for p in parameters],
            **hyperparameters,  # type: ignore[arg-type]
        )


def adam_step(opt: AdamState, parameters: Parameters, gradient: Parameters) -> None:
    """Apply one bias-corrected Adam update to ``parameters`` in place."""
    _check_same_shapes(parameters, gradient)
    _check_same_shapes(parameters, opt.first_moment)
    opt.step += 1
    first_correction = 1.0 - opt.beta1**opt.step
    second_correction = 1.0 - opt.beta2**opt.step
    for param, grad, m, v in zip(parameters, gradient, opt.first_moment, opt.second_moment):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * grad
        v *= opt.beta2
        v += (1.0 - opt.beta2) * grad * grad
        param -= opt.learning_rate * (m / first_correction) / (
            np.sqrt(v / second_correction) + opt.epsilon
        )


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay from ``start`` to ``end`` over ``decay_steps``, then constant."""

    start: float = 1.0
    end: float = 0.05
    decay_steps: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.end <= self.start <= 1.0:
            raise ValueError("epsilon schedule needs 0 <= end <= start <= 1")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be positive")

    def value(self, step: int) -> float:
        remaining = max(0.0, 1.0 - step / self.decay_steps)
        return self.end + (self.start - self.end) * remaining


def epsilon_greedy_action(q_values: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Uniform random action with probability ε, else argmax (lowest index on ties)."""
    q_values = np.asarray(q_values)
    if q_values.size == 0:
        raise ValueError("q_values must not be empty")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon {epsilon} outside [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(q_values.size))
    return int(np.argmax(q_values))


# --- TD errors and gradients ---


def _as_batch(batch: Sequence[Transition] | TransitionBatch) -> TransitionBatch:
    if isinstance(batch, TransitionBatch):
        return batch
    return TransitionBatch.from_transitions(batch)


def td_errors(
    batch: Sequence[Transition] | TransitionBatch,
    q_online: QFunction,
    q_target: QFunction,
    gamma: float,
) -> np.ndarray:
    """δ = r + γ max_a' Q⁻(s', a') − Q(s, a), with the bootstrap cut at terminals."""
    batch = _as_batch(batch)
    if q_online.num_states != q_target.num_states or q_online.num_actions != q_target.num_actions:
        raise ShapeMismatchError("online and target Q-functions disagree in dimensions")
    if len(batch) and (
        batch.actions.min() < 0
        or batch.actions.max() >= q_online.num_actions
        or min(batch.states.min(), batch.next_states.min()) < 0
        or max(batch.states.max(), batch.next_states.max()) >= q_online.num_states
    ):
        raise ShapeMismatchError("transition does not fit the Q-function's dimensions")
    predicted = q_online.q_values(batch.states)[np.arange(len(batch)), batch.actions]
    bootstrap = q_target.q_values(batch.next_states).max(axis=1)
    bootstrap = np.where(batch.terminals, 0.0, bootstrap)
    return batch.rewards + gamma * bootstrap - predicted


def td_error(t: Transition, q_online: QFunction, q_target: QFunction, gamma: float) -> float:
    """TD error of a single transition."""
    return float(td_errors([t], q_online, q_target, gamma)[0])


def _q_learning_update(table: QTable, t: Transition) -> float:
    delta = td_error(t, table, table, table.discount)
    table.values[t.state, t.action] += table.learning_rate * delta
    return delta


def q_learning_step(table: QTable, t: Transition) -> None:
    """Q(s, a) += α δ, bootstrapping from the table itself."""
    _q_learning_update(table, t)


def _td_gradient_and_errors(
    net: QFunction,
    target_net: QFunction,
    batch: Sequence[Transition] | TransitionBatch,
    gamma: float,
) -> tuple[Parameters, np.ndarray]:
    batch = _as_batch(batch)
    if not len(batch):
        raise ValueError("cannot compute a TD gradient for an empty batch")
    deltas = td_errors(batch, net, target_net, gamma)
    grads = net.weighted_gradient(batch.states, batch.actions, -deltas / len(batch))
    return grads, deltas


def mlp_td_gradient(
    net: QFunction,
    target_net: QFunction,
    batch: Sequence[Transition] | TransitionBatch,
    gamma: float,
) -> Parameters:
    """
    Semi-gradient of the batch loss (1/m) Σ ½δ².

    The target term is treated as a constant, so the result equals
    −(1/m) Σ δ ∇θ Q(s, a; θ).

    Args:
        net: Online network θ
        target_net: Target network θ⁻
        batch: Non-empty minibatch
        gamma: Discount factor

    Returns:
        Parameters: Gradient shaped like ``net.parameters``
    """
    grads, _ = _td_gradient_and_errors(net, target_net, batch, gamma)
    return grads


# --- Agents ---


@dataclass
class DqnAgent:
    """DQN with a hard-synced target network and Adam."""

    online: Mlp
    target: TargetNetwork
    optimizer: AdamState
    schedule: EpsilonSchedule
    gamma: float = 0.99
    batch_size: int = 32
    warmup: int = 500
    train_frequency: int = 1
    env_steps: int = 0
    gradient_steps: int = 0

    @classmethod
    def create(
        cls,
        num_states: int,
        num_actions: int,
        rng: np.random.Generator,
        *,
        hidden_sizes: Sequence[int] = (64, 64),
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        adam_epsilon: float = 1e-8,
        sync_period: int = 500,
        schedule: EpsilonSchedule | None = None,
        **settings: int | float,
    ) -> "DqnAgent":
        online = Mlp.initialize([num_states, *hidden_sizes, num_actions], rng)
        return cls(
            online=online,
            target=TargetNetwork.of(online, sync_period),
            optimizer=AdamState.for_parameters(
                online.parameters,
                learning_rate=learning_rate,
                beta1=beta1,
                beta2=beta2,
                epsilon=adam_epsilon,
            ),
            schedule=schedule or EpsilonSchedule(),
            **settings,  # type: ignore[arg-type]
        )

    def greedy_action(self, state: int) -> int:
        return int(np.argmax(self.online.q_values(np.array([state]))[0]))

    def act(self, state: int, rng: np.random.Generator) -> int:
        q = self.online.q_values(np.array([state]))[0]
        return epsilon_greedy_action(q, self.schedule.value(self.env_steps), rng)

    def train_step(self, memory: ReplayMemory, rng: np.random.Generator) -> float | None:
        return dqn_train_step(self, memory, rng)


def _ready_to_train(
    env_steps: int, warmup: int, train_frequency: int, memory: ReplayMemory
) -> bool:
    return len(memory) >= max(warmup, 1) and env_steps % train_frequency == 0


def dqn_train_step(
    agent: DqnAgent, memory: ReplayMemory, rng: np.random.Generator
) -> float | None:
    """
    Advance the agent's step counter and, when due, take one gradient step.

    Returns:
        float | None: Mean ½δ² of the sampled batch, or None when no update ran
    """
    agent.env_steps += 1
    if not _ready_to_train(agent.env_steps, agent.warmup, agent.train_frequency, memory):
        return None
    batch = memory.gather(memory.sample_indices(rng, agent.batch_size))
    grads, deltas = _td_gradient_and_errors(agent.online, agent.target.network, batch, agent.gamma)
    adam_step(agent.optimizer, agent.online.parameters, grads)
    agent.gradient_steps += 1
    if agent.gradient_steps % agent.target.sync_period == 0:
        agent.target.sync(agent.online)
    return float(0.5 * np.mean(deltas**2))


@dataclass
class TabularAgent:
    """Q-Learning on replayed minibatches."""

    table: QTable
    schedule: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    batch_size: int = 32
    warmup: int = 500
    train_frequency: int = 1
    env_steps: int = 0
    gradient_steps: int = 0

    def greedy_action(self, state: int) -> int:
        return int(np.argmax(self.table.values[state]))

    def act(self, state: int, rng: np.random.Generator) -> int:
        return epsilon_greedy_action(
            self.table.values[state], self.schedule.value(self.env_steps), rng
        )

    def train_step(self, memory: ReplayMemory, rng: np.random.Generator) -> float | None:
        self.env_steps += 1
        if not _ready_to_train(self.env_steps, self.warmup, self.train_frequency, memory):
            return None
        squared = 0.0
        for transition in memory.sample_batch(rng, self.batch_size):
            squared += _q_learning_update(self.table, transition) ** 2
        self.gradient_steps += 1
        return 0.5 * squared / self.batch_size


# --- Checkpoints ---


def save_checkpoint(parameters: Parameters, path: Path) -> None:
    """Write parameters as text: a shape header, then one value per line."""
    header = " ".join("x".join(str(dim) for dim in p.shape) or "scalar" for p in parameters)
    lines = [f"# shapes: {header}"]
    for param in parameters:
        lines.extend(f"{value:.17g}" for value in param.ravel())
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: Path) -> Parameters:
    """Inverse of ``save_checkpoint``."""
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# shapes:"):
        raise ShapeMismatchError(f"{path} has no shape header")
    header, *values = lines
    flat = np.array([float(value) for value in values], dtype=np.float64)
    parameters: Parameters = []
    offset = 0
    for token in header.removeprefix("# shapes:").split():
        shape = () if token == "scalar" else tuple(int(dim) for dim in token.split("x"))
        size = int(np.prod(shape))
        if offset + size > flat.size:
            raise ShapeMismatchError(f"{path} ends before the shapes in its header are filled")
        parameters.append(flat[offset : offset + size].reshape(shape))
        offset += size
    if offset != flat.size:
        raise ShapeMismatchError(f"{path} holds {flat.size} values, header describes {offset}")
    return parameters
