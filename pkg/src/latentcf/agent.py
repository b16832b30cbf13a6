"""Action-value agent and the behavioral outcome variables derived from it.

The agent is a small MLP Q-network trained by epsilon-greedy TD(0).  Three
outcome variables summarize its view of a state: value (highest action
value), confidence (rescaled negentropy of the softmax policy), and
riskiness (best-vs-worst action-value margin against a calibrated scale).
Confidence and riskiness live in [-1, 1]; value is normalized later by the
dataset module.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import GridSchema, Schema, cartpole_schema, grid_schema, schema_from_json_dict
from .envs import (
    KIND_BOUNCER,
    KIND_CHASER,
    KIND_FOOD,
    KIND_PLAYER,
    KIND_WANDERER,
    GridObservation,
    GridWorldEnv,
    Observation,
)
from .errors import MalformedFileError, TrainingFailureError
from .nn import MLP, flatten_params, load_flat_params
from .optim import Adam

log = logging.getLogger(__name__)

AGENT_FORMAT = "latentcf-agent"
AGENT_VERSION = 1


@dataclass(frozen=True)
class OutcomeVector:
    value: float
    confidence: float
    riskiness: float

    def as_array(self) -> np.ndarray:
        return np.array([self.value, self.confidence, self.riskiness], dtype=np.float64)


@dataclass(frozen=True)
class AgentConfig:
    hidden: int = 64
    gamma: float = 0.9
    lr: float = 1e-3
    train_steps: int = 40_000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    epsilon_decay_steps: int = 20_000
    temperature: float = 0.5
    replay_capacity: int = 20_000
    batch_size: int = 64
    warmup_steps: int = 500
    target_sync: int = 500
    return_floor: float | None = None
    eval_episodes: int = 20
    calibration_episodes: int = 20
    # 95th-percentile scaling left ~5% of frames saturated at riskiness 1.0 and
    # made the variable unpredictable from observations; 99th keeps it smooth.
    margin_percentile: float = 99.0


_EGO_KINDS = (KIND_FOOD, KIND_WANDERER, KIND_BOUNCER, KIND_CHASER)


def agent_features(obs: Observation, schema: Schema) -> np.ndarray:
    """Q-network input features.

    Cartpole uses its normalized 4-vector directly.  For the grid the raw
    one-hot layers are a poor TD input, so the agent reads an ego-centric
    summary instead: player position and strength, plus per-kind nearest
    entity offsets, distances, relative strengths, and remaining counts.
    The summary is a pure function of the observation.
    """
    if not isinstance(schema, GridSchema):
        return schema.encode(obs)
    assert isinstance(obs, GridObservation)
    h, w = schema.height, schema.width
    kinds = np.asarray(obs.kinds)
    strengths = np.asarray(obs.strengths)
    player_cells = np.argwhere(kinds == KIND_PLAYER)
    if len(player_cells) == 0:
        pr, pc, ps = h // 2, w // 2, 0
    else:
        pr, pc = (int(v) for v in player_cells[0])
        ps = int(strengths[pr, pc])

    feats = [2.0 * pr / (h - 1) - 1.0, 2.0 * pc / (w - 1) - 1.0, 2.0 * ps / schema.strength_max - 1.0]
    for kind in _EGO_KINDS:
        cells = np.argwhere(kinds == kind)
        if len(cells) == 0:
            feats.extend([0.0, 0.0, 1.0, 0.0, -1.0, -1.0])
            continue
        dists = np.abs(cells[:, 0] - pr) + np.abs(cells[:, 1] - pc)
        nearest = cells[int(np.argmin(dists))]
        er, ec = int(nearest[0]), int(nearest[1])
        feats.extend(
            [
                (er - pr) / (h - 1),
                (ec - pc) / (w - 1),
                (abs(er - pr) + abs(ec - pc)) / (h + w - 2),
                np.clip((int(strengths[er, ec]) - ps) / schema.strength_max, -1.0, 1.0),
                1.0,
                2.0 * min(len(cells), 4) / 4.0 - 1.0,
            ]
        )
    return np.asarray(feats, dtype=np.float64)


def agent_feature_dim(schema: Schema) -> int:
    if isinstance(schema, GridSchema):
        return 3 + 6 * len(_EGO_KINDS)
    return int(np.prod(schema.tensor_shape))


def default_agent_config(environment: str) -> AgentConfig:
    """Training settings that reliably beat the random baseline per environment."""
    if environment == "gridworld":
        return AgentConfig(
            train_steps=80_000,
            hidden=128,
            lr=1e-3,
            gamma=0.9,
            epsilon_end=0.05,
            epsilon_decay_steps=40_000,
            target_sync=1000,
            batch_size=128,
            temperature=0.5,
            return_floor=-1.0,
        )
    return AgentConfig(
        train_steps=30_000,
        hidden=64,
        lr=1e-3,
        gamma=0.99,
        epsilon_end=0.05,
        epsilon_decay_steps=15_000,
        target_sync=500,
        batch_size=64,
        temperature=0.5,
        return_floor=80.0,
    )


class ValueAgent:
    """Immutable-after-training Q-network plus outcome-variable readouts."""

    def __init__(
        self,
        schema: Schema,
        n_actions: int,
        hidden: int,
        gamma: float,
        temperature: float,
        seed: int,
        margin_scale: float = 1.0,
        environment: str = "",
    ):
        self.schema = schema
        self.n_actions = n_actions
        self.hidden = hidden
        self.gamma = gamma
        self.temperature = temperature
        self.margin_scale = margin_scale
        self.environment = environment
        self.net = MLP(np.random.default_rng(seed), [agent_feature_dim(schema), hidden, n_actions], name="q")

    def params(self) -> dict[str, Tensor]:
        return self.net.params()

    def q_tensor(self, features_flat: np.ndarray) -> Tensor:
        return self.net(Tensor(features_flat))

    def q_values(self, obs: Observation) -> np.ndarray:
        return self.q_features(agent_features(obs, self.schema))

    def q_features(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64).reshape(-1)
        for layer in self.net.layers[:-1]:
            x = np.maximum(x @ layer.weight.data + layer.bias.data, 0.0)
        last = self.net.layers[-1]
        return x @ last.weight.data + last.bias.data

    def policy_distribution(self, obs: Observation) -> np.ndarray:
        q = self.q_values(obs)
        shifted = (q - q.max()) / self.temperature
        e = np.exp(shifted)
        return e / e.sum()

    def interestingness(self, obs: Observation) -> OutcomeVector:
        q = self.q_values(obs)
        pi = self.policy_distribution(obs)
        entropy = float(-(pi * np.log(np.maximum(pi, 1e-300))).sum())
        confidence = 2.0 * (1.0 - entropy / np.log(self.n_actions)) - 1.0
        margin = float(q.max() - q.min())
        riskiness = float(np.clip(2.0 * margin / self.margin_scale - 1.0, -1.0, 1.0))
        return OutcomeVector(value=float(q.max()), confidence=float(confidence), riskiness=riskiness)


@dataclass
class StepRecord:
    observation: Observation
    outcome: OutcomeVector
    action: int
    reward: float


@dataclass
class TrajectorySet:
    environment: str
    episodes: list[list[StepRecord]] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return sum(len(e) for e in self.episodes)

    @property
    def episode_returns(self) -> list[float]:
        return [sum(s.reward for s in e) for e in self.episodes]


def _run_policy_episode(agent: ValueAgent, env, seed: int, rng: np.random.Generator) -> list[StepRecord]:
    env.reset(seed)
    records: list[StepRecord] = []
    done = False
    while not done:
        obs = env.observe()
        pi = agent.policy_distribution(obs)
        action = int(rng.choice(agent.n_actions, p=pi))
        _, reward, done = env.step(action)
        records.append(StepRecord(observation=obs, outcome=agent.interestingness(obs), action=action, reward=reward))
    return records


def rollout(agent: ValueAgent, env, n_episodes: int, seed: int) -> TrajectorySet:
    """Sample episodes from the agent's softmax policy, recording outcomes per frame."""
    rng = np.random.default_rng(seed)
    episodes = [
        _run_policy_episode(agent, env, seed=int(rng.integers(2**31)), rng=rng) for _ in range(n_episodes)
    ]
    return TrajectorySet(environment=agent.environment, episodes=episodes)


def random_policy_returns(env, n_episodes: int, seed: int) -> list[float]:
    """Mean-return baseline: uniform-random actions on fresh episode seeds."""
    rng = np.random.default_rng(seed)
    returns = []
    for _ in range(n_episodes):
        env.reset(int(rng.integers(2**31)))
        total = 0.0
        done = False
        while not done:
            _, reward, done = env.step(int(rng.integers(env.n_actions)))
            total += reward
        returns.append(total)
    return returns


class _Replay:
    """Fixed-capacity transition store with seeded uniform sampling."""

    def __init__(self, capacity: int, feature_dim: int, n_actions: int):
        self.capacity = capacity
        self.features = np.zeros((capacity, feature_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_features = np.zeros((capacity, feature_dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.cursor = 0

    def push(self, f, a, r, nf, terminal):
        i = self.cursor
        self.features[i] = f
        self.actions[i] = a
        self.rewards[i] = r
        self.next_features[i] = nf
        self.terminal[i] = terminal
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=n)
        return (
            self.features[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_features[idx],
            self.terminal[idx],
        )


def train_agent(env, config: AgentConfig, seed: int) -> tuple[ValueAgent, list[float]]:
    """Epsilon-greedy temporal-difference training with replay and a target network.

    After training the riskiness margin scale is calibrated from on-policy
    rollouts, then mean return on held-out seeds is checked against the
    configured floor.
    """
    if isinstance(env, GridWorldEnv):
        environment = "gridworld"
        schema = grid_schema(env.config)
    else:
        environment = "cartpole"
        schema = cartpole_schema(env.config)
    rng = np.random.default_rng(seed)
    agent = ValueAgent(
        schema=schema,
        n_actions=env.n_actions,
        hidden=config.hidden,
        gamma=config.gamma,
        temperature=config.temperature,
        seed=int(rng.integers(2**31)),
        environment=environment,
    )
    optimizer = Adam(agent.params(), lr=config.lr)
    replay = _Replay(config.replay_capacity, agent_feature_dim(schema), env.n_actions)
    target_params = {k: p.data.copy() for k, p in agent.params().items()}

    def q_target_batch(feats: np.ndarray) -> np.ndarray:
        x = feats
        n_layers = len(agent.net.layers)
        for i in range(n_layers):
            w = target_params[f"q.{i}.weight"]
            b = target_params[f"q.{i}.bias"]
            x = x @ w + b
            if i < n_layers - 1:
                x = np.maximum(x, 0.0)
        return x

    curve: list[float] = []
    steps = 0
    while steps < config.train_steps:
        env.reset(int(rng.integers(2**31)))
        episode_return = 0.0
        done = False
        while not done and steps < config.train_steps:
            features = agent_features(env.observe(), schema)
            frac = min(1.0, steps / max(1, config.epsilon_decay_steps))
            epsilon = config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)
            if rng.random() < epsilon:
                action = int(rng.integers(env.n_actions))
            else:
                action = int(np.argmax(agent.q_features(features)))

            _, reward, done = env.step(action)
            episode_return += reward
            next_features = features if done else agent_features(env.observe(), schema)
            replay.push(features, action, reward, next_features, done)
            steps += 1

            if replay.size >= max(config.warmup_steps, config.batch_size):
                f, a, r, nf, term = replay.sample(config.batch_size, rng)
                next_q = q_target_batch(nf).max(axis=1)
                targets = r + config.gamma * next_q * (~term)
                mask = np.zeros((config.batch_size, env.n_actions))
                mask[np.arange(config.batch_size), a] = 1.0
                target_matrix = mask * targets[:, None]
                q = agent.net(Tensor(f))
                err = (q - Tensor(target_matrix)) * Tensor(mask)
                loss = ad.scale(ad.sum_all(err**2), 1.0 / config.batch_size)
                optimizer.zero_grad()
                ad.backward(loss)
                optimizer.step()

            if steps % config.target_sync == 0:
                target_params = {k: p.data.copy() for k, p in agent.params().items()}
        curve.append(episode_return)

    # Calibrate the riskiness margin scale on on-policy rollouts.
    margins: list[float] = []
    for _ in range(config.calibration_episodes):
        for record in _run_policy_episode(agent, env, seed=int(rng.integers(2**31)), rng=rng):
            q = agent.q_values(record.observation)
            margins.append(float(q.max() - q.min()))
    agent.margin_scale = max(float(np.percentile(margins, config.margin_percentile)), 1e-9)

    eval_returns = [
        sum(r.reward for r in _run_policy_episode(agent, env, seed=int(rng.integers(2**31)), rng=rng))
        for _ in range(config.eval_episodes)
    ]
    mean_return = float(np.mean(eval_returns))
    log.info("trained %s agent: eval mean return %.2f over %d episodes", environment, mean_return, config.eval_episodes)
    if config.return_floor is not None and mean_return < config.return_floor:
        raise TrainingFailureError(
            f"mean eval return {mean_return:.2f} below floor {config.return_floor:.2f}", history=curve
        )
    return agent, curve


# ---------------------------------------------------------------------------
# Checkpoints: JSON header line + little-endian float32 weight blob.


def save_agent(agent: ValueAgent, path: str | Path) -> None:
    header = {
        "format": AGENT_FORMAT,
        "version": AGENT_VERSION,
        "environment": agent.environment,
        "schema": agent.schema.to_json_dict(),
        "n_actions": agent.n_actions,
        "hidden": agent.hidden,
        "gamma": agent.gamma,
        "temperature": agent.temperature,
        "margin_scale": agent.margin_scale,
    }
    blob = flatten_params(agent.params())
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(blob.tobytes())


def load_agent(path: str | Path) -> ValueAgent:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise MalformedFileError("agent checkpoint has no header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFileError(f"agent checkpoint header unreadable: {exc}") from exc
    if header.get("format") != AGENT_FORMAT or header.get("version") != AGENT_VERSION:
        raise MalformedFileError("not a compatible agent checkpoint")
    agent = ValueAgent(
        schema=schema_from_json_dict(header["schema"]),
        n_actions=header["n_actions"],
        hidden=header["hidden"],
        gamma=header["gamma"],
        temperature=header["temperature"],
        seed=0,
        margin_scale=header["margin_scale"],
        environment=header["environment"],
    )
    blob = np.frombuffer(raw[newline + 1 :], dtype="<f4")
    try:
        load_flat_params(agent.params(), blob)
    except ValueError as exc:
        raise MalformedFileError(str(exc)) from exc
    return agent
