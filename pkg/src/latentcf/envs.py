"""Two desk-scale RL environments: classic cartpole and a predator/prey gridworld.

The gridworld is an 8x8 arena where the player grows by consuming strictly
weaker entities and dies to stronger ones; wanderers random-walk, bouncers
travel in straight lines and reverse at obstacles, chasers close on the
player.  Both environments are fully determined by (seed, action sequence).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParameterError

# Gridworld cell vocabulary.
KIND_EMPTY = 0
KIND_PLAYER = 1
KIND_FOOD = 2
KIND_WANDERER = 3
KIND_BOUNCER = 4
KIND_CHASER = 5
KIND_NAMES = ("empty", "player", "food", "wanderer", "bouncer", "chaser")
N_KINDS = len(KIND_NAMES)

BASE_STRENGTH = {KIND_FOOD: 1, KIND_WANDERER: 2, KIND_BOUNCER: 3, KIND_CHASER: 4}

GRID_ACTIONS = ("up", "down", "left", "right", "stay")
_GRID_DELTAS = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1), 4: (0, 0)}

CARTPOLE_ACTIONS = ("left", "right")


@dataclass(frozen=True)
class VectorObservation:
    """A plain numeric observation (cartpole's 4-vector)."""

    values: np.ndarray

    def __eq__(self, other):
        return isinstance(other, VectorObservation) and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class GridObservation:
    """Categorical spatial layers: one kind code and one strength per cell."""

    kinds: np.ndarray
    strengths: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, GridObservation)
            and np.array_equal(self.kinds, other.kinds)
            and np.array_equal(self.strengths, other.strengths)
        )


Observation = VectorObservation | GridObservation


# ---------------------------------------------------------------------------
# Cartpole


@dataclass(frozen=True)
class CartpoleConfig:
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    force: float = 10.0
    dt: float = 0.02
    angle_threshold: float = 12.0 * 2.0 * math.pi / 360.0
    position_threshold: float = 2.4
    max_steps: int = 200


@dataclass(frozen=True)
class CartpoleState:
    position: float
    velocity: float
    angle: float
    angular_velocity: float


def cartpole_terminal(state: CartpoleState, config: CartpoleConfig) -> bool:
    return abs(state.angle) > config.angle_threshold or abs(state.position) > config.position_threshold


def cartpole_step(state: CartpoleState, action: int, config: CartpoleConfig) -> tuple[CartpoleState, float, bool]:
    """One Euler step of the classic dynamics; reward 1 per step."""
    if action not in (0, 1):
        raise ParameterError(f"cartpole action must be 0 (left) or 1 (right), got {action}")
    if cartpole_terminal(state, config):
        raise ContractError("cartpole_step called on a terminal state")

    force = config.force if action == 1 else -config.force
    total_mass = config.cart_mass + config.pole_mass
    pole_ml = config.pole_mass * config.half_length
    cos_t = math.cos(state.angle)
    sin_t = math.sin(state.angle)
    temp = (force + pole_ml * state.angular_velocity**2 * sin_t) / total_mass
    ang_acc = (config.gravity * sin_t - cos_t * temp) / (
        config.half_length * (4.0 / 3.0 - config.pole_mass * cos_t**2 / total_mass)
    )
    lin_acc = temp - pole_ml * ang_acc * cos_t / total_mass

    new = CartpoleState(
        position=state.position + config.dt * state.velocity,
        velocity=state.velocity + config.dt * lin_acc,
        angle=state.angle + config.dt * state.angular_velocity,
        angular_velocity=state.angular_velocity + config.dt * ang_acc,
    )
    return new, 1.0, cartpole_terminal(new, config)


class CartpoleEnv:
    """Stateful wrapper that adds the step cap and seeded resets."""

    n_actions = 2
    action_names = CARTPOLE_ACTIONS

    def __init__(self, config: CartpoleConfig | None = None):
        self.config = config or CartpoleConfig()
        self.state: CartpoleState | None = None
        self.steps = 0
        self.done = True

    def reset(self, seed: int) -> CartpoleState:
        rng = np.random.default_rng(seed)
        self.state = CartpoleState(*rng.uniform(-0.05, 0.05, size=4))
        self.steps = 0
        self.done = False
        return self.state

    def step(self, action: int) -> tuple[CartpoleState, float, bool]:
        if self.done or self.state is None:
            raise ContractError("step called on a finished episode; call reset first")
        self.state, reward, terminal = cartpole_step(self.state, action, self.config)
        self.steps += 1
        self.done = terminal or self.steps >= self.config.max_steps
        return self.state, reward, self.done

    def observe(self) -> VectorObservation:
        if self.state is None:
            raise ContractError("observe called before reset")
        return render_observation(self.state)


# ---------------------------------------------------------------------------
# Gridworld


@dataclass(frozen=True)
class GridConfig:
    height: int = 8
    width: int = 8
    n_food: int = 3
    n_wanderers: int = 2
    n_bouncers: int = 1
    n_chasers: int = 1
    max_steps: int = 100
    consume_reward: float = 1.0  # multiplied by the consumed entity's strength
    stall_penalty: float = 0.05
    death_penalty: float = 5.0
    start_strength: int = 2
    max_strength: int = 6
    chaser_period: int = 2  # chaser acts every Nth step; 1 = every step

    @classmethod
    def from_dict(cls, raw: dict) -> "GridConfig":
        return cls(**raw)


@dataclass
class GridState:
    kinds: np.ndarray  # (H, W) int8 kind codes
    strengths: np.ndarray  # (H, W) int8, 0 on empty cells
    player: tuple[int, int]
    steps: int = 0
    done: bool = False
    # Bouncer headings are hidden dynamics state, not part of the observation.
    directions: dict[tuple[int, int], tuple[int, int]] = field(default_factory=dict)

    def copy(self) -> "GridState":
        return GridState(
            kinds=self.kinds.copy(),
            strengths=self.strengths.copy(),
            player=self.player,
            steps=self.steps,
            done=self.done,
            directions=dict(self.directions),
        )


def grid_reset(seed: int, config: GridConfig) -> tuple[GridState, np.random.Generator]:
    """Fresh episode state plus the generator that drives its stochastic entities."""
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    n_entities = 1 + config.n_food + config.n_wanderers + config.n_bouncers + config.n_chasers
    if n_entities > h * w:
        raise ParameterError(f"{n_entities} entities do not fit a {h}x{w} grid")

    cells = rng.choice(h * w, size=n_entities, replace=False)
    positions = [(int(c) // w, int(c) % w) for c in cells]
    kinds = np.zeros((h, w), dtype=np.int8)
    strengths = np.zeros((h, w), dtype=np.int8)
    directions: dict[tuple[int, int], tuple[int, int]] = {}

    layout = (
        [KIND_PLAYER]
        + [KIND_FOOD] * config.n_food
        + [KIND_WANDERER] * config.n_wanderers
        + [KIND_BOUNCER] * config.n_bouncers
        + [KIND_CHASER] * config.n_chasers
    )
    player = positions[0]
    for pos, kind in zip(positions, layout):
        kinds[pos] = kind
        strengths[pos] = config.start_strength if kind == KIND_PLAYER else BASE_STRENGTH[kind]
        if kind == KIND_BOUNCER:
            directions[pos] = _GRID_DELTAS[int(rng.integers(0, 4))]

    return GridState(kinds=kinds, strengths=strengths, player=player, directions=directions), rng


def _in_bounds(pos: tuple[int, int], kinds: np.ndarray) -> bool:
    return 0 <= pos[0] < kinds.shape[0] and 0 <= pos[1] < kinds.shape[1]


def _entity_try_move(state: GridState, src: tuple[int, int], dst: tuple[int, int]) -> str:
    """Move a non-player entity; returns 'moved', 'caught' (player consumed), or 'blocked'."""
    if not _in_bounds(dst, state.kinds) or dst == src:
        return "blocked"
    if state.kinds[dst] == KIND_EMPTY:
        _relocate(state, src, dst)
        return "moved"
    if dst == state.player and state.strengths[src] > state.strengths[state.player]:
        state.kinds[state.player] = KIND_EMPTY
        state.strengths[state.player] = 0
        _relocate(state, src, dst)
        return "caught"
    return "blocked"


def _relocate(state: GridState, src: tuple[int, int], dst: tuple[int, int]) -> None:
    state.kinds[dst] = state.kinds[src]
    state.strengths[dst] = state.strengths[src]
    state.kinds[src] = KIND_EMPTY
    state.strengths[src] = 0
    if src in state.directions:
        state.directions[dst] = state.directions.pop(src)


def grid_step(
    state: GridState, action: int, config: GridConfig, rng: np.random.Generator
) -> tuple[GridState, float, bool]:
    """Player phase, then entity phases in row-major order of entity position.

    Invalid moves are no-ops.  Consuming a strictly weaker entity yields its
    strength times ``consume_reward`` and +1 player strength; stepping onto a
    stronger entity (or being caught by one) ends the episode with the death
    penalty.  Steps without a consumption pay the stall penalty.
    """
    if state.done:
        raise ContractError("grid_step called on a finished episode")
    if action not in _GRID_DELTAS:
        raise ParameterError(f"grid action must be in 0..4, got {action}")

    state = state.copy()
    reward = 0.0
    consumed = False

    dr, dc = _GRID_DELTAS[action]
    target = (state.player[0] + dr, state.player[1] + dc)
    if target != state.player and _in_bounds(target, state.kinds):
        occupant = int(state.kinds[target])
        player_strength = int(state.strengths[state.player])
        if occupant == KIND_EMPTY:
            _relocate(state, state.player, target)
            state.player = target
        elif int(state.strengths[target]) < player_strength:
            reward += config.consume_reward * float(state.strengths[target])
            consumed = True
            state.directions.pop(target, None)
            _relocate(state, state.player, target)
            state.player = target
            state.strengths[target] = min(player_strength + 1, config.max_strength)
        elif int(state.strengths[target]) > player_strength:
            state.kinds[state.player] = KIND_EMPTY
            state.strengths[state.player] = 0
            state.done = True
            state.steps += 1
            return state, -config.death_penalty, True
        # Equal strength: blocked, no-op.

    if not consumed:
        reward -= config.stall_penalty

    # Entity phase over a row-major snapshot of current entity positions.
    entity_positions = [
        (int(r), int(c))
        for r, c in np.argwhere((state.kinds != KIND_EMPTY) & (state.kinds != KIND_PLAYER))
    ]
    for pos in entity_positions:
        kind = int(state.kinds[pos])
        if kind == KIND_EMPTY or pos == state.player:
            continue  # vacated earlier in this phase
        outcome = "blocked"
        if kind == KIND_WANDERER:
            delta = _GRID_DELTAS[int(rng.integers(0, 5))]
            outcome = _entity_try_move(state, pos, (pos[0] + delta[0], pos[1] + delta[1]))
        elif kind == KIND_BOUNCER:
            heading = state.directions.get(pos, (0, 1))
            outcome = _entity_try_move(state, pos, (pos[0] + heading[0], pos[1] + heading[1]))
            if outcome == "blocked":
                heading = (-heading[0], -heading[1])
                state.directions[pos] = heading
                outcome = _entity_try_move(state, pos, (pos[0] + heading[0], pos[1] + heading[1]))
        elif kind == KIND_CHASER:
            if state.steps % config.chaser_period != 0:
                continue
            gap_r = state.player[0] - pos[0]
            gap_c = state.player[1] - pos[1]
            first = (int(np.sign(gap_r)), 0) if abs(gap_r) >= abs(gap_c) else (0, int(np.sign(gap_c)))
            second = (0, int(np.sign(gap_c))) if first[1] == 0 else (int(np.sign(gap_r)), 0)
            for delta in (first, second):
                if delta == (0, 0):
                    continue
                outcome = _entity_try_move(state, pos, (pos[0] + delta[0], pos[1] + delta[1]))
                if outcome != "blocked":
                    break
        if outcome == "caught":
            state.done = True
            state.steps += 1
            return state, reward - config.death_penalty, True

    state.steps += 1
    if state.steps >= config.max_steps:
        state.done = True
    return state, reward, state.done


class GridWorldEnv:
    """Stateful wrapper pairing a GridState with its episode RNG."""

    n_actions = 5
    action_names = GRID_ACTIONS

    def __init__(self, config: GridConfig | None = None):
        self.config = config or GridConfig()
        self.state: GridState | None = None
        self._rng: np.random.Generator | None = None

    @property
    def done(self) -> bool:
        return self.state is None or self.state.done

    def reset(self, seed: int) -> GridState:
        self.state, self._rng = grid_reset(seed, self.config)
        return self.state

    def step(self, action: int) -> tuple[GridState, float, bool]:
        if self.state is None or self._rng is None:
            raise ContractError("step called before reset")
        self.state, reward, done = grid_step(self.state, action, self.config, self._rng)
        return self.state, reward, done

    def observe(self) -> GridObservation:
        if self.state is None:
            raise ContractError("observe called before reset")
        return render_observation(self.state)


def render_observation(state: CartpoleState | GridState) -> Observation:
    """Project an environment state onto its observation space."""
    if isinstance(state, CartpoleState):
        return VectorObservation(
            values=np.array([state.position, state.velocity, state.angle, state.angular_velocity])
        )
    if isinstance(state, GridState):
        return GridObservation(kinds=state.kinds.copy(), strengths=state.strengths.copy())
    raise ParameterError(f"cannot render observation for {type(state).__name__}")


def make_env(name: str, grid_config: GridConfig | None = None, cartpole_config: CartpoleConfig | None = None):
    if name == "cartpole":
        return CartpoleEnv(cartpole_config)
    if name == "gridworld":
        return GridWorldEnv(grid_config)
    raise ParameterError(f"unknown environment {name!r}")
