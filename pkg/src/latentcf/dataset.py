"""Feature encoding, outcome normalization, and trajectory persistence.

Observations become model-ready tensors: categorical grid layers are one-hot
per cell, numeric features are min-max mapped to [-1, 1].  The schema is the
single source of truth for which channels are categorical, each numeric
channel's interval width, and how to invert the encoding.  Datasets split by
whole episodes (95/5 by default) and normalization statistics come from the
train split only.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .envs import (
    KIND_NAMES,
    CartpoleConfig,
    GridConfig,
    GridObservation,
    Observation,
    VectorObservation,
)
from .errors import (
    DegenerateStatisticsError,
    MalformedFileError,
    SchemaError,
    SplitError,
)

log = logging.getLogger(__name__)

OUTCOME_NAMES = ("value", "confidence", "riskiness")

DATASET_FORMAT = "latentcf-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class GridSchema:
    """One one-hot layer per kind plus one normalized strength layer."""

    height: int = 8
    width: int = 8
    kind_names: tuple[str, ...] = KIND_NAMES
    strength_max: int = 6
    strength_width: float = 2.0  # odiff interval width of the normalized strength feature

    @property
    def n_kinds(self) -> int:
        return len(self.kind_names)

    @property
    def tensor_shape(self) -> tuple[int, int, int]:
        return (self.n_kinds + 1, self.height, self.width)

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    def encode(self, obs: GridObservation) -> np.ndarray:
        kinds = np.asarray(obs.kinds)
        strengths = np.asarray(obs.strengths)
        if kinds.shape != (self.height, self.width) or strengths.shape != (self.height, self.width):
            raise SchemaError(f"grid observation shape {kinds.shape} != ({self.height}, {self.width})")
        if kinds.min() < 0 or kinds.max() >= self.n_kinds:
            raise SchemaError(f"kind code outside vocabulary [0, {self.n_kinds})")
        if strengths.min() < 0 or strengths.max() > self.strength_max:
            raise SchemaError(f"strength outside [0, {self.strength_max}]")
        onehot = np.moveaxis(np.eye(self.n_kinds, dtype=np.float64)[kinds], -1, 0)
        strength_channel = 2.0 * strengths.astype(np.float64) / self.strength_max - 1.0
        return np.concatenate([onehot, strength_channel[None]], axis=0)

    def decode(self, tensor: np.ndarray) -> GridObservation:
        tensor = np.asarray(tensor, dtype=np.float64)
        if tensor.shape != self.tensor_shape:
            raise SchemaError(f"feature tensor shape {tensor.shape} != {self.tensor_shape}")
        kinds = np.argmax(tensor[: self.n_kinds], axis=0).astype(np.int8)
        raw = (np.clip(tensor[self.n_kinds], -1.0, 1.0) + 1.0) / 2.0 * self.strength_max
        strengths = np.clip(np.rint(raw), 0, self.strength_max).astype(np.int8)
        return GridObservation(kinds=kinds, strengths=strengths)

    def split_features(self, tensor: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(categorical codes, numeric values) for observational-difference scoring.

        Accepts a single tensor or a stacked batch.
        """
        tensor = np.asarray(tensor, dtype=np.float64)
        batched = tensor.ndim == 4
        t = tensor if batched else tensor[None]
        codes = np.argmax(t[:, : self.n_kinds], axis=1).reshape(t.shape[0], -1)
        numeric = t[:, self.n_kinds].reshape(t.shape[0], -1)
        if batched:
            return codes, numeric
        return codes[0], numeric[0]

    @property
    def numeric_widths(self) -> np.ndarray:
        return np.full(self.n_cells, self.strength_width)

    def to_json_dict(self) -> dict:
        return {
            "type": "grid",
            "height": self.height,
            "width": self.width,
            "kind_names": list(self.kind_names),
            "strength_max": self.strength_max,
            "strength_width": self.strength_width,
        }


@dataclass(frozen=True)
class VectorSchema:
    """Plain numeric features, each min-max normalized to [-1, 1]."""

    names: tuple[str, ...]
    lows: tuple[float, ...]
    highs: tuple[float, ...]
    widths: tuple[float, ...] | None = None  # odiff interval widths, default 2.0 each

    @property
    def tensor_shape(self) -> tuple[int]:
        return (len(self.names),)

    def encode(self, obs: VectorObservation) -> np.ndarray:
        values = np.asarray(obs.values, dtype=np.float64)
        if values.shape != (len(self.names),):
            raise SchemaError(f"vector observation length {values.shape} != ({len(self.names)},)")
        if not np.isfinite(values).all():
            raise SchemaError("vector observation contains non-finite values")
        lows = np.asarray(self.lows)
        highs = np.asarray(self.highs)
        return np.clip(2.0 * (values - lows) / (highs - lows) - 1.0, -1.0, 1.0)

    def decode(self, tensor: np.ndarray) -> VectorObservation:
        tensor = np.asarray(tensor, dtype=np.float64)
        if tensor.shape != self.tensor_shape:
            raise SchemaError(f"feature tensor shape {tensor.shape} != {self.tensor_shape}")
        lows = np.asarray(self.lows)
        highs = np.asarray(self.highs)
        values = lows + (np.clip(tensor, -1.0, 1.0) + 1.0) / 2.0 * (highs - lows)
        return VectorObservation(values=values)

    def split_features(self, tensor: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        tensor = np.asarray(tensor, dtype=np.float64)
        batched = tensor.ndim == 2
        t = tensor if batched else tensor[None]
        codes = np.zeros((t.shape[0], 0), dtype=np.int64)
        if batched:
            return codes, t
        return codes[0], t[0]

    @property
    def numeric_widths(self) -> np.ndarray:
        if self.widths is not None:
            return np.asarray(self.widths, dtype=np.float64)
        return np.full(len(self.names), 2.0)

    def to_json_dict(self) -> dict:
        return {
            "type": "vector",
            "names": list(self.names),
            "lows": list(self.lows),
            "highs": list(self.highs),
            "widths": list(self.widths) if self.widths is not None else None,
        }


Schema = GridSchema | VectorSchema


def schema_from_json_dict(raw: dict) -> Schema:
    kind = raw.get("type")
    if kind == "grid":
        return GridSchema(
            height=raw["height"],
            width=raw["width"],
            kind_names=tuple(raw["kind_names"]),
            strength_max=raw["strength_max"],
            strength_width=raw["strength_width"],
        )
    if kind == "vector":
        return VectorSchema(
            names=tuple(raw["names"]),
            lows=tuple(raw["lows"]),
            highs=tuple(raw["highs"]),
            widths=tuple(raw["widths"]) if raw.get("widths") is not None else None,
        )
    raise MalformedFileError(f"unknown schema type {kind!r}")


def grid_schema(config: GridConfig | None = None) -> GridSchema:
    config = config or GridConfig()
    return GridSchema(height=config.height, width=config.width, strength_max=config.max_strength)


def cartpole_schema(config: CartpoleConfig | None = None) -> VectorSchema:
    config = config or CartpoleConfig()
    return VectorSchema(
        names=("position", "velocity", "angle", "angular_velocity"),
        lows=(-config.position_threshold, -3.5, -config.angle_threshold, -3.5),
        highs=(config.position_threshold, 3.5, config.angle_threshold, 3.5),
    )


def encode_observation(obs: Observation, schema: Schema) -> np.ndarray:
    if isinstance(obs, GridObservation) and isinstance(schema, GridSchema):
        return schema.encode(obs)
    if isinstance(obs, VectorObservation) and isinstance(schema, VectorSchema):
        return schema.encode(obs)
    raise SchemaError(f"observation {type(obs).__name__} does not match schema {type(schema).__name__}")


def decode_observation(tensor: np.ndarray, schema: Schema) -> Observation:
    return schema.decode(tensor)


def harden(tensor: np.ndarray, schema: Schema) -> np.ndarray:
    """Project a decoder output onto the nearest valid feature tensor."""
    return schema.encode(schema.decode(tensor))


# ---------------------------------------------------------------------------
# Outcome normalization


@dataclass(frozen=True)
class OutcomeStats:
    """Train-split statistics used to map raw outcomes into [-1, 1]."""

    value_mean: float
    value_std: float
    value_z_min: float
    value_z_max: float

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        out = raw.copy()
        z = (raw[..., 0] - self.value_mean) / self.value_std
        out[..., 0] = 2.0 * (z - self.value_z_min) / (self.value_z_max - self.value_z_min) - 1.0
        return np.clip(out, -1.0, 1.0)

    def to_json_dict(self) -> dict:
        return {
            "value_mean": self.value_mean,
            "value_std": self.value_std,
            "value_z_min": self.value_z_min,
            "value_z_max": self.value_z_max,
        }

    @classmethod
    def from_json_dict(cls, raw: dict) -> "OutcomeStats":
        return cls(**raw)


def normalize_outcomes(raw: np.ndarray, train_mask: np.ndarray) -> tuple[np.ndarray, OutcomeStats]:
    """Standardize then min-max the value column over train rows; clip the rest.

    Raises if the train split is empty or the value column is constant.
    """
    raw = np.asarray(raw, dtype=np.float64)
    train_mask = np.asarray(train_mask, dtype=bool)
    if raw.ndim != 2 or raw.shape[1] != len(OUTCOME_NAMES):
        raise SchemaError(f"outcomes must be (N, {len(OUTCOME_NAMES)}), got {raw.shape}")
    if not train_mask.any():
        raise DegenerateStatisticsError("empty train split")

    values = raw[train_mask, 0]
    mean = float(values.mean())
    std = float(values.std())
    if std == 0.0:
        raise DegenerateStatisticsError("value outcome has zero variance on the train split")
    z = (values - mean) / std
    stats = OutcomeStats(value_mean=mean, value_std=std, value_z_min=float(z.min()), value_z_max=float(z.max()))
    if stats.value_z_max == stats.value_z_min:
        raise DegenerateStatisticsError("value outcome is constant after standardization")

    unclipped = raw.copy()
    unclipped[:, 0] = 2.0 * ((raw[:, 0] - mean) / std - stats.value_z_min) / (stats.value_z_max - stats.value_z_min) - 1.0
    normalized = np.clip(unclipped, -1.0, 1.0)
    n_clipped = int((np.abs(unclipped) > 1.0).sum())
    if n_clipped:
        log.info("normalize_outcomes clipped %d out-of-range entries (test-split overshoot)", n_clipped)
    return normalized, stats


def split_episodes(n_episodes: int, train_fraction: float, seed: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Whole-episode split; at least one episode lands on each side."""
    if n_episodes < 2:
        raise SplitError(f"need at least 2 episodes to split, got {n_episodes}")
    n_test = int(round(n_episodes * (1.0 - train_fraction)))
    n_test = min(max(n_test, 1), n_episodes - 1)
    perm = np.random.default_rng(seed).permutation(n_episodes)
    test = tuple(sorted(int(e) for e in perm[:n_test]))
    train = tuple(sorted(int(e) for e in perm[n_test:]))
    return train, test


# ---------------------------------------------------------------------------
# Trajectory dataset


@dataclass
class Frame:
    episode: int
    step: int
    observation: Observation
    features: np.ndarray
    outcomes_raw: np.ndarray  # (value, confidence, riskiness) as produced by the agent
    outcomes: np.ndarray  # normalized to [-1, 1]
    action: int
    reward: float

    def __eq__(self, other):
        return (
            isinstance(other, Frame)
            and self.episode == other.episode
            and self.step == other.step
            and self.observation == other.observation
            and np.array_equal(self.outcomes_raw, other.outcomes_raw)
            and self.action == other.action
            and self.reward == other.reward
        )


@dataclass
class TrajectoryDataset:
    environment: str
    schema: Schema
    frames: list[Frame]
    n_episodes: int
    train_episodes: tuple[int, ...]
    test_episodes: tuple[int, ...]
    train_fraction: float
    split_seed: int
    stats: OutcomeStats
    grid_config: dict | None = field(default=None)

    def __eq__(self, other):
        return (
            isinstance(other, TrajectoryDataset)
            and self.environment == other.environment
            and self.schema == other.schema
            and self.n_episodes == other.n_episodes
            and self.train_episodes == other.train_episodes
            and self.test_episodes == other.test_episodes
            and self.stats == other.stats
            and self.frames == other.frames
        )

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def frame_indices(self, split: str | None = None) -> np.ndarray:
        if split is None:
            return np.arange(self.n_frames)
        members = set(self.train_episodes if split == "train" else self.test_episodes)
        return np.array([i for i, f in enumerate(self.frames) if f.episode in members], dtype=np.int64)

    def features_matrix(self, split: str | None = None) -> np.ndarray:
        idx = self.frame_indices(split)
        return np.stack([self.frames[i].features for i in idx], axis=0)

    def outcomes_matrix(self, split: str | None = None) -> np.ndarray:
        idx = self.frame_indices(split)
        return np.stack([self.frames[i].outcomes for i in idx], axis=0)


def build_dataset(
    episodes: Sequence[Sequence],
    schema: Schema,
    environment: str,
    train_fraction: float = 0.95,
    split_seed: int = 0,
    grid_config: dict | None = None,
) -> TrajectoryDataset:
    """Assemble rollout episodes into an encoded, normalized, split dataset.

    Each step record needs ``observation``, ``outcome`` (with value /
    confidence / riskiness attributes), ``action``, and ``reward``.
    """
    train_ids, test_ids = split_episodes(len(episodes), train_fraction, split_seed)
    frames: list[Frame] = []
    raw_outcomes = []
    for e, steps in enumerate(episodes):
        for t, record in enumerate(steps):
            outcome = record.outcome
            raw = np.array([outcome.value, outcome.confidence, outcome.riskiness], dtype=np.float64)
            frames.append(
                Frame(
                    episode=e,
                    step=t,
                    observation=record.observation,
                    features=encode_observation(record.observation, schema),
                    outcomes_raw=raw,
                    outcomes=raw,  # replaced below once statistics exist
                    action=record.action,
                    reward=record.reward,
                )
            )
            raw_outcomes.append(raw)

    raw_matrix = np.stack(raw_outcomes, axis=0)
    train_mask = np.array([f.episode in set(train_ids) for f in frames])
    normalized, stats = normalize_outcomes(raw_matrix, train_mask)
    for frame, norm in zip(frames, normalized):
        frame.outcomes = norm

    return TrajectoryDataset(
        environment=environment,
        schema=schema,
        frames=frames,
        n_episodes=len(episodes),
        train_episodes=train_ids,
        test_episodes=test_ids,
        train_fraction=train_fraction,
        split_seed=split_seed,
        stats=stats,
        grid_config=grid_config,
    )


def _observation_to_json(obs: Observation) -> dict:
    if isinstance(obs, GridObservation):
        return {"k": obs.kinds.astype(int).tolist(), "s": obs.strengths.astype(int).tolist()}
    return {"v": [float(v) for v in obs.values]}


def _observation_from_json(raw: dict) -> Observation:
    if "k" in raw:
        return GridObservation(
            kinds=np.array(raw["k"], dtype=np.int8), strengths=np.array(raw["s"], dtype=np.int8)
        )
    return VectorObservation(values=np.array(raw["v"], dtype=np.float64))


def save_dataset(dataset: TrajectoryDataset, path: str | Path) -> None:
    """One JSON header line, then one JSON record per frame."""
    path = Path(path)
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "environment": dataset.environment,
        "schema": dataset.schema.to_json_dict(),
        "n_episodes": dataset.n_episodes,
        "n_frames": dataset.n_frames,
        "split": {
            "train_fraction": dataset.train_fraction,
            "seed": dataset.split_seed,
            "train_episodes": list(dataset.train_episodes),
            "test_episodes": list(dataset.test_episodes),
        },
        "stats": dataset.stats.to_json_dict(),
        "grid_config": dataset.grid_config,
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for f in dataset.frames:
            record = {
                "e": f.episode,
                "t": f.step,
                "obs": _observation_to_json(f.observation),
                "y": [float(v) for v in f.outcomes_raw],
                "a": f.action,
                "r": f.reward,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> TrajectoryDataset:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise MalformedFileError(f"cannot read dataset file {path}: {exc}") from exc
    if not lines:
        raise MalformedFileError(f"dataset file {path} is empty")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"dataset header is not valid JSON: {exc}") from exc
    if header.get("format") != DATASET_FORMAT:
        raise MalformedFileError(f"not a dataset file (format {header.get('format')!r})")
    if header.get("version") != DATASET_VERSION:
        raise MalformedFileError(f"unsupported dataset version {header.get('version')!r}")

    schema = schema_from_json_dict(header["schema"])
    stats = OutcomeStats.from_json_dict(header["stats"])
    n_frames = header["n_frames"]
    if len(lines) - 1 != n_frames:
        raise MalformedFileError(f"expected {n_frames} frame records, found {len(lines) - 1}")

    frames: list[Frame] = []
    for i, line in enumerate(lines[1:]):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedFileError(f"frame record {i} is not valid JSON: {exc}") from exc
        obs = _observation_from_json(record["obs"])
        raw = np.array(record["y"], dtype=np.float64)
        frames.append(
            Frame(
                episode=record["e"],
                step=record["t"],
                observation=obs,
                features=encode_observation(obs, schema),
                outcomes_raw=raw,
                outcomes=stats.normalize(raw),
                action=record["a"],
                reward=record["r"],
            )
        )

    split = header["split"]
    return TrajectoryDataset(
        environment=header["environment"],
        schema=schema,
        frames=frames,
        n_episodes=header["n_episodes"],
        train_episodes=tuple(split["train_episodes"]),
        test_episodes=tuple(split["test_episodes"]),
        train_fraction=split["train_fraction"],
        split_seed=split["seed"],
        stats=stats,
        grid_config=header.get("grid_config"),
    )
