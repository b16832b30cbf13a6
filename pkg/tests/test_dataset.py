import numpy as np
import pytest

from latentcf.agent import OutcomeVector, StepRecord
from latentcf.dataset import (
    GridSchema,
    VectorSchema,
    build_dataset,
    cartpole_schema,
    decode_observation,
    encode_observation,
    grid_schema,
    harden,
    load_dataset,
    normalize_outcomes,
    save_dataset,
    schema_from_json_dict,
    split_episodes,
)
from latentcf.envs import GridObservation, VectorObservation
from latentcf.errors import (
    DegenerateStatisticsError,
    MalformedFileError,
    SchemaError,
    SplitError,
)


def random_grid_obs(rng, schema):
    return GridObservation(
        kinds=rng.integers(0, schema.n_kinds, size=(schema.height, schema.width)).astype(np.int8),
        strengths=rng.integers(0, schema.strength_max + 1, size=(schema.height, schema.width)).astype(np.int8),
    )


def random_vector_obs(rng, schema):
    lows, highs = np.asarray(schema.lows), np.asarray(schema.highs)
    return VectorObservation(values=rng.uniform(lows, highs))


class TestEncoding:
    def test_single_entity_grid_is_one_hot(self):
        schema = grid_schema()
        kinds = np.zeros((8, 8), dtype=np.int8)
        kinds[2, 3] = 1
        obs = GridObservation(kinds=kinds, strengths=np.zeros((8, 8), dtype=np.int8))
        t = encode_observation(obs, schema)
        assert t.shape == schema.tensor_shape
        onehot = t[: schema.n_kinds]
        np.testing.assert_array_equal(onehot.sum(axis=0), np.ones((8, 8)))
        assert onehot[1, 2, 3] == 1.0
        assert onehot[0].sum() == 63

    def test_grid_roundtrip(self):
        schema = grid_schema()
        rng = np.random.default_rng(0)
        for _ in range(1000):
            obs = random_grid_obs(rng, schema)
            assert decode_observation(encode_observation(obs, schema), schema) == obs

    def test_vector_roundtrip(self):
        schema = cartpole_schema()
        rng = np.random.default_rng(1)
        for _ in range(1000):
            obs = random_vector_obs(rng, schema)
            back = decode_observation(encode_observation(obs, schema), schema)
            np.testing.assert_allclose(back.values, obs.values, atol=1e-12)

    def test_out_of_vocabulary_kind(self):
        schema = grid_schema()
        kinds = np.full((8, 8), 9, dtype=np.int8)
        with pytest.raises(SchemaError):
            encode_observation(GridObservation(kinds=kinds, strengths=np.zeros((8, 8), dtype=np.int8)), schema)

    def test_wrong_observation_type(self):
        with pytest.raises(SchemaError):
            encode_observation(VectorObservation(values=np.zeros(4)), grid_schema())

    def test_uniform_logits_tie_break_to_lowest_index(self):
        schema = grid_schema()
        t = np.zeros(schema.tensor_shape)
        obs = decode_observation(t, schema)
        assert (obs.kinds == 0).all()

    def test_harden_produces_valid_tensor(self):
        schema = grid_schema()
        rng = np.random.default_rng(2)
        raw = rng.normal(size=schema.tensor_shape) * 3
        h = harden(raw, schema)
        onehot = h[: schema.n_kinds]
        np.testing.assert_array_equal(onehot.sum(axis=0), np.ones((8, 8)))
        assert np.isin(onehot, [0.0, 1.0]).all()
        # hardening is idempotent
        np.testing.assert_array_equal(harden(h, schema), h)

    def test_schema_json_roundtrip(self):
        for schema in [grid_schema(), cartpole_schema(), VectorSchema(("a",), (0.0,), (4.0,), widths=(4.0,))]:
            assert schema_from_json_dict(schema.to_json_dict()) == schema


class TestNormalizeOutcomes:
    def test_constant_value_column_raises(self):
        raw = np.tile([1.0, 0.0, 0.0], (10, 1))
        with pytest.raises(DegenerateStatisticsError):
            normalize_outcomes(raw, np.ones(10, dtype=bool))

    def test_train_min_max_map_to_endpoints(self):
        rng = np.random.default_rng(3)
        raw = np.column_stack([rng.normal(size=20) * 5, rng.uniform(-1, 1, 20), rng.uniform(-1, 1, 20)])
        norm, stats = normalize_outcomes(raw, np.ones(20, dtype=bool))
        assert norm[:, 0].min() == pytest.approx(-1.0)
        assert norm[:, 0].max() == pytest.approx(1.0)

    def test_test_split_values_clipped(self):
        raw = np.zeros((10, 3))
        raw[:, 0] = np.arange(10.0)
        train_mask = np.array([True] * 8 + [False] * 2)  # test rows hold the extremes
        raw[8, 0] = 100.0
        raw[9, 0] = -100.0
        norm, _ = normalize_outcomes(raw, train_mask)
        assert norm[8, 0] == 1.0 and norm[9, 0] == -1.0
        assert np.abs(norm).max() <= 1.0

    def test_stats_recomputable_from_train_only(self):
        rng = np.random.default_rng(4)
        raw = np.column_stack([rng.normal(size=30), rng.uniform(-1, 1, 30), rng.uniform(-1, 1, 30)])
        mask = rng.random(30) < 0.7
        _, stats = normalize_outcomes(raw, mask)
        values = raw[mask, 0]
        assert stats.value_mean == pytest.approx(float(values.mean()))
        assert stats.value_std == pytest.approx(float(values.std()))


class TestSplit:
    def test_95_5(self):
        train, test = split_episodes(100, 0.95, seed=0)
        assert len(train) == 95 and len(test) == 5
        assert set(train) | set(test) == set(range(100))
        assert set(train) & set(test) == set()

    def test_single_episode_raises(self):
        with pytest.raises(SplitError):
            split_episodes(1, 0.95, seed=0)

    def test_two_episodes_gives_one_each(self):
        train, test = split_episodes(2, 0.95, seed=0)
        assert len(train) == 1 and len(test) == 1

    def test_same_seed_identical(self):
        assert split_episodes(40, 0.95, 7) == split_episodes(40, 0.95, 7)

    def test_different_seed_differs(self):
        assert split_episodes(100, 0.95, 1) != split_episodes(100, 0.95, 2)


def synthetic_dataset(n_episodes=12, steps_per_episode=6, seed=5):
    schema = grid_schema()
    rng = np.random.default_rng(seed)
    episodes = []
    for _ in range(n_episodes):
        steps = []
        for _ in range(steps_per_episode):
            obs = random_grid_obs(rng, schema)
            outcome = OutcomeVector(
                value=float(rng.normal() * 3),
                confidence=float(rng.uniform(-1, 1)),
                riskiness=float(rng.uniform(-1, 1)),
            )
            steps.append(StepRecord(observation=obs, outcome=outcome, action=int(rng.integers(5)), reward=float(rng.normal())))
        episodes.append(steps)
    return build_dataset(episodes, schema, "gridworld", split_seed=3)


class TestDatasetPersistence:
    def test_save_load_roundtrip(self, tmp_path):
        ds = synthetic_dataset()
        path = tmp_path / "d.jsonl"
        save_dataset(ds, path)
        assert load_dataset(path) == ds

    def test_save_is_byte_stable(self, tmp_path):
        ds = synthetic_dataset()
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_dataset(ds, p1)
        save_dataset(load_dataset(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_rejected(self, tmp_path):
        ds = synthetic_dataset()
        path = tmp_path / "d.jsonl"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-2]) + "\n")
        with pytest.raises(MalformedFileError):
            load_dataset(path)

    def test_corrupt_json_rejected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(MalformedFileError):
            load_dataset(path)

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"format": "something-else", "version": 1}\n')
        with pytest.raises(MalformedFileError):
            load_dataset(path)

    def test_split_is_by_episode(self):
        ds = synthetic_dataset()
        train_eps = {ds.frames[i].episode for i in ds.frame_indices("train")}
        test_eps = {ds.frames[i].episode for i in ds.frame_indices("test")}
        assert train_eps.isdisjoint(test_eps)
        assert train_eps | test_eps == set(range(ds.n_episodes))

    def test_normalization_uses_train_frames_only(self):
        ds = synthetic_dataset()
        train_mask = np.array([f.episode in set(ds.train_episodes) for f in ds.frames])
        raw = np.stack([f.outcomes_raw for f in ds.frames])
        renorm, stats = normalize_outcomes(raw, train_mask)
        assert stats == ds.stats
        np.testing.assert_array_equal(renorm, np.stack([f.outcomes for f in ds.frames]))
