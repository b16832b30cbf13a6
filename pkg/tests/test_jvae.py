import numpy as np
import pytest

from latentcf import autodiff as ad
from latentcf.agent import OutcomeVector, StepRecord
from latentcf.autodiff import Tensor
from latentcf.dataset import VectorSchema, build_dataset, grid_schema
from latentcf.envs import VectorObservation
from latentcf.errors import MalformedFileError, SchemaError, ShapeError
from latentcf.jvae import (
    MODE_RECON_ONLY,
    JointVAE,
    TrainSchedule,
    VAEConfig,
    default_vae_config,
    load_model,
    sample_latent,
    save_model,
    train,
)

VEC_SCHEMA = VectorSchema(names=("a", "b", "c", "d"), lows=(-1.0,) * 4, highs=(1.0,) * 4)


@pytest.fixture
def grid_model():
    return JointVAE(grid_schema(), default_vae_config("gridworld"), seed=3, environment="gridworld")


@pytest.fixture
def vec_model():
    return JointVAE(VEC_SCHEMA, VAEConfig(latent_dim=4, mlp_hidden=16, head_hidden=8), seed=3, environment="cartpole")


def low_rank_dataset(n_episodes=10, steps=30, seed=0):
    """Structured 4-vectors (rank 2) that a small VAE can compress."""
    rng = np.random.default_rng(seed)
    basis = rng.normal(size=(2, 4))
    episodes = []
    for _ in range(n_episodes):
        records = []
        for _ in range(steps):
            u = rng.uniform(-1, 1, size=2)
            v = np.clip(u @ basis, -0.99, 0.99)
            outcome = OutcomeVector(
                value=float(u[0]), confidence=float(np.clip(u[1], -1, 1)), riskiness=float(np.clip(u.mean(), -1, 1))
            )
            records.append(StepRecord(VectorObservation(values=v), outcome, 0, 0.0))
        episodes.append(records)
    return build_dataset(episodes, VEC_SCHEMA, "cartpole", split_seed=1)


class TestEncodeSample:
    def test_zero_noise_returns_mu(self, grid_model):
        rng = np.random.default_rng(0)
        x = rng.normal(size=grid_model.schema.tensor_shape)
        mu, logvar = grid_model.encode(x)
        np.testing.assert_array_equal(sample_latent(mu, logvar, seed=None), mu)

    def test_collapsed_variance_sample_near_mu(self, grid_model):
        mu = np.linspace(-1, 1, grid_model.latent_dim)
        logvar = np.full(grid_model.latent_dim, -20.0)
        z = sample_latent(mu, logvar, seed=5)
        np.testing.assert_allclose(z, mu, atol=1e-4)

    def test_sampling_std_matches_logvar(self):
        mu = np.array([0.5, -0.5])
        logvar = np.array([0.0, -2.0])
        draws = np.stack([sample_latent(mu, logvar, seed=i) for i in range(10_000)])
        std = draws.std(axis=0)
        np.testing.assert_allclose(std, np.exp(logvar / 2), rtol=0.05)

    def test_schema_mismatch(self, grid_model):
        with pytest.raises(SchemaError):
            grid_model.encode(np.zeros((3, 8, 8)))


class TestDecode:
    def test_deterministic(self, grid_model):
        z = np.random.default_rng(1).normal(size=grid_model.latent_dim)
        np.testing.assert_array_equal(grid_model.decode(z), grid_model.decode(z))

    def test_untrained_output_is_finite_and_shaped(self, grid_model):
        z = np.random.default_rng(2).normal(size=grid_model.latent_dim) * 5
        out = grid_model.decode(z)
        assert out.shape == grid_model.schema.tensor_shape
        assert np.isfinite(out).all()

    def test_numeric_channel_bounded(self, grid_model):
        z = np.random.default_rng(3).normal(size=(16, grid_model.latent_dim)) * 10
        out = grid_model.decode(z)
        numeric = out[:, grid_model.schema.n_kinds]
        assert (np.abs(numeric) <= 1.0).all()

    def test_wrong_latent_dim(self, grid_model):
        with pytest.raises(ShapeError):
            grid_model.decode(np.zeros(grid_model.latent_dim + 1))


class TestPredictOutcomes:
    def test_bounded_for_random_latents(self, grid_model):
        z = np.random.default_rng(4).normal(size=(50, grid_model.latent_dim)) * 10
        preds = grid_model.predict_outcomes(z)
        assert preds.shape == (50, 3)
        assert (np.abs(preds) <= 1.0).all()


class TestLoss:
    def test_beta_zero_weight_zero_total_is_recon(self, vec_model):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, size=(6, 4))
        y = rng.uniform(-1, 1, size=(6, 3))
        terms = vec_model.loss(x, y, beta=0.0, outcome_weight=0.0)
        assert terms["total"].item() == pytest.approx(terms["recon"].item())

    def test_kl_nonnegative_on_random_batches(self, vec_model):
        rng = np.random.default_rng(6)
        for _ in range(10):
            x = rng.uniform(-1, 1, size=(4, 4))
            terms = vec_model.loss(x, np.zeros((4, 3)), beta=1e-5, outcome_weight=1.0)
            assert terms["kl"].item() >= 0.0

    def test_empty_batch_rejected(self, vec_model):
        with pytest.raises(ShapeError):
            vec_model.loss(np.zeros((0, 4)), np.zeros((0, 3)), beta=0.0, outcome_weight=0.0)

    def test_loss_gradient_matches_finite_differences(self, vec_model):
        rng = np.random.default_rng(7)
        x = rng.uniform(-0.9, 0.9, size=(2, 4))
        y = rng.uniform(-1, 1, size=(2, 3))
        layer = vec_model.enc_mlp.layers[0]

        def f(w):
            saved = layer.weight
            layer.weight = ad.reshape(w, saved.shape)
            try:
                return vec_model.loss(x, y, beta=1e-3, outcome_weight=1.0)["total"]
            finally:
                layer.weight = saved

        err = ad.grad_check(f, layer.weight.data.reshape(-1).copy(), step=1e-4)
        assert err < 1e-3

    def test_latent_gradient_exists_and_checks(self, grid_model):
        # The property that makes latent traversal possible at all.
        rng = np.random.default_rng(8)
        x = rng.normal(size=(1,) + grid_model.schema.tensor_shape)
        n_kinds = grid_model.schema.n_kinds
        targets = np.argmax(x[:, :n_kinds], axis=1)

        def f(z):
            out = grid_model.decode_t(ad.reshape(z, (1, grid_model.latent_dim)))
            ce = ad.loss_categorical(ad.narrow(out, 1, 0, n_kinds), targets, axis=1)
            diff = ad.narrow(out, 1, n_kinds, 1) - Tensor(x[:, n_kinds:])
            return ce + ad.sum_all(diff**2)

        err = ad.grad_check(f, rng.normal(size=grid_model.latent_dim) * 0.3, step=1e-4)
        assert err < 1e-3


class TestElbo:
    def test_beta_zero_equals_recon(self, vec_model):
        x = np.random.default_rng(9).uniform(-1, 1, size=4)
        mu, _ = vec_model.encode(x)
        recon = float(((vec_model.decode(mu) - x) ** 2).sum())
        assert vec_model.elbo_loss(x, beta=0.0) == pytest.approx(recon, rel=1e-9)

    def test_nonnegative_on_onehot_grid(self, grid_model):
        from latentcf.dataset import encode_observation
        from latentcf.envs import GridWorldEnv

        env = GridWorldEnv()
        env.reset(seed=0)
        x = encode_observation(env.observe(), grid_model.schema)
        assert grid_model.elbo_loss(x) >= 0.0

    def test_matches_loss_terms_on_singleton(self, vec_model):
        x = np.random.default_rng(10).uniform(-1, 1, size=(1, 4))
        terms = vec_model.loss(x, np.zeros((1, 3)), beta=1e-5, outcome_weight=0.0)
        expected = terms["recon"].item() + 1e-5 * terms["kl"].item()
        assert vec_model.elbo_loss(x[0], beta=1e-5) == pytest.approx(expected, rel=1e-9)


class TestTraining:
    def test_recon_halves_and_deterministic(self):
        ds = low_rank_dataset()
        sched = TrainSchedule(epochs=8, batch_size=32, lr=3e-3)
        m1 = JointVAE(VEC_SCHEMA, VAEConfig(latent_dim=4, mlp_hidden=32, head_hidden=8), seed=13)
        curves1 = train(m1, ds, sched, seed=21)
        assert curves1[-1]["recon"] < 0.5 * curves1[0]["recon"]

        m2 = JointVAE(VEC_SCHEMA, VAEConfig(latent_dim=4, mlp_hidden=32, head_hidden=8), seed=13)
        train(m2, ds, sched, seed=21)
        for (k1, p1), (k2, p2) in zip(m1.params().items(), m2.params().items()):
            assert k1 == k2
            np.testing.assert_array_equal(p1.data, p2.data)

    def test_beta_schedule_nondecreasing(self):
        sched = TrainSchedule(epochs=10, beta_start=0.0, beta_end=1e-5)
        betas = [sched.beta_at(e) for e in range(10)]
        assert betas[0] == 0.0
        assert betas[-1] == pytest.approx(1e-5)
        assert all(a <= b for a, b in zip(betas, betas[1:]))

    def test_recon_only_head_gradients_never_reach_codec(self, vec_model):
        model = JointVAE(VEC_SCHEMA, VAEConfig(latent_dim=4, mlp_hidden=16, head_hidden=8), seed=3, mode=MODE_RECON_ONLY)
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, size=(5, 4))
        y = rng.uniform(-1, 1, size=(5, 3))
        terms = model.loss(x, y, beta=1e-5, outcome_weight=1.0)
        ad.backward(terms["head_loss"])
        for name, p in model.codec_params().items():
            assert p.grad is None, f"codec parameter {name} received a head gradient"
        assert any(p.grad is not None for p in model.head_params().values())

    def test_recon_only_training_keeps_codec_frozen_in_head_phase(self):
        ds = low_rank_dataset(n_episodes=4, steps=10)
        model = JointVAE(VEC_SCHEMA, VAEConfig(latent_dim=4, mlp_hidden=16, head_hidden=8), seed=3, mode=MODE_RECON_ONLY)
        curves = train(model, ds, TrainSchedule(epochs=2, batch_size=16), seed=5)
        phases = [row["phase"] for row in curves]
        assert phases == ["codec", "codec", "heads", "heads"]


class TestCheckpoint:
    def test_roundtrip_fixed_point(self, grid_model, tmp_path):
        p1, p2 = tmp_path / "m1.ckpt", tmp_path / "m2.ckpt"
        save_model(grid_model, p1)
        loaded = load_model(p1)
        save_model(loaded, p2)
        again = load_model(p2)
        z = np.random.default_rng(12).normal(size=grid_model.latent_dim)
        np.testing.assert_array_equal(loaded.decode(z), again.decode(z))
        np.testing.assert_allclose(loaded.decode(z), grid_model.decode(z), atol=1e-4)
        assert loaded.mode == grid_model.mode
        assert loaded.schema == grid_model.schema

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b'{"format": "other"}\n\x00\x00')
        with pytest.raises(MalformedFileError):
            load_model(path)
