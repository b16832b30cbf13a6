"""Variational autoencoder whose latent jointly encodes observations and outcomes.

The encoder produces a diagonal-Gaussian latent; the decoder reconstructs
the feature tensor (logits for categorical channels, tanh-bounded values
for numeric channels); one small tanh-output head per outcome variable
reads the same latent.  In joint mode the outcome losses shape the latent;
in reconstruction-only mode the heads are fitted afterwards on frozen
latents and their gradients never touch encoder or decoder parameters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import OUTCOME_NAMES, GridSchema, Schema, TrajectoryDataset, schema_from_json_dict
from .errors import MalformedFileError, SchemaError, ShapeError, TrainingFailureError
from .nn import MLP, Conv2d, Dense, flatten_params, load_flat_params, merge_params
from .optim import Adam

log = logging.getLogger(__name__)

MODEL_FORMAT = "latentcf-jvae"
MODEL_VERSION = 1

MODE_JOINT = "joint"
MODE_RECON_ONLY = "reconstruction-only"


@dataclass(frozen=True)
class VAEConfig:
    latent_dim: int
    conv_channels: tuple[int, int] = (16, 32)
    dense_hidden: int = 128
    mlp_hidden: int = 64
    head_hidden: int = 32

    def to_json_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "conv_channels": list(self.conv_channels),
            "dense_hidden": self.dense_hidden,
            "mlp_hidden": self.mlp_hidden,
            "head_hidden": self.head_hidden,
        }

    @classmethod
    def from_json_dict(cls, raw: dict) -> "VAEConfig":
        raw = dict(raw)
        raw["conv_channels"] = tuple(raw["conv_channels"])
        return cls(**raw)


def default_vae_config(environment: str) -> VAEConfig:
    if environment == "gridworld":
        return VAEConfig(latent_dim=48, head_hidden=128)
    return VAEConfig(latent_dim=8, head_hidden=32)


def default_schedule(environment: str) -> TrainSchedule:
    """Budgets tuned so outcome-prediction test MSE lands under 0.1 per variable.

    Reconstruction is summed over features while outcome errors are per
    variable, so the outcome weight is an order of magnitude above 1 to give
    the heads comparable pull on the shared latent.
    """
    if environment == "gridworld":
        return TrainSchedule(epochs=20, batch_size=64, lr=1e-3, outcome_weight=20.0)
    return TrainSchedule(epochs=40, batch_size=64, lr=1e-3, outcome_weight=10.0)


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    beta_start: float = 0.0
    beta_end: float = 1e-5
    outcome_weight: float = 1.0

    def beta_at(self, epoch: int) -> float:
        """Linear warm-up over the first half of training, then constant."""
        ramp = max(1, self.epochs // 2)
        frac = min(1.0, epoch / ramp)
        return self.beta_start + frac * (self.beta_end - self.beta_start)

    def to_json_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "outcome_weight": self.outcome_weight,
        }

    @classmethod
    def from_json_dict(cls, raw: dict) -> "TrainSchedule":
        return cls(**raw)


class JointVAE:
    """Encoder, decoder, and per-outcome predictor heads over one latent."""

    def __init__(
        self,
        schema: Schema,
        config: VAEConfig,
        mode: str = MODE_JOINT,
        seed: int = 0,
        environment: str = "",
    ):
        if mode not in (MODE_JOINT, MODE_RECON_ONLY):
            raise SchemaError(f"unknown model mode {mode!r}")
        self.schema = schema
        self.config = config
        self.mode = mode
        self.environment = environment
        self.latent_dim = config.latent_dim
        rng = np.random.default_rng(seed)

        self.is_grid = isinstance(schema, GridSchema)
        d = config.latent_dim
        if self.is_grid:
            c_in, h, w = schema.tensor_shape
            if h % 2 or w % 2:
                raise SchemaError("grid height and width must be even for the conv stack")
            c1, c2 = config.conv_channels
            self._hd, self._wd = h // 2, w // 2
            self.enc_conv1 = Conv2d(rng, c_in, c1, 3, "enc.conv1", stride=1, padding=1)
            self.enc_conv2 = Conv2d(rng, c1, c2, 3, "enc.conv2", stride=2, padding=1)
            flat = c2 * self._hd * self._wd
            self.enc_fc1 = Dense(rng, flat, config.dense_hidden, "enc.fc1")
            self.enc_fc2 = Dense(rng, config.dense_hidden, 2 * d, "enc.fc2")
            self.dec_fc1 = Dense(rng, d, config.dense_hidden, "dec.fc1")
            self.dec_fc2 = Dense(rng, config.dense_hidden, flat, "dec.fc2")
            self.dec_conv1 = Conv2d(rng, c2, c1, 3, "dec.conv1", stride=1, padding=1)
            self.dec_conv2 = Conv2d(rng, c1, c_in, 3, "dec.conv2", stride=1, padding=1)
            self._codec_layers = [
                self.enc_conv1, self.enc_conv2, self.enc_fc1, self.enc_fc2,
                self.dec_fc1, self.dec_fc2, self.dec_conv1, self.dec_conv2,
            ]
        else:
            (n_in,) = schema.tensor_shape
            h = config.mlp_hidden
            self.enc_mlp = MLP(rng, [n_in, h, h, 2 * d], "enc.mlp")
            self.dec_mlp = MLP(rng, [d, h, h, n_in], "dec.mlp", out_activation="tanh")
            self._codec_layers = [self.enc_mlp, self.dec_mlp]

        self.heads = [
            MLP(rng, [d, config.head_hidden, 1], f"head.{name}", out_activation="tanh")
            for name in OUTCOME_NAMES
        ]

    # -- parameters ---------------------------------------------------------

    def codec_params(self) -> dict[str, Tensor]:
        return merge_params(*(layer.params() for layer in self._codec_layers))

    def head_params(self) -> dict[str, Tensor]:
        return merge_params(*(head.params() for head in self.heads))

    def params(self) -> dict[str, Tensor]:
        return merge_params(self.codec_params(), self.head_params())

    # -- graph-building forward passes (batched) -----------------------------

    def _check_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.schema.tensor_shape
        if single:
            x = x[None]
        if x.shape[1:] != self.schema.tensor_shape:
            raise SchemaError(f"input shape {x.shape[1:]} != schema {self.schema.tensor_shape}")
        return x

    def encode_t(self, x: Tensor) -> tuple[Tensor, Tensor]:
        d = self.latent_dim
        if self.is_grid:
            n = x.shape[0]
            h = ad.relu(self.enc_conv1(x))
            h = ad.relu(self.enc_conv2(h))
            h = ad.reshape(h, (n, h.shape[1] * h.shape[2] * h.shape[3]))
            h = ad.relu(self.enc_fc1(h))
            out = self.enc_fc2(h)
        else:
            out = self.enc_mlp(x)
        return ad.narrow(out, 1, 0, d), ad.narrow(out, 1, d, d)

    def decode_t(self, z: Tensor) -> Tensor:
        if not self.is_grid:
            return self.dec_mlp(z)
        n = z.shape[0]
        c2 = self.config.conv_channels[1]
        h = ad.relu(self.dec_fc1(z))
        h = ad.relu(self.dec_fc2(h))
        h = ad.reshape(h, (n, c2, self._hd, self._wd))
        h = ad.upsample2x(h)
        h = ad.relu(self.dec_conv1(h))
        out = self.dec_conv2(h)
        n_kinds = self.schema.n_kinds
        logits = ad.narrow(out, 1, 0, n_kinds)
        numeric = ad.tanh(ad.narrow(out, 1, n_kinds, 1))
        return ad.concat([logits, numeric], axis=1)

    def heads_t(self, z: Tensor) -> list[Tensor]:
        return [head(z) for head in self.heads]

    # -- numpy conveniences ---------------------------------------------------

    def encode(self, x: np.ndarray, chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
        """(mu, logvar); accepts one feature tensor or a stacked batch."""
        xb = self._check_batch(x)
        single = xb.shape[0] == 1 and np.asarray(x).shape == self.schema.tensor_shape
        mus, logvars = [], []
        for lo in range(0, xb.shape[0], chunk):
            mu, logvar = self.encode_t(Tensor(xb[lo : lo + chunk]))
            mus.append(mu.data)
            logvars.append(logvar.data)
        mu = np.concatenate(mus, axis=0)
        logvar = np.concatenate(logvars, axis=0)
        return (mu[0], logvar[0]) if single else (mu, logvar)

    def decode(self, z: np.ndarray, chunk: int = 512) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = z[None] if single else z
        if zb.shape[1] != self.latent_dim:
            raise ShapeError(f"latent dimension {zb.shape[1]} != {self.latent_dim}")
        outs = [self.decode_t(Tensor(zb[lo : lo + chunk])).data for lo in range(0, zb.shape[0], chunk)]
        out = np.concatenate(outs, axis=0)
        return out[0] if single else out

    def predict_outcomes(self, z: np.ndarray) -> np.ndarray:
        """Per-head estimates in [-1, 1]; (3,) for one latent, (N, 3) for a batch."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zb = z[None] if single else z
        preds = np.concatenate([head(Tensor(zb)).data for head in self.heads], axis=1)
        return preds[0] if single else preds

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        mu, _ = self.encode(x)
        return self.decode(mu)

    # -- losses ---------------------------------------------------------------

    def _recon_terms(self, out: Tensor, xb: np.ndarray) -> Tensor:
        """Summed reconstruction loss for a batch (cross-entropy + squared error)."""
        if self.is_grid:
            n_kinds = self.schema.n_kinds
            targets = np.argmax(xb[:, :n_kinds], axis=1)
            ce = ad.loss_categorical(ad.narrow(out, 1, 0, n_kinds), targets, axis=1)
            numeric = ad.narrow(out, 1, n_kinds, 1)
            diff = numeric - Tensor(xb[:, n_kinds:])
            return ce + ad.sum_all(diff**2)
        diff = out - Tensor(xb)
        return ad.sum_all(diff**2)

    def loss(
        self,
        batch_x: np.ndarray,
        batch_y: np.ndarray,
        beta: float,
        outcome_weight: float,
        noise: np.ndarray | None = None,
    ) -> dict[str, Tensor]:
        """Per-example-mean loss terms on one batch.

        Returns total, recon, kl, and outcome tensors; ``total`` excludes the
        outcome term in reconstruction-only mode, where the heads read a
        detached latent.  ``head_loss`` carries the weighted head objective to
        backpropagate alongside ``total``.
        """
        xb = self._check_batch(batch_x)
        yb = np.asarray(batch_y, dtype=np.float64)
        n = xb.shape[0]
        if n == 0:
            raise ShapeError("loss on an empty batch")

        mu, logvar = self.encode_t(Tensor(xb))
        if noise is None:
            z = mu
        else:
            z = mu + ad.exp(ad.scale(logvar, 0.5)) * Tensor(noise)
        out = self.decode_t(z)
        recon = ad.scale(self._recon_terms(out, xb), 1.0 / n)
        kl = ad.scale(ad.gaussian_kl(mu, logvar), 1.0 / n)

        z_for_heads = z if self.mode == MODE_JOINT else z.detach()
        outcome_terms = []
        for i, head in enumerate(self.heads):
            pred = head(z_for_heads)
            diff = pred - Tensor(yb[:, i : i + 1])
            outcome_terms.append(ad.scale(ad.sum_all(diff**2), 1.0 / n))
        outcome = outcome_terms[0] + outcome_terms[1] + outcome_terms[2]

        total = recon + ad.scale(kl, beta)
        head_loss = ad.scale(outcome, outcome_weight)
        if self.mode == MODE_JOINT:
            total = total + head_loss
        return {"total": total, "recon": recon, "kl": kl, "outcome": outcome, "head_loss": head_loss}

    def elbo_losses(self, xs: np.ndarray, beta: float = 1e-5, chunk: int = 512) -> np.ndarray:
        """Per-example recon + beta*KL at the deterministic latent (numpy only)."""
        xb = self._check_batch(xs)
        single = np.asarray(xs).shape == self.schema.tensor_shape
        vals = []
        for lo in range(0, xb.shape[0], chunk):
            part = xb[lo : lo + chunk]
            mu, logvar = self.encode_t(Tensor(part))
            out = self.decode_t(Tensor(mu.data)).data
            if self.is_grid:
                n_kinds = self.schema.n_kinds
                targets = np.argmax(part[:, :n_kinds], axis=1)
                logits = out[:, :n_kinds]
                shifted = logits - logits.max(axis=1, keepdims=True)
                lse = np.log(np.exp(shifted).sum(axis=1))
                picked = np.take_along_axis(shifted, targets[:, None], axis=1)[:, 0]
                recon = (lse - picked).sum(axis=(1, 2))
                recon = recon + ((out[:, n_kinds:] - part[:, n_kinds:]) ** 2).sum(axis=(1, 2, 3))
            else:
                recon = ((out - part) ** 2).sum(axis=1)
            kl = 0.5 * (mu.data**2 + np.exp(logvar.data) - 1.0 - logvar.data).sum(axis=1)
            vals.append(recon + beta * kl)
        values = np.concatenate(vals)
        return values[0] if single else values

    def elbo_loss(self, x: np.ndarray, beta: float = 1e-5) -> float:
        if np.asarray(x).shape != self.schema.tensor_shape:
            raise SchemaError("elbo_loss takes one feature tensor; use elbo_losses for batches")
        return float(self.elbo_losses(x, beta))


def sample_latent(mu: np.ndarray, logvar: np.ndarray, seed: int | None = None) -> np.ndarray:
    """Reparameterized draw; zero noise (seed None) returns mu itself."""
    mu = np.asarray(mu, dtype=np.float64)
    if seed is None:
        return mu.copy()
    noise = np.random.default_rng(seed).standard_normal(mu.shape)
    return mu + np.exp(np.asarray(logvar) / 2.0) * noise


def train(
    model: JointVAE,
    dataset: TrajectoryDataset,
    schedule: TrainSchedule,
    seed: int,
) -> list[dict]:
    """Minibatch Adam over the train split; returns per-epoch loss curves.

    Reconstruction-only models train the codec first, then fit the heads on
    frozen latents for the same number of epochs.
    """
    xs = dataset.features_matrix("train")
    ys = dataset.outcomes_matrix("train")
    rng = np.random.default_rng(seed)
    optimizer = Adam(model.params() if model.mode == MODE_JOINT else model.codec_params(), lr=schedule.lr)
    curves: list[dict] = []
    snapshot = {k: p.data.copy() for k, p in model.params().items()}

    def run_epoch(epoch: int, params_in_play: str) -> dict:
        beta = schedule.beta_at(epoch)
        order = rng.permutation(len(xs))
        sums = {"total": 0.0, "recon": 0.0, "kl": 0.0, "outcome": 0.0}
        n_batches = 0
        for lo in range(0, len(order), schedule.batch_size):
            idx = order[lo : lo + schedule.batch_size]
            noise = rng.standard_normal((len(idx), model.latent_dim))
            terms = model.loss(xs[idx], ys[idx], beta=beta, outcome_weight=schedule.outcome_weight, noise=noise)
            objective = terms["total"] if params_in_play == "codec" else terms["head_loss"]
            optimizer.zero_grad()
            ad.backward(objective)
            optimizer.step()
            for key in sums:
                sums[key] += terms[key].item()
            n_batches += 1
        row = {key: val / n_batches for key, val in sums.items()}
        row.update(epoch=epoch, beta=beta, phase=params_in_play)
        if not all(np.isfinite(v) for v in sums.values()):
            for k, p in model.params().items():
                p.data = snapshot[k]
            raise TrainingFailureError(
                f"training diverged at epoch {epoch}; parameters rolled back one epoch",
                history=[c["total"] for c in curves],
            )
        return row

    for epoch in range(schedule.epochs):
        curves.append(run_epoch(epoch, "codec"))
        snapshot = {k: p.data.copy() for k, p in model.params().items()}
        log.debug("epoch %d: %s", epoch, curves[-1])

    if model.mode == MODE_RECON_ONLY:
        optimizer = Adam(model.head_params(), lr=schedule.lr)
        for epoch in range(schedule.epochs):
            curves.append(run_epoch(schedule.epochs + epoch, "heads"))
            snapshot = {k: p.data.copy() for k, p in model.params().items()}

    return curves


# ---------------------------------------------------------------------------
# Checkpoints: JSON header line + little-endian float32 weight blob.


def save_model(model: JointVAE, path: str | Path) -> None:
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "environment": model.environment,
        "schema": model.schema.to_json_dict(),
        "config": model.config.to_json_dict(),
        "mode": model.mode,
    }
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(flatten_params(model.params()).tobytes())


def load_model(path: str | Path) -> JointVAE:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise MalformedFileError("model checkpoint has no header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFileError(f"model checkpoint header unreadable: {exc}") from exc
    if header.get("format") != MODEL_FORMAT or header.get("version") != MODEL_VERSION:
        raise MalformedFileError("not a compatible model checkpoint")
    model = JointVAE(
        schema=schema_from_json_dict(header["schema"]),
        config=VAEConfig.from_json_dict(header["config"]),
        mode=header["mode"],
        seed=0,
        environment=header["environment"],
    )
    blob = np.frombuffer(raw[newline + 1 :], dtype="<f4")
    try:
        load_flat_params(model.params(), blob)
    except ValueError as exc:
        raise MalformedFileError(str(exc)) from exc
    return model


def write_curves_csv(curves: list[dict], path: str | Path) -> None:
    import csv

    fields = ["epoch", "phase", "beta", "total", "recon", "kl", "outcome"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in curves:
            writer.writerow({k: row[k] for k in fields})
