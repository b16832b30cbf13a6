"""Counterfactual quality measures.

Observational difference (odiff) is a schema-aware edit distance: one unit
per categorical mismatch after per-cell argmax, plus |delta| / interval
width per numeric feature.  The validity predicate checks that an outcome
variable moved in the requested direction by at least the margin.  The
anomaly score is the odiff between a latent's hardened decoding and the
reconstruction of that decoding; a roundtrip self-consistency measure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import OUTCOME_NAMES, Schema, harden
from .errors import DegenerateLabelsError, ParameterError, SchemaError

VARIABLE_KIND_NUMERIC = "numeric"
VARIABLE_KIND_CATEGORICAL = "categorical"


@dataclass(frozen=True)
class ValiditySpec:
    """Which outcome variable must change, in which direction, by how much."""

    variable: int
    sign: int = 1
    epsilon: float = 0.5
    kind: str = VARIABLE_KIND_NUMERIC

    def __post_init__(self):
        if not 0 <= self.variable < len(OUTCOME_NAMES):
            raise ParameterError(f"variable index {self.variable} outside [0, {len(OUTCOME_NAMES)})")
        if self.sign not in (-1, 1):
            raise ParameterError(f"sign must be -1 or +1, got {self.sign}")
        if self.kind == VARIABLE_KIND_NUMERIC and self.epsilon <= 0:
            raise ParameterError(f"epsilon must be positive for numeric variables, got {self.epsilon}")
        if self.kind not in (VARIABLE_KIND_NUMERIC, VARIABLE_KIND_CATEGORICAL):
            raise ParameterError(f"unknown variable kind {self.kind!r}")

    @property
    def variable_name(self) -> str:
        return OUTCOME_NAMES[self.variable]

    def to_json_dict(self) -> dict:
        return {
            "variable": self.variable,
            "variable_name": self.variable_name,
            "sign": self.sign,
            "epsilon": self.epsilon,
            "kind": self.kind,
        }


@dataclass(frozen=True)
class QualityReport:
    odiff: float
    anomaly: float
    valid: bool

    def to_json_dict(self) -> dict:
        return {"odiff": self.odiff, "anomaly": self.anomaly, "valid": self.valid}


def odiff(a: np.ndarray, b: np.ndarray, schema: Schema) -> float:
    """Edit distance over categorical features plus normalized numeric gaps."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != schema.tensor_shape or b.shape != schema.tensor_shape:
        raise SchemaError(f"odiff operands {a.shape}, {b.shape} do not match schema {schema.tensor_shape}")
    codes_a, numeric_a = schema.split_features(a)
    codes_b, numeric_b = schema.split_features(b)
    categorical = float((codes_a != codes_b).sum())
    numeric = float((np.abs(numeric_a - numeric_b) / schema.numeric_widths).sum())
    return categorical + numeric


def odiff_batch(a: np.ndarray, batch: np.ndarray, schema: Schema) -> np.ndarray:
    """odiff of one tensor against a stacked batch; used for library scans."""
    codes_a, numeric_a = schema.split_features(np.asarray(a, dtype=np.float64))
    codes_b, numeric_b = schema.split_features(np.asarray(batch, dtype=np.float64))
    categorical = (codes_b != codes_a[None]).sum(axis=1).astype(np.float64)
    numeric = (np.abs(numeric_b - numeric_a[None]) / schema.numeric_widths[None]).sum(axis=1)
    return categorical + numeric


def validity(y_c, y_q, spec: ValiditySpec) -> bool:
    """Did the counterfactual outcome move as requested?

    Numeric variables require sign * (y_c - y_q) >= epsilon: the change must
    carry the requested sign and at least the requested magnitude.
    Categorical variables require any change at all.
    """
    yc = _outcome_entry(y_c, spec.variable)
    yq = _outcome_entry(y_q, spec.variable)
    if spec.kind == VARIABLE_KIND_CATEGORICAL:
        return yc != yq
    return spec.sign * (yc - yq) >= spec.epsilon


def _outcome_entry(y, index: int) -> float:
    if hasattr(y, "as_array"):
        return float(y.as_array()[index])
    return float(np.asarray(y, dtype=np.float64).reshape(-1)[index])


def roundtrip_target(model, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(decoded, reconstruction-of-decoded) pair for a latent.

    The decoding is hardened onto the observation manifold before being
    re-encoded, so the reconstruction answers "what does the model make of
    this scene", not "of these logits".
    """
    decoded = model.decode(z)
    scene = harden(decoded, model.schema)
    mu, _ = model.encode(scene)
    return decoded, model.decode(mu)


def anomaly_score(model, z: np.ndarray) -> float:
    """odiff between a latent's decoding and that decoding's reconstruction."""
    decoded, recon = roundtrip_target(model, z)
    return odiff(harden(decoded, model.schema), harden(recon, model.schema), model.schema)


def anomaly_scores(model, zs: np.ndarray) -> np.ndarray:
    """Vectorized anomaly_score over a batch of latents."""
    zs = np.asarray(zs, dtype=np.float64)
    decoded = model.decode(zs)
    scenes = np.stack([harden(d, model.schema) for d in decoded])
    mu, _ = model.encode(scenes)
    recon = model.decode(mu)
    out = np.empty(len(zs))
    for i in range(len(zs)):
        out[i] = odiff(scenes[i], harden(recon[i], model.schema), model.schema)
    return out


def tune_anomaly_threshold(model, labeled: list[tuple[np.ndarray, bool]]) -> tuple[float, float]:
    """Threshold on anomaly_score maximizing accuracy over (z, is_anomalous) pairs.

    Returns (threshold, training accuracy).  Scores strictly above the
    threshold classify as anomalous.
    """
    labels = np.array([bool(lab) for _, lab in labeled])
    if labels.all() or not labels.any():
        raise DegenerateLabelsError("threshold tuning needs both anomalous and plausible examples")
    scores = anomaly_scores(model, np.stack([z for z, _ in labeled]))

    candidates = np.unique(scores)
    cuts = np.concatenate([[candidates[0] - 1.0], (candidates[:-1] + candidates[1:]) / 2.0, [candidates[-1] + 1.0]])
    best_threshold, best_accuracy = cuts[0], -1.0
    for cut in cuts:
        accuracy = float(((scores > cut) == labels).mean())
        if accuracy > best_accuracy:
            best_threshold, best_accuracy = float(cut), accuracy
    return best_threshold, best_accuracy
