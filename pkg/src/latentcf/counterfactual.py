"""Counterfactual generators: case retrieval, latent interpolation, gradient traversal.

All three answer the same query: given an observation, its outcome vector,
and a requested change (variable, sign, margin), produce a nearby
observation for which the model predicts the changed outcome.  Retrieval
returns the nearest stored frame whose recorded outcome already satisfies
the request.  Interpolation walks the latent segment toward that frame and
stops at the first satisfying point.  Gradient traversal follows the
outcome head's latent gradient directly.  Both latent methods optionally
apply a plausibility adjustment that pulls the latent toward states whose
decodings the model reconstructs consistently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import TrajectoryDataset, harden
from .errors import ContractError, ParameterError, TraversalError
from .jvae import JointVAE
from .measures import ValiditySpec, anomaly_scores, odiff_batch, validity

DEFAULT_LAMBDA1 = 5.0
DEFAULT_LAMBDA2 = 1.0
DEFAULT_MAX_STEPS = 1000
DEFAULT_N_ALPHAS = 100
LAMBDA_GRID = np.linspace(0.0, 2.0, 21)


@dataclass(frozen=True)
class CFQuery:
    features: np.ndarray  # encoded query observation
    outcomes: np.ndarray  # normalized outcome vector the query was recorded with
    spec: ValiditySpec
    frame_index: int = -1  # dataset provenance, -1 for ad-hoc queries


@dataclass(frozen=True)
class NunMatch:
    library_index: int
    frame_index: int
    features: np.ndarray
    outcomes: np.ndarray
    odiff: float


@dataclass
class CFResult:
    method: str
    features: np.ndarray  # decoded counterfactual, hardened onto the schema
    path: np.ndarray  # latent path, path[0] is the query's latent
    steps: int
    valid: bool
    predicted_outcomes: np.ndarray
    alpha: float | None = None
    degenerate: bool = False  # query already satisfied the criterion
    nun_fallback: bool = False  # interpolation reached alpha=1 without success
    adjusted: bool = False
    unadjusted_z: np.ndarray | None = None
    unadjusted_valid: bool | None = None

    @property
    def z_final(self) -> np.ndarray:
        return self.path[-1]

    def to_json_dict(self) -> dict:
        out = {
            "method": self.method,
            "steps": self.steps,
            "valid": self.valid,
            "alpha": self.alpha,
            "degenerate": self.degenerate,
            "nun_fallback": self.nun_fallback,
            "adjusted": self.adjusted,
            "predicted_outcomes": [float(v) for v in self.predicted_outcomes],
            "path": [[float(v) for v in z] for z in self.path],
        }
        if self.unadjusted_valid is not None:
            out["unadjusted_valid"] = self.unadjusted_valid
        return out


@dataclass
class CaseLibrary:
    """Train-split frames indexed for nearest-unlike-neighbor retrieval."""

    features: np.ndarray
    outcomes: np.ndarray
    frame_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.frame_indices is None:
            self.frame_indices = np.arange(len(self.features))

    def __len__(self) -> int:
        return len(self.features)

    @classmethod
    def from_dataset(cls, dataset: TrajectoryDataset) -> "CaseLibrary":
        idx = dataset.frame_indices("train")
        return cls(
            features=dataset.features_matrix("train"),
            outcomes=dataset.outcomes_matrix("train"),
            frame_indices=idx,
        )


def satisfies_on_stored(outcomes: np.ndarray, query: CFQuery) -> np.ndarray:
    """Vectorized validity of stored outcome rows against the query's spec."""
    spec = query.spec
    column = outcomes[:, spec.variable]
    target = float(query.outcomes[spec.variable])
    if spec.kind == "categorical":
        return column != target
    return spec.sign * (column - target) >= spec.epsilon


def find_nun(query: CFQuery, library: CaseLibrary, schema) -> NunMatch | None:
    """Closest library frame whose stored outcome satisfies the criterion.

    Ties break to the lowest frame index; returns None when no frame
    qualifies (a distinguished outcome, not an error).
    """
    if len(library) == 0:
        raise ParameterError("find_nun on an empty case library")
    eligible = np.nonzero(satisfies_on_stored(library.outcomes, query))[0]
    if len(eligible) == 0:
        return None
    dists = odiff_batch(query.features, library.features[eligible], schema)
    within = int(np.argmin(dists))  # first minimum, so ties go to the lowest frame index
    best = int(eligible[within])
    return NunMatch(
        library_index=best,
        frame_index=int(library.frame_indices[best]),
        features=library.features[best],
        outcomes=library.outcomes[best],
        odiff=float(dists[within]),
    )


# ---------------------------------------------------------------------------
# Plausibility adjustment


def _comparable(model: JointVAE, out: Tensor) -> Tensor:
    """Map decoder output into bounded space for distance-taking.

    Kind logits are free-scaled, so two decodings of the same scene can sit
    arbitrarily far apart in logit space; per-cell softmax makes distances
    (and their latent gradients) commensurate with the latent's own scale.
    """
    if not model.is_grid:
        return out
    n_kinds = model.schema.n_kinds
    probs = ad.softmax(ad.narrow(out, 1, 0, n_kinds), axis=1)
    return ad.concat([probs, ad.narrow(out, 1, n_kinds, 1)], axis=1)


def roundtrip_distance_grad(model: JointVAE, z: np.ndarray) -> tuple[float, np.ndarray]:
    """L2 roundtrip reconstruction distance at z and its gradient.

    The inner reconstruction (the decoded scene re-encoded and re-decoded)
    is held constant; the gradient flows through the outer decode only.
    """
    zt = Tensor(np.asarray(z, dtype=np.float64)[None], requires_grad=True)
    out = _comparable(model, model.decode_t(zt))
    scene = harden(out.data[0], model.schema)  # argmax is softmax-invariant
    mu, _ = model.encode(scene)
    target = _comparable(model, model.decode_t(Tensor(mu[None]))).data
    diff = out - Tensor(target)
    dist = ad.sqrt(ad.sum_all(diff**2), eps=1e-12)
    ad.backward(dist)
    return dist.item(), zt.grad[0].copy()


def plausibility_adjust(model: JointVAE, z: np.ndarray, lam: float) -> np.ndarray:
    """One likelihood-raising step: z plus lam times the negative distance gradient."""
    if lam < 0:
        raise ParameterError(f"plausibility step size must be nonnegative, got {lam}")
    z = np.asarray(z, dtype=np.float64)
    if lam == 0.0:
        return z.copy()
    _, grad = roundtrip_distance_grad(model, z)
    return z - lam * grad


def head_gradient(model: JointVAE, z: np.ndarray, variable: int) -> np.ndarray:
    """Gradient of one outcome head's scalar output with respect to the latent."""
    zt = Tensor(np.asarray(z, dtype=np.float64)[None], requires_grad=True)
    pred = model.heads[variable](zt)
    ad.backward(ad.sum_all(pred))
    return zt.grad[0].copy()


# ---------------------------------------------------------------------------
# Latent interpolation


def interpolate_cf(
    model: JointVAE,
    query: CFQuery,
    nun: NunMatch,
    n_alphas: int = DEFAULT_N_ALPHAS,
    adjust: bool = True,
) -> CFResult:
    """Scan the latent segment from the query toward the NUN.

    alpha stops at the first grid point whose predicted outcome satisfies
    the criterion.  Reaching alpha=1 means the interpolation failed (the
    result would be the NUN itself).  A successful stop is followed by a
    grid search along the unit negative roundtrip-distance gradient for the
    least anomalous adjustment; the criterion is then re-checked honestly.
    """
    if not validity(nun.outcomes, query.outcomes, query.spec):
        raise ContractError("interpolate_cf requires a NUN whose stored outcome satisfies the criterion")

    mu_q, _ = model.encode(query.features)
    mu_n, _ = model.encode(nun.features)
    alphas = np.linspace(0.0, 1.0, n_alphas + 1)
    zs = mu_q[None] + alphas[:, None] * (mu_n - mu_q)[None]
    preds = model.predict_outcomes(zs)
    spec = query.spec
    deltas = spec.sign * (preds[:, spec.variable] - float(query.outcomes[spec.variable]))
    hits = np.nonzero(deltas >= spec.epsilon)[0]

    if len(hits) == 0 or alphas[hits[0]] >= 1.0:
        # Failed: full traversal would just return the NUN.
        return CFResult(
            method="interpolate",
            features=harden(model.decode(mu_n), model.schema),
            path=zs,
            steps=len(alphas) - 1,
            valid=False,
            predicted_outcomes=preds[-1],
            alpha=1.0,
            nun_fallback=True,
            adjusted=False,
        )

    first = int(hits[0])
    alpha = float(alphas[first])
    z_sel = zs[first]
    path = zs[: first + 1]
    valid_unadjusted = True  # by construction of the stop rule

    if not adjust:
        return CFResult(
            method="interpolate",
            features=harden(model.decode(z_sel), model.schema),
            path=path,
            steps=first,
            valid=valid_unadjusted,
            predicted_outcomes=preds[first],
            alpha=alpha,
            degenerate=first == 0,
            adjusted=False,
        )

    _, grad = roundtrip_distance_grad(model, z_sel)
    norm = float(np.linalg.norm(grad))
    if norm < 1e-12:
        candidates = z_sel[None]
    else:
        unit = -grad / norm
        candidates = z_sel[None] + LAMBDA_GRID[:, None] * unit[None]
    scores = anomaly_scores(model, candidates)
    z_adj = candidates[int(np.argmin(scores))]
    pred_adj = model.predict_outcomes(z_adj)
    valid_adj = validity(pred_adj, query.outcomes, query.spec)

    return CFResult(
        method="interpolate",
        features=harden(model.decode(z_adj), model.schema),
        path=np.concatenate([path, z_adj[None]], axis=0),
        steps=first,
        valid=bool(valid_adj),
        predicted_outcomes=pred_adj,
        alpha=alpha,
        degenerate=first == 0,
        adjusted=True,
        unadjusted_z=z_sel.copy(),
        unadjusted_valid=valid_unadjusted,
    )


# ---------------------------------------------------------------------------
# Iterative gradient traversal


def gradient_cf(
    model: JointVAE,
    query: CFQuery,
    lambda1: float = DEFAULT_LAMBDA1,
    lambda2: float = DEFAULT_LAMBDA2,
    max_steps: int = DEFAULT_MAX_STEPS,
    adjust: bool = True,
) -> CFResult:
    """Follow the outcome head's gradient until the criterion holds.

    Each step moves by sign * lambda1 times the head gradient, then by one
    plausibility adjustment of size lambda2 (skipped when adjustment is
    disabled).  Stops when the predicted outcome satisfies the criterion or
    after max_steps.
    """
    spec = query.spec
    mu_q, _ = model.encode(query.features)
    z = mu_q.copy()
    path = [z.copy()]

    def satisfied(latent: np.ndarray) -> bool:
        return validity(model.predict_outcomes(latent), query.outcomes, spec)

    if satisfied(z):
        return CFResult(
            method="gradient",
            features=harden(model.decode(z), model.schema),
            path=np.stack(path),
            steps=0,
            valid=True,
            predicted_outcomes=model.predict_outcomes(z),
            degenerate=True,
            adjusted=False,
        )

    valid = False
    steps = 0
    for step in range(1, max_steps + 1):
        grad = head_gradient(model, z, spec.variable)
        z = z + spec.sign * lambda1 * grad
        if adjust and lambda2 > 0.0:
            z = plausibility_adjust(model, z, lambda2)
        if not np.isfinite(z).all():
            raise TraversalError(f"non-finite latent at step {step}", path=[p.copy() for p in path])
        path.append(z.copy())
        steps = step
        if satisfied(z):
            valid = True
            break

    return CFResult(
        method="gradient",
        features=harden(model.decode(z), model.schema),
        path=np.stack(path),
        steps=steps,
        valid=valid,
        predicted_outcomes=model.predict_outcomes(z),
        adjusted=adjust and lambda2 > 0.0,
    )
