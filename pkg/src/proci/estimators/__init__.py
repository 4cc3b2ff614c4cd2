"""Base effect estimators: S-learner, propensity matching, TARNet, CFR-Wass.

All fitted models expose ``predict_cate`` and serialize to a JSON parameter
file with weights stored as little-endian float64 hex for exact replay.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..data import ObservationalDataset
from . import linear as _linear
from .linear import (
    LogisticModel,
    PsmModel,
    RidgeModel,
    SLearnerModel,
    fit_logistic,
    fit_ridge,
)
from .nets import (
    EstimatorConfig,
    MlpSpec,
    TarnetModel,
    TarnetSpec,
    arm_preserving_batches,
    fit_cfr_wass,
    fit_tarnet,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_forward_backward,
)
from .sinkhorn import sinkhorn_divergence, sinkhorn_divergence_with_grad

ESTIMATOR_KINDS = ("s-learner", "psm", "tarnet", "cfr-wass")


def fit_s_learner(ds: ObservationalDataset, cfg: EstimatorConfig | None = None) -> SLearnerModel:
    cfg = cfg or EstimatorConfig()
    return _linear.fit_s_learner(ds, ridge_penalty=cfg.ridge_penalty)


def fit_psm(ds: ObservationalDataset, cfg: EstimatorConfig | None = None) -> PsmModel:
    cfg = cfg or EstimatorConfig()
    return _linear.fit_psm(ds, propensity_penalty=cfg.ridge_penalty)


def fit_estimator(
    kind: str,
    train: ObservationalDataset,
    cfg: EstimatorConfig,
    spec: TarnetSpec | None = None,
    val: ObservationalDataset | None = None,
):
    """Dispatch on the estimator kind; network kinds need a TarnetSpec."""
    if kind == "s-learner":
        return fit_s_learner(train, cfg)
    if kind == "psm":
        return fit_psm(train, cfg)
    if kind in ("tarnet", "cfr-wass"):
        spec = spec or TarnetSpec()
        fit = fit_tarnet if kind == "tarnet" else fit_cfr_wass
        return fit(train, cfg, spec, val=val)
    raise ValueError(f"unknown estimator kind {kind!r}; choose from {ESTIMATOR_KINDS}")


def predict_cate(model, x) -> np.ndarray:
    """Per-unit effect predictions for any fitted model."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("x must be a matrix of covariate rows")
    out = np.asarray(model.predict_cate(x), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite effect predictions")
    return out


# ---------------------------------------------------------------------------
# Exact-replay serialization (little-endian float64 hex)
# ---------------------------------------------------------------------------

def _to_hex(a: np.ndarray) -> dict:
    arr = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(arr.shape), "hex": arr.tobytes().hex()}


def _from_hex(doc: dict) -> np.ndarray:
    flat = np.frombuffer(bytes.fromhex(doc["hex"]), dtype="<f8")
    return flat.reshape(doc["shape"]).copy()


def _params_to_doc(params) -> list[dict]:
    return [{"w": _to_hex(w), "b": _to_hex(b)} for w, b in params]


def _params_from_doc(doc) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(_from_hex(p["w"]), _from_hex(p["b"])) for p in doc]


def model_to_doc(model) -> dict:
    if isinstance(model, SLearnerModel):
        return {
            "kind": model.kind,
            "n_covariates": model.n_covariates,
            "weights": _to_hex(model.ridge.weights),
            "intercept": model.ridge.intercept,
        }
    if isinstance(model, PsmModel):
        return {
            "kind": model.kind,
            "propensity_weights": _to_hex(model.propensity.weights),
            "propensity_intercept": model.propensity.intercept,
            "treated_logits": _to_hex(model.treated_logits),
            "treated_covariates": _to_hex(model.treated_covariates),
            "pair_effects": _to_hex(model.pair_effects),
            "att": model.att,
            "overlap_violation": model.overlap_violation,
        }
    if isinstance(model, TarnetModel):
        return {
            "kind": model.kind,
            "spec": {
                "encoder_widths": list(model.spec.encoder_widths),
                "head_widths": list(model.spec.head_widths),
                "activation": model.spec.activation,
                "seed": model.spec.seed,
            },
            "encoder": _params_to_doc(model.encoder),
            "head0": _params_to_doc(model.head0),
            "head1": _params_to_doc(model.head1),
            "x_mean": _to_hex(model.x_mean),
            "x_sd": _to_hex(model.x_sd),
            "outcome_type": model.outcome_type,
        }
    raise TypeError(f"cannot serialize model of type {type(model).__name__}")


def model_from_doc(doc: dict):
    kind = doc["kind"]
    if kind == "s-learner":
        return SLearnerModel(
            kind=kind,
            ridge=RidgeModel(weights=_from_hex(doc["weights"]), intercept=doc["intercept"]),
            n_covariates=doc["n_covariates"],
        )
    if kind == "psm":
        return PsmModel(
            kind=kind,
            propensity=LogisticModel(
                weights=_from_hex(doc["propensity_weights"]),
                intercept=doc["propensity_intercept"],
            ),
            treated_logits=_from_hex(doc["treated_logits"]),
            treated_covariates=_from_hex(doc["treated_covariates"]),
            pair_effects=_from_hex(doc["pair_effects"]),
            att=doc["att"],
            overlap_violation=doc["overlap_violation"],
        )
    if kind in ("tarnet", "cfr-wass"):
        spec = TarnetSpec(
            encoder_widths=tuple(doc["spec"]["encoder_widths"]),
            head_widths=tuple(doc["spec"]["head_widths"]),
            activation=doc["spec"]["activation"],
            seed=doc["spec"]["seed"],
        )
        return TarnetModel(
            kind=kind,
            spec=spec,
            encoder=_params_from_doc(doc["encoder"]),
            head0=_params_from_doc(doc["head0"]),
            head1=_params_from_doc(doc["head1"]),
            x_mean=_from_hex(doc["x_mean"]),
            x_sd=_from_hex(doc["x_sd"]),
            outcome_type=doc["outcome_type"],
        )
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_doc(model), sort_keys=True))


def load_model(path):
    return model_from_doc(json.loads(Path(path).read_text()))
