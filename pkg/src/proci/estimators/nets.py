"""Hand-rolled MLP core and the two-headed representation estimators.

Everything here is plain numpy with hand-derived reverse-mode gradients,
validated against central finite differences in the test suite. The shared
training routine covers both the plain two-headed network and its
balance-regularized variant: with a zero balance weight the two produce
bit-identical trajectories because initialization, the batch schedule, and
every random stream coincide and the balance term is skipped without
consuming randomness.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..data import ObservationalDataset, take_rows
from .sinkhorn import sinkhorn_divergence_with_grad

Params = list[tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class MlpSpec:
    """Hidden-layer widths, activation, and the initialization seed."""

    layer_widths: tuple[int, ...]
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in ("relu", "elu"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class TarnetSpec:
    """Shared encoder widths plus per-arm outcome head widths."""

    encoder_widths: tuple[int, ...] = (32,)
    head_widths: tuple[int, ...] = (32,)
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if len(self.encoder_widths) < 1:
            raise ValueError("encoder needs at least one hidden layer")
        if self.activation not in ("relu", "elu"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class EstimatorConfig:
    """Training protocol knobs shared by all estimators."""

    learning_rate: float = 1e-3
    batch_size: int = 64
    balance_weight: float = 0.0
    max_epochs: int = 200
    patience: int = 30
    ridge_penalty: float = 1e-6
    sinkhorn_epsilon: float = 0.1
    sinkhorn_iters: int = 50

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.balance_weight < 0:
            raise ValueError("balance_weight must be nonnegative")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be at least 1")


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.where(z > 0, z, np.expm1(z))


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return np.where(z > 0, 1.0, np.exp(z))


def init_mlp(in_dim: int, widths: tuple[int, ...], out_dim: int, rng: np.random.Generator) -> Params:
    """He-style initialization for the hidden stack, smaller for the output."""
    params: Params = []
    dims = [in_dim, *widths, out_dim]
    for i in range(len(dims) - 1):
        scale = np.sqrt(2.0 / dims[i]) if i < len(dims) - 2 else np.sqrt(1.0 / dims[i])
        w = scale * rng.standard_normal((dims[i], dims[i + 1]))
        params.append((w, np.zeros(dims[i + 1])))
    return params


def mlp_forward(params: Params, x: np.ndarray, activation: str):
    """Forward pass; hidden layers use the activation, the output is linear."""
    h = x
    pre: list[np.ndarray] = []
    acts: list[np.ndarray] = [x]
    for i, (w, b) in enumerate(params):
        z = h @ w + b
        pre.append(z)
        h = _activate(z, activation) if i < len(params) - 1 else z
        acts.append(h)
    return h, (pre, acts)


def mlp_backward(params: Params, cache, grad_out: np.ndarray, activation: str):
    """Exact reverse-mode gradients; returns (grad wrt input, per-param grads)."""
    pre, acts = cache
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params)
    delta = grad_out
    for i in range(len(params) - 1, -1, -1):
        w, _ = params[i]
        if i < len(params) - 1:
            delta = delta * _activate_grad(pre[i], activation)
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        delta = delta @ w.T
    return delta, grads


def _squared_loss(out: np.ndarray, y: np.ndarray):
    resid = out - y
    return float(np.mean(resid**2) / 2.0), resid / resid.size


def _bce_loss(out: np.ndarray, y: np.ndarray):
    # softplus(z) - y z, stable for both signs of z
    softplus = np.logaddexp(0.0, out)
    loss = float(np.mean(softplus - y * out))
    sig = np.empty_like(out)
    pos = out >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-out[pos]))
    ez = np.exp(out[~pos])
    sig[~pos] = ez / (1.0 + ez)
    return loss, (sig - y) / out.size


def mlp_forward_backward(spec: MlpSpec, params: Params, batch, loss: str = "squared"):
    """Forward pass, loss, and exact gradients for one batch.

    ``batch`` is (x, y) with y a column vector; the loss is mean squared
    error over the batch (halved) or binary cross-entropy with logits.
    """
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    out, cache = mlp_forward(params, x, spec.activation)
    if out.shape != y.shape:
        raise ValueError(f"output shape {out.shape} does not match targets {y.shape}")
    loss_fn = _squared_loss if loss == "squared" else _bce_loss
    value, grad_out = loss_fn(out, y)
    _, grads = mlp_backward(params, cache, grad_out, spec.activation)
    return out, value, grads


class _Adam:
    def __init__(self, shapes, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params_flat: list[np.ndarray], grads_flat: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, (p, g) in enumerate(zip(params_flat, grads_flat)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def _flatten(params: Params) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for w, b in params:
        out.extend((w, b))
    return out


@dataclass
class TarnetModel:
    """Fitted two-headed network; ``kind`` records the training variant."""

    kind: str
    spec: TarnetSpec
    encoder: Params
    head0: Params
    head1: Params
    x_mean: np.ndarray
    x_sd: np.ndarray
    outcome_type: str
    history: dict = field(default_factory=dict)

    def _standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.x_mean.shape[0]:
            raise ValueError(f"expected {self.x_mean.shape[0]} covariates, got {x.shape[1]}")
        return (x - self.x_mean) / self.x_sd

    def _heads(self, x: np.ndarray):
        phi, _ = mlp_forward(self.encoder, self._standardize(x), self.spec.activation)
        out0, _ = mlp_forward(self.head0, phi, self.spec.activation)
        out1, _ = mlp_forward(self.head1, phi, self.spec.activation)
        return out0[:, 0], out1[:, 0]

    def predict_cate(self, x) -> np.ndarray:
        out0, out1 = self._heads(x)
        if self.outcome_type == "binary":
            return _sigmoid(out1) - _sigmoid(out0)
        return out1 - out0

    def predict_outcome(self, x, t) -> np.ndarray:
        out0, out1 = self._heads(x)
        picked = np.where(np.asarray(t) == 1, out1, out0)
        return _sigmoid(picked) if self.outcome_type == "binary" else picked

    def encode(self, x) -> np.ndarray:
        phi, _ = mlp_forward(self.encoder, self._standardize(x), self.spec.activation)
        return phi


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def arm_preserving_batches(
    t: np.ndarray, batch_size: int, rng: np.random.Generator, max_attempts: int = 200
) -> list[np.ndarray]:
    """Seeded epoch batching; permutations are redrawn until every batch
    contains both arms (a trailing remainder merges into the last batch)."""
    n = t.shape[0]
    if batch_size >= n:
        return [np.arange(n)]
    for _ in range(max_attempts):
        perm = rng.permutation(n)
        cuts = list(range(batch_size, n, batch_size))
        if cuts and n - cuts[-1] < batch_size:
            cuts = cuts[:-1]  # merge the short tail into the final batch
        batches = np.split(perm, cuts) if cuts else [perm]
        if all(0 < t[b].sum() < b.shape[0] for b in batches):
            return batches
    raise RuntimeError(
        f"could not draw an epoch of batches with both arms present "
        f"(n={n}, batch_size={batch_size}, treated={int(t.sum())})"
    )


def _tarnet_batch_step(
    encoder: Params,
    head0: Params,
    head1: Params,
    x: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    activation: str,
    outcome_type: str,
    balance_weight: float,
    epsilon: float,
    iters: int,
):
    """Loss and gradients for one batch: factual error + optional balance term."""
    m = x.shape[0]
    phi, cache_e = mlp_forward(encoder, x, activation)
    out0, cache0 = mlp_forward(head0, phi, activation)
    out1, cache1 = mlp_forward(head1, phi, activation)
    picked = np.where(t[:, None] == 1, out1, out0)
    loss_fn = _squared_loss if outcome_type == "continuous" else _bce_loss
    loss, dpicked = loss_fn(picked, y[:, None])
    d0 = np.where(t[:, None] == 1, 0.0, dpicked)
    d1 = np.where(t[:, None] == 1, dpicked, 0.0)
    dphi0, grads0 = mlp_backward(head0, cache0, d0, activation)
    dphi1, grads1 = mlp_backward(head1, cache1, d1, activation)
    dphi = dphi0 + dphi1
    if balance_weight > 0.0:
        idx1 = np.flatnonzero(t == 1)
        idx0 = np.flatnonzero(t == 0)
        div, grad_a, grad_b = sinkhorn_divergence_with_grad(
            phi[idx1], phi[idx0], epsilon=epsilon, iters=iters
        )
        loss += balance_weight * div
        dphi[idx1] += balance_weight * grad_a
        dphi[idx0] += balance_weight * grad_b
    _, grads_e = mlp_backward(encoder, cache_e, dphi, activation)
    return loss, grads_e, grads0, grads1


def _validation_loss(model: TarnetModel, x: np.ndarray, t: np.ndarray, y: np.ndarray) -> float:
    phi, _ = mlp_forward(model.encoder, model._standardize(x), model.spec.activation)
    out0, _ = mlp_forward(model.head0, phi, model.spec.activation)
    out1, _ = mlp_forward(model.head1, phi, model.spec.activation)
    picked = np.where(t[:, None] == 1, out1, out0)
    loss_fn = _squared_loss if model.outcome_type == "continuous" else _bce_loss
    return loss_fn(picked, y[:, None])[0]


def _internal_val_split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 11])
    perm = rng.permutation(n)
    n_val = max(1, int(np.floor(0.2 * n)))
    return perm[n_val:], perm[:n_val]


def _train_two_headed(
    train: ObservationalDataset,
    cfg: EstimatorConfig,
    spec: TarnetSpec,
    kind: str,
    balance_weight: float,
    val: ObservationalDataset | None,
) -> TarnetModel:
    if val is None:
        tr_idx, va_idx = _internal_val_split(train.n_units, spec.seed)
        val = take_rows(train, va_idx)
        train = take_rows(train, tr_idx)
    if not ((train.treatments == 0).any() and (train.treatments == 1).any()):
        raise ValueError("training split must contain both arms")

    x_mean = train.covariates.mean(axis=0)
    x_sd = train.covariates.std(axis=0)
    x_sd = np.where(x_sd > 0, x_sd, 1.0)
    x_tr = (train.covariates - x_mean) / x_sd
    t_tr = train.treatments.astype(np.float64)
    y_tr = train.outcomes

    observed = set(np.unique(train.outcomes).tolist()) | set(np.unique(val.outcomes).tolist())
    outcome_type = "binary" if observed <= {0.0, 1.0} else "continuous"

    rng_init = np.random.default_rng([spec.seed, 0])
    encoder = init_mlp(train.n_covariates, spec.encoder_widths, spec.encoder_widths[-1], rng_init)
    phi_dim = spec.encoder_widths[-1]
    head0 = init_mlp(phi_dim, spec.head_widths, 1, rng_init)
    head1 = init_mlp(phi_dim, spec.head_widths, 1, rng_init)

    flat = _flatten(encoder) + _flatten(head0) + _flatten(head1)
    adam = _Adam([p.shape for p in flat], lr=cfg.learning_rate)
    batch_rng = np.random.default_rng([spec.seed, 7])

    model = TarnetModel(
        kind=kind,
        spec=spec,
        encoder=encoder,
        head0=head0,
        head1=head1,
        x_mean=x_mean,
        x_sd=x_sd,
        outcome_type=outcome_type,
    )
    best_val = np.inf
    best_state = None
    best_epoch = 0
    train_curve: list[float] = []
    val_curve: list[float] = []

    for epoch in range(1, cfg.max_epochs + 1):
        epoch_loss = 0.0
        batches = arm_preserving_batches(t_tr, cfg.batch_size, batch_rng)
        for idx in batches:
            loss, ge, g0, g1 = _tarnet_batch_step(
                encoder,
                head0,
                head1,
                x_tr[idx],
                t_tr[idx],
                y_tr[idx],
                spec.activation,
                outcome_type,
                balance_weight,
                cfg.sinkhorn_epsilon,
                cfg.sinkhorn_iters,
            )
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"{kind} training diverged at epoch {epoch} (non-finite loss "
                    f"{loss!r}); lower the learning rate or rescale the data"
                )
            adam.step(flat, _flatten(ge) + _flatten(g0) + _flatten(g1))
            epoch_loss += loss * idx.shape[0]
        train_curve.append(epoch_loss / train.n_units)

        val_loss = _validation_loss(model, val.covariates, val.treatments, val.outcomes)
        if not np.isfinite(val_loss):
            raise RuntimeError(f"{kind} validation loss diverged at epoch {epoch}")
        val_curve.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy((encoder, head0, head1))
            best_epoch = epoch
        elif epoch - best_epoch >= cfg.patience:
            break

    model.encoder, model.head0, model.head1 = best_state
    model.history = {
        "train_loss": train_curve,
        "val_loss": val_curve,
        "best_epoch": best_epoch,
        "best_val_loss": float(best_val),
        "epochs_run": len(val_curve),
        "balance_weight": balance_weight,
    }
    return model


def fit_tarnet(
    train: ObservationalDataset,
    cfg: EstimatorConfig,
    spec: TarnetSpec,
    val: ObservationalDataset | None = None,
) -> TarnetModel:
    """Two-headed factual regression with early stopping on validation loss.

    Without an explicit validation split, a seeded 20% carve-out of the
    training rows is used. The returned parameters are those of the best
    validation epoch.
    """
    return _train_two_headed(train, cfg, spec, "tarnet", balance_weight=0.0, val=val)


def fit_cfr_wass(
    train: ObservationalDataset,
    cfg: EstimatorConfig,
    spec: TarnetSpec,
    val: ObservationalDataset | None = None,
) -> TarnetModel:
    """TARNet plus a per-batch transport penalty between arm representations."""
    return _train_two_headed(
        train, cfg, spec, "cfr-wass", balance_weight=cfg.balance_weight, val=val
    )
