"""Regressors from input fields to subspace bases, their training loop,
the tangent-space interpolation baseline, and evaluation.

The model is a small fully connected network on encoded field features; its
raw output matrix is treated as a subspace representative, so training
minimizes one of the gauge-invariant losses from :mod:`subreg.grassmann`.
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CutLocus, DivergenceDetected
from .fields import sine_analyze
from .grassmann import (
    grad_loss,
    grassmann_exp,
    grassmann_log,
    loss_l1,
    loss_l2_stoch,
    loss_z2,
    orthonormalize,
    relative_subspace_error,
)

LOSS_KINDS = ("L1", "L2", "L2stab", "Z2")


@dataclass
class FeatureEncoder:
    """Turns per-sample field channels into a fixed-length feature vector.

    ``spectral`` keeps the lowest sine modes of each channel (the inputs
    here are dominated by low frequencies); ``raw-downsample`` strides the
    raw grid values.
    """

    mode: str = "spectral"
    n_modes: int = 12
    downsample: int = 4

    def encode(self, grid, channels):
        feats = []
        for ch in np.asarray(channels, dtype=float):
            if self.mode == "spectral":
                coeff = sine_analyze(grid, ch)
                block = coeff[tuple(slice(0, min(self.n_modes, n)) for n in grid.extents)]
                feats.append(block.ravel())
            elif self.mode == "raw-downsample":
                sl = tuple(slice(None, None, self.downsample) for _ in grid.extents)
                feats.append(ch[sl].ravel())
            else:
                raise ValueError(f"unknown encoder mode {self.mode!r}")
        return np.concatenate(feats)

    def encode_dataset(self, dataset):
        return np.stack(
            [self.encode(dataset.grid, dataset.features[i]) for i in range(dataset.n_samples)]
        )

    def to_dict(self):
        return {"mode": self.mode, "n_modes": self.n_modes, "downsample": self.downsample}


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    loss: str = "L1"
    r: int = 8
    batch_size: int = 25
    epochs: int = 200
    learning_rate: float = 3e-4
    gamma_decay: float = 0.5
    decay_interval: int = 100
    weight_decay: float = 1e-4
    seed: int = 0
    hidden: tuple = (256, 256, 256)
    momentum: float = 0.9
    normalize_columns: bool = True
    encoder: FeatureEncoder = field(default_factory=FeatureEncoder)

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if min(self.r, self.batch_size, self.epochs, self.decay_interval) < 1:
            raise ValueError("TrainConfig: sizes must be positive")
        if min(self.learning_rate, self.gamma_decay) <= 0 or self.weight_decay < 0:
            raise ValueError("TrainConfig: rates must be positive")

    def to_dict(self):
        d = self.__dict__.copy()
        d["hidden"] = list(self.hidden)
        d["encoder"] = self.encoder.to_dict()
        return d


@dataclass
class RegressorModel:
    """MLP with a flat parameter vector mapping features to an (n, r) matrix."""

    encoder: FeatureEncoder
    layer_sizes: list  # [d_in, hidden..., n * r]
    out_rows: int
    out_cols: int
    params: np.ndarray
    normalize_columns: bool = True
    feature_mean: np.ndarray = None
    feature_std: np.ndarray = None

    def shapes(self):
        sizes = self.layer_sizes
        return [((sizes[i + 1], sizes[i]), (sizes[i + 1],)) for i in range(len(sizes) - 1)]

    def views(self):
        """(W, b) views into the flat parameter vector, one per layer."""
        out = []
        offset = 0
        for w_shape, b_shape in self.shapes():
            w = self.params[offset : offset + w_shape[0] * w_shape[1]].reshape(w_shape)
            offset += w.size
            b = self.params[offset : offset + b_shape[0]]
            offset += b.size
            out.append((w, b))
        return out


def param_count(layer_sizes):
    return sum(
        layer_sizes[i + 1] * layer_sizes[i] + layer_sizes[i + 1]
        for i in range(len(layer_sizes) - 1)
    )


def init_model(encoder, feature_dim, hidden, out_rows, out_cols, seed, normalize_columns=True):
    """Model with scaled-normal weights and zero biases, deterministic in seed."""
    layer_sizes = [feature_dim, *hidden, out_rows * out_cols]
    rng = np.random.default_rng(seed)
    params = np.zeros(param_count(layer_sizes))
    model = RegressorModel(
        encoder=encoder,
        layer_sizes=layer_sizes,
        out_rows=out_rows,
        out_cols=out_cols,
        params=params,
        normalize_columns=normalize_columns,
    )
    for w, b in model.views():
        w[:] = rng.standard_normal(w.shape) / np.sqrt(w.shape[1])
        b[:] = 0.01 * rng.standard_normal(b.shape)
    return model


def _standardize(model, feats):
    if model.feature_mean is None:
        return feats
    return (feats - model.feature_mean) / model.feature_std


def _forward_cached(model, feats):
    """Batched forward pass keeping activations for backprop.

    Returns (raw (B, n, r), column norms or None, activations list).
    """
    h = _standardize(model, np.atleast_2d(feats))
    acts = [h]
    views = model.views()
    for w, b in views[:-1]:
        h = np.tanh(h @ w.T + b)
        acts.append(h)
    w, b = views[-1]
    out = (h @ w.T + b).reshape(-1, model.out_rows, model.out_cols)
    if model.normalize_columns:
        norms = np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-300)
        return out / norms, norms, acts
    return out, None, acts


def forward(model, feats):
    """Predicted raw basis matrix (n, r) for one feature vector, or a batch
    of them for a feature matrix."""
    out, _, _ = _forward_cached(model, feats)
    return out[0] if np.asarray(feats).ndim == 1 else out


def _backward(model, acts, out_grad):
    """Gradient of the summed per-sample losses w.r.t. the flat parameters."""
    views = model.views()
    grad = np.zeros_like(model.params)
    gviews = RegressorModel(
        encoder=model.encoder,
        layer_sizes=model.layer_sizes,
        out_rows=model.out_rows,
        out_cols=model.out_cols,
        params=grad,
        normalize_columns=model.normalize_columns,
    ).views()
    dh = out_grad.reshape(out_grad.shape[0], -1)
    w, _ = views[-1]
    gviews[-1][0][:] = dh.T @ acts[-1]
    gviews[-1][1][:] = dh.sum(axis=0)
    dh = dh @ w
    for layer in range(len(views) - 2, -1, -1):
        dpre = dh * (1.0 - acts[layer + 1] ** 2)
        gviews[layer][0][:] = dpre.T @ acts[layer]
        gviews[layer][1][:] = dpre.sum(axis=0)
        if layer > 0:
            dh = dpre @ views[layer][0]
    return grad


def _norm_grad(pred, norms, grad_pred):
    """Push a gradient in the normalized output back through the column
    normalization ``y = x / ||x||``."""
    inner = np.sum(pred * grad_pred, axis=1, keepdims=True)
    return (grad_pred - pred * inner) / norms


def _sample_loss_and_grad(pred, target, kind, z=None):
    """Loss value and its gradient w.r.t. the (possibly normalized) output."""
    if kind == "L1":
        return loss_l1(pred, target), grad_loss(pred, target, "L1")
    if kind in ("L2", "L2stab"):
        value = loss_l2_stoch(pred, target, z, stabilized=(kind == "L2stab"))
        return value, grad_loss(pred, target, kind, z=z)
    # Z2: single-vector regression with sign freedom
    v = pred[:, 0]
    u = target[:, 0]
    value = loss_z2(v, u)
    sign = 1.0 if np.linalg.norm(v - u) <= np.linalg.norm(v + u) else -1.0
    diff = v - sign * u
    norm = np.linalg.norm(diff)
    g = np.zeros_like(pred)
    if norm > 0:
        g[:, 0] = diff / norm
    return value, g


def batch_loss_and_grad(model, feats, targets, kind, zs=None):
    """Mean loss over a batch and its gradient w.r.t. the flat parameters."""
    pred, norms, acts = _forward_cached(model, feats)
    batch = pred.shape[0]
    out_grad = np.empty_like(pred)
    total = 0.0
    for i in range(batch):
        value, g = _sample_loss_and_grad(
            pred[i], targets[i], kind, z=None if zs is None else zs[i]
        )
        total += value
        out_grad[i] = g
    if model.normalize_columns:
        out_grad = _norm_grad(pred, norms, out_grad)
    grad = _backward(model, acts, out_grad) / batch
    return total / batch, grad


def grad_model(model, feats, targets, kind, zs=None):
    """Flat parameter gradient of the mean batch loss (see the FD tests)."""
    return batch_loss_and_grad(model, feats, targets, kind, zs=zs)[1]


def _epoch_loss(model, feats, targets, kind, rng):
    total = 0.0
    pred, _, _ = _forward_cached(model, feats)
    for i in range(feats.shape[0]):
        z = rng.standard_normal(targets[i].shape[1]) if kind in ("L2", "L2stab") else None
        value, _ = _sample_loss_and_grad(pred[i], targets[i], kind, z=z)
        total += value
    return total / feats.shape[0]


def evaluate_metric(model, feats, targets, metric="rel_subspace"):
    """Mean metric of a model over encoded features/targets."""
    pred, _, _ = _forward_cached(model, feats)
    vals = []
    for i in range(feats.shape[0]):
        if metric == "rel_subspace":
            w = orthonormalize(pred[i])
            vals.append(relative_subspace_error(w, targets[i]))
        elif metric == "z2_per_vector":
            v = pred[i][:, 0]
            u = targets[i][:, 0]
            vals.append(loss_z2(v, u) / np.linalg.norm(u))
        else:
            raise ValueError(f"unknown metric {metric!r}")
    return np.asarray(vals)


def train(dataset, config, test_dataset=None):
    """Train a regressor on a subspace dataset.

    The optimizer is a sign-of-momentum update with decoupled weight decay
    and a stepwise learning-rate schedule.  Deterministic for a fixed
    config seed.  Returns the model and one history row per epoch with
    train loss, test loss, and the test subspace metric.
    """
    if config.loss == "Z2":
        if dataset.targets.shape[2] != 1 or config.r != 1:
            raise ValueError("Z2 training predicts one vector per model")
    elif config.r < dataset.target_dim:
        raise ValueError("train: config.r must be >= dataset target dimension")
    rng = np.random.default_rng(config.seed)
    encoder = config.encoder
    feats = encoder.encode_dataset(dataset)
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std[std < 1e-12] = 1.0
    model = init_model(
        encoder,
        feats.shape[1],
        config.hidden,
        dataset.targets.shape[1],
        config.r,
        seed=config.seed,
        normalize_columns=config.normalize_columns,
    )
    model.feature_mean = mean
    model.feature_std = std
    targets = dataset.targets
    test_feats = test_targets = None
    if test_dataset is not None:
        test_feats = encoder.encode_dataset(test_dataset)
        test_targets = test_dataset.targets

    momentum = np.zeros_like(model.params)
    n = dataset.n_samples
    history = []
    metric_kind = "z2_per_vector" if config.loss == "Z2" else "rel_subspace"
    for epoch in range(config.epochs):
        lr = config.learning_rate * config.gamma_decay ** (epoch // config.decay_interval)
        order = rng.permutation(n)
        running = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            zs = None
            if config.loss in ("L2", "L2stab"):
                zs = [rng.standard_normal(targets[i].shape[1]) for i in idx]
            value, grad = batch_loss_and_grad(
                model, feats[idx], targets[idx], config.loss, zs=zs
            )
            if not np.isfinite(value):
                raise DivergenceDetected(f"train: non-finite loss at epoch {epoch}")
            momentum = config.momentum * momentum + (1.0 - config.momentum) * grad
            model.params -= lr * (np.sign(momentum) + config.weight_decay * model.params)
            running += value
            n_batches += 1
        row = {"epoch": epoch, "train_loss": running / n_batches}
        if test_feats is not None:
            row["test_loss"] = _epoch_loss(model, test_feats, test_targets, config.loss, rng)
            row["test_metric"] = float(
                np.mean(evaluate_metric(model, test_feats, test_targets, metric_kind))
            )
        history.append(row)
    return model, history


@dataclass
class EvalSummary:
    mean: float
    worst: float
    per_sample: np.ndarray


def evaluate(model_or_fn, dataset, metric="rel_subspace"):
    """Evaluate a model (or a ``fn(dataset, i) -> basis`` baseline) over a
    dataset; predictions are orthonormalized before the subspace metric."""
    vals = []
    for i in range(dataset.n_samples):
        target = dataset.targets[i]
        if isinstance(model_or_fn, RegressorModel):
            pred = forward(
                model_or_fn, model_or_fn.encoder.encode(dataset.grid, dataset.features[i])
            )
        else:
            pred = model_or_fn(dataset, i)
        if metric == "rel_subspace":
            vals.append(relative_subspace_error(orthonormalize(pred), target))
        elif metric == "z2_per_vector":
            per_vec = [
                loss_z2(pred[:, j], target[:, j]) / np.linalg.norm(target[:, j])
                for j in range(target.shape[1])
            ]
            vals.append(float(np.mean(per_vec)))
        else:
            raise ValueError(f"unknown metric {metric!r}")
    vals = np.asarray(vals)
    return EvalSummary(mean=float(vals.mean()), worst=float(vals.max()), per_sample=vals)


def interpolate_normal_coords(dataset, query_features, k_nn, encoder=None, ridge=1e-8):
    """Tangent-space interpolation baseline.

    The nearest training sample (in encoded feature space) supplies the
    base point; the logs of the remaining neighbors are interpolated with a
    squared-exponential kernel ridge regressor (bandwidth = median neighbor
    distance) and mapped back through the exponential.
    """
    if encoder is None:
        encoder = FeatureEncoder()
    feats = encoder.encode_dataset(dataset)
    query = np.asarray(query_features, dtype=float)
    if k_nn < 1 or k_nn > dataset.n_samples:
        raise ValueError("interpolate_normal_coords: bad neighbor count")
    dists = np.linalg.norm(feats - query, axis=1)
    order = np.argsort(dists, kind="stable")[:k_nn]
    base = dataset.targets[order[0]]
    if k_nn == 1:
        return base
    logs = np.zeros((k_nn, base.shape[0] * base.shape[1]))
    for j, idx in enumerate(order[1:], start=1):
        logs[j] = grassmann_log(base, dataset.targets[idx]).delta.ravel()
    x = feats[order]
    pairwise = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
    positive = pairwise[pairwise > 0]
    bandwidth = np.median(positive) if positive.size else 1.0
    k_mat = np.exp(-((pairwise / bandwidth) ** 2) / 2.0)
    k_query = np.exp(-((np.linalg.norm(x - query, axis=1) / bandwidth) ** 2) / 2.0)
    weights = np.linalg.solve(k_mat + ridge * np.eye(k_nn), logs)
    delta = (k_query @ weights).reshape(base.shape)
    delta -= base @ (base.T @ delta)  # keep the tangent horizontal
    return grassmann_exp(base, delta, 1.0)


def save_model(model, path, config=None):
    """Checkpoint: meta.json (architecture + encoder + config) + params.f64."""
    os.makedirs(path, exist_ok=True)
    meta = {
        "layer_sizes": list(model.layer_sizes),
        "out_rows": model.out_rows,
        "out_cols": model.out_cols,
        "normalize_columns": model.normalize_columns,
        "encoder": model.encoder.to_dict(),
        "has_standardization": model.feature_mean is not None,
        "config": config.to_dict() if config is not None else None,
    }
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    blocks = [model.params]
    if model.feature_mean is not None:
        blocks += [model.feature_mean, model.feature_std]
    np.concatenate(blocks).astype("<f8").tofile(os.path.join(path, "params.f64"))
    return path


def load_model(path):
    with open(os.path.join(path, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    encoder = FeatureEncoder(**meta["encoder"])
    data = np.fromfile(os.path.join(path, "params.f64"), dtype="<f8")
    n_params = param_count(meta["layer_sizes"])
    model = RegressorModel(
        encoder=encoder,
        layer_sizes=meta["layer_sizes"],
        out_rows=meta["out_rows"],
        out_cols=meta["out_cols"],
        params=data[:n_params].copy(),
        normalize_columns=meta["normalize_columns"],
    )
    if meta["has_standardization"]:
        d = meta["layer_sizes"][0]
        model.feature_mean = data[n_params : n_params + d].copy()
        model.feature_std = data[n_params + d : n_params + 2 * d].copy()
    return model
