"""Linear per-pixel segmenter with a latent-density uncertainty estimator.

Pixel feature ``x`` -> latent ``z = A x`` -> logits ``W z + b``. Epistemic
uncertainty is the negative log-likelihood of ``z`` under a class-conditional
diagonal Gaussian mixture fitted in a PCA subspace of the latent space, then
squashed to [0, 1] by a quantile-threshold normaliser.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist

import numpy as np

from .worldsim import IGNORE, SensorFrame

log = logging.getLogger(__name__)

COV_FLOOR = 1e-6
EXCEED_PROB = 0.2
CHECKPOINT_VERSION = 1


class NotFittedError(RuntimeError):
    """Raised when uncertainty is requested before the estimator was fitted."""


@dataclass(frozen=True)
class SegModel:
    latent_proj: np.ndarray  # (L, F)
    class_weights: np.ndarray  # (K, L)
    biases: np.ndarray  # (K,)
    pca_mean: np.ndarray | None = None  # (L,)
    pca_basis: np.ndarray | None = None  # (P, L), orthonormal rows
    gmm_means: np.ndarray | None = None  # (C, P)
    gmm_vars: np.ndarray | None = None  # (C, P)
    gmm_priors: np.ndarray | None = None  # (C,)
    gmm_classes: np.ndarray | None = None  # (C,) class id of each component
    delta_a: float | None = None
    u_max: float | None = None

    @property
    def n_classes(self) -> int:
        return self.class_weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.latent_proj.shape[1]

    @property
    def estimator_fitted(self) -> bool:
        return self.gmm_means is not None

    @property
    def normalizer_fitted(self) -> bool:
        return self.delta_a is not None


def init_model(n_features: int, n_classes: int, latent_dim: int | None = None,
               seed: int = 0) -> SegModel:
    """Identity latent projection (when L == F) and a small random head."""
    latent_dim = latent_dim or n_features
    rng = np.random.default_rng(seed)
    proj = np.eye(latent_dim, n_features) + 0.01 * rng.standard_normal((latent_dim, n_features))
    w = 0.01 * rng.standard_normal((n_classes, latent_dim))
    return SegModel(latent_proj=proj, class_weights=w, biases=np.zeros(n_classes))


# --------------------------------------------------------------------------- prediction

def forward(model: SegModel, x: np.ndarray):
    """Latents and logits for a (N, F) pixel batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.n_features:
        raise ValueError(f"feature dim {x.shape[-1]} != model input dim {model.n_features}")
    z = x @ model.latent_proj.T
    return z, z @ model.class_weights.T + model.biases


def predict_pixels(model: SegModel, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward(model, x)[1], axis=1)


def predict(model: SegModel, frame: SensorFrame):
    """Label, logit and latent images. Invalid pixels get ``IGNORE`` / zeros."""
    h, w = frame.height, frame.width
    valid = frame.valid.ravel()
    x = frame.features.reshape(h * w, -1)
    if x.shape[1] != model.n_features:
        raise ValueError(f"frame features have dim {x.shape[1]}, model expects {model.n_features}")
    z_v, logits_v = forward(model, x[valid])
    labels = np.full(h * w, IGNORE, dtype=np.int64)
    labels[valid] = np.argmax(logits_v, axis=1)
    logits = np.zeros((h * w, model.n_classes))
    logits[valid] = logits_v
    latents = np.zeros((h * w, model.latent_proj.shape[0]))
    latents[valid] = z_v
    return labels.reshape(h, w), logits.reshape(h, w, -1), latents.reshape(h, w, -1)


# --------------------------------------------------------------------------- uncertainty

def _log_gauss_diag(x, means, variances):
    # (N, P) x (C, P) -> (N, C)
    diff2 = (x[:, None, :] - means[None, :, :]) ** 2
    return -0.5 * (np.sum(np.log(2.0 * np.pi * variances), axis=1)[None, :]
                   + np.sum(diff2 / variances[None, :, :], axis=2))


def estimate_uncertainty(model: SegModel, latents: np.ndarray) -> np.ndarray:
    """Raw uncertainty ``-log sum_j N(Pz; m_j, S_j) p(y_j)`` per latent vector.

    Accepts (N, L) or (H, W, L); returns matching leading shape.
    """
    if not model.estimator_fitted:
        raise NotFittedError("estimator not fitted")
    lat = np.asarray(latents, dtype=np.float64)
    shape = lat.shape[:-1]
    lat = lat.reshape(-1, lat.shape[-1])
    proj = (lat - model.pca_mean) @ model.pca_basis.T
    logp = _log_gauss_diag(proj, model.gmm_means, model.gmm_vars) + np.log(model.gmm_priors)[None, :]
    top = logp.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
    return (-lse).reshape(shape)


def fit_pca(samples: np.ndarray, n_components: int):
    """Mean and top principal directions (rows) with a deterministic sign."""
    mean = samples.mean(axis=0)
    _, _, vt = np.linalg.svd(samples - mean, full_matrices=False)
    basis = vt[:n_components].copy()
    pivot = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(len(basis)), pivot])
    basis *= signs[:, None]
    return mean, basis


def fit_estimator(model: SegModel, latents: np.ndarray, classes: np.ndarray,
                  n_components: int = 6) -> SegModel:
    """Fit PCA + one diagonal Gaussian per predicted class.

    Priors are the class frequencies among the kept samples. Classes with
    fewer than two samples are dropped with a warning.
    """
    latents = np.asarray(latents, dtype=np.float64)
    classes = np.asarray(classes)
    if len(latents) < n_components + 1:
        raise ValueError(f"need at least {n_components + 1} samples, got {len(latents)}")
    mean, basis = fit_pca(latents, n_components)
    proj = (latents - mean) @ basis.T

    ids, counts = np.unique(classes, return_counts=True)
    keep = ids[counts >= 2]
    for c in ids[counts < 2]:
        log.warning("class %d has fewer than 2 samples; dropped from mixture", c)
    if len(keep) == 0:
        raise ValueError("no class has at least 2 samples")
    means, variances, n = [], [], []
    for c in keep:
        pc = proj[classes == c]
        means.append(pc.mean(axis=0))
        variances.append(np.maximum(pc.var(axis=0), COV_FLOOR))
        n.append(len(pc))
    n = np.asarray(n, dtype=np.float64)
    return dataclasses.replace(
        model, pca_mean=mean, pca_basis=basis, gmm_means=np.asarray(means),
        gmm_vars=np.asarray(variances), gmm_priors=n / n.sum(), gmm_classes=keep.astype(np.int64))


def fit_normalizer(model: SegModel, raw: np.ndarray) -> SegModel:
    """Gaussian fit of raw uncertainties; threshold exceeded with probability 0.2.

    ``delta_a = mu + sigma * Phi^-1(0.8)`` and ``u_max`` is the largest sample.
    ``delta_a`` is capped at ``u_max`` so the linear ramp is never inverted.
    """
    raw = np.asarray(raw, dtype=np.float64).ravel()
    raw = raw[np.isfinite(raw)]
    if len(raw) < 2:
        raise ValueError("need at least 2 uncertainty samples")
    mu, sigma = float(raw.mean()), float(raw.std())
    u_max = float(raw.max())
    delta = mu + sigma * NormalDist().inv_cdf(1.0 - EXCEED_PROB) if sigma > 0 else mu
    return dataclasses.replace(model, delta_a=min(delta, u_max), u_max=u_max)


def normalize_uncertainty(model: SegModel, u) -> np.ndarray:
    """Piecewise-linear map of raw uncertainty to [0, 1]."""
    if not model.normalizer_fitted:
        raise NotFittedError("normalizer not fitted")
    u = np.asarray(u, dtype=np.float64)
    lo, hi = model.delta_a, model.u_max
    span = hi - lo
    ramp = (u - lo) / span if span > 0 else np.zeros_like(u)
    out = np.where(u > hi, 1.0, np.where(u >= lo, ramp, 0.0))
    return np.where(np.isnan(u), 0.0, out)


def uncertainty_image(model: SegModel, frame: SensorFrame, latents: np.ndarray | None = None):
    """(raw, normalised) uncertainty images; invalid pixels are NaN / 0."""
    if latents is None:
        latents = predict(model, frame)[2]
    valid = frame.valid
    raw = np.full(valid.shape, np.nan)
    raw[valid] = estimate_uncertainty(model, latents[valid])
    return raw, normalize_uncertainty(model, raw)


# --------------------------------------------------------------------------- training

def loss_and_grads(model: SegModel, x: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy and its gradients w.r.t. (A, W, b)."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    z, logits = forward(model, x)
    logits = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    denom = expl.sum(axis=1)
    loss = float(np.mean(np.log(denom) - logits[np.arange(n), y]))
    dlogits = expl / denom[:, None]
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    g_w = dlogits.T @ z
    g_b = dlogits.sum(axis=0)
    g_a = (dlogits @ model.class_weights).T @ x
    return loss, g_a, g_w, g_b


def cross_entropy(model: SegModel, x: np.ndarray, y: np.ndarray) -> float:
    _, logits = forward(model, x)
    top = logits.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logits - top).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(y)), y]))


def train_step(model: SegModel, x: np.ndarray, y: np.ndarray,
               lr_latent: float, lr_head: float) -> SegModel:
    """One SGD step: encoder (latent projection) and head use separate rates."""
    _, g_a, g_w, g_b = loss_and_grads(model, x, y)
    return dataclasses.replace(
        model,
        latent_proj=model.latent_proj - lr_latent * g_a,
        class_weights=model.class_weights - lr_head * g_w,
        biases=model.biases - lr_head * g_b,
    )


# --------------------------------------------------------------------------- checkpoints

_ARRAYS = ("latent_proj", "class_weights", "biases", "pca_mean", "pca_basis",
           "gmm_means", "gmm_vars", "gmm_priors", "gmm_classes")


def save_model(model: SegModel, path) -> None:
    payload = {"version": np.array(CHECKPOINT_VERSION)}
    for name in _ARRAYS:
        value = getattr(model, name)
        if value is not None:
            payload[name] = value
    if model.normalizer_fitted:
        payload["normalizer"] = np.array([model.delta_a, model.u_max])
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_model(path) -> SegModel:
    with np.load(Path(path)) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        kwargs = {name: data[name].copy() for name in _ARRAYS if name in data}
        if "normalizer" in data:
            kwargs["delta_a"], kwargs["u_max"] = (float(v) for v in data["normalizer"])
    return SegModel(**kwargs)


def models_equal(a: SegModel, b: SegModel) -> bool:
    for name in _ARRAYS:
        va, vb = getattr(a, name), getattr(b, name)
        if (va is None) != (vb is None):
            return False
        if va is not None and (va.shape != vb.shape or not np.array_equal(va, vb)):
            return False
    return a.delta_a == b.delta_a and a.u_max == b.u_max

