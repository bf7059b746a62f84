"""Per-pixel uncertainty prediction for the photometric loss.

A small MLP maps hand-crafted per-pixel appearance features to a positive
uncertainty value beta. The features are a cheap stand-in for a learned
extractor; the prediction head is provider-agnostic, so any (H, W, F)
feature image can be plugged in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

FEATURE_DIM = 6
FEATURE_TAG = "handcrafted-v1"


def image_features(image: np.ndarray) -> np.ndarray:
    """(H, W, 6) features: blurred luma, gradient energy at 2 scales, RGB."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    luma = img.mean(axis=2)
    local_mean = ndimage.gaussian_filter(luma, sigma=2.0)
    feats = [local_mean]
    for sigma in (1.0, 3.0):
        gx = ndimage.gaussian_filter(luma, sigma=sigma, order=(0, 1))
        gy = ndimage.gaussian_filter(luma, sigma=sigma, order=(1, 0))
        feats.append(np.sqrt(gx * gx + gy * gy))
    out = np.stack(feats, axis=2)
    return np.concatenate([out, img], axis=2)


@dataclass
class UncertaintyModel:
    """Two-hidden-layer MLP with a softplus head floored at beta_min."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    beta_min: float = 0.1
    feature_tag: str = FEATURE_TAG

    WEIGHT_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    @classmethod
    def create(cls, hidden: int = 16, beta_min: float = 0.1,
               feature_dim: int = FEATURE_DIM, seed: int = 0) -> "UncertaintyModel":
        rng = np.random.default_rng(seed)
        def init(n_in, n_out):
            return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
        return cls(
            w1=init(feature_dim, hidden), b1=np.zeros(hidden),
            w2=init(hidden, hidden), b2=np.zeros(hidden),
            w3=init(hidden, 1), b3=np.zeros(1),
            beta_min=beta_min,
        )

    def weights(self) -> dict:
        return {name: getattr(self, name) for name in self.WEIGHT_NAMES}

    def apply_gradients(self, grads: dict, lr: float):
        for name, g in grads.items():
            setattr(self, name, getattr(self, name) - lr * g)


def _softplus(x):
    return np.logaddexp(0.0, x)


def uncertainty_forward(model: UncertaintyModel, features: np.ndarray) -> np.ndarray:
    beta, _ = _forward_cached(model, features)
    return beta


def _forward_cached(model: UncertaintyModel, features: np.ndarray):
    feats = np.asarray(features, dtype=float)
    if feats.shape[-1] != model.w1.shape[0]:
        raise ValueError(f"feature dim {feats.shape[-1]} != model input {model.w1.shape[0]}")
    H, W = feats.shape[:2]
    x = feats.reshape(-1, feats.shape[-1])
    z1 = x @ model.w1 + model.b1
    t1 = np.tanh(z1)
    z2 = t1 @ model.w2 + model.b2
    t2 = np.tanh(z2)
    z3 = (t2 @ model.w3 + model.b3)[:, 0]
    beta = _softplus(z3) + model.beta_min
    cache = (x, t1, t2, z3, H, W)
    return beta.reshape(H, W), cache


def _backward_weights(model: UncertaintyModel, cache, d_beta: np.ndarray) -> dict:
    x, t1, t2, z3, H, W = cache
    db = d_beta.reshape(-1)
    # softplus'(z) = sigmoid(z)
    dz3 = db / (1.0 + np.exp(-z3))
    g_w3 = t2.T @ dz3[:, None]
    g_b3 = np.array([dz3.sum()])
    dt2 = dz3[:, None] * model.w3[:, 0][None, :]
    dz2 = dt2 * (1.0 - t2 * t2)
    g_w2 = t1.T @ dz2
    g_b2 = dz2.sum(axis=0)
    dt1 = dz2 @ model.w2.T
    dz1 = dt1 * (1.0 - t1 * t1)
    g_w1 = x.T @ dz1
    g_b1 = dz1.sum(axis=0)
    return {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2, "w3": g_w3, "b3": g_b3}


def kmeans_labels(features: np.ndarray, k: int, seed: int = 0,
                  iters: int = 15, sample: int = 4096) -> np.ndarray:
    """Plain Lloyd clustering of per-pixel features; returns (H, W) labels."""
    feats = np.asarray(features, dtype=float)
    H, W = feats.shape[:2]
    flat = feats.reshape(-1, feats.shape[-1])
    rng = np.random.default_rng(seed)
    pool = flat if flat.shape[0] <= sample else flat[rng.choice(flat.shape[0], sample, replace=False)]
    k = min(k, pool.shape[0])
    centers = pool[rng.choice(pool.shape[0], k, replace=False)]
    for _ in range(iters):
        d = ((pool[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        lbl = d.argmin(axis=1)
        for c in range(k):
            sel = lbl == c
            if sel.any():
                centers[c] = pool[sel].mean(axis=0)
    d = ((flat[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1).reshape(H, W)


@dataclass
class UncertaintyLoss:
    value: float
    error_term: float
    var_term: float
    log_term: float
    weight_grads: dict


def loss_uncertainty(model: UncertaintyModel, features: np.ndarray,
                     ssim_error_map: np.ndarray, lam3: float, lam4: float,
                     cluster_labels: np.ndarray | None = None,
                     k: int = 8, seed: int = 0) -> UncertaintyLoss:
    """Uncertainty-head loss; gradients flow only into the MLP weights.

    ssim_error_map is treated as a constant (no gradient through the
    renderer). The variance regularizer operates within feature clusters;
    pass precomputed labels to amortize the clustering.
    """
    err = np.asarray(ssim_error_map, dtype=float)
    beta, cache = _forward_cached(model, features)
    if err.shape != beta.shape:
        raise ValueError(f"error map {err.shape} vs beta {beta.shape}")
    n = beta.size

    error_term = float((err / beta ** 2).mean())
    d_beta = -2.0 * err / beta ** 3 / n

    if cluster_labels is None:
        cluster_labels = kmeans_labels(features, k=k, seed=seed)
    var_term = 0.0
    if lam3 > 0.0:
        lbl = cluster_labels.reshape(-1)
        bflat = beta.reshape(-1)
        counts = np.bincount(lbl)
        sums = np.bincount(lbl, weights=bflat)
        means = sums / np.maximum(counts, 1)
        centered = bflat - means[lbl]
        var_term = float((centered ** 2).sum() / n)
        d_beta = d_beta + lam3 * (2.0 * centered / n).reshape(beta.shape)

    log_term = float(np.log(beta).mean())
    d_beta = d_beta + lam4 / beta / n

    grads = _backward_weights(model, cache, d_beta)
    value = error_term + lam3 * var_term + lam4 * log_term
    return UncertaintyLoss(value, error_term, var_term, log_term, grads)
