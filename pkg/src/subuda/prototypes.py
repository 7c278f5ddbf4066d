"""Class centroids, the prototypical classifier and class-level losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ContractError(RuntimeError):
    """A centroid was read before it was initialised."""


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, shape (len(a), len(b))."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def batch_centroids(features, labels, n_classes: int):
    """Per-class means of ``features``; negative labels are ignored.

    Returns ``(centroids, counts)``. Rows of absent classes are NaN.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    d = features.shape[1]
    counts = np.bincount(labels[labels >= 0], minlength=n_classes)[:n_classes]
    centroids = np.full((n_classes, d), np.nan)
    for n in np.flatnonzero(counts):
        centroids[n] = features[labels == n].mean(axis=0)
    return centroids, counts


@dataclass
class CentroidBank:
    """EMA memory of source and target class centroids."""

    c_s: np.ndarray
    c_t: np.ndarray
    init_s: np.ndarray
    init_t: np.ndarray
    ema_momentum: float = 0.9

    @classmethod
    def empty(cls, n_classes: int, dim: int, ema_momentum: float = 0.9) -> "CentroidBank":
        if not 0.0 <= ema_momentum < 1.0:
            raise ValueError("ema_momentum must lie in [0, 1)")
        return cls(
            c_s=np.zeros((n_classes, dim)),
            c_t=np.zeros((n_classes, dim)),
            init_s=np.zeros(n_classes, dtype=bool),
            init_t=np.zeros(n_classes, dtype=bool),
            ema_momentum=ema_momentum,
        )

    @property
    def n_classes(self) -> int:
        return self.c_s.shape[0]

    def copy(self) -> "CentroidBank":
        return CentroidBank(self.c_s.copy(), self.c_t.copy(), self.init_s.copy(),
                            self.init_t.copy(), self.ema_momentum)

    def source(self) -> np.ndarray:
        if not self.init_s.all():
            missing = np.flatnonzero(~self.init_s).tolist()
            raise ContractError(f"source centroids not initialised for classes {missing}")
        return self.c_s

    def ema_update(self, domain: str, centroids: np.ndarray, counts: np.ndarray) -> np.ndarray:
        """Blend batch centroids into memory for every class present in the batch.

        Returns d(new centroid)/d(batch centroid) per class: ``1 - rho`` for
        classes that already had memory, 1 for first sightings, 0 if absent.
        """
        mem, flags = (self.c_s, self.init_s) if domain == "s" else (self.c_t, self.init_t)
        rho = self.ema_momentum
        factor = np.zeros(len(counts))
        for n in np.flatnonzero(counts):
            if flags[n]:
                mem[n] = rho * mem[n] + (1.0 - rho) * centroids[n]
                factor[n] = 1.0 - rho
            else:
                mem[n] = centroids[n]
                flags[n] = True
                factor[n] = 1.0
        return factor


def _softmax_neg(d2: np.ndarray) -> np.ndarray:
    z = -d2
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def prototypical_probs(feature, centroids) -> np.ndarray:
    """Softmax over negative squared distances to each centroid.

    Accepts one feature vector or a batch of them.
    """
    f = np.asarray(feature, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if f.ndim == 1:
        return _softmax_neg(sq_dists(f[None], c))[0]
    return _softmax_neg(sq_dists(f, c))


def class_ce_loss(features, labels, centroids, initialized=None):
    """Mean negative log-likelihood under the prototypical classifier.

    Centroids are constants here; the gradient is w.r.t. ``features`` only.
    If ``initialized`` is given, only those centroids take part in the
    softmax and every label must point at one of them.
    """
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    c = np.asarray(centroids, dtype=np.float64)
    if initialized is None:
        initialized = np.ones(c.shape[0], dtype=bool)
    if not np.all(initialized[labels]):
        raise ContractError("label refers to an uninitialised centroid")
    cols = np.flatnonzero(initialized)
    col_of = np.full(c.shape[0], -1)
    col_of[cols] = np.arange(len(cols))
    cc = c[cols]
    p = _softmax_neg(sq_dists(f, cc))
    y = col_of[labels]
    m = f.shape[0]
    picked = p[np.arange(m), y]
    loss = float(-np.log(np.maximum(picked, np.finfo(float).tiny)).mean())
    grad = 2.0 * (p @ cc - cc[y]) / m
    return loss, grad


def assign_pseudo_class(features_t, source_centroids) -> np.ndarray:
    """Nearest source centroid; ``argmin`` resolves ties to the lowest class."""
    return np.argmin(sq_dists(np.asarray(features_t, dtype=np.float64), source_centroids), axis=1)


@dataclass
class MatchingLoss:
    value: float
    grad_source: np.ndarray  # dL/dc_s, shape (N, d)
    grad_target: np.ndarray
    included: np.ndarray
    per_class: np.ndarray  # squared centroid gaps, NaN where skipped

    @property
    def empty(self) -> bool:
        return not self.included.any()


def class_matching_loss(bank: CentroidBank, mask=None) -> MatchingLoss:
    """Mean squared gap between source and target centroids.

    Only classes initialised on both sides (and selected by ``mask``) count;
    the mean is taken over those. With none included the loss is 0 and
    ``empty`` is set.
    """
    included = bank.init_s & bank.init_t
    if mask is not None:
        included = included & mask
    gap = bank.c_s - bank.c_t
    per_class = np.full(bank.n_classes, np.nan)
    grad = np.zeros_like(gap)
    k = int(included.sum())
    if k == 0:
        return MatchingLoss(0.0, grad, grad.copy(), included, per_class)
    per_class[included] = np.einsum("ij,ij->i", gap[included], gap[included])
    grad[included] = 2.0 * gap[included] / k
    return MatchingLoss(float(per_class[included].mean()), grad, -grad, included, per_class)


def centroid_grad_to_features(labels, counts, grad_centroids, factor) -> np.ndarray:
    """Chain dL/d(memory centroid) back to the batch features that formed it."""
    labels = np.asarray(labels)
    out = np.zeros((len(labels), grad_centroids.shape[1]))
    ok = labels >= 0
    scale = np.where(counts > 0, factor / np.maximum(counts, 1), 0.0)
    out[ok] = grad_centroids[labels[ok]] * scale[labels[ok], None]
    return out
