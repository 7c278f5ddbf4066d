"""Metrics: accuracy, AUC, proxy A-distance, consensus clustering, 2-D projection."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .subtyping import kmeans


class UndefinedMetricError(ValueError):
    pass


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float(np.mean(predictions == labels))


def auc(positives, negatives) -> float:
    """Mann-Whitney AUC: P(pos > neg) + P(pos == neg) / 2, via ranks."""
    pos = np.asarray(positives, dtype=np.float64).ravel()
    neg = np.asarray(negatives, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def auc_from_labels(scores, labels, positive: int = 1) -> float:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    return auc(scores[labels == positive], scores[labels != positive])


def multiclass_auc(probs, labels) -> float:
    """Positive-class AUC for two classes, mean one-vs-rest AUC otherwise."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape[1] == 2:
        return auc_from_labels(probs[:, 1], labels)
    vals = [auc_from_labels(probs[:, c], labels, c) for c in range(probs.shape[1])
            if np.any(labels == c) and np.any(labels != c)]
    if not vals:
        raise UndefinedMetricError("no class has both positives and negatives")
    return float(np.mean(vals))


def _logistic_fit(x, y, steps: int, l2: float):
    n, d = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    # step 1/L with L the Lipschitz constant of the regularised loss gradient
    lip = 0.25 * np.linalg.norm(xb, 2) ** 2 / n + l2
    lr = 1.0 / lip
    w = np.zeros(d + 1)
    for _ in range(steps):
        z = xb @ w
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        g = xb.T @ (p - y) / n
        g[:d] += l2 * w[:d]
        w -= lr * g
    return w


def proxy_a_distance(features_s, features_t, seed: int = 0, steps: int = 200, l2: float = 1e-3) -> float:
    """2(1 - 2 err) of a linear domain classifier on a held-out half.

    Both domains are subsampled to the same size, each split in halves.
    The permutation for a domain depends only on (seed, domain size), so
    swapping the arguments gives the same value.
    """
    a = np.asarray(features_s, dtype=np.float64)
    b = np.asarray(features_t, dtype=np.float64)
    if len(a) < 10 or len(b) < 10:
        raise UndefinedMetricError("proxy A-distance needs at least 10 samples per domain")
    n = min(len(a), len(b))
    half = n // 2

    def split(x):
        perm = np.random.Generator(np.random.Philox([seed, len(x)])).permutation(len(x))[:n]
        return x[perm[:half]], x[perm[half:2 * half]]

    a_tr, a_te = split(a)
    b_tr, b_te = split(b)
    x_tr = np.vstack([a_tr, b_tr])
    y_tr = np.r_[np.ones(half), np.zeros(half)]
    mu = x_tr.mean(axis=0)
    sd = x_tr.std(axis=0)
    sd[sd == 0] = 1.0
    w = _logistic_fit((x_tr - mu) / sd, y_tr, steps, l2)

    def score(x):
        return ((x - mu) / sd) @ w[:-1] + w[-1]

    wrong = np.sum(score(a_te) <= 0) + np.sum(score(b_te) > 0)
    err = wrong / (2 * half)
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))


@dataclass
class ConsensusResult:
    ks: list[int]
    areas: list[float]
    deltas: list[float]
    stability: list[float]  # share of entries within 0.05 of 0 or 1
    recommended: int
    skipped: int
    matrices: dict[int, np.ndarray] = field(repr=False, default_factory=dict)

    def rows(self) -> list[dict]:
        return [dict(k=k, cdf_area=a, delta_area=d, stability=s)
                for k, a, d, s in zip(self.ks, self.areas, self.deltas, self.stability)]


def _derived(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def consensus_matrix(x, K, n_resamples, rate, seed, n_init=1):
    M = len(x)
    size = int(round(rate * M))
    co_cluster = np.zeros((M, M))
    co_sample = np.zeros((M, M))
    skipped = 0
    seeds = np.random.SeedSequence([seed, K]).generate_state(n_resamples)
    for r in range(n_resamples):
        rng = np.random.Generator(np.random.Philox(int(seeds[r])))
        idx = np.sort(rng.choice(M, size=size, replace=False)) if size < M else np.arange(M)
        if len(idx) < K:
            skipped += 1
            continue
        # seeded by the subsample itself, so identical subsamples cluster identically
        km_seed = _derived(seed, K, zlib.crc32(idx.astype("<i8").tobytes()))
        labels, _ = kmeans(x[idx], K, seed=km_seed, n_init=n_init)
        co_sample[np.ix_(idx, idx)] += 1
        co_cluster[np.ix_(idx, idx)] += labels[:, None] == labels[None, :]
    cons = np.divide(co_cluster, co_sample, out=np.zeros_like(co_cluster), where=co_sample > 0)
    np.fill_diagonal(cons, 1.0)
    return cons, skipped


def cdf_area(consensus: np.ndarray) -> float:
    """Area under the empirical CDF of the off-diagonal consensus entries.

    Uses the right-endpoint sum over sorted distinct values, so a matrix
    whose entries are all exactly 0 or 1 scores 1.
    """
    vals = np.sort(consensus[np.triu_indices_from(consensus, k=1)])
    if vals.size == 0:
        return 0.0
    xs = np.unique(vals)
    cdf = np.searchsorted(vals, xs, side="right") / vals.size
    return float(np.sum(np.diff(xs) * cdf[1:]))


def consensus_scan(features, k_range, n_resamples: int = 50, subsample_rate: float = 0.8,
                   seed: int = 0, threshold: float = 0.05, n_init: int = 1) -> ConsensusResult:
    """Monti-style consensus clustering over a range of cluster counts.

    The recommended K is the last K before the relative gain in CDF area
    falls below ``threshold``.
    """
    x = np.asarray(features, dtype=np.float64)
    ks = sorted(int(k) for k in k_range)
    if n_resamples < 2:
        raise ValueError("n_resamples must be >= 2")
    if not ks or ks[0] < 2 or ks[-1] > len(x) / 2:
        raise ValueError(f"K range must lie in [2, {len(x) / 2}]")
    areas, stab, mats, skipped = [], [], {}, 0
    for k in ks:
        cons, sk = consensus_matrix(x, k, n_resamples, subsample_rate, seed, n_init)
        skipped += sk
        mats[k] = cons
        areas.append(cdf_area(cons))
        off = cons[np.triu_indices_from(cons, k=1)]
        stab.append(float(np.mean(np.minimum(off, 1.0 - off) <= 0.05)))
    deltas = [areas[0]]
    for prev, cur in zip(areas[:-1], areas[1:]):
        deltas.append((cur - prev) / prev if prev > 0 else np.inf)
    recommended = ks[-1]
    for i in range(1, len(ks)):
        if deltas[i] < threshold:
            recommended = ks[i - 1]
            break
    return ConsensusResult(ks, areas, deltas, stab, recommended, skipped, mats)


def project_2d(features) -> np.ndarray:
    """PCA scores on the top two components.

    Each component is signed so its largest-magnitude loading is positive;
    components with negligible variance come back as zeros.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < 3:
        raise ValueError("need at least 3 points")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    out = np.zeros((x.shape[0], 2))
    tol = (s[0] if s.size else 0.0) * max(x.shape) * np.finfo(float).eps
    for j in range(min(2, vt.shape[0])):
        if s[j] <= tol or s[j] == 0:
            continue
        v = vt[j]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, j] = xc @ v
    return out


@dataclass
class MetricRow:
    epoch: int
    loss_total: float
    loss_ce: float
    loss_class: float
    loss_sub: float
    acc: float
    auc: float
    a_dist: float
    clusters: str = ""  # per-class subtype cluster counts, e.g. "4;3"


def write_history(rows, path) -> None:
    names = [f.name for f in fields(MetricRow)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in rows:
            w.writerow([_fmt(getattr(row, n)) for n in names])


def write_rows(rows: list[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    names = list(rows[0])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in rows:
            w.writerow([_fmt(row[n]) for n in names])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v
