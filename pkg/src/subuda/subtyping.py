"""Online subtype discovery inside one class and the subtype compactness loss.

Two ways to find subtypes: k-means when the subtype count is known, or
connected components of the reliability-path graph (edge iff squared
distance <= epsilon) keeping only components with more than ``m`` members.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .data import ConfigError
from .prototypes import sq_dists


@dataclass(frozen=True)
class SubgraphParams:
    epsilon: float = 1.0
    tau: float = 1.0
    m: int = 8

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if not self.tau >= 0:
            raise ConfigError("tau must be >= 0")
        if self.m < 1:
            raise ConfigError("m must be >= 1")


def kmeans(points, K: int, seed: int = 0, max_iter: int = 100, n_init: int = 10):
    """Lloyd's algorithm from k-means++ seeding.

    Returns ``(assignments, centroids)``. With ``n_init > 1`` the run with the
    lowest within-cluster SSE wins (first one on ties). Assignments always
    point at the nearest returned centroid, lowest index on ties.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    M = x.shape[0]
    if K < 1 or M < K:
        raise ConfigError(f"kmeans needs 1 <= K <= M, got K={K}, M={M}")
    rng = np.random.Generator(np.random.Philox(seed))
    best = None
    for _ in range(n_init):
        assign, cent = _lloyd(x, K, rng, max_iter)
        sse = float(((x - cent[assign]) ** 2).sum())
        if best is None or sse < best[0]:
            best = (sse, assign, cent)
    return best[1], best[2]


def _plusplus(x, K, rng):
    M = x.shape[0]
    idx = [int(rng.integers(M))]
    d2 = ((x - x[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            nxt = min(nxt, M - 1)
        else:
            nxt = int(rng.integers(M))
        idx.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[idx].copy()


def _lloyd(x, K, rng, max_iter):
    cent = _plusplus(x, K, rng)
    assign = np.argmin(sq_dists(x, cent), axis=1)
    for _ in range(max_iter):
        for k in range(K):
            members = assign == k
            if members.any():
                cent[k] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(((x - cent[assign]) ** 2).sum(axis=1)))
                cent[k] = x[far]
                assign[far] = k
        new = np.argmin(sq_dists(x, cent), axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
    return np.argmin(sq_dists(x, cent), axis=1), cent


def _components(points, epsilon: float) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    adj = csr_matrix(sq_dists(x, x) <= epsilon)
    _, labels = connected_components(adj, directed=False)
    return labels


def build_subgraphs(points, epsilon: float, m: int) -> list[np.ndarray]:
    """Reliability-path components with more than ``m`` members.

    Each component is a sorted index array; the list is ordered by each
    component's smallest index.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.shape[0] == 0:
        return []
    labels = _components(x, epsilon)
    comps = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    comps = [c for c in comps if len(c) > m]
    comps.sort(key=lambda c: c[0])
    return comps


@dataclass
class Pairing:
    links: list[tuple[int, int]]
    unmatched_source: list[int]
    unmatched_target: list[int]

    def target_to_source(self, n_target: int) -> np.ndarray:
        out = np.full(n_target, -1)
        for s, t in self.links:
            out[t] = s
        return out


def correspond_clusters(mu_s, mu_t) -> Pairing:
    """Greedy cross-domain matching, closest centroid pair first.

    Ties in distance go to the lexicographically smallest (source, target).
    """
    mu_s = np.atleast_2d(np.asarray(mu_s, dtype=np.float64))
    mu_t = np.atleast_2d(np.asarray(mu_t, dtype=np.float64))
    K, Kp = mu_s.shape[0], mu_t.shape[0]
    d2 = sq_dists(mu_s, mu_t)
    si, ti = np.meshgrid(np.arange(K), np.arange(Kp), indexing="ij")
    order = np.lexsort((ti.ravel(), si.ravel(), d2.ravel()))
    used_s, used_t, links = set(), set(), []
    for flat in order:
        s, t = int(si.flat[flat]), int(ti.flat[flat])
        if s in used_s or t in used_t:
            continue
        links.append((s, t))
        used_s.add(s)
        used_t.add(t)
        if len(links) == min(K, Kp):
            break
    return Pairing(
        links=links,
        unmatched_source=[s for s in range(K) if s not in used_s],
        unmatched_target=[t for t in range(Kp) if t not in used_t],
    )


def semi_hard_select(candidates, center, tau: float, epsilon: float) -> np.ndarray:
    """Targets within ``tau`` of ``center`` plus their reliability-path reach.

    Reachability only runs through other candidates. Returns sorted indices.
    """
    x = np.asarray(candidates, dtype=np.float64)
    if x.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    seeds = ((x - center) ** 2).sum(axis=1) <= tau
    if not seeds.any():
        return np.zeros(0, dtype=np.int64)
    labels = _components(x, epsilon)
    return np.flatnonzero(np.isin(labels, labels[seeds]))


def subtype_weights(counts_s, counts_t) -> np.ndarray:
    """Inverse square-root size weights, mean 1 over populated clusters."""
    total = np.asarray(counts_s, dtype=np.float64) + np.asarray(counts_t, dtype=np.float64)
    w = np.zeros_like(total)
    pos = total > 0
    if not pos.any():
        raise ValueError("need at least one populated cluster")
    w[pos] = 1.0 / np.sqrt(total[pos])
    w[pos] /= w[pos].mean()
    return w


@dataclass
class SubtypeClustering:
    """Subtype state of one class within one batch.

    ``assign_s``/``assign_t`` hold a cluster index per batch sample of this
    class (-1 = unassigned). Clusters with no source member are excluded from
    the loss.
    """

    assign_s: np.ndarray
    assign_t: np.ndarray
    mu_s: np.ndarray
    mu_t: np.ndarray
    mu_st: np.ndarray
    counts_s: np.ndarray
    counts_t: np.ndarray
    weights: np.ndarray
    fallback: bool = False

    @property
    def k(self) -> int:
        return self.mu_s.shape[0]

    @property
    def included(self) -> np.ndarray:
        return self.counts_s > 0


def _means(f, assign, K):
    counts = np.bincount(assign[assign >= 0], minlength=K)[:K] if len(assign) else np.zeros(K, dtype=int)
    mu = np.full((K, f.shape[1]), np.nan)
    for k in np.flatnonzero(counts):
        mu[k] = f[assign == k].mean(axis=0)
    return mu, counts


def finalize_clustering(f_s, assign_s, f_t, assign_t, K: int, pooled: bool = False,
                        use_weights: bool = True, fallback: bool = False) -> SubtypeClustering:
    """Compute subtype centroids, combined centroids and weights.

    The combined centroid is the midpoint of the source and target subtype
    centroids, or the source centroid when no target joined the subtype.
    ``pooled`` averages all member features instead.
    """
    assign_s = np.asarray(assign_s, dtype=np.int64)
    assign_t = np.asarray(assign_t, dtype=np.int64)
    mu_s, counts_s = _means(f_s, assign_s, K)
    mu_t, counts_t = _means(f_t, assign_t, K)
    # targets in a cluster without source members cannot be anchored
    orphan = (counts_s == 0) & (counts_t > 0)
    if orphan.any():
        assign_t = np.where(np.isin(assign_t, np.flatnonzero(orphan)), -1, assign_t)
        mu_t, counts_t = _means(f_t, assign_t, K)
    mu_st = mu_s.copy()
    both = counts_t > 0
    if pooled:
        for k in np.flatnonzero(both):
            total = f_s[assign_s == k].sum(axis=0) + f_t[assign_t == k].sum(axis=0)
            mu_st[k] = total / (counts_s[k] + counts_t[k])
    else:
        mu_st[both] = (mu_s[both] + mu_t[both]) / 2.0
    if counts_s.sum() == 0:
        weights = np.zeros(K)
    elif use_weights:
        weights = subtype_weights(counts_s, counts_t)
        weights[counts_s == 0] = 0.0
    else:
        weights = (counts_s > 0).astype(np.float64)
    return SubtypeClustering(assign_s, assign_t, mu_s, mu_t, mu_st, counts_s, counts_t, weights, fallback)


def cluster_kmeans(f_s, f_t, K: int, seed: int = 0, n_init: int = 1) -> Optional[tuple]:
    """Separate k-means in each domain, target clusters linked to source ones.

    Returns ``(assign_s, assign_t, K_source)`` or None if the source side has
    no samples. Either side runs with ``min(K, samples)`` clusters.
    """
    if len(f_s) == 0:
        return None
    ks = min(K, len(f_s))
    assign_s, mu_s = kmeans(f_s, ks, seed=seed, n_init=n_init)
    assign_t = np.full(len(f_t), -1, dtype=np.int64)
    if len(f_t):
        kt = min(K, len(f_t))
        raw_t, mu_t = kmeans(f_t, kt, seed=seed + 1, n_init=n_init)
        assign_t = correspond_clusters(mu_s, mu_t).target_to_source(kt)[raw_t]
    return assign_s, assign_t, ks


def cluster_subgraph(f_s, f_t, params: SubgraphParams, use_tau: bool = True) -> Optional[tuple]:
    """Source sub-graphs, then nearest-centroid target labels refined by tau.

    Returns ``(assign_s, assign_t, K)`` or None when no component survives
    the size filter.
    """
    comps = build_subgraphs(f_s, params.epsilon, params.m)
    if not comps:
        return None
    K = len(comps)
    assign_s = np.full(len(f_s), -1, dtype=np.int64)
    for k, comp in enumerate(comps):
        assign_s[comp] = k
    mu_s = np.stack([f_s[c].mean(axis=0) for c in comps])
    assign_t = select_targets(f_t, mu_s, params, use_tau)
    return assign_s, assign_t, K


def select_targets(f_t, mu_s, params: SubgraphParams, use_tau: bool = True) -> np.ndarray:
    """Provisional nearest-subtype labels, kept only if semi-hard mining picks them."""
    assign_t = np.full(len(f_t), -1, dtype=np.int64)
    if len(f_t) == 0:
        return assign_t
    provisional = np.argmin(sq_dists(f_t, mu_s), axis=1)
    if not use_tau:
        return provisional
    for k in range(mu_s.shape[0]):
        cand = np.flatnonzero(provisional == k)
        chosen = semi_hard_select(f_t[cand], mu_s[k], params.tau, params.epsilon)
        assign_t[cand[chosen]] = k
    return assign_t


@dataclass
class CompactnessLoss:
    value: float
    grad_s: np.ndarray
    grad_t: np.ndarray
    per_subtype: np.ndarray = field(default=None)


def subtype_compactness_loss(clustering: SubtypeClustering, f_s, f_t) -> CompactnessLoss:
    """Weighted mean over subtypes of per-domain mean squared distance to mu_st.

    ``mu_st`` is treated as a constant. Subtypes without source members are
    skipped; a subtype without targets contributes its source term only.
    """
    f_s = np.asarray(f_s, dtype=np.float64)
    f_t = np.asarray(f_t, dtype=np.float64)
    grad_s = np.zeros_like(f_s)
    grad_t = np.zeros_like(f_t)
    inc = np.flatnonzero(clustering.included)
    per = np.full(clustering.k, np.nan)
    if len(inc) == 0:
        return CompactnessLoss(0.0, grad_s, grad_t, per)
    total = 0.0
    for k in inc:
        mu = clustering.mu_st[k]
        w = clustering.weights[k] / len(inc)
        lk = 0.0
        for f, assign, grad in ((f_s, clustering.assign_s, grad_s), (f_t, clustering.assign_t, grad_t)):
            rows = np.flatnonzero(assign == k)
            if len(rows) == 0:
                continue
            diff = f[rows] - mu
            lk += float(np.einsum("ij,ij->", diff, diff)) / len(rows)
            grad[rows] = 2.0 * diff * (w / len(rows))
        per[k] = lk
        total += w * lk
    return CompactnessLoss(total, grad_s, grad_t, per)
