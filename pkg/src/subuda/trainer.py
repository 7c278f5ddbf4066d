"""Training loop for subtype-aware domain adaptation.

Each step splits into two phases. :func:`plan_step` takes the batch
features and freezes every discrete or stop-gradient quantity: pseudo
labels, subtype assignments, combined subtype centroids, weights, and the
centroids the cross-entropy is measured against. :meth:`StepPlan.evaluate`
is then a smooth function of the features that returns the loss breakdown
and its feature gradient. The same plan is what the end-to-end gradient
check differentiates numerically.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import ConfigError, Dataset
from .encoder import (
    EncoderParams,
    GradCheckReport,
    backward,
    forward,
    grad_check,
    init_encoder,
    update_running_stats,
)
from .evaluation import MetricRow, accuracy, multiclass_auc, proxy_a_distance
from .prototypes import (
    CentroidBank,
    ContractError,
    batch_centroids,
    class_ce_loss,
    class_matching_loss,
    centroid_grad_to_features,
    prototypical_probs,
    sq_dists,
)
from .subtyping import (
    SubgraphParams,
    SubtypeClustering,
    build_subgraphs,
    cluster_kmeans,
    cluster_subgraph,
    finalize_clustering,
    kmeans,
    select_targets,
    subtype_compactness_loss,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.5
    kn: Optional[tuple[int, ...]] = (4,)  # None selects the sub-graph scheme
    epsilon: float = 1.0
    tau: float = 1.0
    m: int = 8
    lr: float = 1e-2
    momentum: float = 0.9
    batch: int = 64  # both domains together, split evenly
    epochs: int = 30
    seed: int = 0
    ema: float = 0.9
    hidden: tuple[int, ...] = (32, 32)
    head_hidden: int = 32
    d_head: int = 16
    dropout: float = 0.0  # 0.5 diverges with the squared-distance classifier at lr 1e-2
    disable_omega: bool = False
    disable_tau: bool = False
    pooled_mu_st: bool = False
    disable_head: bool = False
    source_only_subtypes: bool = False
    test_fraction: float = 0.2
    kmeans_n_init: int = 1

    def __post_init__(self):
        if self.kn is not None:
            self.kn = tuple(int(k) for k in self.kn)

    @property
    def subtype_mode(self) -> str:
        return "subgraph" if self.kn is None else "kmeans"

    @property
    def subgraph(self) -> SubgraphParams:
        return SubgraphParams(self.epsilon, self.tau, self.m)

    def kn_for(self, n: int) -> int:
        return self.kn[0] if len(self.kn) == 1 else self.kn[n]

    def validate(self, n_classes: Optional[int] = None) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.batch < 2:
            raise ConfigError("batch must be >= 2")
        if self.kn is not None:
            if not self.kn or any(k < 1 for k in self.kn):
                raise ConfigError("every kn must be >= 1")
            if n_classes is not None and len(self.kn) not in (1, n_classes):
                raise ConfigError(f"kn needs 1 or {n_classes} entries, got {len(self.kn)}")
        self.subgraph  # validates epsilon, tau, m
        if not 0.0 <= self.ema < 1.0:
            raise ConfigError("ema must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0 and lr > 0")


@dataclass
class LossBreakdown:
    ce: float
    cls: float
    sub: float
    total: float
    cls_per_class: np.ndarray
    sub_per_class: np.ndarray
    clusters: np.ndarray  # subtype clusters used per class, 0 if skipped

    def recomposed(self, alpha: float, beta: float) -> float:
        return self.ce + alpha * self.cls + beta * self.sub


@dataclass
class StepPlan:
    n_source: int
    labels_s: np.ndarray
    pseudo_t: np.ndarray
    n_classes: int
    rho: float
    mem_s: np.ndarray
    mem_t: np.ndarray
    was_init_s: np.ndarray
    was_init_t: np.ndarray
    ce_centroids: np.ndarray
    ce_init: np.ndarray
    clusterings: dict[int, tuple[np.ndarray, np.ndarray, SubtypeClustering]]
    alpha: float
    beta: float
    fallbacks: int = 0
    skipped: int = 0

    def _blend(self, mem, was_init, batch, counts):
        new = mem.copy()
        for n in np.flatnonzero(counts):
            new[n] = self.rho * mem[n] + (1.0 - self.rho) * batch[n] if was_init[n] else batch[n]
        factor = np.where(counts > 0, np.where(was_init, 1.0 - self.rho, 1.0), 0.0)
        return new, factor

    def evaluate(self, feats):
        """Loss breakdown, dL/dfeatures and the updated centroid bank."""
        f_s, f_t = feats[: self.n_source], feats[self.n_source:]
        N = self.n_classes
        ce, g_s = class_ce_loss(f_s, self.labels_s, self.ce_centroids, self.ce_init)
        g_t = np.zeros_like(f_t)

        bs, counts_s = batch_centroids(f_s, self.labels_s, N)
        bt, counts_t = batch_centroids(f_t, self.pseudo_t, N)
        c_s, factor_s = self._blend(self.mem_s, self.was_init_s, bs, counts_s)
        c_t, factor_t = self._blend(self.mem_t, self.was_init_t, bt, counts_t)
        bank = CentroidBank(c_s, c_t, self.was_init_s | (counts_s > 0),
                            self.was_init_t | (counts_t > 0), self.rho)
        match = class_matching_loss(bank, mask=counts_s > 0)
        g_s = g_s + self.alpha * centroid_grad_to_features(self.labels_s, counts_s, match.grad_source, factor_s)
        g_t = g_t + self.alpha * centroid_grad_to_features(self.pseudo_t, counts_t, match.grad_target, factor_t)

        sub_per_class = np.full(N, np.nan)
        clusters = np.zeros(N, dtype=np.int64)
        active = [n for n, (_, _, cl) in self.clusterings.items() if cl.included.any()]
        for n in sorted(self.clusterings):
            rows_s, rows_t, cl = self.clusterings[n]
            clusters[n] = int(cl.included.sum())
            if n not in active:
                continue
            res = subtype_compactness_loss(cl, f_s[rows_s], f_t[rows_t])
            sub_per_class[n] = res.value
            scale = self.beta / len(active)
            g_s[rows_s] += scale * res.grad_s
            g_t[rows_t] += scale * res.grad_t
        sub = float(np.mean(sub_per_class[active])) if active else 0.0

        total = ce + self.alpha * match.value + self.beta * sub
        bd = LossBreakdown(ce, match.value, sub, total, match.per_class, sub_per_class, clusters)
        return bd, np.vstack([g_s, g_t]), bank


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _class_clustering(f_s, f_t, config: TrainConfig, n: int, step: int):
    """Subtype clustering for one class, falling back to a single subtype."""
    use_tau = not config.disable_tau
    fallback = False
    if config.subtype_mode == "kmeans":
        res = cluster_kmeans(f_s, f_t, config.kn_for(n),
                             seed=_derived_seed(config.seed, step, n), n_init=config.kmeans_n_init)
    else:
        res = cluster_subgraph(f_s, f_t, config.subgraph, use_tau=use_tau)
        if res is None:
            fallback = True
            assign_t = select_targets(f_t, f_s.mean(axis=0, keepdims=True), config.subgraph, use_tau)
            res = (np.zeros(len(f_s), dtype=np.int64), assign_t, 1)
    assign_s, assign_t, K = res
    if config.source_only_subtypes:
        assign_t = np.full(len(f_t), -1, dtype=np.int64)
    cl = finalize_clustering(f_s, assign_s, f_t, assign_t, K, pooled=config.pooled_mu_st,
                             use_weights=not config.disable_omega, fallback=fallback)
    return cl


def plan_step(feats, labels_s, n_source: int, bank: CentroidBank, config: TrainConfig, step: int = 0) -> StepPlan:
    """Freeze pseudo labels, subtype structure and stop-gradient centroids."""
    f_s, f_t = feats[:n_source], feats[n_source:]
    labels_s = np.asarray(labels_s)
    N = bank.n_classes
    tmp = bank.copy()
    bs, counts_s = batch_centroids(f_s, labels_s, N)
    tmp.ema_update("s", bs, counts_s)
    known = np.flatnonzero(tmp.init_s)
    if len(f_t):
        pseudo = known[np.argmin(sq_dists(f_t, tmp.c_s[known]), axis=1)]
    else:
        pseudo = np.zeros(0, dtype=np.int64)

    clusterings = {}
    fallbacks = 0
    present = np.flatnonzero(counts_s)
    if config.beta > 0:
        for n in present:
            rows_s = np.flatnonzero(labels_s == n)
            rows_t = np.flatnonzero(pseudo == n)
            cl = _class_clustering(f_s[rows_s], f_t[rows_t], config, int(n), step)
            fallbacks += int(cl.fallback)
            clusterings[int(n)] = (rows_s, rows_t, cl)
    return StepPlan(
        n_source=n_source,
        labels_s=labels_s,
        pseudo_t=pseudo,
        n_classes=N,
        rho=bank.ema_momentum,
        mem_s=bank.c_s.copy(),
        mem_t=bank.c_t.copy(),
        was_init_s=bank.init_s.copy(),
        was_init_t=bank.init_t.copy(),
        ce_centroids=tmp.c_s.copy(),
        ce_init=tmp.init_s.copy(),
        clusterings=clusterings,
        alpha=config.alpha,
        beta=config.beta,
        fallbacks=fallbacks,
        skipped=int(N - len(present)),
    )


@dataclass
class TrainState:
    params: EncoderParams
    bank: CentroidBank
    velocity: dict[str, np.ndarray]
    step: int = 0
    skipped_classes: int = 0
    fallbacks: int = 0


def init_state(input_dim: int, n_classes: int, config: TrainConfig) -> TrainState:
    params = init_encoder(
        input_dim,
        hidden=tuple(config.hidden),
        head_hidden=config.head_hidden,
        d_head=config.d_head,
        dropout=config.dropout,
        use_head=not config.disable_head,
        seed=_derived_seed(config.seed, 0),
    )
    bank = CentroidBank.empty(n_classes, params.out_dim, config.ema)
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    return TrainState(params, bank, velocity)


def train_step(state: TrainState, batch_s, labels_s, batch_t, config: TrainConfig, rng) -> LossBreakdown:
    """One SGD-with-momentum update on a source batch and a target batch."""
    x = np.vstack([batch_s, batch_t])
    feats, cache = forward(state.params, x, mode="train", rng=rng)
    plan = plan_step(feats, labels_s, len(batch_s), state.bank, config, state.step)
    bd, upstream, bank = plan.evaluate(feats)
    if not np.isfinite(bd.total):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    grads = backward(cache, upstream)
    update_running_stats(state.params, cache)
    for name, g in grads.items():
        v = state.velocity[name]
        v *= config.momentum
        v += g
        state.params.tensors[name] -= config.lr * v
    state.params.version += 1
    state.bank = bank
    state.step += 1
    state.skipped_classes += plan.skipped
    state.fallbacks += plan.fallbacks
    return bd


def objective_grad_check(params: EncoderParams, bank: CentroidBank, batch_s, labels_s, batch_t,
                         config: TrainConfig, tolerance: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of the full objective in deterministic mode.

    The plan is frozen at the unperturbed eval-mode features; perturbed
    parameters change the loss only through the features.
    """
    x = np.vstack([batch_s, batch_t])
    feats, _ = forward(params, x, mode="eval")
    plan = plan_step(feats, labels_s, len(batch_s), bank, config)

    def loss_fn(f):
        bd, g, _ = plan.evaluate(f)
        return bd.total, g

    return grad_check(params, x, loss_fn, tolerance=tolerance)


def embed(params: EncoderParams, x, chunk: int = 4096) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return np.zeros((0, params.out_dim))
    return np.vstack([forward(params, x[i:i + chunk], mode="eval")[0] for i in range(0, len(x), chunk)])


def predict(params: EncoderParams, bank: CentroidBank, x):
    """Class labels and prototypical probabilities against source centroids."""
    probs = prototypical_probs(embed(params, x), bank.source())
    probs = np.atleast_2d(probs)
    return np.argmax(probs, axis=1), probs


def prototype_bank(params: EncoderParams, dataset: Dataset, source_idx, target_idx, ema: float = 0.9) -> CentroidBank:
    """Centroids of eval-mode training features; targets use pseudo labels."""
    n = dataset.n_classes
    f_s = embed(params, dataset.features[source_idx])
    bank = CentroidBank.empty(n, params.out_dim, ema)
    cs, counts = batch_centroids(f_s, dataset.class_label[source_idx], n)
    bank.ema_update("s", cs, counts)
    if len(target_idx) and bank.init_s.any():
        f_t = embed(params, dataset.features[target_idx])
        known = np.flatnonzero(bank.init_s)
        pseudo = known[np.argmin(sq_dists(f_t, bank.c_s[known]), axis=1)]
        ct, counts_t = batch_centroids(f_t, pseudo, n)
        bank.ema_update("t", ct, counts_t)
    return bank


@dataclass
class Split:
    source: np.ndarray
    target_train: np.ndarray
    target_test: np.ndarray


def split_dataset(dataset: Dataset, config: TrainConfig) -> Split:
    """Hold out a seeded fraction of target samples for testing.

    With ``test_fraction == 0`` the labelled training targets double as the
    test set.
    """
    src = np.flatnonzero(dataset.source_mask)
    tgt = np.flatnonzero(dataset.target_mask)
    rng = np.random.Generator(np.random.Philox(_derived_seed(config.seed, 1)))
    perm = tgt[rng.permutation(len(tgt))]
    n_test = int(round(config.test_fraction * len(tgt)))
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    if n_test == 0:
        test = train
    test = test[dataset.class_label[test] >= 0]
    return Split(src, train, test)


def evaluate_model(params: EncoderParams, bank: CentroidBank, dataset: Dataset, split: Split, seed: int = 0) -> dict:
    out = dict(acc=np.nan, auc=np.nan, a_dist=np.nan)
    if len(split.target_test):
        labels = dataset.class_label[split.target_test]
        pred, probs = predict(params, bank, dataset.features[split.target_test])
        out["acc"] = accuracy(pred, labels)
        try:
            out["auc"] = multiclass_auc(probs, labels)
        except ValueError:
            pass
    f_s = embed(params, dataset.features[split.source])
    f_t = embed(params, dataset.features[split.target_train])
    if len(f_s) >= 10 and len(f_t) >= 10:
        out["a_dist"] = proxy_a_distance(f_s, f_t, seed=seed)
    return out


@dataclass
class FitResult:
    params: EncoderParams
    bank: CentroidBank
    history: list[MetricRow] = field(default_factory=list)
    state: Optional[TrainState] = None
    split: Optional[Split] = None


def _target_stream(rng, idx, size):
    while True:
        perm = idx[rng.permutation(len(idx))]
        for i in range(0, len(perm) - size + 1, size):
            yield perm[i:i + size]


def fit(dataset: Dataset, config: TrainConfig,
        on_epoch: Optional[Callable[[int, TrainState, MetricRow], None]] = None) -> FitResult:
    """Train from scratch; one metric row per epoch.

    On return the dataset's pseudo-class column holds the final model's
    labels for every target sample.
    """
    config.validate(dataset.n_classes)
    split = split_dataset(dataset, config)
    if len(split.source) == 0 or len(split.target_train) == 0:
        raise ConfigError("dataset needs samples from both domains")
    state = init_state(dataset.input_dim, dataset.n_classes, config)
    rng = np.random.Generator(np.random.Philox(_derived_seed(config.seed, 2)))
    per = config.batch // 2
    bs = min(per, len(split.source))
    bt = min(per, len(split.target_train))
    targets = _target_stream(rng, split.target_train, bt)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = split.source[rng.permutation(len(split.source))]
        parts = []
        for i in range(0, len(order) - bs + 1, bs):
            idx_s = order[i:i + bs]
            idx_t = next(targets)
            bd = train_step(state, dataset.features[idx_s], dataset.class_label[idx_s],
                            dataset.features[idx_t], config, rng)
            parts.append(bd)
        bank = prototype_bank(state.params, dataset, split.source, split.target_train, config.ema)
        metrics = evaluate_model(state.params, bank, dataset, split, seed=_derived_seed(config.seed, 3, epoch))
        row = MetricRow(
            epoch=epoch,
            loss_total=float(np.mean([p.total for p in parts])),
            loss_ce=float(np.mean([p.ce for p in parts])),
            loss_class=float(np.mean([p.cls for p in parts])),
            loss_sub=float(np.mean([p.sub for p in parts])),
            acc=metrics["acc"],
            auc=metrics["auc"],
            a_dist=metrics["a_dist"],
            clusters=";".join(str(int(c)) for c in parts[-1].clusters),
        )
        history.append(row)
        log.debug("epoch %d: %s", epoch, row)
        if on_epoch is not None:
            on_epoch(epoch, state, row)

    if config.epochs == 0:
        return FitResult(state.params, state.bank, history, state, split)
    bank = prototype_bank(state.params, dataset, split.source, split.target_train, config.ema)
    label_dataset(state.params, bank, dataset, config)
    return FitResult(state.params, bank, history, state, split)


def label_dataset(params: EncoderParams, bank: CentroidBank, dataset: Dataset, config: TrainConfig) -> None:
    """Replace the pseudo-label columns from the given model.

    Targets get the nearest source class. Subtypes come from clustering each
    class's source features once more over the whole dataset; targets take
    the nearest source subtype of their pseudo class.
    """
    feats = embed(params, dataset.features)
    src = dataset.source_mask
    tgt = dataset.target_mask
    pseudo_class = np.full(len(dataset), -1, dtype=np.int64)
    pseudo_class[tgt] = np.argmin(sq_dists(feats[tgt], bank.source()), axis=1)
    pseudo_sub = np.full(len(dataset), -1, dtype=np.int64)
    for n in range(dataset.n_classes):
        rows_s = np.flatnonzero(src & (dataset.class_label == n))
        rows_t = np.flatnonzero(tgt & (pseudo_class == n))
        if len(rows_s) == 0:
            continue
        if config.subtype_mode == "kmeans":
            k = min(config.kn_for(n), len(rows_s))
            assign, mu = kmeans(feats[rows_s], k, seed=_derived_seed(config.seed, 4, n))
        else:
            comps = build_subgraphs(feats[rows_s], config.epsilon, config.m)
            if not comps:
                continue
            assign = np.full(len(rows_s), -1, dtype=np.int64)
            for k, c in enumerate(comps):
                assign[c] = k
            mu = np.stack([feats[rows_s][c].mean(axis=0) for c in comps])
        pseudo_sub[rows_s] = assign
        if len(rows_t):
            pseudo_sub[rows_t] = np.argmin(sq_dists(feats[rows_t], mu), axis=1)
    dataset.pseudo_class = pseudo_class
    dataset.pseudo_subtype = pseudo_sub

