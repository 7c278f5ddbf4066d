"""Samples, datasets, the synthetic shifted-mixture generator and CSV I/O."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SOURCE = "s"
TARGET = "t"
UNKNOWN = -1


class ConfigError(ValueError):
    """Invalid generator or training configuration."""


class DatasetParseError(ValueError):
    """A dataset CSV did not match the expected schema."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


@dataclass(frozen=True)
class Sample:
    domain: str
    features: np.ndarray
    class_label: Optional[int] = None
    subtype_label: Optional[int] = None
    pseudo_class: Optional[int] = None
    pseudo_subtype: Optional[int] = None


def _optional(value: int) -> Optional[int]:
    return None if value < 0 else int(value)


@dataclass(eq=False)
class Dataset:
    """Column store of samples from both domains.

    Missing integer labels are stored as -1. Pseudo labels are the only
    columns the trainer writes to, and it always replaces a whole column.
    """

    domain: np.ndarray
    features: np.ndarray
    class_label: np.ndarray
    subtype_label: np.ndarray
    n_classes: int
    pseudo_class: np.ndarray = field(default=None)
    pseudo_subtype: np.ndarray = field(default=None)

    def __post_init__(self):
        self.domain = np.asarray(self.domain, dtype="<U1")
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        m = self.features.shape[0]
        self.class_label = np.asarray(self.class_label, dtype=np.int64)
        self.subtype_label = np.asarray(self.subtype_label, dtype=np.int64)
        if self.pseudo_class is None:
            self.pseudo_class = np.full(m, UNKNOWN, dtype=np.int64)
        if self.pseudo_subtype is None:
            self.pseudo_subtype = np.full(m, UNKNOWN, dtype=np.int64)
        for name in ("domain", "class_label", "subtype_label", "pseudo_class", "pseudo_subtype"):
            if getattr(self, name).shape != (m,):
                raise ValueError(f"{name} must have length {m}")
        if not np.all(np.isin(self.domain, (SOURCE, TARGET))):
            raise ValueError("domain entries must be 's' or 't'")
        if np.any(self.class_label >= self.n_classes):
            raise ValueError("class label out of range")
        if np.any(self.class_label[self.domain == SOURCE] < 0):
            raise ValueError("every source sample needs a class label")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.domain, other.domain)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.class_label, other.class_label)
            and np.array_equal(self.subtype_label, other.subtype_label)
            and np.array_equal(self.pseudo_class, other.pseudo_class)
            and np.array_equal(self.pseudo_subtype, other.pseudo_subtype)
        )

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def source_mask(self) -> np.ndarray:
        return self.domain == SOURCE

    @property
    def target_mask(self) -> np.ndarray:
        return self.domain == TARGET

    def sample(self, i: int) -> Sample:
        return Sample(
            domain="source" if self.domain[i] == SOURCE else "target",
            features=self.features[i].copy(),
            class_label=_optional(self.class_label[i]),
            subtype_label=_optional(self.subtype_label[i]),
            pseudo_class=_optional(self.pseudo_class[i]),
            pseudo_subtype=_optional(self.pseudo_subtype[i]),
        )

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            domain=self.domain[index],
            features=self.features[index],
            class_label=self.class_label[index],
            subtype_label=self.subtype_label[index],
            n_classes=self.n_classes,
            pseudo_class=self.pseudo_class[index],
            pseudo_subtype=self.pseudo_subtype[index],
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.n_classes).encode())
        for arr in (self.domain, self.class_label, self.subtype_label):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class SyntheticSpec:
    """Per-(class, subtype) isotropic Gaussians with domain-specific shifts.

    Arrays are indexed ``[class, subtype]``; every class has the same number
    of subtype slots (give a slot zero mass to drop it).
    """

    source_means: np.ndarray  # (N, K, D)
    shifts: np.ndarray  # (N, K, D), target mean = source mean + shift
    scales: np.ndarray  # (N, K)
    source_props: np.ndarray  # (N, K)
    target_props: np.ndarray  # (N, K)
    n_source: int
    n_target: int
    seed: int = 0

    def __post_init__(self):
        self.source_means = np.asarray(self.source_means, dtype=np.float64)
        self.shifts = np.asarray(self.shifts, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.source_props = np.asarray(self.source_props, dtype=np.float64)
        self.target_props = np.asarray(self.target_props, dtype=np.float64)

    @property
    def n_classes(self) -> int:
        return self.source_means.shape[0]

    @property
    def n_subtypes(self) -> int:
        return self.source_means.shape[1]

    @property
    def dim(self) -> int:
        return self.source_means.shape[2]

    def validate(self) -> None:
        if self.source_means.ndim != 3:
            raise ConfigError("source_means must have shape (classes, subtypes, dim)")
        grid = self.source_means.shape[:2]
        if self.shifts.shape != self.source_means.shape:
            raise ConfigError("shifts must match source_means in shape")
        for name in ("scales", "source_props", "target_props"):
            if getattr(self, name).shape != grid:
                raise ConfigError(f"{name} must have shape {grid}")
        if not np.all(self.scales > 0):
            raise ConfigError("all scales must be positive")
        for name in ("source_props", "target_props"):
            props = getattr(self, name)
            if np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
                raise ConfigError(f"{name} must be non-negative and sum to 1")
        if self.n_source < 0 or self.n_target < 0:
            raise ConfigError("sample counts must be non-negative")


def box_muller(uniforms: np.ndarray) -> np.ndarray:
    """Map an even-length stream of U[0,1) draws to standard normals."""
    u1 = 1.0 - uniforms[0::2]  # (0, 1], keeps the log finite
    u2 = uniforms[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).ravel()


def _draw_domain(rng, spec: SyntheticSpec, count: int, props: np.ndarray, shifted: bool):
    n_sub = spec.n_subtypes
    flat = props.ravel()
    cdf = np.cumsum(flat)
    u = rng.random(count)
    cells = np.searchsorted(cdf, u * cdf[-1], side="right")
    # float round-off at the top of the cdf must not land on a zero-mass cell
    last = int(np.flatnonzero(flat > 0)[-1])
    cells = np.minimum(cells, last)
    n_draws = count * spec.dim
    normals = box_muller(rng.random(n_draws + n_draws % 2))[:n_draws].reshape(count, spec.dim)
    cls, sub = np.divmod(cells, n_sub)
    means = spec.source_means[cls, sub]
    if shifted:
        means = means + spec.shifts[cls, sub]
    feats = means + spec.scales[cls, sub][:, None] * normals
    return feats, cls, sub


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    rng = np.random.Generator(np.random.Philox(spec.seed))
    fs, cs, ss = _draw_domain(rng, spec, spec.n_source, spec.source_props, shifted=False)
    ft, ct, st = _draw_domain(rng, spec, spec.n_target, spec.target_props, shifted=True)
    return Dataset(
        domain=np.array([SOURCE] * spec.n_source + [TARGET] * spec.n_target),
        features=np.concatenate([fs, ft]).reshape(-1, spec.dim),
        class_label=np.concatenate([cs, ct]),
        subtype_label=np.concatenate([ss, st]),
        n_classes=spec.n_classes,
    )


def shifted_task_spec(
    n_classes: int = 2,
    n_subtypes: int = 4,
    dim: int = 8,
    class_sep: float = 5.0,
    subtype_spread: float = 4.0,
    sigma: float = 1.0,
    shift: float = 2.0,
    coherence: float = 1.0,
    target_props: Sequence[float] = (0.4, 0.3, 0.2, 0.1),
    n_source: int = 400,
    n_target: int = 1000,
    layout_seed: Optional[int] = None,
    seed: int = 0,
) -> SyntheticSpec:
    """Build a task with subtype conditional shift and subtype label shift.

    Class anchors lie ``class_sep * sigma`` apart along orthonormal axes;
    subtype means sit ``subtype_spread * sigma`` from their anchor in random
    directions orthogonal to every anchor axis. Each target subtype moves by
    exactly ``shift * sigma``. The direction blends one axis shared by all
    classes (from class 0 towards class 1, weight ``coherence``) with a
    random per-subtype direction, so a shared shift carries every target
    class the same way and the source decision boundary ends up misplaced.
    Source subtypes are uniform within a class, target subtypes follow
    ``target_props``; both domains have balanced classes. ``layout_seed``
    fixes the geometry (defaults to ``seed``), ``seed`` the draws.
    """
    if len(target_props) != n_subtypes:
        raise ConfigError("target_props needs one entry per subtype")
    if n_classes > dim:
        raise ConfigError("need dim >= n_classes")
    lay = np.random.Generator(np.random.Philox(seed if layout_seed is None else layout_seed))
    frame, _ = np.linalg.qr(lay.standard_normal((dim, dim)))
    axes = frame.T[:n_classes]
    anchors = axes * (class_sep * sigma / np.sqrt(2.0))
    anchors -= anchors.mean(axis=0)

    def orth_unit(*shape):
        v = lay.standard_normal(shape + (dim,))
        v -= (v @ axes.T) @ axes
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    means = anchors[:, None, :] + orth_unit(n_classes, n_subtypes) * subtype_spread * sigma
    if n_classes > 1:
        common = anchors[1] - anchors[0]
        common /= np.linalg.norm(common)
    else:
        common = frame.T[-1]
    per_subtype = lay.standard_normal((n_classes, n_subtypes, dim))
    per_subtype /= np.linalg.norm(per_subtype, axis=-1, keepdims=True)
    mix = coherence * common + (1.0 - coherence) * per_subtype
    shifts = mix / np.linalg.norm(mix, axis=-1, keepdims=True) * shift * sigma
    tp = np.asarray(target_props, dtype=np.float64)
    tp = np.tile(tp / tp.sum() / n_classes, (n_classes, 1))
    sp = np.full((n_classes, n_subtypes), 1.0 / (n_classes * n_subtypes))
    return SyntheticSpec(
        source_means=means,
        shifts=shifts,
        scales=np.full((n_classes, n_subtypes), sigma),
        source_props=sp,
        target_props=tp,
        n_source=n_source,
        n_target=n_target,
        seed=seed,
    )


CSV_FIXED = ("domain", "class", "subtype")


def save_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    header = list(CSV_FIXED) + [f"f{j}" for j in range(dataset.input_dim)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(dataset)):
            writer.writerow(
                [dataset.domain[i], int(dataset.class_label[i]), int(dataset.subtype_label[i])]
                + [repr(float(v)) for v in dataset.features[i]]
            )


def load_csv(path, n_classes: Optional[int] = None) -> Dataset:
    """Read a dataset CSV; ``n_classes`` defaults to the largest class + 1."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetParseError(0, "empty file")
    header = rows[0]
    dim = len(header) - len(CSV_FIXED)
    expected = list(CSV_FIXED) + [f"f{j}" for j in range(dim)]
    if dim < 1 or header != expected:
        raise DatasetParseError(0, "header must be domain,class,subtype,f0,...,f{D-1}")
    domains, classes, subtypes, feats = [], [], [], []
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise DatasetParseError(r, f"expected {len(header)} fields, got {len(row)}")
        dom = row[0]
        if dom not in (SOURCE, TARGET):
            raise DatasetParseError(r, f"domain must be 's' or 't', got {dom!r}")
        try:
            cls, sub = int(row[1]), int(row[2])
        except ValueError:
            raise DatasetParseError(r, "class and subtype must be integers") from None
        if cls < UNKNOWN or sub < UNKNOWN:
            raise DatasetParseError(r, "labels must be >= -1")
        if dom == SOURCE and cls == UNKNOWN:
            raise DatasetParseError(r, "source rows need a class")
        if n_classes is not None and cls >= n_classes:
            raise DatasetParseError(r, f"class {cls} >= n_classes {n_classes}")
        try:
            vec = [float(v) for v in row[3:]]
        except ValueError:
            raise DatasetParseError(r, "non-numeric feature") from None
        domains.append(dom)
        classes.append(cls)
        subtypes.append(sub)
        feats.append(vec)
    if n_classes is None:
        n_classes = max(classes, default=-1) + 1
    return Dataset(
        domain=np.array(domains, dtype="<U1"),
        features=np.array(feats, dtype=np.float64).reshape(len(feats), dim),
        class_label=np.array(classes, dtype=np.int64),
        subtype_label=np.array(subtypes, dtype=np.int64),
        n_classes=n_classes,
    )

