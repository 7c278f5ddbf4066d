import math

import numpy as np
import pytest

from subuda.data import (
    ConfigError,
    Dataset,
    DatasetParseError,
    SyntheticSpec,
    generate_synthetic,
    load_csv,
    save_csv,
    shifted_task_spec,
)


def two_subtype_spec(n=1000, seed=0):
    return SyntheticSpec(
        source_means=[[[-5.0], [5.0]]],
        shifts=np.zeros((1, 2, 1)),
        scales=[[0.1, 0.1]],
        source_props=[[0.5, 0.5]],
        target_props=[[0.5, 0.5]],
        n_source=n,
        n_target=0,
        seed=seed,
    )


def test_binomial_counts_for_balanced_subtypes():
    ds = generate_synthetic(two_subtype_spec())
    counts = np.bincount(ds.subtype_label, minlength=2)
    # 1000 * 0.5 +- 3 * sqrt(1000 * 0.25) = [452.6, 547.4]
    assert all(450 <= c <= 550 for c in counts)
    near = np.where(ds.subtype_label == 0, -5.0, 5.0)
    assert np.all(np.abs(ds.features[:, 0] - near) < 1.0)


def test_zero_shift_domains_agree():
    spec = shifted_task_spec(shift=0.0, target_props=(0.25, 0.25, 0.25, 0.25),
                             n_source=4000, n_target=4000, seed=3)
    ds = generate_synthetic(spec)
    for n in range(2):
        for k in range(4):
            s = ds.features[ds.source_mask & (ds.class_label == n) & (ds.subtype_label == k)]
            t = ds.features[ds.target_mask & (ds.class_label == n) & (ds.subtype_label == k)]
            bound = 3.0 * 1.0 / math.sqrt(min(len(s), len(t)))
            assert np.all(np.abs(s.mean(axis=0) - t.mean(axis=0)) <= 2 * bound)


def test_zero_probability_subtype_never_drawn():
    spec = shifted_task_spec(target_props=(0.5, 0.5, 0.0, 0.0), n_target=2000)
    ds = generate_synthetic(spec)
    sub_t = ds.subtype_label[ds.target_mask]
    assert not np.isin(sub_t, [2, 3]).any()


def test_generation_is_deterministic():
    a = generate_synthetic(shifted_task_spec(seed=11))
    b = generate_synthetic(shifted_task_spec(seed=11))
    c = generate_synthetic(shifted_task_spec(seed=12))
    assert a == b
    assert a.fingerprint() == b.fingerprint()
    assert not np.array_equal(a.features, c.features)


def test_class_proportions_within_three_sigma():
    spec = shifted_task_spec(n_source=3000, n_target=3000, seed=5)
    ds = generate_synthetic(spec)
    for mask, props in ((ds.source_mask, spec.source_props), (ds.target_mask, spec.target_props)):
        labels = ds.class_label[mask]
        for n, p in enumerate(props.sum(axis=1)):
            m = len(labels)
            assert abs((labels == n).sum() - m * p) <= 3 * math.sqrt(m * p * (1 - p))


def test_shift_norms_and_label_shift():
    spec = shifted_task_spec(sigma=0.5, shift=2.0)
    assert np.allclose(np.linalg.norm(spec.shifts, axis=-1), 1.0)
    assert np.allclose(spec.target_props[0] / spec.target_props[0].sum(), [0.4, 0.3, 0.2, 0.1])
    assert np.allclose(spec.source_props, 1 / 8)


@pytest.mark.parametrize("change", [
    dict(scales=[[0.1, 0.0]]),
    dict(source_props=[[0.5, 0.6]]),
    dict(target_props=[[1.2, -0.2]]),
])
def test_invalid_spec_rejected(change):
    spec = two_subtype_spec()
    for k, v in change.items():
        setattr(spec, k, np.asarray(v, dtype=float))
    with pytest.raises(ConfigError):
        generate_synthetic(spec)


def test_csv_round_trip(tmp_path):
    ds = generate_synthetic(shifted_task_spec(n_source=30, n_target=20, seed=1))
    path = tmp_path / "d.csv"
    save_csv(ds, path)
    back = load_csv(path, n_classes=2)
    assert back == ds
    path2 = tmp_path / "d2.csv"
    save_csv(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_subtype_sentinel_means_absent(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("domain,class,subtype,f0,f1\ns,0,-1,1.0,2.0\nt,-1,-1,0.5,0.25\n")
    ds = load_csv(path)
    assert ds.sample(0).subtype_label is None
    assert ds.sample(1).class_label is None
    assert ds.sample(1).domain == "target"
    assert ds.n_classes == 1


@pytest.mark.parametrize("text,row", [
    ("domain,class,sub,f0\ns,0,0,1.0\n", 0),
    ("domain,class,subtype,f0,f1\ns,0,0,1.0\n", 1),
    ("domain,class,subtype,f0\ns,0,0,1.0\nt,0,0,abc\n", 2),
    ("domain,class,subtype,f0\ns,0,0,1.0\ns,5,0,1.0\n", 2),
    ("domain,class,subtype,f0\ns,-1,0,1.0\n", 1),
    ("domain,class,subtype,f0\nx,0,0,1.0\n", 1),
])
def test_parse_errors_name_the_row(tmp_path, text, row):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(DatasetParseError) as err:
        load_csv(path, n_classes=2)
    assert err.value.row == row
    assert f"row {row}" in str(err.value)


def test_pseudo_labels_absent_until_set():
    ds = generate_synthetic(shifted_task_spec(n_source=5, n_target=5))
    assert all(s.pseudo_class is None and s.pseudo_subtype is None for s in ds.samples)
    assert all(s.class_label is not None for s in ds.samples if s.domain == "source")


def test_dataset_rejects_out_of_range_class():
    with pytest.raises(ValueError):
        Dataset(domain=["s"], features=[[0.0]], class_label=[3], subtype_label=[-1], n_classes=2)
