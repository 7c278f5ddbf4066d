import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pair_count_auc
from subuda.evaluation import (
    MetricRow,
    UndefinedMetricError,
    accuracy,
    auc,
    cdf_area,
    consensus_matrix,
    consensus_scan,
    multiclass_auc,
    project_2d,
    proxy_a_distance,
    write_history,
)

scores = st.lists(st.integers(0, 6).map(float), min_size=1, max_size=15)


def test_accuracy_examples():
    assert accuracy([0, 1, 1], [0, 1, 0]) == pytest.approx(2 / 3)
    with pytest.raises(UndefinedMetricError):
        accuracy([], [])


def test_auc_examples():
    assert auc([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert auc([0.9, 0.4], [0.5, 0.1]) == 0.75
    assert auc([0.5, 0.5], [0.5]) == 0.5
    with pytest.raises(UndefinedMetricError):
        auc([], [1.0])


@settings(max_examples=100, deadline=None)
@given(scores, scores)
def test_auc_matches_pair_counting(pos, neg):
    assert auc(pos, neg) == pytest.approx(pair_count_auc(pos, neg), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(scores, scores, st.floats(0.1, 10), st.floats(-5, 5))
def test_auc_invariances(pos, neg, a, b):
    base = auc(pos, neg)
    assert auc([a * p + b for p in pos], [a * n + b for n in neg]) == pytest.approx(base, abs=1e-12)
    assert auc(neg, pos) == pytest.approx(1.0 - base, abs=1e-12)


def test_multiclass_auc():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
    assert multiclass_auc(probs, [0, 1, 0]) == 1.0
    three = np.eye(3)[[0, 1, 2, 0]]
    assert multiclass_auc(three, [0, 1, 2, 0]) == 1.0


def test_a_distance_separable_and_identical():
    rng = np.random.default_rng(0)
    fs = rng.standard_normal((200, 3))
    assert proxy_a_distance(fs, fs + 20.0, seed=0) == 2.0
    for seed in range(5):
        r = np.random.default_rng(seed + 10)
        d = proxy_a_distance(r.standard_normal((300, 3)), r.standard_normal((300, 3)), seed=seed)
        assert d <= 0.3


def test_a_distance_symmetry_and_errors():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((100, 2)), rng.standard_normal((100, 2)) + 1.0
    assert proxy_a_distance(a, b, seed=3) == proxy_a_distance(b, a, seed=3)
    with pytest.raises(ValueError):
        proxy_a_distance(a[:2], b[:2])


def blobs(rng, k, n, spread=20.0, d=2):
    centers = spread * np.eye(max(k, d))[:k, :d] if k <= d else rng.uniform(-spread, spread, (k, d))
    return np.vstack([c + 0.3 * rng.standard_normal((n, d)) for c in centers])


def test_consensus_full_rate_is_binary():
    x = np.random.default_rng(0).standard_normal((20, 2))
    cons, skipped = consensus_matrix(x, 3, 10, 1.0, seed=0)
    assert skipped == 0
    assert set(np.unique(cons).tolist()) <= {0.0, 1.0}


def test_consensus_well_separated_blobs():
    rng = np.random.default_rng(1)
    x = np.vstack([c + 0.2 * rng.standard_normal((15, 2)) for c in ([0, 0], [10, 0], [0, 10], [10, 10])])
    cons, _ = consensus_matrix(x, 4, 30, 0.8, seed=0, n_init=5)
    off = cons[np.triu_indices_from(cons, k=1)]
    assert np.mean(np.minimum(off, 1 - off) <= 0.05) >= 0.95
    np.testing.assert_array_equal(cons, cons.T)
    assert np.all(np.diag(cons) == 1.0)


def test_consensus_single_blob_unstable_at_four():
    x = np.random.default_rng(2).standard_normal((60, 2))
    cons, _ = consensus_matrix(x, 4, 30, 0.8, seed=0)
    off = cons[np.triu_indices_from(cons, k=1)]
    assert np.mean(np.minimum(off, 1 - off) <= 0.05) < 0.6


def test_cdf_area_examples():
    assert cdf_area(np.eye(3)) == 0.0
    assert cdf_area(np.array([[1, 0, 1], [0, 1, 0], [1, 0, 1.0]])) == 1.0
    m = np.array([[1, 0.5], [0.5, 1.0]])
    assert cdf_area(m) == 0.0


def test_consensus_scan_recommends_true_k():
    rng = np.random.default_rng(3)
    x = np.vstack([c + 0.2 * rng.standard_normal((15, 2)) for c in ([0, 0], [10, 0], [0, 10])])
    res = consensus_scan(x, range(2, 7), n_resamples=20, n_init=3)
    assert res.recommended == 3
    assert [r["k"] for r in res.rows()] == [2, 3, 4, 5, 6]
    with pytest.raises(ValueError):
        consensus_scan(x, [1, 2])
    with pytest.raises(ValueError):
        consensus_scan(x, [2, 40])


def test_projection_of_a_line():
    t = np.linspace(-1, 1, 9)[:, None]
    x = t * np.array([[1.0, 2.0, -2.0]])
    out = project_2d(x)
    assert np.all(out[:, 1] == 0.0)
    np.testing.assert_allclose(np.abs(out[:, 0]), np.abs(t[:, 0]) * 3.0, atol=1e-12)


def test_projection_preserves_planar_distances():
    rng = np.random.default_rng(4)
    pts = rng.standard_normal((12, 2)) * [3.0, 1.0]
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    x = np.hstack([pts, np.zeros((12, 3))]) @ q.T + 7.0
    out = project_2d(x)
    d_in = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
    np.testing.assert_allclose(d_out, d_in, atol=1e-9)
    with pytest.raises(ValueError):
        project_2d(x[:2])


def test_write_history(tmp_path):
    rows = [MetricRow(1, 1.5, 1.0, 0.25, 0.5, 0.9, 0.95, 0.4, "4;4")]
    write_history(rows, tmp_path / "m.csv")
    with open(tmp_path / "m.csv") as fh:
        got = list(csv.DictReader(fh))
    assert got[0]["epoch"] == "1" and float(got[0]["loss_class"]) == 0.25 and got[0]["clusters"] == "4;4"
