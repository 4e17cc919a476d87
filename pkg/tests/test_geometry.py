import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from attrakt.errors import DomainError, FormatError
from attrakt.geometry import (
    LeafPartition,
    PointCloud,
    difference_cloud,
    hausdorff_distance,
    load_cloud_bin,
    load_cloud_csv,
    nearest,
    save_cloud_bin,
    save_cloud_csv,
    semidistance,
    sq_dists,
    sq_norms,
)

coords = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def clouds(dim=2, max_n=12):
    return st.integers(1, max_n).flatmap(lambda n: arrays(np.float64, (n, dim), elements=coords))


def brute_semi(X, Y):
    return max(min(np.linalg.norm(x - y) for y in Y) for x in X)


def test_semidistance_examples():
    assert semidistance([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0
    X = np.array([[0.0], [10.0]])
    Y = np.array([[0.0]])
    assert semidistance(X, X) == 0.0
    assert semidistance(X, Y) == 10.0
    assert semidistance(Y, X) == 0.0
    assert hausdorff_distance(X, Y) == 10.0


def test_offset_grids():
    a = np.arange(10.0)
    assert hausdorff_distance(a, a + 0.5) == pytest.approx(0.5, abs=0)
    assert hausdorff_distance(a, a) == 0.0


def test_domain_errors():
    with pytest.raises(DomainError):
        PointCloud(np.empty((0, 2)))
    with pytest.raises(DomainError):
        semidistance(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DomainError):
        PointCloud([[np.nan, 0.0]])
    with pytest.raises(DomainError):
        nearest(np.zeros((3, 1)), [0.0], k=0)
    with pytest.raises(DomainError):
        difference_cloud(np.zeros((3, 1)), max_pairs=0)


def test_cloud_immutable():
    c = PointCloud([[1.0, 2.0]])
    with pytest.raises(ValueError):
        c.points[0, 0] = 5.0


@given(clouds(), clouds())
def test_semidistance_matches_scan(X, Y):
    assert semidistance(X, Y) == pytest.approx(brute_semi(X, Y), rel=1e-12, abs=1e-12)


@given(clouds(max_n=8), clouds(max_n=8), clouds(max_n=8))
def test_hausdorff_pseudometric(X, Y, Z):
    dxy, dyx = hausdorff_distance(X, Y), hausdorff_distance(Y, X)
    assert dxy == dyx
    assert dxy >= semidistance(X, Y) and dxy >= semidistance(Y, X)
    # triangle inequality up to rounding of the individual distances
    assert hausdorff_distance(X, Z) <= dxy + hausdorff_distance(Y, Z) + 1e-9
    assert hausdorff_distance(X, X) == 0.0


def test_difference_cloud_examples():
    d = difference_cloud([[4.0, 2.0]], max_pairs=10)
    assert np.array_equal(d.points, np.zeros((1, 2)))
    d = difference_cloud(np.array([[0.0], [1.0]]), max_pairs=100)
    assert sorted(d.points[:, 0].tolist()) == [-1.0, 0.0, 1.0]


def test_difference_cloud_symmetric_sampling():
    t = np.linspace(0, 2 * np.pi, 100, endpoint=False)
    A = np.c_[np.cos(t), np.sin(t)]
    d = difference_cloud(A, max_pairs=10_000 - 1, seed=3)
    assert len(d) <= 10_000
    pts = {tuple(p) for p in d.points}
    assert (0.0, 0.0) in pts
    assert all((-x + 0.0, -y + 0.0) in pts for x, y in pts)


def test_nearest_examples():
    c = np.array([[0.0], [1.0], [2.0]])
    (i, dist), = nearest(c, [0.6], k=1)
    assert i == 1 and dist == pytest.approx(0.4, abs=1e-15)
    assert nearest(c, [2.0], k=1)[0] == (2, 0.0)
    # tie at distance 0.5 resolves to the lower index
    assert [i for i, _ in nearest(c, [0.5], k=2)] == [0, 1]


def test_nearest_matches_scan(rng):
    pts = rng.normal(size=(500, 3))
    for _ in range(20):
        q = rng.normal(size=3)
        d = np.linalg.norm(pts - q, axis=1)
        order = np.lexsort((np.arange(len(d)), d))[:5]
        got = nearest(pts, q, k=5)
        assert [i for i, _ in got] == order.tolist()
        assert np.allclose([x for _, x in got], d[order], rtol=1e-14)


@given(clouds(dim=3, max_n=30), arrays(np.float64, (4, 3), elements=coords))
def test_sq_dists_batch_equals_rowwise(P, X):
    batch = sq_dists(P, X)
    for i, x in enumerate(X):
        assert np.array_equal(batch[i], sq_dists(P, x))
        assert np.array_equal(batch[i], sq_norms(P - x))


def test_leaf_partition_covers_and_bounds(rng):
    pts = rng.normal(size=(300, 4))
    lv = LeafPartition(pts, size=8)
    members = lv.slots[lv.valid]
    assert sorted(members.tolist()) == list(range(300))
    X = rng.normal(size=(50, 4)) * 2
    gaps = lv.gaps(X)
    for li in range(len(lv.slots)):
        m = lv.slots[li][lv.valid[li]]
        true = np.sqrt(sq_dists(pts[m], X)).min(axis=1)
        assert np.all(gaps[:, li] <= true)


def test_csv_binary_roundtrip(tmp_path, rng):
    pts = rng.normal(size=(40, 5)) * 1e3
    save_cloud_bin(tmp_path / "a.bin", pts)
    save_cloud_csv(tmp_path / "a.csv", pts)
    b = load_cloud_bin(tmp_path / "a.bin")
    c = load_cloud_csv(tmp_path / "a.csv")
    assert np.array_equal(b, pts)
    assert np.max(np.abs(b - c)) <= 1e-15 * np.max(np.abs(pts))
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "dim=5,count=40"
    raw = (tmp_path / "a.bin").read_bytes()
    assert raw[:8] == b"ATCLOUD1" and len(raw) == 16 + 8 * 200


def test_format_errors(tmp_path, rng):
    pts = rng.normal(size=(10, 2))
    save_cloud_bin(tmp_path / "a.bin", pts)
    raw = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        load_cloud_bin(tmp_path / "t.bin")
    (tmp_path / "m.bin").write_bytes(b"XXCLOUD1" + raw[8:])
    with pytest.raises(FormatError):
        load_cloud_bin(tmp_path / "m.bin")
    (tmp_path / "h.csv").write_text("dim=2,count=3\n1,2\n")
    with pytest.raises(FormatError):
        load_cloud_csv(tmp_path / "h.csv")
