import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npmerge.data import (FormatError, LabeledDataset, dirichlet_indices, eighty_twenty_indices,
                          load_idx, load_idx_dataset, read_idx, sample_dirichlet, save_idx_dataset,
                          split_dirichlet, split_eighty_twenty, subsample_indices, subsample_per_class,
                          synth_blobs, write_idx)
from npmerge.numerics import make_rng

PIXELS = [[0, 1, 2, 3], [255, 254, 128, 7], [10, 20, 30, 40]]


def write_fixture(tmp_path, labels=(3, 1, 4)):
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    # 3 images of 2x2 pixels, written byte by byte
    img.write_bytes(bytes([0, 0, 8, 3, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 2])
                    + bytes(v for row in PIXELS for v in row))
    lab.write_bytes(bytes([0, 0, 8, 1]) + struct.pack(">I", len(labels)) + bytes(labels))
    return img, lab


def ragged_dataset(seed, num_classes=5, low=5, high=40):
    rng = make_rng(seed)
    counts = rng.integers(low, high, num_classes)
    labels = rng.permutation(np.repeat(np.arange(num_classes), counts))
    return LabeledDataset(rng.standard_normal((len(labels), 3)), labels, num_classes)


def assert_partition(parts, n):
    joined = np.concatenate(parts)
    assert len(joined) == n
    assert np.array_equal(np.sort(joined), np.arange(n))


# ------------------------------------------------------------------------ IDX

def test_load_idx_fixture_exact_pixels(tmp_path):
    ds = load_idx(*write_fixture(tmp_path), normalize=False)
    assert len(ds) == 3 and ds.dim == 4
    assert ds.features.tolist() == [[float(v) for v in row] for row in PIXELS]
    assert ds.labels.tolist() == [3, 1, 4]
    assert ds.num_classes == 5


def test_load_idx_normalize_standardizes(tmp_path):
    ds = load_idx(*write_fixture(tmp_path), normalize=True)
    raw = np.array(PIXELS, dtype=float) / 255.0
    np.testing.assert_allclose(ds.features, (raw - raw.mean()) / raw.std(), atol=1e-12)


def test_load_idx_count_mismatch(tmp_path):
    img, lab = write_fixture(tmp_path, labels=(1, 2))
    with pytest.raises(FormatError, match="offset"):
        load_idx(img, lab)


def test_load_idx_bad_magic(tmp_path):
    img, lab = write_fixture(tmp_path)
    img.write_bytes(b"\x01\x00\x08\x03" + img.read_bytes()[4:])
    with pytest.raises(FormatError, match="magic"):
        load_idx(img, lab)


def test_load_idx_truncated(tmp_path):
    img, lab = write_fixture(tmp_path)
    img.write_bytes(img.read_bytes()[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_idx(img, lab)


def test_idx_round_trip(tmp_path):
    x = make_rng(0).standard_normal((7, 3))
    write_idx(tmp_path / "f.idx", x)
    assert np.array_equal(read_idx(tmp_path / "f.idx"), x)
    b = np.arange(12, dtype=np.uint8).reshape(3, 2, 2)
    write_idx(tmp_path / "b.idx", b)
    assert (tmp_path / "b.idx").read_bytes()[:4] == bytes([0, 0, 8, 3])
    assert np.array_equal(read_idx(tmp_path / "b.idx"), b)


def test_dataset_prefix_round_trip(tmp_path):
    ds = synth_blobs(3, 4, 5, 1.0, seed=2)
    save_idx_dataset(tmp_path / "d", ds)
    back = load_idx_dataset(tmp_path / "d", num_classes=3)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)


# ---------------------------------------------------------------------- blobs

def test_blobs_zero_spread_collapse_to_centers():
    ds = synth_blobs(3, 5, 4, 0.0, seed=1)
    for c in range(3):
        rows = ds.features[ds.labels == c]
        assert np.all(rows == rows[0])


def test_blobs_deterministic():
    a, b = synth_blobs(4, 10, 3, 0.3, seed=7), synth_blobs(4, 10, 3, 0.3, seed=7)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


def test_blobs_nearest_centroid_oracle():
    ds = synth_blobs(5, 100, 8, 0.05, seed=3)
    centroids = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(5)])
    dist = ((ds.features[:, None, :] - centroids[None]) ** 2).sum(-1)
    assert np.mean(dist.argmin(axis=1) == ds.labels) >= 0.99


# ----------------------------------------------------------------- 80/20 split

def test_eighty_twenty_two_classes_by_hand():
    labels = np.repeat([0, 1], 10)
    a, b = eighty_twenty_indices(labels, 2, seed=0)
    assert np.bincount(labels[a], minlength=2).tolist() == [8, 2]
    assert np.bincount(labels[b], minlength=2).tolist() == [2, 8]
    assert_partition([a, b], 20)


def test_eighty_twenty_counts_on_ten_classes():
    ds = ragged_dataset(1, num_classes=10)
    a, b = split_eighty_twenty(ds, seed=4)
    n = ds.class_counts()
    expected = [math.floor(0.8 * n[c] + 1e-9) if c < 5 else math.floor(0.2 * n[c] + 1e-9) for c in range(10)]
    assert a.class_counts().tolist() == expected
    assert (a.class_counts() + b.class_counts()).tolist() == n.tolist()


def test_eighty_twenty_odd_class_count_majority_first_half():
    labels = np.repeat(np.arange(3), 10)
    a, _ = eighty_twenty_indices(labels, 3, seed=0)
    assert np.bincount(labels[a], minlength=3).tolist() == [8, 8, 2]


def test_eighty_twenty_rejects_tiny_class():
    labels = np.array([0] * 10 + [1] * 4)
    with pytest.raises(ValueError, match="class 1"):
        eighty_twenty_indices(labels, 2, seed=0)


# ------------------------------------------------------------------ Dirichlet

def test_dirichlet_concentrated_halves():
    ds = ragged_dataset(2, num_classes=6, low=20, high=60)
    parts = dirichlet_indices(ds.labels, 6, (1e9, 1e9), seed=0)
    n = ds.class_counts()
    first = np.bincount(ds.labels[parts[0]], minlength=6)
    assert np.all(np.abs(first - n / 2) <= 1)


def test_dirichlet_first_part_mean_over_many_classes():
    labels = np.repeat(np.arange(100), 50)
    parts = dirichlet_indices(labels, 100, (0.5, 0.5), seed=3)
    frac = np.bincount(labels[parts[0]], minlength=100) / 50
    assert abs(frac.mean() - 0.5) <= 0.05


def test_dirichlet_sampler_marginal():
    rng = make_rng(11)
    for a in (0.5, 2.0):
        draws = np.array([sample_dirichlet((a, a), rng)[0] for _ in range(10_000)])
        # Beta(a, a) has variance 1 / (4 (2a + 1))
        se = math.sqrt(1 / (4 * (2 * a + 1)) / len(draws))
        assert abs(draws.mean() - 0.5) <= 3 * se


def test_dirichlet_each_class_gets_its_own_draw():
    labels = np.repeat(np.arange(20), 100)
    parts = dirichlet_indices(labels, 20, (0.5, 0.5), seed=5)
    frac = np.bincount(labels[parts[0]], minlength=20)
    assert len(set(frac.tolist())) > 5


def test_split_dirichlet_three_parts_moves_rows_unchanged():
    ds = ragged_dataset(3)
    parts = split_dirichlet(ds, (1.0, 1.0, 1.0), seed=1)
    assert sum(len(p) for p in parts) == len(ds)
    rows = {tuple(r) + (int(y),) for r, y in zip(ds.features, ds.labels)}
    assert all(tuple(r) + (int(y),) in rows for p in parts for r, y in zip(p.features, p.labels))


def test_dirichlet_rejects_bad_alphas():
    with pytest.raises(ValueError):
        dirichlet_indices(np.zeros(5, dtype=int), 1, (0.5,), seed=0)
    with pytest.raises(ValueError):
        dirichlet_indices(np.zeros(5, dtype=int), 1, (0.5, 0.0), seed=0)


# ---------------------------------------------------------------- subsampling

def test_subsample_full_class_size_is_a_permutation():
    labels = np.repeat(np.arange(4), 6)
    idx = subsample_indices(labels, 4, 6, seed=0)
    assert np.array_equal(np.sort(idx), np.arange(24))


def test_subsample_one_per_class():
    ds = ragged_dataset(4, num_classes=10)
    sub = subsample_per_class(ds, 1, seed=0)
    assert len(sub) == 10 and sorted(sub.labels.tolist()) == list(range(10))


def test_subsample_histogram_all_k():
    ds = ragged_dataset(5, num_classes=7, low=12)
    assert subsample_per_class(ds, 9, seed=2).class_counts().tolist() == [9] * 7


def test_subsample_names_short_class():
    labels = np.array([0] * 5 + [1] * 2)
    with pytest.raises(ValueError, match="class 1"):
        subsample_indices(labels, 2, 3, seed=0)


# ----------------------------------------------------------------- properties

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["8020", "dirichlet", "dirichlet3"]))
def test_splitters_partition_and_are_deterministic(seed, kind):
    ds = ragged_dataset(seed % 1000)
    if kind == "8020":
        parts = eighty_twenty_indices(ds.labels, ds.num_classes, seed)
        again = eighty_twenty_indices(ds.labels, ds.num_classes, seed)
    else:
        alphas = (0.5, 0.5) if kind == "dirichlet" else (0.3, 1.0, 2.0)
        parts = dirichlet_indices(ds.labels, ds.num_classes, alphas, seed)
        again = dirichlet_indices(ds.labels, ds.num_classes, alphas, seed)
    assert_partition(list(parts), len(ds))
    assert all(np.array_equal(p, q) for p, q in zip(parts, again))
