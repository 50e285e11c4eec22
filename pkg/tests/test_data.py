import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsim.data import (ClientShard, Dataset, PartitionSpec, chunk_shard, label_histogram, load_idx,
                         load_idx_files, partition, synth_blobs, to_idx, train_test_split)
from fedsim.errors import ConfigurationError, DataError, FormatError, PartitionError

from conftest import make_shard


def idx_buffers(pixels: np.ndarray, labels, n_images=None, n_labels=None):
    n, r, c = pixels.shape
    images = struct.pack(">4I", 0x803, n if n_images is None else n_images, r, c) + pixels.astype(np.uint8).tobytes()
    labs = struct.pack(">2I", 0x801, len(labels) if n_labels is None else n_labels) + bytes(labels)
    return images, labs


# --- IDX ---------------------------------------------------------------------

def test_idx_two_images():
    pixels = np.stack([np.zeros((2, 2)), np.full((2, 2), 255)])
    ds = load_idx(*idx_buffers(pixels, [0, 1]))
    assert len(ds) == 2 and ds.dim == 4
    assert ds.features.tolist() == [[0, 0, 0, 0], [1, 1, 1, 1]]
    assert ds.labels.tolist() == [0, 1]


def test_idx_count_mismatch():
    pixels = np.zeros((3, 2, 2))
    with pytest.raises(FormatError) as e:
        load_idx(*idx_buffers(pixels, [0, 1]))
    assert e.value.offset == 4


def test_idx_empty_buffer_offset_zero():
    _, labs = idx_buffers(np.zeros((1, 1, 1)), [0])
    with pytest.raises(FormatError) as e:
        load_idx(b"", labs)
    assert e.value.offset == 0


def test_idx_bad_magic_and_truncation():
    images, labs = idx_buffers(np.zeros((2, 2, 2)), [0, 1])
    with pytest.raises(FormatError):
        load_idx(b"\0\0\x08\x04" + images[4:], labs)
    with pytest.raises(FormatError):
        load_idx(images[:-1], labs)
    with pytest.raises(FormatError):
        load_idx(images, labs[:-1])


def test_idx_round_trip_and_files(tmp_path, rng):
    ds = Dataset(rng.integers(0, 256, size=(6, 9)) / 255.0, rng.integers(0, 10, size=6), 10)
    images, labs = to_idx(ds, (3, 3))
    (tmp_path / "img").write_bytes(images)
    (tmp_path / "lab").write_bytes(labs)
    back = load_idx_files(tmp_path / "img", tmp_path / "lab", 10)
    assert back.features.tobytes() == ds.features.tobytes()
    assert back.labels.tolist() == ds.labels.tolist()
    with pytest.raises(DataError):
        to_idx(ds, (2, 2))


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3)), np.array([0]), 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((1, 3)), np.array([2]), 2)
    with pytest.raises(DataError):
        Dataset(np.full((1, 1), np.nan), np.array([0]), 1)


# --- synthetic blobs ---------------------------------------------------------

def _best_stump_accuracy(ds: Dataset) -> float:
    """Depth-2 axis-aligned tree: one split, then one more split on each side, majority leaves."""
    x, y, c = ds.features, ds.labels, ds.num_classes

    def leaf_hits(mask):
        return int(np.bincount(y[mask], minlength=c).max()) if mask.any() else 0

    def best_split(mask, depth):
        best = leaf_hits(mask)
        if depth == 0:
            return best
        for f in range(x.shape[1]):
            vals = np.unique(x[mask, f])
            for thr in (vals[:-1] + vals[1:]) / 2:
                left = mask & (x[:, f] <= thr)
                right = mask & (x[:, f] > thr)
                best = max(best, best_split(left, depth - 1) + best_split(right, depth - 1))
        return best

    return best_split(np.ones(len(y), dtype=bool), 2) / len(y)


def test_blobs_are_separable_by_a_small_tree():
    ds = synth_blobs(3, 100, 2, separation=10.0, noise_sigma=0.5, seed=1)
    assert len(ds) == 300
    assert _best_stump_accuracy(ds) >= 0.99


def test_blobs_basic_properties():
    ds = synth_blobs(4, 1, 3, 6.0, 1.0, seed=0)
    assert len(ds) == 4 and ds.num_classes == 4
    a, b = synth_blobs(3, 50, 8, 6.0, 1.0, 5), synth_blobs(3, 50, 8, 6.0, 1.0, 5)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.features.min() >= 0.0 and a.features.max() <= 1.0
    with pytest.raises(ConfigurationError):
        synth_blobs(3, 10, 0, 6.0, 1.0, 0)


def test_train_test_split_is_stratified_and_disjoint():
    ds = synth_blobs(3, 600, 8, 6.0, 1.0, 0)
    train, test = train_test_split(ds, 0.2, seed=3)
    assert len(train) == 1440 and len(test) == 360
    assert label_histogram(test.labels, 3) == [120, 120, 120]
    rows = {r.tobytes() for r in train.features} & {r.tobytes() for r in test.features}
    assert not rows


# --- partitioning ------------------------------------------------------------

def test_ratio_profile_gives_200_100_50_50():
    ds = synth_blobs(4, 100, 3, 6.0, 1.0, 0)
    shards = partition(ds, PartitionSpec("imbalanced_iid", 4, size_profile="paper_ratio", seed=0))
    assert [s.size for s in shards] == [200, 100, 50, 50]


def test_balanced_single_client_is_shuffled_dataset(small_ds):
    (shard,) = partition(small_ds, PartitionSpec("balanced_iid", 1, seed=9))
    assert sorted(shard.rows.tolist()) == list(range(len(small_ds)))
    assert shard.rows.tolist() == np.random.default_rng(9).permutation(len(small_ds)).tolist()
    assert np.array_equal(shard.features, small_ds.features[shard.rows])


def test_noniid_one_label_per_client():
    ds = synth_blobs(10, 60, 4, 6.0, 1.0, 0)
    shards = partition(ds, PartitionSpec("imbalanced_noniid", 10, labels_per_client=1,
                                         size_profile="paper_ratio", seed=2))
    seen = []
    for s in shards:
        labels = set(s.labels.tolist())
        assert len(labels) == 1
        seen.append(labels.pop())
    assert seen == list(range(10))


def test_noniid_errors():
    ds = synth_blobs(3, 20, 2, 6.0, 1.0, 0)
    with pytest.raises(PartitionError, match="labels_per_client"):
        partition(ds, PartitionSpec("imbalanced_noniid", 3, labels_per_client=4))
    with pytest.raises(PartitionError, match="cover"):
        partition(ds, PartitionSpec("imbalanced_noniid", 2, labels_per_client=1))
    tiny = synth_blobs(3, 1, 2, 6.0, 1.0, 0)
    with pytest.raises(PartitionError):
        partition(tiny, PartitionSpec("imbalanced_noniid", 6, labels_per_client=1))


def test_partition_spec_validation():
    with pytest.raises(ConfigurationError):
        PartitionSpec("random", 3)
    with pytest.raises(ConfigurationError):
        PartitionSpec("balanced_iid", 3, size_profile="paper_ratio")
    with pytest.raises(ConfigurationError):
        PartitionSpec("balanced_iid", 0)


def test_too_few_rows(small_ds):
    with pytest.raises(PartitionError):
        partition(small_ds, PartitionSpec("balanced_iid", 401))
    with pytest.raises(PartitionError):
        partition(small_ds.subset(np.arange(5)), PartitionSpec("imbalanced_iid", 4, size_profile="power_law",
                                                                alpha=3.0))


@given(mode=st.sampled_from(["balanced_iid", "imbalanced_iid", "imbalanced_noniid"]),
       n=st.integers(1, 12), lpc=st.integers(1, 3), profile=st.sampled_from(["paper_ratio", "power_law", "equal"]),
       seed=st.integers(0, 2 ** 31))
@settings(max_examples=60, deadline=None)
def test_partition_disjoint_and_covering(mode, n, lpc, profile, seed):
    ds = synth_blobs(4, 60, 2, 6.0, 1.0, 0)
    if mode == "balanced_iid":
        profile = "equal"
    if mode == "imbalanced_noniid" and n * lpc < 4:
        n = 4
    spec = PartitionSpec(mode, n, labels_per_client=min(lpc, 4), size_profile=profile, alpha=0.8, seed=seed)
    shards = partition(ds, spec)
    rows = np.concatenate([s.rows for s in shards])
    assert len(rows) == len(set(rows.tolist()))
    dropped = len(ds) - len(rows)
    assert 0 <= dropped < n
    for s in shards:
        assert s.size >= 1
        assert np.array_equal(s.features, ds.features[s.rows])
        assert np.array_equal(s.labels, ds.labels[s.rows])
    if mode == "imbalanced_noniid":
        for s in shards:
            assert len(set(s.labels.tolist())) <= spec.labels_per_client
    again = partition(ds, spec)
    assert all(a.rows.tobytes() == b.rows.tobytes() and a.features.tobytes() == b.features.tobytes()
               for a, b in zip(shards, again))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_balanced_iid_class_frequencies_track_global(seed):
    ds = synth_blobs(5, 1000, 2, 6.0, 1.0, 0)
    shards = partition(ds, PartitionSpec("balanced_iid", 5, seed=seed))
    glob = np.bincount(ds.labels, minlength=5) / len(ds)
    for s in shards:
        assert s.size >= 1000
        freq = np.bincount(s.labels, minlength=5) / s.size
        assert np.max(np.abs(freq - glob)) <= 0.05


# --- chunking ----------------------------------------------------------------

def _shard(m):
    return make_shard(0, np.arange(m, dtype=float)[:, None], np.zeros(m, dtype=int))


def test_chunk_200_by_50():
    chunks = chunk_shard(_shard(200), 50)
    assert [c.size for c in chunks] == [50] * 4
    assert not any(c.remainder for c in chunks)


def test_chunk_49_by_50():
    chunks = chunk_shard(_shard(49), 50)
    assert len(chunks) == 1 and chunks[0].remainder and chunks[0].size == 49


def test_chunk_130_by_50_preserves_order():
    shard = _shard(130)
    chunks = chunk_shard(shard, 50)
    assert [c.size for c in chunks] == [50, 50, 30]
    assert [c.remainder for c in chunks] == [False, False, True]
    assert np.array_equal(np.concatenate([c.features for c in chunks]), shard.features)
    with pytest.raises(ConfigurationError):
        chunk_shard(shard, 0)


def test_client_shard_size():
    assert isinstance(_shard(3), ClientShard) and _shard(3).size == 3
