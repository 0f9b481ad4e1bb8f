import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.distance import pdist

from coreset_fed.bnn import LabeledDataset
from coreset_fed.data import (
    PartitionPlan, embed_vectors, export_csv, load_idx_dataset, parse_idx, partition_noniid,
    read_csv_dataset, regression_function, serialize_idx, synth_regression,
)
from coreset_fed.exceptions import DomainError, IDXParseError


def test_synth_regression_noiseless_is_exact():
    d = synth_regression({"kind": "sin"}, n=200, s0=2, sigma_eps=0.0, seed=3)
    expected = np.sin(2 * np.pi * d.x[:, 0]) * d.x[:, 1]
    np.testing.assert_array_equal(d.y[:, 0], expected)
    assert np.all(np.abs(d.x) <= 1.0)


def test_synth_regression_noise_variance():
    sigma, n = 0.4, 10_000
    d = synth_regression({"kind": "poly"}, n=n, s0=3, sigma_eps=sigma, seed=1)
    resid = d.y[:, 0] - d.meta["f_values"]
    # variance of the sample variance for Gaussian noise is 2 sigma^4 / (n - 1)
    assert abs(resid.var(ddof=1) - sigma ** 2) < 3 * np.sqrt(2 * sigma ** 4 / (n - 1))


def test_synth_regression_determinism_and_errors():
    a = synth_regression({"kind": "planted_mlp"}, n=50, s0=4, sigma_eps=0.1, seed=9)
    b = synth_regression({"kind": "planted_mlp"}, n=50, s0=4, sigma_eps=0.1, seed=9)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
    with pytest.raises(DomainError):
        synth_regression(n=10, sigma_eps=-1.0)
    with pytest.raises(DomainError):
        synth_regression(n=0)
    with pytest.raises(DomainError):
        regression_function("cosh")


def test_partition_single_client_gets_everything():
    labels = np.random.default_rng(0).integers(0, 10, size=100)
    plan = partition_noniid(labels, 1, 3, seed=0)
    np.testing.assert_array_equal(plan.assignments[0], np.arange(100))


def test_partition_label_pure_clients():
    labels = np.array([0] * 10 + [1] * 10)
    plan = partition_noniid(labels, 2, 1, seed=5)
    sets = sorted(tuple(np.unique(labels[a])) for a in plan.assignments)
    assert sets == [(0,), (1,)]


def test_partition_classes_per_client_on_balanced_labels():
    labels = np.repeat(np.arange(10), 60)
    plan = partition_noniid(labels, 5, 2, seed=2)
    for a in plan.assignments:
        assert np.unique(labels[a]).size == 2


@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_partition_disjoint_and_covering(n_clients, c, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 5, size=60)
    plan = partition_noniid(labels, n_clients, c, seed=seed)
    allidx = np.concatenate(plan.assignments)
    assert allidx.size == 60 and np.unique(allidx).size == 60


def test_partition_real_labels_and_errors():
    y = np.random.default_rng(0).normal(size=40)
    plan = partition_noniid(y, 4, 1, seed=0)
    assert sum(a.size for a in plan.assignments) == 40
    with pytest.raises(DomainError):
        partition_noniid(np.arange(3), 2, 2)
    with pytest.raises(NotImplementedError):
        partition_noniid(np.arange(10), 2, 1, method="dirichlet")
    with pytest.raises(DomainError):
        PartitionPlan(([0, 1], [1, 2]), 1, 0)


# hand-built: two 2x2 images
IDX_FIXTURE = bytes([0, 0, 0x08, 0x03,
                     0, 0, 0, 2,
                     0, 0, 0, 2,
                     0, 0, 0, 2,
                     0, 51, 102, 255,
                     1, 2, 3, 4])


def test_parse_idx_hand_fixture():
    assert len(IDX_FIXTURE) == 24
    arr = parse_idx(IDX_FIXTURE, scale=False)
    assert arr.kind == "images" and arr.data.shape == (2, 2, 2)
    np.testing.assert_array_equal(arr.data[0], [[0, 51], [102, 255]])
    np.testing.assert_array_equal(arr.data[1], [[1, 2], [3, 4]])
    scaled = parse_idx(IDX_FIXTURE)
    np.testing.assert_allclose(scaled.data[0], [[0, 0.2], [0.4, 1.0]])


def test_parse_idx_labels():
    buf = struct.pack(">II", 0x801, 3) + bytes([7, 0, 9])
    arr = parse_idx(buf)
    assert arr.kind == "labels"
    np.testing.assert_array_equal(arr.data, [7, 0, 9])


def test_parse_idx_errors_name_offsets():
    with pytest.raises(IDXParseError) as e:
        parse_idx(b"")
    assert e.value.offset == 0
    with pytest.raises(IDXParseError) as e:
        parse_idx(IDX_FIXTURE[:-1])
    assert "expected 8" in str(e.value) and "got 7" in str(e.value)
    with pytest.raises(IDXParseError) as e:
        parse_idx(b"\x01" + IDX_FIXTURE[1:])
    assert e.value.offset == 0
    with pytest.raises(IDXParseError) as e:
        parse_idx(IDX_FIXTURE[:2] + b"\x0d" + IDX_FIXTURE[3:])
    assert e.value.offset == 2
    with pytest.raises(IDXParseError):
        parse_idx(IDX_FIXTURE + b"\x00")
    with pytest.raises(IDXParseError):
        parse_idx(IDX_FIXTURE[:10])


@given(st.one_of(
    arrays(np.uint8, st.tuples(st.integers(0, 4), st.integers(1, 4), st.integers(1, 4))),
    arrays(np.uint8, st.integers(0, 20)),
))
def test_idx_round_trip(arr):
    back = parse_idx(serialize_idx(arr), scale=False)
    np.testing.assert_array_equal(back.data, arr)


def test_load_idx_dataset(tmp_path):
    imgs = np.arange(5 * 3 * 3, dtype=np.uint8).reshape(5, 3, 3)
    (tmp_path / "i.idx").write_bytes(serialize_idx(imgs))
    (tmp_path / "l.idx").write_bytes(serialize_idx(np.array([0, 1, 2, 1, 0], np.uint8)))
    d = load_idx_dataset(tmp_path / "i.idx", tmp_path / "l.idx")
    assert d.x.shape == (5, 9) and d.is_classification
    assert len(load_idx_dataset(tmp_path / "i.idx", tmp_path / "l.idx", limit=3)) == 3


def test_embed_vectors_identity_and_determinism():
    x = np.random.default_rng(0).normal(size=(5, 6))
    np.testing.assert_array_equal(embed_vectors(x, 6, identity=True), x)
    np.testing.assert_array_equal(embed_vectors(x, 3, seed=4), embed_vectors(x, 3, seed=4))
    with pytest.raises(DomainError):
        embed_vectors(x, 7)


def test_embed_vectors_preserves_distances():
    x = np.random.default_rng(1).uniform(size=(100, 784))
    ratio = pdist(embed_vectors(x, 128, seed=0)) / pdist(x)
    assert np.mean(np.abs(ratio - 1) <= 0.25) >= 0.95


def test_csv_export_header_and_round_trip(tmp_path):
    d = synth_regression(n=4, s0=3, seed=0)
    export_csv(d, tmp_path / "d.csv")
    first = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert first == "x_0,x_1,x_2,y_0"
    back = read_csv_dataset(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.x, d.x)
    np.testing.assert_array_equal(back.y, d.y)
    c = LabeledDataset(np.zeros((2, 1)), np.array([3, 4]))
    export_csv(c, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[1] == "0.0,3"
