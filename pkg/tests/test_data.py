import json
import math
import struct

import numpy as np
import pytest

from localgd import data
from localgd.data import (
    FederatedDataset,
    PartitionSpec,
    RawSample,
    SyntheticSpec,
    compute_margin,
    gen_synthetic,
    load_dataset,
    load_mnist_idx,
    partition_heterogeneous,
    prepare,
    save_dataset,
)
from localgd.errors import IdxFormatError, SeparabilityError


class TestPrepare:
    def test_fold_and_scale_single_point(self):
        ds = prepare([(RawSample(np.array([3.0, 4.0]), -1), 0)])
        np.testing.assert_allclose(ds.clients[0][0], [-0.6, -0.8], atol=1e-15)

    def test_unit_data_unchanged(self):
        pts = [np.array([1.0, 0.0]), np.array([0.0, -1.0])]
        ds = prepare([(RawSample(pts[0], 1), 0), (RawSample(pts[1], -1), 1)])
        np.testing.assert_allclose(ds.clients[0][0], [1.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(ds.clients[1][0], [0.0, 1.0], atol=1e-15)

    def test_max_norm_is_one(self, rng):
        raw = [(RawSample(rng.normal(size=3) * 5, int(rng.choice([-1, 1]))), m)
               for m in range(3) for _ in range(4)]
        ds = prepare(raw)
        norms = np.concatenate([np.linalg.norm(Z, axis=1) for Z in ds.clients])
        assert abs(norms.max() - 1.0) <= 1e-12

    def test_idempotent(self, rng):
        raw = [(RawSample(rng.normal(size=3), int(rng.choice([-1, 1]))), m)
               for m in range(2) for _ in range(3)]
        once = prepare(raw)
        again = prepare(
            [(RawSample(z.copy(), 1), m) for m, Z in enumerate(once.clients) for z in Z]
        )
        for Z1, Z2 in zip(once.clients, again.clients):
            np.testing.assert_allclose(Z1, Z2, rtol=0, atol=1e-15)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            prepare([])
        with pytest.raises(ValueError, match="empty client"):
            prepare([(RawSample(np.array([1.0]), 1), 0), (RawSample(np.array([1.0]), 1), 2)])
        with pytest.raises(ValueError, match="dimension"):
            prepare([(RawSample(np.array([1.0]), 1), 0), (RawSample(np.array([1.0, 2.0]), 1), 0)])
        with pytest.raises(ValueError, match="label"):
            prepare([(RawSample(np.array([1.0]), 3), 0)])


class TestSynthetic:
    def test_reference_geometry(self):
        ds = gen_synthetic(SyntheticSpec(delta=0.1, g=5))
        z1, z2 = ds.clients[0][0], ds.clients[1][0]
        assert np.linalg.norm(z1) == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.norm(z2) == pytest.approx(0.2, abs=1e-12)
        c = (z1 / np.linalg.norm(z1)) @ (z2 / np.linalg.norm(z2))
        assert c == pytest.approx((0.01 - 1) / (0.01 + 1), abs=1e-12)

    def test_orthogonal_at_delta_one(self):
        ds = gen_synthetic(SyntheticSpec(delta=1.0, g=2))
        z1, z2 = ds.clients[0][0], ds.clients[1][0]
        assert z1 @ z2 == pytest.approx(0.0, abs=1e-12)

    def test_equal_norms_at_g_one(self):
        ds = gen_synthetic(SyntheticSpec(delta=0.5, g=1))
        assert np.linalg.norm(ds.clients[0][0]) == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.norm(ds.clients[1][0]) == pytest.approx(1.0, abs=1e-12)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticSpec(delta=0.0, g=5)
        with pytest.raises(ValueError):
            SyntheticSpec(delta=0.1, g=0.5)


def write_idx_pair(tmp_path, images, labels):
    """Write an (images, labels) IDX file pair; images is (n, rows, cols) uint8."""
    n, rows, cols = images.shape
    img_path = tmp_path / "images-idx3-ubyte"
    lbl_path = tmp_path / "labels-idx1-ubyte"
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.tobytes())
    with open(lbl_path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.astype(np.uint8).tobytes())
    return img_path, lbl_path


def second_idx_reader(img_path, lbl_path):
    """Minimal independent IDX reader used as an oracle."""
    raw = open(img_path, "rb").read()
    n = int.from_bytes(raw[4:8], "big")
    rows = int.from_bytes(raw[8:12], "big")
    cols = int.from_bytes(raw[12:16], "big")
    pixels = list(raw[16 : 16 + n * rows * cols])
    lraw = open(lbl_path, "rb").read()
    labels = list(lraw[8 : 8 + n])
    return n, rows, cols, pixels, labels


class TestIdxLoading:
    def test_roundtrip_against_second_reader(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(7, 4, 3), dtype=np.uint8)
        labels = rng.integers(0, 10, size=7, dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, images, labels)
        samples = load_mnist_idx(img, lbl)
        n, rows, cols, pixels, lab = second_idx_reader(img, lbl)
        assert len(samples) == n == 7
        assert samples[0].features.shape == (rows * cols,)
        first = np.array(pixels[: rows * cols]) / 255.0
        np.testing.assert_allclose(samples[0].features, first, atol=1e-15)
        assert [s.label for s in samples] == lab
        assert samples[0].features.min() >= 0 and samples[0].features.max() <= 1

    def test_bad_magic(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(2, 2, 2), dtype=np.uint8)
        labels = np.array([1, 2], dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, images, labels)
        bad = tmp_path / "bad"
        bad.write_bytes(b"\x00\x00\x08\x99" + img.read_bytes()[4:])
        with pytest.raises(IdxFormatError, match="magic"):
            load_mnist_idx(bad, lbl)

    def test_truncated_file(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(3, 2, 2), dtype=np.uint8)
        labels = np.array([1, 2, 3], dtype=np.uint8)
        img, lbl = write_idx_pair(tmp_path, images, labels)
        clipped = tmp_path / "clipped"
        clipped.write_bytes(img.read_bytes()[:-5])
        with pytest.raises(IdxFormatError, match="truncated at offset"):
            load_mnist_idx(clipped, lbl)

    def test_count_mismatch(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(3, 2, 2), dtype=np.uint8)
        img, _ = write_idx_pair(tmp_path, images, np.array([1, 2, 3], dtype=np.uint8))
        lbl2 = tmp_path / "short-labels"
        with open(lbl2, "wb") as f:
            f.write(struct.pack(">II", 0x00000801, 2))
            f.write(bytes([1, 2]))
        with pytest.raises(IdxFormatError, match="labels vs"):
            load_mnist_idx(img, lbl2)


def digit_pool(n_per_digit=100, rng=None):
    """Synthetic 10-class pool: feature = one-hot(digit) with a small jitter.

    The one-hot encoding keeps the digit recoverable from a folded point and
    makes the pool linearly separable under the even/odd labeling.
    """
    samples = []
    for digit in range(10):
        for i in range(n_per_digit):
            x = np.zeros(10)
            x[digit] = 1.0 + 0.001 * (i % 7)
            samples.append(RawSample(x, digit))
    return samples


class TestPartition:
    def test_counts(self):
        pool = digit_pool(100)
        spec = PartitionSpec(n_total=1000, M=5, n_per_client=200, similarity_s=0.05, seed=3)
        ds = partition_heterogeneous(pool, spec)
        assert ds.client_sizes == [200] * 5
        assert sum(ds.client_sizes) == 1000

    def test_deterministic(self):
        pool = digit_pool(100)
        spec = PartitionSpec(n_total=500, M=5, n_per_client=100, similarity_s=0.1, seed=11)
        a = partition_heterogeneous(pool, spec)
        b = partition_heterogeneous(pool, spec)
        assert a.fingerprint() == b.fingerprint()
        c = partition_heterogeneous(pool, PartitionSpec(500, 5, 100, 0.1, seed=12))
        assert c.fingerprint() != a.fingerprint()

    def test_low_similarity_concentrates_labels(self):
        pool = digit_pool(100)
        spec = PartitionSpec(n_total=1000, M=5, n_per_client=200, similarity_s=0.05, seed=1)
        ds = partition_heterogeneous(pool, spec)
        # first client lives on the label-sorted head: digits 0 and 1 dominate
        Z = ds.clients[0]
        digits = np.argmax(np.abs(Z), axis=1)
        share_01 = np.mean((digits == 0) | (digits == 1))
        assert share_01 >= 0.9
        # folding encodes parity: digit 0 positive, digit 1 negative
        assert np.all(Z[digits == 0].sum(axis=1) > 0)
        assert np.all(Z[digits == 1].sum(axis=1) < 0)

    def test_full_similarity_mixes_labels(self):
        pool = digit_pool(100)
        spec = PartitionSpec(n_total=1000, M=5, n_per_client=200, similarity_s=1.0, seed=7)
        ds = partition_heterogeneous(pool, spec)
        # chi-squared sanity bound against the uniform digit histogram
        for Z in ds.clients:
            digits = np.argmax(np.abs(Z), axis=1)
            counts = np.bincount(digits, minlength=10)
            expected = len(digits) / 10
            chi2 = float(((counts - expected) ** 2 / expected).sum())
            assert chi2 < 40.0

    def test_insufficient_pool(self):
        with pytest.raises(ValueError, match="pool"):
            partition_heterogeneous(digit_pool(1), PartitionSpec(100, 2, 50, 0.1, seed=0))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PartitionSpec(n_total=10, M=3, n_per_client=4, similarity_s=0.5, seed=0)
        with pytest.raises(ValueError):
            PartitionSpec(n_total=12, M=3, n_per_client=4, similarity_s=1.5, seed=0)


def margin_grid_oracle(ds, step=1e-6):
    """Dense angular sweep of the unit circle (d=2 only)."""
    best = -np.inf
    Z = ds.all_points()
    thetas = np.arange(0.0, 2 * math.pi, step)
    for start in range(0, len(thetas), 1_000_000):
        block = thetas[start : start + 1_000_000]
        W = np.stack([np.cos(block), np.sin(block)], axis=1)
        margins = (W @ Z.T).min(axis=1)
        best = max(best, float(margins.max()))
    return best


class TestMargin:
    def test_single_point(self):
        ds = prepare([(RawSample(np.array([3.0, 4.0]), 1), 0)])
        gamma, w_star = compute_margin(ds)
        assert gamma == pytest.approx(1.0, abs=1e-8)  # scaled to unit norm
        np.testing.assert_allclose(w_star, [0.6, 0.8], atol=1e-8)

    def test_two_symmetric_points(self):
        s = 1 / math.sqrt(2)
        ds = FederatedDataset(
            clients=[np.array([[s, s]]), np.array([[-s, s]])], d=2
        )
        gamma, w_star = compute_margin(ds)
        assert gamma == pytest.approx(s, abs=1e-8)
        np.testing.assert_allclose(w_star, [0.0, 1.0], atol=1e-7)

    def test_self_certification(self, rng):
        from conftest import separable_dataset

        for _ in range(5):
            ds = separable_dataset(rng, M=3, n=4, d=5)
            gamma, w_star = compute_margin(ds)
            assert abs(np.linalg.norm(w_star) - 1.0) <= 1e-12
            margins = np.concatenate([Z @ w_star for Z in ds.clients])
            assert margins.min() == pytest.approx(gamma, abs=1e-8)
            assert gamma > 0

    def test_synthetic_matches_grid_oracle(self):
        ds = gen_synthetic(SyntheticSpec(delta=0.1, g=5))
        gamma, _ = compute_margin(ds)
        oracle = margin_grid_oracle(ds)
        assert gamma == pytest.approx(oracle, abs=1e-5)

    def test_caches_on_dataset(self):
        ds = gen_synthetic(SyntheticSpec(delta=0.5, g=2))
        assert ds.margin is None
        out1 = compute_margin(ds)
        assert ds.margin is not None
        assert compute_margin(ds) is out1

    def test_non_separable_raises(self):
        ds = FederatedDataset(
            clients=[np.array([[1.0, 0.0]]), np.array([[-1.0, 0.0]])], d=2
        )
        with pytest.raises(SeparabilityError):
            compute_margin(ds)

    def test_exhausted_budget_reports_estimate(self, rng):
        from localgd.errors import ConvergenceError
        from conftest import separable_dataset

        ds = separable_dataset(rng, M=2, n=10, d=6, offset=0.05)
        with pytest.raises(ConvergenceError) as err:
            compute_margin(ds, max_iter=30)
        lb, ub = err.value.estimate
        assert 0 < lb <= ub


class TestSerialization:
    def test_roundtrip(self, rng):
        ds = gen_synthetic(SyntheticSpec(delta=0.1, g=5))
        compute_margin(ds)
        path = "/tmp/localgd_test_ds.json"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.fingerprint() == ds.fingerprint()
        assert back.margin[0] == ds.margin[0]
        np.testing.assert_array_equal(back.clients[0], ds.clients[0])

    def test_schema_fields(self, tmp_path):
        ds = gen_synthetic(SyntheticSpec(delta=1.0, g=1))
        compute_margin(ds)
        path = tmp_path / "ds.json"
        save_dataset(ds, path)
        doc = json.loads(path.read_text())
        assert doc["format"] == data.DATASET_FORMAT
        assert doc["version"] == data.DATASET_VERSION
        assert doc["d"] == 2 and doc["M"] == 2 and doc["n"] == 1
        assert "gamma" in doc["margin"] and "w_star" in doc["margin"]

    def test_rejects_corrupted(self, tmp_path):
        ds = gen_synthetic(SyntheticSpec(delta=1.0, g=1))
        path = tmp_path / "ds.json"
        save_dataset(ds, path)
        doc = json.loads(path.read_text())
        doc["clients"][0][0][0] += 1.0
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError, match="fingerprint"):
            load_dataset(path)
        path.write_text("{not json")
        with pytest.raises(json.JSONDecodeError):
            load_dataset(path)
