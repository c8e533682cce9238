import numpy as np
import pytest

from odeflow import data
from odeflow.diffcore import ContractError


def fixture_bytes():
    """Two hand-built records: label 3 with a pixel ramp, label 9 with constant channels."""
    r0 = bytearray([3]) + bytes(i % 256 for i in range(3072))
    r1 = bytearray([9]) + bytes([10] * 1024 + [20] * 1024 + [250] * 1024)
    return bytes(r0 + r1)


def test_synthetic_is_deterministic():
    a = data.gen_synthetic(12, 4, 32, seed=7)
    b = data.gen_synthetic(12, 4, 32, seed=7)
    assert a.images.tobytes() == b.images.tobytes()
    assert not np.array_equal(a.images, data.gen_synthetic(12, 4, 32, seed=8).images)


def test_synthetic_labels_round_robin_and_range():
    s = data.gen_synthetic(10, 4, 16, seed=0)
    assert s.images.shape == (10, 16, 16, 3)
    np.testing.assert_array_equal(s.labels, [0, 1, 2, 3, 0, 1, 2, 3, 0, 1])
    assert s.images.min() >= 0.0 and s.images.max() <= 1.0


def test_synthetic_validation():
    with pytest.raises(ContractError):
        data.gen_synthetic(4, 1)
    with pytest.raises(ContractError):
        data.gen_synthetic(4, 11)
    with pytest.raises(ContractError):
        data.gen_synthetic(4, 4, size=24)


def test_classes_are_visually_distinct():
    s = data.gen_synthetic(400, 4, 16, seed=0, noise=0.0)
    masks = s.images.mean(-1)
    means = np.stack([masks[s.labels == c].mean(0) for c in range(4)])
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.abs(means[i] - means[j]).mean() > 0.01


def test_cifar_fixture_decodes_bit_exactly():
    raw = fixture_bytes()
    s = data.decode_cifar10(raw)
    assert s.images.shape == (2, 32, 32, 3)
    np.testing.assert_array_equal(s.labels, [3, 9])
    planes = np.frombuffer(raw, dtype=np.uint8).reshape(2, 3073)[:, 1:].reshape(2, 3, 32, 32)
    np.testing.assert_array_equal(s.images, planes.transpose(0, 2, 3, 1) / 255.0)
    # row-major within each plane: pixel (0, 1) of record 0 is byte 1 of the red plane
    assert s.images[0, 0, 1, 0] == 1 / 255.0
    assert s.images[1, 5, 5].tolist() == [10 / 255.0, 20 / 255.0, 250 / 255.0]
    assert data.encode_cifar10(s) == raw


def test_cifar_all_zero_record():
    s = data.decode_cifar10(bytes(3073))
    assert len(s) == 1 and s.labels[0] == 0
    assert not s.images.any()


def test_cifar_errors(tmp_path):
    with pytest.raises(data.FormatError):
        data.decode_cifar10(bytes(3072))
    with pytest.raises(data.FormatError):
        data.decode_cifar10(fixture_bytes()[:-1])
    bad = bytearray(fixture_bytes())
    bad[0] = 10
    with pytest.raises(data.FormatError):
        data.decode_cifar10(bytes(bad))
    with pytest.raises(FileNotFoundError):
        data.load_cifar10_binary(tmp_path / "missing.bin")


def test_cifar_file_round_trip(tmp_path):
    path = tmp_path / "fixture.bin"
    path.write_bytes(fixture_bytes())
    s = data.load_cifar10_binary(path)
    data.save_cifar10_binary(tmp_path / "again.bin", s)
    assert (tmp_path / "again.bin").read_bytes() == fixture_bytes()


def test_encode_rejects_other_layouts():
    with pytest.raises(ContractError):
        data.encode_cifar10(data.gen_synthetic(4, 4, 16))


def test_batches_keep_partial_batch():
    s = data.gen_synthetic(10, 2, 16)
    sizes = [len(b.labels) for b in data.batches(s, 3)]
    assert sizes == [3, 3, 3, 1]


@pytest.mark.parametrize("n,bs,epoch", [(10, 3, 0), (17, 4, 2), (5, 8, 1)])
def test_batches_partition_indices(n, bs, epoch):
    idx = np.concatenate(data.batch_indices(n, bs, 0, epoch))
    np.testing.assert_array_equal(np.sort(idx), np.arange(n))


def test_batch_shuffle_is_per_epoch_and_reproducible():
    a = data.batch_indices(20, 5, 1, 0)
    b = data.batch_indices(20, 5, 1, 0)
    c = data.batch_indices(20, 5, 1, 1)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))
    ordered = np.concatenate(data.batch_indices(7, 3, None))
    np.testing.assert_array_equal(ordered, np.arange(7))
    with pytest.raises(ContractError):
        data.batch_indices(4, 0)


def test_batches_are_normalized_with_train_stats():
    tr = data.gen_synthetic(20, 4, 16, seed=0)
    ev = data.gen_synthetic(8, 4, 16, seed=1).with_stats(tr)
    np.testing.assert_array_equal(ev.mean, tr.mean)
    b = next(data.batches(ev, 8, None))
    np.testing.assert_allclose(b.images, (ev.images - tr.mean) / tr.std)
    z = tr.normalized()
    np.testing.assert_allclose(z.mean(axis=(0, 1, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=(0, 1, 2)), 1.0, atol=1e-12)


def test_subset():
    s = data.gen_synthetic(8, 4, 16)
    sub = s.subset([1, 5])
    np.testing.assert_array_equal(sub.labels, [1, 1])
    np.testing.assert_array_equal(sub.mean, s.mean)
