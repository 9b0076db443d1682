import numpy as np
import pytest

from rmcarto.core import (
    InvalidArgumentError,
    MalformedHeaderError,
    NegativeEntryError,
    RadioMapTensor,
    SamplingMask,
    TensorFormatError,
    TruncatedPayloadError,
    apply_mask,
    derive_seed,
    mask_read,
    mask_sample,
    mask_write,
    substream,
    tensor_read,
    tensor_write,
)


def test_tensor_round_trip_identity(tmp_path):
    t = RadioMapTensor(np.array([[[1.0], [2.0]], [[3.0], [4.0]]]))
    path = tmp_path / "t.rmt"
    tensor_write(t, path)
    back = tensor_read(path)
    assert back.dims == (2, 2, 1)
    assert np.array_equal(back.data, t.data)
    # byte-level round trip as well
    tensor_write(back, tmp_path / "t2.rmt")
    assert (tmp_path / "t.rmt").read_bytes() == (tmp_path / "t2.rmt").read_bytes()


def test_tensor_header_parse_64_cubed(tmp_path):
    rng = np.random.default_rng(0)
    payload = rng.uniform(0.0, 1.0, 64 * 64 * 64)
    path = tmp_path / "big.rmt"
    with open(path, "wb") as fh:
        fh.write(b"RMT1 64 64 64\n")
        fh.write(payload.astype("<f8").tobytes())
    t = tensor_read(path)
    assert t.dims == (64, 64, 64)
    assert np.array_equal(t.data.ravel(), payload)


def test_tensor_truncated_payload(tmp_path):
    path = tmp_path / "short.rmt"
    with open(path, "wb") as fh:
        fh.write(b"RMT1 2 2 2\n")
        fh.write(np.ones(7).astype("<f8").tobytes())
    with pytest.raises(TruncatedPayloadError):
        tensor_read(path)


@pytest.mark.parametrize(
    "header",
    [b"XXX1 2 2 2\n", b"RMT1 2 2\n", b"RMT1 2 2 two\n", b"RMT1 0 2 2\n", b"RMT1 -1 2 2\n"],
)
def test_tensor_malformed_headers(tmp_path, header):
    path = tmp_path / "bad.rmt"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ones(8).astype("<f8").tobytes())
    with pytest.raises(MalformedHeaderError):
        tensor_read(path)


def test_tensor_negative_entries(tmp_path):
    path = tmp_path / "neg.rmt"
    with open(path, "wb") as fh:
        fh.write(b"RMT1 2 2 2\n")
        payload = np.ones(8)
        payload[3] = -0.5
        fh.write(payload.astype("<f8").tobytes())
    with pytest.raises(NegativeEntryError):
        tensor_read(path)


def test_tensor_trailing_bytes(tmp_path):
    path = tmp_path / "trail.rmt"
    with open(path, "wb") as fh:
        fh.write(b"RMT1 1 1 1\n")
        fh.write(np.ones(1).astype("<f8").tobytes())
        fh.write(b"junk")
    with pytest.raises(TensorFormatError):
        tensor_read(path)


def test_tensor_rejects_negative_data():
    with pytest.raises(InvalidArgumentError):
        RadioMapTensor(-np.ones((2, 2, 2)))
    with pytest.raises(InvalidArgumentError):
        RadioMapTensor(np.full((2, 2, 2), np.nan))


def test_mask_sample_counts():
    mask = mask_sample(64, 64, 0.10, seed=1)
    assert mask.n == 410  # round(0.1 * 4096), half away from zero
    full = mask_sample(8, 8, 1.0, seed=2)
    assert full.n == 64
    assert np.array_equal(np.sort(full.flat_indices()), np.arange(64))


def test_mask_sample_rho_validation():
    for rho in (0.0, -0.1, 1.2):
        with pytest.raises(InvalidArgumentError):
            mask_sample(8, 8, rho, seed=0)
    with pytest.raises(InvalidArgumentError):
        mask_sample(4, 4, 0.01, seed=0)  # rounds to an empty mask


def test_mask_sample_seed_determinism():
    differing = 0
    for s in range(100):
        m1 = mask_sample(16, 16, 0.2, seed=s)
        m2 = mask_sample(16, 16, 0.2, seed=s)
        assert np.array_equal(m1.locations, m2.locations)
        m3 = mask_sample(16, 16, 0.2, seed=s + 1000)
        if not np.array_equal(m1.locations, m3.locations):
            differing += 1
    assert differing >= 99


def test_mask_sample_uniform_inclusion():
    # empirical per-cell inclusion frequency within 3 sigma binomial bounds
    trials = 10_000
    I = J = 8
    rho = 0.25
    counts = np.zeros(I * J)
    for s in range(trials):
        counts[mask_sample(I, J, rho, seed=s).flat_indices()] += 1
    n = round(rho * I * J)
    p = n / (I * J)
    sigma = np.sqrt(p * (1 - p) / trials)
    freq = counts / trials
    assert np.all(np.abs(freq - p) <= 3 * sigma + 1e-12), np.max(np.abs(freq - p)) / sigma


def test_apply_mask_single_and_full():
    t = RadioMapTensor(np.full((4, 5, 3), 7.0))
    one = SamplingMask(4, 5, np.array([[2, 3]]))
    meas = apply_mask(t, one)
    assert meas.values.shape == (1, 3)
    assert np.all(meas.values == 7.0)
    full = mask_sample(4, 5, 1.0, seed=0)
    all_meas = apply_mask(t, full)
    assert all_meas.values.size == 20 * 3
    for i, j, fiber in all_meas:
        assert fiber.shape == (3,)
        assert np.array_equal(fiber, t.data[i, j])


def test_apply_mask_out_of_range():
    t = RadioMapTensor(np.ones((4, 4, 2)))
    with pytest.raises(InvalidArgumentError):
        apply_mask(t, SamplingMask(8, 8, np.array([[7, 7]])))


def test_sampling_mask_validation():
    with pytest.raises(InvalidArgumentError):
        SamplingMask(4, 4, np.array([[0, 0], [0, 0]]))  # duplicate
    with pytest.raises(InvalidArgumentError):
        SamplingMask(4, 4, np.array([[4, 0]]))  # outside grid
    with pytest.raises(InvalidArgumentError):
        SamplingMask(4, 4, np.zeros((0, 2), dtype=np.int64))  # empty


def test_mask_file_round_trip(tmp_path):
    mask = mask_sample(16, 12, 0.3, seed=3)
    path = tmp_path / "mask.csv"
    mask_write(mask, path)
    back = mask_read(path, 16, 12)
    assert np.array_equal(back.locations, mask.locations)


def test_substream_determinism_and_independence():
    a = substream(42, "x").standard_normal(8)
    b = substream(42, "x").standard_normal(8)
    c = substream(42, "y").standard_normal(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert derive_seed(7, "child", 3) == derive_seed(7, "child", 3)
    assert derive_seed(7, "child", 3) != derive_seed(7, "child", 4)


def test_seed_validation():
    with pytest.raises(InvalidArgumentError):
        substream(-1)
    with pytest.raises(InvalidArgumentError):
        substream(1 << 64)
    with pytest.raises(InvalidArgumentError):
        substream(1.5)  # type: ignore[arg-type]


def test_types_are_immutable():
    t = RadioMapTensor(np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        t.data[0, 0, 0] = 5.0
    m = mask_sample(4, 4, 0.5, seed=0)
    with pytest.raises(ValueError):
        m.locations[0, 0] = 1
