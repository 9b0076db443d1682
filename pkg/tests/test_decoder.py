import numpy as np
import pytest

from rmcarto.core import InvalidArgumentError
from rmcarto.decoder import (
    DecoderArch,
    DecoderParams,
    backward,
    count_params,
    forward,
    forward_all,
    forward_pass,
    init_params,
    layer_param_counts,
    load_params,
    save_params,
)
from rmcarto.synth import assemble_map


def small_arch(blocks=2, channels=(1, 2, 3, 1), kernel=3, d0=2, eps=1e-6):
    return DecoderArch(blocks=blocks, channels=channels, kernel=kernel, d0=d0, norm_epsilon=eps)


def test_default_arch_parameter_table():
    arch = DecoderArch.default()
    assert layer_param_counts(arch) == [66, 336, 336, 336, 6]
    assert count_params(arch) == 1080
    assert arch.out_side == 64
    assert arch.latent_dim == 16


def test_count_params_matches_enumerated_storage():
    rng = np.random.default_rng(0)
    for _ in range(20):
        blocks = int(rng.integers(1, 4))
        channels = (1,) + tuple(int(rng.integers(1, 7)) for _ in range(blocks)) + (
            int(rng.integers(1, 5)),
        )
        arch = DecoderArch(
            blocks=blocks,
            channels=channels,
            kernel=int(rng.choice([1, 3, 5])),
            d0=int(rng.integers(1, 5)),
        )
        theta = DecoderParams.zeros(arch)
        assert theta.num_params == count_params(arch)


def test_arch_validation():
    with pytest.raises(InvalidArgumentError):
        DecoderArch(blocks=1, channels=(1, 2), kernel=3, d0=2)  # chain too short
    with pytest.raises(InvalidArgumentError):
        DecoderArch(blocks=1, channels=(2, 2, 1), kernel=3, d0=2)  # k_0 != 1
    with pytest.raises(InvalidArgumentError):
        DecoderArch(blocks=1, channels=(1, 2, 1), kernel=2, d0=2)  # even kernel


def test_forward_zero_weights_is_half():
    arch = small_arch()
    theta = DecoderParams.zeros(arch)
    for i in range(arch.blocks):
        theta.scale[i][...] = 1.0
    z = np.linspace(-1.0, 1.0, arch.latent_dim)
    slf = forward(theta, z, arch)
    assert slf.data.shape == (arch.out_side, arch.out_side)
    assert np.all(slf.data == 0.5)


def test_forward_matches_hand_computed_oracle():
    # one up-block, one channel, 1x1 kernels: every op is hand-computable
    arch = DecoderArch(blocks=1, channels=(1, 1, 1), kernel=1, d0=2, norm_epsilon=1e-6)
    theta = DecoderParams.zeros(arch)
    w0, scale, shift, w1 = 1.3, 0.7, -0.2, 2.1
    theta.conv[0][...] = w0
    theta.scale[0][...] = scale
    theta.shift[0][...] = shift
    theta.head[...] = w1
    z = np.array([0.5, -1.0, 2.0, 0.25])

    A = np.array([[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]])
    up = A @ z.reshape(2, 2) @ A.T
    relu = np.maximum(w0 * up, 0.0)
    norm = (relu - relu.mean()) / (np.std(relu) + 1e-6) * scale + shift
    oracle = 1.0 / (1.0 + np.exp(-w1 * norm))

    got = forward(theta, z, arch).data
    assert np.max(np.abs(got - oracle)) < 1e-12


def test_forward_default_shape_and_range():
    arch = DecoderArch.default()
    theta, Z = init_params(arch, "uniform", seed=0, R=1)
    slf = forward(theta, Z[:, 0], arch)
    assert slf.data.shape == (64, 64)
    assert np.all(slf.data > 0.0) and np.all(slf.data < 1.0)


def test_forward_all_annihilation_additivity_composition():
    arch = small_arch()
    theta, Z = init_params(arch, "uniform", seed=1, R=2)
    zero_c = np.zeros((5, 1))
    assert np.all(forward_all(theta, Z[:, :1], zero_c, arch).data == 0.0)

    rng = np.random.default_rng(2)
    C = rng.uniform(0.0, 1.0, (5, 2))
    whole = forward_all(theta, Z, C, arch).data
    parts = sum(
        forward_all(theta, Z[:, r : r + 1], C[:, r : r + 1], arch).data for r in range(2)
    )
    assert np.allclose(whole, parts, atol=1e-12)

    slfs = [forward(theta, Z[:, r], arch) for r in range(2)]
    assert np.max(np.abs(whole - assemble_map(slfs, C).data)) < 1e-12


def test_backward_zero_cotangent():
    arch = small_arch()
    theta, Z = init_params(arch, "uniform", seed=3, R=2)
    C = np.full((4, 2), 0.5)
    d_theta, d_Z, d_C = backward(theta, Z, C, arch, np.zeros((8, 8, 4)))
    assert all(np.all(a == 0.0) for a in d_theta.as_arrays())
    assert np.all(d_Z == 0.0) and np.all(d_C == 0.0)


def _fd_check(theta, Z, C, arch, cot, step=1e-6, tol=1e-6):
    def value():
        return float(np.sum(forward_all(theta, Z, C, arch).data * cot))

    d_theta, d_Z, d_C = backward(theta, Z, C, arch, cot)
    worst = 0.0
    pairs = list(zip(theta.as_arrays(), d_theta.as_arrays())) + [(Z, d_Z), (C, d_C)]
    for arr, grad in pairs:
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            up = value()
            arr[idx] = orig - step
            down = value()
            arr[idx] = orig
            fd = (up - down) / (2.0 * step)
            worst = max(worst, abs(fd - grad[idx]) / max(1.0, abs(fd)))
    assert worst < tol, worst
    return worst


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    arch = small_arch()
    theta, Z = init_params(arch, "uniform", seed=4, R=2)
    C = rng.uniform(0.1, 1.0, (3, 2))
    cot = rng.standard_normal((arch.out_side, arch.out_side, 3))
    _fd_check(theta, Z, C, arch, cot)


def test_backward_dC_closed_form():
    # for fixed fields, dC is the linear-factor gradient sum_ij S_r * cot
    rng = np.random.default_rng(5)
    arch = small_arch(blocks=1, channels=(1, 2, 1))
    theta, Z = init_params(arch, "uniform", seed=5, R=3)
    C = rng.uniform(0.1, 1.0, (4, 3))
    cot = rng.standard_normal((4, 4, 4))
    _, _, d_C = backward(theta, Z, C, arch, cot)
    S = np.stack([forward(theta, Z[:, r], arch).data for r in range(3)])
    oracle = np.einsum("ijk,rij->kr", cot, S)
    assert np.max(np.abs(d_C - oracle)) < 1e-12


def test_channel_norm_statistics():
    # tiny epsilon so normalized channels hit mean 0 and std |scale| sharply
    arch = small_arch(blocks=2, channels=(1, 3, 2, 1), eps=1e-13)
    theta, Z = init_params(arch, "uniform", seed=6, R=1)
    shift_val, scale_val = 0.31, -1.7
    for i in range(arch.blocks):
        theta.scale[i][...] = scale_val
        theta.shift[i][...] = shift_val
    _, trace = forward_pass(theta, Z, arch)
    for i in range(arch.blocks):
        normed = trace.xhat[i] * scale_val + shift_val
        mean = normed.mean(axis=(2, 3))
        std = normed.std(axis=(2, 3))
        assert np.all(np.abs(mean - shift_val) < 1e-10 * (1.0 + abs(shift_val)))
        assert np.all(np.abs(std - abs(scale_val)) < 1e-8)


def test_init_determinism_and_unknown_scheme():
    arch = small_arch()
    t1, z1 = init_params(arch, "uniform", seed=11, R=3)
    t2, z2 = init_params(arch, "uniform", seed=11, R=3)
    assert np.array_equal(z1, z2)
    for a, b in zip(t1.as_arrays(), t2.as_arrays()):
        assert np.array_equal(a, b)
    with pytest.raises(InvalidArgumentError):
        init_params(arch, "kaiming", seed=0)


def test_xavier_variance():
    arch = DecoderArch(blocks=2, channels=(1, 6, 6, 1), kernel=3, d0=2)
    n = arch.kernel**2
    sums = [0.0, 0.0]
    counts = [0, 0]
    for s in range(100):
        theta, _ = init_params(arch, "xavier", seed=s, R=1)
        for i in range(2):
            sums[i] += float(np.sum(theta.conv[i] ** 2))
            counts[i] += theta.conv[i].size
    for i in range(2):
        fan = arch.channels[i] * n + arch.channels[i + 1] * n
        expected = 2.0 / fan
        assert abs(sums[i] / counts[i] - expected) <= 0.2 * expected


def test_warm_start_fit_beats_random_init():
    arch = small_arch(blocks=2, channels=(1, 4, 4, 1))
    target_theta, target_Z = init_params(arch, "uniform", seed=21, R=2)
    targets = np.stack([forward(target_theta, target_Z[:, r], arch).data for r in range(2)])

    theta0, Z0 = init_params(arch, "uniform", seed=22, R=2)
    out0, _ = forward_pass(theta0, Z0, arch)
    base_err = np.linalg.norm(out0[:, 0] - targets)

    theta1, Z1 = init_params(arch, "warm-start-fit", seed=22, targets=targets)
    out1, _ = forward_pass(theta1, Z1, arch)
    fit_err = np.linalg.norm(out1[:, 0] - targets)
    assert fit_err <= 0.5 * base_err


def test_warm_start_requires_targets():
    with pytest.raises(InvalidArgumentError):
        init_params(small_arch(), "warm-start-fit", seed=0)


def test_params_round_trip(tmp_path):
    arch = small_arch()
    theta, _ = init_params(arch, "uniform", seed=8, R=1)
    path = tmp_path / "weights.unn"
    save_params(theta, arch, path)
    back, back_arch = load_params(path)
    assert back_arch.channels == arch.channels
    assert back_arch.blocks == arch.blocks
    assert back_arch.kernel == arch.kernel and back_arch.d0 == arch.d0
    for a, b in zip(theta.as_arrays(), back.as_arrays()):
        assert np.array_equal(a, b)
    header = path.read_bytes().split(b"\n", 1)[0]
    assert header == b"UNN1 2 1 2 3 1 3 2"


def test_forward_shape_validation():
    arch = small_arch()
    theta, Z = init_params(arch, "uniform", seed=9, R=1)
    with pytest.raises(InvalidArgumentError):
        forward(theta, np.zeros(7), arch)
    bad = DecoderParams.zeros(small_arch(channels=(1, 3, 3, 1)))
    with pytest.raises(InvalidArgumentError):
        forward(bad, Z[:, 0], arch)
