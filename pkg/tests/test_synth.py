import numpy as np
import pytest

from rmcarto.core import InvalidArgumentError, RadioMapTensor, apply_mask, mask_sample
from rmcarto.synth import (
    PsdSpec,
    QuantizerSpec,
    ScenarioConfig,
    ShadowingParams,
    assemble_map,
    dequantize_labels,
    design_quantizer,
    generate_psd,
    generate_scenario,
    generate_slf,
    h_inverse,
    h_transform,
    quantize_fibers,
    shadowing_field,
)


def _params(xc=20.0, eta=6.0, emitter=(4, 4), ple=2.0):
    return ShadowingParams(xc=xc, eta_db=eta, emitter=emitter, path_loss_exponent=ple)


def test_shadowing_zero_eta_is_zero_field():
    f = shadowing_field(12, 10, _params(eta=0.0), seed=0)
    assert f.shape == (12, 10)
    assert np.all(f == 0.0)


def test_shadowing_variance_monte_carlo():
    # empirical variance at a fixed cell over many draws: eta^2 within 15%
    eta = 5.0
    p = _params(xc=10.0, eta=eta, emitter=(0, 0))
    draws = np.array([shadowing_field(16, 16, p, seed=s)[7, 9] for s in range(800)])
    assert abs(draws.var() - eta**2) <= 0.15 * eta**2


def test_shadowing_correlation_at_decorrelation_distance():
    # covariance between cells separated by exactly Xc: e^-1 * eta^2 within 20%
    eta, xc = 4.0, 6.0
    p = _params(xc=xc, eta=eta, emitter=(0, 0))
    pairs = []
    for s in range(1200):
        f = shadowing_field(16, 16, p, seed=s)
        pairs.append((f[4, 3], f[4 + int(xc), 3]))
    a, b = np.asarray(pairs).T
    cov = np.mean(a * b) - a.mean() * b.mean()
    expected = np.exp(-1.0) * eta**2
    assert abs(cov - expected) <= 0.20 * expected


def test_shadowing_determinism_and_validation():
    p = _params()
    f1 = shadowing_field(8, 8, p, seed=5)
    f2 = shadowing_field(8, 8, p, seed=5)
    assert np.array_equal(f1, f2)
    with pytest.raises(InvalidArgumentError):
        ShadowingParams(xc=0.0, eta_db=1.0, emitter=(0, 0))


def test_slf_pure_path_loss():
    p = _params(eta=0.0, emitter=(0, 0), ple=2.0)
    slf = generate_slf(32, 32, p, seed=0).data
    assert slf[0, 10] == pytest.approx(10.0**-2, rel=1e-12)
    assert slf[0, 0] == 1.0  # distance clamped at 1 m, gain capped at 1
    assert np.all(slf > 0.0) and np.all(slf <= 1.0)


def test_slf_mean_log_gain_matches_path_loss():
    # shadowing has zero mean, so mean log-gain approaches the path-loss term
    p = _params(xc=8.0, eta=6.0, emitter=(2, 2), ple=2.0)
    cell = (2, 14)  # distance 12, far enough that the unity cap never binds
    logs = [np.log(generate_slf(16, 16, p, seed=s).data[cell]) for s in range(200)]
    pure = np.log(12.0**-2)
    assert abs(np.mean(logs) - pure) <= 0.10 * abs(pure)


def test_slf_emitter_outside_grid():
    with pytest.raises(InvalidArgumentError):
        generate_slf(8, 8, _params(emitter=(8, 0)), seed=0)


def test_psd_single_bump_peak():
    c = generate_psd(64, PsdSpec(((1.0, 32.0, 4.0),)))
    assert c[32] == pytest.approx(1.0)
    assert np.argmax(c) == 32
    assert np.all(c >= 0.0)


def test_psd_two_bumps_additive():
    s1 = PsdSpec(((1.0, 10.0, 2.0),))
    s2 = PsdSpec(((0.5, 50.0, 3.0),))
    both = PsdSpec(s1.components + s2.components)
    assert np.allclose(generate_psd(64, both), generate_psd(64, s1) + generate_psd(64, s2))


def test_psd_symmetry_and_validation():
    c = generate_psd(63, PsdSpec(((2.0, 31.0, 5.0),)))
    assert np.allclose(c[:31], c[32:][::-1])
    with pytest.raises(InvalidArgumentError):
        PsdSpec(())
    with pytest.raises(InvalidArgumentError):
        generate_psd(0, PsdSpec(((1.0, 0.0, 1.0),)))


def test_assemble_map_slab_and_additivity():
    ones = np.ones((3, 4))
    c = np.zeros((5, 1))
    c[2, 0] = 1.0
    X = assemble_map([ones], c).data
    assert np.all(X[:, :, 2] == 1.0)
    assert X.sum() == 12.0
    # two identical emitters double the single-emitter map
    c2 = np.concatenate([c, c], axis=1)
    X2 = assemble_map([ones, ones], c2).data
    assert np.allclose(X2, 2 * X)


def test_assemble_map_matches_loop_oracle():
    rng = np.random.default_rng(7)
    slfs = rng.uniform(0.0, 1.0, (3, 6, 5))
    C = rng.uniform(0.0, 2.0, (4, 3))
    got = assemble_map(list(slfs), C).data
    oracle = np.zeros((6, 5, 4))
    for i in range(6):
        for j in range(5):
            for k in range(4):
                oracle[i, j, k] = sum(slfs[r, i, j] * C[k, r] for r in range(3))
    assert np.max(np.abs(got - oracle)) < 1e-12


def test_assemble_map_validation():
    with pytest.raises(InvalidArgumentError):
        assemble_map([np.ones((2, 2))], np.ones((3, 2)))  # emitter count mismatch
    with pytest.raises(InvalidArgumentError):
        assemble_map([np.ones((2, 2))], -np.ones((3, 1)))


def test_h_transform_properties():
    a = 1e-3
    assert h_transform(0.0, a) == pytest.approx(np.log(a))
    assert h_inverse(h_transform(5.0, a), a) == pytest.approx(5.0, abs=1e-12)
    xs = np.linspace(0.0, 10.0, 101)
    hs = h_transform(xs, a)
    assert np.all(np.diff(hs) > 0.0)
    assert np.all(h_inverse(hs, a) >= 0.0)
    with pytest.raises(InvalidArgumentError):
        h_transform(1.0, 0.0)


def _bins(*interior):
    return np.concatenate(([-np.inf], np.asarray(interior, float), [np.inf]))


def test_quantizer_threshold_case():
    spec = QuantizerSpec(bins=_bins(0.0), sigma=1e-12, a_offset=1e-3, bits=1)
    values = h_inverse(np.array([[-3.0, 3.0]]), 1e-3)
    labels = quantize_fibers(values, spec, seed=0)
    assert labels.tolist() == [[1, 2]]


def test_quantizer_boundary_split():
    # values sitting exactly on a boundary split about 50/50 under unit noise
    spec = QuantizerSpec(bins=_bins(0.0), sigma=1.0, a_offset=1e-3, bits=1)
    values = h_inverse(np.zeros((10_000, 1)), 1e-3)
    labels = quantize_fibers(values, spec, seed=3)
    frac = np.mean(labels == 1)
    assert abs(frac - 0.5) < 0.02


def test_quantizer_labels_in_range():
    spec = design_quantizer(np.linspace(0.0, 5.0, 64).reshape(8, 8), 3, 0.1, 1e-3)
    labels = quantize_fibers(np.linspace(0.0, 9.0, 64).reshape(8, 8), spec, seed=1)
    assert labels.min() >= 1 and labels.max() <= 8


def test_quantizer_interior_determinism():
    # with vanishing noise, strictly interior values quantize deterministically
    spec = QuantizerSpec(bins=_bins(-1.0, 0.0, 1.0), sigma=1e-13, a_offset=1e-3, bits=2)
    v = h_inverse(np.array([[-1.5, -0.5, 0.5, 1.5]]), 1e-3)
    for s in range(5):
        assert quantize_fibers(v, spec, seed=s).tolist() == [[1, 2, 3, 4]]


def test_design_quantizer_structure():
    rng = np.random.default_rng(0)
    values = rng.uniform(0.1, 2.0, (50, 4))
    spec = design_quantizer(values, bits=3, sigma=0.2, a_offset=1e-3)
    assert spec.levels == 8
    assert spec.bins.size == 9
    assert np.isneginf(spec.bins[0]) and np.isposinf(spec.bins[-1])
    widths = np.diff(spec.bins[1:-1])
    assert np.allclose(widths, widths[0])
    # finite boundaries cover mean +- 3 std of the transformed observations
    v = h_transform(values, 1e-3)
    assert spec.bins[1] == pytest.approx(v.mean() - 3 * v.std() + widths[0])
    assert spec.bins[-2] == pytest.approx(v.mean() + 3 * v.std() - widths[0])


def test_quantizer_spec_validation():
    with pytest.raises(InvalidArgumentError):
        QuantizerSpec(bins=_bins(1.0, 0.0, 2.0), sigma=1.0, a_offset=1e-3, bits=2)
    with pytest.raises(InvalidArgumentError):
        QuantizerSpec(bins=np.array([0.0, 1.0, 2.0]), sigma=1.0, a_offset=1e-3, bits=1)
    with pytest.raises(InvalidArgumentError):
        QuantizerSpec(bins=_bins(0.0), sigma=0.0, a_offset=1e-3, bits=1)


def test_dequantize_labels_midpoints():
    spec = QuantizerSpec(bins=_bins(-1.0, 0.0, 1.0), sigma=0.5, a_offset=1e-3, bits=2)
    reps = dequantize_labels(np.array([[1, 2, 3, 4]]), spec)
    assert reps[0, 1] == pytest.approx(-0.5)
    assert reps[0, 2] == pytest.approx(0.5)
    assert reps[0, 0] == pytest.approx(-1.5)  # boundary minus half a bin width
    assert reps[0, 3] == pytest.approx(1.5)
    with pytest.raises(InvalidArgumentError):
        dequantize_labels(np.array([[0]]), spec)


def test_generate_scenario_shapes_and_determinism():
    cfg = ScenarioConfig(I=16, J=12, K=8, R=3, xc=20.0, eta_db=4.0)
    s1 = generate_scenario(cfg, seed=9)
    s2 = generate_scenario(cfg, seed=9)
    assert s1.truth.dims == (16, 12, 8)
    assert len(s1.slfs) == 3 and s1.psd.data.shape == (8, 3)
    assert np.array_equal(s1.truth.data, s2.truth.data)
    assert len({tuple(e) for e in s1.emitters}) == 3
    rebuilt = assemble_map(list(s1.slfs), s1.psd)
    assert np.allclose(rebuilt.data, s1.truth.data)
