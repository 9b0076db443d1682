"""Synthetic radio maps and the sensing channel.

Ground truth follows the standard propagation model: each emitter has a
spatial loss field built from inverse-power path loss times log-normal
shadowing with an exponential spatial correlation kernel, and a PSD built
by summing scaled Gaussian bumps over frequency bins. The map is the sum of
SLF x PSD outer products. Grid cells are 1 m^2, so Euclidean distance in
cell units is distance in meters.

The sensing channel reports h(x) = log(x + a) per observed value. The
quantized channel adds Gaussian noise in the h-domain and bins the result.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from .core import (
    FiberMeasurements,
    InvalidArgumentError,
    PsdMatrix,
    RadioMapTensor,
    SlfMatrix,
    derive_seed,
    substream,
)

__all__ = [
    "ShadowingParams",
    "PsdSpec",
    "QuantizerSpec",
    "ScenarioConfig",
    "Scenario",
    "shadowing_field",
    "generate_slf",
    "generate_psd",
    "sample_psd_spec",
    "assemble_map",
    "h_transform",
    "h_inverse",
    "design_quantizer",
    "quantize_fibers",
    "dequantize_labels",
    "generate_scenario",
]


@dataclass(frozen=True)
class ShadowingParams:
    """Path-loss and log-normal shadowing parameters for one emitter.

    xc is the shadowing decorrelation distance in meters, eta_db the
    shadowing standard deviation in dB.
    """

    xc: float
    eta_db: float
    emitter: tuple[int, int]
    path_loss_exponent: float = 2.0

    def __post_init__(self) -> None:
        if self.xc <= 0.0:
            raise InvalidArgumentError(f"decorrelation distance must be > 0, got {self.xc}")
        if self.eta_db < 0.0:
            raise InvalidArgumentError(f"shadowing std must be >= 0, got {self.eta_db}")
        if self.path_loss_exponent <= 0.0:
            raise InvalidArgumentError("path loss exponent must be > 0")


@dataclass(frozen=True)
class PsdSpec:
    """Gaussian-bump mixture over K frequency bins: (amplitude, center, width)."""

    components: tuple[tuple[float, float, float], ...]

    def __post_init__(self) -> None:
        if len(self.components) == 0:
            raise InvalidArgumentError("PSD spec needs at least one component")
        for amp, _, width in self.components:
            if amp <= 0.0 or width <= 0.0:
                raise InvalidArgumentError("bump amplitudes and widths must be > 0")


@dataclass(frozen=True)
class QuantizerSpec:
    """Gaussian quantization channel: bin boundaries, noise std, h-offset.

    ``bins`` holds the L+1 boundaries b_0 < ... < b_L with b_0 = -inf and
    b_L = +inf, where L = 2**bits. A transformed value x maps to label l
    when b_{l-1} < x <= b_l.
    """

    bins: np.ndarray
    sigma: float
    a_offset: float
    bits: int

    def __post_init__(self) -> None:
        bins = np.array(self.bins, dtype=np.float64, copy=True)
        if self.bits < 1:
            raise InvalidArgumentError("bit depth must be >= 1")
        levels = 1 << self.bits
        if bins.ndim != 1 or bins.size != levels + 1:
            raise InvalidArgumentError(f"need {levels + 1} boundaries for {self.bits} bits")
        if not (np.isneginf(bins[0]) and np.isposinf(bins[-1])):
            raise InvalidArgumentError("outer boundaries must be -inf and +inf")
        if not np.all(np.diff(bins) > 0.0):
            raise InvalidArgumentError("bin boundaries must be strictly increasing")
        if self.sigma <= 0.0:
            raise InvalidArgumentError("noise std must be > 0")
        if self.a_offset <= 0.0:
            raise InvalidArgumentError("transform offset must be > 0")
        bins.setflags(write=False)
        object.__setattr__(self, "bins", bins)

    @property
    def levels(self) -> int:
        return 1 << self.bits


def h_transform(x, a_offset: float):
    """Dynamic-range compression h(x) = ln(x + a), elementwise."""
    if a_offset <= 0.0:
        raise InvalidArgumentError("transform offset must be > 0")
    return np.log(np.asarray(x, dtype=np.float64) + a_offset)


def h_inverse(y, a_offset: float):
    """Inverse transform, clamped at zero: max(0, exp(y) - a)."""
    if a_offset <= 0.0:
        raise InvalidArgumentError("transform offset must be > 0")
    return np.maximum(0.0, np.exp(np.asarray(y, dtype=np.float64)) - a_offset)


@functools.lru_cache(maxsize=2)
def _shadowing_factor(I: int, J: int, xc: float, eta_db: float) -> np.ndarray:
    """Lower Cholesky factor of the eta^2 * exp(-d / xc) grid covariance."""
    coords = np.stack(
        np.meshgrid(np.arange(I, dtype=np.float64), np.arange(J, dtype=np.float64), indexing="ij"),
        axis=-1,
    ).reshape(-1, 2)
    cov = eta_db**2 * np.exp(-cdist(coords, coords) / xc)
    cov[np.diag_indices_from(cov)] += 1e-10 * eta_db**2
    return scipy.linalg.cholesky(cov, lower=True, overwrite_a=True, check_finite=False)


def shadowing_field(I: int, J: int, params: ShadowingParams, seed: int) -> np.ndarray:
    """Zero-mean Gaussian field (dB) with covariance eta^2 exp(-d / xc).

    Sampled exactly by Cholesky factorization of the full grid covariance;
    the factor is cached across calls with the same (I, J, xc, eta).
    """
    if I < 1 or J < 1:
        raise InvalidArgumentError("grid dims must be positive")
    if params.eta_db == 0.0:
        return np.zeros((I, J))
    factor = _shadowing_factor(I, J, params.xc, params.eta_db)
    z = substream(seed, "shadowing").standard_normal(I * J)
    return (factor @ z).reshape(I, J)


def generate_slf(I: int, J: int, params: ShadowingParams, seed: int) -> SlfMatrix:
    """Spatial loss field: min(1, d^-pl * 10^(shadow_dB / 10)), d clamped at 1 m."""
    ei, ej = params.emitter
    if not (0 <= ei < I and 0 <= ej < J):
        raise InvalidArgumentError(f"emitter {params.emitter} outside {I}x{J} grid")
    ii, jj = np.meshgrid(np.arange(I, dtype=np.float64), np.arange(J, dtype=np.float64), indexing="ij")
    dist = np.maximum(1.0, np.hypot(ii - ei, jj - ej))
    shadow = shadowing_field(I, J, params, seed)
    gain = dist ** (-params.path_loss_exponent) * 10.0 ** (shadow / 10.0)
    return SlfMatrix(np.minimum(1.0, gain))


def generate_psd(K: int, spec: PsdSpec) -> np.ndarray:
    """Length-K nonnegative PSD: sum of Gaussian bumps over bin index."""
    if K < 1:
        raise InvalidArgumentError("number of bins must be positive")
    k = np.arange(K, dtype=np.float64)
    psd = np.zeros(K)
    for amp, center, width in spec.components:
        psd += amp * np.exp(-((k - center) ** 2) / (2.0 * width**2))
    return psd


def sample_psd_spec(
    K: int,
    rng: np.random.Generator,
    *,
    components: tuple[int, int] = (2, 4),
    amplitude: tuple[float, float] = (0.5, 2.0),
    width: tuple[float, float] = (2.0, 6.0),
) -> PsdSpec:
    """Draw a random bump mixture: count, amplitudes, centers, and widths."""
    n = int(rng.integers(components[0], components[1] + 1))
    amps = rng.uniform(amplitude[0], amplitude[1], n)
    centers = rng.uniform(0.0, K, n)
    widths = rng.uniform(width[0], width[1], n)
    return PsdSpec(tuple(zip(amps.tolist(), centers.tolist(), widths.tolist())))


def assemble_map(slfs, psd) -> RadioMapTensor:
    """Sum of outer products: X(i,j,k) = sum_r S_r(i,j) * C(k,r)."""
    fields = np.stack([s.data if isinstance(s, SlfMatrix) else np.asarray(s, float) for s in slfs])
    C = psd.data if isinstance(psd, PsdMatrix) else np.asarray(psd, dtype=np.float64)
    if C.ndim != 2 or C.shape[1] != fields.shape[0]:
        raise InvalidArgumentError(
            f"PSD matrix shape {C.shape} does not match {fields.shape[0]} emitters"
        )
    if np.any(C < 0.0):
        raise InvalidArgumentError("PSD entries must be >= 0")
    return RadioMapTensor(np.einsum("rij,kr->ijk", fields, C))


# --------------------------------------------------------------------------
# Quantized channel
# --------------------------------------------------------------------------

def design_quantizer(
    observed_values: np.ndarray,
    bits: int,
    sigma: float,
    a_offset: float,
) -> QuantizerSpec:
    """Uniform-in-h quantizer fitted to the observed linear-power values.

    The finite span covers mean +- 3 std of the transformed observations,
    split into 2**bits equal bins whose two outer bins extend to infinity.
    """
    v = h_transform(np.asarray(observed_values, dtype=np.float64).ravel(), a_offset)
    if v.size == 0:
        raise InvalidArgumentError("need at least one observed value")
    mu, sd = float(np.mean(v)), float(np.std(v))
    if sd == 0.0:
        sd = max(1e-6, abs(mu) * 1e-6)
    levels = 1 << bits
    interior = np.linspace(mu - 3.0 * sd, mu + 3.0 * sd, levels + 1)[1:-1]
    bins = np.concatenate(([-np.inf], interior, [np.inf]))
    return QuantizerSpec(bins=bins, sigma=sigma, a_offset=a_offset, bits=bits)


def quantize_fibers(measurements, spec: QuantizerSpec, seed: int) -> np.ndarray:
    """Quantize linear-power fibers: labels Q(h(x) + noise) in [1, 2**bits]."""
    values = measurements.values if isinstance(measurements, FiberMeasurements) else measurements
    v = h_transform(values, spec.a_offset)
    noise = substream(seed, "quantizer-noise").normal(0.0, spec.sigma, size=v.shape)
    return np.searchsorted(spec.bins, v + noise, side="left").astype(np.int64)


def dequantize_labels(labels: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Representative h-domain value per label (bin midpoints).

    The two unbounded bins take the adjacent finite boundary offset by half
    a bin width (one noise std when only a single finite boundary exists).
    This is plumbing for warm starts and classical baselines on quantized
    data, not part of the likelihood.
    """
    labels = np.asarray(labels)
    if np.any(labels < 1) or np.any(labels > spec.levels):
        raise InvalidArgumentError("label out of range")
    lo = spec.bins[labels - 1]
    hi = spec.bins[labels]
    half_width = (spec.bins[2] - spec.bins[1]) / 2.0 if spec.levels > 2 else spec.sigma
    mid = (lo + hi) / 2.0
    mid = np.where(np.isneginf(lo), hi - half_width, mid)
    mid = np.where(np.isposinf(hi), lo + half_width, mid)
    return mid


# --------------------------------------------------------------------------
# Whole-scenario generation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    """Ground-truth generation parameters for one synthetic scenario."""

    I: int = 64
    J: int = 64
    K: int = 64
    R: int = 2
    xc: float = 90.0
    eta_db: float = 6.0
    path_loss_exponent: float = 2.0
    psd_components: tuple[int, int] = (2, 4)
    psd_amplitude: tuple[float, float] = (0.5, 2.0)
    psd_width: tuple[float, float] = (2.0, 6.0)

    def __post_init__(self) -> None:
        if min(self.I, self.J, self.K, self.R) < 1:
            raise InvalidArgumentError("I, J, K, R must all be >= 1")


@dataclass(frozen=True, eq=False)
class Scenario:
    """A generated ground truth with its per-emitter factors."""

    truth: RadioMapTensor
    slfs: tuple[SlfMatrix, ...]
    psd: PsdMatrix
    emitters: tuple[tuple[int, int], ...]


def generate_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    """Draw emitter locations, SLFs, and PSDs, and assemble the map."""
    I, J, K, R = config.I, config.J, config.K, config.R
    flat = substream(seed, "emitters").choice(I * J, size=R, replace=False)
    emitters = tuple((int(f) // J, int(f) % J) for f in flat)
    slfs = []
    cols = []
    for r, emitter in enumerate(emitters):
        params = ShadowingParams(
            xc=config.xc,
            eta_db=config.eta_db,
            emitter=emitter,
            path_loss_exponent=config.path_loss_exponent,
        )
        slfs.append(generate_slf(I, J, params, derive_seed(seed, "slf", r)))
        spec = sample_psd_spec(
            K,
            substream(seed, "psd", r),
            components=config.psd_components,
            amplitude=config.psd_amplitude,
            width=config.psd_width,
        )
        cols.append(generate_psd(K, spec))
    psd = PsdMatrix(np.stack(cols, axis=1))
    return Scenario(
        truth=assemble_map(slfs, psd),
        slfs=tuple(slfs),
        psd=psd,
        emitters=emitters,
    )
