"""Evaluation metrics and recoverability-bound calculators.

SSIM uses the standard windowed form with an 11 x 11 Gaussian window
(sigma 1.5), constants k1 = 0.01 and k2 = 0.03, and only fully interior
window positions. Map-level scores are computed per band on log-transformed
maps and averaged, with the dynamic range shared across bands and taken
from the ground-truth log map.

The covering-number calculators evaluate the published two- and three-term
expressions verbatim with natural logarithms. The proposition-style error
terms use implicit constant 1; they are diagnostics, not certified bounds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.signal import correlate

from .core import InvalidArgumentError, RadioMapTensor, RmcError
from .decoder import DecoderArch
from .synth import h_transform

__all__ = [
    "BoundParams",
    "BoundTerms",
    "BoundDomainError",
    "ssim_band",
    "ssim_log_avg",
    "nmse",
    "cover_bound_H",
    "cover_bound_H_terms",
    "cover_bound_Xunn",
    "cover_bound_Xunn_terms",
    "prop_bound_terms",
]


class BoundDomainError(RmcError):
    """A bound formula hit a nonpositive logarithm argument."""


# --------------------------------------------------------------------------
# SSIM and NMSE
# --------------------------------------------------------------------------

def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-(np.arange(size) - half) ** 2 / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_band(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    k1: float = 0.01,
    k2: float = 0.03,
    dynamic_range: float = 1.0,
    sigma: float = 1.5,
) -> float:
    """Structural similarity of two equal-size images; symmetric, in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise InvalidArgumentError(f"images must share a 2-d shape, got {a.shape} vs {b.shape}")
    if window < 1 or window % 2 == 0 or window > min(a.shape):
        raise InvalidArgumentError("window must be odd and fit inside the image")
    if dynamic_range <= 0.0:
        raise InvalidArgumentError("dynamic range must be > 0")
    w = _gaussian_window(window, sigma)
    mu_a = correlate(a, w, mode="valid", method="direct")
    mu_b = correlate(b, w, mode="valid", method="direct")
    m_aa = correlate(a * a, w, mode="valid", method="direct")
    m_bb = correlate(b * b, w, mode="valid", method="direct")
    m_ab = correlate(a * b, w, mode="valid", method="direct")
    var_a = m_aa - mu_a**2
    var_b = m_bb - mu_b**2
    cov = m_ab - mu_a * mu_b
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    ssim_map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(ssim_map.mean())


def ssim_log_avg(truth: RadioMapTensor, estimate: RadioMapTensor, a_offset: float) -> float:
    """Band-averaged SSIM between log-transformed truth and estimate."""
    if truth.dims != estimate.dims:
        raise InvalidArgumentError(f"dims differ: {truth.dims} vs {estimate.dims}")
    log_truth = h_transform(truth.data, a_offset)
    log_est = h_transform(estimate.data, a_offset)
    dr = max(float(log_truth.max() - log_truth.min()), 1e-12)
    scores = [
        ssim_band(log_truth[:, :, k], log_est[:, :, k], dynamic_range=dr)
        for k in range(truth.dims[2])
    ]
    return float(np.mean(scores))


def nmse(truth: RadioMapTensor, estimate: RadioMapTensor) -> float:
    """Normalized squared error ||X - Xhat||_F^2 / ||X||_F^2."""
    if truth.dims != estimate.dims:
        raise InvalidArgumentError(f"dims differ: {truth.dims} vs {estimate.dims}")
    denom = float(np.sum(truth.data**2))
    if denom == 0.0:
        raise InvalidArgumentError("ground truth is identically zero")
    return float(np.sum((truth.data - estimate.data) ** 2)) / denom


# --------------------------------------------------------------------------
# Covering-number and error-bound calculators
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundParams:
    """Constants of the solution-set complexity bounds.

    R emitters over K bins; latent side D0; depth L with max width W;
    spectral-norm cap s, (2,1)-norm cap b, latent cap a, PSD cap kappa,
    field Frobenius cap gamma; P the product of squared activation
    Lipschitz constants; epsilon the cover radius; N the sample count.
    delta (failure probability) and nu (model misspecification) ride along
    for reporting; the displayed expressions do not use delta.
    """

    R: int = 1
    K: int = 64
    D0: int = 4
    L: int = 4
    W: int = 6
    s: float = 1.0
    b: float = 1.0
    a: float = 1.0
    kappa: float = 1.0
    gamma: float = 1.0
    P: float = 1.0
    epsilon: float = 1.0
    N: int = 1
    delta: float = 0.05
    nu: float = 0.0
    I: int = 0
    J: int = 0

    def __post_init__(self) -> None:
        positive = {
            "R": self.R, "K": self.K, "D0": self.D0, "L": self.L, "W": self.W,
            "s": self.s, "b": self.b, "a": self.a, "kappa": self.kappa,
            "gamma": self.gamma, "P": self.P, "epsilon": self.epsilon, "N": self.N,
        }
        for name, value in positive.items():
            if value <= 0:
                raise InvalidArgumentError(f"{name} must be > 0, got {value}")
        if self.nu < 0.0:
            raise InvalidArgumentError("nu must be >= 0")

    @classmethod
    def from_arch(cls, arch: DecoderArch, **overrides) -> "BoundParams":
        """Derive the architectural constants; activations count as 1-Lipschitz."""
        fields = dict(
            D0=arch.d0,
            L=arch.blocks,
            W=max(arch.channels[1:-1]),
            P=1.0,
        )
        fields.update(overrides)
        return cls(**fields)


class BoundTerms(NamedTuple):
    term1: float
    term2: float
    nu: float


def _checked_log(value: float, label: str) -> float:
    if value <= 0.0:
        raise BoundDomainError(f"log argument {label} = {value} is not positive")
    if value <= 1.0:
        warnings.warn(
            f"log argument {label} = {value} <= 1 makes its bound term nonpositive",
            stacklevel=3,
        )
    return float(np.log(value))


def cover_bound_H_terms(p: BoundParams) -> tuple[float, float]:
    """Both terms of the shared-decoder function-class cover bound."""
    term1 = (
        4.0 * p.a**2 * p.b**2 * p.P * _checked_log(2.0 * p.W**2, "2W^2")
        * p.s ** (2 * p.L - 2) * p.L**3 / p.epsilon**2
    )
    term2 = p.D0**2 * _checked_log(6.0 * p.P * p.a / p.epsilon, "6Pa/eps")
    return term1, term2


def cover_bound_H(p: BoundParams) -> float:
    """Log covering number bound for the decoder output class."""
    return sum(cover_bound_H_terms(p))


def cover_bound_Xunn_terms(p: BoundParams) -> tuple[float, float, float]:
    """All three terms of the factored solution-set cover bound."""
    kg = p.kappa + p.gamma
    term1 = (
        p.R**3 * kg * p.a**2 * p.b**2 * p.P * _checked_log(2.0 * p.W**2, "2W^2")
        * p.s ** (2 * p.L - 2) * p.L**3 / p.epsilon**2
    )
    term2 = p.R * p.D0**2 * _checked_log(6.0 * p.R * p.P * p.a * kg / p.epsilon, "6RPa(k+g)/eps")
    term3 = p.R * p.K * _checked_log(3.0 * p.R * p.kappa * kg / p.epsilon, "3Rk(k+g)/eps")
    return term1, term2, term3


def cover_bound_Xunn(p: BoundParams) -> float:
    """Log covering number bound for the factored solution set."""
    return sum(cover_bound_Xunn_terms(p))


def prop_bound_terms(p: BoundParams, quantized: bool = False) -> BoundTerms:
    """Error-bound terms with implicit constant 1 (diagnostic, not certified).

    Full precision: (R / sqrt(N), cover^(1/4) / (sqrt(K) N^(1/4))).
    Quantized: (sqrt(R) / (K sqrt(N)), sqrt(cover / N)).
    """
    log_cover = cover_bound_Xunn(p)
    if quantized:
        term1 = np.sqrt(p.R) / (p.K * np.sqrt(p.N))
        term2 = np.sqrt(max(log_cover, 0.0) / p.N)
    else:
        term1 = p.R / np.sqrt(p.N)
        term2 = max(log_cover, 0.0) ** 0.25 / (np.sqrt(p.K) * p.N**0.25)
    return BoundTerms(float(term1), float(term2), p.nu)
