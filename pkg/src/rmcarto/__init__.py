"""Spectrum cartography toolkit.

Synthesizes multi-emitter radio maps, simulates sparse (optionally
quantized) sensor measurements, and reconstructs the full spatio-spectral
map by fitting a domain-factored untrained deep decoder, alongside
classical baselines, SSIM evaluation, and recoverability-bound calculators.
"""

from . import analysis, baselines, cli, core, decoder, objectives, solver, synth
from .core import RadioMapTensor, SamplingMask, mask_sample, apply_mask, tensor_read, tensor_write

__version__ = "0.1.0"

__all__ = [
    "analysis",
    "baselines",
    "cli",
    "core",
    "decoder",
    "objectives",
    "solver",
    "synth",
    "RadioMapTensor",
    "SamplingMask",
    "mask_sample",
    "apply_mask",
    "tensor_read",
    "tensor_write",
    "__version__",
]
