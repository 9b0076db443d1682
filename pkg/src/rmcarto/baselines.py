"""Training-free comparison methods.

All baselines consume the sensor payload: h-transformed fibers at the
observed cells (for quantized runs, dequantized label representatives).
Interpolation works directly in the h-domain and inverts the transform at
the end; the low-rank solver and the unfactored decoder model linear power,
matching the factorization they fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    InvalidArgumentError,
    RadioMapTensor,
    RmcError,
    SamplingMask,
    derive_seed,
    substream,
)
from .decoder import DecoderArch, backward_pass, count_params, forward_pass, init_params
from .solver import Adam, DivergedError, SolverConfig
from .synth import QuantizerSpec, h_inverse
from .objectives import _bin_log_prob_and_slope

__all__ = [
    "BtdConfig",
    "BtdResult",
    "NaiveResult",
    "InfeasibleBudgetError",
    "idw_interpolate",
    "btd_recover",
    "naive_budget_arch",
    "naive_unn_recover",
]

SHARED_PARAM_BUDGET = 1080  # shared-decoder scalar count the per-emitter budget builds on
LATENT_PER_EMITTER = 16


class InfeasibleBudgetError(RmcError):
    """No width assignment lands inside the fairness parameter budget."""


@dataclass(frozen=True)
class BtdConfig:
    """Low-rank block solver knobs: per-emitter SLF rank and loop control.

    Alternating least squares is sensitive to its starting point, so the
    solver runs ``restarts`` seeded initializations and keeps the run with
    the lowest damped objective.
    """

    rank: int = 4
    iters: int = 80
    tol: float = 1e-6
    damping: float = 1e-8
    restarts: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise InvalidArgumentError("SLF rank must be >= 1")
        if self.iters < 1 or self.restarts < 1:
            raise InvalidArgumentError("iteration and restart counts must be >= 1")


@dataclass(eq=False)
class BtdResult:
    estimate: RadioMapTensor
    trace: np.ndarray  # damped objective after each block cycle
    A: np.ndarray  # (R, I, rank)
    B: np.ndarray  # (R, J, rank)
    C: np.ndarray  # (K, R)


@dataclass(eq=False)
class NaiveResult:
    estimate: RadioMapTensor
    trace: np.ndarray
    param_count: int
    arch: DecoderArch


def idw_interpolate(
    measurements: np.ndarray,
    mask: SamplingMask,
    dims: tuple[int, int],
    power_p: float = 2.0,
    *,
    a_offset: float,
) -> RadioMapTensor:
    """Inverse-distance-weighted interpolation per band, in the h-domain.

    Observed cells reproduce their measurement exactly; every other cell is
    the d^-p weighted average of all sensors, inverted back to linear power.
    """
    y = np.asarray(measurements, dtype=np.float64)
    I, J = dims
    if y.ndim != 2 or y.shape[0] != mask.n:
        raise InvalidArgumentError(f"measurements must be (N, K) with N={mask.n}")
    if mask.n < 1:
        raise InvalidArgumentError("need at least one sensor")
    if power_p <= 0.0:
        raise InvalidArgumentError("distance power must be > 0")
    cells = np.stack(
        np.meshgrid(np.arange(I, dtype=np.float64), np.arange(J, dtype=np.float64), indexing="ij"),
        axis=-1,
    ).reshape(-1, 2)
    sensors = mask.locations.astype(np.float64)
    dist = np.sqrt(
        np.maximum(
            0.0,
            (cells**2).sum(1)[:, None] + (sensors**2).sum(1)[None, :] - 2.0 * cells @ sensors.T,
        )
    )
    with np.errstate(divide="ignore"):
        w = dist ** (-power_p)
    observed_rows = mask.flat_indices()
    w[observed_rows] = 0.0  # replaced by exact assignment below
    est = np.zeros((I * J, y.shape[1]))
    free = np.ones(I * J, dtype=bool)
    free[observed_rows] = False
    est[free] = (w[free] @ y) / w[free].sum(axis=1, keepdims=True)
    est[observed_rows] = y
    return RadioMapTensor(h_inverse(est.reshape(I, J, -1), a_offset))


# --------------------------------------------------------------------------
# BTD-style low-rank recovery
# --------------------------------------------------------------------------

def _btd_objective(y, w, locs, A, B, C, damping):
    s_obs = np.einsum("ril,rjl->rij", A, B)[:, locs[:, 0], locs[:, 1]].T
    resid = (y - s_obs @ C.T) * w
    penalty = damping * (np.sum(A * A) + np.sum(B * B) + np.sum(C * C))
    return float(np.sum(resid * resid) + penalty)


def _ridge_solve(F, rhs, damp):
    """Tikhonov least squares, stable under rank deficiency."""
    dim = F.shape[1]
    gram = F.T @ F + damp * np.eye(dim)
    try:
        return np.linalg.solve(gram, F.T @ rhs)
    except np.linalg.LinAlgError:
        aug = np.vstack([F, np.sqrt(damp) * np.eye(dim)])
        target = np.concatenate([rhs, np.zeros(dim)])
        return np.linalg.lstsq(aug, target, rcond=None)[0]


def _btd_run(y, w, locs, I, J, K, R, config, seed):
    L = config.rank
    damp = config.damping
    rng = substream(seed, "btd-init")
    norm_scale = math.sqrt(max(float(np.mean(np.abs(y))), 1e-12))
    A = rng.uniform(0.0, norm_scale / math.sqrt(L), (R, I, L))
    B = rng.uniform(0.0, norm_scale / math.sqrt(L), (R, J, L))
    C = rng.uniform(0.0, 1.0, (K, R))
    yw = y * w

    rows = [np.flatnonzero(locs[:, 0] == i) for i in range(I)]
    cols = [np.flatnonzero(locs[:, 1] == j) for j in range(J)]

    trace = []
    prev = None
    for _ in range(config.iters):
        # A block: per spatial row, features B_r(j, l) * c_r(k)
        feat_b = np.einsum("rjl,kr->jkrl", B, C).reshape(J, K, R * L)
        for i in range(I):
            sel = rows[i]
            if sel.size == 0:
                continue
            F = feat_b[locs[sel, 1]] * w[sel][:, :, None]
            F = F.reshape(-1, R * L)
            A[:, i, :] = _ridge_solve(F, yw[sel].reshape(-1), damp).reshape(R, L)

        # B block: per spatial column, features A_r(i, l) * c_r(k)
        feat_a = np.einsum("ril,kr->ikrl", A, C).reshape(I, K, R * L)
        for j in range(J):
            sel = cols[j]
            if sel.size == 0:
                continue
            F = feat_a[locs[sel, 0]] * w[sel][:, :, None]
            F = F.reshape(-1, R * L)
            B[:, j, :] = _ridge_solve(F, yw[sel].reshape(-1), damp).reshape(R, L)

        # C block: per band, y(:, k) ~ diag(w(:, k)) S_obs c(k, :), then clamp
        s_obs = np.einsum("ril,rjl->rij", A, B)[:, locs[:, 0], locs[:, 1]].T
        for k in range(K):
            C[k] = _ridge_solve(s_obs * w[:, k][:, None], yw[:, k], damp)
        np.maximum(C, 0.0, out=C)

        # balance the A/B column scales; products are invariant, so the fit
        # term is unchanged and the damped penalty cannot increase
        na = np.linalg.norm(A, axis=1)
        nb = np.linalg.norm(B, axis=1)
        ok = (na > 0.0) & (nb > 0.0)
        g = np.where(ok, np.sqrt(na * nb), 1.0)
        A *= np.where(ok, g / np.where(ok, na, 1.0), 1.0)[:, None, :]
        B *= np.where(ok, g / np.where(ok, nb, 1.0), 1.0)[:, None, :]

        obj = _btd_objective(y, w, locs, A, B, C, damp)
        trace.append(obj)
        if prev is not None and abs(prev - obj) / max(1.0, abs(prev)) < config.tol:
            break
        prev = obj
    return trace[-1], A, B, C, trace


def btd_recover(
    measurements: np.ndarray,
    mask: SamplingMask,
    dims: tuple[int, int],
    R: int,
    config: BtdConfig,
    *,
    a_offset: float,
) -> BtdResult:
    """Fit sum_r (A_r B_r^T) outer c_r to the observed fibers in linear power.

    The squared error is weighted by 1 / (x + a)^2 per observed entry, the
    local metric of the h-transform, so the fit tracks the map across its
    whole dynamic range instead of only the near-emitter cells; the factor
    model itself stays linear so every block update is exact (weighted)
    least squares. Blocks cycle as A rows, B columns, then C, with Tikhonov
    damping; c_r are clamped nonnegative after their update. The damped
    objective is non-increasing within a run whenever the clamp is
    inactive; the best of ``config.restarts`` seeded runs is returned.
    """
    I, J = dims
    y = h_inverse(np.asarray(measurements, dtype=np.float64), a_offset)
    if y.ndim != 2 or y.shape[0] != mask.n:
        raise InvalidArgumentError(f"measurements must be (N, K) with N={mask.n}")
    if R < 1:
        raise InvalidArgumentError("emitter count must be >= 1")
    if config.rank > min(I, J):
        raise InvalidArgumentError("SLF rank cannot exceed the grid side")
    K = y.shape[1]
    locs = mask.locations
    w = 1.0 / (y + a_offset)

    best = None
    for attempt in range(config.restarts):
        run = _btd_run(y, w, locs, I, J, K, R, config, derive_seed(config.seed, "restart", attempt))
        if best is None or run[0] < best[0]:
            best = run
    _, A, B, C, trace = best

    fields = np.einsum("ril,rjl->rij", A, B)
    estimate = np.maximum(np.einsum("rij,kr->ijk", fields, C), 0.0)
    return BtdResult(RadioMapTensor(estimate), np.asarray(trace), A, B, C)


# --------------------------------------------------------------------------
# Naive (unfactored) decoder with a matched parameter budget
# --------------------------------------------------------------------------

def naive_budget_arch(
    dims: tuple[int, int],
    K: int,
    R: int,
    *,
    d0: int = 4,
    kernel: int = 3,
    tolerance: float = 0.05,
    max_width: int = 12,
) -> DecoderArch:
    """Pick per-layer widths so weights + latent land within the fairness budget.

    The budget is SHARED_PARAM_BUDGET + LATENT_PER_EMITTER * R scalars, the
    cost of the factored model. Widths are enumerated and the assignment
    closest to the budget wins (ties prefer balanced, then wider layers).
    """
    I, J = dims
    if I != J:
        raise InvalidArgumentError("the unfactored decoder needs a square grid")
    ratio = I // d0
    blocks = int(ratio).bit_length() - 1
    if d0 * (1 << blocks) != I:
        raise InvalidArgumentError(f"grid side {I} is not d0 * 2^L with d0={d0}")
    budget = SHARED_PARAM_BUDGET + LATENT_PER_EMITTER * R

    best = None
    for widths in np.ndindex(*([max_width] * blocks)):
        chain = (1,) + tuple(w + 1 for w in widths) + (K,)
        arch = DecoderArch(blocks=blocks, channels=chain, kernel=kernel, d0=d0)
        total = count_params(arch) + arch.latent_dim
        key = (abs(total - budget), float(np.var(chain[1:-1])), -min(chain[1:-1]), chain)
        if best is None or key < best[0]:
            best = (key, arch, total)
    _, arch, total = best
    if abs(total - budget) > tolerance * budget:
        raise InfeasibleBudgetError(
            f"no width assignment within {tolerance:.0%} of {budget} parameters "
            f"(closest: {total})"
        )
    return arch


def naive_unn_recover(
    measurements: np.ndarray,
    mask: SamplingMask,
    dims: tuple[int, int],
    R: int,
    config: SolverConfig,
    seed: int,
    *,
    loss_kind: str = "fp",
    a_offset: float | None = None,
    quantizer: QuantizerSpec | None = None,
) -> NaiveResult:
    """Recover the whole tensor with one decoder emitting K channels directly.

    The Sigmoid output is mapped to power units by a fixed data-driven scale
    (largest observed linear power; for quantized data, the inverse
    transform of the top finite bin boundary plus one noise std), so the
    parameter budget stays exact. Optimized with the same Adam loop and
    stopping rule as the factored solver.
    """
    data = np.asarray(measurements)
    I, J = dims
    K = data.shape[1]
    arch = naive_budget_arch(dims, K, R)
    theta, z = init_params(arch, "uniform", derive_seed(seed, "naive-init"), R=1)

    ii, jj = mask.locations[:, 0], mask.locations[:, 1]
    if loss_kind == "fp":
        if a_offset is None:
            raise InvalidArgumentError("full-precision loss needs a_offset")
        y = data.astype(np.float64)
        scale = float(np.max(h_inverse(y, a_offset)))
        offset = a_offset
    elif loss_kind == "quantized":
        if quantizer is None:
            raise InvalidArgumentError("quantized loss needs a quantizer spec")
        labels = data.astype(np.int64)
        offset = quantizer.a_offset
        scale = float(h_inverse(quantizer.bins[-2] + quantizer.sigma, offset))
    else:
        raise InvalidArgumentError(f"unknown loss kind {loss_kind!r}")
    if scale <= 0.0:
        scale = 1.0

    reg = config.reg
    params = [z] + theta.as_arrays()
    adam = Adam(params, config.beta, config.adam)

    def evaluate():
        out, tr = forward_pass(theta, z, arch)  # (1, K, I, J)
        x_obs = scale * out[0, :, ii, jj]  # (N, K)
        if loss_kind == "fp":
            resid = y - np.log(x_obs + offset)
            value = float(np.sum(resid * resid))
            d_x = -2.0 * resid / (x_obs + offset)
        else:
            v = np.log(x_obs + offset)
            u_hi = (quantizer.bins[labels] - v) / quantizer.sigma
            u_lo = (quantizer.bins[labels - 1] - v) / quantizer.sigma
            logp, slope = _bin_log_prob_and_slope(u_lo, u_hi)
            value = -float(np.sum(logp))
            d_x = slope / quantizer.sigma / (x_obs + offset)
        value += reg.lambda1 * float(np.sum(z * z))
        value += reg.lambda3 * (
            sum(float(np.sum(w * w)) for w in theta.conv) + float(np.sum(theta.head**2))
        )
        d_out = np.zeros_like(out)
        d_out[0, :, ii, jj] = scale * d_x
        d_theta, d_z = backward_pass(theta, arch, tr, d_out)
        d_z += 2.0 * reg.lambda1 * z
        for b in range(arch.blocks):
            d_theta.conv[b] += 2.0 * reg.lambda3 * theta.conv[b]
        d_theta.head += 2.0 * reg.lambda3 * theta.head
        return value, out, [d_z] + d_theta.as_arrays()

    trace: list[float] = []
    prev = None
    flat_streak = 0
    last_out = None
    for it in range(config.max_iter):
        value, out, grads = evaluate()
        if not np.isfinite(value):
            est = RadioMapTensor(scale * np.transpose(last_out[0], (1, 2, 0)))
            raise DivergedError(f"loss became non-finite at iteration {it}", est, np.asarray(trace))
        trace.append(value)
        last_out = out
        if prev is not None and abs(value - prev) / max(1.0, abs(prev)) < config.tol:
            flat_streak += 1
            if flat_streak >= config.patience:
                break
        else:
            flat_streak = 0
        prev = value
        adam.step(grads)

    out, _ = forward_pass(theta, z, arch)
    estimate = RadioMapTensor(scale * np.transpose(out[0], (1, 2, 0)))
    return NaiveResult(
        estimate=estimate,
        trace=np.asarray(trace),
        param_count=count_params(arch) + arch.latent_dim,
        arch=arch,
    )
