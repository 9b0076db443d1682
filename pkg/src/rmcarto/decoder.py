"""Domain-factored untrained deep decoder.

One shared set of weights generates every emitter's spatial loss field from
its own latent code. Each up-block applies 2x bilinear upsampling, an n x n
same-padding convolution without bias, ReLU, and per-channel normalization
over spatial positions with a learnable affine pair. The head is a 1 x 1
convolution followed by a Sigmoid, so outputs live strictly in (0, 1).

Gradients are hand-derived adjoints of this fixed op set (no autodiff
framework); they are exact vector-Jacobian products, validated against
central finite differences in the test suite. ReLU takes subgradient 0 at 0
and the normalization is differentiated through both mean and std.

Serialized weight files carry the header ``UNN1 <L> <k_0..k_{L+1}> <n> <D0>``
followed by little-endian float64 scalars, per block: convolution kernel
(row-major), normalization scale, normalization shift; then the head kernel.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import InvalidArgumentError, SlfMatrix, RadioMapTensor, substream

__all__ = [
    "DecoderArch",
    "DecoderParams",
    "count_params",
    "layer_param_counts",
    "forward",
    "forward_all",
    "backward",
    "forward_pass",
    "backward_pass",
    "init_params",
    "save_params",
    "load_params",
]


@dataclass(frozen=True)
class DecoderArch:
    """Decoder shape: block count, channel chain k_0..k_{L+1}, kernel, latent side.

    The spatial side doubles per block, so the output side is d0 * 2**blocks.
    The factored SLF decoder uses channels[-1] == 1; multi-channel heads are
    allowed for the unfactored baseline.
    """

    blocks: int
    channels: tuple[int, ...]
    kernel: int = 3
    d0: int = 4
    norm_epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if self.blocks < 1:
            raise InvalidArgumentError("need at least one up-block")
        if len(self.channels) != self.blocks + 2:
            raise InvalidArgumentError(
                f"channel chain must list k_0..k_{{L+1}} ({self.blocks + 2} entries), "
                f"got {len(self.channels)}"
            )
        if self.channels[0] != 1:
            raise InvalidArgumentError("input channel count k_0 must be 1")
        if min(self.channels) < 1:
            raise InvalidArgumentError("channel widths must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidArgumentError("kernel size must be odd and positive")
        if self.d0 < 1:
            raise InvalidArgumentError("latent side must be positive")
        if self.norm_epsilon <= 0.0:
            raise InvalidArgumentError("norm epsilon must be > 0")

    @property
    def out_side(self) -> int:
        return self.d0 * (1 << self.blocks)

    @property
    def latent_dim(self) -> int:
        return self.d0 * self.d0

    @classmethod
    def default(cls, out_side: int = 64, width: int = 6, kernel: int = 3, d0: int = 4) -> "DecoderArch":
        """The standard SLF decoder for a given output side (64 -> 1080 params)."""
        ratio = out_side // d0
        blocks = int(ratio).bit_length() - 1
        if d0 * (1 << blocks) != out_side:
            raise InvalidArgumentError(f"output side {out_side} is not d0 * 2^L with d0={d0}")
        return cls(blocks=blocks, channels=(1,) + (width,) * blocks + (1,), kernel=kernel, d0=d0)


@dataclass(eq=False)
class DecoderParams:
    """Trainable decoder weights: per-block conv kernel plus norm affine, then head.

    conv[i] has shape (k_{i+1}, k_i, n, n); scale[i] and shift[i] have length
    k_{i+1}; head has shape (k_{L+1}, k_L) for the 1 x 1 output convolution.
    The same structure doubles as the gradient container.
    """

    conv: list[np.ndarray]
    scale: list[np.ndarray]
    shift: list[np.ndarray]
    head: np.ndarray

    def as_arrays(self) -> list[np.ndarray]:
        """All weight arrays in canonical (serialization) order."""
        out: list[np.ndarray] = []
        for w, g, b in zip(self.conv, self.scale, self.shift):
            out.extend((w, g, b))
        out.append(self.head)
        return out

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.as_arrays())

    def copy(self) -> "DecoderParams":
        return DecoderParams(
            conv=[w.copy() for w in self.conv],
            scale=[g.copy() for g in self.scale],
            shift=[b.copy() for b in self.shift],
            head=self.head.copy(),
        )

    @classmethod
    def zeros(cls, arch: DecoderArch) -> "DecoderParams":
        ch, n = arch.channels, arch.kernel
        return cls(
            conv=[np.zeros((ch[i + 1], ch[i], n, n)) for i in range(arch.blocks)],
            scale=[np.zeros(ch[i + 1]) for i in range(arch.blocks)],
            shift=[np.zeros(ch[i + 1]) for i in range(arch.blocks)],
            head=np.zeros((ch[-1], ch[-2])),
        )


def layer_param_counts(arch: DecoderArch) -> list[int]:
    """Scalar count per layer: conv (no bias) + 2 affine terms per channel, then head."""
    ch, n = arch.channels, arch.kernel
    counts = [ch[i] * ch[i + 1] * n * n + 2 * ch[i + 1] for i in range(arch.blocks)]
    counts.append(ch[-2] * ch[-1])
    return counts


def count_params(arch: DecoderArch) -> int:
    """Total trainable scalar count (1080 for the default 64 x 64 decoder)."""
    return sum(layer_param_counts(arch))


# --------------------------------------------------------------------------
# Primitive ops
# --------------------------------------------------------------------------

@functools.lru_cache(maxsize=32)
def _upsample_matrix(d: int) -> np.ndarray:
    """1-d bilinear 2x interpolation matrix (align-corners-false, edge clamp)."""
    A = np.zeros((2 * d, d))
    src = (np.arange(2 * d) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(int)
    w1 = src - i0
    lo = np.clip(i0, 0, d - 1)
    hi = np.clip(i0 + 1, 0, d - 1)
    rows = np.arange(2 * d)
    np.add.at(A, (rows, lo), 1.0 - w1)
    np.add.at(A, (rows, hi), w1)
    A.setflags(write=False)
    return A


def _upsample2x(x: np.ndarray) -> np.ndarray:
    A = _upsample_matrix(x.shape[-1])
    return np.matmul(np.matmul(A, x), A.T)


def _upsample2x_vjp(dy: np.ndarray) -> np.ndarray:
    A = _upsample_matrix(dy.shape[-1] // 2)
    return np.matmul(np.matmul(A.T, dy), A)


def _im2col(x: np.ndarray, n: int) -> np.ndarray:
    """(B, C, D, D) -> (B, C*n*n, D*D) patch matrix with zero same-padding."""
    b, c, d, _ = x.shape
    if n == 1:
        return x.reshape(b, c, d * d)
    p = (n - 1) // 2
    xp = np.zeros((b, c, d + 2 * p, d + 2 * p))
    xp[:, :, p:-p, p:-p] = x
    cols = np.empty((b, c, n * n, d * d))
    for u in range(n):
        for v in range(n):
            cols[:, :, u * n + v, :] = xp[:, :, u : u + d, v : v + d].reshape(b, c, d * d)
    return cols.reshape(b, c * n * n, d * d)


def _conv_forward(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, _, d, _ = x.shape
    cout = w.shape[0]
    cols = _im2col(x, w.shape[-1])
    y = np.matmul(w.reshape(cout, -1), cols)
    return y.reshape(b, cout, d, d), cols


def _conv_vjp(dy: np.ndarray, cols: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, cout, d, _ = dy.shape
    cin, n = w.shape[1], w.shape[-1]
    dy_mat = dy.reshape(b, cout, d * d)
    dw = np.matmul(dy_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(cout, cin, n, n)
    # dx is the correlation of dy with the spatially flipped, channel-swapped kernel
    flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * n * n)
    dx = np.matmul(flip, _im2col(dy, n)).reshape(b, cin, d, d)
    return dw, dx


def _channel_norm_forward(x, g, b, eps):
    mean = x.mean(axis=(2, 3), keepdims=True)
    std = np.sqrt(x.var(axis=(2, 3), keepdims=True))
    xhat = (x - mean) / (std + eps)
    return g[None, :, None, None] * xhat + b[None, :, None, None], xhat, std


def _channel_norm_vjp(dy, xhat, std, g, eps):
    dg = np.einsum("bcij,bcij->c", dy, xhat)
    db = dy.sum(axis=(0, 2, 3))
    dxhat = dy * g[None, :, None, None]
    mean_d = dxhat.mean(axis=(2, 3), keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
    # constant channels (std = 0) contribute no std gradient
    inv_std = np.where(std > 0.0, 1.0 / np.where(std > 0.0, std, 1.0), 0.0)
    dx = (dxhat - mean_d) / (std + eps) - xhat * mean_dx * inv_std
    return dx, dg, db


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --------------------------------------------------------------------------
# Full passes
# --------------------------------------------------------------------------

class _Trace:
    """Intermediates saved by forward_pass for the exact backward pass."""

    __slots__ = ("cols", "pre", "xhat", "std", "last", "out")

    def __init__(self) -> None:
        self.cols: list[np.ndarray] = []
        self.pre: list[np.ndarray] = []
        self.xhat: list[np.ndarray] = []
        self.std: list[np.ndarray] = []
        self.last: np.ndarray | None = None
        self.out: np.ndarray | None = None


def _check_shapes(theta: DecoderParams, Z: np.ndarray, arch: DecoderArch) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2 or Z.shape[0] != arch.latent_dim:
        raise InvalidArgumentError(
            f"latent codes must be ({arch.latent_dim}, R), got {Z.shape}"
        )
    ch, n = arch.channels, arch.kernel
    if len(theta.conv) != arch.blocks:
        raise InvalidArgumentError("parameter block count does not match architecture")
    for i, (w, g, b) in enumerate(zip(theta.conv, theta.scale, theta.shift)):
        if w.shape != (ch[i + 1], ch[i], n, n) or g.shape != (ch[i + 1],) or b.shape != (ch[i + 1],):
            raise InvalidArgumentError(f"block {i} parameter shapes do not match architecture")
    if theta.head.shape != (ch[-1], ch[-2]):
        raise InvalidArgumentError("head shape does not match architecture")
    return Z


def forward_pass(theta: DecoderParams, Z: np.ndarray, arch: DecoderArch) -> tuple[np.ndarray, _Trace]:
    """Batched forward: latent columns -> (R, k_{L+1}, side, side) Sigmoid outputs."""
    Z = _check_shapes(theta, Z, arch)
    batch = Z.shape[1]
    x = Z.T.reshape(batch, 1, arch.d0, arch.d0)
    trace = _Trace()
    for i in range(arch.blocks):
        up = _upsample2x(x)
        pre, cols = _conv_forward(up, theta.conv[i])
        relu = np.maximum(pre, 0.0)
        x, xhat, std = _channel_norm_forward(relu, theta.scale[i], theta.shift[i], arch.norm_epsilon)
        trace.cols.append(cols)
        trace.pre.append(pre)
        trace.xhat.append(xhat)
        trace.std.append(std)
    trace.last = x
    pre_head = np.einsum("oc,bcij->boij", theta.head, x)
    trace.out = _sigmoid(pre_head)
    return trace.out, trace


def backward_pass(
    theta: DecoderParams,
    arch: DecoderArch,
    trace: _Trace,
    d_out: np.ndarray,
) -> tuple[DecoderParams, np.ndarray]:
    """Exact VJP of forward_pass: cotangent on the outputs -> (d_theta, d_Z)."""
    out = trace.out
    if d_out.shape != out.shape:
        raise InvalidArgumentError(f"cotangent shape {d_out.shape} != output shape {out.shape}")
    grads = DecoderParams.zeros(arch)
    ds = d_out * out * (1.0 - out)
    grads.head[...] = np.einsum("boij,bcij->oc", ds, trace.last)
    dx = np.einsum("oc,boij->bcij", theta.head, ds)
    for i in reversed(range(arch.blocks)):
        dx, dg, db = _channel_norm_vjp(
            dx, trace.xhat[i], trace.std[i], theta.scale[i], arch.norm_epsilon
        )
        grads.scale[i][...] = dg
        grads.shift[i][...] = db
        dpre = dx * (trace.pre[i] > 0.0)
        dw, dup = _conv_vjp(dpre, trace.cols[i], theta.conv[i])
        grads.conv[i][...] = dw
        dx = _upsample2x_vjp(dup)
    d_Z = dx.reshape(dx.shape[0], arch.latent_dim).T.copy()
    return grads, d_Z


# --------------------------------------------------------------------------
# Spec-level operations
# --------------------------------------------------------------------------

def forward(theta: DecoderParams, z: np.ndarray, arch: DecoderArch) -> SlfMatrix:
    """Generate one spatial loss field from a single latent code."""
    if arch.channels[-1] != 1:
        raise InvalidArgumentError("SLF decoding requires a single output channel")
    out, _ = forward_pass(theta, np.asarray(z, dtype=np.float64).reshape(-1), arch)
    return SlfMatrix(out[0, 0])


def forward_all(theta: DecoderParams, Z: np.ndarray, C: np.ndarray, arch: DecoderArch) -> RadioMapTensor:
    """Assemble the full map: sum_r G_theta(z_r) outer c_r."""
    C = np.asarray(C, dtype=np.float64)
    out, _ = forward_pass(theta, Z, arch)
    if arch.channels[-1] != 1:
        raise InvalidArgumentError("factored assembly requires a single output channel")
    if C.ndim != 2 or C.shape[1] != out.shape[0]:
        raise InvalidArgumentError(f"PSD matrix shape {C.shape} does not match {out.shape[0]} emitters")
    return RadioMapTensor(np.einsum("rij,kr->ijk", out[:, 0], C))


def backward(
    theta: DecoderParams,
    Z: np.ndarray,
    C: np.ndarray,
    arch: DecoderArch,
    cotangent: np.ndarray,
) -> tuple[DecoderParams, np.ndarray, np.ndarray]:
    """Exact VJP of forward_all at (theta, Z, C) for a map-shaped cotangent."""
    C = np.asarray(C, dtype=np.float64)
    cot = np.asarray(cotangent, dtype=np.float64)
    out, trace = forward_pass(theta, Z, arch)
    S = out[:, 0]
    if cot.shape != (S.shape[1], S.shape[2], C.shape[0]):
        raise InvalidArgumentError(f"cotangent shape {cot.shape} does not match the assembled map")
    dC = np.einsum("ijk,rij->kr", cot, S)
    dS = np.einsum("ijk,kr->rij", cot, C)
    d_theta, d_Z = backward_pass(theta, arch, trace, dS[:, None, :, :])
    return d_theta, d_Z, dC


def init_params(
    arch: DecoderArch,
    scheme: str,
    seed: int,
    *,
    R: int = 1,
    targets: np.ndarray | None = None,
    warm_steps: int = 100,
    warm_lr: float = 0.05,
) -> tuple[DecoderParams, np.ndarray]:
    """Initialize (theta, Z).

    ``uniform`` draws convolution weights from U[-1, 1]; ``xavier`` draws them
    from N(0, 2 / (fan_in + fan_out)). Latent codes come from U[-1, 1] and the
    normalization affine starts at identity. ``warm-start-fit`` additionally
    fits the decoder outputs to caller-supplied target SLFs (R, side, side)
    with a fixed Adam budget of ``warm_steps`` steps.
    """
    if scheme not in ("uniform", "xavier", "warm-start-fit"):
        raise InvalidArgumentError(f"unknown init scheme {scheme!r}")
    if scheme == "warm-start-fit":
        if targets is None:
            raise InvalidArgumentError("warm-start-fit needs target SLFs")
        targets = np.asarray(targets, dtype=np.float64)
        if targets.ndim != 3 or targets.shape[1:] != (arch.out_side, arch.out_side):
            raise InvalidArgumentError(
                f"targets must be (R, {arch.out_side}, {arch.out_side}), got {targets.shape}"
            )
        R = targets.shape[0]
    if R < 1:
        raise InvalidArgumentError("need at least one latent column")

    rng = substream(seed, "decoder-init")
    theta = DecoderParams.zeros(arch)
    ch, n = arch.channels, arch.kernel
    for i in range(arch.blocks):
        if scheme == "xavier":
            fan = ch[i] * n * n + ch[i + 1] * n * n
            theta.conv[i][...] = rng.normal(0.0, np.sqrt(2.0 / fan), theta.conv[i].shape)
        else:
            theta.conv[i][...] = rng.uniform(-1.0, 1.0, theta.conv[i].shape)
        theta.scale[i][...] = 1.0
        theta.shift[i][...] = 0.0
    if scheme == "xavier":
        theta.head[...] = rng.normal(0.0, np.sqrt(2.0 / (ch[-2] + ch[-1])), theta.head.shape)
    else:
        theta.head[...] = rng.uniform(-1.0, 1.0, theta.head.shape)
    Z = rng.uniform(-1.0, 1.0, (arch.latent_dim, R))

    if scheme == "warm-start-fit":
        _fit_to_targets(theta, Z, arch, targets, warm_steps, warm_lr)
    return theta, Z


def _fit_to_targets(theta, Z, arch, targets, steps, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam fit of decoder outputs to target fields (inner warm start).

    The squared fit is taken between pre-Sigmoid outputs and logit targets;
    fitting after the Sigmoid stalls in its saturation region because SLF
    targets are tiny almost everywhere.
    """
    params = theta.as_arrays() + [Z]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    tgt = targets[:, None, :, :]
    logit_tgt = np.log(tgt) - np.log1p(-tgt)
    for t in range(1, steps + 1):
        out, trace = forward_pass(theta, Z, arch)
        logit_out = np.log(trace.out) - np.log1p(-trace.out)
        # d(pre-sigmoid residual)/d(out) = 1 / (out * (1 - out))
        d_out = 2.0 * (logit_out - logit_tgt) / (trace.out * (1.0 - trace.out))
        d_theta, d_Z = backward_pass(theta, arch, trace, d_out)
        grads = d_theta.as_arrays() + [d_Z]
        for p, g, mi, vi in zip(params, grads, m, v):
            mi += (1.0 - beta1) * (g - mi)
            vi += (1.0 - beta2) * (g * g - vi)
            mhat = mi / (1.0 - beta1**t)
            vhat = vi / (1.0 - beta2**t)
            p -= lr * mhat / (np.sqrt(vhat) + eps)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def save_params(theta: DecoderParams, arch: DecoderArch, path: str | Path) -> None:
    """Write weights as a flat little-endian float64 vector with a UNN1 header."""
    header = "UNN1 {} {} {} {}\n".format(
        arch.blocks, " ".join(str(c) for c in arch.channels), arch.kernel, arch.d0
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for arr in theta.as_arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path: str | Path, norm_epsilon: float = 1e-6) -> tuple[DecoderParams, DecoderArch]:
    """Read a UNN1 weight file back into (params, arch)."""
    with open(path, "rb") as fh:
        header = fh.readline(256)
        parts = header.strip().split()
        if len(parts) < 5 or parts[0] != b"UNN1":
            raise InvalidArgumentError(f"{path}: expected 'UNN1 <L> <k_0..k_L+1> <n> <D0>' header")
        blocks = int(parts[1])
        channels = tuple(int(p) for p in parts[2 : 2 + blocks + 2])
        kernel, d0 = int(parts[-2]), int(parts[-1])
        arch = DecoderArch(blocks=blocks, channels=channels, kernel=kernel, d0=d0,
                           norm_epsilon=norm_epsilon)
        theta = DecoderParams.zeros(arch)
        for arr in theta.as_arrays():
            raw = fh.read(arr.size * 8)
            if len(raw) < arr.size * 8:
                raise InvalidArgumentError(f"{path}: weight payload truncated")
            arr[...] = np.frombuffer(raw, dtype="<f8").reshape(arr.shape)
    return theta, arch
