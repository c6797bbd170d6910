"""Dense-tensor layer ops with hand-written forward and backward passes.

Everything here is a pure function over numpy arrays: no op mutates its
inputs, and identical inputs give bit-identical outputs. Arrays are NCHW,
kernels are fixed at 3x3 with zero padding 1 so spatial size is preserved.
Compute dtype follows the input dtype (float32 for training, float64 for
gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KERNEL_SIZE = 3
PAD = 1


@dataclass
class ConvParams:
    """3x3 convolution weights [N_out, C_in, 3, 3] and optional bias [N_out]."""

    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 4 or w.shape[2:] != (KERNEL_SIZE, KERNEL_SIZE):
            raise ValueError(f"conv weights must be [N, C, 3, 3], got {w.shape}")
        if self.bias is not None and np.asarray(self.bias).shape != (w.shape[0],):
            raise ValueError(
                f"conv bias must be [N]={w.shape[0]}, got {np.asarray(self.bias).shape}"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ConvParams":
        return ConvParams(
            self.weights.copy(), None if self.bias is None else self.bias.copy()
        )


@dataclass
class BatchNormParams:
    """Per-channel affine batch normalization with running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        c = np.asarray(self.gamma).shape
        for name in ("beta", "running_mean", "running_var"):
            if np.asarray(getattr(self, name)).shape != c:
                raise ValueError(f"batchnorm {name} shape != gamma shape {c}")
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError(f"momentum must be in (0, 1], got {self.momentum}")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if np.any(np.asarray(self.running_var) <= 0.0):
            raise ValueError("running_var must be strictly positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def copy(self) -> "BatchNormParams":
        return BatchNormParams(
            self.gamma.copy(),
            self.beta.copy(),
            self.running_mean.copy(),
            self.running_var.copy(),
            self.momentum,
            self.epsilon,
        )


@dataclass
class BnStats:
    """Batch statistics from a train-mode forward, kept for the backward pass.

    ``new_running_mean``/``new_running_var`` are the EMA-updated running
    statistics; committing them to the params is the caller's job so the op
    itself stays pure (and so a caller can freeze selected channels).
    """

    mean: np.ndarray
    var: np.ndarray
    new_running_mean: np.ndarray
    new_running_var: np.ndarray


def _im2col(x: np.ndarray) -> np.ndarray:
    """[B, C, H, W] -> [B, C*9, H*W] patch matrix for a padded 3x3 window.

    Row c*9 + (i*3 + j) holds channel c shifted by kernel tap (i, j), so a
    single GEMM against the [N, C*9] weight matrix computes the layer.
    """
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    cols = np.empty((b, c * 9, h * w), dtype=x.dtype)
    for i in range(KERNEL_SIZE):
        for j in range(KERNEL_SIZE):
            cols[:, (i * KERNEL_SIZE + j) :: 9, :] = xp[
                :, :, i : i + h, j : j + w
            ].reshape(b, c, h * w)
    return cols


def _forward_from_cols(
    cols: np.ndarray, params: ConvParams, b: int, h: int, w: int
) -> np.ndarray:
    n = params.out_channels
    wmat = params.weights.reshape(n, -1).astype(cols.dtype, copy=False)
    out = np.matmul(wmat, cols)  # [B, N, H*W]
    if params.bias is not None:
        out += params.bias.astype(cols.dtype, copy=False)[:, None]
    return out.reshape(b, n, h, w)


def _backward_from_cols(
    cols: np.ndarray, params: ConvParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    b, n, h, w = grad_out.shape
    c = params.in_channels
    gmat = grad_out.reshape(b, n, h * w)
    grad_w = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
    grad_w = grad_w.reshape(n, c, KERNEL_SIZE, KERNEL_SIZE)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if params.bias is not None else None

    # grad wrt input = correlation of grad_out with the 180-degree-rotated
    # kernels, with output/input channel roles swapped.
    w_flip = np.ascontiguousarray(
        params.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    )
    gcols = _im2col(grad_out)
    grad_x = _forward_from_cols(gcols, ConvParams(w_flip), b, h, w)
    return grad_x, grad_w, grad_b


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Cross-correlate [B, C, H, W] with params, zero padding 1, stride 1.

    Returns [B, N, H, W]; adds bias per output channel when present.
    """
    if x.ndim != 4:
        raise ValueError(f"conv input must be [B, C, H, W], got shape {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ValueError(
            f"conv input has {x.shape[1]} channels, weights expect "
            f"{params.in_channels}"
        )
    b, c, h, w = x.shape
    return _forward_from_cols(_im2col(x), params, b, h, w)


def conv2d_backward(
    x: np.ndarray, params: ConvParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients of conv2d_forward: (grad_input, grad_weights, grad_bias).

    grad_bias is None when the layer has no bias.
    """
    b, c, h, w = x.shape
    n = params.out_channels
    if grad_out.shape != (b, n, h, w):
        raise ValueError(
            f"grad_out shape {grad_out.shape} != expected {(b, n, h, w)}"
        )
    return _backward_from_cols(_im2col(x), params, grad_out)


def batchnorm_forward(
    x: np.ndarray, params: BatchNormParams, mode: str = "train"
) -> tuple[np.ndarray, BnStats | None]:
    """Normalize [B, C, H, W] per channel.

    Train mode uses biased batch statistics over (B, H, W) and returns the
    BnStats needed by the backward pass, including EMA-updated running stats
    (new = (1 - momentum) * old + momentum * batch). Infer mode uses the
    stored running statistics and returns stats=None.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ValueError(
            f"batchnorm input shape {x.shape} incompatible with C={params.channels}"
        )
    dt = x.dtype
    gamma = params.gamma.astype(dt, copy=False)[None, :, None, None]
    beta = params.beta.astype(dt, copy=False)[None, :, None, None]

    if mode == "infer":
        mean = params.running_mean.astype(dt, copy=False)[None, :, None, None]
        var = params.running_var.astype(dt, copy=False)[None, :, None, None]
        y = gamma * (x - mean) / np.sqrt(var + dt.type(params.epsilon)) + beta
        return y, None

    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise ValueError("train mode needs >= 2 samples per channel")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + dt.type(params.epsilon))
    y = gamma * (x - mean[None, :, None, None]) * inv_std[None, :, None, None] + beta

    mom = dt.type(params.momentum)
    stats = BnStats(
        mean=mean,
        var=var,
        new_running_mean=(1 - mom) * params.running_mean.astype(dt, copy=False)
        + mom * mean,
        new_running_var=(1 - mom) * params.running_var.astype(dt, copy=False)
        + mom * var,
    )
    return y, stats


def batchnorm_backward(
    x: np.ndarray,
    params: BatchNormParams,
    stats: BnStats,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of the train-mode forward: (grad_input, grad_gamma, grad_beta)."""
    if grad_out.shape != x.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    dt = x.dtype
    m = x.shape[0] * x.shape[2] * x.shape[3]
    inv_std = (1.0 / np.sqrt(stats.var + dt.type(params.epsilon)))[None, :, None, None]
    x_hat = (x - stats.mean[None, :, None, None]) * inv_std

    grad_gamma = (grad_out * x_hat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))

    g_hat = grad_out * params.gamma.astype(dt, copy=False)[None, :, None, None]
    sum_g = g_hat.sum(axis=(0, 2, 3), keepdims=True)
    sum_gx = (g_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
    grad_x = (inv_std / m) * (m * g_hat - sum_g - x_hat * sum_gx)
    return grad_x, grad_gamma, grad_beta


def relu_forward(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pass gradient where the forward input was strictly positive."""
    if grad_out.shape != x.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x > 0, grad_out, grad_out.dtype.type(0))
