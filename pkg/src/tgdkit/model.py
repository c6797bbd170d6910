"""Residual denoising network: stacked 3x3 conv blocks with a skip to the
center input slice.

Block 0 is conv + ReLU, interior blocks are conv + batchnorm + ReLU (no conv
bias, the BN beta covers it), and the final block is a bias-only conv down to
one channel with no activation. The network eats a few consecutive 2D slices
as channels and predicts the center slice, so the output is input-sized and a
zero-weight network is exactly the identity on that slice.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .ops import (
    BatchNormParams,
    BnStats,
    ConvParams,
    _backward_from_cols,
    _forward_from_cols,
    _im2col,
    batchnorm_backward,
    batchnorm_forward,
    relu_backward,
    relu_forward,
)

WEIGHT_MAGIC = b"TGDW"
WEIGHT_VERSION = 1


class WeightFileError(Exception):
    """Problem reading or validating a weight file."""


class BadMagicError(WeightFileError):
    pass


class UnsupportedVersionError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 8
    channels: int = 64
    input_slices: int = 3

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError(f"depth must be >= 3, got {self.depth}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.input_slices < 1 or self.input_slices % 2 == 0:
            raise ValueError(
                f"input_slices must be odd and positive, got {self.input_slices}"
            )


@dataclass
class Block:
    """One conv stage: conv, optional batchnorm, optional ReLU."""

    conv: ConvParams
    bn: BatchNormParams | None
    relu: bool

    def copy(self) -> "Block":
        return Block(self.conv.copy(), None if self.bn is None else self.bn.copy(), self.relu)


@dataclass
class Network:
    blocks: list[Block]
    config: NetworkConfig
    version_tag: str = ""

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def copy(self) -> "Network":
        return Network([b.copy() for b in self.blocks], self.config, self.version_tag)


def build_network(config: NetworkConfig, seed: int, version_tag: str = "") -> Network:
    """Deterministically initialize a network from a seed.

    Conv weights are He fan-in normal, biases zero, batchnorm starts at
    gamma=1 / beta=0 with unit running variance.
    """
    rng = np.random.default_rng(seed)
    d, ch, sl = config.depth, config.channels, config.input_slices
    blocks: list[Block] = []
    for i in range(d):
        c_in = sl if i == 0 else ch
        c_out = 1 if i == d - 1 else ch
        std = np.sqrt(2.0 / (c_in * 9))
        weights = (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(np.float32)
        interior = 0 < i < d - 1
        bias = None if interior else np.zeros(c_out, dtype=np.float32)
        bn = None
        if interior:
            bn = BatchNormParams(
                gamma=np.ones(c_out, dtype=np.float32),
                beta=np.zeros(c_out, dtype=np.float32),
                running_mean=np.zeros(c_out, dtype=np.float32),
                running_var=np.ones(c_out, dtype=np.float32),
            )
        blocks.append(Block(ConvParams(weights, bias), bn, relu=i < d - 1))
    return Network(blocks, config, version_tag)


def num_parameters(net: Network) -> int:
    """Trainable parameter count (weights, biases, gamma, beta)."""
    total = 0
    for b in net.blocks:
        total += b.conv.weights.size
        if b.conv.bias is not None:
            total += b.conv.bias.size
        if b.bn is not None:
            total += b.bn.gamma.size + b.bn.beta.size
    return total


@dataclass
class BlockCache:
    cols: np.ndarray  # input patch matrix, reused by the backward pass
    conv_out: np.ndarray
    bn_stats: BnStats | None
    relu_in: np.ndarray | None


def _check_input(net: Network, x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1] != net.config.input_slices:
        raise ValueError(
            f"input must be [B, {net.config.input_slices}, H, W], got {x.shape}"
        )
    if x.shape[2] < 3 or x.shape[3] < 3:
        raise ValueError(f"spatial size must be >= 3x3, got {x.shape[2:]} ")


def _run(net: Network, x: np.ndarray, mode: str, want_cache: bool):
    center = net.config.input_slices // 2
    b, _, hh, ww = x.shape
    h = x
    caches: list[BlockCache] = []
    for block in net.blocks:
        if h.shape[1] != block.conv.in_channels:
            raise ValueError(
                f"conv input has {h.shape[1]} channels, weights expect "
                f"{block.conv.in_channels}"
            )
        cols = _im2col(h)
        conv_out = _forward_from_cols(cols, block.conv, b, hh, ww)
        bn_stats = None
        out = conv_out
        if block.bn is not None:
            out, bn_stats = batchnorm_forward(out, block.bn, mode)
        relu_in = out if block.relu else None
        if block.relu:
            out = relu_forward(out)
        if want_cache:
            caches.append(BlockCache(cols, conv_out, bn_stats, relu_in))
        h = out
    y = h + x[:, center : center + 1]
    return y, caches


def forward(net: Network, x: np.ndarray, mode: str = "infer") -> np.ndarray:
    """Run the network on [B, slices, H, W]; output is [B, 1, H, W].

    The residual head adds the center input slice to the last conv output.
    Train mode normalizes by batch statistics (running stats are never
    mutated here); infer mode uses the stored running statistics.
    """
    _check_input(net, x)
    y, _ = _run(net, x, mode, want_cache=False)
    return y


def forward_train(net: Network, x: np.ndarray) -> tuple[np.ndarray, list[BlockCache]]:
    """Train-mode forward that also returns the per-block caches
    :func:`backward` needs (inputs, pre-activations, batch statistics)."""
    _check_input(net, x)
    return _run(net, x, "train", want_cache=True)


@dataclass
class BlockGrads:
    weights: np.ndarray
    bias: np.ndarray | None
    gamma: np.ndarray | None
    beta: np.ndarray | None


def backward(net: Network, caches: list[BlockCache], grad_y: np.ndarray) -> list[BlockGrads]:
    """Backprop grad_y (d loss / d output) through a cached train-mode forward.

    Returns per-block parameter gradients; the residual branch contributes
    nothing to any parameter so it is simply dropped.
    """
    if len(caches) != len(net.blocks):
        raise ValueError("cache/block count mismatch; run forward with want_cache=True")
    grads: list[BlockGrads] = [None] * len(net.blocks)  # type: ignore[list-item]
    g = grad_y
    for i in range(len(net.blocks) - 1, -1, -1):
        block, cache = net.blocks[i], caches[i]
        if block.relu:
            g = relu_backward(cache.relu_in, g)
        g_gamma = g_beta = None
        if block.bn is not None:
            g, g_gamma, g_beta = batchnorm_backward(
                cache.conv_out, block.bn, cache.bn_stats, g
            )
        g, g_w, g_b = _backward_from_cols(cache.cols, block.conv, g)
        grads[i] = BlockGrads(g_w, g_b, g_gamma, g_beta)
    return grads


def denoise_volume(net: Network, volume: np.ndarray) -> np.ndarray:
    """Denoise an [S, H, W] stack slice by slice (infer mode).

    Each output slice sees ``input_slices`` consecutive slices centered on
    it; the edge slices are replicated so the output keeps the input depth.
    """
    if volume.ndim != 3:
        raise ValueError(f"volume must be [S, H, W], got {volume.shape}")
    s = volume.shape[0]
    half = net.config.input_slices // 2
    idx = np.clip(
        np.arange(s)[:, None] + np.arange(-half, half + 1)[None, :], 0, s - 1
    )
    batch = volume[idx]  # [S, input_slices, H, W]
    out = forward(net, batch.astype(np.float32, copy=False), "infer")
    return out[:, 0]


def _param_arrays(net: Network) -> list[tuple[str, np.ndarray]]:
    """All persisted arrays in declaration order, with stable names."""
    items: list[tuple[str, np.ndarray]] = []
    for i, b in enumerate(net.blocks):
        tag = f"block{i:02d}"
        items.append((f"{tag}.conv.weight", b.conv.weights))
        if b.conv.bias is not None:
            items.append((f"{tag}.conv.bias", b.conv.bias))
        if b.bn is not None:
            items.append((f"{tag}.bn.gamma", b.bn.gamma))
            items.append((f"{tag}.bn.beta", b.bn.beta))
            items.append((f"{tag}.bn.running_mean", b.bn.running_mean))
            items.append((f"{tag}.bn.running_var", b.bn.running_var))
    return items


def network_hash(net: Network) -> str:
    """sha256 over every persisted array's name, shape and raw bytes."""
    h = hashlib.sha256()
    for name, arr in _param_arrays(net):
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
    return h.hexdigest()


def save_weights(net: Network, path) -> None:
    """Write the little-endian binary weight file (magic, config, shape
    table, then raw float32 arrays in declaration order)."""
    items = _param_arrays(net)
    tag = net.version_tag.encode()
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(
            struct.pack(
                "<IIIII",
                WEIGHT_VERSION,
                net.config.depth,
                net.config.channels,
                net.config.input_slices,
                len(tag),
            )
        )
        f.write(tag)
        f.write(struct.pack("<I", len(items)))
        for name, arr in items:
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for _, arr in items:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"truncated weight file while reading {what}")
    return buf


def load_weights(path, expect: NetworkConfig | None = None) -> Network:
    """Read a weight file back into a Network; round-trips bit-exactly.

    ``expect`` pins the config the caller requires; the first array whose
    shape disagrees with that expectation is named in the error.
    """
    with open(path, "rb") as f:
        if _read(f, 4, "magic") != WEIGHT_MAGIC:
            raise BadMagicError("bad magic: not a weight file")
        version, depth, channels, slices, tag_len = struct.unpack(
            "<IIIII", _read(f, 20, "header")
        )
        if version != WEIGHT_VERSION:
            raise UnsupportedVersionError(
                f"unsupported weight file version {version} (expected {WEIGHT_VERSION})"
            )
        tag = _read(f, tag_len, "version tag").decode()
        config = NetworkConfig(depth, channels, slices)
        (n_items,) = struct.unpack("<I", _read(f, 4, "array count"))
        table: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(n_items):
            (name_len,) = struct.unpack("<I", _read(f, 4, "name length"))
            name = _read(f, name_len, "array name").decode()
            (ndim,) = struct.unpack("<I", _read(f, 4, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read(f, 4 * ndim, "shape"))
            table.append((name, shape))

        if expect is not None:
            _check_expected_table(table, expect, config)

        arrays: dict[str, np.ndarray] = {}
        for name, shape in table:
            count = int(np.prod(shape)) if shape else 1
            raw = _read(f, 4 * count, f"data of {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    net = build_network(config, seed=0, version_tag=tag)
    own = dict(_param_arrays(net))
    if set(own) != set(arrays):
        missing = sorted(set(own) ^ set(arrays))
        raise ShapeMismatchError(f"array table does not match config: {missing[:4]}")
    for name, arr in arrays.items():
        if own[name].shape != arr.shape:
            raise ShapeMismatchError(
                f"shape mismatch at {name}: file has {arr.shape}, "
                f"config implies {own[name].shape}"
            )
        own[name][...] = arr
    return net


def _check_expected_table(table, expect: NetworkConfig, config: NetworkConfig) -> None:
    probe = build_network(expect, seed=0)
    want = _param_arrays(probe)
    have = dict(table)
    for name, arr in want:
        if name not in have:
            raise ShapeMismatchError(
                f"shape mismatch at {name}: missing from file "
                f"(file depth={config.depth}, expected depth={expect.depth})"
            )
        if tuple(arr.shape) != tuple(have[name]):
            raise ShapeMismatchError(
                f"shape mismatch at {name}: file has {tuple(have[name])}, "
                f"expected {tuple(arr.shape)}"
            )
    extras = [n for n, _ in table if n not in dict(want)]
    if extras:
        raise ShapeMismatchError(
            f"shape mismatch at {extras[0]}: not part of the expected config"
        )
