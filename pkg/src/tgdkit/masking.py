"""Binary per-channel gradient masks and the masked optimizer step.

A mask entry of 1 means "retrain this output channel", 0 means "freeze it".
Masks are derived from KSE scores of the next layer's input feature maps:
the kernels of layer i-1 that produce a redundant input of layer i are the
ones allowed to move. Masks act only on the update path; the forward pass
never sees them.

The freeze contract is exact: a frozen channel's weights, bias, batchnorm
affine terms, running statistics and optimizer moments are bit-identical
after any number of masked steps. Frozen values are always carried through
with np.where copies, never recomputed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .kse import KseConfig, KseReport, kse_scores
from .model import Network, network_hash
from .ops import BatchNormParams, BnStats, ConvParams


@dataclass
class MaskSet:
    """Per-block channel masks plus the provenance needed to audit them."""

    conv_masks: list[np.ndarray]
    bn_masks: list[np.ndarray | None]
    threshold: float
    source: str
    generation: int = 1

    def __post_init__(self):
        for m in self.conv_masks:
            if not np.isin(m, (0, 1)).all():
                raise ValueError("mask entries must be 0 or 1")

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "source": self.source,
            "generation": self.generation,
            "conv_masks": [[int(v) for v in m] for m in self.conv_masks],
            "bn_masks": [
                None if m is None else [int(v) for v in m] for m in self.bn_masks
            ],
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def retrained_fraction(self) -> float:
        total = sum(m.size for m in self.conv_masks)
        on = sum(int(m.sum()) for m in self.conv_masks)
        return on / total


def build_masks(
    net: Network,
    report: KseReport,
    threshold: float,
    last_layer_frozen: bool = True,
    generation: int = 1,
) -> MaskSet:
    """Map next-layer input KSE scores onto this layer's output channels.

    Output channel n of block i feeds input channel n of block i+1, so block
    i's mask comes from block i+1's scores (strict ``kse < threshold``). The
    batchnorm that sits right after a conv shares its channel mask. The last
    block has no downstream scores; it is frozen outright or fully trainable
    per the flag.
    """
    if not np.isfinite(threshold) or threshold < 0:
        raise ValueError(f"threshold must be finite and >= 0, got {threshold}")
    if report.source != network_hash(net):
        raise ValueError("report was computed from a different network")
    conv_masks: list[np.ndarray] = []
    bn_masks: list[np.ndarray | None] = []
    for i, block in enumerate(net.blocks):
        n_out = block.conv.out_channels
        if i == net.depth - 1:
            mask = np.zeros(n_out, np.uint8) if last_layer_frozen else np.ones(n_out, np.uint8)
        else:
            downstream = report.layer(i + 1).kse
            if len(downstream) != n_out:
                raise ValueError(
                    f"layer {i + 1} scores have length {len(downstream)}, "
                    f"block {i} has {n_out} output channels"
                )
            mask = (downstream < threshold).astype(np.uint8)
        conv_masks.append(mask)
        bn_masks.append(mask.copy() if block.bn is not None else None)
    return MaskSet(conv_masks, bn_masks, float(threshold), report.source, generation)


def remask(
    net: Network,
    threshold: float,
    generation: int,
    kse_config: KseConfig | None = None,
    last_layer_frozen: bool = True,
) -> MaskSet:
    """Re-score the current weights and emit the next-generation mask set.

    Used to chain retraining rounds: each round looks only at the weights as
    they are now, with no memory of earlier masks.
    """
    report = kse_scores(net, kse_config)
    return build_masks(
        net, report, threshold, last_layer_frozen, generation=generation + 1
    )


@dataclass
class AdamState:
    """First/second moment estimates for one parameter array."""

    m: np.ndarray
    v: np.ndarray

    @staticmethod
    def zeros_like(a: np.ndarray) -> "AdamState":
        return AdamState(np.zeros_like(a), np.zeros_like(a))


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def _adam(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    step: int,
    lr: float,
    keep: np.ndarray | None,
) -> np.ndarray:
    """One Adam step. Where ``keep`` is true the parameter and both moments
    are copied through unchanged (the moments must not even decay, or a
    later unfreeze would apply stale momentum)."""
    m_new = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    v_new = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m_new / (1.0 - ADAM_BETA1**step)
    v_hat = v_new / (1.0 - ADAM_BETA2**step)
    p_new = param - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    if keep is not None:
        p_new = np.where(keep, param, p_new)
        m_new = np.where(keep, state.m, m_new)
        v_new = np.where(keep, state.v, v_new)
    state.m, state.v = m_new, v_new
    return p_new


def masked_update(
    params: ConvParams,
    grad_weights: np.ndarray,
    grad_bias: np.ndarray | None,
    mask: np.ndarray | None,
    state_w: AdamState,
    state_b: AdamState | None,
    step: int,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """Adam step on a conv layer with whole output channels frozen.

    The weight-decay gradient is masked exactly like the loss gradient, and
    the moments of frozen channels are not advanced. ``mask=None`` means
    fully trainable.
    """
    if mask is not None and len(mask) != params.out_channels:
        raise ValueError(
            f"mask length {len(mask)} != output channels {params.out_channels}"
        )
    g_w = grad_weights
    if weight_decay:
        g_w = g_w + weight_decay * params.weights
    keep_w = None if mask is None else (mask == 0)[:, None, None, None]
    params.weights = _adam(params.weights, g_w, state_w, step, lr, keep_w)
    if params.bias is not None:
        g_b = grad_bias
        if weight_decay:
            g_b = g_b + weight_decay * params.bias
        keep_b = None if mask is None else (mask == 0)
        params.bias = _adam(params.bias, g_b, state_b, step, lr, keep_b)


def masked_bn_update(
    params: BatchNormParams,
    grad_gamma: np.ndarray,
    grad_beta: np.ndarray,
    bn_mask: np.ndarray | None,
    state_gamma: AdamState,
    state_beta: AdamState,
    step: int,
    lr: float,
) -> None:
    """Adam step on batchnorm gamma/beta with frozen channels carried through."""
    keep = None if bn_mask is None else (bn_mask == 0)
    params.gamma = _adam(params.gamma, grad_gamma, state_gamma, step, lr, keep)
    params.beta = _adam(params.beta, grad_beta, state_beta, step, lr, keep)


def commit_running_stats(
    params: BatchNormParams, stats: BnStats, bn_mask: np.ndarray | None
) -> None:
    """Apply the EMA-updated running statistics from a train-mode forward.

    Frozen channels keep their old running mean/var bit-identically: a frozen
    kernel must behave at inference exactly as it did before retraining, so
    its statistics must not drift either.
    """
    dt = params.running_mean.dtype
    new_mean = stats.new_running_mean.astype(dt, copy=False)
    new_var = stats.new_running_var.astype(dt, copy=False)
    if bn_mask is not None:
        keep = bn_mask == 0
        new_mean = np.where(keep, params.running_mean, new_mean)
        new_var = np.where(keep, params.running_var, new_var)
    params.running_mean = new_mean.copy()
    params.running_var = new_var.copy()
