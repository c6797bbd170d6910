"""Training protocols over the residual denoiser.

Three entry points share one deterministic loop:

* train_scratch      - all parameters trainable (optionally warm-started)
* finetune_tgd       - scores the pre-trained net, builds channel masks at a
                       threshold, and retrains only the masked-in channels
* online_n2n         - masked fine-tuning on a single study using its two
                       equal-count noise realizations as mutual targets

Every protocol is a pure function of (config, data bytes, seed): batch
order comes from one seeded generator and nothing else draws randomness, so
identical calls give bit-identical weights. The masked and unmasked paths
run the same arithmetic, which makes the all-ones-mask trajectory equal the
unmasked trajectory exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .kse import KseConfig, kse_scores
from .masking import (
    AdamState,
    MaskSet,
    build_masks,
    commit_running_stats,
    masked_bn_update,
    masked_update,
)
from .model import (
    Network,
    NetworkConfig,
    backward,
    build_network,
    denoise_volume,
    forward_train,
    network_hash,
)

MODES = ("scratch", "tgd_finetune", "n2n_online")
DEFAULT_EPOCHS = {"scratch": 500, "tgd_finetune": 500, "n2n_online": 150}
DEFAULT_LR = {"scratch": 1e-3, "tgd_finetune": 1e-4, "n2n_online": 1e-4}


@dataclass
class TrainConfig:
    mode: str = "scratch"
    epochs: int | None = None          # None -> per-mode default
    batch_size: int = 8
    learning_rate: float | None = None  # None -> per-mode default
    weight_decay: float = 1e-5
    seed: int = 0
    kse_threshold: float | None = None
    last_layer_frozen: bool = True
    kse: KseConfig = field(default_factory=KseConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.kse_threshold is not None and (
            not np.isfinite(self.kse_threshold) or self.kse_threshold < 0
        ):
            raise ValueError("kse_threshold must be finite and >= 0")

    @property
    def effective_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.mode] if self.epochs is None else self.epochs

    @property
    def effective_lr(self) -> float:
        return DEFAULT_LR[self.mode] if self.learning_rate is None else self.learning_rate

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "epochs": self.effective_epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.effective_lr,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "kse_threshold": self.kse_threshold,
            "last_layer_frozen": self.last_layer_frozen,
            "kse": {"alpha": self.kse.alpha, "k_neighbors": self.kse.k_neighbors},
            "network": {
                "depth": self.network.depth,
                "channels": self.network.channels,
                "input_slices": self.network.input_slices,
            },
        }


@dataclass
class TrainRecord:
    mode: str
    config: dict
    epoch_losses: list[float]
    val_mse: float | None
    wall_time_s: float
    final_hash: str

    def to_jsonl(self) -> str:
        """One line per epoch plus a summary line.

        Wall time is deliberately left out: the serialized record must be
        byte-identical across reruns (it lives in the run manifest instead).
        """
        import json

        lines = [
            json.dumps({"epoch": i, "loss": loss})
            for i, loss in enumerate(self.epoch_losses)
        ]
        lines.append(
            json.dumps(
                {
                    "summary": True,
                    "mode": self.mode,
                    "config": self.config,
                    "val_mse": self.val_mse,
                    "final_hash": self.final_hash,
                },
                sort_keys=True,
            )
        )
        return "\n".join(lines) + "\n"


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient wrt pred."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float((diff.astype(np.float64) ** 2).mean())
    grad = (2.0 / diff.size) * diff
    return loss, grad


def volume_to_samples(volume: np.ndarray, input_slices: int) -> np.ndarray:
    """[S, H, W] -> [S, input_slices, H, W] sliding slice windows with edge
    replication, one sample centered on every slice."""
    s = volume.shape[0]
    half = input_slices // 2
    idx = np.clip(np.arange(s)[:, None] + np.arange(-half, half + 1)[None, :], 0, s - 1)
    return volume[idx]


def pairs_to_arrays(
    pairs: list[tuple[np.ndarray, np.ndarray]], input_slices: int
) -> tuple[np.ndarray, np.ndarray]:
    """Expand (noisy volume, target volume) pairs into per-slice training
    samples X [M, input_slices, H, W], Y [M, 1, H, W]."""
    xs, ys = [], []
    for x_vol, y_vol in pairs:
        if x_vol.shape != y_vol.shape:
            raise ValueError(
                f"input/target volume shapes differ: {x_vol.shape} vs {y_vol.shape}"
            )
        xs.append(volume_to_samples(x_vol, input_slices))
        ys.append(y_vol[:, None])
    return (
        np.concatenate(xs).astype(np.float32, copy=False),
        np.concatenate(ys).astype(np.float32, copy=False),
    )


@dataclass
class _OptSlot:
    w: AdamState
    b: AdamState | None
    gamma: AdamState | None
    beta: AdamState | None


def _init_opt(net: Network) -> list[_OptSlot]:
    slots = []
    for blk in net.blocks:
        slots.append(
            _OptSlot(
                AdamState.zeros_like(blk.conv.weights),
                None if blk.conv.bias is None else AdamState.zeros_like(blk.conv.bias),
                None if blk.bn is None else AdamState.zeros_like(blk.bn.gamma),
                None if blk.bn is None else AdamState.zeros_like(blk.bn.beta),
            )
        )
    return slots


def _train_loop(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    masks: MaskSet | None,
    epochs: int,
) -> list[float]:
    """Shared SGD loop; mutates net in place and returns per-epoch losses."""
    m = x.shape[0]
    lr = config.effective_lr
    slots = _init_opt(net)
    rng = np.random.default_rng(config.seed)
    step = 0
    losses = []
    for _ in range(epochs):
        perm = rng.permutation(m)
        epoch_loss = 0.0
        for start in range(0, m, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb, yb = x[idx], y[idx]
            pred, caches = forward_train(net, xb)
            for i, blk in enumerate(net.blocks):
                if blk.bn is not None:
                    bn_mask = None if masks is None else masks.bn_masks[i]
                    commit_running_stats(blk.bn, caches[i].bn_stats, bn_mask)
            loss, grad_y = mse_loss(pred, yb)
            grads = backward(net, caches, grad_y)
            step += 1
            for i, blk in enumerate(net.blocks):
                conv_mask = None if masks is None else masks.conv_masks[i]
                masked_update(
                    blk.conv,
                    grads[i].weights,
                    grads[i].bias,
                    conv_mask,
                    slots[i].w,
                    slots[i].b,
                    step,
                    lr,
                    config.weight_decay,
                )
                if blk.bn is not None:
                    bn_mask = None if masks is None else masks.bn_masks[i]
                    masked_bn_update(
                        blk.bn,
                        grads[i].gamma,
                        grads[i].beta,
                        bn_mask,
                        slots[i].gamma,
                        slots[i].beta,
                        step,
                        lr,
                    )
            epoch_loss += loss * len(idx)
        losses.append(epoch_loss / m)
    return losses


def eval_pairs_mse(net: Network, pairs: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean MSE of denoised volumes against their target volumes (infer mode)."""
    total, count = 0.0, 0
    for x_vol, y_vol in pairs:
        out = denoise_volume(net, x_vol)
        total += float(((out - y_vol) ** 2).astype(np.float64).sum())
        count += out.size
    return total / count


def _resolve_pairs(dataset) -> tuple[list, list]:
    """Accepts a DenoiseDataset or a plain list of (input, target) volumes."""
    if hasattr(dataset, "pairs"):
        return dataset.pairs("train"), dataset.pairs("val")
    return list(dataset), []


def train_scratch(
    config: TrainConfig, dataset, initial: Network | None = None
) -> tuple[Network, TrainRecord]:
    """Train every parameter on (noisy input, high-count target) pairs.

    ``initial`` warm-starts from an existing network instead of a fresh
    seed-initialized one; the input network is never mutated.
    """
    train_pairs, val_pairs = _resolve_pairs(dataset)
    if not train_pairs:
        raise ValueError("dataset is empty")
    epochs = config.effective_epochs
    if epochs < 1:
        raise ValueError("scratch training needs epochs >= 1")
    net = initial.copy() if initial is not None else build_network(
        config.network, config.seed
    )
    x, y = pairs_to_arrays(train_pairs, net.config.input_slices)
    t0 = time.perf_counter()
    losses = _train_loop(net, x, y, config, masks=None, epochs=epochs)
    wall = time.perf_counter() - t0
    val = eval_pairs_mse(net, val_pairs) if val_pairs else None
    record = TrainRecord(
        config.mode, config.to_dict(), losses, val, wall, network_hash(net)
    )
    return net, record


def _assert_frozen_exact(before: Network, after: Network, masks: MaskSet) -> None:
    """Hard internal check of the freeze contract after a full run."""
    for i, (ba, bb) in enumerate(zip(before.blocks, after.blocks)):
        frozen = masks.conv_masks[i] == 0
        if not np.array_equal(ba.conv.weights[frozen], bb.conv.weights[frozen]):
            raise RuntimeError(f"frozen conv weights moved in block {i}")
        if ba.conv.bias is not None and not np.array_equal(
            ba.conv.bias[frozen], bb.conv.bias[frozen]
        ):
            raise RuntimeError(f"frozen conv bias moved in block {i}")
        if ba.bn is not None:
            bn_frozen = masks.bn_masks[i] == 0
            for name in ("gamma", "beta", "running_mean", "running_var"):
                if not np.array_equal(
                    getattr(ba.bn, name)[bn_frozen], getattr(bb.bn, name)[bn_frozen]
                ):
                    raise RuntimeError(f"frozen bn {name} moved in block {i}")


def finetune_tgd(
    net: Network, config: TrainConfig, dataset, generation: int = 1
) -> tuple[Network, TrainRecord, MaskSet]:
    """Adapt a pre-trained net to new data, retraining only the channels
    whose downstream feature maps score below the KSE threshold."""
    if config.kse_threshold is None:
        raise ValueError("tgd fine-tuning requires kse_threshold")
    train_pairs, val_pairs = _resolve_pairs(dataset)
    if not train_pairs:
        raise ValueError("dataset is empty")
    epochs = config.effective_epochs
    if epochs < 1:
        raise ValueError("fine-tuning needs epochs >= 1")
    report = kse_scores(net, config.kse)
    masks = build_masks(
        net, report, config.kse_threshold, config.last_layer_frozen, generation
    )
    tuned = net.copy()
    x, y = pairs_to_arrays(train_pairs, tuned.config.input_slices)
    t0 = time.perf_counter()
    losses = _train_loop(tuned, x, y, config, masks=masks, epochs=epochs)
    wall = time.perf_counter() - t0
    _assert_frozen_exact(net, tuned, masks)
    val = eval_pairs_mse(tuned, val_pairs) if val_pairs else None
    record = TrainRecord(
        config.mode, config.to_dict(), losses, val, wall, network_hash(tuned)
    )
    return tuned, record, masks


def online_n2n(
    net: Network,
    config: TrainConfig,
    realization_a: np.ndarray,
    realization_b: np.ndarray,
    generation: int = 1,
) -> tuple[Network, TrainRecord]:
    """Masked fine-tuning on one study: each equal-count realization serves
    as the other's target, so no clean reference is needed. epochs=0 is an
    explicit no-op that returns an unchanged copy.

    The realization labels are interchangeable: the pair is ordered
    canonically by content before training, so swapping the arguments gives
    a bit-identical trajectory.
    """
    if config.kse_threshold is None:
        raise ValueError("online adaptation requires kse_threshold")
    if realization_a.shape != realization_b.shape:
        raise ValueError(
            f"realization shapes differ: {realization_a.shape} vs {realization_b.shape}"
        )
    if realization_b.tobytes() < realization_a.tobytes():
        realization_a, realization_b = realization_b, realization_a
    epochs = config.effective_epochs
    if epochs == 0:
        return net.copy(), TrainRecord(
            config.mode, config.to_dict(), [], None, 0.0, network_hash(net)
        )
    report = kse_scores(net, config.kse)
    masks = build_masks(
        net, report, config.kse_threshold, config.last_layer_frozen, generation
    )
    tuned = net.copy()
    pairs = [(realization_a, realization_b), (realization_b, realization_a)]
    x, y = pairs_to_arrays(pairs, tuned.config.input_slices)
    t0 = time.perf_counter()
    losses = _train_loop(tuned, x, y, config, masks=masks, epochs=epochs)
    wall = time.perf_counter() - t0
    _assert_frozen_exact(net, tuned, masks)
    record = TrainRecord(
        config.mode, config.to_dict(), losses, None, wall, network_hash(tuned)
    )
    return tuned, record
