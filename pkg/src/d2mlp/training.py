"""Dice + cross-entropy training: losses, poly schedule, momentum SGD, loop.

The soft Dice uses squared denominators, 1 - (2*sum(p*g)+eps) /
(sum(p^2)+sum(g^2)+eps) per class and sample, averaged over both. Combined
loss is dice + ce at unit weights; with deep supervision the main head
(1.0) and the H/2 (0.5) and H/4 (0.25) aux heads are summed and normalized
by 1.75, each aux scored against nearest-neighbour-downsampled labels.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import ops
from .network import NetworkConfig, NetworkParams, build_network, forward
from .tensor import Tape, Tensor, backward

__all__ = [
    "TrainConfig", "OptState",
    "ce_loss", "dice_loss", "combined_loss", "poly_lr", "sgd_step",
    "train_loop", "history_csv",
]

_AUX_WEIGHTS = (0.5, 0.25)


@dataclass
class TrainConfig:
    lr0: float = 0.001
    max_steps: int = 500
    poly_exponent: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 4
    seed: int = 0
    dice_eps: float = 1e-5
    deep_supervision: bool = True
    eval_every: int = 25

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def _labels_array(labels) -> np.ndarray:
    arr = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if not np.issubdtype(arr.dtype, np.integer):
        raise TypeError("labels must be integer class ids")
    return arr


def _one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"label ids must lie in [0, {k}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    eye = np.eye(k, dtype=dtype)
    return np.moveaxis(eye[labels], -1, 1)  # (B,K,H,W)


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean over pixels of -log softmax(logits)[label], via log-sum-exp."""
    lab = _labels_array(labels)
    k = logits.shape[1]
    onehot = Tensor(_one_hot(lab, k, logits.data.dtype))
    log_probs = ops.log_softmax(logits, axis=1)
    picked = ops.tsum(ops.mul(log_probs, onehot), axis=1)
    return ops.neg(ops.tmean(picked))


def dice_loss(logits: Tensor, labels, eps: float = 1e-5) -> Tensor:
    """Soft Dice on softmax probabilities, averaged over classes and batch."""
    lab = _labels_array(labels)
    k = logits.shape[1]
    onehot = Tensor(_one_hot(lab, k, logits.data.dtype))
    probs = ops.softmax(logits, axis=1)
    overlap = ops.tsum(ops.mul(probs, onehot), axis=(-2, -1))  # (B,K)
    p_sq = ops.tsum(ops.mul(probs, probs), axis=(-2, -1))
    g_sq = ops.tsum(onehot, axis=(-2, -1))  # one-hot squares to itself
    dice = ops.div(ops.add(ops.mul(overlap, 2.0), eps), ops.add(ops.add(p_sq, g_sq), eps))
    return ops.sub(1.0, ops.tmean(dice))


def _downsample_labels(lab: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour: keep every factor-th pixel from the top-left."""
    return lab[..., ::factor, ::factor]


def combined_loss(outputs, labels, cfg: TrainConfig) -> Tensor:
    """dice + ce; with deep supervision a normalized weighted sum over heads.

    `outputs` is either the main logits tensor or (logits, [aux...]) as
    returned by the network forward.
    """
    if isinstance(outputs, tuple):
        logits, aux = outputs
    else:
        logits, aux = outputs, []
    lab = _labels_array(labels)

    def head_loss(lg, lb):
        return ops.add(dice_loss(lg, lb, cfg.dice_eps), ce_loss(lg, lb))

    total = head_loss(logits, lab)
    if not (cfg.deep_supervision and aux):
        return total
    weight_sum = 1.0
    for lg, w in zip(aux, _AUX_WEIGHTS):
        factor = lab.shape[-1] // lg.shape[-1]
        total = ops.add(total, ops.mul(head_loss(lg, _downsample_labels(lab, factor)), w))
        weight_sum += w
    return ops.mul(total, 1.0 / weight_sum)


def poly_lr(step: int, cfg: TrainConfig) -> float:
    """lr0 * (1 - t/T)^exponent for t in [0, T)."""
    if not 0 <= step < cfg.max_steps:
        raise ValueError(f"step {step} outside [0, {cfg.max_steps})")
    return cfg.lr0 * (1.0 - step / cfg.max_steps) ** cfg.poly_exponent


class OptState:
    """Per-parameter momentum buffers plus a step counter."""

    def __init__(self, params: NetworkParams):
        self.velocity = {
            name: np.zeros_like(t.data) for name, t in params.named_parameters().items()
        }
        self.step = 0


def sgd_step(params: NetworkParams, grads: dict, opt: OptState, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """v <- momentum*v + g (+ wd*p); p <- p - lr*v. Updates params in place."""
    for name, t in params.named_parameters().items():
        g = grads.get(t.uid)
        if g is None:
            continue
        if weight_decay:
            g = g + weight_decay * t.data
        v = momentum * opt.velocity[name] + g
        opt.velocity[name] = v
        t.data = t.data - lr * v.astype(t.data.dtype, copy=False)
    opt.step += 1


def _quick_dice(params: NetworkParams, images: Tensor, labels: np.ndarray) -> float:
    """Mean foreground Dice of eval-mode argmax predictions (2|P&G|/(|P|+|G|),
    both-empty classes count as 1)."""
    out = forward(params, images, bn_mode="eval")
    logits = out[0] if isinstance(out, tuple) else out
    pred = np.argmax(logits.data, axis=1)
    k = logits.shape[1]
    scores = []
    for cls in range(1, k):
        p = pred == cls
        g = labels == cls
        inter = np.logical_and(p, g).sum()
        denom = p.sum() + g.sum()
        scores.append(1.0 if denom == 0 else 2.0 * inter / denom)
    return float(np.mean(scores))


def train_loop(net_cfg: NetworkConfig, train_cfg: TrainConfig, dataset):
    """Deterministic SGD loop over an in-memory SampleBatch.

    Returns (params, history) where history rows are (step, lr, loss,
    train_dice) with train_dice None between evaluation steps.
    """
    images = dataset.images
    labels = _labels_array(dataset.labels)
    count = images.shape[0]
    if count < 1:
        raise ValueError("dataset is empty")
    if labels.max() >= net_cfg.num_classes:
        raise ValueError(
            f"label id {labels.max()} >= num_classes {net_cfg.num_classes}"
        )
    if train_cfg.deep_supervision and not net_cfg.deep_supervision:
        raise ValueError("deep_supervision requested but the network has no aux heads")

    params = build_network(net_cfg, seed=train_cfg.seed)
    opt = OptState(params)
    order_rng = np.random.default_rng(train_cfg.seed + 0x5EED)

    queue: list[int] = []

    def next_batch():
        nonlocal queue
        idx = []
        while len(idx) < train_cfg.batch_size:
            if not queue:
                queue = list(order_rng.permutation(count))
            idx.append(queue.pop(0))
        return np.asarray(idx)

    history = []
    for step in range(train_cfg.max_steps):
        idx = next_batch()
        xb = Tensor(images.data[idx])
        yb = labels[idx]
        with Tape() as tape:
            outputs = forward(params, xb, bn_mode="train")
            loss = combined_loss(outputs, yb, train_cfg)
        grads = backward(tape, loss)
        lr = poly_lr(step, train_cfg)
        sgd_step(params, grads, opt, lr, train_cfg.momentum, train_cfg.weight_decay)
        is_eval = (step + 1) % train_cfg.eval_every == 0 or step + 1 == train_cfg.max_steps
        dice = _quick_dice(params, images, labels) if is_eval else None
        history.append((step, lr, loss.item(), dice))
    return params, history


def history_csv(history) -> str:
    """Render history rows as `step,lr,loss,train_dice` (dice blank when absent)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "lr", "loss", "train_dice"])
    for step, lr, loss, dice in history:
        writer.writerow([step, repr(lr), repr(loss), "" if dice is None else repr(dice)])
    return buf.getvalue()
