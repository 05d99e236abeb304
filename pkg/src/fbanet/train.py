"""Mini-batch SGD with momentum for the backbone.

Training runs in float64 on a private copy of the parameters; the returned
network stores float32 like every other network. Shuffling draws from a
generator seeded once per run, so a run is a pure function of its seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .network import Network, NetworkSpec, init_network

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch: int = 32
    seed: int = 0
    weight_decay: float = 0.0


@dataclass
class TrainResult:
    net: Network
    history: list[dict] = field(default_factory=list)


def loss_and_grads(spec: NetworkSpec, params: dict, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy of a softmax-terminated network and its parameter gradients.

    ``params`` maps layer position to ``(kernel, bias)`` arrays, used as given
    (float64 for the trainer and gradient checks).
    """
    if spec.layers[-1].kind != "softmax":
        raise ValueError("training needs a network that ends in softmax")
    inputs = []
    h = np.asarray(x, dtype=np.float64)
    for pos, layer in enumerate(spec.layers[:-1]):
        inputs.append(h)
        if layer.kind == "conv":
            k, b = params[pos]
            h = T.conv2d_batch(h, k, b, layer.stride, layer.pad)
        elif layer.kind == "maxpool":
            h = T.maxpool2d_batch(h, layer.size, layer.stride)
        elif layer.kind == "fc":
            k, b = params[pos]
            h = T.affine_batch(h.reshape(len(h), -1), k, b)
        elif layer.kind == "relu":
            h = np.maximum(h, 0.0)
    n = len(h)
    shifted = h - h.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()
    probs = np.exp(logp)
    grad = probs.copy()
    grad[np.arange(n), y] -= 1.0
    grad /= n
    grads = {}
    for pos in range(len(spec.layers) - 2, -1, -1):
        layer = spec.layers[pos]
        xin = inputs[pos]
        if layer.kind == "conv":
            k, _ = params[pos]
            grad, dk, db = T.conv2d_backward(grad, xin, k, layer.stride, layer.pad)
            grads[pos] = (dk, db)
        elif layer.kind == "maxpool":
            grad = T.maxpool2d_backward(grad, xin, layer.size, layer.stride)
        elif layer.kind == "fc":
            k, _ = params[pos]
            flat = xin.reshape(len(xin), -1)
            grads[pos] = (grad.T @ flat, grad.sum(axis=0))
            grad = (grad @ k).reshape(xin.shape)
        elif layer.kind == "relu":
            grad = grad * (xin > 0)
    return loss, probs, grads


def train_backbone(images, labels, spec: NetworkSpec, cfg: TrainConfig) -> TrainResult:
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("training set needs at least two classes")
    if spec.layers[-1].kind != "softmax":
        raise ValueError("training needs a network that ends in softmax")
    net = init_network(spec, cfg.seed)
    if cfg.epochs == 0:
        return TrainResult(net, [])
    rng = np.random.default_rng(cfg.seed)
    params = {p: (k.astype(np.float64), b.astype(np.float64)) for p, (k, b) in net.params.items()}
    velocity = {p: (np.zeros_like(k), np.zeros_like(b)) for p, (k, b) in params.items()}
    history = []
    n = len(images)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, probs, grads = loss_and_grads(spec, params, images[idx], labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at epoch {epoch}, batch starting {start}; "
                    f"try a lower learning rate than lr={cfg.lr}"
                )
            total_loss += loss * len(idx)
            correct += int((probs.argmax(axis=1) == labels[idx]).sum())
            for p, (dk, db) in grads.items():
                k, b = params[p]
                vk, vb = velocity[p]
                vk *= cfg.momentum
                vk -= cfg.lr * (dk + cfg.weight_decay * k)
                vb *= cfg.momentum
                vb -= cfg.lr * db
                k += vk
                b += vb
        row = {"epoch": epoch, "loss": total_loss / n, "accuracy": correct / n}
        log.info("epoch %d loss %.4f acc %.4f", epoch, row["loss"], row["accuracy"])
        history.append(row)
    out = Network(spec, {p: (k.astype(T.DTYPE), b.astype(T.DTYPE)) for p, (k, b) in params.items()})
    return TrainResult(out, history)
