"""Dense pretraining utility.

Produces the frozen-weight baselines that mask training builds on; the
desk-scale replacement for loading published checkpoints.  Reuses the runtime
backward pass with weight gradients enabled.  Mask training itself never calls
anything in this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .runtime import (
    AdamWState,
    CompositionalClassifier,
    ConvLayer,
    TrainConfig,
    _backward,
    batch_loss,
    derive_seed,
    forward_batch,
)

__all__ = ["PretrainConfig", "train_dense"]


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 3e-3
    epochs: int = 4
    batch_size: int = 128
    seed: int = 0
    momentum: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def train_dense(
    model: CompositionalClassifier,
    images: np.ndarray,
    labels: np.ndarray,
    config: PretrainConfig = PretrainConfig(),
) -> list[float]:
    """AdamW on all weights and biases in dense mode; returns per-epoch mean loss."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0 or len(images) != len(labels):
        raise ValueError("bad dataset")
    # adapter: adamw_step wants a TrainConfig for beta/eps/decay
    opt = TrainConfig(
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        beta2=config.beta2,
        eps=config.eps,
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed,
    )
    from .runtime import adamw_step

    states: dict[tuple[int, str], AdamWState] = {}
    for i, layer in enumerate(model.layers):
        if isinstance(layer, ConvLayer):
            states[(i, "kernels")] = AdamWState.zeros_like(layer.kernels)
        else:
            states[(i, "weight")] = AdamWState.zeros_like(layer.weight)
        states[(i, "bias")] = AdamWState.zeros_like(layer.bias)

    losses = []
    for epoch in range(config.epochs):
        rng = np.random.Generator(
            np.random.Philox(key=derive_seed(config.seed, 9000, epoch))
        )
        order = rng.permutation(len(images))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            probs, records = forward_batch(model, images[batch], "dense", trace=True)
            epoch_losses.append(batch_loss(probs, labels[batch]))
            _, wgrads = _backward(
                model, records, probs, labels[batch],
                want_logit_grads=False, want_weight_grads=True,
            )
            for i, layer in enumerate(model.layers):
                g = wgrads[i]
                if isinstance(layer, ConvLayer):
                    layer.kernels, states[(i, "kernels")] = adamw_step(
                        layer.kernels, g["kernels"], states[(i, "kernels")], config.lr, opt
                    )
                    layer.bias, states[(i, "bias")] = adamw_step(
                        layer.bias, g["bias"], states[(i, "bias")], config.lr, opt
                    )
                    layer.refresh_weight()
                else:
                    layer.weight, states[(i, "weight")] = adamw_step(
                        layer.weight, g["weight"], states[(i, "weight")], config.lr, opt
                    )
                    layer.bias, states[(i, "bias")] = adamw_step(
                        layer.bias, g["bias"], states[(i, "bias")], config.lr, opt
                    )
        losses.append(float(np.mean(epoch_losses)))
    return losses
