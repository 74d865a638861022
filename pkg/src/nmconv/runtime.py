"""Compositional conv/linear classifier and the mask-training loop.

A model is an ordered stack of affine-plus-activation layers under a softmax
head.  Convolution layers run through the unfold/matmul reformulation and may
carry trainable choice logits; forward passes come in three modes:

  dense  - pretrained weights, masks ignored entirely
  soft   - weights multiplied by the differentiable Gumbel-Softmax mask
  hard   - weights multiplied by a frozen {0,1} mask

Mask training optimizes the choice logits only; the pretrained weights are
never written.  Gradients are computed by layer-level reverse mode (relu,
affine, fold as the unfold adjoint, softmax/cross-entropy fused).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conv import (
    WeightMatrix,
    fold_batch,
    kernels_to_weight_matrix,
    unfold_batch,
)
from .patterns import BitMask, NmConfig, enumerate_patterns, mask_from_indices
from .sampler import (
    FREEZE_DETERMINISTIC,
    FrozenMask,
    MaskLogits,
    assemble_mask,
    choice_entropy,
    derive_seed,
    freeze,
    freeze_indices,
    gs_soft_sample,
    sample_gumbel,
    soft_choice_grad,
)

__all__ = [
    "ConvLayer",
    "DenseLayer",
    "CompositionalClassifier",
    "TrainConfig",
    "TrainHistory",
    "TrainingDiverged",
    "forward",
    "forward_batch",
    "forward_reference",
    "cross_entropy",
    "batch_loss",
    "grads_wrt_logits",
    "AdamWState",
    "adamw_step",
    "lr_schedule",
    "temperature_at",
    "train_masks",
    "evaluate_topk",
    "init_mask_logits",
    "draw_noise",
    "build_conv_classifier",
]

MODES = ("dense", "soft", "hard")
ACTIVATIONS = ("relu", "identity")

_SPLIT_TAG = 101
_EPOCH_TAG = 211
_NOISE_TAG = 307
_FREEZE_TAG = 401
_INIT_TAG = 503


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite; carries a state dump."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class ConvLayer:
    """Convolution layer: frozen kernels plus optional trainable mask logits."""

    name: str
    kernels: np.ndarray  # (c_out, c_in, kh, kw)
    bias: np.ndarray  # (c_out,)
    activation: str = "relu"
    maskable: bool = True
    mask_logits: MaskLogits | None = None
    frozen_mask: object | None = None  # BitMask or {0,1} ndarray
    weight: WeightMatrix = field(init=False)

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.kernels.shape[0],):
            raise ValueError("bias length must equal c_out")
        self.refresh_weight()

    def refresh_weight(self) -> None:
        """Re-derive the flattened weight matrix after a kernel update."""
        self.weight = kernels_to_weight_matrix(self.kernels, align4=True)

    @property
    def kernel_dims(self) -> tuple[int, int]:
        return self.kernels.shape[2], self.kernels.shape[3]

    def mask_array(self) -> np.ndarray:
        if self.frozen_mask is None:
            raise ValueError(f"layer {self.name}: no frozen mask set")
        bits = self.frozen_mask.bits if isinstance(self.frozen_mask, BitMask) else self.frozen_mask
        bits = np.asarray(bits, dtype=np.float64)
        if bits.shape != self.weight.matrix.shape:
            raise ValueError(f"layer {self.name}: mask shape {bits.shape} mismatch")
        return bits


@dataclass
class DenseLayer:
    """Fully connected layer on the flattened activations."""

    name: str
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("inconsistent dense layer shapes")


@dataclass
class CompositionalClassifier:
    """Depth-d stack of affine+activation layers with a softmax head.

    ``input_shape`` is (c, h, w) for conv-first models or (n,) when the first
    layer is dense (or when there are no layers at all and the input feeds the
    softmax directly).
    """

    layers: list
    input_shape: tuple
    class_count: int

    def __post_init__(self) -> None:
        if self.class_count < 2:
            raise ValueError("need at least 2 classes")
        self._check_composition()

    def _check_composition(self) -> None:
        shape = tuple(self.input_shape)
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                if len(shape) != 3:
                    raise ValueError(f"layer {layer.name}: expected a 3-D input, have {shape}")
                c_out, c_in, _, _ = layer.kernels.shape
                if c_in != shape[0]:
                    raise ValueError(
                        f"layer {layer.name}: expects {c_in} channels, have {shape[0]}"
                    )
                shape = (c_out, shape[1], shape[2])
            elif isinstance(layer, DenseLayer):
                flat = int(np.prod(shape))
                if layer.weight.shape[1] != flat:
                    raise ValueError(
                        f"layer {layer.name}: expects {layer.weight.shape[1]} inputs, "
                        f"have {flat}"
                    )
                shape = (layer.weight.shape[0],)
            else:
                raise TypeError(f"unknown layer type {type(layer)!r}")
        if int(np.prod(shape)) != self.class_count:
            raise ValueError(
                f"model produces {int(np.prod(shape))} features for {self.class_count} classes"
            )

    @property
    def depth(self) -> int:
        return len(self.layers)

    def maskable_layers(self) -> list[tuple[int, ConvLayer]]:
        return [
            (i, l)
            for i, l in enumerate(self.layers)
            if isinstance(l, ConvLayer) and l.maskable
        ]

    def layer_weight_matrix(self, index: int) -> np.ndarray:
        layer = self.layers[index]
        return layer.weight.matrix if isinstance(layer, ConvLayer) else layer.weight


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(pre: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(pre, 0.0) if kind == "relu" else pre


def _activate_grad(pre: np.ndarray, kind: str) -> np.ndarray:
    return (pre > 0).astype(np.float64) if kind == "relu" else np.ones_like(pre)


def init_mask_logits(
    model: CompositionalClassifier,
    temperature: float = 0.1,
    seed: int = 0,
    config: NmConfig = NmConfig(),
) -> None:
    """Attach fresh Glorot-initialized choice logits to every maskable layer."""
    for idx, layer in model.maskable_layers():
        layer.mask_logits = MaskLogits.create(
            rows=layer.weight.c_out,
            real_cols=layer.weight.real_cols,
            config=config,
            temperature=temperature,
            seed=derive_seed(seed, _INIT_TAG, idx),
        )


def draw_noise(model: CompositionalClassifier, seed: int, draw: int) -> dict[int, np.ndarray]:
    """One fresh Gumbel array per maskable layer, keyed by layer index.

    Streams are keyed by (seed, layer index, draw counter), so the same
    (seed, draw) pair always reproduces the same noise.
    """
    noise = {}
    for idx, layer in model.maskable_layers():
        if layer.mask_logits is None:
            raise ValueError(f"layer {layer.name} has no mask logits")
        ml = layer.mask_logits
        noise[idx] = sample_gumbel(
            ml.block_count, ml.n, derive_seed(seed, _NOISE_TAG, idx, draw)
        )
    return noise


def _effective_weight(layer: ConvLayer, idx: int, mode: str, noise, patterns, record=None):
    w = layer.weight.matrix
    if mode == "dense" or not layer.maskable:
        return w
    if mode == "soft":
        if layer.mask_logits is None:
            raise ValueError(f"soft mode: layer {layer.name} has no mask logits")
        if noise is None or idx not in noise:
            raise ValueError(f"soft mode: no noise provided for layer {layer.name}")
        z = gs_soft_sample(layer.mask_logits, noise[idx])
        soft = assemble_mask(z, patterns, layer.mask_logits.layer_shape)
        soft = soft.bits.astype(np.float64) if isinstance(soft, BitMask) else soft
        if record is not None:
            record["choices"] = z
            record["soft_mask"] = soft
        return soft * w
    if mode == "hard":
        return layer.mask_array() * w
    raise ValueError(f"unknown mode {mode!r}")


def forward_batch(
    model: CompositionalClassifier,
    x: np.ndarray,
    mode: str = "dense",
    noise: dict[int, np.ndarray] | None = None,
    trace: bool = False,
):
    """Run a batch through the model; returns class probabilities (batch, c).

    With ``trace`` the per-layer intermediates needed by the backward pass are
    returned as well.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    expect = tuple(model.input_shape)
    if x.shape[1:] != expect:
        raise ValueError(f"input shape {x.shape[1:]} does not match model {expect}")
    patterns = enumerate_patterns(NmConfig())
    h = x
    records = []
    for idx, layer in enumerate(model.layers):
        rec: dict = {"layer": idx}
        if isinstance(layer, ConvLayer):
            u = unfold_batch(h, layer.kernel_dims)
            mat = u.matrix
            if layer.weight.structural_cols:
                pad = np.zeros(
                    (mat.shape[0], layer.weight.structural_cols, mat.shape[2])
                )
                mat = np.concatenate([mat, pad], axis=1)
            weff = _effective_weight(layer, idx, mode, noise, patterns, rec)
            pre = np.einsum("ok,bkl->bol", weff, mat) + layer.bias[None, :, None]
            oh, ow = u.out_hw
            pre = pre.reshape(h.shape[0], weff.shape[0], oh, ow)
            if trace:
                rec.update(input_shape=h.shape[1:], unfolded=mat, weff=weff, pre=pre)
            h = _activate(pre, layer.activation)
        else:
            flat = h.reshape(h.shape[0], -1)
            pre = flat @ layer.weight.T + layer.bias[None, :]
            if trace:
                rec.update(flat_in=flat, pre=pre, input_shape=h.shape[1:])
            h = _activate(pre, layer.activation)
        records.append(rec)
    logits = h.reshape(h.shape[0], -1)
    probs = _softmax(logits)
    if trace:
        return probs, records
    return probs


def forward(
    model: CompositionalClassifier,
    x: np.ndarray,
    mode: str = "dense",
    noise: dict[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Single-sample forward pass; returns the class probability vector."""
    return forward_batch(model, np.asarray(x, dtype=np.float64)[None], mode, noise)[0]


def forward_reference(model: CompositionalClassifier, x: np.ndarray) -> np.ndarray:
    """Dense forward through the direct sliding-window convolution, bypassing
    the unfold/matmul reformulation entirely.  Reference oracle."""
    from .conv import conv_direct

    h = np.asarray(x, dtype=np.float64)
    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            pre = conv_direct(h, layer.kernels) + layer.bias[:, None, None]
            h = _activate(pre, layer.activation)
        else:
            pre = layer.weight @ h.reshape(-1) + layer.bias
            h = _activate(pre, layer.activation)
    return _softmax(h.reshape(-1))


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """Negative log likelihood of ``label``; probabilities clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(probs[label], 1e-12)))


def batch_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over a batch."""
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, 1e-12)).mean())


def _backward(
    model: CompositionalClassifier,
    records: list[dict],
    probs: np.ndarray,
    labels: np.ndarray,
    want_logit_grads: bool = True,
    want_weight_grads: bool = False,
):
    """Reverse pass from mean cross-entropy; returns (logit grads, weight grads).

    Weight gradients are used only by the dense pretraining utility; mask
    training consumes logit gradients exclusively and never writes weights.
    """
    batch = probs.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros_like(probs)
    onehot[np.arange(batch), labels] = 1.0
    dout = (probs - onehot) / batch  # d(mean CE)/d(pre-softmax logits)
    patterns = enumerate_patterns(NmConfig())
    logit_grads: dict[int, np.ndarray] = {}
    weight_grads: dict[int, dict[str, np.ndarray]] = {}
    for rec in reversed(records):
        layer = model.layers[rec["layer"]]
        if isinstance(layer, DenseLayer):
            dout = dout.reshape(rec["pre"].shape)
            dpre = dout * _activate_grad(rec["pre"], layer.activation)
            if want_weight_grads:
                weight_grads[rec["layer"]] = {
                    "weight": dpre.T @ rec["flat_in"],
                    "bias": dpre.sum(axis=0),
                }
            dout = (dpre @ layer.weight).reshape((batch, *rec["input_shape"]))
        else:
            dout = dout.reshape(rec["pre"].shape)
            dpre = dout * _activate_grad(rec["pre"], layer.activation)
            b, c_out, oh, ow = dpre.shape
            dpre2 = dpre.reshape(b, c_out, oh * ow)
            u = rec["unfolded"]
            dweff = np.einsum("bol,bkl->ok", dpre2, u)
            if want_logit_grads and "choices" in rec:
                ml = layer.mask_logits
                dsoft = dweff * layer.weight.matrix
                rows, padded = ml.layer_shape
                m = ml.config.block_len
                dblocks = dsoft.reshape(rows * padded // m, m)
                dz = dblocks @ patterns.columns.astype(np.float64)
                logit_grads[rec["layer"]] = soft_choice_grad(rec["choices"], dz, ml)
            if want_weight_grads:
                real = layer.weight.real_cols
                dmask = rec.get("soft_mask")
                dk = dweff if dmask is None else dweff * dmask
                weight_grads[rec["layer"]] = {
                    "kernels": dk[:, :real].reshape(layer.kernels.shape),
                    "bias": dpre2.sum(axis=(0, 2)),
                }
            du = np.einsum("ok,bol->bkl", rec["weff"], dpre2)
            real = layer.weight.real_cols
            dout = fold_batch(du[:, :real, :], rec["input_shape"], layer.kernel_dims)
    return logit_grads, weight_grads


def grads_wrt_logits(
    model: CompositionalClassifier,
    x: np.ndarray,
    labels: np.ndarray,
    noise: dict[int, np.ndarray],
) -> tuple[float, dict[int, np.ndarray]]:
    """Gradient of the mean batch cross-entropy w.r.t. every choice logit.

    Runs the soft forward with the provided (fixed per batch) Gumbel noise.
    Pretrained weights receive no gradient and are never modified.
    """
    probs, records = forward_batch(model, x, mode="soft", noise=noise, trace=True)
    loss = batch_loss(probs, labels)
    if not np.isfinite(loss):
        raise TrainingDiverged("non-finite loss", {"loss": loss})
    grads, _ = _backward(model, records, probs, labels, want_logit_grads=True)
    return loss, grads


@dataclass
class AdamWState:
    """First/second moment accumulators for one parameter tensor."""

    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamWState":
        return cls(0, np.zeros_like(params), np.zeros_like(params))


@dataclass(frozen=True)
class TrainConfig:
    """Mask-training hyperparameters.

    Defaults follow the documented training procedure: AdamW at eta=1.0 with
    beta1=0.9 and decoupled weight decay 1e-4, stepping the learning rate by
    gamma=0.1 every 3 epochs with no warm-up, constant temperature 0.1.
    beta2/eps take the standard 0.999/1e-8.
    """

    lr: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    step_epochs: int = 3
    step_gamma: float = 0.1
    epochs: int = 3
    batch_size: int = 128
    temperature: float = 0.1
    seed: int = 0
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.1
    freeze_mode: str = FREEZE_DETERMINISTIC
    anneal_temperature: bool = False

    def __post_init__(self) -> None:
        for name in ("lr", "momentum", "weight_decay", "step_epochs", "step_gamma",
                     "epochs", "batch_size", "temperature", "beta2", "eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.step_gamma <= 1:
            raise ValueError("step_gamma must be in (0, 1]")
        if self.step_epochs < 1:
            raise ValueError("step_epochs must be at least 1")
        if self.temperature < 1e-3:
            raise ValueError("temperature below 1e-3 is not supported")
        if self.epochs <= 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")


def adamw_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamWState,
    lr: float,
    config: TrainConfig,
) -> tuple[np.ndarray, AdamWState]:
    """One decoupled-weight-decay Adam update with bias correction."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter/gradient/state shapes do not match")
    b1, b2 = config.momentum, config.beta2
    t = state.step + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads**2
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    new = params - lr * mhat / (np.sqrt(vhat) + config.eps) - lr * config.weight_decay * params
    return new, AdamWState(t, m, v)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Step schedule: lr * gamma^(epoch // step_epochs), no warm-up."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return config.lr * config.step_gamma ** (epoch // config.step_epochs)


def temperature_at(epoch: int, config: TrainConfig) -> float:
    """Constant by default; optional exponential anneal from 1.0 down to the
    configured temperature across the epoch budget."""
    if not config.anneal_temperature or config.epochs == 1:
        return config.temperature
    frac = epoch / (config.epochs - 1)
    return float(1.0 * (config.temperature / 1.0) ** frac)


@dataclass
class TrainHistory:
    """Per-epoch training record."""

    mean_loss: list[float] = field(default_factory=list)
    top1: list[float] = field(default_factory=list)
    top5: list[float] = field(default_factory=list)
    mask_entropy: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def to_tsv(self) -> str:
        lines = ["epoch\tmean_loss\ttop1\ttop5\tmask_entropy\tlr"]
        for e in range(len(self.mean_loss)):
            lines.append(
                f"{e}\t{self.mean_loss[e]:.6f}\t{self.top1[e]:.6f}\t"
                f"{self.top5[e]:.6f}\t{self.mask_entropy[e]:.6f}\t{self.lr[e]:.6g}"
            )
        return "\n".join(lines)


def _split_indices(n: int, fraction: float, seed: int):
    rng = np.random.Generator(np.random.Philox(key=derive_seed(seed, _SPLIT_TAG)))
    order = rng.permutation(n)
    n_val = int(round(n * fraction))
    return order[n_val:], order[:n_val]


def _snapshot_hard_masks(model: CompositionalClassifier) -> None:
    patterns = enumerate_patterns(NmConfig())
    for _, layer in model.maskable_layers():
        layer.frozen_mask = freeze(layer.mask_logits, patterns, FREEZE_DETERMINISTIC)


def train_masks(
    model: CompositionalClassifier,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
) -> tuple[TrainHistory, dict[str, FrozenMask]]:
    """Learn choice logits over frozen weights, then freeze them into bit masks.

    Every training sample is visited exactly once per epoch (seeded shuffle,
    no augmentation).  Fresh Gumbel noise is drawn per batch.  Held-out
    metrics are evaluated in hard mode on a deterministic freeze snapshot.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("dataset is empty")
    if len(images) != len(labels):
        raise ValueError("image/label counts differ")
    if not model.maskable_layers():
        raise ValueError("model has no maskable layers")
    if any(l.mask_logits is None for _, l in model.maskable_layers()):
        init_mask_logits(model, config.temperature, config.seed)

    train_idx, val_idx = _split_indices(len(images), config.val_fraction, config.seed)
    if len(val_idx) == 0:
        val_idx = train_idx
    patterns = enumerate_patterns(NmConfig())
    states = {
        idx: AdamWState.zeros_like(layer.mask_logits.logits)
        for idx, layer in model.maskable_layers()
    }
    history = TrainHistory()
    draw = 0
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        tau = temperature_at(epoch, config)
        for _, layer in model.maskable_layers():
            layer.mask_logits.temperature = tau
        rng = np.random.Generator(np.random.Philox(key=derive_seed(config.seed, _EPOCH_TAG, epoch)))
        order = train_idx[rng.permutation(len(train_idx))]
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            noise = draw_noise(model, config.seed, draw)
            draw += 1
            try:
                loss, grads = grads_wrt_logits(model, images[batch], labels[batch], noise)
            except TrainingDiverged as exc:
                exc.dump.update(epoch=epoch, batch_start=start, lr=lr)
                raise
            losses.append(loss)
            for idx, layer in model.maskable_layers():
                new, states[idx] = adamw_step(
                    layer.mask_logits.logits, grads[idx], states[idx], lr, config
                )
                layer.mask_logits.logits = new
        _snapshot_hard_masks(model)
        history.mean_loss.append(float(np.mean(losses)))
        history.top1.append(evaluate_topk(model, images[val_idx], labels[val_idx], 1, "hard"))
        history.top5.append(
            evaluate_topk(model, images[val_idx], labels[val_idx], min(5, model.class_count), "hard")
        )
        history.mask_entropy.append(
            float(np.mean([choice_entropy(l.mask_logits) for _, l in model.maskable_layers()]))
        )
        history.lr.append(lr)

    frozen: dict[str, FrozenMask] = {}
    for idx, layer in model.maskable_layers():
        seed = derive_seed(config.seed, _FREEZE_TAG, idx)
        indices = freeze_indices(layer.mask_logits, config.freeze_mode, seed)
        rows, padded = layer.mask_logits.layer_shape
        mask = mask_from_indices(indices, patterns, rows, padded)
        layer.frozen_mask = mask
        frozen[layer.name] = FrozenMask(layer.name, indices, mask, config.freeze_mode, seed)
    return history, frozen


def evaluate_topk(
    model: CompositionalClassifier,
    images: np.ndarray,
    labels: np.ndarray,
    k: int,
    mode: str = "dense",
    batch_size: int = 256,
) -> float:
    """Fraction of samples whose label ranks in the k most probable classes;
    ties at the k-th rank break toward the lower class index."""
    if k < 1 or k > model.class_count:
        raise ValueError(f"k must be in [1, {model.class_count}]")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    hits = 0
    for start in range(0, len(images), batch_size):
        probs = forward_batch(model, images[start : start + batch_size], mode)
        # stable argsort on -p: equal probabilities keep ascending class order
        ranks = np.argsort(-probs, axis=1, kind="stable")[:, :k]
        hits += int((ranks == labels[start : start + batch_size, None]).any(axis=1).sum())
    return hits / len(images)


def build_conv_classifier(
    input_shape: tuple[int, int, int],
    conv_channels: list[int],
    class_count: int,
    kernel: int = 3,
    seed: int = 0,
) -> CompositionalClassifier:
    """Small conv stack (relu) plus a linear softmax head, He-initialized."""
    c, h, w = input_shape
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    layers: list = []
    c_in = c
    for i, c_out in enumerate(conv_channels):
        fan_in = c_in * kernel * kernel
        k = rng.standard_normal((c_out, c_in, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        layers.append(ConvLayer(f"conv{i}", k, np.zeros(c_out)))
        c_in = c_out
    flat = c_in * h * w
    wh = rng.standard_normal((class_count, flat)) * np.sqrt(2.0 / flat)
    layers.append(DenseLayer("head", wh, np.zeros(class_count)))
    return CompositionalClassifier(layers, input_shape, class_count)
