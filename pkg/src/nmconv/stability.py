"""Executable prediction-stability certificates for compositional classifiers.

Every bound composes the per-layer operator infinity norms (max absolute row
sum) with the activation Lipschitz constant:

  classifier Lipschitz:      L^d * prod_i ||W_i||
  perturbed classifier:      adds L * ||dW|| * prod_{i != j} ||W_i||
  mask as perturbation:      dW = (B - 1) * W, with ||dW|| <= ||W|| (tight)
  perturbation stability:    gamma > L^d * ||dW|| * ||x|| * prod_{i != j} ||W_i||
  any-mask stability:        gamma > L^d * ||x|| * prod_i ||W_i||
  mask reuse after update:   gamma > L^d * (||W_j|| + ||U_j||) * ||x|| * prod_{i != j}

gamma is the confidence of the unperturbed prediction: half the gap between
the two largest class probabilities, the minimal infinity-norm probability
shift that can change the argmax.  Certificates with a bound >= 1/2 are
flagged vacuous (no attainable confidence can clear them).  Bias vectors are
excluded from all products; layer indices j are 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .patterns import BitMask
from .runtime import CompositionalClassifier, forward

__all__ = [
    "NormProfile",
    "StabilityCertificate",
    "inf_norm",
    "norm_profile",
    "lipschitz_bound",
    "perturbed_lipschitz_bound",
    "mask_to_perturbation",
    "confidence",
    "stability_margin",
    "masking_stability",
    "update_masking_stability",
]

VACUOUS_AT = 0.5  # confidence can never exceed 1/2, so such bounds certify nothing


def inf_norm(w: np.ndarray) -> float:
    """Operator infinity norm: max over rows of the absolute row sum."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {w.shape}")
    if w.size == 0:
        return 0.0
    return float(np.abs(w).sum(axis=1).max())


@dataclass(frozen=True)
class NormProfile:
    """Per-layer operator norms plus the activation Lipschitz constant."""

    weight_norms: tuple[float, ...]
    activation_lipschitz: float = 1.0

    def __post_init__(self) -> None:
        if any(n < 0 for n in self.weight_norms):
            raise ValueError("norms must be non-negative")
        if self.activation_lipschitz < 0:
            raise ValueError("activation Lipschitz constant must be non-negative")

    @property
    def depth(self) -> int:
        return len(self.weight_norms)

    def product(self, skip: int | None = None) -> float:
        """Product of weight norms, optionally skipping the 1-based layer ``skip``."""
        out = 1.0
        for i, n in enumerate(self.weight_norms, start=1):
            if i != skip:
                out *= n
        return out


def norm_profile(model: CompositionalClassifier) -> NormProfile:
    """Profile a model: infinity norm per layer; relu/identity are 1-Lipschitz."""
    norms = tuple(inf_norm(model.layer_weight_matrix(i)) for i in range(model.depth))
    return NormProfile(norms, 1.0)


def _check_layer(model: CompositionalClassifier, j: int) -> None:
    if not 1 <= j <= model.depth:
        raise ValueError(f"layer index {j} out of range [1, {model.depth}]")


def lipschitz_bound(model: CompositionalClassifier) -> float:
    """Certificate on the classifier's Lipschitz constant: L^d * prod ||W_i||."""
    p = norm_profile(model)
    return p.activation_lipschitz**p.depth * p.product()


def perturbed_lipschitz_bound(
    model: CompositionalClassifier, j: int, delta_norm: float
) -> float:
    """Lipschitz certificate after adding a norm-``delta_norm`` perturbation to
    layer j: base bound plus L * ||dW|| * prod_{i != j} ||W_i||."""
    _check_layer(model, j)
    if delta_norm < 0:
        raise ValueError("delta_norm must be non-negative")
    p = norm_profile(model)
    return lipschitz_bound(model) + p.activation_lipschitz * delta_norm * p.product(skip=j)


def mask_to_perturbation(mask, w) -> tuple[np.ndarray, float]:
    """The additive perturbation equivalent to masking: dW = (B - 1) * W.

    Satisfies W + dW == B * W exactly; the returned norm obeys
    ||dW||_inf <= ||W||_inf, with equality for the all-zero mask.
    """
    bits = mask.bits if isinstance(mask, BitMask) else np.asarray(mask)
    w = np.asarray(w, dtype=np.float64)
    if bits.shape != w.shape:
        raise ValueError(f"mask shape {bits.shape} does not match weights {w.shape}")
    dw = (bits.astype(np.float64) - 1.0) * w
    return dw, inf_norm(dw)


def confidence(probs: np.ndarray) -> float:
    """Half the gap between the two largest probabilities: the minimal
    infinity-norm shift of the probability vector that changes the argmax."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.shape[0] < 2:
        raise ValueError("need a probability vector over at least 2 classes")
    if probs.min() < -1e-9 or abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError("not a valid probability vector")
    top2 = np.sort(probs)[-2:]
    return float((top2[1] - top2[0]) / 2.0)


@dataclass(frozen=True)
class StabilityCertificate:
    """A per-sample guarantee: the prediction cannot change if gamma > bound."""

    sample_id: int | None
    gamma: float
    bound: float
    lemma: int  # 4: given perturbation, 5: any mask, 6: mask reuse after update
    stable_guaranteed: bool
    vacuous: bool

    def record_line(self) -> str:
        sid = -1 if self.sample_id is None else self.sample_id
        return (
            f"{sid}\t{self.gamma:.9f}\t{self.bound:.9f}\tL{self.lemma}\t"
            f"{int(self.stable_guaranteed)}\t{int(self.vacuous)}"
        )

    @staticmethod
    def record_header() -> str:
        return "sample\tgamma\tbound\tlemma\tguaranteed\tvacuous"


def _certify(model, x, bound: float, lemma: int, sample_id) -> StabilityCertificate:
    gamma = confidence(forward(model, x, mode="dense"))
    return StabilityCertificate(
        sample_id=sample_id,
        gamma=gamma,
        bound=bound,
        lemma=lemma,
        stable_guaranteed=gamma > bound,
        vacuous=bound >= VACUOUS_AT,
    )


def stability_margin(
    model: CompositionalClassifier,
    x: np.ndarray,
    j: int,
    delta_w: np.ndarray,
    sample_id: int | None = None,
) -> StabilityCertificate:
    """Stability under a concrete additive perturbation of layer j."""
    _check_layer(model, j)
    delta_w = np.asarray(delta_w, dtype=np.float64)
    if delta_w.shape != model.layer_weight_matrix(j - 1).shape:
        raise ValueError("perturbation shape does not match layer weights")
    p = norm_profile(model)
    x = np.asarray(x, dtype=np.float64)
    bound = (
        p.activation_lipschitz**p.depth
        * inf_norm(delta_w)
        * float(np.abs(x).max())
        * p.product(skip=j)
    )
    return _certify(model, x, bound, 4, sample_id)


def masking_stability(
    model: CompositionalClassifier,
    x: np.ndarray,
    j: int,
    sample_id: int | None = None,
) -> StabilityCertificate:
    """Stability under every possible masking of layer j: the worst-case
    ||dW|| <= ||W_j|| turns the skipped product into the full one."""
    _check_layer(model, j)
    p = norm_profile(model)
    x = np.asarray(x, dtype=np.float64)
    bound = p.activation_lipschitz**p.depth * float(np.abs(x).max()) * p.product()
    return _certify(model, x, bound, 5, sample_id)


def update_masking_stability(
    model: CompositionalClassifier,
    x: np.ndarray,
    j: int,
    update: np.ndarray,
    sample_id: int | None = None,
) -> StabilityCertificate:
    """Stability of the mask-then-update composition: reusing any mask of layer
    j after adding the update U_j keeps the prediction whenever
    gamma > L^d * (||W_j|| + ||U_j||) * ||x|| * prod_{i != j} ||W_i||."""
    _check_layer(model, j)
    update = np.asarray(update, dtype=np.float64)
    wj = model.layer_weight_matrix(j - 1)
    if update.shape != wj.shape:
        raise ValueError(
            f"update shape {update.shape} does not match layer weights {wj.shape}"
        )
    p = norm_profile(model)
    x = np.asarray(x, dtype=np.float64)
    bound = (
        p.activation_lipschitz**p.depth
        * (inf_norm(wj) + inf_norm(update))
        * float(np.abs(x).max())
        * p.product(skip=j)
    )
    return _certify(model, x, bound, 6, sample_id)
