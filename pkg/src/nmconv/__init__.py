"""Learned 2:4 semi-structured sparsity for convolutional classifiers.

Convolution reformulated as matrix multiplication, per-block Gumbel-Softmax
mask learning over frozen pretrained weights, structured-sparse execution with
exact FLOP accounting, a magnitude/permutation pruning baseline, and
Lipschitz-based prediction-stability certificates.
"""

from .patterns import (
    BitMask,
    Compressed24,
    NmConfig,
    PatternMatrix,
    compress,
    decompress,
    enumerate_patterns,
    pattern_count,
    validate_mask,
)
from .sampler import (
    MaskLogits,
    assemble_mask,
    freeze,
    gs_hard_sample,
    gs_soft_sample,
    sample_gumbel,
)
from .conv import (
    UnfoldedInput,
    WeightMatrix,
    conv_direct,
    conv_matmul,
    kernels_to_weight_matrix,
    masked_conv,
    unfold,
)
from .kernel import FlopReport, bench_compare, flop_count, spmm
from .runtime import (
    CompositionalClassifier,
    ConvLayer,
    DenseLayer,
    TrainConfig,
    cross_entropy,
    evaluate_topk,
    forward,
    train_masks,
)
from .stability import (
    StabilityCertificate,
    confidence,
    lipschitz_bound,
    mask_to_perturbation,
    masking_stability,
    stability_margin,
    update_masking_stability,
)
from .baseline import (
    efficacy_score,
    magnitude_prune_block,
    magnitude_prune_matrix,
    permutation_search,
)

__version__ = "0.1.0"
