"""Shared fixtures.

The desk-scale experiment chain (synthetic dataset -> dense pretraining ->
mask training -> heuristic masks) is expensive, so it is built once and cached
under tests/_cache; loading re-derives every reported metric from the cached
artifacts instead of trusting the metadata file.  Deleting the cache directory
forces a full rebuild.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from nmconv import io
from nmconv.baseline import magnitude_prune_matrix, permutation_search, random_mask
from nmconv.patterns import NmConfig, enumerate_patterns
from nmconv.pretrain import PretrainConfig, train_dense
from nmconv.runtime import TrainConfig, build_conv_classifier, evaluate_topk, train_masks
from nmconv.synth import sample_dataset

FIXTURE_VERSION = "v1"
CACHE = Path(__file__).parent / "_cache" / FIXTURE_VERSION

DATASET_SEED = 7
MODEL_SEED = 11
PRETRAIN = PretrainConfig(lr=3e-3, epochs=3, batch_size=128, seed=0)
MASK_TRAIN = TrainConfig()  # documented defaults: lr=1.0, 3 epochs, tau=0.1, seed=0
PERM_BUDGET = 3000
RANDOM_MASK_SEED = 100


@pytest.fixture(scope="session")
def patterns24():
    return enumerate_patterns(NmConfig())


def _normalize(u8: np.ndarray) -> np.ndarray:
    return ((u8.astype(np.float64) / 255.0) - 0.5) / 0.5


def _build_cache() -> None:
    CACHE.mkdir(parents=True, exist_ok=True)
    tr_img, tr_lab = sample_dataset(10000, size=16, seed=DATASET_SEED, sample_seed=7001)
    te_img, te_lab = sample_dataset(2000, size=16, seed=DATASET_SEED, sample_seed=7002)
    io.save_idx_images(CACHE / "train-images.idx", tr_img)
    io.save_idx_labels(CACHE / "train-labels.idx", tr_lab)
    io.save_idx_images(CACHE / "test-images.idx", te_img)
    io.save_idx_labels(CACHE / "test-labels.idx", te_lab)

    x, y = _normalize(tr_img)[:, None], tr_lab.astype(np.int64)
    xt, yt = _normalize(te_img)[:, None], te_lab.astype(np.int64)

    model = build_conv_classifier((1, 16, 16), [8, 12], class_count=10, seed=MODEL_SEED)
    train_dense(model, x, y, PRETRAIN)
    io.save_model(CACHE / "model.nmcl", model)
    dense_top1 = evaluate_topk(model, xt, yt, 1, "dense")
    dense_top5 = evaluate_topk(model, xt, yt, 5, "dense")

    checksum_before = io.weight_payload_checksum(model)
    history, frozen = train_masks(model, x, y, MASK_TRAIN)
    checksum_after = io.weight_payload_checksum(model)
    records = []
    for _, layer in model.maskable_layers():
        fm = frozen[layer.name]
        rows, cols = layer.mask_logits.layer_shape
        records.append(
            io.MaskRecord(fm.name, rows, cols, fm.indices.astype(np.uint8), fm.mode, fm.seed)
        )
    io.save_mask(CACHE / "learned.nmsk", records)
    (CACHE / "learned.history.tsv").write_text(history.to_tsv() + "\n")

    permuted = {}
    for _, layer in model.maskable_layers():
        plan, pmask = permutation_search(layer.weight.matrix, PERM_BUDGET)
        permuted[layer.name + ".perm"] = plan.permutation
        permuted[layer.name + ".bits"] = pmask.bits
        permuted[layer.name + ".scores"] = np.array([plan.score_before, plan.score_after])
    np.savez(CACHE / "permuted.npz", **permuted)

    meta = {
        "dense_top1": dense_top1,
        "dense_top5": dense_top5,
        "checksum_before": checksum_before,
        "checksum_after": checksum_after,
        "mask_entropy": history.mask_entropy,
        "history_lr": history.lr,
    }
    (CACHE / "meta.json").write_text(json.dumps(meta, indent=1))


@pytest.fixture(scope="session")
def desk():
    """The full desk-scale experiment: data, pretrained model, learned and
    heuristic masks, and every accuracy measured fresh from the artifacts."""
    if not (CACHE / "meta.json").exists():
        _build_cache()
    meta = json.loads((CACHE / "meta.json").read_text())

    train = io.load_idx(CACHE / "train-images.idx", CACHE / "train-labels.idx")
    test = io.load_idx(CACHE / "test-images.idx", CACHE / "test-labels.idx")
    xt, yt = test.tensors()

    model = io.load_model(CACHE / "model.nmcl")
    dense_top1 = evaluate_topk(model, xt, yt, 1, "dense")
    dense_top5 = evaluate_topk(model, xt, yt, 5, "dense")

    learned_records = io.load_mask(CACHE / "learned.nmsk")
    by_name = {r.name: r for r in learned_records}
    for _, layer in model.maskable_layers():
        layer.frozen_mask = by_name[layer.name].to_bitmask()
    learned_top1 = evaluate_topk(model, xt, yt, 1, "hard")
    learned_top5 = evaluate_topk(model, xt, yt, 5, "hard")

    magnitude_masks = {
        layer.name: magnitude_prune_matrix(layer.weight.matrix)
        for _, layer in model.maskable_layers()
    }
    for _, layer in model.maskable_layers():
        layer.frozen_mask = magnitude_masks[layer.name]
    magnitude_top1 = evaluate_topk(model, xt, yt, 1, "hard")

    permuted = np.load(CACHE / "permuted.npz")
    for _, layer in model.maskable_layers():
        perm = permuted[layer.name + ".perm"]
        bits = permuted[layer.name + ".bits"]
        effective = np.empty_like(bits)
        effective[:, perm] = bits
        layer.frozen_mask = effective
    permuted_top1 = evaluate_topk(model, xt, yt, 1, "hard")

    for i, (_, layer) in enumerate(model.maskable_layers()):
        layer.frozen_mask = random_mask(
            layer.weight.c_out, layer.weight.cols, seed=RANDOM_MASK_SEED + i
        )
    random_top1 = evaluate_topk(model, xt, yt, 1, "hard")

    # leave the model holding the learned masks for downstream tests
    for _, layer in model.maskable_layers():
        layer.frozen_mask = by_name[layer.name].to_bitmask()

    return {
        "cache": CACHE,
        "meta": meta,
        "train": train,
        "test": test,
        "model": model,
        "learned_records": learned_records,
        "magnitude_masks": magnitude_masks,
        "permuted_npz": permuted,
        "dense_top1": dense_top1,
        "dense_top5": dense_top5,
        "learned_top1": learned_top1,
        "learned_top5": learned_top5,
        "magnitude_top1": magnitude_top1,
        "permuted_top1": permuted_top1,
        "random_top1": random_top1,
    }
