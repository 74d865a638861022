import numpy as np
import pytest

from nmconv.patterns import validate_mask
from nmconv.runtime import (
    AdamWState,
    CompositionalClassifier,
    ConvLayer,
    DenseLayer,
    TrainConfig,
    TrainingDiverged,
    adamw_step,
    batch_loss,
    build_conv_classifier,
    cross_entropy,
    draw_noise,
    evaluate_topk,
    forward,
    forward_batch,
    forward_reference,
    grads_wrt_logits,
    init_mask_logits,
    lr_schedule,
    temperature_at,
    train_masks,
)


def tiny_model(seed=1, channels=(2, 3), shape=(1, 6, 6), classes=4):
    return build_conv_classifier(shape, list(channels), class_count=classes, seed=seed)


def test_zero_depth_softmax_only():
    model = CompositionalClassifier([], (2,), 2)
    probs = forward(model, np.zeros(2))
    assert np.allclose(probs, [0.5, 0.5])


def test_dense_mode_matches_direct_conv_reference():
    rng = np.random.default_rng(0)
    model = tiny_model()
    x = rng.standard_normal((4, 1, 6, 6))
    batch = forward_batch(model, x, "dense")
    ref = np.stack([forward_reference(model, xi) for xi in x])
    assert np.abs(batch - ref).max() <= 1e-10
    assert np.abs(batch.sum(axis=1) - 1.0).max() < 1e-9


def test_hard_equals_soft_at_one_hot_choices(patterns24):
    rng = np.random.default_rng(1)
    model = tiny_model(seed=2)
    init_mask_logits(model, temperature=0.5, seed=3)
    noise = draw_noise(model, seed=4, draw=0)
    x = rng.standard_normal((2, 1, 6, 6))

    # freeze the hard choice implied by this noise into each layer
    from nmconv.sampler import assemble_mask, gs_hard_sample

    one_hot_noise = {}
    for idx, layer in model.maskable_layers():
        hard_choice = gs_hard_sample(layer.mask_logits, noise[idx])
        layer.frozen_mask = assemble_mask(
            hard_choice, patterns24, layer.mask_logits.layer_shape
        )
        # re-encode the one-hot choice as "soft" input: huge logit gaps
        one_hot_noise[idx] = np.where(hard_choice > 0, 1e4, -1e4) - layer.mask_logits.logits
    hard = forward_batch(model, x, "hard")
    soft = forward_batch(model, x, "soft", one_hot_noise)
    assert np.abs(hard - soft).max() <= 1e-10


def test_mode_validation():
    model = tiny_model()
    x = np.zeros((1, 1, 6, 6))
    with pytest.raises(ValueError):
        forward_batch(model, x, "soft")  # no logits attached
    with pytest.raises(ValueError):
        forward_batch(model, x, "hard")  # no frozen mask
    with pytest.raises(ValueError):
        forward_batch(model, x, "warm")
    with pytest.raises(ValueError):
        forward_batch(model, np.zeros((1, 2, 6, 6)), "dense")


def test_cross_entropy_examples():
    assert cross_entropy(np.array([1.0, 0.0]), 0) == 0.0
    assert cross_entropy(np.ones(4) / 4, 2) == pytest.approx(np.log(4))
    with pytest.raises(ValueError):
        cross_entropy(np.ones(4) / 4, 4)
    # analytic gradient wrt the labelled probability is -1/p
    p = np.array([0.6, 0.4])
    h = 1e-7
    fd = (cross_entropy(np.array([0.6 + h, 0.4]), 0) - cross_entropy(np.array([0.6 - h, 0.4]), 0)) / (2 * h)
    assert fd == pytest.approx(-1 / 0.6, rel=1e-6)


def test_grads_match_finite_differences_single_block():
    rng = np.random.default_rng(5)
    # one conv layer whose weight matrix is a single 4-block per row
    model = CompositionalClassifier(
        [ConvLayer("c0", rng.standard_normal((2, 1, 1, 1)) * 0.5, np.zeros(2)),
         DenseLayer("head", rng.standard_normal((2, 2 * 2 * 2)) * 0.3, np.zeros(2))],
        (1, 2, 2), 2)
    init_mask_logits(model, temperature=1.0, seed=6)
    noise = draw_noise(model, seed=7, draw=0)
    x = rng.standard_normal((1, 1, 2, 2))
    labels = np.array([1])
    _, grads = grads_wrt_logits(model, x, labels, noise)

    def loss_at():
        return batch_loss(forward_batch(model, x, "soft", noise), labels)

    idx, layer = model.maskable_layers()[0]
    g = grads[idx]
    h = 1e-5
    for b in range(layer.mask_logits.block_count):
        for i in range(6):
            layer.mask_logits.logits[b, i] += h
            up = loss_at()
            layer.mask_logits.logits[b, i] -= 2 * h
            dn = loss_at()
            layer.mask_logits.logits[b, i] += h
            fd = (up - dn) / (2 * h)
            denom = max(abs(fd), abs(g[b, i]), 1e-10)
            assert abs(fd - g[b, i]) / denom < 1e-4


def test_duplicated_sample_keeps_gradient():
    rng = np.random.default_rng(8)
    model = tiny_model(seed=9)
    init_mask_logits(model, temperature=1.0, seed=10)
    noise = draw_noise(model, seed=11, draw=0)
    x = rng.standard_normal((1, 1, 6, 6))
    single_loss, single = grads_wrt_logits(model, x, np.array([2]), noise)
    dup_loss, dup = grads_wrt_logits(
        model, np.repeat(x, 3, axis=0), np.array([2, 2, 2]), noise
    )
    assert dup_loss == pytest.approx(single_loss)
    for idx in single:
        assert np.allclose(single[idx], dup[idx], atol=1e-12)


def test_temperature_floor_enforced():
    with pytest.raises(ValueError):
        TrainConfig(temperature=1e-4)


def test_divergence_raises_with_dump():
    model = tiny_model(seed=12)
    init_mask_logits(model, seed=13)
    model.layers[0].kernels[0, 0, 0, 0] = np.nan
    model.layers[0].refresh_weight()
    noise = draw_noise(model, seed=14, draw=0)
    with pytest.raises(TrainingDiverged) as info:
        grads_wrt_logits(model, np.zeros((1, 1, 6, 6)), np.array([0]), noise)
    assert "loss" in info.value.dump


def test_adamw_step_behaviour():
    cfg = TrainConfig(lr=0.5, weight_decay=0.0)
    params = np.array([1.0, -2.0])
    state = AdamWState.zeros_like(params)
    new, state2 = adamw_step(params, np.zeros(2), state, 0.5, cfg)
    assert np.array_equal(new, params)  # zero grad, zero decay

    # one step from zero state: hand-computed oracle
    g = np.array([0.3, -0.7])
    cfg2 = TrainConfig(lr=0.1, weight_decay=0.0)
    new, st = adamw_step(params, g, AdamWState.zeros_like(params), 0.1, cfg2)
    mhat = g  # m/(1-b1) with m=(1-b1)g
    vhat = g**2
    expect = params - 0.1 * mhat / (np.sqrt(vhat) + cfg2.eps)
    assert np.allclose(new, expect, atol=1e-15)
    assert st.step == 1

    # decay only: multiplicative shrink by (1 - lr*lambda)
    cfg3 = TrainConfig(lr=0.2, weight_decay=0.05)
    new, _ = adamw_step(params, np.zeros(2), AdamWState.zeros_like(params), 0.2, cfg3)
    assert np.allclose(new, params * (1 - 0.2 * 0.05))


def test_lr_schedule_examples():
    cfg = TrainConfig(lr=1.0, step_epochs=3, step_gamma=0.1)
    assert lr_schedule(0, cfg) == 1.0
    assert lr_schedule(3, cfg) == pytest.approx(0.1)
    assert lr_schedule(7, cfg) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


def test_temperature_anneal():
    const = TrainConfig(temperature=0.1, epochs=5)
    assert temperature_at(4, const) == 0.1
    anneal = TrainConfig(temperature=0.1, epochs=5, anneal_temperature=True)
    taus = [temperature_at(e, anneal) for e in range(5)]
    assert taus[0] == pytest.approx(1.0)
    assert taus[-1] == pytest.approx(0.1)
    assert all(a > b for a, b in zip(taus, taus[1:]))


def test_evaluate_topk_tie_breaks():
    # zero-depth model: uniform probabilities over 10 classes
    model = CompositionalClassifier([], (10,), 10)
    images = np.zeros((10, 10))
    labels = np.arange(10)
    acc5 = evaluate_topk(model, images, labels, 5)
    assert acc5 == 0.5  # classes 0-4 win ties at the 5th rank
    assert evaluate_topk(model, images, labels, 1) == 0.1
    with pytest.raises(ValueError):
        evaluate_topk(model, images, labels, 11)


def test_topk_monotone_and_perfect_predictor():
    rng = np.random.default_rng(15)
    model = tiny_model(seed=16)
    x = rng.standard_normal((32, 1, 6, 6))
    labels = rng.integers(0, 4, 32)
    accs = [evaluate_topk(model, x, labels, k) for k in (1, 2, 3, 4)]
    assert all(a <= b for a, b in zip(accs, accs[1:]))
    assert accs[-1] == 1.0
    # perfect predictor
    probs = forward_batch(model, x, "dense")
    top1 = probs.argmax(axis=1)
    assert evaluate_topk(model, x, top1, 1) == 1.0


def _toy_training_setup():
    rng = np.random.default_rng(17)
    # two linearly separable blobs rendered as 4x4 single-channel images
    n = 240
    labels = rng.integers(0, 2, n)
    images = rng.normal(0, 0.25, (n, 1, 4, 4))
    images[labels == 0, 0, :2, :] += 1.0
    images[labels == 1, 0, 2:, :] += 1.0
    model = build_conv_classifier((1, 4, 4), [4], class_count=2, seed=18)
    return model, images, labels.astype(np.int64)


def test_train_masks_toy_problem(patterns24):
    model, images, labels = _toy_training_setup()
    from nmconv.pretrain import PretrainConfig, train_dense

    train_dense(model, images, labels, PretrainConfig(lr=5e-3, epochs=3, batch_size=32, seed=0))
    dense_acc = evaluate_topk(model, images, labels, 1, "dense")
    assert dense_acc > 0.9

    kernels_before = [l.kernels.copy() for _, l in model.maskable_layers()]
    cfg = TrainConfig(lr=0.5, epochs=3, batch_size=32, seed=1)
    history, frozen = train_masks(model, images, labels, cfg)
    hard_acc = evaluate_topk(model, images, labels, 1, "hard")
    assert hard_acc >= dense_acc - 0.01
    assert len(history.mean_loss) == len(history.top1) == cfg.epochs

    # frozen-weights contract, bit for bit
    for (_, layer), before in zip(model.maskable_layers(), kernels_before):
        assert np.array_equal(layer.kernels, before)
    for fm in frozen.values():
        assert validate_mask(fm.mask).ok


def test_train_masks_bit_reproducible():
    model_a, images, labels = _toy_training_setup()
    model_b = build_conv_classifier((1, 4, 4), [4], class_count=2, seed=18)
    cfg = TrainConfig(lr=0.5, epochs=2, batch_size=32, seed=5)
    hist_a, frozen_a = train_masks(model_a, images, labels, cfg)
    hist_b, frozen_b = train_masks(model_b, images, labels, cfg)
    assert hist_a.mean_loss == hist_b.mean_loss
    assert hist_a.top1 == hist_b.top1
    for name in frozen_a:
        assert np.array_equal(frozen_a[name].mask.bits, frozen_b[name].mask.bits)


def test_train_masks_rejects_empty_and_mismatched():
    model, images, labels = _toy_training_setup()
    with pytest.raises(ValueError):
        train_masks(model, images[:0], labels[:0], TrainConfig())
    with pytest.raises(ValueError):
        train_masks(model, images, labels[:-1], TrainConfig())


def test_hard_output_invariant_under_refreezing(patterns24):
    from nmconv.sampler import freeze

    model, images, labels = _toy_training_setup()
    cfg = TrainConfig(lr=0.5, epochs=1, batch_size=32, seed=2, freeze_mode="stochastic")
    _, frozen = train_masks(model, images, labels, cfg)
    out1 = forward_batch(model, images[:8], "hard")
    for _, layer in model.maskable_layers():
        fm = frozen[layer.name]
        layer.frozen_mask = freeze(layer.mask_logits, patterns24, fm.mode, fm.seed)
    out2 = forward_batch(model, images[:8], "hard")
    assert np.array_equal(out1, out2)


def test_loss_is_continuous_in_temperature():
    model, images, labels = _toy_training_setup()
    init_mask_logits(model, temperature=0.1, seed=3)
    noise = draw_noise(model, seed=4, draw=0)
    x, y = images[:16], labels[:16]
    losses = []
    for tau in (0.1 - 1e-4, 0.1, 0.1 + 1e-4):
        for _, layer in model.maskable_layers():
            layer.mask_logits.temperature = tau
        losses.append(batch_loss(forward_batch(model, x, "soft", noise), y))
    assert abs(losses[1] - losses[0]) < 1e-3
    assert abs(losses[2] - losses[1]) < 1e-3
