import numpy as np
import pytest

from nmconv.baseline import random_mask
from nmconv.kernel import BenchReport, bench_compare, flop_count, spmm, spmm_counted
from nmconv.patterns import BitMask, NmConfig, compress


def test_spmm_identity_right_multiplication():
    a = compress(np.array([[1.0, 2.0, 3.0, 4.0]]), BitMask(np.array([[1, 0, 1, 0]])))
    out = spmm(a, np.eye(4))
    assert out.tolist() == [[1.0, 0.0, 3.0, 0.0]]


def test_spmm_zero_input():
    a = compress(np.ones((2, 8)), random_mask(2, 8, seed=1))
    assert not spmm(a, np.zeros((8, 3))).any()


def test_spmm_matches_dense_oracle():
    rng = np.random.default_rng(2)
    for trial in range(10):
        rows, blocks, xc = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 9)
        cols = int(blocks) * 4
        w = rng.standard_normal((rows, cols))
        mask = random_mask(int(rows), cols, seed=trial)
        a = compress(w, mask)
        x = rng.standard_normal((cols, xc))
        ref = (mask.bits * w) @ x
        got = spmm(a, x)
        scale = max(np.abs(ref).max(), 1.0)
        assert np.abs(got - ref).max() <= 1e-12 * scale


def test_spmm_parallel_is_bitwise_identical():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((16, 32))
    mask = random_mask(16, 32, seed=9)
    a = compress(w, mask)
    x = rng.standard_normal((32, 8))
    assert np.array_equal(spmm(a, x), spmm(a, x, parallel=True))


def test_spmm_dimension_mismatch():
    a = compress(np.ones((1, 4)), BitMask(np.array([[1, 1, 0, 0]])))
    with pytest.raises(ValueError):
        spmm(a, np.zeros((5, 2)))
    with pytest.raises(ValueError):
        spmm(a, np.zeros(4))


def test_flop_count_examples():
    r = flop_count(4, 8, 16)
    assert (r.dense_macs, r.sparse_macs, r.ratio) == (512, 256, 2.0)

    with pytest.raises(ValueError):
        NmConfig(4, 4)  # keeping everything is not a sparsity config
    with pytest.raises(ValueError):
        flop_count(4, 7, 16)  # misaligned columns

    resnet_like = flop_count(64, 64 * 9, 56 * 56)
    assert resnet_like.ratio == 2.0
    assert resnet_like.sparse_macs * 2 == resnet_like.dense_macs


def test_flop_count_byte_model():
    r = flop_count(4, 8, 16)
    retained = 4 * 8 // 2
    assert r.bytes_dense == 4 * 8 * 8
    assert r.bytes_compressed == retained * 8 + (retained * 2 + 7) // 8


def test_instrumented_macs_are_half_of_dense():
    rng = np.random.default_rng(4)
    shapes = [(4, 8, 4), (2, 4, 6), (8, 16, 3), (1, 4, 1), (6, 24, 5),
              (3, 12, 7), (5, 8, 8), (7, 16, 2), (2, 32, 4), (9, 20, 9)]
    for rows, cols, xc in shapes:
        w = rng.standard_normal((rows, cols))
        mask = random_mask(rows, cols, seed=rows * cols)
        a = compress(w, mask)
        x = rng.standard_normal((cols, xc))
        out, macs = spmm_counted(a, x)
        report = flop_count(rows, cols, xc)
        assert macs == report.sparse_macs == report.dense_macs // 2
        assert np.allclose(out, (mask.bits * w) @ x)


def test_bench_validation():
    with pytest.raises(ValueError):
        bench_compare([], reps=5)
    with pytest.raises(ValueError):
        bench_compare([64], reps=1)
    with pytest.raises(ValueError):
        bench_compare([65], reps=5)


def test_bench_smoke_and_records():
    report = bench_compare([32], reps=5, rng_seed=0)
    assert isinstance(report, BenchReport)
    assert {e.mode for e in report.entries} == {"dense", "sparse", "blas"}
    for e in report.entries:
        assert len(e.times_ns) == 5
        assert e.median_ns > 0
    records = report.records()
    assert records[0] == "size\tmode\trep\tnanoseconds"
    assert len(records) == 1 + 3 * 5
    assert report.text_table()
    assert report.entry(32, "sparse").macs * 2 == report.entry(32, "dense").macs


def test_bench_data_is_seed_deterministic():
    from nmconv.kernel import _random_instance

    w1, x1, m1 = _random_instance(16, 7)
    w2, x2, m2 = _random_instance(16, 7)
    assert np.array_equal(w1, w2) and np.array_equal(x1, x2)
    assert np.array_equal(m1.bits, m2.bits)
