import numpy as np
import pytest

from nmconv import io
from nmconv.cli import main
from nmconv.pretrain import PretrainConfig, train_dense
from nmconv.runtime import CompositionalClassifier, ConvLayer, build_conv_classifier
from nmconv.stability import inf_norm
from nmconv.synth import sample_dataset


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """A small trained model + dataset on disk for fast CLI exercises."""
    root = tmp_path_factory.mktemp("cli")
    images, labels = sample_dataset(600, size=16, seed=7, sample_seed=7101)
    io.save_idx_images(root / "img.idx", images)
    io.save_idx_labels(root / "lab.idx", labels)
    model = build_conv_classifier((1, 16, 16), [4, 6], class_count=10, seed=21)
    x = ((images.astype(np.float64) / 255.0) - 0.5) / 0.5
    train_dense(model, x[:, None], labels.astype(np.int64),
                PretrainConfig(lr=3e-3, epochs=2, batch_size=64, seed=0))
    io.save_model(root / "model.nmcl", model)
    return {
        "root": root,
        "data": ["--dataset-images", str(root / "img.idx"),
                 "--dataset-labels", str(root / "lab.idx")],
        "model": ["--model", str(root / "model.nmcl")],
    }


def _records(capsys):
    return capsys.readouterr().out.strip().splitlines()


def test_train_mask_eval_inspect_flow(small_run, capsys):
    root = small_run["root"]
    mask = root / "m.nmsk"
    model_bytes_before = (root / "model.nmcl").read_bytes()
    rc = main(["train-mask", *small_run["model"], *small_run["data"],
               "--epochs", "1", "--seed", "3", "--out", str(mask)])
    assert rc == 0
    capsys.readouterr()
    assert mask.exists() and (root / "m.nmsk.history.tsv").exists()
    # the model file (pretrained weight payload) is untouched by mask training
    assert (root / "model.nmcl").read_bytes() == model_bytes_before

    rc = main(["eval", *small_run["model"], *small_run["data"],
               "--mode", "hard", "--mask", str(mask)])
    assert rc == 0
    out = _records(capsys)
    top1 = [l for l in out if l.startswith("top1\thard")]
    assert len(top1) == 1
    assert 0.0 <= float(top1[0].split("\t")[2]) <= 1.0

    rc = main(["inspect", "--mask", str(mask)])
    assert rc == 0
    out = _records(capsys)
    sparsity = [l for l in out if "sparsity_percent" in l]
    assert len(sparsity) == 2  # two maskable layers
    for line in sparsity:
        assert float(line.split("\t")[3]) == 50.0


def test_eval_dense_reproduces_recorded_baseline(desk, capsys):
    cache = desk["cache"]
    rc = main([
        "eval", "--model", str(cache / "model.nmcl"),
        "--dataset-images", str(cache / "test-images.idx"),
        "--dataset-labels", str(cache / "test-labels.idx"),
        "--mode", "dense",
    ])
    assert rc == 0
    out = _records(capsys)
    got1 = float([l for l in out if l.startswith("top1")][0].split("\t")[2])
    got5 = float([l for l in out if l.startswith("top5")][0].split("\t")[2])
    # recorded at fixture creation; seeded evaluation reproduces it exactly
    assert got1 == pytest.approx(desk["meta"]["dense_top1"], abs=1e-9)
    assert got5 == pytest.approx(desk["meta"]["dense_top5"], abs=1e-9)


def test_eval_rejects_soft_and_missing_mask(small_run, capsys):
    rc = main(["eval", *small_run["model"], *small_run["data"], "--mode", "soft"])
    assert rc == 1
    rc = main(["eval", *small_run["model"], *small_run["data"], "--mode", "hard"])
    assert rc == 1
    capsys.readouterr()


def test_unknown_flag_and_missing_files(small_run, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", *small_run["model"], *small_run["data"], "--frobnicate"])
    assert exc.value.code == 2
    rc = main(["eval", "--model", "missing.nmcl",
               "--dataset-images", "a.idx", "--dataset-labels", "b.idx"])
    assert rc == 1
    capsys.readouterr()


def test_config_file_precedence(small_run, capsys):
    root = small_run["root"]
    cfg = root / "run.cfg"
    out_path = root / "from-config.nmsk"
    cfg.write_text(f"epochs=1\nlr=0.25\nout={out_path}\n")
    rc = main(["train-mask", *small_run["model"], *small_run["data"],
               "--config", str(cfg)])
    assert rc == 0
    capsys.readouterr()
    history = (root / "from-config.nmsk.history.tsv").read_text().strip().splitlines()
    assert len(history) == 2  # header + 1 epoch from the file
    assert history[1].split("\t")[-1] == "0.25"

    # explicit flags win over the file
    rc = main(["train-mask", *small_run["model"], *small_run["data"],
               "--config", str(cfg), "--lr", "0.5", "--out", str(root / "o2.nmsk")])
    assert rc == 0
    capsys.readouterr()
    history = (root / "o2.nmsk.history.tsv").read_text().strip().splitlines()
    assert history[1].split("\t")[-1] == "0.5"

    bad = root / "bad.cfg"
    bad.write_text("frobnicate=1\n")
    rc = main(["train-mask", *small_run["model"], *small_run["data"],
               "--config", str(bad), "--out", str(root / "o3.nmsk")])
    assert rc == 1
    capsys.readouterr()


def test_prune_magnitude_cli(small_run, capsys):
    root = small_run["root"]
    rc = main(["prune-magnitude", *small_run["model"], *small_run["data"],
               "--budget", "300", "--out", str(root / "mag.nmsk")])
    assert rc == 0
    out = _records(capsys)
    assert any(l.startswith("accuracy\tdense") for l in out)
    assert any(l.startswith("accuracy\tpermuted") for l in out)
    records = io.load_mask(root / "mag.nmsk")
    assert len(records) == 2


def test_bench_cli_records(small_run, capsys, tmp_path):
    out_file = tmp_path / "bench.tsv"
    rc = main(["bench", "--sizes", "32", "--reps", "5", "--out", str(out_file)])
    assert rc == 0
    capsys.readouterr()
    lines = out_file.read_text().strip().splitlines()
    assert lines[0] == "size\tmode\trep\tnanoseconds"
    assert len(lines) == 1 + 3 * 5


def _norm_scaled_conv_model(scale=0.3):
    """Serializable one-conv-layer model on 1x1 images with small norms but
    confident bias-driven predictions: certificates come out non-vacuous."""
    rng = np.random.default_rng(30)
    kernels = rng.standard_normal((2, 1, 3, 3))
    kernels *= scale / np.abs(kernels.reshape(2, -1)).sum(axis=1).max()
    layer = ConvLayer("c0", kernels, np.array([1.2, -1.2]), activation="identity")
    assert inf_norm(layer.weight.matrix) <= scale + 1e-12
    return CompositionalClassifier([layer], (1, 1, 1), 2)


def test_certify_cli_all_lemmas(tmp_path, capsys):
    model = _norm_scaled_conv_model()
    io.save_model(tmp_path / "toy.nmcl", model)
    rng = np.random.default_rng(31)
    io.save_idx_images(tmp_path / "i.idx", rng.integers(0, 256, (40, 1, 1)).astype(np.uint8))
    io.save_idx_labels(tmp_path / "l.idx", rng.integers(0, 2, 40).astype(np.uint8))
    base = ["certify", "--model", str(tmp_path / "toy.nmcl")]
    data = ["--dataset-images", str(tmp_path / "i.idx"),
            "--dataset-labels", str(tmp_path / "l.idx")]

    rc = main([*base, "--lemma", "1"])
    assert rc == 0
    out = _records(capsys)
    assert any(l.startswith("lipschitz_bound") for l in out)

    rc = main([*base, "--lemma", "2", "--delta-norm", "0.05"])
    assert rc == 0
    capsys.readouterr()

    # lemmas 3 and 4 need a mask file for the conv layer
    mask_path = tmp_path / "toy.nmsk"
    io.save_mask(mask_path, [io.MaskRecord("c0", 2, 12, np.zeros(6, dtype=np.uint8))])
    rc = main([*base, "--lemma", "3", "--mask", str(mask_path)])
    assert rc == 0
    capsys.readouterr()

    rc = main([*base, *data, "--lemma", "4", "--mask", str(mask_path)])
    assert rc == 0
    out4 = _records(capsys)

    rc = main([*base, *data, "--lemma", "5"])
    assert rc == 0
    out5 = _records(capsys)
    # the norm-scaled fixture certifies at least one sample
    guaranteed = [l for l in out5 if l.split("\t")[-2:] == ["1", "0"]]
    assert len(guaranteed) >= 1

    rc = main([*base, *data, "--lemma", "6", "--update-norm", "0.02"])
    assert rc == 0
    out6 = _records(capsys)
    for out in (out4, out5, out6):
        assert out[1] == "sample\tgamma\tbound\tlemma\tguaranteed\tvacuous" or any(
            l.startswith("sample\t") for l in out
        )

    # missing requirements surface as errors
    assert main([*base, *data, "--lemma", "4"]) == 1
    assert main([*base, *data, "--lemma", "6"]) == 1
    assert main([*base, "--lemma", "2"]) == 1
    capsys.readouterr()


def test_synth_module_writes_idx(tmp_path, capsys):
    from nmconv.synth import main as synth_main

    rc = synth_main(["--out", str(tmp_path), "--train", "30", "--test", "10",
                     "--size", "8", "--seed", "3"])
    assert rc == 0
    capsys.readouterr()
    ds = io.load_idx(tmp_path / "train-images.idx3-ubyte",
                     tmp_path / "train-labels.idx1-ubyte")
    assert ds.images.shape == (30, 8, 8)
    # same prototypes, different sample streams across splits
    a, _ = sample_dataset(20, size=8, seed=3, sample_seed=1)
    b, _ = sample_dataset(20, size=8, seed=3, sample_seed=2)
    assert not np.array_equal(a, b)
    c, _ = sample_dataset(20, size=8, seed=3, sample_seed=1)
    assert np.array_equal(a, c)
