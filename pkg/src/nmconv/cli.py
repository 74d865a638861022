"""Command-line harness tying the library into reproducible experiments.

Subcommands: train-mask, eval, prune-magnitude, bench, certify, inspect.
Options may also come from a key=value config file (--config); explicit flags
win on conflict.  Reports are printed as plain-text tables followed by
machine-readable tab-separated records (written to --out when given); every
record stream starts with a documented header line.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import baseline, io, kernel, runtime, stability
from .patterns import NmConfig, enumerate_patterns, indices_from_mask, validate_mask
from .sampler import FREEZE_DETERMINISTIC, FREEZE_STOCHASTIC

__all__ = ["main", "build_parser"]


def _read_config_file(path: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset-images", required=True, help="IDX image file")
    p.add_argument("--dataset-labels", required=True, help="IDX label file")
    p.add_argument("--norm-mean", type=float, default=0.5)
    p.add_argument("--norm-std", type=float, default=0.5)


def _load_dataset(args) -> tuple[np.ndarray, np.ndarray]:
    ds = io.load_idx(args.dataset_images, args.dataset_labels, args.norm_mean, args.norm_std)
    return ds.tensors()


def _write_records(args, lines: list[str]) -> None:
    text = "\n".join(lines) + "\n"
    if getattr(args, "out", None):
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _apply_mask_file(model, mask_path) -> None:
    records = io.load_mask(mask_path)
    by_name = {r.name: r for r in records}
    for _, layer in model.maskable_layers():
        if layer.name not in by_name:
            raise ValueError(f"mask file has no entry for layer {layer.name!r}")
        rec = by_name[layer.name]
        mask = rec.to_bitmask()
        if mask.bits.shape != layer.weight.matrix.shape:
            raise ValueError(
                f"layer {layer.name}: mask shape {mask.bits.shape} does not match "
                f"weights {layer.weight.matrix.shape}"
            )
        layer.frozen_mask = mask


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train_mask(args) -> int:
    model = io.load_model(args.model)
    images, labels = _load_dataset(args)
    config = runtime.TrainConfig(
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        temperature=args.tau,
        seed=args.seed,
        weight_decay=args.weight_decay,
        step_epochs=args.step_epochs,
        step_gamma=args.step_gamma,
        val_fraction=args.val_fraction,
        freeze_mode=args.freeze_mode,
    )
    before = io.weight_payload_checksum(model)
    history, frozen = runtime.train_masks(model, images, labels, config)
    after = io.weight_payload_checksum(model)
    if before != after:
        raise RuntimeError("frozen-weights contract violated: weight payload changed")
    records = []
    for _, layer in model.maskable_layers():
        fm = frozen[layer.name]
        rows, cols = layer.mask_logits.layer_shape
        records.append(
            io.MaskRecord(
                fm.name, rows, cols, fm.indices.astype(np.uint8), fm.mode, fm.seed
            )
        )
    io.save_mask(args.out, records)
    history_path = args.history or (str(args.out) + ".history.tsv")
    Path(history_path).write_text(history.to_tsv() + "\n")
    print(f"wrote mask file {args.out} ({len(records)} layers)")
    print(f"wrote history {history_path}")
    print(history.to_tsv())
    return 0


def cmd_eval(args) -> int:
    model = io.load_model(args.model)
    images, labels = _load_dataset(args)
    if args.mode == "soft":
        raise ValueError("eval supports dense|hard; soft masks exist only during training")
    if args.mode == "hard":
        if not args.mask:
            raise ValueError("--mask is required for hard-mode evaluation")
        _apply_mask_file(model, args.mask)
    k5 = min(5, model.class_count)
    top1 = runtime.evaluate_topk(model, images, labels, 1, args.mode)
    top5 = runtime.evaluate_topk(model, images, labels, k5, args.mode)
    print(f"{'mode':<8} {'top-1':>8} {'top-5':>8}   ({len(images)} samples)")
    print(f"{args.mode:<8} {top1 * 100:>8.2f} {top5 * 100:>8.2f}")
    _write_records(
        args,
        ["metric\tmode\tvalue", f"top1\t{args.mode}\t{top1:.6f}", f"top5\t{args.mode}\t{top5:.6f}"],
    )
    return 0


def cmd_prune_magnitude(args) -> int:
    model = io.load_model(args.model)
    patterns = enumerate_patterns(NmConfig())
    mask_records = []
    lines = ["layer\tvariant\tefficacy\tcolumns_moved"]
    plans = {}
    plain_masks = {}
    for _, layer in model.maskable_layers():
        w = layer.weight.matrix
        plain = baseline.magnitude_prune_matrix(w)
        plain_masks[layer.name] = plain
        score_plain = baseline.efficacy_score(w, plain)
        plan, permuted_mask = baseline.permutation_search(w, args.budget)
        plans[layer.name] = (plan, permuted_mask)
        mask_records.append(
            io.MaskRecord(
                layer.name,
                plain.rows,
                plain.cols,
                indices_from_mask(plain, patterns).astype(np.uint8),
            )
        )
        moved = int((plan.permutation != np.arange(plan.permutation.size)).sum())
        lines.append(f"{layer.name}\tunpermuted\t{score_plain:.6f}\t0")
        lines.append(f"{layer.name}\tpermuted\t{plan.score_after:.6f}\t{moved}")
        print(
            f"{layer.name}: efficacy {score_plain:.4f} -> {plan.score_after:.4f} "
            f"(budget {args.budget})"
        )
    if args.out:
        io.save_mask(args.out, mask_records)
        print(f"wrote unpermuted magnitude masks to {args.out}")

    if args.dataset_images and args.dataset_labels:
        images, labels = _load_dataset(args)
        k5 = min(5, model.class_count)
        dense1 = runtime.evaluate_topk(model, images, labels, 1, "dense")
        dense5 = runtime.evaluate_topk(model, images, labels, k5, "dense")
        for _, layer in model.maskable_layers():
            layer.frozen_mask = plain_masks[layer.name]
        plain1 = runtime.evaluate_topk(model, images, labels, 1, "hard")
        plain5 = runtime.evaluate_topk(model, images, labels, k5, "hard")
        for _, layer in model.maskable_layers():
            plan, pm = plans[layer.name]
            layer.frozen_mask = baseline.unpermute_mask(pm, plan)
        perm1 = runtime.evaluate_topk(model, images, labels, 1, "hard")
        perm5 = runtime.evaluate_topk(model, images, labels, k5, "hard")
        print(f"{'variant':<14} {'top-1':>8} {'top-5':>8}")
        for name, t1, t5 in (
            ("dense", dense1, dense5),
            ("not permuted", plain1, plain5),
            ("permuted", perm1, perm5),
        ):
            print(f"{name:<14} {t1 * 100:>8.2f} {t5 * 100:>8.2f}")
        lines.append(f"accuracy\tdense\t{dense1:.6f}\t{dense5:.6f}")
        lines.append(f"accuracy\tunpermuted\t{plain1:.6f}\t{plain5:.6f}")
        lines.append(f"accuracy\tpermuted\t{perm1:.6f}\t{perm5:.6f}")
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s]
    report = kernel.bench_compare(
        sizes, args.reps, args.seed, pin_single_thread=not args.no_pin,
        parallel=args.parallel,
    )
    print(report.text_table())
    for size in sizes:
        fr = kernel.flop_count(size, size, size)
        print(
            f"# size {size}: dense {fr.dense_macs} MACs, sparse {fr.sparse_macs} MACs, "
            f"MAC ratio {fr.ratio:.1f}"
        )
    _write_records(args, report.records())
    return 0


def cmd_certify(args) -> int:
    model = io.load_model(args.model)
    j = args.layer
    if args.lemma == 1:
        bound = stability.lipschitz_bound(model)
        print(f"classifier Lipschitz bound: {bound:.9g}")
        _write_records(args, ["quantity\tvalue", f"lipschitz_bound\t{bound:.9g}"])
        return 0
    if args.lemma == 2:
        if args.delta_norm is None:
            raise ValueError("--delta-norm is required for lemma 2")
        bound = stability.perturbed_lipschitz_bound(model, j, args.delta_norm)
        print(f"perturbed Lipschitz bound (layer {j}, |dW|={args.delta_norm}): {bound:.9g}")
        _write_records(args, ["quantity\tvalue", f"perturbed_lipschitz_bound\t{bound:.9g}"])
        return 0
    if args.lemma == 3:
        if not args.mask:
            raise ValueError("--mask is required for lemma 3")
        layer = model.layers[j - 1]
        if not isinstance(layer, runtime.ConvLayer):
            raise ValueError(f"layer {j} is not a convolution layer")
        records = {r.name: r for r in io.load_mask(args.mask)}
        if layer.name not in records:
            raise ValueError(f"mask file has no entry for layer {layer.name!r}")
        w = layer.weight.matrix
        _, dnorm = stability.mask_to_perturbation(records[layer.name].to_bitmask(), w)
        wnorm = stability.inf_norm(w)
        print(f"|dW|_inf = {dnorm:.9g} <= |W|_inf = {wnorm:.9g}")
        _write_records(
            args,
            ["quantity\tvalue", f"delta_norm\t{dnorm:.9g}", f"weight_norm\t{wnorm:.9g}"],
        )
        return 0

    images, _ = _load_dataset(args)
    if args.limit:
        images = images[: args.limit]
    certs = []
    if args.lemma == 4:
        if not args.mask:
            raise ValueError("--mask is required for lemma 4")
        layer = model.layers[j - 1]
        records = {r.name: r for r in io.load_mask(args.mask)}
        if layer.name not in records:
            raise ValueError(f"mask file has no entry for layer {layer.name!r}")
        dw, _ = stability.mask_to_perturbation(
            records[layer.name].to_bitmask(), model.layer_weight_matrix(j - 1)
        )
        for i, x in enumerate(images):
            certs.append(stability.stability_margin(model, x, j, dw, sample_id=i))
    elif args.lemma == 5:
        for i, x in enumerate(images):
            certs.append(stability.masking_stability(model, x, j, sample_id=i))
    else:  # lemma 6
        if args.update_norm is None:
            raise ValueError("--update-norm is required for lemma 6")
        wj = model.layer_weight_matrix(j - 1)
        rng = np.random.Generator(np.random.Philox(key=args.seed))
        update = rng.standard_normal(wj.shape)
        norm = stability.inf_norm(update)
        if norm > 0:
            update *= args.update_norm / norm
        for i, x in enumerate(images):
            certs.append(
                stability.update_masking_stability(model, x, j, update, sample_id=i)
            )
    guaranteed = sum(c.stable_guaranteed for c in certs)
    vacuous = sum(c.vacuous for c in certs)
    print(
        f"lemma {args.lemma}, layer {j}: {guaranteed}/{len(certs)} samples "
        f"guaranteed stable ({vacuous} vacuous bounds)"
    )
    lines = [stability.StabilityCertificate.record_header()]
    lines += [c.record_line() for c in certs]
    _write_records(args, lines)
    return 0


def cmd_inspect(args) -> int:
    records = io.load_mask(args.mask)
    lines = ["layer\tstatistic\tkey\tvalue"]
    for rec in records:
        mask = rec.to_bitmask()
        report = validate_mask(mask)
        if not report.ok:
            raise ValueError(f"layer {rec.name}: {report}")
        sparsity = 100.0 * (1.0 - mask.density())
        hist = np.bincount(rec.indices, minlength=6)
        print(
            f"{rec.name}: {rec.rows}x{rec.cols}, {rec.indices.size} blocks, "
            f"sparsity {sparsity:.1f}%, freeze {rec.freeze_mode}"
        )
        print(f"  pattern histogram: {hist.tolist()}")
        lines.append(f"{rec.name}\tsparsity_percent\t-\t{sparsity:.6f}")
        for p, count in enumerate(hist):
            lines.append(f"{rec.name}\tpattern_count\t{p}\t{count}")
    _write_records(args, lines)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="nmconv",
        description="learn, apply, analyze and benchmark 2:4 sparsity masks",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    table: dict[str, argparse.ArgumentParser] = {}

    def sub(name: str, func, help_: str) -> argparse.ArgumentParser:
        p = subs.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value option file; explicit flags win")
        p.set_defaults(func=func)
        table[name] = p
        return p

    p = sub("train-mask", cmd_train_mask, "learn masks over frozen weights")
    p.add_argument("--model", required=True)
    _add_dataset_flags(p)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--step-epochs", type=int, default=3)
    p.add_argument("--step-gamma", type=float, default=0.1)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument(
        "--freeze-mode",
        choices=(FREEZE_DETERMINISTIC, FREEZE_STOCHASTIC),
        default=FREEZE_DETERMINISTIC,
    )
    p.add_argument("--out", required=True, help="NMSK output path")
    p.add_argument("--history", help="history TSV path (default: <out>.history.tsv)")

    p = sub("eval", cmd_eval, "evaluate top-1/top-5 accuracy")
    p.add_argument("--model", required=True)
    _add_dataset_flags(p)
    p.add_argument("--mode", choices=("dense", "soft", "hard"), default="dense")
    p.add_argument("--mask", help="NMSK file (hard mode)")
    p.add_argument("--out", help="records output path")

    p = sub("prune-magnitude", cmd_prune_magnitude, "magnitude masks with/without permutation")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset-images")
    p.add_argument("--dataset-labels")
    p.add_argument("--norm-mean", type=float, default=0.5)
    p.add_argument("--norm-std", type=float, default=0.5)
    p.add_argument("--budget", type=int, default=2000, help="swap evaluations")
    p.add_argument("--out", help="NMSK output for the unpermuted masks")

    p = sub("bench", cmd_bench, "dense vs sparse matmul benchmark")
    p.add_argument("--sizes", default="256,512,1024", help="comma-separated sizes")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallel", action="store_true", help="row-parallel kernels")
    p.add_argument("--no-pin", action="store_true", help="do not pin BLAS to one thread")
    p.add_argument("--out", help="records output path")

    p = sub("certify", cmd_certify, "emit stability certificates")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset-images")
    p.add_argument("--dataset-labels")
    p.add_argument("--norm-mean", type=float, default=0.5)
    p.add_argument("--norm-std", type=float, default=0.5)
    p.add_argument("--lemma", type=int, choices=range(1, 7), required=True)
    p.add_argument("--layer", type=int, default=1, help="1-based layer index")
    p.add_argument("--mask", help="NMSK file (lemmas 3 and 4)")
    p.add_argument("--delta-norm", type=float, help="perturbation norm (lemma 2)")
    p.add_argument("--update-norm", type=float, help="update norm (lemma 6)")
    p.add_argument("--seed", type=int, default=0, help="update draw seed (lemma 6)")
    p.add_argument("--limit", type=int, help="certify at most this many samples")
    p.add_argument("--out", help="records output path")

    p = sub("inspect", cmd_inspect, "mask statistics")
    p.add_argument("--mask", required=True)
    p.add_argument("--out", help="records output path")

    return parser, table


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, table = build_parser()
    command = next((a for a in argv if not a.startswith("-")), None)
    if command in table and "--config" in argv:
        pos = argv.index("--config")
        if pos + 1 >= len(argv):
            parser.error("--config requires a path")
        try:
            file_values = _read_config_file(argv[pos + 1])
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        sub = table[command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in file_values.items():
            dest = key.replace("-", "_")
            if dest not in actions or dest in ("help", "config", "func"):
                print(f"error: unknown config key {key!r}", file=sys.stderr)
                return 1
            action = actions[dest]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[dest] = raw.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                defaults[dest] = action.type(raw)
            else:
                defaults[dest] = raw
            action.required = False  # the file satisfies required options
        sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
