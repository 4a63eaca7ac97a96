"""Command-line entry points: ``cascadehash <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .attention import DEFAULT_EPS, DEFAULT_RHO, attention_zoom, write_pgm
from .cascade_net import NetConfig, forward_backbone
from .code_solver import SolverConfig, decode_codes_file, encode_codes_file, labels_to_onehot, solve
from .data import SyntheticSpec, folder_manifest, gen_data, load_manifest, preprocess_eval
from .fileio import FormatError, read_container, read_jsonl, write_container, write_jsonl
from .ndtensor import Tensor
from .retrieval import BinaryCode, HashIndex, mean_average_precision, pack_signs, rank_database
from .trainer import TrainConfig, checkpoint_bytes, encode_images, fit, load_checkpoint

logger = logging.getLogger("cascadehash")

INDEX_KIND = "index"


def _emit(record: dict, out=None) -> None:
    if out:
        write_jsonl(out, [record])
    print(json.dumps(record, separators=(",", ":")))


def _parse_stages(text: str) -> tuple:
    try:
        return tuple(sorted(int(t) for t in text.split(",") if t.strip()))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid stage list {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.from_folder:
        path = folder_manifest(args.from_folder, Path(args.out) / "manifest.jsonl", args.test_fraction, args.seed)
    else:
        spec = SyntheticSpec(
            num_classes=args.classes,
            train_per_class=args.train_per_class,
            test_per_class=args.test_per_class,
            retrieval_per_class=args.retrieval_per_class,
            seed=args.seed,
            size=args.size,
        )
        path = gen_data(args.out, spec)
    print(path)
    return 0


def cmd_solve_codes(args) -> int:
    if args.manifest:
        ds = load_manifest(args.manifest)
        _, labels = ds.subset(args.split)
        l = ds.num_classes
    else:
        if args.classes is None or args.per_class is None:
            raise ValueError("give --manifest or both --classes and --per-class")
        l = args.classes
        labels = np.repeat(np.arange(l), args.per_class)
    if labels.size == 0:
        raise ValueError(f"split {args.split!r} is empty")
    config = SolverConfig(sigma=args.sigma, seed=args.seed, max_iters=args.max_iters)
    t0 = time.perf_counter()
    result = solve(labels_to_onehot(labels, l), args.bits, config)
    meta = {"sigma": args.sigma, "seed": args.seed, "objective": result.trace[-1], "iterations": result.iterations}
    Path(args.out).write_bytes(encode_codes_file(result.C, labels, result.D, meta))
    _emit({"codes": str(args.out), "k": args.bits, "n": int(labels.size), "l": l,
           "objective": result.trace[-1], "iterations": result.iterations,
           "seconds": time.perf_counter() - t0})
    return 0


def cmd_train(args) -> int:
    ds = load_manifest(args.manifest)
    _, c, h, w = ds.images.shape
    net = NetConfig(
        code_bits=args.bits,
        num_classes=ds.num_classes,
        input_size=(c, h, w),
        enabled_stages=args.stages,
    )
    preset = TrainConfig.desk() if args.preset == "desk" else TrainConfig()
    overrides = {
        key: getattr(args, key)
        for key in (
            "epochs", "batch_size", "lr", "momentum", "weight_decay", "seed", "smoothing", "sigma", "probe_every",
            "warmup_steps", "balance_init",
        )
        if getattr(args, key) is not None
    }
    overrides.update(use_cls_org=not args.no_cls_org, use_cls_aug=not args.no_cls_aug)
    if args.fixed_weights:
        overrides["fixed_weights"] = (1.0, 1.0)
    config = TrainConfig(**{**preset.to_dict(), **overrides, "fixed_weights": overrides.get("fixed_weights")})
    codes = None
    if args.codes:
        codes, _, _, _ = decode_codes_file(Path(args.codes).read_bytes())
    t0 = time.perf_counter()
    result = fit(ds, net, config, metrics_path=args.metrics, checkpoint_path=args.out, codes=codes,
                 progress=lambda e, r: logger.info("epoch %d L_TOTAL %.4f", e, r["L_TOTAL"]))
    Path(args.out).write_bytes(checkpoint_bytes(result.params, result.weights, config, config.epochs))
    record = {"checkpoint": str(args.out), "epochs": config.epochs, "seconds": time.perf_counter() - t0}
    if result.log:
        last = result.log[-1]
        record.update(L_TOTAL=last["L_TOTAL"], alpha=last["alpha"], beta=last["beta"])
    _emit(record)
    return 0


def cmd_encode(args) -> int:
    params, _, _ = load_checkpoint(Path(args.checkpoint).read_bytes())
    ds = load_manifest(args.manifest)
    images, labels = ds.subset(args.split)
    if labels.size == 0:
        raise ValueError(f"split {args.split!r} is empty")
    h = encode_images(params, images)
    signs = np.where(h >= 0, 1.0, -1.0)
    meta = {"split": args.split, "source": "network"}
    Path(args.out).write_bytes(encode_codes_file(signs.T, labels, meta=meta))
    _emit({"codes": str(args.out), "k": int(h.shape[1]), "n": int(h.shape[0])})
    return 0


def _read_codes(path):
    c, labels, _, _ = decode_codes_file(Path(path).read_bytes())
    if labels is None:
        raise FormatError(f"{path}: labels: required for retrieval")
    return pack_signs(c.T), labels, c.shape[0]


def _read_index(path) -> HashIndex:
    _, meta, arrays = read_container(path, INDEX_KIND)
    for key in ("words", "labels"):
        if key not in arrays:
            raise FormatError(f"arrays: missing {key!r}")
    if not isinstance(meta.get("k"), int):
        raise FormatError("meta: missing integer field 'k'")
    try:
        return HashIndex(arrays["words"], arrays["labels"], meta["k"])
    except ValueError as exc:
        raise FormatError(f"words: {exc}") from None


def cmd_index(args) -> int:
    words, labels, k = _read_codes(args.codes)
    write_container(args.out, INDEX_KIND, {"k": k, "n": int(labels.size)}, {"words": words, "labels": labels})
    _emit({"index": str(args.out), "k": k, "n": int(labels.size)})
    return 0


def cmd_query(args) -> int:
    index = _read_index(args.index)
    words, labels, k = _read_codes(args.codes)
    ids = range(len(labels)) if args.query_id is None else [args.query_id]
    for q in ids:
        if not 0 <= q < len(labels):
            raise ValueError(f"query id {q} outside [0, {len(labels)})")
        code = BinaryCode(words[q], k)
        order = rank_database(code, index)[: args.top]
        dist = index.distances(code)[order]
        print(json.dumps({"query": q, "label": int(labels[q]), "ids": order.tolist(), "hamming": dist.tolist(),
                          "labels": index.labels[order].tolist()}, separators=(",", ":")))
    return 0


def cmd_eval_map(args) -> int:
    qwords, qlabels, k = _read_codes(args.codes)
    if args.index:
        index = _read_index(args.index)
    elif args.db:
        dwords, dlabels, dk = _read_codes(args.db)
        index = HashIndex(dwords, dlabels, dk)
    else:
        index = HashIndex(qwords, qlabels, k)
    if index.k != k:
        raise ValueError(f"query codes have {k} bits, database {index.k}")
    report = mean_average_precision(qwords, qlabels, index, exclude_self=args.exclude_self)
    record = report.to_dict()
    if not args.per_query:
        record.pop("ap")
    _emit(record, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run

    report = run(seed=args.seed)
    worst = max(report.values())
    for name, err in report.items():
        if args.verbose or err >= TOLERANCE:
            print(f"{'ok  ' if err < TOLERANCE else 'FAIL'} {name} {err:.3e}")
    failed = sum(err >= TOLERANCE for err in report.values())
    print(f"gradcheck: {len(report) - failed}/{len(report)} passed, max relative error {worst:.3e}")
    return 0 if failed == 0 else 1


def cmd_plot_metrics(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in read_jsonl(args.metrics) if "epoch" in r]
    if not rows:
        raise FormatError(f"{args.metrics}: no epoch records")
    epochs = [r["epoch"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("L_TOTAL", "L_HASH", "L_cls_org", "L_cls_aug"):
        vals = [r.get(key) for r in rows]
        if all(v is not None for v in vals):
            ax1.plot(epochs, vals, label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, [r["alpha"] for r in rows], label="alpha")
    ax2.plot(epochs, [r["beta"] for r in rows], label="beta")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("task weight")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(args.out)
    plt.close(fig)
    print(args.out)
    return 0


def cmd_dump_attention(args) -> int:
    params, _, _ = load_checkpoint(Path(args.checkpoint).read_bytes())
    ds = load_manifest(args.manifest)
    images, _ = ds.subset(args.split)
    if not 0 <= args.sample < len(images):
        raise ValueError(f"sample {args.sample} outside [0, {len(images)})")
    size = params.config.input_size[1]
    x = preprocess_eval(images[args.sample : args.sample + 1], resize=size * 9 // 8, out=size)
    maps = forward_backbone(Tensor(x), params)
    zoomed, grids, sal = attention_zoom(x, maps[-1].data, args.rho, args.eps)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gray = lambda im: im[0].mean(axis=0)  # noqa: E731
    write_pgm(out / "input.pgm", gray(x), 0.0, 1.0)
    write_pgm(out / "saliency.pgm", sal[0], 0.0, 1.0)
    write_pgm(out / "zoomed.pgm", gray(zoomed), 0.0, 1.0)
    _emit({"dir": str(out), "center": list(grids[0].center) if grids[0].center else None})
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cascadehash", description="Fine-grained image hashing toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("gen-data", help="generate the synthetic dataset or index an image folder")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--train-per-class", type=int, default=50)
    s.add_argument("--test-per-class", type=int, default=50)
    s.add_argument("--retrieval-per-class", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64, help="image side in pixels")
    s.add_argument("--from-folder", help="build a manifest for ROOT/<class>/*.png instead")
    s.add_argument("--test-fraction", type=float, default=0.5)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("solve-codes", help="solve binary code targets from class labels")
    s.add_argument("--manifest")
    s.add_argument("--split", default="train")
    s.add_argument("--classes", type=int)
    s.add_argument("--per-class", type=int)
    s.add_argument("--bits", type=int, default=12)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-iters", type=int, default=100)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_solve_codes)

    s = sub.add_parser("train", help="train the hashing network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="checkpoint path (rewritten after every epoch)")
    s.add_argument("--metrics", help="per-epoch JSONL metrics log")
    s.add_argument("--codes", help="precomputed code targets for the train split")
    s.add_argument("--preset", choices=("desk", "full-scale"), default="desk")
    s.add_argument("--bits", type=int, default=12)
    s.add_argument("--stages", type=_parse_stages, default=(1, 2, 3), help="enabled stages, e.g. 1,2,3")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--momentum", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--smoothing", type=float)
    s.add_argument("--sigma", type=float)
    s.add_argument("--probe-every", type=int)
    s.add_argument("--warmup-steps", type=int, help="optimizer steps of linear learning-rate warmup")
    s.add_argument("--balance-init", choices=("unit", "stationary"),
                   help="start alpha and beta at 1, or at the stationary point of the first batch's losses")
    s.add_argument("--no-cls-org", action="store_true", help="drop the raw-branch classification loss")
    s.add_argument("--no-cls-aug", action="store_true", help="drop the zoomed-branch classification loss")
    s.add_argument("--fixed-weights", action="store_true", help="plain L_HASH + L_CLS, no learnable balance")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("encode", help="binary codes for one split of a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_encode)

    s = sub.add_parser("index", help="build a Hamming index from a codes file")
    s.add_argument("--codes", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_index)

    s = sub.add_parser("query", help="rank an index for query codes")
    s.add_argument("--index", required=True)
    s.add_argument("--codes", required=True, help="codes file holding the queries")
    s.add_argument("--query-id", type=int, help="only this query (default: all)")
    s.add_argument("--top", type=int, default=10)
    s.set_defaults(fn=cmd_query)

    s = sub.add_parser("eval-map", help="mean average precision of query codes against a database")
    s.add_argument("--codes", required=True, help="query codes file")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--db", help="database codes file (default: the queries themselves)")
    g.add_argument("--index", help="database index file")
    s.add_argument("--exclude-self", action="store_true")
    s.add_argument("--per-query", action="store_true", help="include per-query AP")
    s.add_argument("--out", help="also write the report as JSONL")
    s.set_defaults(fn=cmd_eval_map)

    s = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("plot-metrics", help="plot losses and task weights from a metrics log")
    s.add_argument("--metrics", required=True)
    s.add_argument("--out", required=True, help="image path, e.g. metrics.png")
    s.set_defaults(fn=cmd_plot_metrics)

    s = sub.add_parser("dump-attention", help="write input, saliency and zoomed image as PGM")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--sample", type=int, default=0)
    s.add_argument("--rho", type=float, default=DEFAULT_RHO)
    s.add_argument("--eps", type=float, default=DEFAULT_EPS)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(fn=cmd_dump_attention)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (FormatError, ValueError, OSError) as exc:
        print(f"cascadehash {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
