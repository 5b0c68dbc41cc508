"""Command-line front end.

Subcommands: trace, params, flops, gradcheck, split, gen, train, eval,
compare. Machine-readable results go to --out; human-readable tables to
stdout. Exit codes: 0 success, 1 validation/usage error, 2 runtime or
numeric error. Every subcommand is deterministic under fixed flags/seeds.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import data as D
from . import gradcheck as G
from . import train as TR
from . import zoo
from .errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    MsdetError,
    NumericError,
    UsageError,
    ValidationError,
)
from .evaluation import evaluate
from .tensor import Tensor
from .train import TrainConfig, evaluate_model, train_loop

# Published full-scale DOTA-v1 reference points for these architecture
# families (not reproducible at toy scale; toy numbers are not comparable):
# baseline 42.0 mAP50 / attention+GD 43.3 / GD+multi-patch head 43.8.
REFERENCE_NOTE = (
    "# context: full-scale DOTA-v1 reference mAP50 for these architecture families:\n"
    "#   baseline 42.0, lska_gd 43.3, gd_seam 43.8 (toy-scale rows below are not comparable)\n"
)


def _write_out(path, text):
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as f:
            f.write(text)


def _load_config(args):
    if getattr(args, "config", None):
        with open(args.config) as f:
            cfg, cfg_variant = zoo.parse_config(f.read())
    else:
        cfg, cfg_variant = zoo.ModelConfig(), None
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "input_size", None) is not None:
        overrides["input_size"] = args.input_size
    if getattr(args, "num_classes", None) is not None:
        overrides["num_classes"] = args.num_classes
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    variant = getattr(args, "variant", None) or cfg_variant
    return cfg, variant


def _resolve_datasets(args, cfg):
    """--data synth -> seeded in-memory toy pool; otherwise a gen'd directory."""
    if args.data == "synth":
        train_ds, val_ds, test_ds = D.toy_datasets(cfg.seed)
    else:
        full = D.load_dataset(args.data)
        tr, va, te = D.split(list(range(len(full))), cfg.seed)

        def take(idxs):
            return D.SyntheticDataset(
                [full.images[i] for i in idxs],
                [full.gts[i] for i in idxs],
                [full.ids[i] for i in idxs],
                full.class_names,
            )

        train_ds, val_ds, test_ds = take(tr), take(va), take(te)
    return train_ds, val_ds, test_ds


def cmd_trace(args):
    cfg, variant = _load_config(args)
    variant = variant or "baseline"
    model = zoo.build(variant, cfg)
    rows = zoo.trace_shapes(model, cfg.input_size)
    lines = [f"{name} {'x'.join(str(d) for d in shape)}" for name, shape in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(f"trace of {variant} at input {cfg.input_size}:\n" + text)
    _write_out(args.out, text)
    return 0


def cmd_params(args):
    cfg, variant = _load_config(args)
    variant = variant or "baseline"
    model = zoo.build(variant, cfg)
    table, total = zoo.count_params(model)
    lines = [f"params.{k}={v}" for k, v in sorted(table.items())]
    lines.append(f"params.total={total}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(f"parameter counts for {variant}:\n" + text)
    _write_out(args.out, text)
    return 0


def cmd_flops(args):
    cfg, variant = _load_config(args)
    variant = variant or "baseline"
    model = zoo.build(variant, cfg)
    table, total = zoo.estimate_macs(model, cfg.input_size)
    lines = [f"macs.{name}={macs}" for name, _, macs in table]
    lines.append(f"macs.total={total}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(f"multiply-accumulate counts for {variant} at {cfg.input_size}:\n" + text)
    _write_out(args.out, text)
    return 0


def cmd_gradcheck(args):
    results = G.run_suite(instances=args.instances, seed0=args.seed or 0)
    lines = [f"gradcheck.{name}={err:.3e}" for name, err in results]
    worst = max(err for _, err in results)
    lines.append(f"gradcheck.worst={worst:.3e}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    _write_out(args.out, text)
    return 0 if worst <= G.TOLERANCE else 2


def cmd_split(args):
    if args.ids:
        with open(args.ids) as f:
            ids = [line.strip() for line in f if line.strip()]
    elif args.n:
        ids = [f"img_{i:06d}" for i in range(args.n)]
    else:
        raise UsageError("split: pass --ids FILE or --n COUNT")
    tr, va, te = D.split(ids, args.seed or 0)
    lines = [f"{i} train" for i in tr] + [f"{i} val" for i in va] + [f"{i} test" for i in te]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(f"split sizes: train={len(tr)} val={len(va)} test={len(te)}\n")
    _write_out(args.out, text)
    return 0


def cmd_gen(args):
    spec = D.SceneSpec(image_size=args.image_size, seed=args.seed or 0)
    ds = D.gen_synthetic(spec, args.n)
    if not args.out:
        raise UsageError("gen: --out DIR is required")
    D.save_dataset(ds, args.out)
    sys.stdout.write(
        f"wrote {len(ds)} images to {args.out} "
        f"(forced placements: {ds.forced_placements})\n"
    )
    return 0


def _train_one(variant, cfg, tcfg, train_ds, val_ds):
    model = zoo.build(variant, cfg)
    history = train_loop(model, train_ds, val_ds, tcfg)
    return model, history


def cmd_train(args):
    cfg, variant = _load_config(args)
    variant = variant or "baseline"
    from dataclasses import replace

    cfg = replace(
        cfg,
        dtype="float32",
        num_classes=args.num_classes or 2,
        input_size=args.input_size or 96,
    )
    train_ds, val_ds, _ = _resolve_datasets(args, cfg)
    tcfg = TrainConfig(epochs=args.epochs, seed=cfg.seed)
    model, history = _train_one(variant, cfg, tcfg, train_ds, val_ds)
    text = history.to_csv()
    sys.stdout.write(
        f"{variant}: best val mAP50 {history.best_map50:.4f} at epoch "
        f"{history.best_epoch} ({history.seconds:.1f}s)\n"
    )
    _write_out(args.out, text)
    if args.weights:
        zoo.save_model(model, args.weights)
    return 0


def cmd_eval(args):
    cfg, variant = _load_config(args)
    variant = variant or "baseline"
    from dataclasses import replace

    cfg = replace(
        cfg,
        dtype="float32",
        num_classes=args.num_classes or 2,
        input_size=args.input_size or 96,
    )
    _, _, test_ds = _resolve_datasets(args, cfg)
    model = zoo.build(variant, cfg)
    if args.weights:
        zoo.load_model(model, args.weights)
    report = evaluate_model(model, test_ds, cfg.head_spec())
    text = "\n".join(report.to_kv()) + "\n"
    sys.stdout.write(report.to_table())
    _write_out(args.out, text)
    return 0


def compare_variants(cfg, tcfg, train_ds, val_ds, test_ds, variants=zoo.VARIANTS):
    """Train every variant on the same data/seed; one Table-row per variant."""
    rows = []
    for variant in variants:
        t0 = time.time()
        model, history = _train_one(variant, cfg, tcfg, train_ds, val_ds)
        report = evaluate_model(model, test_ds, cfg.head_spec())
        _, n_params = zoo.count_params(model)
        _, n_macs = zoo.estimate_macs(model, cfg.input_size)
        rows.append(
            {
                "variant": variant,
                "params": n_params,
                "macs": n_macs,
                "recall": (report.recall or 0.0) * 100.0,
                "map50": (report.map50 or 0.0) * 100.0,
                "map50_95": (report.map50_95 or 0.0) * 100.0,
                "seconds": time.time() - t0,
            }
        )
    return rows


def format_compare(rows):
    base = next((r for r in rows if r["variant"] == "baseline"), None)
    md = [
        "| variant | params | MACs | Recall% | mAP50% | mAP50-95% | dRecall | dmAP50 |",
        "|---|---|---|---|---|---|---|---|",
    ]
    kv = []
    for r in rows:
        d_rec = r["recall"] - base["recall"] if base else 0.0
        d_map = r["map50"] - base["map50"] if base else 0.0
        md.append(
            f"| {r['variant']} | {r['params']} | {r['macs']} | {r['recall']:.1f} "
            f"| {r['map50']:.1f} | {r['map50_95']:.1f} | {d_rec:+.1f} | {d_map:+.1f} |"
        )
        for key in ("params", "macs"):
            kv.append(f"{r['variant']}.{key}={r[key]}")
        for key in ("recall", "map50", "map50_95"):
            kv.append(f"{r['variant']}.{key}={r[key]:.4f}")
        kv.append(f"{r['variant']}.seconds={r['seconds']:.1f}")
    return "\n".join(md) + "\n", REFERENCE_NOTE + "\n".join(kv) + "\n"


def cmd_compare(args):
    cfg, _ = _load_config(args)
    from dataclasses import replace

    cfg = replace(
        cfg,
        dtype="float32",
        num_classes=args.num_classes or 2,
        input_size=args.input_size or 96,
    )
    train_ds, val_ds, test_ds = _resolve_datasets(args, cfg)
    if args.limit_train:
        train_ds = D.SyntheticDataset(
            train_ds.images[: args.limit_train],
            train_ds.gts[: args.limit_train],
            train_ds.ids[: args.limit_train],
            train_ds.class_names,
        )
    variants = tuple(args.variants.split(",")) if args.variants else zoo.VARIANTS
    for v in variants:
        if v not in zoo.VARIANTS:
            raise ValidationError(f"compare: unknown variant {v!r}")
    tcfg = TrainConfig(epochs=args.epochs, seed=cfg.seed)
    rows = compare_variants(cfg, tcfg, train_ds, val_ds, test_ds, variants)
    md, kv = format_compare(rows)
    sys.stdout.write(md)
    _write_out(args.out, kv)
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="msdet",
        description="lightweight multi-scale detector toolkit",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, variant=True):
        if variant:
            sp.add_argument("--variant", choices=zoo.VARIANTS)
        sp.add_argument("--config", help="flat key=value model config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="machine-readable output path")
        sp.add_argument("--input-size", dest="input_size", type=int)
        sp.add_argument("--num-classes", dest="num_classes", type=int)

    common(sub.add_parser("trace", help="layer-by-layer shape log"))
    common(sub.add_parser("params", help="per-module parameter counts"))
    common(sub.add_parser("flops", help="analytic multiply-accumulate counts"))

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--instances", type=int, default=5)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")

    sp = sub.add_parser("split", help="deterministic 8:1:1 id split")
    sp.add_argument("--ids", help="file with one id per line")
    sp.add_argument("--n", type=int, help="generate this many synthetic ids")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")

    sp = sub.add_parser("gen", help="generate a synthetic dataset directory")
    sp.add_argument("--n", type=int, default=250)
    sp.add_argument("--image-size", dest="image_size", type=int, default=96)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", help="train one variant")
    common(sp)
    sp.add_argument("--data", default="synth", help="'synth' or a gen'd directory")
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--weights", help="prefix to store best weights")

    sp = sub.add_parser("eval", help="evaluate a variant on the test split")
    common(sp)
    sp.add_argument("--data", default="synth")
    sp.add_argument("--weights", help="weight prefix from train")

    sp = sub.add_parser("compare", help="train and score all variants")
    common(sp, variant=False)
    sp.add_argument("--data", default="synth")
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--variants", help="comma list (default: all six)")
    sp.add_argument("--limit-train", dest="limit_train", type=int)

    return p


COMMANDS = {
    "trace": cmd_trace,
    "params": cmd_params,
    "flops": cmd_flops,
    "gradcheck": cmd_gradcheck,
    "split": cmd_split,
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code else 0
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, ConfigurationError, UsageError, DimensionError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except (NumericError, FormatError, MsdetError, OSError) as e:
        sys.stderr.write(f"runtime error: {e}\n")
        return 2


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
