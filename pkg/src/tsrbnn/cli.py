"""Command-line interface: ``tsrbnn {train,eval,summary,bench,predict}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import modelio
from .arch import STUDY_INPUT_SIZES, ArchError, format_summary, resolve_arch
from .binkernel.bench import BenchMismatchError, bench_dense, bench_model
from .binkernel.engine import CompileError, PackedModel, compile_model
from .data import DatasetError, RelabelMap, decode_image, load_dataset, preprocess, remap_labels
from .data.loaders import default_data_dir
from .network import Model
from .train import TrainConfig, evaluate, train

log = logging.getLogger("tsrbnn")


class UsageError(Exception):
    pass


def _positive(kind):
    def parse(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid value {text!r}") from None
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return parse


def _data_arg(args) -> str:
    data = args.data or default_data_dir()
    if not data:
        raise UsageError("no dataset given: pass --data or set BNN_DATA_DIR")
    return data


def _load_any(path) -> Model | PackedModel:
    return modelio.load(path)


def _engine(model, engine: str):
    if engine == "reference":
        if isinstance(model, PackedModel):
            raise UsageError("this model file is packed; only --engine packed can run it")
        return model
    return model if isinstance(model, PackedModel) else compile_model(model)


def cmd_train(args) -> int:
    arch = resolve_arch(args.arch, args.input_size)
    try:
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
                          seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = load_dataset(_data_arg(args), arch.input_size, args.kind, workers=args.threads)
    log.info("loaded %d samples, %d classes", len(ds), len(np.unique(ds.labels)))
    model, history = train(arch, ds, cfg)
    out = Path(args.out)
    modelio.save(model, out, "latent")
    Path(str(out) + ".history").write_text(history.to_text())
    print(f"final_val_acc={history.records[-1].val_acc!r}")
    return 0


def cmd_eval(args) -> int:
    model = _load_any(args.model)
    runner = _engine(model, args.engine)
    ds = load_dataset(_data_arg(args), runner.input_size, args.kind, workers=args.threads)
    if args.remap:
        ds = remap_labels(ds, RelabelMap.load(args.remap))
    acc, cm = evaluate(runner, ds)
    if args.confusion:
        Path(args.confusion).write_text(cm.to_csv())
    print(f"accuracy={acc!r}")
    return 0


def cmd_summary(args) -> int:
    print(format_summary(resolve_arch(args.arch, args.input_size)))
    return 0


def cmd_bench(args) -> int:
    model = _load_any(args.model)
    if isinstance(model, PackedModel):
        raise UsageError("bench needs a LATENT model file so the reference path can run")
    pm = compile_model(model, fuse_pool=args.fuse_pool)
    rng = np.random.default_rng(args.seed)
    s = model.input_size
    images = rng.uniform(0, 1, size=(args.iters, s, s, 3)).astype(np.float32)
    timings, ref_ns, packed_ns = bench_model(model, pm, images, args.batch, args.threads)
    for t in timings:
        print(t.to_line())
    print(f"reference_ns={ref_ns:.0f}")
    print(f"packed_ns={packed_ns:.0f}")
    print(f"speedup={ref_ns / packed_ns:.2f}")
    print(f"argmax_agreement={len(images)}/{len(images)}")
    for line in bench_dense(threads=args.threads, seed=args.seed).to_lines():
        print(line)
    return 0


def cmd_predict(args) -> int:
    model = _load_any(args.model)
    runner = _engine(model, args.engine)
    try:
        raw = decode_image(Path(args.image).read_bytes())
    except OSError as exc:
        raise DatasetError(f"cannot read {args.image}: {exc}") from None
    x = preprocess(raw, runner.input_size, None)
    logits = np.asarray(runner.logits(x[None]))[0]
    print(f"class={int(np.argmax(logits))}")
    print("logits=" + ",".join(repr(float(v)) for v in logits))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsrbnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def data_flags(sp):
        sp.add_argument("--data", help="dataset directory or manifest (default: $BNN_DATA_DIR)")
        sp.add_argument("--kind", default="auto",
                        choices=["auto", "gtsrb-train", "gtsrb-test", "folders", "belgian",
                                 "chinese", "manifest"])
        sp.add_argument("--threads", type=_positive(int), default=1, help="worker cap")

    t = sub.add_parser("train", help="train a model with an 80:20 stratified split")
    t.add_argument("--arch", required=True, help="DSL text or preset[:key=value,...]")
    data_flags(t)
    t.add_argument("--input-size", type=int, choices=STUDY_INPUT_SIZES, default=None)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="output model file")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy on a labeled dataset")
    e.add_argument("--model", required=True)
    data_flags(e)
    e.add_argument("--remap", help="relabel map file (source,target lines)")
    e.add_argument("--confusion", help="write the confusion matrix as CSV here")
    e.add_argument("--engine", choices=["reference", "packed"], default="reference")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("summary", help="per-layer parameter table and model sizes")
    s.add_argument("--arch", required=True)
    s.add_argument("--input-size", type=int, choices=STUDY_INPUT_SIZES, default=None)
    s.set_defaults(func=cmd_summary)

    b = sub.add_parser("bench", help="time the packed engine against the reference path")
    b.add_argument("--model", required=True)
    b.add_argument("--iters", type=int, default=1000, help="number of inferences to time")
    b.add_argument("--threads", type=_positive(int), default=1)
    b.add_argument("--batch", type=_positive(int), default=64)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--fuse-pool", action="store_true", help="pool on bits after thresholding")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("predict", help="classify one image")
    r.add_argument("--model", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--engine", choices=["reference", "packed"], default="reference")
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    for name in ("epochs", "iters", "batch"):
        if getattr(args, name, 1) is not None and getattr(args, name, 1) < 1:
            print(f"tsrbnn: error: --{name} must be >= 1", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except (UsageError, ArchError) as exc:
        print(f"tsrbnn: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CompileError, BenchMismatchError, modelio.ModelFormatError,
            OSError, ValueError) as exc:
        print(f"tsrbnn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
