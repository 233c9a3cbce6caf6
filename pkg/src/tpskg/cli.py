"""Command-line entry point: ``tpskg {train,eval,export-attn,export-embeddings,gen-data}``.

Exit codes: 0 success, 2 bad input (config, checkpoint, paths, indices),
3 training aborted on a non-finite value.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .data import generate_dataset
from .rollout import average_heads, class_token_map, rollout
from .serialization import (
    FORMAT_VERSION,
    ConfigFileError,
    FormatError,
    MetricsWriter,
    atomic_write_text,
    load_checkpoint,
    load_run_config,
    parse_data_spec,
    read_dataset,
    restore_trainer,
    save_checkpoint,
    serialize_run_config,
    spec_hash,
    write_dataset,
    write_grid,
    write_pgm,
)
from .suppression import build_mask
from .tensor import no_grad
from .training import NonFiniteError, build_trainer
from .vit import forward

log = logging.getLogger("tpskg")

EXIT_OK, EXIT_INPUT, EXIT_NONFINITE = 0, 2, 3


class UsageError(Exception):
    pass


def limit_threads() -> None:
    """Cap BLAS threads at TPSKG_THREADS (default 1)."""
    try:
        n = int(os.environ.get("TPSKG_THREADS", "1"))
    except ValueError:
        raise UsageError(f"TPSKG_THREADS must be an integer, got {os.environ['TPSKG_THREADS']!r}")
    from threadpoolctl import threadpool_limits

    threadpool_limits(max(1, n))


def _datasets(run_cfg, data_dir):
    if data_dir is None:
        train, test, _ = generate_dataset(run_cfg.data)
        return train, test
    spec, train, test = read_dataset(data_dir)
    if spec_hash(spec) != spec_hash(run_cfg.data):
        raise UsageError(f"dataset in {data_dir} was generated from a different spec than the config")
    return train, test


def _load_ckpt(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ------------------------------------------------------------------ train


def cmd_train(args) -> int:
    run_cfg = load_run_config(args.config)
    out = Path(args.out)
    try:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror}")
    train_set, test_set = _datasets(run_cfg, args.data)

    if args.resume:
        ckpt = _load_ckpt(args.resume)
        if ckpt.run_config.hash() != run_cfg.hash():
            raise UsageError(f"checkpoint {args.resume} was written with a different config")
        trainer = restore_trainer(ckpt, train_set, test_set)
        metrics = MetricsWriter(out, run_cfg, resume=True)
        metrics.truncate_after(trainer.epoch)
    else:
        trainer = build_trainer(run_cfg.model, run_cfg.train, train_set, test_set)
        metrics = MetricsWriter(out, run_cfg)
    atomic_write_text(out / "config.cfg", serialize_run_config(run_cfg))

    def on_epoch(tr, rec):
        metrics.append(rec)
        log.info("epoch %d  loss %.4f  train %.3f  test %.3f", rec.epoch, rec.loss_total, rec.train_acc, rec.test_acc)
        if rec.epoch % args.ckpt_every == 0 or tr.finished:
            path = out / "checkpoints" / f"epoch_{rec.epoch:03d}.npz"
            save_checkpoint(path, tr, run_cfg)
            shutil.copyfile(path, out / "last.npz")

    try:
        trainer.run(max_epochs=args.max_epochs, on_epoch=on_epoch)
    except NonFiniteError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE

    if trainer.finished:
        summary = {
            "format_version": FORMAT_VERSION,
            "config_hash": run_cfg.hash(),
            "mode": run_cfg.train.mode,
            "epochs": trainer.epoch,
            "accuracy": {run_cfg.train.mode: {"train": trainer.evaluate("train"), "test": trainer.evaluate("test")}},
        }
        if trainer.model.use_kg:
            kp = trainer.model.knowledge_predict(train_set.images.astype(trainer.model.dtype))
            summary["knowledge_train_acc"] = float((kp == train_set.labels).mean())
        atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
        print(json.dumps(summary["accuracy"]))
    return EXIT_OK


# ------------------------------------------------------------------- eval


def confusion_matrix(labels, preds, classes: int) -> np.ndarray:
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    run_cfg = ckpt.run_config
    train_set, test_set = _datasets(run_cfg, args.data)
    ds = train_set if args.split == "train" else test_set
    model = ckpt.build_model()
    preds = model.predict(ds.images.astype(model.dtype))
    acc = float((preds == ds.labels).mean())
    cm = confusion_matrix(ds.labels, preds, run_cfg.model.classes)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"confusion_{args.split}.csv"
    write_grid(out, cm, run_cfg.hash(), note=f"split={args.split} rows=ground_truth cols=predicted")
    print(f"top-1 accuracy ({args.split}): {acc:.4f}")
    print(f"confusion matrix: {out}")
    return EXIT_OK


# ------------------------------------------------------------- exporters


def cmd_export_attn(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    run_cfg = ckpt.run_config
    train_set, test_set = _datasets(run_cfg, args.data)
    ds = train_set if args.split == "train" else test_set
    if not 0 <= args.image < len(ds):
        raise UsageError(f"image index {args.image} out of range [0, {len(ds)})")
    model = ckpt.build_model()
    cfg = run_cfg.model
    with no_grad():
        _, attn = forward(ds.images[args.image:args.image + 1].astype(model.dtype), model.encoder, cfg)
    stack = attn[0]
    h = run_cfg.hash()
    out = Path(args.out)
    for layer in range(cfg.layers):
        write_grid(out / f"attn_layer{layer + 1}.csv", average_heads(stack, layer), h,
                   note=f"layer={layer + 1} head_averaged rows=query cols=key")
    r = rollout(stack)
    write_grid(out / "rollout.csv", r.matrix, h, note=f"layer={r.layer_index} rows=output_token cols=input_token")
    pmap = class_token_map(r)
    grid = pmap.reshape(cfg.grid)
    write_grid(out / "patch_map.csv", grid, h, note="class_token_rollout patch_grid")
    bits = build_mask(pmap, run_cfg.train.top_k)
    write_grid(out / "mask.csv", bits[1:].reshape(cfg.grid).astype(np.int64), h,
               note="patch_grid 0=suppressed class_token_bit=1")
    write_pgm(out / "patch_map.pgm", grid, scale=args.scale,
              comment=f"tpskg format_version={FORMAT_VERSION} config_hash={h}")
    print(f"wrote attention exports for image {args.image} to {out}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    run_cfg = ckpt.run_config
    model = ckpt.build_model()
    if not model.use_kg:
        raise UsageError(f"checkpoint mode {model.mode!r} has knowledge guidance disabled; no embeddings to export")
    train_set, test_set = _datasets(run_cfg, args.data)
    ds = train_set if args.split == "train" else test_set
    n = len(ds) if args.samples <= 0 else min(args.samples, len(ds))
    y = model.representations(ds.images[:n].astype(model.dtype))
    k = model.head["knowledge"].data
    g = run_cfg.model.classes
    rows = np.concatenate([
        np.concatenate([k, np.arange(g, dtype=k.dtype)[:, None]], axis=1),
        np.concatenate([y.astype(k.dtype), ds.labels[:n, None].astype(k.dtype)], axis=1),
    ])
    write_grid(args.out, rows, run_cfg.hash(),
               note=f"knowledge_rows={g} sample_rows={n} split={args.split} dtype={k.dtype.name} last_col=label")
    print(f"wrote {g} knowledge rows and {n} representations to {args.out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    path = Path(args.spec)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read spec file {path}: {exc.strerror}")
    spec = parse_data_spec(text)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        train, test, _ = generate_dataset(spec)
        write_dataset(out, spec, train, test)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {out}: {exc.strerror or exc}")
    print(f"wrote {len(train)} train and {len(test)} test images to {out}")
    return EXIT_OK


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpskg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.add_argument("--data", help="dataset directory from gen-data (default: generate in memory)")
    p.add_argument("--max-epochs", type=int, default=None, help="stop after this many epochs in this invocation")
    p.add_argument("--ckpt-every", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy and confusion matrix")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--data")
    p.add_argument("--out", help="confusion matrix path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-attn", help="attention, rollout, patch map and mask for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--data")
    p.add_argument("--scale", type=int, default=8, help="graymap upscaling factor")
    p.set_defaults(func=cmd_export_attn)

    p = sub.add_parser("export-embeddings", help="knowledge embeddings plus sample representations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--samples", type=int, default=128, help="representation rows (<= 0 for all)")
    p.add_argument("--data")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        limit_threads()
        return args.func(args)
    except ConfigFileError as exc:
        where = f" (key: {exc.key})" if exc.key else ""
        print(f"error: bad config: {exc}{where}", file=sys.stderr)
        return EXIT_INPUT
    except (UsageError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
