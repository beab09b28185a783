"""Command-line entry point: ``capslid <subcommand> [flags]``.

Structured results go to stdout as JSON (one document, or JSON Lines for
per-epoch training stats); logs go to stderr. Exit status is 0 on success,
1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset, datagen, dsp, evaluation, nonclass, training
from .errors import CapsLidError
from .model import ModelConfig

log = logging.getLogger("capslid")

SUBCOMMANDS = ("gen-data", "preprocess", "train", "eval", "predict", "calibrate", "detect", "segment")


class UsageError(Exception):
    def __init__(self, message: str, parser: argparse.ArgumentParser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _default_seed() -> int:
    raw = os.environ.get("CAPSLID_SEED")
    return int(raw) if raw not in (None, "") else 0


def _stft_config(args) -> dsp.StftConfig:
    base = dsp.StftConfig.for_clip(args.clip_seconds)
    return dsp.StftConfig(
        n_bins=args.n_bins if args.n_bins is not None else base.n_bins,
        pps=args.pps if args.pps is not None else base.pps,
    )


def _frontend_of(ckpt: training.Checkpoint) -> tuple[int, dsp.StftConfig]:
    fe = ckpt.frontend
    return fe["clip_seconds"], dsp.StftConfig(n_bins=fe["n_bins"], pps=fe["pps"])


def _thresholds(args, ckpt: training.Checkpoint) -> nonclass.ThresholdTable | None:
    if getattr(args, "thresholds", None):
        return nonclass.ThresholdTable.load(args.thresholds)
    if ckpt.thresholds is not None:
        return nonclass.ThresholdTable.from_dict(ckpt.thresholds)
    return None


def _load_split(args, split: str, clip_seconds: int, cfg: dsp.StftConfig) -> dataset.Split:
    features = getattr(args, "features", None)
    if features:
        splits = dataset.load_features(features)
        if split not in splits:
            raise CapsLidError(f"{features} has no split {split!r}")
        return splits[split]
    return dataset.load_split(args.manifest, split, clip_seconds, cfg)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    records = datagen.build_corpus(
        args.out_dir,
        n_train=args.train,
        n_test=args.test,
        n_calib=args.calib,
        n_nonclass=args.nonclass,
        n_in_set=args.classes,
        base_seed=args.seed,
    )
    counts: dict[str, int] = {}
    for r in records:
        counts[r.split] = counts.get(r.split, 0) + 1
    _emit({"manifest": str(Path(args.out_dir) / "manifest.jsonl"), "counts": counts, "records": len(records)})


def cmd_preprocess(args) -> None:
    cfg = _stft_config(args)
    splits = {}
    for rec_split in datagen.SPLITS:
        try:
            splits[rec_split] = dataset.load_split(args.manifest, rec_split, args.clip_seconds, cfg)
        except CapsLidError as exc:
            log.info("skipping split %s: %s", rec_split, exc)
    dataset.save_features(args.out, splits)
    if args.pgm_dir:
        root = Path(args.manifest).parent
        out = Path(args.pgm_dir)
        for rec in datagen.read_manifest(args.manifest):
            signal = dsp.read_wav(root / rec.path)
            for k, seg in enumerate(dsp.clip_segments(signal, args.clip_seconds)):
                target = out / f"{Path(rec.path).with_suffix('')}_{k}.pgm"
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(dsp.to_pgm(dsp.stft(seg, cfg)))
    _emit({"features": str(args.out), "counts": {k: len(v) for k, v in splits.items()}})


def cmd_train(args) -> None:
    cfg = _stft_config(args)
    data = _load_split(args, "train", args.clip_seconds, cfg)
    tcfg = training.TrainConfig(
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.lr,
        seed=args.seed,
        routing_iterations=args.routing_iterations,
        workers=args.workers,
    )
    model_cfg = ModelConfig(routing_iterations=args.routing_iterations)
    stats_fh = open(args.stats, "w", encoding="utf-8") if args.stats else None
    try:
        def on_epoch(st):
            _emit({"epoch": st.epoch, "mean_loss": st.mean_loss, "train_acc": st.train_acc})
            if stats_fh:
                stats_fh.write(st.to_json() + "\n")

        result = training.train(data.images, data.labels, tcfg, model_cfg, on_epoch=on_epoch)
    finally:
        if stats_fh:
            stats_fh.close()
    ckpt = training.Checkpoint(
        params=result.params,
        model_config=model_cfg,
        train_config=tcfg,
        step=result.step,
        moments=result.moments,
        frontend={"clip_seconds": args.clip_seconds, "n_bins": cfg.n_bins, "pps": cfg.pps},
    )
    training.save_checkpoint(args.checkpoint, ckpt)
    _emit({"checkpoint": str(args.checkpoint), "step": result.step, "examples": len(data)})


def cmd_eval(args) -> None:
    ckpt = training.load_checkpoint(args.checkpoint)
    clip_seconds, cfg = _frontend_of(ckpt)
    data = _load_split(args, args.split, clip_seconds, cfg)
    norms = training.predict_norms(ckpt.params, data.images, ckpt.model_config)
    report = evaluation.metrics_from_predictions(
        data.labels, np.argmax(norms, axis=1), norms, ckpt.model_config.n_classes
    )
    out = report.to_dict()
    out["split"] = args.split
    if args.out_dir:
        od = Path(args.out_dir)
        od.mkdir(parents=True, exist_ok=True)
        curves = evaluation.roc_one_vs_rest(norms, data.labels, ckpt.model_config.n_classes)
        evaluation.write_roc_csv(od / "roc.csv", curves)
        evaluation.write_confusion_csv(od / "confusion.csv", report.confusion)
        (od / "metrics.json").write_text(json.dumps(out, sort_keys=True) + "\n", encoding="utf-8")
    _emit(out)


def cmd_predict(args) -> None:
    ckpt = training.load_checkpoint(args.checkpoint)
    clip_seconds, cfg = _frontend_of(ckpt)
    signal = dsp.read_wav(args.input)
    image = dsp.signal_to_model_input(dsp.clip_segments(signal, clip_seconds)[0], clip_seconds, cfg)
    norms = training.predict_norms(ckpt.params, image, ckpt.model_config)[0]
    table = _thresholds(args, ckpt)
    pred = nonclass.flag(norms, table) if table else training.prediction_from_norms(norms)
    out = pred.to_dict()
    if table is None:
        out["non_class"] = None
    _emit(out)


def cmd_calibrate(args) -> None:
    ckpt = training.load_checkpoint(args.checkpoint)
    clip_seconds, cfg = _frontend_of(ckpt)
    data = _load_split(args, args.split, clip_seconds, cfg)
    table = nonclass.calibrate(ckpt.params, data.images, data.labels, ckpt.model_config)
    ckpt.thresholds = table.to_dict()
    training.save_checkpoint(args.checkpoint, ckpt)
    if args.out:
        table.save(args.out)
    _emit(table.to_dict())


def cmd_detect(args) -> None:
    ckpt = training.load_checkpoint(args.checkpoint)
    table = _thresholds(args, ckpt)
    if table is None:
        raise CapsLidError("no thresholds: run `calibrate` first or pass --thresholds")
    clip_seconds, cfg = _frontend_of(ckpt)
    if args.input:
        signal = dsp.read_wav(args.input)
        image = dsp.signal_to_model_input(dsp.clip_segments(signal, clip_seconds)[0], clip_seconds, cfg)
        _emit(nonclass.detect(ckpt.params, image, table, ckpt.model_config).to_dict())
        return
    data = _load_split(args, args.split, clip_seconds, cfg)
    norms = training.predict_norms(ckpt.params, data.images, ckpt.model_config)
    flags = nonclass.flag_many(norms, table)
    _emit({"split": args.split, "n": int(flags.size), "flagged": int(flags.sum()), "rate": float(flags.mean())})


def cmd_segment(args) -> None:
    ckpt = training.load_checkpoint(args.checkpoint)
    ck_seconds, cfg = _frontend_of(ckpt)
    if args.clip_seconds != ck_seconds:
        cfg = dsp.StftConfig.for_clip(args.clip_seconds)
    table = _thresholds(args, ckpt)
    signal = dsp.read_wav(args.input)
    preds = evaluation.segment_and_classify(ckpt.params, signal, args.clip_seconds, ckpt.model_config, table, cfg)
    snippets = []
    for k, p in enumerate(preds):
        d = p.to_dict()
        if table is None:
            d["non_class"] = None
        d.update(index=k, start_s=k * args.clip_seconds)
        snippets.append(d)
    _emit({"clip_seconds": args.clip_seconds, "snippets": snippets})


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="capslid", description="Capsule-network spoken language identification.", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.set_defaults(func=func)
        p.add_argument(
            "--seed", type=int, default=_default_seed(),
            help="random seed (falls back to $CAPSLID_SEED, then 0)",
        )
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="parallel workers per batch")
        return p

    def frontend(p):
        p.add_argument("--clip-seconds", type=int, choices=(5, 10), default=5, help="snippet length")
        p.add_argument("--n-bins", type=int, default=None, help="STFT frequency bins (default per clip length: 64 or 129)")
        p.add_argument("--pps", type=int, default=None, help="spectrogram pixels per second (default per clip length: 10 or 50)")

    p = add("gen-data", cmd_gen_data, "write the synthetic WAV corpus and its manifest")
    p.add_argument("--out-dir", required=True, help="corpus directory")
    p.add_argument("--train", type=int, default=200, help="training clips per class")
    p.add_argument("--test", type=int, default=50, help="test clips per class")
    p.add_argument("--calib", type=int, default=50, help="calibration clips per class")
    p.add_argument("--nonclass", type=int, default=50, help="out-of-set clips")
    p.add_argument("--classes", type=int, default=5, help="number of in-set classes")

    p = add("preprocess", cmd_preprocess, "compute model inputs for every split into an .npz cache")
    p.add_argument("--manifest", required=True, help="manifest.jsonl path")
    p.add_argument("--out", required=True, help="output .npz path")
    p.add_argument("--pgm-dir", default=None, help="also export spectrograms as P5 grey-maps here")
    frontend(p)

    p = add("train", cmd_train, "train a model on the train split and write a checkpoint")
    p.add_argument("--manifest", required=True, help="manifest.jsonl path")
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--features", default=None, help="precomputed .npz from `preprocess`")
    p.add_argument("--epochs", type=int, default=training.TrainConfig.epochs, help="training epochs")
    p.add_argument("--batch-size", type=int, default=training.TrainConfig.batch_size, help="mini-batch size")
    p.add_argument("--lr", type=float, default=training.TrainConfig.learning_rate, help="Adam learning rate")
    p.add_argument("--routing-iterations", type=int, default=3, help="dynamic routing iterations")
    p.add_argument("--stats", default=None, help="also write per-epoch stats as JSON Lines here")
    frontend(p)

    p = add("eval", cmd_eval, "accuracy, per-class P/R/F1, confusion matrix and ROC AUC")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--manifest", required=True, help="manifest.jsonl path")
    p.add_argument("--features", default=None, help="precomputed .npz from `preprocess`")
    p.add_argument("--split", default="test", help="manifest split to evaluate")
    p.add_argument("--out-dir", default=None, help="also write metrics.json, roc.csv and confusion.csv here")

    p = add("predict", cmd_predict, "classify the first snippet of a WAV file")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--input", required=True, help="mono 16-bit 16 kHz WAV file")
    p.add_argument("--thresholds", default=None, help="threshold JSON (default: the checkpoint's)")

    p = add("calibrate", cmd_calibrate, "fit per-language non-class thresholds and store them in the checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint path (rewritten in place)")
    p.add_argument("--manifest", required=True, help="manifest.jsonl path")
    p.add_argument("--features", default=None, help="precomputed .npz from `preprocess`")
    p.add_argument("--split", default="calib", help="manifest split used for calibration")
    p.add_argument("--out", default=None, help="also write the threshold table as JSON here")

    p = add("detect", cmd_detect, "flag out-of-set inputs, for one WAV file or a whole split")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", default=None, help="WAV file to test")
    src.add_argument("--manifest", default=None, help="manifest.jsonl path (with --split)")
    p.add_argument("--features", default=None, help="precomputed .npz from `preprocess`")
    p.add_argument("--split", default="nonclass", help="manifest split to scan")
    p.add_argument("--thresholds", default=None, help="threshold JSON (default: the checkpoint's)")

    p = add("segment", cmd_segment, "classify every snippet of a long recording")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--input", required=True, help="long WAV recording")
    p.add_argument("--clip-seconds", type=int, choices=(5, 10), default=5, help="snippet length")
    p.add_argument("--thresholds", default=None, help="threshold JSON (default: the checkpoint's)")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required", parser)
    except UsageError as exc:
        exc.parser.print_help(sys.stderr)
        sys.stderr.write(f"\nerror: {exc}\n")
        return 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except (CapsLidError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
