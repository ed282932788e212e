"""Command-line entry point: ``dcpt <subcommand> ...``.

Exit status is 0 on success, 1 on usage errors and 2 on data errors.  Logs
go to stderr; results are written only to the files named on the command
line.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ABLATIONS, ConfigError, ModelConfig
from .data import DataError, build_manifest, load_image, load_reports, read_labels, read_manifest, write_manifest
from .gradcam import gradcam_heatmap, save_heatmap
from .keyframes import KeyframeError, classify_frames
from .rng import RandomSource
from .training import DivergenceError, TrainHyper, evaluate, train

log = logging.getLogger("dcpt")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

DATA_ERRORS = (DataError, KeyframeError, CheckpointError, ConfigError, DivergenceError, OSError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcpt", description="Keyframe-aware deepfake frame classifier.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    k = sub.add_parser("keyframes", help="classify frames of an MP4 or Annex B stream as I / nonI")
    k.add_argument("--input", required=True)
    k.add_argument("--format", choices=("auto", "mp4", "annexb"), default="auto")
    k.add_argument("--out", required=True)

    m = sub.add_parser("manifest", help="select frames for a training regime")
    m.add_argument("--frames", required=True, help="directory holding videos/<id>/<frame>.png")
    m.add_argument("--labels", required=True, help="JSON or CSV video_id -> real/fake [, split]")
    m.add_argument("--keyframes", required=True, help="glob of keyframe report .jsonl files")
    m.add_argument("--regime", choices=("K", "K_aug", "N", "K_plus_N"), required=True)
    m.add_argument("--ratio", type=int, default=3, help="normal frames per real video relative to a fake one")
    m.add_argument("--per-fake", type=int, default=1, help="normal frames drawn per fake video")
    m.add_argument("--aug-factor", type=int, default=3)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a detector on the manifest's train split")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config", help="model config JSON")
    t.add_argument("--ablation", choices=ABLATIONS)
    t.add_argument("--depths", type=_int_list)
    t.add_argument("--heads", type=_int_list)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--wd", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--log", help="per-epoch loss log (JSON Lines); defaults next to --out")
    t.add_argument("--no-figures", action="store_true")
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="ACC / AUC / ROC on a manifest split")
    e.add_argument("--manifest", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--report", required=True)
    e.add_argument("--no-figures", action="store_true")

    g = sub.add_parser("gradcam", help="Grad-CAM heatmap for one face image")
    g.add_argument("--model", required=True)
    g.add_argument("--image", required=True)
    g.add_argument("--layer", type=int, default=4, help="extractor group index 0..4")
    g.add_argument("--class", dest="target_class", type=int, default=1)
    g.add_argument("--overlay", help="also write a side-by-side overlay figure here")
    g.add_argument("--out", required=True)
    return p


def _model_config(args) -> ModelConfig:
    cfg = ModelConfig.from_json(Path(args.config).read_text()) if args.config else ModelConfig()
    if args.ablation:
        cfg.ablation = args.ablation
    if args.depths:
        cfg.phase_depths = args.depths
    if args.heads:
        cfg.phase_heads = args.heads
    return cfg.validate()


def cmd_keyframes(args) -> int:
    report = classify_frames(args.input, args.format)
    Path(args.out).write_text(report.to_jsonl())
    log.info("%s: %d frames, %d keyframes", args.input, report.total_frames, len(report.keyframes))
    return EXIT_OK


def cmd_manifest(args) -> int:
    paths = sorted(glob.glob(args.keyframes))
    if not paths:
        raise DataError(f"no keyframe reports match {args.keyframes!r}")
    entries = build_manifest(
        args.frames,
        load_reports(paths),
        read_labels(args.labels),
        args.regime,
        real_normal_multiplier=args.ratio,
        rng=RandomSource(args.seed),
        normal_per_fake=args.per_fake,
        aug_factor=args.aug_factor,
    )
    write_manifest(entries, args.out)
    n_real = sum(e.label == 0 for e in entries)
    log.info("%s: %d entries (%d real, %d fake)", args.regime, len(entries), n_real, len(entries) - n_real)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _model_config(args)
    seed = int(os.environ.get("DCPT_SEED", args.seed))
    hyper = TrainHyper(lr=args.lr, weight_decay=args.wd, batch_size=args.batch_size, epochs=args.epochs, seed=seed)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".loss.jsonl")
    log.info("ablation=%s depths=%s heads=%s seed=%d", cfg.ablation, cfg.phase_depths, cfg.phase_heads, seed)
    model, records = train(read_manifest(args.manifest), cfg, hyper, log_path)
    save_checkpoint(model, out)
    if not args.no_figures:
        from .plotting import plot_loss

        plot_loss(records, out.with_suffix(".loss.png"))
    return EXIT_OK


def cmd_eval(args) -> int:
    entries = read_manifest(args.manifest)
    if not entries:
        raise DataError(f"manifest {args.manifest} is empty")
    model = load_checkpoint(args.model)
    report = evaluate(entries, model, args.split)
    path = Path(args.report)
    path.write_text(report.to_json())
    log.info("ACC %.4f AUC %.4f on %d real / %d fake", report.acc, report.auc, report.n_real, report.n_fake)
    if not args.no_figures:
        from .plotting import plot_roc

        plot_roc(report, path.with_suffix(".roc.png"))
    return EXIT_OK


def cmd_gradcam(args) -> int:
    model = load_checkpoint(args.model)
    image = load_image(args.image, model.cfg.image_size)
    heat = gradcam_heatmap(model, image, args.layer, args.target_class)
    save_heatmap(args.out, heat)
    if args.overlay:
        from .plotting import plot_heatmap_overlay

        plot_heatmap_overlay(image, heat, args.overlay)
    return EXIT_OK


COMMANDS = {"keyframes": cmd_keyframes, "manifest": cmd_manifest, "train": cmd_train, "eval": cmd_eval, "gradcam": cmd_gradcam}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except DATA_ERRORS as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
