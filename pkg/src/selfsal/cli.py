"""Command line entry point.

Subcommands: ``train``, ``pseudo-gt``, ``infer``, ``eval``. Behaviour is
config-file-first (flat ``key = value`` lines, ``#`` comments) with
``key=value`` overrides on the command line. Exit codes: 0 success,
1 runtime failure, 2 usage error; failures print one ``error: ...``
line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt
from . import data as data_mod
from . import figures
from . import metrics as metrics_mod
from . import pseudogt as pgt
from .errors import SelfSalError, UsageError
from .trainer import TrainConfig, run_training

log = logging.getLogger(__name__)

PSEUDO_SUFFIXES = ("_pgt", "_pgt_bin", "_cam", "_gate", "_gedge")


def _coerce(field: dataclasses.Field, raw: str):
    base = field.type if isinstance(field.type, type) else None
    name = field.name
    value = raw.strip()
    if isinstance(field.default, bool) or base is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"key {name!r} expects a boolean, got {raw!r}")
    if isinstance(field.default, int) and not isinstance(field.default, bool):
        try:
            return int(value)
        except ValueError:
            raise UsageError(f"key {name!r} expects an integer, got {raw!r}") from None
    if isinstance(field.default, float):
        try:
            return float(value)
        except ValueError:
            raise UsageError(f"key {name!r} expects a number, got {raw!r}") from None
    if isinstance(field.default, tuple):
        try:
            return tuple(int(v) for v in value.split(","))
        except ValueError:
            raise UsageError(f"key {name!r} expects comma-separated integers") from None
    return value


def parse_config_text(text: str, cfg: TrainConfig | None = None) -> TrainConfig:
    cfg = cfg or TrainConfig()
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in fields:
            raise UsageError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(fields[key], raw))
    return cfg


def load_config(path, overrides) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        cfg = parse_config_text(p.read_text(), cfg)
    if overrides:
        cfg = parse_config_text("\n".join(overrides), cfg)
    return cfg


def write_config(cfg: TrainConfig, path) -> None:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override)
    corpus = data_mod.load_corpus(args.data)
    report = run_training(cfg, corpus, args.out, resume_from=args.resume)
    print(f"report: {report.report_csv}")
    print(f"checkpoint: {report.final_checkpoint}")
    return 0


def _load_network(path, dtype=torch.float32):
    model = ckpt.load_model(path).to(dtype)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def cmd_infer(args) -> int:
    cfg = load_config(args.config, args.override)
    model = _load_network(args.checkpoint, cfg.torch_dtype())
    corpus = data_mod.load_corpus(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for image_id, path in corpus.images:
            image = data_mod.load_image(path, cfg.torch_dtype())
            saliency, _ = model(image[None])
            data_mod.save_gray_image(out / f"{image_id}_sal.png", saliency[0])
    print(f"wrote {len(corpus)} saliency maps to {out}")
    return 0


def cmd_pseudo_gt(args) -> int:
    cfg = load_config(args.config, args.override)
    model = _load_network(args.checkpoint, cfg.torch_dtype())
    corpus = data_mod.load_corpus(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provider = (pgt.FileEdgeProvider(cfg.edge_dir) if cfg.edge_provider == "file"
                else pgt.SobelEdgeProvider())
    with torch.no_grad():
        for image_id, path in corpus.images:
            image = data_mod.load_image(path, cfg.torch_dtype())
            side = min(image.shape[-2:])
            cam = pgt.compute_cam(image, model)
            edges = provider(image, key=image_id)
            gate = pgt.make_gate(cam, cfg.cam_threshold,
                                 pgt.scaled_radius(cfg.dilate_radius, side))
            gated = pgt.gate_edges(edges, gate, cfg.edge_threshold)
            if cfg.pseudo_mode == "cam":
                label = pgt.PseudoGT(soft=cam, hard=(cam >= 0.5).to(cam.dtype))
            elif cfg.pseudo_mode == "edge":
                label = pgt.PseudoGT(soft=gated, hard=(gated >= 0.5).to(gated.dtype))
            else:
                label = pgt.fuse_pseudo_gt(cam, gated)
            for suffix, values in (("_pgt", label.soft), ("_pgt_bin", label.hard),
                                   ("_cam", cam), ("_gate", gate), ("_gedge", gated)):
                data_mod.save_gray_image(out / f"{image_id}{suffix}.png", values)
    print(f"wrote pseudo-label artifacts for {len(corpus)} images to {out}")
    return 0


def cmd_eval(args) -> int:
    corpus = data_mod.load_corpus(args.data, with_masks=True)
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise UsageError(f"prediction directory not found: {pred_dir}")
    ids, preds, gts = [], [], []
    for (image_id, _), mask_path in zip(corpus.images, corpus.masks):
        pred_path = pred_dir / f"{image_id}{args.pred_suffix}.png"
        if not pred_path.exists():
            raise UsageError(f"missing prediction {pred_path}")
        preds.append(torch.from_numpy(_gray_array(pred_path)))
        gts.append(data_mod.load_mask(mask_path, torch.float64))
        ids.append(image_id)
    fixed = args.fixed_threshold
    report = metrics_mod.evaluate_corpus(ids, preds, gts, beta2=args.beta2,
                                         fixed_threshold=fixed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_metrics_json(report, out / "metrics.json")
    metrics_mod.write_pr_csv(report.pr_curve, out / "pr_curve.csv")
    figures.save_pr_curve(report.pr_curve, out / "pr_curve.png")
    print(f"mae={report.mae_mean:.6f} f_beta={report.f_beta_mean:.6f}")
    print(f"wrote metrics.json, pr_curve.csv, pr_curve.png to {out}")
    return 0


def _gray_array(path):
    import numpy as np
    from PIL import Image as PILImage
    with PILImage.open(path) as img:
        return (np.asarray(img.convert("L"), dtype=np.float64) / 255.0)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfsal",
        description="Self-supervised salient object detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--data", required=True, help="corpus directory")
        p.add_argument("--out", required=True, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint (.npz)")
        p.add_argument("override", nargs="*", metavar="key=value",
                       help="config overrides")

    p_train = sub.add_parser("train", help="run self-supervised training")
    common(p_train)
    p_train.add_argument("--resume", default=None, help="training checkpoint to resume")
    p_train.set_defaults(func=cmd_train)

    p_pgt = sub.add_parser("pseudo-gt", help="write pseudo-label artifacts per image")
    common(p_pgt, checkpoint=True)
    p_pgt.set_defaults(func=cmd_pseudo_gt)

    p_infer = sub.add_parser("infer", help="write saliency maps per image")
    common(p_infer, checkpoint=True)
    p_infer.set_defaults(func=cmd_infer)

    p_eval = sub.add_parser("eval", help="score predictions against masks")
    p_eval.add_argument("--data", required=True, help="corpus directory with masks")
    p_eval.add_argument("--pred", required=True, help="directory of prediction images")
    p_eval.add_argument("--pred-suffix", default="_sal",
                        help="suffix between image id and .png (default _sal)")
    p_eval.add_argument("--beta2", type=float, default=0.3)
    p_eval.add_argument("--fixed-threshold", type=float, default=None)
    p_eval.add_argument("--out", required=True, help="output directory")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except SelfSalError as exc:
        print(f"error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # keep the contract: one line, nonzero exit
        print(f"error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
