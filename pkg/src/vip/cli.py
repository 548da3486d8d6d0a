"""Command-line front end.

Exit codes: 0 success, 2 usage or precondition failure, 3 the attack ended
without satisfying the success predicate, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from . import __version__
from .attack import AttackConfig, AttackResult, run_attack
from .fixtures import identity_attention_model, synthetic_image, uniform_attention_model
from .imageio import (
    PpmFormatError,
    RawImage,
    read_ppm,
    render_heatmap,
    render_perturbation,
    resize_bilinear,
    scale_box,
    side_by_side,
    write_ppm,
)
from .metrics import attention_rollout, averaged_attention_map, diagonal_dominance
from .roi import BoxBoundsError, EmptyRoiError, extract_roi_token_idx, read_boxes
from .vit import ConfigError, ViTConfig, ViTModel, WeightFormatError, init_random, load_weights, save_weights

logger = logging.getLogger("vip")

EXIT_OK, EXIT_USAGE, EXIT_NO_SUCCESS, EXIT_IO = 0, 2, 3, 4
SEED_ENV = "VIP_SEED"


class UsageError(Exception):
    """Bad flags or violated input precondition (exit 2)."""


def _resolve_seed(flag: Optional[int], default: int = 0) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return default


def _write_json(path: Path, payload: Dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


# ---------------------------------------------------------------------------
# gen-weights / gen-image
# ---------------------------------------------------------------------------

def cmd_gen_weights(args) -> int:
    try:
        config = ViTConfig(args.resolution, args.patch_dim, args.embed_dim, args.heads,
                           args.layers, args.mlp_dim)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    seed = _resolve_seed(args.seed)
    if args.kind == "random":
        model = init_random(config, seed)
    elif args.kind == "uniform":
        model = uniform_attention_model(config, seed)
    else:
        try:
            model = identity_attention_model(config, seed=seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    save_weights(model, args.out)
    logger.info("wrote %s (%s, seed %d, sha256 %s)", args.out, args.kind, seed, model.checksum()[:12])
    return EXIT_OK


def cmd_gen_image(args) -> int:
    seed = _resolve_seed(args.seed, default=7)
    image = RawImage.from_chw(synthetic_image(args.resolution, seed))
    write_ppm(image, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# attack / sweep
# ---------------------------------------------------------------------------

@dataclass
class Inputs:
    model: ViTModel
    image: np.ndarray
    boxes: list
    roi: object
    original_size: tuple
    resized: bool


def _load_inputs(model_path, image_path, boxes_path, auto_resize: bool = True) -> Inputs:
    model = load_weights(model_path)
    raw = read_ppm(image_path)
    boxes = read_boxes(boxes_path)
    res = model.config.resolution
    original = (raw.width, raw.height)
    for box in boxes:
        try:
            box.validate(raw.width, raw.height)
        except BoxBoundsError as exc:
            raise UsageError(str(exc)) from exc
    resized = original != (res, res)
    if resized:
        if not auto_resize:
            raise UsageError(f"image is {raw.width}x{raw.height}, model expects {res}x{res}")
        logger.info("resizing %dx%d image to %dx%d", raw.width, raw.height, res, res)
        raw = resize_bilinear(raw, res)
        boxes = [scale_box(b, original, res) for b in boxes]
    if not boxes:
        raise UsageError("no ROI boxes given; the ROI token set must be non-empty")
    try:
        roi = extract_roi_token_idx(boxes, model.config)
    except (EmptyRoiError, BoxBoundsError) as exc:
        raise UsageError(f"{exc} (the ROI token set must be non-empty)") from exc
    return Inputs(model, raw.to_chw(), boxes, roi, original, resized)


def _attack_config(args) -> AttackConfig:
    lambda_v = args.lambda_v
    if args.mode == "V" and lambda_v is not None:
        logger.warning("--mode V has no value-term weight; ignoring --lambda-v %s", lambda_v)
        lambda_v = None
    cfg = AttackConfig(
        mode=args.mode,
        l_max=args.lmax,
        lambda_v=1.0 if lambda_v is None else lambda_v,
        optimizer=args.optimizer,
        alpha=args.alpha,
        max_iters=args.iters,
        patience=args.patience,
        check_every=args.check_every,
        linf=args.linf,
        tau_rollout=args.tau_rollout,
        tau_feat=args.tau_feat,
        seed=_resolve_seed(args.seed),
    )
    return cfg


def _validated(cfg: AttackConfig, model: ViTModel) -> AttackConfig:
    try:
        return cfg.validate(model.config.num_layers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _result_document(inputs: Inputs, cfg: AttackConfig, result: AttackResult, args) -> Dict:
    c = inputs.model.config
    doc = {
        "tool": "vip",
        "version": __version__,
        "config": cfg.to_dict(),
        "model": {
            "path": str(args.model),
            "sha256": inputs.model.checksum(),
            "resolution": c.resolution,
            "patch_dim": c.patch_dim,
            "embed_dim": c.embed_dim,
            "num_heads": c.num_heads,
            "num_layers": c.num_layers,
            "mlp_hidden_dim": c.mlp_hidden_dim,
        },
        "image": {"path": str(args.image), "original_size": list(inputs.original_size),
                  "resized": inputs.resized},
        "boxes": [list(b.as_tuple()) for b in inputs.boxes],
        "roi_tokens": list(inputs.roi.indices),
    }
    doc.update(result.to_dict())
    return doc


def cmd_attack(args) -> int:
    started = time.time()
    inputs = _load_inputs(args.model, args.image, args.boxes, not args.no_auto_resize)
    cfg = _validated(_attack_config(args), inputs.model)
    result = run_attack(inputs.model, inputs.image, inputs.roi, cfg)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = inputs.model.config.resolution
    grid = inputs.model.config.grid_size
    clean_img = RawImage.from_chw(inputs.image)
    adv_img = RawImage.from_chw(result.adversarial)
    rollout_c = attention_rollout(inputs.model.forward(inputs.image).activations, cfg.l_max)
    rollout_a = attention_rollout(inputs.model.forward(result.adversarial).activations, cfg.l_max)
    # render both maps as one field so they share a colour scale
    pair = np.concatenate([rollout_c.heat.reshape(grid, grid), rollout_a.heat.reshape(grid, grid)], axis=1)
    both = render_heatmap(pair, (2 * res, res))
    heat_c = RawImage(res, res, both.pixels[:, :res])
    heat_a = RawImage(res, res, both.pixels[:, res:])
    artifacts = {
        "adversarial": out / "adversarial.ppm",
        "perturbation": out / "perturbation.ppm",
        "rollout_clean": out / "rollout_clean.ppm",
        "rollout_adversarial": out / "rollout_adversarial.ppm",
        "panel": out / "panel.ppm",
        "result": out / "result.json",
    }
    write_ppm(adv_img, artifacts["adversarial"])
    pert = render_perturbation(result.delta)
    write_ppm(pert, artifacts["perturbation"])
    write_ppm(heat_c, artifacts["rollout_clean"])
    write_ppm(heat_a, artifacts["rollout_adversarial"])
    write_ppm(side_by_side([clean_img, adv_img, pert, heat_c, heat_a]), artifacts["panel"])
    _write_json(artifacts["result"], _result_document(inputs, cfg, result, args))
    _write_manifest(out / "manifest.json", "attack", args, cfg.seed, artifacts, started,
                    config=cfg.to_dict())

    m = result.metrics
    logger.info("stop=%s iters=%d loss %.4g -> %.4g ssim=%.3f rollout ratio=%.3f success=%s",
                result.stop_reason, result.iterations, result.history[0].total,
                result.history[-1].total, m.ssim, m.rollout_ratio, result.success)
    return EXIT_OK if result.success else EXIT_NO_SUCCESS


def _write_manifest(path: Path, command: str, args, seed: int, artifacts: Dict[str, Path],
                    started: float, **extra) -> None:
    inputs = {k: str(getattr(args, k)) for k in ("model", "image", "boxes") if getattr(args, k, None)}
    if getattr(args, "images", None):
        inputs["images"] = [str(p) for p in args.images]
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "inputs": inputs,
        "artifacts": {k: str(v) for k, v in {**artifacts, "manifest": path}.items()},
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "duration_s": round(time.time() - started, 3),
        **extra,
    }
    _write_json(path, manifest)


SWEEP_COLUMNS = [
    "value", "final_loss", "roi_mass_before", "roi_mass_after", "rollout_ratio", "ssim",
    "feature_cosine_global", "feature_cosine_roi", "feature_cosine_background",
    "iterations", "stop_reason", "error",
]


def _sweep_row(job) -> Dict[str, str]:
    model_path, image_path, boxes_path, auto_resize, cfg, value = job
    row = {k: "" for k in SWEEP_COLUMNS}
    row["value"] = _fmt(value)
    try:
        inputs = _load_inputs(model_path, image_path, boxes_path, auto_resize)
        cfg.validate(inputs.model.config.num_layers)
        result = run_attack(inputs.model, inputs.image, inputs.roi, cfg)
    except Exception as exc:  # recorded in the row; the sweep goes on
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row
    m = result.metrics
    depth = cfg.l_max
    row.update(
        final_loss=_fmt(result.history[-1].total),
        roi_mass_before=_fmt(float(np.mean(m.roi_attention_mass_clean[:depth]))),
        roi_mass_after=_fmt(float(np.mean(m.roi_attention_mass_adv[:depth]))),
        rollout_ratio=_fmt(m.rollout_ratio),
        ssim=_fmt(m.ssim),
        feature_cosine_global=_fmt(m.feature_cosine_global),
        feature_cosine_roi=_fmt(m.feature_cosine_roi),
        feature_cosine_background=_fmt(m.feature_cosine_background),
        iterations=str(result.iterations),
        stop_reason=result.stop_reason,
    )
    return row


def cmd_sweep(args) -> int:
    started = time.time()
    if not args.values:
        raise UsageError("--values needs at least one value")
    base = _attack_config(args)
    jobs = []
    for raw in args.values:
        cfg = AttackConfig(**base.to_dict())
        try:
            if args.param == "lmax":
                value = int(raw)
                cfg.l_max = value
            else:
                value = float(raw)
                cfg.lambda_v = value
        except ValueError:
            raise UsageError(f"--values: {raw!r} is not a number") from None
        jobs.append((args.model, args.image, args.boxes, not args.no_auto_resize, cfg, value))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_row, jobs))
    else:
        rows = [_sweep_row(job) for job in jobs]

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    manifest = out.with_suffix(".manifest.json")
    _write_manifest(manifest, "sweep", args, base.seed, {"csv": out}, started,
                    config=base.to_dict(), param=args.param, values=list(args.values))
    failed = sum(1 for r in rows if r["error"])
    if failed:
        logger.warning("%d of %d sweep runs failed", failed, len(rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    started = time.time()
    model = load_weights(args.model)
    res = model.config.resolution
    traces = []
    for path in args.images:
        raw = read_ppm(path)
        if (raw.width, raw.height) != (res, res):
            raw = resize_bilinear(raw, res)
        traces.append(model.forward(raw.to_chw()).activations)
    layers = args.layer or list(range(1, model.config.num_layers + 1))
    for layer in layers:
        if not 1 <= layer <= model.config.num_layers:
            raise UsageError(f"--layer {layer} outside 1..{model.config.num_layers}")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seq = model.config.seq_len
    artifacts = {}
    rows = []
    for layer in layers:
        avg = averaged_attention_map(traces, layer)
        path = out / f"attention_layer{layer}.ppm"
        write_ppm(render_heatmap(avg, seq * args.scale), path)
        artifacts[f"attention_layer{layer}"] = path
        dominance = float(np.mean([diagonal_dominance(t, layer) for t in traces]))
        rows.append({"layer": layer, "diagonal_dominance": _fmt(dominance)})
    csv_path = out / "diagonal_dominance.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["layer", "diagonal_dominance"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    artifacts["diagonal_dominance"] = csv_path
    _write_manifest(out / "manifest.json", "analyze", args, 0, artifacts, started,
                    layers=list(layers))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="VITW weight file")
    p.add_argument("--image", required=True, help="P6 PPM image")
    p.add_argument("--boxes", required=True, help="box file: one 'x0 y0 x1 y1' per line")
    p.add_argument("--mode", choices=["A", "A+V", "V"], default="A+V", help="loss terms to minimise")
    p.add_argument("--lmax", type=int, default=1, help="number of leading blocks attacked")
    p.add_argument("--lambda-v", type=float, default=None,
                   help="value-norm weight in mode A+V (default 1)")
    p.add_argument("--optimizer", choices=["adam", "sign-gd"], default="adam", help="update rule")
    p.add_argument("--alpha", type=float, default=1e-3, help="step size on the [0,1] intensity scale")
    p.add_argument("--iters", type=int, default=1500, help="maximum iterations")
    p.add_argument("--patience", type=int, default=10, help="convergence checks without improvement")
    p.add_argument("--check-every", type=int, default=100, help="iterations between convergence checks")
    p.add_argument("--linf", type=float, default=None, help="L-inf budget in pixel units (0-255)")
    p.add_argument("--tau-rollout", type=float, default=0.2,
                   help="success needs ROI rollout mass below this fraction of its clean value")
    p.add_argument("--tau-feat", type=float, default=0.5,
                   help="success needs mean ROI-token cosine below this")
    p.add_argument("--seed", type=int, default=None, help=f"run seed (overrides ${SEED_ENV})")
    p.add_argument("--no-auto-resize", action="store_true",
                   help="fail instead of resizing images that do not match the model resolution")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="vip", description="ROI attention-suppression attacks on a toy ViT")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-weights", formatter_class=fmt, help="write seeded VITW weights")
    g.add_argument("--resolution", type=int, default=64, help="input side length in pixels")
    g.add_argument("--patch-dim", type=int, default=16, help="patch side length")
    g.add_argument("--embed-dim", type=int, default=64, help="token width")
    g.add_argument("--heads", type=int, default=4, help="attention heads per block")
    g.add_argument("--layers", type=int, default=4, help="encoder blocks")
    g.add_argument("--mlp-dim", type=int, default=128, help="MLP hidden width")
    g.add_argument("--kind", choices=["random", "uniform", "identity"], default="random",
                   help="random init, or a synthetic model with uniform / self-only attention")
    g.add_argument("--seed", type=int, default=None, help=f"weight seed (overrides ${SEED_ENV}; else 0)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_weights)

    i = sub.add_parser("gen-image", formatter_class=fmt, help="write a seeded synthetic test image")
    i.add_argument("--resolution", type=int, default=64, help="side length in pixels")
    i.add_argument("--seed", type=int, default=None, help=f"image seed (overrides ${SEED_ENV}; else 7)")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_gen_image)

    a = sub.add_parser("attack", formatter_class=fmt, help="run one attack")
    _add_attack_flags(a)
    a.add_argument("--out-dir", required=True)
    a.set_defaults(func=cmd_attack)

    s = sub.add_parser("sweep", formatter_class=fmt, help="one attack per parameter value -> CSV")
    _add_attack_flags(s)
    s.add_argument("--param", choices=["lmax", "lambda-v"], required=True)
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--jobs", type=int, default=1, help="parallel attack processes")
    s.add_argument("--out", required=True, help="CSV path")
    s.set_defaults(func=cmd_sweep)

    z = sub.add_parser("analyze", formatter_class=fmt,
                       help="averaged attention maps and diagonal dominance over images")
    z.add_argument("--model", required=True)
    z.add_argument("--images", nargs="+", required=True)
    z.add_argument("--layer", type=int, action="append", help="block to analyse (repeatable; default all)")
    z.add_argument("--scale", type=int, default=8, help="pixels per attention entry in the heatmap")
    z.add_argument("--out-dir", required=True)
    z.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (OSError, PpmFormatError, WeightFormatError) as exc:
        logger.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
