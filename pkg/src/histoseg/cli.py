"""Command-line surface: one subcommand per pipeline stage.

Every subcommand is deterministic given its seeds; the default seed is 0
unless the VISTA_SEED environment variable overrides it, and an explicit
--seed flag wins over both. Failures print a single machine-parsable JSON
line on stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import corpus, imaging, metrics, model, refine, survival
from .errors import HistosegError, InputError


def _default_seed() -> int:
    return int(os.environ.get("VISTA_SEED", "0"))


def _parse_classes(spec: str) -> dict[int, str]:
    """Parse "1:tumor,2:stroma" into {1: "tumor", 2: "stroma"}."""
    out = {}
    for part in spec.split(","):
        if not part.strip():
            continue
        idx, name = part.split(":", 1)
        out[int(idx)] = name.strip()
    if not out:
        raise InputError(f"no classes in {spec!r}")
    return out


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- subcommand implementations ---------------------------------------------


def cmd_rasterize(args) -> int:
    polys = imaging.load_polygons(args.polygons)
    mask = imaging.rasterize_polygons(polys, args.width, args.height)
    imaging.save_mask(args.out, mask)
    return 0


def cmd_tile(args) -> int:
    image = imaging.load_image(args.image)
    mask = imaging.load_mask(args.mask)
    tiles = imaging.tile(image, mask, args.size)
    out = Path(args.out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    index = []
    for t in tiles:
        name = f"{stem}__x{t.x}_y{t.y}.png"
        imaging.save_image(out / "images" / name, t.image)
        imaging.save_mask(out / "masks" / name, t.mask)
        index.append({"name": name, "x": t.x, "y": t.y,
                      "pad_right": t.pad_right, "pad_bottom": t.pad_bottom})
    _write_json(out / "index.json", {"tile_size": args.size, "tiles": index})
    return 0


def cmd_manifest(args) -> int:
    manifest = corpus.build_manifest(args.root)
    corpus.save_manifest(args.out, manifest)
    return 0


def cmd_split(args) -> int:
    manifest = corpus.load_manifest(args.manifest)
    train, test = corpus.split(manifest, corpus.SplitSpec(args.frac, args.seed))
    corpus.save_manifest(args.out_train, train)
    corpus.save_manifest(args.out_test, test)
    return 0


def _model_config(args) -> model.ModelConfig:
    fields = {}
    if args.config:
        with open(args.config) as fh:
            fields = json.load(fh)
    if args.dim:
        fields["dim"] = args.dim
    fields.setdefault("seed", args.seed)
    return model.ModelConfig(**fields)


def cmd_train(args) -> int:
    manifest = corpus.load_manifest(args.manifest)
    cfg = _model_config(args)
    settings = model.TrainSettings(epochs=args.epochs, batch_size=args.batch_size,
                                   lr=args.lr, lr_decay=args.lr_decay,
                                   weight_decay=args.weight_decay, seed=args.seed)
    params, curve = model.train(model.TripletDataset(manifest), cfg, settings)
    model.save_checkpoint(args.out, params)
    if args.loss_curve:
        _write_json(args.loss_curve, {"epoch_mean_loss": curve})
    return 0


def cmd_segment(args) -> int:
    params = model.load_checkpoint(args.model)
    image = imaging.load_image(args.image)
    classes = _parse_classes(args.classes)
    boxes = None
    if args.boxes:
        with open(args.boxes) as fh:
            raw = json.load(fh)
        boxes = {int(k): imaging.BBox(*v) for k, v in raw.items()}
    mask = model.segment_multiclass(image, sorted(classes.items()), boxes, params)
    imaging.save_mask(args.out, mask)
    return 0


def cmd_evaluate(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    names = sorted(p.name for p in gt_dir.glob("*.png"))
    if not names:
        raise InputError(f"no ground-truth masks under {gt_dir}")
    class_ids = ([int(c) for c in args.classes.split(",")] if args.classes else None)
    records = []
    per_image = {}
    for name in names:
        pred_path = pred_dir / name
        if not pred_path.exists():
            raise InputError(f"missing prediction {pred_path}")
        pred = imaging.load_mask(pred_path)
        gt = imaging.load_mask(gt_dir / name)
        ids = class_ids or sorted(int(c) for c in np.unique(gt) if c != 0)
        per_class, mean_dice = metrics.multiclass_dice(pred, gt, ids)
        per_image[name] = {"per_class": {str(k): v for k, v in per_class.items()},
                           "mean": mean_dice}
        for c, v in per_class.items():
            records.append(metrics.DiceRecord(sample_id=name, class_name=str(c),
                                              organ="", category="", dice=v))
    means = [v["mean"] for v in per_image.values()]
    ci = metrics.bootstrap_ci(means, b=args.bootstrap, seed=args.seed)
    by_class: dict[str, list[float]] = {}
    for r in records:
        by_class.setdefault(r.class_name, []).append(r.dice)
    report = {
        "n_images": len(names),
        "mean_dice": ci.mean,
        "ci95": [ci.lower, ci.upper],
        "per_class_mean": {k: float(np.mean(v)) for k, v in sorted(by_class.items())},
        "per_image": per_image,
    }
    _write_json(args.out, report)
    if args.records:
        metrics.write_records_csv(args.records, records)
    return 0


def cmd_hitl(args) -> int:
    params = model.load_checkpoint(args.model)
    slide = imaging.load_image(args.slide)
    gt = imaging.load_mask(args.gt)
    classes = (_parse_classes(args.classes) if args.classes else
               {int(c): f"class {c}" for c in np.unique(gt) if c != 0})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        session = refine.RefineSession(slide, params, classes, gt_mask=gt,
                                       patch_size=args.patch_size, window=args.window)
        for _ in range(args.rounds):
            session.run_round(budget=args.budget)
    refine.save_state(args.out, session.state)
    if args.mask_out:
        imaging.save_mask(args.mask_out, session.pixel_mask)
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    params = model.load_checkpoint(args.model)
    slide = imaging.load_image(args.slide)
    gt = imaging.load_mask(args.gt) if args.gt else None
    if args.classes:
        classes = _parse_classes(args.classes)
    elif gt is not None:
        classes = {int(c): f"class {c}" for c in np.unique(gt) if c != 0}
    else:
        raise InputError("serve needs --classes when no ground truth is given")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        session = refine.RefineSession(slide, params, classes, gt_mask=gt,
                                       patch_size=args.patch_size, window=args.window)
    server = serve(session, args.port, host=args.host)
    print(f"serving on http://{args.host}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def cmd_tis(args) -> int:
    with open(args.patches) as fh:
        raw = json.load(fh)
    patches = [imaging.BBox(*rec) for rec in raw]
    mask = imaging.load_mask(args.mask)
    value = survival.tis(survival.TISInput(patches=patches, tumor_mask=mask > 0))
    print(f"{value:.6f}")
    if args.out:
        _write_json(args.out, {"tis": value, "n_patches": len(patches)})
    return 0


def cmd_survival(args) -> int:
    cohort = survival.read_cohort_csv(args.cohort)
    fitted = survival.cox_fit(cohort, kind=args.risk_model, seed=args.seed)
    for r in cohort:
        r.risk = float(fitted.predict_risk([r.tis])[0])
    results = {"model": args.risk_model,
               "c_index": survival.c_index(cohort),
               "n_patients": len(cohort),
               "n_events": int(sum(r.event for r in cohort))}
    for key in ("tis", "risk"):
        low, high = survival.stratify_median(cohort, by=key)
        entry = {"n_low": len(low), "n_high": len(high)}
        if low and high:
            try:
                chi2, p = survival.logrank(low, high)
                entry.update({"logrank_chi2": chi2, "logrank_p": p})
            except HistosegError as exc:
                entry["logrank_error"] = str(exc)
        results[f"median_split_{key}"] = entry
        if args.km_dir:
            km_dir = Path(args.km_dir)
            km_dir.mkdir(parents=True, exist_ok=True)
            survival.write_km_csv(km_dir / f"{key}_low.csv", survival.km_curve(low))
            if high:
                survival.write_km_csv(km_dir / f"{key}_high.csv", survival.km_curve(high))
    if args.risk_model == "linear":
        results["beta"] = float(fitted.params["beta"][0, 0])
    survival.write_results_json(args.out, results)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histoseg",
                                     description="tissue segmentation pipeline")
    seed_default = _default_seed()
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("rasterize", help="rasterize polygon annotations to a mask PNG")
    p.add_argument("--polygons", required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("tile", help="cut an image/mask pair into aligned tiles")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--size", type=int, default=1024)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("manifest", help="scan a corpus directory into a JSONL manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_manifest)

    p = sub.add_parser("split", help="train/test split by parent image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--frac", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the segmentation model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of model config fields")
    p.add_argument("--dim", type=int)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--lr-decay", type=float, default=1.0)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--loss-curve")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="multi-class segmentation of one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--classes", required=True, help='e.g. "1:tumor,2:stroma"')
    p.add_argument("--boxes", help="JSON {class_index: [x0,y0,x1,y1]}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="Dice report for prediction vs ground-truth dirs")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", help="comma-separated class indices")
    p.add_argument("--records", help="also write a per-record CSV")
    p.add_argument("--bootstrap", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=seed_default)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("hitl", help="oracle-driven refinement rounds on one slide")
    p.add_argument("--slide", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--budget", type=int, default=200)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--window", type=int)
    p.add_argument("--classes")
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out")
    p.set_defaults(func=cmd_hitl)

    p = sub.add_parser("serve", help="HTTP service for the review UI")
    p.add_argument("--model", required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--gt")
    p.add_argument("--classes")
    p.add_argument("--port", type=int, default=8234)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--window", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("tis", help="tumor-interaction score from patches + mask")
    p.add_argument("--patches", required=True, help="JSON [[x0,y0,x1,y1], ...]")
    p.add_argument("--mask", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_tis)

    p = sub.add_parser("survival", help="risk fit, C-index, KM curves, log-rank")
    p.add_argument("--cohort", required=True)
    p.add_argument("--risk-model", choices=("linear", "mlp"), default="linear")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--out", required=True)
    p.add_argument("--km-dir")
    p.set_defaults(func=cmd_survival)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HistosegError as exc:
        print(json.dumps({"error": exc.code, "detail": str(exc)}), file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(json.dumps({"error": "missing_file", "detail": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
