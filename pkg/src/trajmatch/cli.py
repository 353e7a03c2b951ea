"""Command-line entry point.

Subcommands: ingest, synth, rasterize, train, classify, baseline-gru,
ablation, routine, gradcheck. Every run echoes its effective configuration
into the outputs (provenance); timing lives under separate keys so reports
are byte-identical across reruns apart from those fields.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import trajmatch
from trajmatch import backend
from trajmatch.errors import TrajmatchError


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _layer_list(text: str) -> list[int]:
    return [_positive_int(part) for part in text.split(",") if part]


def _provenance(args: argparse.Namespace, subcommand: str) -> dict:
    config = {
        k: v for k, v in sorted(vars(args).items()) if k not in ("func",) and v is not None
    }
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()}
    return {
        "tool": "trajmatch",
        "version": trajmatch.__version__,
        "backend": backend.ACTIVE,
        "subcommand": subcommand,
        "config": config,
    }


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- subcommand handlers ------------------------------------------------------

def cmd_ingest(args) -> int:
    from trajmatch import ingest

    with open(args.locations, "r", encoding="utf-8") as fh:
        parsed = ingest.parse_locations(fh, delimiter=args.delimiter)
    with open(args.roster, "r", encoding="utf-8") as fh:
        roster = ingest.read_roster(fh, delimiter=args.delimiter)
    with open(args.labels, "r", encoding="utf-8") as fh:
        labels = ingest.read_labels(fh, delimiter=args.delimiter)
    pair_days = ingest.build_pair_days(parsed.samples, roster, labels)
    ingest.write_pair_days(args.out, pair_days, _provenance(args, "ingest"))
    for warning in parsed.report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(
        f"ingest: {parsed.report.rows_ok} rows ok, {parsed.report.rows_skipped} skipped "
        f"{dict(parsed.report.skipped)}, {len(pair_days)} pair-days -> {args.out}"
    )
    return 0


def cmd_synth(args) -> int:
    from trajmatch import ingest, synth

    if args.preset == "benchmark":
        config = synth.benchmark_config(seed=args.seed)
    elif args.preset == "disjoint":
        config = synth.disjoint_home_config(seed=args.seed)
    elif args.preset == "routine":
        config = synth.routine_pair_config(seed=args.seed)
    else:
        config = synth.ScenarioConfig(
            num_pairs=args.pairs, days_per_pair=args.days,
            co_walk_probability=args.co_walk_prob, seed=args.seed,
        )
    result = synth.generate(config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ingest.write_pair_days(out_dir / "pairdays.ndjson", result.pair_days,
                           _provenance(args, "synth"))
    with open(out_dir / "truth.ndjson", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"record": "provenance", **_provenance(args, "synth")},
                            sort_keys=True) + "\n")
        for rec in synth.truth_records_json(result):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    positives = sum(1 for pd in result.pair_days if pd.label)
    print(
        f"synth: {len(result.pair_days)} pair-days ({positives} positive) -> {out_dir}"
    )
    return 0


def cmd_rasterize(args) -> int:
    from trajmatch import ingest, localize, raster

    pair_days = ingest.read_pair_days(args.inp)
    spec = raster.LayerSpec(args.layers)
    canvas = raster.CanvasSpec()
    out_dir = Path(args.out)
    records = []

    def do_day(pd):
        recs = []
        day_dir = out_dir / pd.pair_id / pd.local_date.isoformat()
        day_dir.mkdir(parents=True, exist_ok=True)
        for img_a, img_b in raster.render_pair_day(pd, spec, canvas, args.max_gap_ms):
            for img in (img_a, img_b):
                name = raster.image_filename(img.device_id, args.layers, img.layer_index)
                path = day_dir / name
                raster.save_png(img, path)
                recs.append(
                    raster.sidecar_record(img, args.layers, str(path), localize.locate(img))
                )
        return recs

    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        for recs in pool.map(do_day, pair_days):
            records.extend(recs)
    raster.write_sidecar(out_dir / "sidecar.ndjson", records, _provenance(args, "rasterize"))
    print(f"rasterize: {len(records)} images -> {out_dir}")
    return 0


def cmd_train(args) -> int:
    from trajmatch import ingest
    from trajmatch.pipeline import PipelineVariant, run_pipeline_cv
    from trajmatch.siamese import ContrastiveParams, OptimizerConfig, SiameseArchitecture

    pair_days = ingest.read_pair_days(args.inp)
    variant = PipelineVariant(args.variant)
    arch = SiameseArchitecture(input_size=args.input_size)
    cv = run_pipeline_cv(
        pair_days,
        variant,
        num_layers=args.layers,
        contrastive=ContrastiveParams(args.alpha, args.beta, args.margin),
        optimizer=OptimizerConfig(args.epochs, args.batch_size, args.lr, args.momentum),
        arch=arch,
        folds=args.folds,
        seed=args.seed,
    )
    best = cv.train_result.best
    best.model.meta.update(
        {
            "pipeline": {
                "variant": variant.value,
                "num_layers": args.layers,
                "filter_threshold": cv.specs.filter_threshold,
                "crop_pad": cv.specs.crop_pad,
                "canvas": [cv.specs.canvas.width, cv.specs.canvas.height, cv.specs.canvas.margin],
            },
            "training": {
                "fold": best.fold,
                "val_f1": best.metrics.f1,
                "epochs": args.epochs,
                "alpha": args.alpha,
                "beta": args.beta,
                "margin": args.margin,
                "lr": args.lr,
            },
            "provenance": _provenance(args, "train"),
        }
    )
    best.model.save(args.out)
    report = {
        "provenance": _provenance(args, "train"),
        "folds": [
            {
                "fold": f.fold,
                "threshold": f.threshold,
                "val_days": f.val_days,
                "metrics": f.metrics.as_dict(),
            }
            for f in cv.train_result.folds
        ],
        "best_fold": cv.train_result.best_fold,
        "pooled": cv.pooled.as_dict(),
        "pooled_weighted": cv.pooled_weighted.as_dict(),
        "timing": cv.timing,
    }
    if args.report:
        _write_json(args.report, report)
    print(
        f"train: {variant.value}/{args.layers} layers, best fold {best.fold} "
        f"(val F1 {best.metrics.f1:.3f}, threshold {best.threshold:.4g}) -> {args.out}"
    )
    return 0


def cmd_classify(args) -> int:
    from trajmatch import ingest
    from trajmatch.pipeline import (
        PipelineSpecs,
        PipelineVariant,
        classify_day,
        prepare_corpus,
    )
    from trajmatch.raster import CanvasSpec, LayerSpec
    from trajmatch.siamese import SiameseModel

    model = SiameseModel.load(args.model)
    variant = PipelineVariant(args.variant)
    threshold = args.filter_threshold
    if threshold is None:
        threshold = model.meta.get("pipeline", {}).get("filter_threshold")
    if variant.uses_filter and threshold is None:
        print(
            "error: filtering variants need --filter-threshold or a model trained with one",
            file=sys.stderr,
        )
        return 2
    pair_days = ingest.read_pair_days(args.inp)
    meta_canvas = model.meta.get("pipeline", {}).get("canvas")
    canvas = CanvasSpec(*meta_canvas) if meta_canvas else CanvasSpec()
    specs = PipelineSpecs(
        layer_spec=LayerSpec(args.layers),
        canvas=canvas,
        input_size=model.input_size,
        filter_threshold=threshold,
        max_gap_ms=args.max_gap_ms,
    )
    prep = prepare_corpus(pair_days, variant, specs)

    def do_day(idx):
        return classify_day(
            prep.days[idx], variant, model, prep.specs, candidates=prep.candidates[idx]
        )

    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        verdicts = list(pool.map(do_day, range(len(prep.days))))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(
            json.dumps({"record": "provenance", **_provenance(args, "classify")}, sort_keys=True)
            + "\n"
        )
        for v in verdicts:
            fh.write(json.dumps(v.as_record(), sort_keys=True) + "\n")
    positives = sum(1 for v in verdicts if v.decision)
    print(f"classify: {len(verdicts)} days, {positives} positive -> {args.out}")
    return 0


def cmd_baseline_gru(args) -> int:
    from trajmatch import baseline_gru, ingest

    pair_days = ingest.read_pair_days(args.inp)
    instances = baseline_gru.build_sequences(pair_days, grid_period_s=args.grid_period)
    config = baseline_gru.GRUConfig(epochs=args.epochs, patience=args.patience)
    t0 = time.perf_counter()
    result = baseline_gru.gru_train(instances, config, folds=args.folds, seed=args.seed)
    train_seconds = time.perf_counter() - t0
    report = {
        "provenance": _provenance(args, "baseline-gru"),
        "folds": [
            {"fold": f.fold, "epochs_run": f.epochs_run, "val_loss": f.val_loss,
             "metrics": f.metrics.as_dict()}
            for f in result.folds
        ],
        "pooled": result.pooled.as_dict(),
        "pooled_weighted": result.pooled_weighted.as_dict(),
        "timing": {"train_seconds": train_seconds},
    }
    if args.out:
        _write_json(args.out, report)
    print(
        f"baseline-gru: pooled F1 {result.pooled.f1:.3f}, MCC {result.pooled.mcc:.3f}"
        + (f" -> {args.out}" if args.out else "")
    )
    return 0


def cmd_ablation(args) -> int:
    from trajmatch import evaluation, ingest
    from trajmatch.pipeline import PipelineVariant
    from trajmatch.siamese import OptimizerConfig

    pair_days = ingest.read_pair_days(args.inp)
    variants = (
        [PipelineVariant(v) for v in args.variants]
        if args.variants
        else list(PipelineVariant)
    )
    report = evaluation.run_ablation(
        pair_days,
        layer_counts=args.layer_counts,
        variants=variants,
        seed=args.seed,
        optimizer=OptimizerConfig(epochs=args.epochs),
        folds=args.folds,
    )
    report["provenance"] = _provenance(args, "ablation")
    _write_json(args.out, report)
    print(evaluation.format_ablation_table(report))
    print(f"ablation: {len(report['rows'])} rows -> {args.out}")
    return 0


def cmd_routine(args) -> int:
    from trajmatch import ingest, raster, routine
    from trajmatch.siamese import SiameseModel

    pair_days = [pd for pd in ingest.read_pair_days(args.inp) if pd.pair_id == args.pair]
    if not pair_days:
        print(f"error: no days found for pair {args.pair!r}", file=sys.stderr)
        return 2
    model = SiameseModel.load(args.model)
    spec = raster.LayerSpec(args.layers)
    image_pairs = routine.build_pair_routine_images(
        [pd.trace_a for pd in pair_days],
        [pd.trace_b for pd in pair_days],
        spec,
        eps=args.eps,
        min_pts=args.min_pts,
    )
    report = routine.rank_layers(image_pairs, model, args.min_pixels)
    payload = {
        "provenance": _provenance(args, "routine"),
        "pair_id": args.pair,
        "num_days": len(pair_days),
        **report.as_dict(),
    }
    _write_json(args.out, payload)
    if args.png_dir:
        png_dir = Path(args.png_dir)
        png_dir.mkdir(parents=True, exist_ok=True)
        for img_a, img_b in image_pairs:
            for img in (img_a, img_b):
                name = raster.image_filename(img.device_id, args.layers, img.layer_index)
                raster.save_png(img, png_dir / name)
    if args.svg:
        with open(args.svg, "w", encoding="utf-8") as fh:
            fh.write(routine.distance_bar_chart_svg(report, title=f"pair {args.pair}"))
    if report.ranking:
        print(f"routine: most likely co-behavior window is layer {report.ranking[0]}")
    else:
        print("routine: no layer had enough data to rank")
    return 0


def cmd_gradcheck(args) -> int:
    from trajmatch.gradcheck import toy_cnn_gradcheck, toy_gru_gradcheck

    cnn_err = toy_cnn_gradcheck(step=args.step)
    gru_err = toy_gru_gradcheck(step=args.step)
    print(f"gradcheck cnn: max relative error {cnn_err:.3e}")
    print(f"gradcheck gru: max relative error {gru_err:.3e}")
    ok = cnn_err < 1e-4 and gru_err < 1e-4
    print("gradcheck: PASS" if ok else "gradcheck: FAIL")
    return 0 if ok else 1


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajmatch",
        description="Pairwise co-movement detection from time-layered trajectory images",
    )
    parser.add_argument("--version", action="version", version=trajmatch.__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("ingest", help="parse raw locations into pair-day records")
    p.add_argument("--locations", required=True)
    p.add_argument("--roster", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--preset", choices=["benchmark", "disjoint", "routine", "custom"],
                   default="benchmark")
    p.add_argument("--pairs", type=_positive_int, default=50)
    p.add_argument("--days", type=_positive_int, default=10)
    p.add_argument("--co-walk-prob", dest="co_walk_prob", type=float, default=0.35)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rasterize", help="render per-layer trajectory images to PNG")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--layers", type=_positive_int, required=True)
    p.add_argument("--max-gap-ms", dest="max_gap_ms", type=_positive_int, default=None)
    p.add_argument("--workers", type=_positive_int, default=os.cpu_count() or 1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("train", help="cross-validated contrastive training")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--layers", type=_positive_int, required=True)
    p.add_argument("--variant", choices=[v.value for v in _variant_values()], default="entire")
    p.add_argument("--epochs", type=_positive_int, default=50)
    p.add_argument("--batch-size", dest="batch_size", type=_positive_int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--input-size", dest="input_size", type=_positive_int, default=128)
    p.add_argument("--folds", type=_positive_int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="per-day co-movement verdicts")
    p.add_argument("--variant", choices=[v.value for v in _variant_values()], required=True)
    p.add_argument("--layers", type=_positive_int, required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--filter-threshold", dest="filter_threshold", type=float, default=None)
    p.add_argument("--max-gap-ms", dest="max_gap_ms", type=_positive_int, default=None)
    p.add_argument("--workers", type=_positive_int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("baseline-gru", help="recurrent sequence baseline")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epochs", type=_positive_int, default=50)
    p.add_argument("--patience", type=_positive_int, default=5)
    p.add_argument("--folds", type=_positive_int, default=5)
    p.add_argument("--grid-period", dest="grid_period", type=_positive_int, default=60)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_baseline_gru)

    p = sub.add_parser("ablation", help="train/evaluate every variant and layer count")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--layer-counts", dest="layer_counts", type=_layer_list,
                   default=[1, 5, 24, 48])
    p.add_argument("--variants", nargs="*", default=None,
                   choices=[v.value for v in _variant_values()])
    p.add_argument("--epochs", type=_positive_int, default=50)
    p.add_argument("--folds", type=_positive_int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("routine", help="multi-day routine pattern analysis for one pair")
    p.add_argument("--pair", required=True)
    p.add_argument("--layers", type=_positive_int, default=5)
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--png-dir", dest="png_dir", default=None)
    p.add_argument("--svg", default=None)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--min-pts", dest="min_pts", type=_positive_int, default=5)
    p.add_argument("--min-pixels", dest="min_pixels", type=float, default=None)
    p.set_defaults(func=cmd_routine)

    p = sub.add_parser("gradcheck", help="verify analytic gradients on toy models")
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _variant_values():
    from trajmatch.pipeline import PipelineVariant

    return list(PipelineVariant)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrajmatchError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
