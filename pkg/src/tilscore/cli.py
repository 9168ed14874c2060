"""Command-line pipeline: tile, synth, train, predict, evaluate, survival, heatmap.

Every run validates its inputs up front, writes a `run_config.json` echo of
the effective configuration into the output directory, and is byte-for-byte
reproducible for a fixed seed with workers=1.  Exit codes: 0 success,
2 usage/validation error, 3 numeric non-convergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, bagio, concord, foreground, milnet, pnm, survstats
from .folds import (
    Ensemble,
    FoldError,
    FoldPlan,
    ensemble_predict,
    leave_one_cohort_out,
    load_ensemble,
    save_ensemble,
    split_by_group,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NONCONVERGENCE = 3


class CliError(ValueError):
    """Validation failure surfaced as exit code 2."""


def _echo_config(out_dir: Path, command: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    payload = {"command": command, "version": __version__}
    for key, val in sorted(vars(args).items()):
        if key == "func":
            continue
        payload[key] = str(val) if isinstance(val, Path) else val
    if extra:
        payload.update(extra)
    with open(out_dir / "run_config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config_overrides(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise CliError("--config must hold a JSON object")
    return data


def _hyper_from(args: argparse.Namespace, overrides: dict) -> milnet.HyperParams:
    hyper = milnet.HyperParams(**overrides.get("hyper", {}))
    for flag, attr in (("lr", "lr"), ("weight_decay", "weight_decay"),
                       ("batch_size", "batch_size"), ("max_epochs", "max_epochs"),
                       ("patience", "patience"), ("enc_out", "enc_out"),
                       ("attn_hidden", "attn_hidden")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(hyper, attr, val)
    return hyper


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# tile
# ---------------------------------------------------------------------------


def cmd_tile(args) -> int:
    image = Path(args.image)
    pixels = pnm.read_ppm(image)
    mpp = args.mpp if args.mpp is not None else pnm.read_mpp_sidecar(image)
    if mpp is None:
        raise CliError(f"no --mpp given and no sidecar {image}.mpp found")
    slide = foreground.RasterSlide(slide_id=image.stem, pixels=pixels, mpp=float(mpp))
    overrides = _load_config_overrides(args.config)
    params = foreground.FesiParams(**overrides.get("fesi", {}))
    mask = foreground.compute_foreground(slide, params)
    grid = foreground.grid_tiles(slide.width_px, slide.height_px, slide.mpp,
                                 args.tile_size, args.target_mpp)
    grid = foreground.filter_tiles(grid, mask)
    out = _out_dir(args)
    mask.to_pgm(out / "mask.pgm")
    foreground.write_manifest(grid, out / "tiles.tsv")
    _echo_config(out, "tile", args, {"mpp": float(mpp), "n_tiles": grid.n_tiles,
                                     "n_kept": int(grid.kept.sum())})
    print(f"{grid.kept.sum()} of {grid.n_tiles} tiles kept -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    with open(args.config_file) as fh:
        raw = json.load(fh)
    try:
        cfg = bagio.SynthConfig(**raw)
    except TypeError as exc:
        raise CliError(f"bad synth config: {exc}") from exc
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    bags, records = bagio.synth_cohort(cfg)
    out = _out_dir(args)
    bag_dir = out / "bags"
    bag_dir.mkdir(exist_ok=True)
    for bag in bags:
        bagio.write_bag(bag, bag_dir / f"{bag.slide_id}.bag")
    bagio.write_clinical(records, out / "clinical.csv")
    _echo_config(out, "synth", args, {"effective_config": dataclasses.asdict(cfg)})
    print(f"{len(bags)} bags -> {bag_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_bag_dir(bag_dir: Path, expect_dim: int | None = None) -> dict[str, bagio.FeatureBag]:
    paths = sorted(bag_dir.glob("*.bag"))
    if not paths:
        raise CliError(f"no .bag files in {bag_dir}")
    bags = {}
    for p in paths:
        bag = bagio.read_bag(p, expect_dim=expect_dim)
        bags[bag.slide_id] = bag
    return bags


def _parse_plan(spec: str):
    if spec == "loco":
        return ("loco", None)
    if spec.startswith("centre:"):
        k = int(spec.split(":", 1)[1])
        if k < 2:
            raise CliError("centre k-fold needs k >= 2")
        return ("centre", k)
    raise CliError(f"unknown plan {spec!r}; use 'centre:<k>' or 'loco'")


def cmd_train(args) -> int:
    records = bagio.load_clinical(args.clinical)
    bags_by_id = _load_bag_dir(Path(args.bags))
    records = [r for r in records if r.slide_id in bags_by_id]
    if not records:
        raise CliError("no overlap between clinical slide_ids and bag files")
    kind, k = _parse_plan(args.plan)
    if kind == "loco":
        plan = leave_one_cohort_out(records)
    else:
        plan = split_by_group(records, "centre", k, seed=args.seed)
    plan.validate_groups(records)

    ordered = sorted(records, key=lambda r: r.slide_id)
    bags = [bags_by_id[r.slide_id] for r in ordered]
    labels = np.array([r.til_score_pct for r in ordered]) / 100.0
    fold_of = np.array([plan.fold_of(r.slide_id) for r in ordered])
    hyper = _hyper_from(args, _load_config_overrides(args.config))

    def run_fold(fold: int):
        val_idx = np.flatnonzero(fold_of == fold)
        train_idx = np.flatnonzero(fold_of != fold)
        result = milnet.train(bags, labels, train_idx, val_idx, hyper, seed=args.seed + fold)
        r = concord.pearson(result.val_preds, labels[val_idx])
        return fold, result, r, val_idx.size, train_idx.size

    folds = list(range(plan.k))
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            outcomes = list(pool.map(run_fold, folds))
    else:
        outcomes = [run_fold(f) for f in folds]
    outcomes.sort(key=lambda t: t[0])

    out = _out_dir(args)
    plan.to_csv(out / "fold_plan.csv")
    members = [res.params for _, res, _, _, _ in outcomes]
    champions = [
        {"fold": fold, "checkpoint": f"fold{fold:03d}.ckpt", "best_epoch": res.best_epoch,
         "val_explained_variance": res.best_val_ev, "val_pearson": r,
         "n_train": n_train, "n_val": n_val}
        for fold, res, r, n_val, n_train in outcomes
    ]
    save_ensemble(Ensemble(members=members, hyper=hyper), out,
                  extra={"plan": args.plan, "champions": champions})
    history = {
        str(fold): [dataclasses.asdict(e) for e in res.history]
        for fold, res, _, _, _ in outcomes
    }
    with open(out / "history.json", "w") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echo_config(out, "train", args, {"hyper": dataclasses.asdict(hyper), "k": plan.k})
    for c in champions:
        print(f"fold {c['fold']}: epoch {c['best_epoch']} "
              f"val_ev {c['val_explained_variance']:.4f} val_r {c['val_pearson']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def cmd_predict(args) -> int:
    ensemble = load_ensemble(args.model)
    bags_by_id = _load_bag_dir(Path(args.bags), expect_dim=ensemble.members[0].dim)
    slide_ids = sorted(bags_by_id)

    def score(sid: str) -> tuple[str, float]:
        return sid, ensemble_predict(ensemble, bags_by_id[sid])

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            pairs = list(pool.map(score, slide_ids))
    else:
        pairs = [score(sid) for sid in slide_ids]
    out = _out_dir(args)
    bagio.write_predictions(pairs, out / "predictions.csv")
    _echo_config(out, "predict", args, {"n_slides": len(pairs),
                                        "n_members": len(ensemble.members)})
    print(f"{len(pairs)} predictions -> {out / 'predictions.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _join_predictions(pred_path, records):
    preds = bagio.read_predictions(pred_path)
    rows = [(r, preds[r.slide_id]) for r in records if r.slide_id in preds]
    if not rows:
        raise CliError("no slide_ids shared between predictions and clinical table")
    return rows


def cmd_evaluate(args) -> int:
    records = bagio.load_clinical(args.clinical)
    rows = _join_predictions(args.predictions, records)
    preds = np.array([p for _, p in rows])
    labels = np.array([r.til_score_pct for r, _ in rows])
    cutoffs = [float(c) for c in args.cutoffs.split(",")]
    report = concord.evaluate(preds, labels, cutoffs)
    curve = concord.calibration(preds, labels)
    out = _out_dir(args)
    report.to_json(out / "metrics.json")
    curve.to_csv(out / "calibration.csv")
    _echo_config(out, "evaluate", args, {"n": report.n})
    summary = ", ".join(
        f"{k}={v:.4f}" if v is not None else f"{k}=NA"
        for k, v in (("pearson", report.pearson), ("spearman", report.spearman),
                     ("ccc", report.ccc), ("mse_pct", report.mse_pct)))
    print(f"n={report.n}: {summary}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# survival
# ---------------------------------------------------------------------------


def _km_rows(curves) -> list[dict]:
    rows = []
    for curve in curves:
        rows.append({"group": curve.group, "t": 0.0, "survival": 1.0, "at_risk": curve.n})
        for t, s, r in zip(curve.times, curve.survival, curve.n_risk):
            rows.append({"group": curve.group, "t": float(t), "survival": float(s),
                         "at_risk": int(r)})
    return rows


def _write_km_csv(path, curves) -> None:
    with open(path, "w") as fh:
        fh.write("group,t,survival,at_risk\n")
        for row in _km_rows(curves):
            fh.write(f"{row['group']},{row['t']:.10g},{row['survival']:.10g},{row['at_risk']}\n")


def _km_split(out, name, times, events, group_ids, summary) -> None:
    curves = survstats.km_curve(times, events, group_ids)
    _write_km_csv(out / f"km_{name}.csv", curves)
    entry = {"three_year_os": {c.group: c.survival_at(36.0) for c in curves},
             "groups": {c.group: c.n for c in curves}}
    if len(curves) > 1 and events.sum() > 0:
        chi2, p = survstats.logrank(times, events, group_ids)
        entry["logrank_chi2"] = chi2
        entry["logrank_p"] = p
    summary[name] = entry


def _fit_block(name, dataset, summary, out_rows):
    fit = survstats.cox_fit(dataset)
    block = {"model": name, "n": int(dataset.times.size), "events": int(dataset.events.sum()),
             "concordance": fit.concordance, "loglik": fit.loglik, "lr_p": fit.lr_p,
             "rows": []}
    for coef in fit.coefs:
        row = {"variable": coef.name, "hr": coef.hr, "ci_low": coef.ci_low,
               "ci_high": coef.ci_high, "p": coef.p, "beta": coef.beta, "se": coef.se}
        block["rows"].append(row)
        out_rows.append({"model": name, **row})
    try:
        ph = survstats.schoenfeld_test(fit, dataset)
        block["schoenfeld"] = {"global_p": ph.global_p,
                               "per_covariate": {k: v[1] for k, v in ph.per_covariate.items()}}
    except survstats.SurvivalError as exc:
        block["schoenfeld"] = {"error": str(exc)}
    summary.append(block)
    return fit


def cmd_survival(args) -> int:
    records = bagio.load_clinical(args.clinical)
    rows = _join_predictions(args.predictions, records)
    usable = [(r, p) for r, p in rows if r.os_months is not None]
    if not usable:
        raise CliError("no subjects with survival data")
    recs = [r for r, _ in usable]
    scores = np.array([p for _, p in usable])
    times = np.array([r.os_months for r in recs])
    events = np.array([r.os_event for r in recs], dtype=np.int64)
    labels_pct = np.array([r.til_score_pct for r in recs])

    norm_min = args.norm_min if args.norm_min is not None else float(scores.min())
    norm_max = args.norm_max if args.norm_max is not None else float(scores.max())
    normed = survstats.minmax_normalize(scores, norm_min, norm_max)

    spec_cfg = _load_config_overrides(args.spec) if args.spec else {}
    cov_specs = [survstats.CovariateSpec(**c) for c in spec_cfg.get("covariates", [])]

    row_dicts = []
    for rec, score_norm in zip(recs, normed):
        d = {"os_months": rec.os_months, "os_event": rec.os_event,
             "model_tils_per_10pct": float(score_norm) * 10.0,
             "pathologist_tils_per_10pct": rec.til_score_pct / 10.0}
        d.update(rec.covariates)
        row_dicts.append(d)

    score_spec = survstats.CovariateSpec("model_tils_per_10pct", kind="numeric")
    path_spec = survstats.CovariateSpec("pathologist_tils_per_10pct", kind="numeric")

    cox_blocks: list[dict] = []
    flat_rows: list[dict] = []
    variants = [
        ("model_univariable", [score_spec]),
        ("pathologist_univariable", [path_spec]),
    ]
    if cov_specs:
        variants += [
            ("model_multivariable", [score_spec] + cov_specs),
            ("pathologist_multivariable", [path_spec] + cov_specs),
            ("no_tils", list(cov_specs)),
        ]
    for name, specs in variants:
        dataset = survstats.build_dataset(row_dicts, specs)
        _fit_block(name, dataset, cox_blocks, flat_rows)

    out = _out_dir(args)
    km_summary: dict = {}
    cutoffs = sorted(float(c) for c in args.cutoffs.split(","))
    edges = [-np.inf] + cutoffs + [np.inf]
    bin_of = np.searchsorted(cutoffs, labels_pct, side="right")
    cut_groups = np.array([_cutoff_label(edges[i], edges[i + 1]) for i in bin_of])
    _km_split(out, "pathologist_cutoffs", times, events, cut_groups, km_summary)
    for name, values in (("pathologist_median", labels_pct), ("model_median", scores)):
        try:
            groups = survstats.median_split(values)
            med = float(np.median(values))
            ids = np.where(groups == 1, f">=median({med:.4g})", f"<median({med:.4g})")
            _km_split(out, name, times, events, ids, km_summary)
        except survstats.DegenerateSplitError as exc:
            km_summary[name] = {"error": str(exc)}

    report = {"n": len(recs), "events": int(events.sum()),
              "normalization": {"min": norm_min, "max": norm_max},
              "cox": cox_blocks, "km": km_summary}
    with open(out / "survival.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "cox_report.csv", "w") as fh:
        fh.write("model,variable,hr,ci_low,ci_high,p\n")
        for row in flat_rows:
            fh.write(f"{row['model']},{row['variable']},{row['hr']:.10g},"
                     f"{row['ci_low']:.10g},{row['ci_high']:.10g},{row['p']:.10g}\n")
    _echo_config(out, "survival", args, {"n": len(recs)})
    for block in cox_blocks:
        tils_rows = [r for r in block["rows"] if r["variable"].endswith("per_10pct")]
        hr_txt = (f"HR {tils_rows[0]['hr']:.3f} [{tils_rows[0]['ci_low']:.3f}-"
                  f"{tils_rows[0]['ci_high']:.3f}]" if tils_rows else "no TILs row")
        print(f"{block['model']}: concordance {block['concordance']:.3f}, {hr_txt}")
    return EXIT_OK


def _cutoff_label(lo: float, hi: float) -> str:
    if lo == -np.inf:
        return f"<{hi:g}"
    if hi == np.inf:
        return f">={lo:g}"
    return f"{lo:g}-{hi:g}"


# ---------------------------------------------------------------------------
# heatmap
# ---------------------------------------------------------------------------


def _infer_step(coords: np.ndarray) -> int | None:
    vals = np.unique(coords)
    return int(np.diff(vals).min()) if vals.size >= 2 else None


def cmd_heatmap(args) -> int:
    ensemble = load_ensemble(args.model)
    if len(ensemble.members) != 1:
        raise CliError("heatmap needs a single checkpoint, not an ensemble")
    params = ensemble.members[0]
    bag = bagio.read_bag(args.bag)
    if bag.dim != params.dim:
        raise CliError(f"bag dim {bag.dim} does not match checkpoint dim {params.dim}")
    trace = milnet.forward(params, bag)

    xs = bag.tile_xy[:, 0].astype(np.int64)
    ys = bag.tile_xy[:, 1].astype(np.int64)
    # the grid pitch per axis; single-row/column bags borrow the other axis
    step_x = _infer_step(xs) or _infer_step(ys) or bag.tile_size_px
    step_y = _infer_step(ys) or step_x
    cols = (xs - xs.min()) // max(step_x, 1)
    rows = (ys - ys.min()) // max(step_y, 1)
    step = step_x
    n_rows, n_cols = int(rows.max()) + 1, int(cols.max()) + 1

    attn_img = np.zeros((n_rows, n_cols), dtype=np.uint8)
    score_img = np.zeros((n_rows, n_cols), dtype=np.uint8)
    attn_rel = trace.attention / trace.attention.max()
    for k in range(bag.n_tiles):
        attn_img[rows[k], cols[k]] = int(round(255.0 * attn_rel[k]))
        score_img[rows[k], cols[k]] = int(round(255.0 * trace.tile_scores[k]))

    out = _out_dir(args)
    pnm.write_pgm(out / "attention.pgm", attn_img)
    pnm.write_pgm(out / "scores.pgm", score_img)
    sidecar = {
        "slide_id": bag.slide_id,
        "prediction": trace.prediction,
        "tile_size_px": bag.tile_size_px,
        "step": step,
        "n_rows": n_rows,
        "n_cols": n_cols,
        "origin": [int(xs.min()), int(ys.min())],
        "tiles": [
            {"x": int(xs[k]), "y": int(ys[k]), "row": int(rows[k]), "col": int(cols[k]),
             "attention": float(trace.attention[k]), "score": float(trace.tile_scores[k])}
            for k in range(bag.n_tiles)
        ],
    }
    with open(out / "heatmap.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echo_config(out, "heatmap", args, {"n_tiles": bag.n_tiles})
    print(f"heatmaps for {bag.slide_id} ({bag.n_tiles} tiles) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilscore",
                                     description="Slide-level TIL scoring pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--config", help="JSON file with parameter overrides")

    p = sub.add_parser("tile", help="foreground mask and tile manifest for one PPM slide")
    p.add_argument("image")
    p.add_argument("--mpp", type=float, help="microns per pixel (else <image>.mpp sidecar)")
    p.add_argument("--tile-size", type=int, default=foreground.TILE_SIZE_PX, dest="tile_size")
    p.add_argument("--target-mpp", type=float, default=foreground.TARGET_MPP, dest="target_mpp")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("synth", help="generate a synthetic cohort from a JSON config")
    p.add_argument("config_file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--config", default=None)

    p = sub.add_parser("train", help="grouped cross-validation training")
    p.add_argument("--bags", required=True)
    p.add_argument("--clinical", required=True)
    p.add_argument("--plan", required=True, help="'centre:<k>' or 'loco'")
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--enc-out", type=int, dest="enc_out")
    p.add_argument("--attn-hidden", type=int, dest="attn_hidden")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score bags with an ensemble or checkpoint")
    p.add_argument("--model", required=True, help="ensemble directory or .ckpt file")
    p.add_argument("--bags", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="concordance and calibration panel")
    p.add_argument("--predictions", required=True)
    p.add_argument("--clinical", required=True)
    p.add_argument("--cutoffs", default="10,30,50,75")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("survival", help="Cox regression and Kaplan-Meier protocol")
    p.add_argument("--predictions", required=True)
    p.add_argument("--clinical", required=True)
    p.add_argument("--spec", help="JSON covariate spec for multivariable models")
    p.add_argument("--norm-min", type=float, dest="norm_min",
                   help="training-set score minimum for normalization")
    p.add_argument("--norm-max", type=float, dest="norm_max")
    p.add_argument("--cutoffs", default="30,75", help="pathologist KM cutoffs")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_survival)

    p = sub.add_parser("heatmap", help="attention and score heatmaps for one bag")
    p.add_argument("--model", required=True)
    p.add_argument("--bag", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except survstats.NonConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (CliError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
