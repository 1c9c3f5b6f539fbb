"""Command-line entry point: ``lvvolume <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import evaluate, orchestrate, phantom, pipeline, trainer
from .data_model import list_studies, load_study, validate_study
from .errors import ConfigError, LVError
from .nn import checkpoint
from .preprocess import AugmentParams
from .views import DEFAULT_VIEWS, FUSION_CANDIDATES, ViewRole, fallback_view_set, format_views, parse_views, stack_roles

log = logging.getLogger("lvvolume")


# ---------------------------------------------------------------- helpers

def _settings(args) -> pipeline.PipelineSettings:
    atlas = None
    if getattr(args, "atlas", None):
        from .localize import load_atlas

        atlas = load_atlas(args.atlas)
    return pipeline.PipelineSettings(input_hw=args.input_hw, R=args.R, T=args.T, atlas=atlas)


def _studies(root):
    paths = list_studies(root)
    if not paths:
        raise ConfigError(f"no study directories under {root}")
    return paths


def _train_config(args, target: str, seed: int) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        augment=AugmentParams(args.max_rotation, args.max_shift),
        seed=seed,
        target=target,
    )


def _vgg(args, first_kernel=None) -> dict:
    return {
        "first_kernel_size": first_kernel or args.first_kernel,
        "channel_scale": args.channel_scale,
        "dropout": args.dropout,
    }


def _seeds(text) -> list[int]:
    return [int(s) for s in str(text).split(",") if s.strip()]


def _load_inputs(path, views=None):
    inputs, roles = pipeline.load_inputs(path)
    views = parse_views(views) if views else roles
    missing = [v for v in views if v not in roles]
    if missing:
        raise ConfigError(f"{path} lacks views {format_views(missing)}; rerun preprocess with them")
    return inputs, views


# ---------------------------------------------------------------- commands

def cmd_phantom_gen(args):
    base = phantom.PhantomParams(seed=args.seed, noise_sigma=args.noise, frames=args.frames, sax_positions=args.positions)
    var = phantom.Variation() if args.variation == "default" else phantom.Variation.none()
    params = phantom.dataset_params(args.n, base, var)
    rng = np.random.default_rng([args.seed, 2])
    drop = rng.random(args.n) < args.missing_2ch
    studies = (phantom.generate_study(p, with_2ch=not d) for p, d in zip(params, drop))
    phantom.write_dataset(studies, args.out)
    print(f"wrote {args.n} studies to {args.out}")


def cmd_locate(args):
    settings = _settings(args)
    rows = []
    for path in _studies(args.data):
        study = load_study(path)
        loc = pipeline.localize_study(study, settings)
        c2 = loc.lax_centers.get(ViewRole.CH2, (np.nan, np.nan))
        c4 = loc.lax_centers.get(ViewRole.CH4, (np.nan, np.nan))
        rows.append([study.id, *loc.roi_center, loc.roi_score, loc.ed, loc.es, *c2, *c4])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["study_id", "roi_row", "roi_col", "score", "ed_frame", "es_frame", "ch2_row", "ch2_col", "ch4_row", "ch4_col"])
        for r in rows:
            w.writerow([r[0]] + [f"{v:.4f}" if isinstance(v, float) else v for v in r[1:]])
    print(f"located {len(rows)} studies -> {out}")


def cmd_preprocess(args):
    settings = _settings(args)
    roles = parse_views(args.views)
    inputs = []
    for path in _studies(args.data):
        study = load_study(path)
        report = validate_study(study)
        if report.fatal:
            raise ConfigError(f"{study.id}: {'; '.join(f.message for f in report.findings)}")
        absent = [r for r in roles if (r is ViewRole.CH2 and study.ch2 is None) or (r is ViewRole.CH4 and study.ch4 is None)]
        if absent:
            if not args.skip_missing:
                raise ConfigError(
                    f"{study.id} lacks {format_views(absent)} (fallback set {format_views(fallback_view_set(study))}); "
                    "use --skip-missing to leave it out"
                )
            log.warning("skipping %s: lacks %s", study.id, format_views(absent))
            continue
        inputs.append(pipeline.prepare_study(study, settings, roles))
    pipeline.save_inputs(inputs, roles, args.out)
    print(f"prepared {len(inputs)} studies ({format_views(roles)}) -> {args.out}")


def cmd_train(args):
    inputs, views = _load_inputs(args.inputs, args.views)
    data = trainer.dataset_from_inputs(inputs, views, args.target)
    tr, va = trainer.split_indices(len(data), args.val_fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for seed in _seeds(args.seeds):
        cfg = _train_config(args, args.target, seed)
        res = trainer.fit(data.subset(tr), data.subset(va), _vgg(args), cfg, history_path=out / f"history_seed{seed}.csv")
        res.best.save(out / f"model_seed{seed}.ckpt")
        summary.append((seed, res.best.epoch, res.best.validation_loss))
        print(f"seed {seed}: best val RMSE {res.best.validation_loss:.3f} ml at epoch {res.best.epoch}")
    (out / "split.json").write_text(
        json.dumps({"train": [data.ids[i] for i in tr], "val": [data.ids[i] for i in va], "views": format_views(views)}, indent=1)
    )


def _ensemble_dir(path):
    models = sorted(Path(path).glob("model_seed*.ckpt"))
    if len(models) != 3:
        raise ConfigError(f"{path} must hold exactly 3 model_seed*.ckpt files, found {len(models)}")
    return [checkpoint.load(m)[0] for m in models]


def cmd_predict(args):
    inputs, views = _load_inputs(args.inputs, args.views)
    preds = {}
    for target, model_dir in (("EDV", args.edv_models), ("ESV", args.esv_models)):
        nets = _ensemble_dir(model_dir)
        phase = "ED" if target == "EDV" else "ES"
        x = np.stack([stack_roles(s.images[phase], views) for s in inputs])
        preds[target] = trainer.predict_ensemble(nets, x)
    evaluate.write_volumes(zip([s.study_id for s in inputs], preds["EDV"], preds["ESV"]), args.out)
    print(f"predicted {len(inputs)} studies -> {args.out}")


def cmd_evaluate(args):
    records = evaluate.records_from_files(args.pred, args.truth)
    report = evaluate.build_report(records)
    evaluate.write_report(report, args.out)
    if args.plot_dir:
        evaluate.write_plot_data(report, args.plot_dir)
    for q in evaluate.QUANTITIES:
        s = report.overall[q]
        print(f"{q}: RMSE {s.rmse * (100 if q == 'EF' else 1):.3f} (n={s.n})")


def cmd_fusion_search(args):
    if args.fixture:
        evaluator = orchestrate.FixtureEvaluator.load(args.fixture)
    elif args.inputs:
        inputs, _ = _load_inputs(args.inputs, FUSION_CANDIDATES)
        cfg = _train_config(args, "EDV", args.seed)
        evaluator = orchestrate.TrainingEvaluator(inputs, _vgg(args), cfg, args.val_fraction, args.seed)
    else:
        raise ConfigError("fusion-search needs --fixture or --inputs")
    top, optimal = orchestrate.pairwise_view_search(evaluator, threads=args.threads)
    best, scored = orchestrate.optimal_set_search(evaluator, optimal, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    orchestrate.write_scores(top, out / "top_pairs.csv")
    orchestrate.write_scores(scored, out / "stage2.csv")
    (out / "result.txt").write_text(f"optimal_set={format_views(optimal)}\nbest={format_views(best.views)}\nmrmse={best.mrmse:.6f}\n")
    print("top pairs: " + ", ".join(str(s) for s in top))
    print(f"optimal set: {format_views(optimal)}")
    print(f"best combination: {best}")


def _read_ids(path):
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def cmd_feedback_init(args):
    state = orchestrate.FeedbackState.initial(_read_ids(args.train_ids), _read_ids(args.test_ids), args.W, args.ratio, args.F)
    orchestrate.write_log(state, args.log)
    print(f"feedback log -> {args.log}: train {len(state.train_ids)}, test {len(state.test_ids)}")


def cmd_feedback_step(args):
    state = orchestrate.replay(args.log)
    cases = []
    if args.cases:
        with Path(args.cases).open(newline="") as fh:
            for row in csv.DictReader(fh):
                cases.append((row["case_id"], float(row["truth_ml"]), float(row["pred_ml"])))
    if args.case is not None:
        cases.append((args.case, args.truth, args.pred))
    if not cases and not args.retrained:
        raise ConfigError("feedback step needs --case/--truth/--pred, --cases or --retrained")
    if args.case is not None and (args.truth is None or args.pred is None):
        raise ConfigError("--case needs --truth and --pred")
    n0 = len(state.history)
    if args.retrained:
        state = orchestrate.mark_retrained(state)
    for case in cases:
        state = orchestrate.feedback_step(state, case)
    orchestrate.append_events(state, state.history[n0:], args.log)
    _print_status(state)


def cmd_feedback_status(args):
    _print_status(orchestrate.replay(args.log))


def _print_status(state):
    print(
        f"train {len(state.train_ids)} test {len(state.test_ids)} streak {state.good_streak} "
        f"retrain {'yes' if state.retrain else 'no'} converged {'yes' if orchestrate.feedback_converged(state) else 'no'}"
    )


def cmd_sweep_kernel(args):
    inputs, views = _load_inputs(args.inputs, args.views)
    tr, va = trainer.split_indices(len(inputs), args.val_fraction, args.seed)
    rows = []
    for k in _seeds(args.kernels):
        res = []
        for target in ("EDV", "ESV"):
            data = trainer.dataset_from_inputs(inputs, views, target)
            r = trainer.fit(data.subset(tr), data.subset(va), _vgg(args, k), _train_config(args, target, args.seed))
            res.append(r.best.validation_loss)
        rows.append((k, res[0], res[1], evaluate.mrmse(*res)))
        print(f"kernel {k}: EDV {res[0]:.3f} ESV {res[1]:.3f} MRMSE {rows[-1][3]:.3f} ml")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("kernel,rmse_edv,rmse_esv,mrmse\n" + "".join(f"{k},{a:.6f},{b:.6f},{m:.6f}\n" for k, a, b, m in rows))


# ---------------------------------------------------------------- parser

def _add_pipeline(p):
    p.add_argument("--input-hw", type=int, default=224, help="network input side, pixels (multiple of 32; default 224)")
    p.add_argument("--R", type=int, default=6, help="atlas scale steps, 52..72 px (default 6)")
    p.add_argument("--T", type=int, default=12, help="atlas rotation steps over 360 degrees (default 12)")
    p.add_argument("--atlas", help="atlas PNG (default: packaged atlas)")


def _add_training(p, epochs=60, batch=16, lr=3e-4):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=epochs, help=f"training epochs (default {epochs})")
    g.add_argument("--batch-size", type=int, default=batch, help=f"minibatch size, samples (default {batch})")
    g.add_argument("--lr", type=float, default=lr, help=f"Adam learning rate (default {lr:g})")
    g.add_argument("--channel-scale", type=float, default=1 / 16, help="width multiplier in (0, 1] (default 1/16)")
    g.add_argument("--first-kernel", type=int, default=19, help="first conv kernel side, pixels (default 19)")
    g.add_argument("--dropout", type=float, default=0.25, help="dropout rate before the output layer (default 0.25)")
    g.add_argument("--max-rotation", type=float, default=15.0, help="augmentation rotation bound, degrees (default 15)")
    g.add_argument("--max-shift", type=int, default=8, help="augmentation shift bound, pixels (default 8)")
    g.add_argument("--val-fraction", type=float, default=0.2, help="validation share of studies (default 0.2)")


def _add_globals(p, default):
    # accepted before or after the subcommand; leaf copies only set what is given
    kw = {} if default else {"default": argparse.SUPPRESS}
    p.add_argument("--seed", type=int, help="random seed (default 0)", **({"default": 0} | kw))
    p.add_argument("--threads", type=int, help="worker/BLAS thread cap; results do not depend on it (default 1)", **({"default": 1} | kw))
    p.add_argument("--config", help="JSON file of option defaults; command-line flags win", **({"default": None} | kw))
    p.add_argument("-v", "--verbose", action="store_true", help="log progress", **({"default": False} | kw))


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="lvvolume", description="Direct LV volume estimation from cardiac MR studies.")
    _add_globals(parser, True)
    sub = parser.add_subparsers(dest="command", required=True)
    leaves = {}

    ph = sub.add_parser("phantom", help="synthetic studies").add_subparsers(dest="action", required=True)
    p = ph.add_parser("gen", help="generate phantom study directories plus truth.json / truth.csv")
    p.add_argument("--n", type=int, required=True, help="number of studies")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--noise", type=float, default=20.0, help="Gaussian noise SD, intensity units (blood pool = 1000)")
    p.add_argument("--frames", type=int, default=20, help="frames per cardiac cycle (default 20)")
    p.add_argument("--positions", type=int, default=10, help="SAX positions per study (>= 6, default 10)")
    p.add_argument("--variation", choices=["default", "none"], default="default", help="per-study parameter jitter")
    p.add_argument("--missing-2ch", type=float, default=0.0, help="fraction of studies written without 2CH (default 0)")
    p.set_defaults(func=cmd_phantom_gen)
    leaves["phantom gen"] = p

    p = sub.add_parser("locate", help="coarse + atlas localization and ED/ES selection per study")
    p.add_argument("--data", required=True, help="directory of study folders")
    p.add_argument("--out", required=True, help="output CSV (pixel coordinates on the 1.4 mm grid)")
    _add_pipeline(p)
    p.set_defaults(func=cmd_locate)
    leaves["locate"] = p

    p = sub.add_parser("preprocess", help="ROI crops per view at ED and ES, stored as .npz")
    p.add_argument("--data", required=True, help="directory of study folders")
    p.add_argument("--views", default=format_views(DEFAULT_VIEWS), help="views, e.g. top,mid,2ch (default Top+Mid+2CH)")
    p.add_argument("--out", required=True, help="output .npz")
    p.add_argument("--skip-missing", action="store_true", help="leave out studies lacking a requested view")
    _add_pipeline(p)
    p.set_defaults(func=cmd_preprocess)
    leaves["preprocess"] = p

    p = sub.add_parser("train", help="train one model per seed for EDV or ESV")
    p.add_argument("--inputs", required=True, help=".npz from preprocess")
    p.add_argument("--target", choices=["EDV", "ESV"], default="EDV", help="volume to regress (ml)")
    p.add_argument("--views", help="subset of the prepared views (default: all)")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated model seeds (default 0,1,2)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and loss histories")
    _add_training(p)
    p.set_defaults(func=cmd_train)
    leaves["train"] = p

    p = sub.add_parser("predict", help="three-model ensemble predictions, study_id,edv_ml,esv_ml")
    p.add_argument("--inputs", required=True, help=".npz from preprocess")
    p.add_argument("--views", help="views the models were trained on (default: all prepared)")
    p.add_argument("--edv-models", required=True, help="directory with 3 EDV model_seed*.ckpt")
    p.add_argument("--esv-models", required=True, help="directory with 3 ESV model_seed*.ckpt")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_predict)
    leaves["predict"] = p

    p = sub.add_parser("evaluate", help="RMSE/AESD/R/Bland-Altman report (volumes ml, EF percent)")
    p.add_argument("--pred", required=True, help="CSV study_id,edv_ml,esv_ml")
    p.add_argument("--truth", required=True, help="CSV study_id,edv_ml,esv_ml[,age_years]")
    p.add_argument("--out", default="report.csv", help="report CSV (default report.csv)")
    p.add_argument("--plot-dir", help="directory for scatter / Bland-Altman plot data")
    p.set_defaults(func=cmd_evaluate)
    leaves["evaluate"] = p

    p = sub.add_parser("fusion-search", help="two-stage view-combination search")
    p.add_argument("--fixture", help="CSV views,rmse_edv,rmse_esv (ml) used as the evaluator")
    p.add_argument("--inputs", help=".npz with all candidate views; trains a model pair per combination")
    p.add_argument("--out", required=True, help="output directory")
    _add_training(p, epochs=20)
    p.set_defaults(func=cmd_fusion_search)
    leaves["fusion-search"] = p

    fb = sub.add_parser("feedback", help="feedback loop state (event log)").add_subparsers(dest="action", required=True)
    p = fb.add_parser("init", help="start an event log")
    p.add_argument("--log", required=True, help="event log path")
    p.add_argument("--train-ids", required=True, help="file with one training id per line")
    p.add_argument("--test-ids", required=True, help="file with one test id per line")
    p.add_argument("--W", type=float, default=10.0, help="acceptable absolute error, ml (default 10)")
    p.add_argument("--ratio", type=float, default=0.1, help="train/test ratio target R (default 0.1)")
    p.add_argument("--F", type=int, default=1000, help="good-feedback streak target (default 1000)")
    p.set_defaults(func=cmd_feedback_init)
    leaves["feedback init"] = p
    p = fb.add_parser("step", help="apply expert feedback on one or more test cases")
    p.add_argument("--log", required=True, help="event log path")
    p.add_argument("--case", help="case id")
    p.add_argument("--truth", type=float, help="expert volume, ml")
    p.add_argument("--pred", type=float, help="predicted volume, ml")
    p.add_argument("--cases", help="CSV case_id,truth_ml,pred_ml")
    p.add_argument("--retrained", action="store_true", help="record that the model was retrained on the current train set")
    p.set_defaults(func=cmd_feedback_step)
    leaves["feedback step"] = p
    p = fb.add_parser("status", help="replay the log and print the state")
    p.add_argument("--log", required=True, help="event log path")
    p.set_defaults(func=cmd_feedback_status)
    leaves["feedback status"] = p

    p = sub.add_parser("sweep-kernel", help="validation MRMSE over first-layer kernel sizes")
    p.add_argument("--inputs", required=True, help=".npz from preprocess")
    p.add_argument("--views", help="views to use (default: all prepared)")
    p.add_argument("--kernels", default="3,7,11,15,19,23", help="odd kernel sides, pixels (default 3,7,11,15,19,23)")
    p.add_argument("--out", required=True, help="output CSV kernel,rmse_edv,rmse_esv,mrmse")
    _add_training(p, epochs=20)
    p.set_defaults(func=cmd_sweep_kernel)
    leaves["sweep-kernel"] = p
    for leaf in leaves.values():
        _add_globals(leaf, False)
    return parser, leaves


def parse_args(argv=None):
    parser, leaves = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        key = args.command + (f" {args.action}" if getattr(args, "action", None) else "")
        leaf = leaves[key]
        known = {a.dest for a in leaf._actions} | {a.dest for a in parser._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        # config values become defaults, so explicit flags still win
        parser.set_defaults(**{k: v for k, v in cfg.items() if k in {a.dest for a in parser._actions}})
        leaf.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except LVError as exc:
        print(f"lvvolume: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("lvvolume: error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(limits=args.threads)
    except ImportError:  # pragma: no cover
        limits = nullcontext()
    try:
        with limits:
            args.func(args)
    except (LVError, OSError, KeyError, ValueError) as exc:
        print(f"lvvolume: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
