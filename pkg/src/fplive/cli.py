"""Command line entry point.

    fplive gen-data  -c exp.json          # synthetic dataset + manifest
    fplive train     -c exp.json          # checkpoints, epoch logs, summaries
    fplive eval      -c exp.json          # PAD scores + metric report
    fplive extract   -c exp.json          # FPLV features + timing table
    fplive match     -c exp.json          # integrated match + liveness trials
    fplive report    -c exp.json          # ablation and benchmark tables
    fplive config-reference               # every key with its default

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, dump_config, load_config, reference
from .data import DataError, read_manifest, read_pgm, write_features, load_split
from .metrics import (
    ATTACK,
    BONA_FIDE,
    ComparisonTrialSet,
    MissingClassError,
    PadTrialSet,
    auc,
    choose_threshold,
    format_table,
    integrated_rates,
    pad_rates,
    pad_report,
    write_scores,
)
from .nn import atomic_write, load_checkpoint
from .recognizer import PatchGrid, Recognizer, RecognizerConfig, embedding, save_template
from .synthdata import DatasetConfig, build_dataset, build_trials, manifest_hash, write_enroll, write_trials
from .tensor import NumericalError
from .train import LADDER, Dataset, load_ensemble, make_recipe, run_recipe, summary_input_shape

log = logging.getLogger("fplive")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


# ----------------------------------------------------------------- helpers


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, text.encode())


def _write_csv(path: Path, headers, rows) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(headers)
    wr.writerows(rows)
    _write_text(path, buf.getvalue())


def _echo_config(cfg: dict, out: Path) -> None:
    _write_text(out / "config.json", dump_config(cfg))


def _manifest(cfg: dict) -> Path:
    path = Path(cfg["data.root"]) / "manifest.csv"
    if not path.exists():
        raise DataError(f"manifest not found: {path} (run gen-data first)")
    return path


def _model_path(cfg: dict) -> Path:
    if cfg["eval.model"]:
        return Path(cfg["eval.model"])
    run = cfg["train.recipes"][0] + ("-stacked" if cfg["train.stacked"] else "")
    return Path(cfg["out_dir"]) / run / "summary.json"


def load_liveness(path: Path):
    """Load a checkpoint, or the model/ensemble named by a run summary.
    Returns ``(model, display_name)``."""
    if not path.exists():
        raise DataError(f"model not found: {path} (run train first)")
    if path.suffix == ".fplm":
        return load_checkpoint(path), path.stem
    summary = json.loads(path.read_text())
    name = summary["recipe"]["name"]
    if summary.get("members"):
        return load_ensemble(path), name
    ckpts = summary["checkpoints"]
    role = "model" if "model" in ckpts else "peer1"
    return load_checkpoint(path.parent / ckpts[role], input_shape=summary_input_shape(summary)), name


def _pct(x: float) -> float:
    return 100.0 * float(x)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: dict) -> int:
    dcfg = DatasetConfig(
        subjects=cfg["data.subjects"],
        fingers=cfg["data.fingers"],
        scanners=tuple(cfg["data.scanners"]),
        materials=tuple(cfg["data.materials"]),
        live_impressions=cfg["data.live_impressions"],
        spoof_impressions=cfg["data.spoof_impressions"],
        split=cfg["data.split"],
        holdout_scanner=cfg["data.holdout_scanner"],
        val_fraction=cfg["data.val_fraction"],
    )
    root = Path(cfg["data.root"])
    root.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, root)
    rows = build_dataset(dcfg, cfg["seed"], root)
    n_val = sum(r.split == "val" for r in rows)
    log.info("wrote %d images (%d train / %d val) to %s", len(rows), len(rows) - n_val, n_val, root)
    print(f"manifest {root / 'manifest.csv'} sha256 {manifest_hash(root / 'manifest.csv')}")
    return 0


def recipe_from_config(cfg: dict, name: str):
    overrides = {
        "epochs": cfg["train.epochs"],
        "batch_size": cfg["train.batch_size"],
        "lr": cfg["train.lr"],
        "momentum": cfg["train.momentum"],
        "weight_decay": cfg["train.weight_decay"],
        "embed_dim": cfg["train.embed_dim"],
        "seed": cfg["seed"],
        "aug_p": cfg["augment.p"],
        "aug_ops": tuple(cfg["augment.ops"]),
        "aug_ranges": cfg["augment.ranges"],
        "style_p": cfg["style.p"],
        "fmix_alpha": cfg["fmix.alpha"],
        "fmix_decay": cfg["fmix.decay_power"],
        "fmix_p": cfg["fmix.p"],
        "teacher_preset": cfg["distill.teacher_preset"],
        "temperature": cfg["distill.temperature"],
        "alpha": cfg["distill.alpha"],
    }
    if cfg["train.preset"]:
        overrides["preset"] = cfg["train.preset"]
    return make_recipe(name, cfg["train.stacked"], **overrides)


def cmd_train(cfg: dict) -> int:
    recipes = [recipe_from_config(cfg, n) for n in cfg["train.recipes"]]
    data = Dataset.from_manifest(_manifest(cfg))
    out = Path(cfg["out_dir"])
    _echo_config(cfg, out)
    for recipe in recipes:
        art = run_recipe(recipe, data, out)
        print(f"{recipe.name}: val AUC {art.val_auc:.4f} -> {art.out_dir}")
    return 0


def cmd_eval(cfg: dict) -> int:
    model, name = load_liveness(_model_path(cfg))
    images, labels, rows = load_split(_manifest(cfg), cfg["eval.split"])
    scores = model.predict_proba(images)[:, 1].astype(np.float64)
    trials = PadTrialSet(scores, labels.astype(bool))
    tau = choose_threshold(trials, cfg["eval.threshold_policy"], cfg["eval.apcer_target"])
    tuned, fixed = pad_report(trials, tau), pad_report(trials, 0.5)
    tuned.thresholds = {"tuned": tau, "fixed": 0.5}
    out = Path(cfg["out_dir"]) / "eval"
    _echo_config(cfg, out)
    score_rows = [
        {"trial_id": f"i{i:05d}", "type": BONA_FIDE if y else ATTACK, "score": s, "path": r.path}
        for i, (s, y, r) in enumerate(zip(scores, labels, rows))
    ]
    write_scores(out / "scores.csv", score_rows, ["path"])
    metrics = {"model": name, "split": cfg["eval.split"], "tuned": tuned.as_dict(), "fixed": fixed.as_dict()}
    _write_text(out / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    headers = ["Model", "Threshold", "PAD Acc[%]", "BPCER[%]", "APCER[%]", "AUC"]
    table = [
        [name, f"{tau:.4f} ({cfg['eval.threshold_policy']})", _pct(tuned.pad_accuracy), _pct(tuned.bpcer),
         _pct(tuned.apcer), f"{tuned.auc:.4f}"],
        [name, "0.5000 (fixed)", _pct(fixed.pad_accuracy), _pct(fixed.bpcer), _pct(fixed.apcer), f"{fixed.auc:.4f}"],
    ]
    _write_text(out / "report.md", format_table(headers, table))
    _write_csv(out / "report.csv", headers, table)
    print(format_table(headers, table), end="")
    return 0


def cmd_extract(cfg: dict) -> int:
    model, name = load_liveness(_model_path(cfg))
    images, labels, _ = load_split(_manifest(cfg), cfg["extract.split"])
    if cfg["extract.limit"]:
        images, labels = images[: cfg["extract.limit"]], labels[: cfg["extract.limit"]]
    feats = np.stack([embedding(model, img)[0] for img in images])
    out = Path(cfg["out_dir"]) / "extract"
    _echo_config(cfg, out)
    write_features(out / "features.fplv", feats)
    # warm the caches, then time single-image extractions
    for img in images[:5]:
        embedding(model, img)
    times = np.array([embedding(model, images[i % len(images)])[1] for i in range(cfg["extract.warm_runs"])])
    acc = float(np.mean((model.predict_proba(images)[:, 1] >= 0.5) == labels.astype(bool)))
    headers = ["Algorithm", "Overall Time[ms]", "Feat size", "Acc[%]", "Notes"]
    row = [name, float(times.mean()), feats.shape[1], _pct(acc),
           f"median {np.median(times):.2f} ms over {len(times)} warm runs; {len(images)} images"]
    _write_text(out / "bench.md", format_table(headers, [row]))
    _write_csv(out / "bench.csv", headers, [[row[0], f"{row[1]:.4f}", row[2], f"{row[3]:.4f}", row[4]]])
    print(format_table(headers, [row]), end="")
    return 0


def _recognizer_config(cfg: dict) -> RecognizerConfig:
    return RecognizerConfig(
        grid=PatchGrid(cfg["match.grid_rows"], cfg["match.grid_cols"], cfg["match.overlap"]),
        max_keypoints=cfg["match.max_keypoints"],
        nms_radius=cfg["match.nms_radius"],
        ratio=cfg["match.ratio"],
        weights=tuple(float(w) for w in cfg["match.weights"]),
    )


def _template_ids(tid: str) -> tuple[int, int]:
    subject, _, finger = tid[1:].partition("f")
    return int(subject), int(finger)


def _enroll_all(rec: Recognizer, enroll, root: Path) -> dict:
    out = {}
    for tid, path in enroll:
        out[tid] = rec.enroll([read_pgm(root / path)], tid, *_template_ids(tid))
    return out


def cmd_match(cfg: dict) -> int:
    model, name = load_liveness(_model_path(cfg))
    manifest = _manifest(cfg)
    root = manifest.parent
    rows = read_manifest(manifest)
    rec = Recognizer(model, _recognizer_config(cfg))

    # compare-liveness head: genuine vs attack comparisons on the train split
    fit_enroll, fit_trials = build_trials(rows, cfg["match.fit_trials"], cfg["seed"], split="train")
    fit_tmpl = _enroll_all(rec, fit_enroll, root)
    rec.fit_compare_classifier(
        [(read_pgm(root / p), fit_tmpl[t], kind == "genuine") for _, p, t, kind in fit_trials if kind != "impostor"]
    )

    enroll, trials = build_trials(rows, cfg["match.trials_per_type"], cfg["seed"], split=cfg["eval.split"])
    templates = _enroll_all(rec, enroll, root)
    out = Path(cfg["out_dir"]) / "match"
    _echo_config(cfg, out)
    write_enroll(out / "enroll.csv", enroll)
    write_trials(out / "trials.csv", trials)
    for tid, t in templates.items():
        save_template(t, out / "templates" / f"{tid}.fptm")

    results = [(tr, rec.compare(read_pgm(root / tr[1]), templates[tr[2]])) for tr in trials]
    types = np.array([tr[3] for tr, _ in results], dtype=object)
    match = np.array([c.score.match for _, c in results])
    fused = np.array([c.score.fused for _, c in results])
    normal = np.array([c.score.normal_liveness for _, c in results])
    gen, imp, att = types == "genuine", types == "impostor", types == "attack"
    policy = cfg["eval.threshold_policy"]
    match_trials = PadTrialSet(np.r_[match[gen], match[imp]], np.r_[np.ones(gen.sum()), np.zeros(imp.sum())].astype(bool))
    im_trials = PadTrialSet(np.r_[fused[gen], fused[att]], np.r_[np.ones(gen.sum()), np.zeros(att.sum())].astype(bool))
    pad_trials = PadTrialSet(np.r_[normal[gen], normal[att]], np.r_[np.ones(gen.sum()), np.zeros(att.sum())].astype(bool))
    rec.config.tau_match = choose_threshold(match_trials, policy, cfg["eval.apcer_target"])
    rec.config.tau_im = choose_threshold(im_trials, policy, cfg["eval.apcer_target"])
    accepted = (match >= rec.config.tau_match) & (fused >= rec.config.tau_im)
    rates = integrated_rates(ComparisonTrialSet(types, accepted))
    rates.update(
        match_auc=auc(match_trials),
        im_auc=auc(im_trials),
        pad_accuracy=pad_rates(pad_trials, 0.5)[0],
        tau_match=rec.config.tau_match,
        tau_im=rec.config.tau_im,
        n_trials={k: int((types == k).sum()) for k in ("genuine", "impostor", "attack")},
        low_confidence=int(sum(c.low_confidence for _, c in results)),
    )
    rec.save_state(out / "recognizer.json")
    score_rows = [
        {"trial_id": tr[0], "type": tr[3], "score": c.score.fused, "match": c.score.match,
         "compare_liveness": c.score.compare_liveness, "normal_liveness": c.score.normal_liveness,
         "accept": int(a), "low_confidence": int(c.low_confidence)}
        for (tr, c), a in zip(results, accepted)
    ]
    write_scores(out / "scores.csv", score_rows,
                 ["match", "compare_liveness", "normal_liveness", "accept", "low_confidence"])
    _write_text(out / "rates.json", json.dumps(rates, indent=2, sort_keys=True) + "\n")
    headers = ["Method", "PAD Acc[%]", "IM Acc[%]", "FNMR[%]", "IAPAR[%]", "FMR[%]", "Match AUC", "IM AUC"]
    table = [[name, _pct(rates["pad_accuracy"]), _pct(rates["im_accuracy"]), _pct(rates["fnmr"]),
              _pct(rates["iapar"]), _pct(rates.get("fmr_extra", 0.0)), f"{rates['match_auc']:.4f}",
              f"{rates['im_auc']:.4f}"]]
    _write_text(out / "report.md", format_table(headers, table))
    _write_csv(out / "report.csv", headers, table)
    print(format_table(headers, table), end="")
    return 0


def ablation_rows(out_dir: Path) -> list[list]:
    """One row per trained recipe, ladder order, standalone before stacked."""
    rows = []
    for mode, suffix in (("standalone", ""), ("stacked", "-stacked")):
        for name in LADDER:
            path = out_dir / f"{name}{suffix}" / "summary.json"
            if not path.exists():
                continue
            s = json.loads(path.read_text())
            r = s["recipe"]
            techniques = [t for t in ("mutual", "style", "distill") if r[t]]
            if name == "ensemble":
                techniques = ["+".join(m["role"] for m in s["members"])]
            rows.append([name, mode, r["preset"], r["aug"], ", ".join(techniques) or "-", f"{100 * s['val_auc']:.2f}"])
    return rows


def cmd_report(cfg: dict) -> int:
    out_dir = Path(cfg["out_dir"])
    rows = ablation_rows(out_dir)
    if not rows:
        raise DataError(f"no trained recipes under {out_dir}")
    out = out_dir / "report"
    _echo_config(cfg, out)
    headers = ["Recipe", "Mode", "Preset", "Augment", "Techniques", "Val AUC[%]"]
    _write_csv(out / "ablation.csv", headers, rows)
    parts = ["## Validation AUC per recipe\n", format_table(headers, rows)]
    for title, path in (("Feature extraction benchmark", out_dir / "extract" / "bench.md"),
                        ("PAD evaluation", out_dir / "eval" / "report.md"),
                        ("Integrated match + liveness", out_dir / "match" / "report.md")):
        if path.exists():
            parts += [f"\n## {title}\n", path.read_text()]
    text = "".join(parts)
    _write_text(out / "report.md", text)
    print(text, end="")
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic dataset and manifest"),
    "train": (cmd_train, "train the configured recipes"),
    "eval": (cmd_eval, "score a split and write the PAD metric report"),
    "extract": (cmd_extract, "write FPLV features and a timing table"),
    "match": (cmd_match, "run integrated match + liveness trials"),
    "report": (cmd_report, "collect ablation and benchmark tables"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fplive", description="Fingerprint liveness detection toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", help="JSON config with flat dotted keys")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    ref = sub.add_parser("config-reference", help="print every config key with its default")
    ref.add_argument("-o", "--output", help="write to this file instead of stdout")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "config-reference":
        text = reference()
        if args.output:
            _write_text(Path(args.output), text)
        else:
            print(text, end="")
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command][0](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, MissingClassError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # recipe/dataset constructors validate their own fields
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
