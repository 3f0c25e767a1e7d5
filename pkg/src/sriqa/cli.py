"""Command-line front end for the pipeline stages.

Exit codes: 0 success, 1 operational failure, 2 usage error. The
default RNG seed is 0, overridable through the SRIQA_SEED environment
variable; an explicit --seed flag wins over both.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .dataset import BuildPlan, build, read_manifest, split_dataset
from .errors import SriqaError, StateError
from .imaging import load_image
from .metrics import evaluate, feature_distance_report
from .model import ModelConfig, build_model, predict, predict_patches, read_weights_blob
from .selfcheck import format_results, run_gradient_suite, run_selftest
from .service import create_app, finalize_labels, load_scores
from .training import PatchSource, TrainConfig, load_checkpoint, train


def env_seed() -> int:
    return int(os.environ.get("SRIQA_SEED", "0"))


def load_model_file(path):
    """Accepts either a training checkpoint or a bare weights file."""
    data = Path(path).read_bytes()
    try:
        model, _, _ = load_checkpoint(path)
        return model
    except StateError as checkpoint_error:
        model, consumed = read_weights_blob(data)
        if consumed != len(data):
            raise checkpoint_error
        return model


def cmd_build_dataset(args) -> int:
    plan = BuildPlan.from_json(Path(args.plan).read_text(encoding="utf-8"))
    result = build(plan, args.out)
    print(f"{len(result.records)} records, {result.files_written} new files "
          f"-> {result.manifest_path}")
    for f in result.failures:
        print(f"failed: {f.content_id} {f.sr_method} f{f.factor:g}: {f.message}",
              file=sys.stderr)
    return 1 if result.failures else 0


def cmd_rate(args) -> int:
    import uvicorn

    app = create_app(args.manifest, seed=args.seed, ui_dir=args.ui,
                     expected_subjects=args.subjects)
    print(f"rating service on http://127.0.0.1:{args.port}/ "
          f"(journal next to the manifest)")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_label(args) -> int:
    manifest = Path(args.manifest)
    records = read_manifest(manifest)
    panel = load_scores(args.scores)
    out = Path(args.out) if args.out else manifest.parent / f"{manifest.stem}.labeled.jsonl"
    curves, rejected = finalize_labels(records, panel, out)
    print(f"labeled manifest -> {out}")
    if rejected:
        print(f"rejected subjects: {', '.join(rejected)}")
    for group in sorted(curves):
        print(f"  {group}: b = {curves[group].b:.6f}")
    return 0


def cmd_train(args) -> int:
    spec = json.loads(Path(args.config).read_text(encoding="utf-8"))
    model_kwargs = dict(spec.get("model", {}))
    if "head_units" in model_kwargs:
        model_kwargs["head_units"] = tuple(model_kwargs["head_units"])
    train_kwargs = dict(spec.get("train", {}))
    train_kwargs.setdefault("seed", args.seed)
    cfg = TrainConfig(**train_kwargs)

    manifest = Path(args.manifest)
    records = read_manifest(manifest)
    ratio = spec.get("split_ratio")
    if ratio is not None:
        train_recs, eval_recs = split_dataset(records, float(ratio), seed=cfg.seed)
    else:
        train_recs, eval_recs = records, ()

    if args.resume:
        model, state, _ = load_checkpoint(args.resume)
    else:
        model, state = build_model(ModelConfig(**model_kwargs), seed=cfg.seed), None
    patches = PatchSource(manifest.parent)
    model, log = train(model, train_recs, cfg, patches, eval_records=eval_recs,
                       checkpoint_path=args.out, state=state)
    print(f"{len(log.losses)} steps, final loss {log.losses[-1]:.6f}"
          if log.losses else "no steps run")
    if log.evals:
        last = log.evals[-1]
        print(f"eval at step {last['step']}: plcc {last['plcc']:.4f} "
              f"srcc {last['srcc']:.4f} over {last['n']} held-out records")
    print(f"checkpoint -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    model = load_model_file(args.model)
    if model.config.use_lr_reference and args.lr is None:
        print("error: this model scores against a reduced reference; "
              "pass --lr with the low-resolution image it should compare to",
              file=sys.stderr)
        return 1
    lr = load_image(args.lr) if args.lr else None
    score = predict(model, load_image(args.hr), lr)
    print(f"{score:.6f}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = Path(args.manifest)
    records = read_manifest(manifest)
    unlabeled = [r.sample_id for r in records if r.imos is None]
    if unlabeled:
        print(f"error: manifest has unlabeled records ({unlabeled[0]}, ...)",
              file=sys.stderr)
        return 1
    model = load_model_file(args.model)
    patches = PatchSource(manifest.parent)
    need_lr = model.config.use_lr_reference
    preds = [predict_patches(model, *patches(rec, need_lr=need_lr))
             for rec in records]
    group_by = {"class": "content_class", "content": "content_id"}[args.group_by]
    report = evaluate(records, preds, group_by=group_by)
    print(report.to_json() if args.json else report.to_table())
    if args.distances:
        rep = feature_distance_report(model, records, manifest.parent)
        print(f"norm(F_H - F_L) vs imos SRCC: {rep.norm_imos_srcc:.4f}")
        if rep.pristine_closer_share is not None:
            print(f"pristine reference closer for "
                  f"{100 * rep.pristine_closer_share:.1f}% of late iterations")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_suite(seed=args.seed)
    for line in format_results(results):
        print(line)
    worst = max(r.value for r in results if r.value is not None)
    print(f"max relative error: {worst:.3g}")
    return 0 if all(r.ok for r in results) else 1


def cmd_selftest(args) -> int:
    results = run_selftest(seed=args.seed)
    for line in format_results(results):
        print(line)
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sriqa",
        description="dataset building, quality labeling, and model training "
                    "for super-resolved image quality assessment")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="run the degradation loop over a plan")
    p.add_argument("--plan", required=True, help="plan json file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("rate", help="serve rating sessions over http")
    p.add_argument("--manifest", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--subjects", type=int, default=None,
                   help="expected panel size, shown in progress")
    p.add_argument("--ui", default=None, help="directory with built ui assets")
    p.add_argument("--seed", type=int, default=env_seed())
    p.set_defaults(func=cmd_rate)

    p = sub.add_parser("label", help="fit decay curves from a scores file")
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="labeled manifest path")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train a model on a labeled manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True, help="json with model/train sections")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--seed", type=int, default=env_seed())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score one image")
    p.add_argument("--model", required=True, help="checkpoint or weights file")
    p.add_argument("--hr", required=True, help="image to score")
    p.add_argument("--lr", default=None, help="low-resolution reference")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="correlation report on a labeled manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--group-by", choices=("class", "content"), default="class")
    p.add_argument("--json", action="store_true")
    p.add_argument("--distances", action="store_true",
                   help="also report feature-space distances")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=env_seed())
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="oracle and gradient suites")
    p.add_argument("--seed", type=int, default=env_seed())
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage/help
        return int(e.code or 0)
    try:
        return args.func(args)
    except SriqaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
