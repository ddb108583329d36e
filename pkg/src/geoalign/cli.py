"""``geoalign`` command-line entry point.

Settings resolve as command-line flag, then the JSON ``--config`` file, then
the built-in default.  A config file holds flat keys shared by all commands
and optional per-command sections, e.g. ``{"seed": 3, "train": {"lr": 2e-3}}``.

Exit codes: 0 success, 1 validation failure, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .data.hardneg import Lexicons, PhraseGrammarError, add_hard_negatives
from .data.imageio import ImageDecodeError, read_pixels, to_chw
from .data.leakage import LeakageConfig, leakage_check
from .data.quality import QualityThresholds, calibrate_thresholds, quality_filter
from .data.records import RecordError, SampleRecord, load_pixels, read_jsonl, write_jsonl
from .data.synth import render, synth_corpus
from .gradcheck import LOSS_NAMES, format_table, loss_gradcheck
from .losses import Stage
from .regions import BoxError
from .training import (
    PRESETS,
    Model,
    NumericalError,
    TrainConfig,
    build_vocab,
    load_model,
    prepare_stage_model,
    run_stage,
    save_model,
)

log = logging.getLogger("geoalign")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2
DATASET = "dataset.jsonl"
CHECKPOINT = "checkpoint.gacp"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; 2 is reserved for numerical failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# dataset helpers


def _read_split(path: str, split: str | None = None) -> list[SampleRecord]:
    records = read_jsonl(path)
    return records if split is None else [r for r in records if r.split == split]


def _load_images(records, base_dir: str) -> np.ndarray:
    """Float ``(N, 3, H, W)`` stack; raises with the record id on decode errors."""
    out = []
    for r in records:
        try:
            out.append(to_chw(load_pixels(r, base_dir)))
        except (OSError, ImageDecodeError) as exc:
            raise RecordError(f"image unreadable ({exc})", record_id=r.id) from exc
    return np.stack(out) if out else np.zeros((0, 3, 64, 64))


def _rebase(records, src_dir: str, dst_dir: str):
    """Re-point relative image paths so they resolve from ``dst_dir``."""
    for r in records:
        if isinstance(r.image, str) and not os.path.isabs(r.image):
            r.image = os.path.relpath(os.path.join(src_dir, r.image), dst_dir).replace(os.sep, "/")
    return records


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _dataset_path(path: str) -> str:
    return os.path.join(path, DATASET) if os.path.isdir(path) else path


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    records = synth_corpus(args.n, args.seed, args.split_ratio, args.out)
    n_train = sum(r.split == "train" for r in records)
    print(f"wrote {len(records)} scenes ({n_train} train, {len(records) - n_train} test) to {args.out}")
    return EXIT_OK


def cmd_filter(args) -> int:
    src = _dataset_path(args.input)
    base = os.path.dirname(src)
    records = read_jsonl(src)
    th = QualityThresholds(args.brightness_min, args.texture_min, args.max_region_fraction)
    kept, reports = [], []
    for r in records:
        try:
            pixels = load_pixels(r, base)
        except (OSError, ImageDecodeError):
            pixels = None
        rep = quality_filter(pixels, [g.bbox for g in r.regions], th, r.id)
        reports.append(rep.to_dict())
        if rep.passed:
            kept.append(r)
    os.makedirs(args.out, exist_ok=True)
    write_jsonl(_rebase(kept, base, args.out), os.path.join(args.out, DATASET))
    report_path = args.report or os.path.join(args.out, "quality_report.json")
    _write_json(report_path, {"thresholds": th.__dict__, "n_in": len(records), "n_kept": len(kept),
                              "records": reports})
    print(f"kept {len(kept)}/{len(records)} records; report at {report_path}")
    return EXIT_OK


def cmd_hardneg(args) -> int:
    if args.q < 2:
        raise UsageError(f"--q must be at least 2, got {args.q}")
    src = _dataset_path(args.input)
    records = read_jsonl(src)
    try:
        out = add_hard_negatives(records, args.q, args.seed)
    except PhraseGrammarError as exc:
        raise RecordError(str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)
    write_jsonl(_rebase(out, os.path.dirname(src), args.out), os.path.join(args.out, DATASET))
    print(f"attached {args.q - 1} negatives per region to {len(out)} records")
    return EXIT_OK


def cmd_leakcheck(args) -> int:
    train_src, test_src = _dataset_path(args.train), _dataset_path(args.test)
    train = _read_split(train_src, "train")
    test = _read_split(test_src, "test")
    if not train or not test:
        raise UsageError("leakcheck needs train-split records in --train and test-split records in --test")
    tr_px = [load_pixels(r, os.path.dirname(train_src)) for r in train]
    te_px = [load_pixels(r, os.path.dirname(test_src)) for r in test]
    semantic = None
    if args.semantic_ckpt:
        from .evaluation import _unit, embed_texts

        model, _, _ = load_model(args.semantic_ckpt)
        a = _unit(embed_texts(model, [r.detail_caption for r in test]))
        b = _unit(embed_texts(model, [r.detail_caption for r in train]))
        semantic = a @ b.T
    report = leakage_check(train, test, tr_px, te_px, LeakageConfig(args.threshold, args.ngram), semantic)
    _write_json(args.report, report.to_dict())
    n_dup = len(report.exact_duplicate_pairs)
    print(f"{n_dup} exact duplicate pairs, {len(report.lexical_pairs_over_threshold)} lexical pairs "
          f">= {args.threshold}; report at {args.report}")
    return EXIT_OK if n_dup == 0 else EXIT_INVALID


def cmd_train(args) -> int:
    stage = Stage.parse(args.stage)
    src = _dataset_path(args.data)
    records = _read_split(src, "train")
    if not records:
        raise UsageError(f"no train-split records in {src}")
    images = _load_images(records, os.path.dirname(src))
    overrides = dict(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                     weight_decay=args.weight_decay, warmup_iters=args.warmup,
                     grad_clip_norm=args.grad_clip_norm,
                     max_steps=args.max_steps, seed=args.seed, keep_global=args.keep_global)
    if args.lambdas is not None:
        overrides["lambdas"] = tuple(args.lambdas)
    cfg = TrainConfig.from_preset(args.preset, stage, **overrides)
    if args.no_clip:
        cfg.grad_clip_norm = None
    state = None
    if args.init:
        model, prev_cfg, prev_state = load_model(args.init)
        if args.resume:
            if prev_cfg is None or prev_cfg.stage is not stage or prev_state is None:
                raise UsageError("--resume needs a checkpoint of the same stage with optimizer state")
            state = prev_state
        else:
            model = prepare_stage_model(model, stage)
    else:
        if stage is Stage.STAGE_II:
            log.warning("Stage II without --init starts from random weights")
        model = prepare_stage_model(Model.init(build_vocab(records), args.seed), stage)
    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.jsonl")
    with open(metrics_path, "a" if args.resume else "w", encoding="utf-8", newline="\n") as fh:
        model, state, hist = run_stage(cfg, records, images, model, state, log_fh=fh)
    save_model(os.path.join(args.out, CHECKPOINT), model, cfg, state)
    last = hist[-1] if hist else {}
    print(f"{stage.value}: {state.step} steps, final loss {last.get('loss', float('nan')):.4f}; "
          f"checkpoint at {os.path.join(args.out, CHECKPOINT)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import embed_images, hardneg_ranking, region_zero_shot, retrieval_eval

    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    unknown = sorted(set(tasks) - {"retrieval", "regioncls", "hardneg"})
    if unknown:
        raise UsageError(f"unknown --tasks entries {unknown}")
    model, _, _ = load_model(args.ckpt)
    src = _dataset_path(args.data)
    records = _read_split(src, args.split)
    if not records:
        raise UsageError(f"no {args.split}-split records in {src}")
    images = _load_images(records, os.path.dirname(src))
    _, fmaps = embed_images(model, images)
    results = {"n_images": len(records), "split": args.split}
    if "retrieval" in tasks:
        ks = tuple(k for k in (1, 5, 10) if k <= len(records))
        res = retrieval_eval(model, images, [r.detail_caption for r in records], ks)
        results["retrieval"] = {k: v.to_dict() for k, v in res.items()}
    if "regioncls" in tasks:
        results["regioncls"] = region_zero_shot(model, records, images, Lexicons().categories,
                                                fmaps=fmaps).to_dict()
    if "hardneg" in tasks:
        results["hardneg"] = {"success": hardneg_ranking(model, records, images, fmaps=fmaps)}
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "eval.json"), results)
    print(json.dumps(results, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = LOSS_NAMES if args.losses == "all" else tuple(n.strip() for n in args.losses.split(","))
    bad = [n for n in names if n not in LOSS_NAMES]
    if bad:
        raise UsageError(f"unknown losses {bad}; choose from all, {', '.join(LOSS_NAMES)}")
    rows = loss_gradcheck(names, args.trials, args.seed, tol=args.tol)
    print(format_table(rows))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "gradcheck.json"), [r.to_dict() for r in rows])
    return EXIT_OK if all(r.passed for r in rows) else EXIT_INVALID


def cmd_heatmap(args) -> int:
    from .evaluation import export_heatmap, heatmap_peak

    model, _, _ = load_model(args.ckpt)
    try:
        pixels = read_pixels(args.image)
    except (OSError, ImageDecodeError) as exc:
        raise UsageError(f"--image {args.image}: {exc}") from exc
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    heat = export_heatmap(model, to_chw(pixels), args.phrase, args.out)
    print(f"heatmap {heat.shape[1]}x{heat.shape[0]} peak at {heatmap_peak(heat)} -> {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    th = calibrate_thresholds([render(args.seed * 1_000_000 + i)[0] for i in range(args.n)],
                              args.percentile)
    payload = {"brightness_min": th.brightness_min, "texture_min": th.texture_min,
               "n": args.n, "seed": args.seed, "percentile": args.percentile}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "thresholds.json"), payload)
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="master seed; components draw from named sub-streams of it")
    common.add_argument("--config", default=None,
                        help="JSON file of defaults (flag > config file > built-in default)")
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")

    parser = _Parser(prog="geoalign", description="Region-aware image-text alignment toolkit.",
                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "Render a synthetic scene corpus.")
    p.add_argument("--n", type=int, default=640, help="number of scenes")
    p.add_argument("--split-ratio", type=float, default=0.8, help="fraction assigned to train")
    p.add_argument("--out", required=True, help="output directory")

    p = add("filter", cmd_filter, "Drop low-quality images and oversized regions.")
    p.add_argument("--in", dest="input", required=True, help="dataset JSONL or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--report", default=None, help="report path (default OUT/quality_report.json)")
    p.add_argument("--brightness-min", type=float, default=QualityThresholds.brightness_min,
                   help="minimum mean luminance in [0, 1]")
    p.add_argument("--texture-min", type=float, default=QualityThresholds.texture_min,
                   help="minimum Laplacian variance")
    p.add_argument("--max-region-fraction", type=float, default=QualityThresholds.max_region_fraction,
                   help="largest allowed region area as a fraction of the image")

    p = add("hardneg", cmd_hardneg, "Attach hard-negative phrases to every region.")
    p.add_argument("--in", dest="input", required=True, help="dataset JSONL or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--q", type=int, default=4, help="candidates per region (positive + Q-1 negatives)")

    p = add("leakcheck", cmd_leakcheck, "Check train/test splits for duplicates and caption overlap.")
    p.add_argument("--train", required=True, help="JSONL or directory holding train-split records")
    p.add_argument("--test", required=True, help="JSONL or directory holding test-split records")
    p.add_argument("--report", required=True, help="report JSON path")
    p.add_argument("--threshold", type=float, default=LeakageConfig.lexical_threshold,
                   help="word n-gram Jaccard flag threshold")
    p.add_argument("--ngram", type=int, default=LeakageConfig.ngram, help="word n-gram order")
    p.add_argument("--semantic-ckpt", default=None,
                   help="checkpoint whose text encoder scores the optional semantic histogram")

    p = add("train", cmd_train, "Run one training stage.")
    p.add_argument("--stage", default="StageI", choices=[s.value for s in Stage], help="training stage")
    p.add_argument("--preset", default="toy", choices=sorted(PRESETS), help="hyperparameter preset")
    p.add_argument("--data", required=True, help="dataset JSONL or directory (train split is used)")
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.add_argument("--resume", action="store_true",
                   help="continue the --init checkpoint's own stage, optimizer state included")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=None, help="override the preset")
    p.add_argument("--lr", type=float, default=None, help="override the preset")
    p.add_argument("--batch-size", type=int, default=None, help="override the preset")
    p.add_argument("--weight-decay", type=float, default=None, help="override the preset")
    p.add_argument("--warmup", type=int, default=None, help="override the preset")
    p.add_argument("--lambdas", type=float, nargs=5, default=None,
                   metavar=("GLOBAL", "RPA", "HNA", "VIC", "HTC"), help="loss weights")
    p.add_argument("--keep-global", action="store_true",
                   help="keep the standalone global term in Stage II")
    p.add_argument("--grad-clip-norm", type=float, default=1.0, help="global gradient norm cap")
    p.add_argument("--no-clip", action="store_true", help="disable gradient clipping")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")

    p = add("eval", cmd_eval, "Evaluate a checkpoint.")
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--data", required=True, help="dataset JSONL or directory")
    p.add_argument("--split", default="test", choices=["train", "test"], help="records to evaluate")
    p.add_argument("--tasks", default="retrieval,regioncls,hardneg",
                   help="comma-separated subset of retrieval, regioncls, hardneg")
    p.add_argument("--out", required=True, help="output directory")

    p = add("gradcheck", cmd_gradcheck, "Finite-difference check of every loss gradient.")
    p.add_argument("--losses", default="all", help=f"all or comma-separated of {', '.join(LOSS_NAMES)}")
    p.add_argument("--trials", type=int, default=20, help="random instances per loss")
    p.add_argument("--tol", type=float, default=1e-5, help="max relative error")
    p.add_argument("--out", default=None, help="optional output directory for a JSON table")

    p = add("heatmap", cmd_heatmap, "Export a phrase-conditioned similarity map as PGM.")
    p.add_argument("--ckpt", required=True, help="checkpoint whose encoders score the phrase")
    p.add_argument("--image", required=True, help="PPM or PNG image")
    p.add_argument("--phrase", required=True, help="text to localize")
    p.add_argument("--out", required=True, help="output PGM path")

    p = add("calibrate", cmd_calibrate, "Derive quality thresholds from reference scenes.")
    p.add_argument("--n", type=int, default=100, help="number of reference scenes")
    p.add_argument("--percentile", type=float, default=1.0,
                   help="lower percentile of the reference statistics used as threshold")
    p.add_argument("--out", default=None, help="optional output directory")
    return parser


def _config_defaults(path: str, command: str, parser: argparse.ArgumentParser) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"--config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"--config {path}: expected a JSON object")
    commands = set(parser._subparsers._group_actions[0].choices)
    flat = {k: v for k, v in cfg.items() if k not in commands}
    section = cfg.get(command, {})
    if not isinstance(section, dict):
        raise UsageError(f"--config {path}: section {command!r} must be an object")
    return {k.replace("-", "_"): v for k, v in {**flat, **section}.items()}


def _threads() -> int | None:
    raw = os.environ.get("GEOALIGN_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"GEOALIGN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"GEOALIGN_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.config:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            defaults = _config_defaults(args.config, args.command, parser)
            known = {a.dest for a in sub._actions}
            unknown = sorted(set(defaults) - known - {"config"})
            if unknown:
                raise UsageError(f"--config {args.config}: unknown keys {unknown} for {args.command}")
            sub.set_defaults(**defaults)
            args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        threads = _threads()
        if threads is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return args.func(args)
    except SystemExit as exc:
        # argparse exits on --help, --version and bad flags; report it as a return code
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RecordError, BoxError, CheckpointError, ImageDecodeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        for v in getattr(exc, "violations", []):
            print(f"  {v}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: no such file", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
