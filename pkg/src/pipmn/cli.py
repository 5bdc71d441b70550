"""Command line entry point: ``pipmn <command>``.

Exit codes: 0 success, 1 invalid input or configuration, 2 per-item failures
(extraction, unreadable audio, failed ablation variants), 3 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import data, dsp
from .config import RunConfig
from .gradcheck import TOL, format_reports, run_suite
from .model import (CheckpointError, ConfigError, PipConfig, build_variant, load_checkpoint,
                    param_count, save_checkpoint)
from .train import (StopRule, TrainingDiverged, evaluate, feature_stats, train)

log = logging.getLogger("pipmn")

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL, EXIT_DIVERGED = 0, 1, 2, 3


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _load_config(args, **overrides):
    if getattr(args, "config", None):
        return RunConfig.load(args.config, overrides)
    return RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def _kind_dir(cache_dir, kind):
    return os.path.join(cache_dir, kind)


def _ensure_index(cfg: RunConfig, kind=None):
    """Open the feature cache for ``kind``, building it from the manifest when absent."""
    kind = kind or cfg.features
    cache = _kind_dir(cfg.cache_dir, kind)
    if os.path.exists(os.path.join(cache, "index.jsonl")):
        return data.read_index(cache)
    if not cfg.manifest:
        raise FileNotFoundError(f"no feature cache at {cache}; run 'pipmn features' first")
    m = data.read_manifest(cfg.manifest)
    index, summary = data.materialize_features(m, data.make_split(m, cfg.seed), cache, kind,
                                               workers=cfg.workers)
    if summary.failures:
        raise RuntimeError(f"{len(summary.failures)} files failed extraction")
    return index


# ---------------------------------------------------------------------------
# features


def cmd_features(args):
    try:
        m = data.read_manifest(args.manifest)
        split = data.make_split(m, args.seed)
    except (OSError, ValueError) as exc:
        _err(exc)
        return EXIT_INVALID
    cache = _kind_dir(args.cache_dir, args.kind)
    _, summary = data.materialize_features(m, split, cache, args.kind, workers=args.workers)
    print(f"{summary.extracted} extracted, {summary.cached} cached, {len(summary.failures)} failed")
    for f in summary.failures:
        print(f"  failed: {f}")
    return EXIT_OK if summary.ok else EXIT_PARTIAL


# ---------------------------------------------------------------------------
# training / evaluation


def _split_batches(index, split, cfg, shuffle):
    multilabel = cfg.task == "multilabel"
    if not index.split(split):
        return None
    return lambda epoch: data.batches(index, split, cfg.batch_size, cfg.seed, epoch,
                                      multilabel=multilabel, shuffle=shuffle)


def run_training(cfg: RunConfig, out_dir, index=None):
    """Train one configuration; writes checkpoint.pipc, runlog.jsonl, metrics.json, config.json.

    Returns (model loaded with the retained state, TrainResult).
    """
    index = index or _ensure_index(cfg)
    if len(index.vocabulary) != cfg.num_classes:
        raise ConfigError("num_classes", f"config says {cfg.num_classes} but the data has "
                                         f"{len(index.vocabulary)} classes")
    os.makedirs(out_dir, exist_ok=True)
    model = build_variant(cfg.model_config(), seed=cfg.seed)
    train_b = _split_batches(index, data.TRAIN, cfg, shuffle=True)
    if train_b is None:
        raise ValueError("training split is empty")
    val_b = _split_batches(index, data.VAL, cfg, shuffle=False)
    mean, std = feature_stats(train_b(0))
    model.set_feature_stats(mean, std)
    result = train(model, train_b, val_b, epochs=cfg.epochs, seed=cfg.seed, task=cfg.task,
                   label_smoothing=cfg.label_smoothing, lr=cfg.lr,
                   weight_decay=cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2,
                   adam_eps=cfg.adam_eps, stop_rule=StopRule(cfg.patience, cfg.min_delta),
                   config=cfg.to_dict())
    model.load_state_dict(result.best_state)
    val_report = evaluate(model, val_b(0), cfg.task, cfg.label_smoothing) if val_b else None
    extra = {"run_config": cfg.to_dict(), "vocabulary": index.vocabulary,
             "val_metrics": val_report.to_dict() if val_report else None}
    save_checkpoint(model, os.path.join(out_dir, "checkpoint.pipc"), extra=extra)
    result.runlog.write(os.path.join(out_dir, "runlog.jsonl"))
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump({"schema_version": 1, "split": "val",
                   "metrics": val_report.to_dict() if val_report else None,
                   "wall_clock_s": result.runlog.wall_clock_s,
                   "epochs_run": len(result.runlog.epochs),
                   "stopped_early": result.runlog.stopped_early}, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    return model, result, val_report


def cmd_train(args):
    try:
        cfg = _load_config(args, seed=args.seed, epochs=args.epochs, batch_size=args.batch_size,
                           cache_dir=args.cache_dir, manifest=args.manifest)
        _, result, report = run_training(cfg, args.out)
    except ConfigError as exc:
        _err(f"invalid config: {exc}")
        return EXIT_INVALID
    except TrainingDiverged as exc:
        _err(f"training diverged: {exc}")
        return EXIT_DIVERGED
    except (OSError, ValueError, RuntimeError) as exc:
        _err(exc)
        return EXIT_INVALID
    last = result.runlog.epochs[-1] if result.runlog.epochs else None
    if last:
        print(f"epochs run: {last['epoch']}  train loss {last['train_loss']:.5f}  "
              f"train acc {last['train_acc']:.4f}" + ("  (stopped early)" if result.runlog.stopped_early else ""))
    if report:
        print(report.table())
    return EXIT_OK


def cmd_eval(args):
    try:
        model, extra = load_checkpoint(args.checkpoint)
        cfg = RunConfig.from_dict(extra["run_config"])
        if args.cache_dir:
            cfg.cache_dir = args.cache_dir
        index = _ensure_index(cfg)
        batches = _split_batches(index, args.split, cfg, shuffle=False)
        if batches is None:
            raise ValueError(f"split {args.split!r} is empty")
        report = evaluate(model, batches(0), cfg.task, cfg.label_smoothing)
    except (OSError, ValueError, KeyError, RuntimeError, CheckpointError) as exc:
        _err(exc)
        return EXIT_INVALID
    print(json.dumps({"split": args.split, "metrics": report.to_dict()}, sort_keys=True))
    print(report.table(index.vocabulary))
    return EXIT_OK


def cmd_params(args):
    try:
        cfg = _load_config(args, features=args.features,
                           in_dim=dsp.FEATURE_KINDS[args.features] if args.features else None)
        arch = cfg.model_config().to_dict()
        arch.update({k: v for k, v in (("in_dim", args.in_dim), ("num_classes", args.num_classes))
                     if v is not None})
        mc = PipConfig.from_dict(arch)
    except (ConfigError, OSError) as exc:
        _err(f"invalid config: {exc}")
        return EXIT_INVALID
    total, breakdown = param_count(build_variant(mc))
    for name, (d_in, d_out) in zip(sorted(k for k in breakdown if k.startswith("stage")), mc.stage_dims):
        print(f"{name:<10} {d_in:>5} -> {d_out:<5} {breakdown[name]:>12,}")
    for name in breakdown:
        if not name.startswith("stage"):
            print(f"{name:<24} {breakdown[name]:>12,}")
    print(f"{'total':<24} {total:>12,}")
    print(json.dumps({"total": total, "breakdown": breakdown}))
    return EXIT_OK


ABLATION_COLUMNS = ("variant", "accuracy", "macro_precision", "macro_f1", "micro_f1", "params", "status")


def cmd_ablate(args):
    try:
        cfg = _load_config(args, seed=args.seed, epochs=args.epochs, cache_dir=args.cache_dir,
                           manifest=args.manifest)
    except (ConfigError, OSError) as exc:
        _err(f"invalid config: {exc}")
        return EXIT_INVALID
    os.makedirs(args.out_dir, exist_ok=True)
    rows, failed = [], 0
    for name in cfg.ablation:
        row = dict.fromkeys(ABLATION_COLUMNS, "")
        row["variant"] = name
        try:
            vcfg = cfg.variant(name)
            row["params"] = param_count(build_variant(vcfg.model_config()))[0]
            model, _, _ = run_training(vcfg, os.path.join(args.out_dir, name))
            index = _ensure_index(vcfg)
            batches = _split_batches(index, data.TEST, vcfg, shuffle=False) \
                or _split_batches(index, data.VAL, vcfg, shuffle=False)
            rep = evaluate(model, batches(0), vcfg.task, vcfg.label_smoothing)
            for k in ("accuracy", "macro_precision", "macro_f1", "micro_f1"):
                row[k] = f"{getattr(rep, k):.6f}" if getattr(rep, k) is not None else ""
            row["status"] = "ok"
        except Exception as exc:  # noqa: BLE001 - the sweep records and continues
            failed += 1
            row["status"] = f"failed: {exc}"
            log.warning("variant %s failed: %s", name, exc)
        rows.append(row)
        print(f"{name:<24} {row['status']}")
    with open(os.path.join(args.out_dir, "ablation.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_gradcheck(args):
    try:
        reports = run_suite(tol=args.tol, size=args.size)
    except ValueError as exc:
        _err(exc)
        return EXIT_INVALID
    print(format_reports(reports))
    worst = max(r.max_rel_error for r in reports)
    ok = all(r.passed for r in reports)
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'}, tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_PARTIAL


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cmd_predict(args):
    try:
        model, extra = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError, ValueError) as exc:
        _err(exc)
        return EXIT_INVALID
    run_cfg = extra.get("run_config") or {}
    kind = run_cfg.get("features", "stack")
    task = run_cfg.get("task", "multiclass")
    vocab = extra.get("vocabulary") or [str(i) for i in range(model.config.num_classes)]
    try:
        segs = data.load_segments(args.wav)
    except (OSError, ValueError) as exc:
        _err(f"cannot read {args.wav}: {exc}")
        return EXIT_PARTIAL
    x = np.stack([dsp.extract(s, kind) for s in segs])
    logits = model.predict_logits(x).astype(np.float64)
    out = []
    for i, z in enumerate(logits):
        if task == "multilabel":
            p = 1.0 / (1.0 + np.exp(-z))
            labels = [vocab[c] for c in np.flatnonzero(p >= 0.5)]
            out.append({"segment": i, "probabilities": dict(zip(vocab, p.tolist())), "labels": labels})
        else:
            p = _softmax(z[None, :])[0]
            out.append({"segment": i, "probabilities": dict(zip(vocab, p.tolist())),
                        "label": vocab[int(p.argmax())]})
    print(json.dumps({"file": args.wav, "segments": out}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="pipmn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    cache_default = None

    s = sub.add_parser("features", help="extract and cache segment features")
    s.add_argument("--manifest", required=True)
    s.add_argument("--cache-dir", default=os.environ.get("PIPMN_CACHE_DIR", "pipmn_cache"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--kind", default="stack", choices=sorted(dsp.FEATURE_KINDS))
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--cache-dir", default=cache_default)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="val", choices=[data.TRAIN, data.VAL, data.TEST])
    s.add_argument("--cache-dir")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("params", help="count trainable parameters")
    s.add_argument("--config")
    s.add_argument("--in-dim", type=int)
    s.add_argument("--num-classes", type=int)
    s.add_argument("--features", choices=sorted(dsp.FEATURE_KINDS))
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--cache-dir", default=cache_default)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    s.add_argument("--size", default="tiny")
    s.add_argument("--tol", type=float, default=TOL)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("predict", help="per-segment class probabilities for one WAV file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--wav", required=True)
    s.set_defaults(func=cmd_predict)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
