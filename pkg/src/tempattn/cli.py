"""Command-line entry point: generate | train | eval | sweep | explain | features."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_model, save_model
from .config import RunConfig, load_config
from .evaluation import Protocol, evaluate, sweep
from .explain import aggregate_attention, effect_report, partition_frames
from .morphfeat import feature_names, feature_table, write_feature_table
from .temporal import predict
from .train import train_loop
from .trajgen import (ManifestRow, generate_dataset, load_split, read_manifest, save_trajectory,
                      split_dataset, write_manifest)

log = logging.getLogger("tempattn")

MANIFEST = "manifest.csv"
MODEL = "model.json"


class CommandError(RuntimeError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


def header_lines(cfg: RunConfig) -> list[str]:
    return [f"tempattn {__version__} config_hash={cfg.hash()} seed={cfg.seed}"]


def _csv_writer(path: Path, cfg: RunConfig, columns):
    fh = path.open("w", newline="")
    for line in header_lines(cfg):
        fh.write(f"# {line}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    return fh, w


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if v != v else f"{v:.6f}"
    return str(v)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError(f"missing {what}: {path}", path=str(path))
    return path


def _threads(arg) -> int:
    if arg is not None:
        return max(1, int(arg))
    return max(1, int(os.environ.get("TEMPATTN_THREADS", "1")))


# ---------------------------------------------------------------- commands

def cmd_generate(cfg: RunConfig, out: Path, threads: int = 1) -> Path:
    out = Path(out)
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    trajs = generate_dataset(cfg.data, threads=threads)
    rows = []
    if trajs:
        split = split_dataset([(t.traj_id, t.label) for t in trajs], cfg.split.ratios, seed=cfg.seed)
        where = split.assignment()
        for t in trajs:
            save_trajectory(t, data_dir / f"{t.traj_id}.trj")
            rows.append(ManifestRow(t.traj_id, f"data/{t.traj_id}.trj", t.label, where[t.traj_id]))
    write_manifest(out / MANIFEST, rows, header_lines(cfg))
    cfg.dump(out / "config.yaml")
    log.info("wrote %d trajectories to %s", len(rows), data_dir)
    return out / MANIFEST


def cmd_train(cfg: RunConfig, out: Path, manifest: Path | None = None) -> Path:
    out = Path(out)
    manifest = _require(Path(manifest or out / MANIFEST), "manifest")
    train = load_split(manifest, "train")
    val = load_split(manifest, "val")
    if not train or not val:
        raise CommandError(f"manifest {manifest} has an empty train or val split", path=str(manifest))
    log_path = out / "train_log.csv"
    result = train_loop(train, val, cfg.encoder, cfg.temporal, cfg.train, log_path=log_path,
                        log_header=header_lines(cfg))
    save_model(result.model, out, extra={
        "seed": cfg.seed, "config_hash": cfg.hash(), "tool_version": __version__,
        "best_epoch": result.state.best_epoch, "best_val_loss": result.state.best_val_loss,
    })
    return out / MODEL


def _model_and_test(cfg, out, checkpoint, manifest):
    out = Path(out)
    model = load_model(_require(Path(checkpoint or out / MODEL), "checkpoint"))
    manifest = _require(Path(manifest or out / MANIFEST), "manifest")
    test = load_split(manifest, "test")
    if not test:
        raise CommandError(f"manifest {manifest} has an empty test split", path=str(manifest))
    return model, test


def cmd_eval(cfg: RunConfig, out: Path, checkpoint=None, manifest=None) -> dict:
    out = Path(out)
    model, test = _model_and_test(cfg, out, checkpoint, manifest)
    res = evaluate(model, test, cfg.eval.batch_size)
    m = res.metrics
    fh, w = _csv_writer(out / "metrics.csv", cfg, ["split", "n", "bacc", "f1_macro", "recall_apoptosis", "recall_mitosis"])
    with fh:
        w.writerow(["test", m["n"], *(_fmt(m[k]) for k in ("bacc", "f1_macro", "recall_apoptosis", "recall_mitosis"))])
    fh, w = _csv_writer(out / "confusion.csv", cfg, ["true", "predicted", "count", "fraction"])
    with fh:
        for true, pred, n, frac in res.cm.rows():
            w.writerow([true, pred, n, _fmt(frac)])
    fh, w = _csv_writer(out / "predictions.csv", cfg, ["traj_id", "label", "predicted", "logit", "probability"])
    with fh:
        for t, p in zip(test, res.predictions):
            w.writerow([t.traj_id, t.label.text, p.label.text, f"{p.logit:.6f}", f"{p.probability:.6f}"])
    return m


def parse_k_list(text: str) -> list[int]:
    """Comma list of integers; ``a,b,...,c`` expands to the progression a, b, ..., c."""
    items = [s.strip() for s in str(text).split(",") if s.strip()]
    if "..." in items:
        i = items.index("...")
        if i < 2 or i != len(items) - 2:
            raise ValueError(f"bad k list {text!r}: use a,b,...,c")
        a, b, c = int(items[i - 2]), int(items[i - 1]), int(items[i + 1])
        head = [int(v) for v in items[: i - 2]]
        return head + list(range(a, c + 1, b - a))
    return [int(v) for v in items]


def cmd_sweep(cfg: RunConfig, out: Path, protocol: str, k_values=None, checkpoint=None, manifest=None) -> list[Path]:
    out = Path(out)
    model, test = _model_and_test(cfg, out, checkpoint, manifest)
    protocols = list(Protocol) if protocol == "both" else [Protocol(protocol)]
    paths = []
    for proto in protocols:
        ks = k_values
        if ks is None:
            ks = cfg.eval.truncate_k if proto is Protocol.TRUNCATE_TAIL else cfg.eval.keep_last_k
        curve = sweep(model, test, proto, ks, cfg.eval.batch_size)
        path = out / f"sweep_{proto.value}.csv"
        fh, w = _csv_writer(path, cfg, ["protocol", "k", "n", "bacc", "f1_macro", "recall_apoptosis", "recall_mitosis"])
        with fh:
            for p in curve.points:
                w.writerow([proto.value, p.k, p.n_sequences, *(_fmt(v) for v in
                            (p.bacc, p.f1_macro, p.recall_apoptosis, p.recall_mitosis))])
        paths.append(path)
    return paths


def run_explain(cfg: RunConfig, model, test):
    """Attention aggregation and the effect-size report for ``test``; returns a dict of results."""
    ex = cfg.explain
    preds = predict(model, test, cfg.eval.batch_size)
    chosen = [(t, p) for t, p in zip(test, preds) if not ex.correct_only or p.label is t.label]
    profiles = [(t.label, p.attention.real()) for t, p in chosen]
    aggregated = aggregate_attention(profiles, ex.window, ex.normalize_scope) if profiles else {}
    partitions = {}
    frame_index = {}
    for t, p in chosen:
        if p.attention.length >= 2:
            partitions[t.traj_id] = partition_frames(p.attention.real(), ex.quantile, ex.quantile_method)
            frame_index[t.traj_id] = np.flatnonzero(t.valid_mask())
    table = feature_table([t for t, _ in chosen], radius=ex.central_radius)
    names = feature_names(test[0].frames.shape[1])
    report = effect_report(
        partitions, {t.traj_id: t.label for t, _ in chosen}, {k: v.as_dict() for k, v in table.items()},
        names, permutations=ex.permutations, resamples=ex.bootstrap_resamples, level=ex.ci_level,
        seed=cfg.seed, frame_indices=frame_index,
        metadata={"filter": "correctly classified only" if ex.correct_only else "all",
                  "n_test": len(test), "n_used": len(chosen)},
    )
    return {"predictions": preds, "chosen": chosen, "aggregated": aggregated,
            "partitions": partitions, "report": report, "features": table}


def cmd_explain(cfg: RunConfig, out: Path, checkpoint=None, manifest=None) -> dict:
    out = Path(out)
    model, test = _model_and_test(cfg, out, checkpoint, manifest)
    res = run_explain(cfg, model, test)
    fh, w = _csv_writer(out / "aggregated_attention.csv", cfg,
                        ["class", "offset_from_end", "mean_weight", "normalized_weight", "n_contributing"])
    with fh:
        for label, agg in res["aggregated"].items():
            for off in range(agg.mean_weight.size):
                w.writerow([label.text, off, f"{agg.mean_weight[off]:.8f}", f"{agg.normalized[off]:.6f}",
                            int(agg.n_contributing[off])])
    fh, w = _csv_writer(out / "attention_profiles.csv", cfg, ["traj_id", "class", "frame", "weight", "high_attention"])
    with fh:
        for t, p in res["chosen"]:
            part = res["partitions"].get(t.traj_id)
            high = set(part.high_indices.tolist()) if part is not None else set()
            for i, wt in enumerate(p.attention.real()):
                w.writerow([t.traj_id, t.label.text, i, f"{wt:.8f}", int(i in high)])
    rep = res["report"]
    fh, w = _csv_writer(out / "effect_report.csv", cfg,
                        ["traj_id", "class", "feature", "n_high", "n_low", "p_value", "cliffs_delta"])
    with fh:
        for r in rep.rows:
            w.writerow([r.traj_id, r.label.text, r.feature, r.n_high, r.n_low, f"{r.p_value:.6g}",
                        f"{r.cliffs_delta:.6f}"])
    fh, w = _csv_writer(out / "effect_summary.csv", cfg,
                        ["feature", "class", "median_delta", "ci_low", "ci_high", "category", "n_sequences"])
    with fh:
        for s in rep.summary:
            w.writerow([s.feature, s.label.text, f"{s.median_delta:.6f}", f"{s.ci_low:.6f}",
                        f"{s.ci_high:.6f}", s.category, s.n_sequences])
    (out / "effect_metadata.json").write_text(json.dumps(rep.metadata, indent=1, sort_keys=True) + "\n")
    return res


def cmd_features(cfg: RunConfig, out: Path, manifest=None, split: str | None = None) -> Path:
    out = Path(out)
    manifest = _require(Path(manifest or out / MANIFEST), "manifest")
    rows = read_manifest(manifest)
    splits = sorted({r.split for r in rows}) if split is None else [split]
    trajs = [t for s in splits for t in load_split(manifest, s)]
    table = feature_table(trajs, radius=cfg.explain.central_radius)
    path = out / "features.csv"
    write_feature_table(path, table, header_lines(cfg))
    return path


# ---------------------------------------------------------------- argparse

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, help="worker cap (env TEMPATTN_THREADS)")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.learning_rate=1e-5")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tempattn", description=__doc__)
    p.add_argument("--version", action="version", version=f"tempattn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset and manifest")
    sp = sub.add_parser("train", parents=[common], help="train a model from the manifest")
    sp.add_argument("--manifest")
    for name, helptext in (("eval", "test-set metrics"), ("explain", "attention and effect-size reports")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--checkpoint", help="model manifest (default OUT/model.json)")
        sp.add_argument("--manifest")
    sp = sub.add_parser("sweep", parents=[common], help="truncate-tail / keep-last-k sweeps")
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--protocol", default="both", choices=["truncate_tail", "keep_last", "both"])
    sp.add_argument("--k", help="k list, e.g. 0,5,...,50")
    sp = sub.add_parser("features", parents=[common], help="feature table from trajectory masks")
    sp.add_argument("--manifest")
    sp.add_argument("--split", choices=["train", "val", "test"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "generate":
            cmd_generate(cfg, out, _threads(args.threads))
        elif args.command == "train":
            cmd_train(cfg, out, args.manifest)
        elif args.command == "eval":
            m = cmd_eval(cfg, out, args.checkpoint, args.manifest)
            print(json.dumps({k: m[k] for k in ("n", "bacc", "f1_macro")}))
        elif args.command == "sweep":
            ks = parse_k_list(args.k) if args.k else None
            cmd_sweep(cfg, out, args.protocol, ks, args.checkpoint, args.manifest)
        elif args.command == "explain":
            cmd_explain(cfg, out, args.checkpoint, args.manifest)
        elif args.command == "features":
            cmd_features(cfg, out, args.manifest, args.split)
    except (CommandError, FileNotFoundError, ValueError, RuntimeError) as exc:
        path = getattr(exc, "path", None) or getattr(exc, "filename", None)
        print("error: " + json.dumps({"command": args.command, "type": type(exc).__name__,
                                      "message": str(exc), "path": path}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
