"""Command-line entry point: ``jbot <subcommand>``.

Subcommands: generate, pretrain, probe, finetune, evaluate, score and
inspect {augment, attention, project2d}. Tables are CSV with a header row,
reports are JSON.
"""
import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import anomaly, downstream
from .augment import AugmentConfig, make_view_pair
from .checkpoint import CheckpointError, check_compatible, load_params, save_params
from .config import ConfigError, load_config
from .distill import pretrain
from .jetdata import (
    DatasetError,
    JetDataset,
    SyntheticSpec,
    filter_classes,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .network import cls_embeddings, extract_cls_attention, init_params
from .rng import stream

log = logging.getLogger("jbot")


# ---------------------------------------------------------------------------
# helpers


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_roc(path, roc):
    rows = [(_fmt(t), _fmt(s), _fmt(b)) for t, s, b in zip(roc.thresholds, roc.eps_s, roc.eps_b)]
    _write_csv(path, ("threshold", "eps_s", "eps_b"), rows)


def _csv_list(text, cast=str):
    return [cast(x) for x in text.split(",") if x.strip()] if text else []


def resolve_dataset(data_cfg):
    """Dataset named by a ``data`` config section, class filter applied.

    Nothing is written, so a bad path fails before any run directory exists.
    """
    if data_cfg.path:
        if not os.path.isdir(data_cfg.path):
            raise DatasetError(f"dataset path not found: {data_cfg.path}")
        ds = load_dataset(data_cfg.path)
        if data_cfg.class_filter:
            ds = filter_classes(ds, data_cfg.class_filter)
        return ds
    spec = SyntheticSpec()
    if data_cfg.class_filter:
        spec = spec.select(data_cfg.class_filter)
    return generate_synthetic(spec, data_cfg.synthetic_count, data_cfg.synthetic_seed)


def run_pretrain(cfg, out_dir=None, progress=None):
    """Pre-train from a :class:`RunConfig`; returns ``(run_dir, state)``."""
    out_dir = out_dir or cfg.output_dir
    ds = resolve_dataset(cfg.data)
    train, val, test = split_dataset(ds, cfg.data.split, cfg.data.split_seed)
    os.makedirs(out_dir, exist_ok=True)
    cfg.dump(os.path.join(out_dir, "config.yaml"))
    _write_json(
        os.path.join(out_dir, "splits.json"),
        {name: part.indices.tolist() for name, part in (("train", train), ("val", val), ("test", test))},
    )
    state = pretrain(
        train.features, cfg.network, cfg.distill, cfg.augment, cfg.seed, out_dir,
        cfg.checkpoint_every, progress=progress,
    )
    return out_dir, state


def run_splits(run_dir):
    """Re-materialise the train/val/test datasets of a pre-training run."""
    cfg = load_config(os.path.join(run_dir, "config.yaml"))
    ds = resolve_dataset(cfg.data)
    with open(os.path.join(run_dir, "splits.json")) as fh:
        splits = json.load(fh)
    pos = {int(j): i for i, j in enumerate(ds.indices)}
    return tuple(ds.subset([pos[j] for j in splits[name]], name) for name in ("train", "val", "test"))


def _datasets(args):
    """``(train, val, test)`` from ``--run`` or from ``--data`` (split here)."""
    if getattr(args, "run", None):
        return run_splits(args.run)
    if not getattr(args, "data", None):
        raise DatasetError("give --run or --data")
    ds = load_dataset(args.data)
    return split_dataset(ds, (0.8, 0.1, 0.1), args.split_seed)


def _checkpoint(args):
    path = args.checkpoint or (os.path.join(args.run, "student") if getattr(args, "run", None) else None)
    if not path:
        raise CheckpointError("give --checkpoint or --run")
    arrays, net_cfg, manifest = load_params(path)
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        # the manifest keeps the fitted feature scale, so only shapes are compared
        check_compatible(arrays, init_params(cfg.network, np.random.default_rng(0)))
    return arrays, net_cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    spec = SyntheticSpec()
    if args.classes:
        spec = spec.select(_csv_list(args.classes))
    ds = generate_synthetic(spec, args.count, args.seed)
    save_dataset(ds, args.out, {"synthetic": spec.to_dict()})
    print(f"wrote {len(ds)} jets to {args.out}")


def cmd_pretrain(args):
    cfg = load_config(args.config)
    seeds = [cfg.seed + r for r in range(args.repeat)]
    base = args.out or cfg.output_dir
    for seed in seeds:
        cfg.seed = seed
        out = base if args.repeat == 1 else os.path.join(base, f"seed_{seed}")

        def progress(epoch, m):
            print(f"epoch {epoch:4d}  loss {m['loss_total']:.4f}  H_t {m['teacher_entropy']:.3f}", flush=True)

        run_pretrain(cfg, out, progress)
        print(f"run directory: {out}")


def cmd_probe(args):
    arrays, net_cfg = _checkpoint(args)
    train, _, test = _datasets(args)
    tr = downstream.embed_dataset(train.features, train.labels, arrays, net_cfg)
    te = downstream.embed_dataset(test.features, test.labels, arrays, net_cfg)
    n_classes = len(train.class_names)
    test_vectors = te.vectors  # labels are not handed to the probes
    if args.method == "knn":
        pred, scores = downstream.knn_probe(tr, test_vectors, args.k, n_classes, not args.no_normalize)
    else:
        pred, scores = downstream.linear_probe(tr, test_vectors, n_classes, normalize=not args.no_normalize)
    _report(args.out, scores, test.labels, train.class_names, {"method": args.method, "k": args.k})
    np.save(os.path.join(args.out, "embeddings.npy"), te.vectors)
    np.save(os.path.join(args.out, "labels.npy"), te.labels)
    _write_csv(
        os.path.join(args.out, "predictions.csv"),
        ("jet_id", "label", "prediction", *[f"score_{n}" for n in train.class_names]),
        [(int(i), int(y), int(p), *map(_fmt, s)) for i, y, p, s in zip(test.indices, test.labels, pred, scores)],
    )


def _report(out, scores, labels, class_names, extra=None):
    os.makedirs(out, exist_ok=True)
    present = sorted(set(np.unique(labels)))
    metrics, rocs = downstream.classification_metrics(scores, labels, class_names)
    metrics.update(extra or {})
    metrics["classes_present"] = [class_names[c] for c in present]
    for name, roc in rocs.items():
        write_roc(os.path.join(out, f"roc_{name}.csv"), roc)
    _write_json(os.path.join(out, "metrics.json"), metrics)
    print(json.dumps({"accuracy": metrics["accuracy"], "auc": metrics["auc"]}, sort_keys=True))
    return metrics


def label_budget(ds, fraction, seed):
    """Stratified subset holding ``fraction`` of each class (at least one jet)."""
    rng = stream(seed, "split", 1)
    keep = []
    for c in np.unique(ds.labels):
        idx = np.nonzero(ds.labels == c)[0]
        keep.append(idx[rng.permutation(len(idx))[: max(1, int(round(fraction * len(idx))))]])
    return ds.subset(np.sort(np.concatenate(keep)))


def cmd_finetune(args):
    arrays, net_cfg = _checkpoint(args)
    train, val, test = _datasets(args)
    train = label_budget(train, args.label_fraction, args.seed)
    n_classes = len(train.class_names)
    base = downstream.FinetuneConfig(epochs=args.epochs, batch_size=args.batch_size)
    decays = _csv_list(args.llrd_grid, float) or list(downstream.LLRD_GRID)
    lrs = _csv_list(args.lr_grid, float) or list(downstream.LR_GRID)
    table = downstream.lr_table(net_cfg.n_blocks, lrs[0], decays[0])
    print(downstream.format_lr_table(table))
    params, best_cfg, rows = downstream.finetune_grid(
        arrays, net_cfg, (train.features, train.labels), (val.features, val.labels), n_classes,
        decays, lrs, base, args.seed, args.scratch,
    )
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "lr_table.txt"), "w") as fh:
        fh.write(downstream.format_lr_table(downstream.lr_table(net_cfg.n_blocks, best_cfg.base_lr, best_cfg.llrd_decay)) + "\n")
    _write_csv(os.path.join(args.out, "grid.csv"), ("llrd_decay", "base_lr", "val_accuracy"),
               [(r["llrd_decay"], r["base_lr"], _fmt(r["val_accuracy"])) for r in rows])
    scores = downstream.predict_proba(params, net_cfg, test.features)
    _report(args.out, scores, test.labels, train.class_names, {
        "llrd_decay": best_cfg.llrd_decay, "base_lr": best_cfg.base_lr, "scratch": bool(args.scratch),
        "n_train": len(train), "label_fraction": args.label_fraction,
    })
    save_params(os.path.join(args.out, "model"), params, net_cfg, "finetuned")


def cmd_evaluate(args):
    if args.scores.endswith(".csv"):
        scores = np.loadtxt(args.scores, delimiter=",", skiprows=1, ndmin=2)
    else:
        scores = np.load(args.scores)
    labels = np.load(args.labels)
    names = _csv_list(args.class_names) or [str(c) for c in range(scores.shape[1])]
    _report(args.out, scores, labels, names)


def _score_one(arrays, net_cfg, background, test, args):
    ref_vec = cls_embeddings(background.features, arrays, net_cfg)
    if args.reference_size and args.reference_size < len(ref_vec):
        pick = np.sort(stream(args.seed, "reference").permutation(len(ref_vec))[: args.reference_size])
        ref_vec, ref_lab = ref_vec[pick], background.labels[pick]
    else:
        ref_lab = background.labels
    metrics = _csv_list(args.metrics) or list(anomaly.METRICS)
    ref = anomaly.fit_reference(
        ref_vec, ref_lab, gmm_components=args.gmm_components, seed=args.seed, fit_mixture="gmm" in metrics,
    )
    z = cls_embeddings(test.features, arrays, net_cfg)
    scores = anomaly.score_all(z, ref, metrics, k=args.k, tau=args.tau)
    bg_ids = set(np.unique(background.labels).tolist())
    is_bg = np.isin(test.labels, list(bg_ids))
    report = {}
    for m, s in scores.items():
        signals = {test.class_names[c]: s[test.labels == c] for c in np.unique(test.labels) if c not in bg_ids}
        res, _ = anomaly.evaluate_anomaly(s[is_bg], signals)
        report[m] = res
    return scores, report


def cmd_score(args):
    if args.run:
        background, _, _ = run_splits(args.run)
        checkpoints = args.checkpoint or [os.path.join(args.run, "student")]
    else:
        if not args.background or not args.checkpoint:
            raise DatasetError("give --run, or --checkpoint and --background")
        background = load_dataset(args.background)
        checkpoints = args.checkpoint
    test = load_dataset(args.test)
    results = []
    for ck in checkpoints:
        arrays, net_cfg, _ = load_params(ck)
        scores, report = _score_one(arrays, net_cfg, background, test, args)
        combined = float(np.mean([r["combined"] for r in report.values()]))
        results.append((combined, ck, scores, report))
        print(f"{ck}: mean combined AUC {combined:.4f}")
    if args.select == "best":
        chosen = max(results, key=lambda r: r[0])
    else:
        chosen = results[0]
    _, ck, scores, report = chosen
    os.makedirs(args.out, exist_ok=True)
    for m, s in scores.items():
        _write_csv(os.path.join(args.out, f"scores_{m}.csv"), ("jet_id", "label", "score"),
                   [(int(i), int(y), _fmt(v)) for i, y, v in zip(test.indices, test.labels, s)])
    report["checkpoint"] = ck
    if len(results) > 1:
        report["candidates"] = {r[1]: r[0] for r in results}
    _write_json(os.path.join(args.out, "anomaly_auc.json"), report)
    print(json.dumps({m: r["combined"] for m, r in report.items() if isinstance(r, dict) and "combined" in r}))


def cmd_inspect(args):
    os.makedirs(args.out, exist_ok=True)
    if args.what == "augment":
        ds = load_dataset(args.data)
        for i in _csv_list(args.indices, int) or [0]:
            pair = make_view_pair(ds.features[i], args.seed, args.epoch, i, AugmentConfig())
            rows = []
            for view, x, mask in (("input", ds.features[i], np.zeros(len(ds.features[i]), bool)),
                                  ("u", pair.view_u, pair.mask_u), ("v", pair.view_v, pair.mask_v)):
                for slot in np.nonzero(x[:, 3] > 0.5)[0]:
                    rows.append((view, int(slot), *map(_fmt, x[slot, :3]), int(mask[slot])))
            _write_csv(os.path.join(args.out, f"augment_{i}.csv"), ("view", "slot", "eta", "phi", "pt", "masked"), rows)
        return
    arrays, net_cfg = _checkpoint(args)
    ds = load_dataset(args.data)
    if args.what == "attention":
        for i in _csv_list(args.indices, int) or [0]:
            w = extract_cls_attention(ds.features[i], arrays, net_cfg)
            x = ds.features[i]
            valid = np.nonzero(x[:, 3] > 0.5)[0]
            rows = [(int(s), *map(_fmt, x[s, :3]), *map(_fmt, w[:, s])) for s in valid]
            _write_csv(os.path.join(args.out, f"attention_{i}.csv"),
                       ("slot", "eta", "phi", "pt", *[f"head_{h}" for h in range(w.shape[0])]), rows)
    elif args.what == "project2d":
        z = downstream.project2d(downstream.l2_rows(cls_embeddings(ds.features, arrays, net_cfg)))
        _write_csv(os.path.join(args.out, "project2d.csv"), ("jet_id", "label", "pc1", "pc2"),
                   [(int(i), int(y), _fmt(a), _fmt(b)) for i, y, (a, b) in zip(ds.indices, ds.labels, z)])


# ---------------------------------------------------------------------------
# parser


def _add_source(p, data=True):
    p.add_argument("--run", help="pre-training run directory (checkpoint + data splits)")
    p.add_argument("--checkpoint", help="checkpoint directory (default: RUN/student)")
    p.add_argument("--config", help="run config to validate the checkpoint against")
    if data:
        p.add_argument("--data", help="dataset directory, split 80/10/10 here")
        p.add_argument("--split-seed", type=int, default=0)


def build_parser():
    ap = argparse.ArgumentParser(prog="jbot", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", default="", help="comma-separated subset of q,g,W,Z,t")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("pretrain", help="self-distillation pre-training")
    p.add_argument("config")
    p.add_argument("--out", help="run directory (default: output_dir from the config)")
    p.add_argument("--repeat", type=int, default=1, help="pre-train N consecutive seeds")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("probe", help="k-NN or linear probe on frozen embeddings")
    _add_source(p)
    p.add_argument("--method", choices=("knn", "linear"), default="knn")
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("finetune", help="fine-tune with layer-wise LR decay (or train from scratch)")
    _add_source(p)
    p.add_argument("--label-fraction", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--llrd-grid", default="", help="comma-separated decay factors")
    p.add_argument("--lr-grid", default="", help="comma-separated base learning rates")
    p.add_argument("--scratch", action="store_true", help="random init, uniform LR")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("evaluate", help="classification metrics from saved scores")
    p.add_argument("--scores", required=True, help=".npy (n, classes) or CSV with header")
    p.add_argument("--labels", required=True)
    p.add_argument("--class-names", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("score", help="anomaly scores against a background reference set")
    p.add_argument("--run")
    p.add_argument("--checkpoint", action="append", help="repeatable; with --select best the best one is kept")
    p.add_argument("--background", help="background dataset directory (reference set)")
    p.add_argument("--test", required=True, help="test dataset directory (background + signal classes)")
    p.add_argument("--metrics", default="knn,cosine,mahalanobis,gmm")
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--gmm-components", type=int, default=4)
    p.add_argument("--reference-size", type=int, default=0, help="subsample the reference set")
    p.add_argument("--select", choices=("first", "best"), default="first")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("inspect", help="augmentation tables, attention maps, 2-D projections")
    p.add_argument("what", choices=("augment", "attention", "project2d"))
    _add_source(p, data=False)
    p.add_argument("--data", required=True)
    p.add_argument("--indices", default="0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inspect)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except (ConfigError, DatasetError, CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
