"""Command-line entry point: ``ltgcd <subcommand> [options]``.

Every subcommand writes JSON (or JSON-lines / CSV) into ``--out`` and prints a
short JSON summary on stdout. Failures print ``{"error": ..., "type": ...}``
on stderr and exit nonzero (2 for bad arguments, 1 for runtime errors).
Timestamps only ever go to the ``ltgcd.log`` sidecar.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import classifier, density, estimation, evaluation, knn, selection, store

log = logging.getLogger("ltgcd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _unit_open(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return value


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=_positive_int, default=None, help="BLAS thread cap")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--config", type=Path, default=None, help="JSON file of option defaults")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ltgcd", description="Long-tailed category discovery on precomputed embeddings.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    def graph_opts(p):
        p.add_argument("--k", type=_positive_int, default=10, help="density neighbors")
        p.add_argument("--ks", type=_positive_int, default=30, help="IoUK neighbors")

    p = add("synth", "generate a long-tailed Gaussian mixture on the sphere")
    p.add_argument("--classes", type=_positive_int, default=20)
    p.add_argument("--dim", type=_positive_int, default=32)
    p.add_argument("--imbalance", type=float, default=10.0)
    p.add_argument("--head", type=_positive_int, default=200)
    p.add_argument("--spread", type=float, default=0.08, help="intra-class noise sigma")
    p.add_argument("--frac-old", type=float, default=0.5, help="fraction of classes that get labels")
    p.add_argument("--frac-labelled", type=float, default=0.5, help="labelled fraction inside old classes")
    p.add_argument("--name", default="dataset")

    p = add("knn", "build and cache an exact k-NN graph")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--k", type=_positive_int, default=30)

    p = add("density", "densities, raw peaks and NMDS-retained peaks")
    p.add_argument("--manifest", type=Path, required=True)
    graph_opts(p)
    p.add_argument("--lambda-nmds", type=_unit_open, default=0.6)
    p.add_argument("--mode", choices=density.DENSITY_MODES, default=None,
                   help="default: connectivity-affinity with --checkpoint, affinity-only without")
    p.add_argument("--checkpoint", type=Path, default=None)

    p = add("select", "one round of reliable-sample selection")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    graph_opts(p)
    p.add_argument("--lambda-nmds", type=_unit_open, default=0.6)
    p.add_argument("--eps-conf", type=float, default=0.8)
    p.add_argument("--no-conf", action="store_true")
    p.add_argument("--no-dens", action="store_true")
    p.add_argument("--no-nmds", action="store_true")
    p.add_argument("--affinity-only", action="store_true")
    p.add_argument("--raw-count-prior", action="store_true")
    p.add_argument("--crest-power", type=float, default=None)

    p = add("train", "train prototypes, then report on the unlabelled set")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--classes", type=_positive_int, default=None,
                   help="class count (default: manifest 'classes', or k_hat from --estimate)")
    p.add_argument("--estimate", type=Path, default=None, help="estimate-k report to take k_hat from")
    graph_opts(p)
    p.add_argument("--lambda-nmds", type=_unit_open, default=0.6)
    p.add_argument("--eps-conf", type=float, default=0.8)
    p.add_argument("--epochs", type=_positive_int, default=50)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lambda-cls", type=float, default=0.35)
    p.add_argument("--lambda-rep", type=float, default=0.35)
    p.add_argument("--eps-entropy", type=float, default=0.3)
    p.add_argument("--tau-s", type=float, default=0.1)
    p.add_argument("--tau-t", type=float, default=0.05)
    p.add_argument("--sigma-view", type=float, default=0.05)
    p.add_argument("--no-selection", action="store_true")
    p.add_argument("--no-prior", action="store_true")
    p.add_argument("--no-conf", action="store_true")
    p.add_argument("--no-dens", action="store_true")

    p = add("estimate-k", "estimate the total number of classes")
    p.add_argument("--manifest", type=Path, required=True)
    graph_opts(p)
    p.add_argument("--lambda-nmds", type=_unit_open, default=0.08)
    p.add_argument("--brent-tol", type=float, default=1.0)
    p.add_argument("--exhaustive-cutoff", type=_positive_int, default=50)
    p.add_argument("--checkpoint", type=Path, default=None, help="prototypes supplying connectivity")

    p = add("eval", "score predictions against ground truth")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True, help="one predicted cluster id per sample")
    p.add_argument("--subset", type=Path, default=None, help="sample ids to score (default: unlabelled)")
    p.add_argument("--all", action="store_true", help="score every sample")
    return parser


def _parse(argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config is None or command is None:
        return parser.parse_args(argv)
    try:
        overrides = json.loads(known.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise UsageError("config file must hold a JSON object")
    overrides = {k.replace("-", "_"): v for k, v in overrides.items()}
    sub = parser._subparsers._group_actions[0].choices[command]
    known_dests = {a.dest for a in sub._actions}
    unknown = sorted(set(overrides) - known_dests)
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    for action in sub._actions:
        if action.dest in overrides:
            action.required = False
    # config replaces defaults; explicit flags still win.
    # String defaults go through each option's type check like typed flags.
    sub.set_defaults(**{k: v if isinstance(v, bool) or v is None else str(v) for k, v in overrides.items()})
    return parser.parse_args(argv)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _probs(x: np.ndarray, checkpoint: Path | None):
    if checkpoint is None:
        return None
    protos, _ = classifier.load_checkpoint(checkpoint)
    if protos.d != x.shape[1]:
        raise ValueError(f"checkpoint dimension {protos.d} does not match embeddings ({x.shape[1]})")
    return classifier.predict(x, protos, protos.tau_t)


def cmd_synth(args) -> dict:
    if args.imbalance < 1:
        raise UsageError("--imbalance must be >= 1")
    if args.spread <= 0:
        raise UsageError("--spread must be > 0")
    emb, full = store.generate_synthetic(args.classes, args.dim, args.imbalance, args.head, args.seed, args.spread)
    info = store.split_labelled(full, args.frac_old, args.frac_labelled, args.seed)
    manifest = store.save_dataset(args.out, emb, info, args.name)
    counts = store.class_counts(info.true_labels)
    return {"manifest": str(manifest), "n": emb.n, "d": emb.d, "counts": counts.tolist(),
            "imbalance": store.imbalance_factor(counts), "labelled": int(info.labelled_ids.size),
            "old_classes": sorted(info.old_class_set)}


def cmd_knn(args) -> dict:
    emb, _ = store.load_dataset(args.manifest)
    graph = knn.build_knn(emb, args.k)
    path = args.out / "knn.bin"
    knn.save_graph(path, graph)
    return {"graph": str(path), "n": graph.n, "k": graph.k}


def cmd_density(args) -> dict:
    emb, _ = store.load_dataset(args.manifest)
    probs = _probs(emb.data, args.checkpoint)
    mode = args.mode or (density.AFFINITY_ONLY if probs is None else density.CONNECTIVITY_AFFINITY)
    graph = knn.build_knn(emb, max(args.k, args.ks))
    dmap = density.compute_density(graph.truncate(args.k), probs, mode)
    raw = density.find_peaks(dmap, graph.truncate(args.k))
    kept = density.nmds(zip(raw, dmap.densities[raw]), k_s=args.ks, lambda_nmds=args.lambda_nmds, graph=graph)
    _write_json(args.out / "density.json", {
        "mode": mode, "k": args.k, "k_s": args.ks, "lambda_nmds": args.lambda_nmds,
        "densities": dmap.densities.tolist(), "raw_peaks": raw.tolist(), "peaks": kept.peak_ids.tolist(),
    })
    return {"mode": mode, "raw_peaks": int(raw.size), "peaks": len(kept)}


def _selection_config(args) -> selection.SelectionConfig:
    return selection.SelectionConfig(
        eps_conf=args.eps_conf, k=args.k, k_s=args.ks, lambda_nmds=args.lambda_nmds,
        use_conf=not args.no_conf, use_dens=not args.no_dens,
        use_nmds=not getattr(args, "no_nmds", False),
        density_mode=density.AFFINITY_ONLY if getattr(args, "affinity_only", False) else density.CONNECTIVITY_AFFINITY,
        normalize_prior=not getattr(args, "raw_count_prior", False),
        crest_power=getattr(args, "crest_power", None),
    )


def cmd_select(args) -> dict:
    emb, info = store.load_dataset(args.manifest)
    cfg = _selection_config(args)
    probs = _probs(emb.data, args.checkpoint)
    result = selection.resample_epoch(emb, info, probs, cfg)
    _write_json(args.out / "selection.json", result.to_json())
    out = {"S_conf": int(result.conf_ids.size), "S_dens": int(result.dens_ids.size),
           "S": int(result.union_ids.size), "fallback": result.fallback}
    if info.true_labels is not None and result.union_ids.size:
        for key, ids in (("conf", result.conf_ids), ("dens", result.dens_ids), ("S", result.union_ids)):
            if ids.size:
                out[f"lambda_{key}"] = store.imbalance_factor(store.class_counts(info.true_labels[ids]))
    return out


def _n_classes(args) -> int:
    if args.classes is not None:
        return args.classes
    if args.estimate is not None:
        return int(json.loads(args.estimate.read_text())["k_hat"])
    meta = json.loads(args.manifest.read_text())
    if "classes" in meta:
        return int(meta["classes"])
    raise UsageError("class count unknown: pass --classes or --estimate")


def cmd_train(args) -> dict:
    emb, info = store.load_dataset(args.manifest)
    cfg = classifier.TrainConfig(
        n_classes=_n_classes(args), lambda_cls=args.lambda_cls, lambda_rep=args.lambda_rep,
        eps_entropy=args.eps_entropy, tau_s=args.tau_s, tau_t=args.tau_t, lr=args.lr,
        epochs=args.epochs, batch_size=args.batch_size, sigma_view=args.sigma_view,
        use_selection=not args.no_selection, prior_loss=not (args.no_prior or args.no_selection),
        selection=_selection_config(args),
    )
    result = classifier.train(emb, info, cfg, args.seed)
    classifier.save_checkpoint(args.out / "checkpoint.bin", result.prototypes, cfg.epochs)
    with open(args.out / "stats.jsonl", "w") as fh:
        for row in result.history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    with open(args.out / "selections.jsonl", "w") as fh:
        for sel in result.selections:
            fh.write(json.dumps(sel.to_json(), sort_keys=True) + "\n")
    pred = classifier.predict(emb.data, result.prototypes).argmax(axis=1)
    (args.out / "predictions.txt").write_text("".join(f"{v}\n" for v in pred))
    _write_json(args.out / "train_config.json", cfg.to_json())
    out = {"checkpoint": str(args.out / "checkpoint.bin"), "epochs": cfg.epochs, "classes": cfg.n_classes}
    if info.true_labels is not None and info.unlabelled_ids.size:
        unl = info.unlabelled_ids
        sub = result.selections[-1].union_ids if result.selections else None
        pos = np.searchsorted(unl, sub) if sub is not None else None
        report = evaluation.gcd_report(pred[unl], info.true_labels[unl], info.old_class_set, pos)
        _write_json(args.out / "report.json", report.to_json())
        out.update({"acc_all": report.acc_all, "balanced_acc": report.balanced_acc,
                    "balanced_acc_new": report.balanced_acc_new})
    return out


def cmd_estimate(args) -> dict:
    emb, info = store.load_dataset(args.manifest)
    cfg = estimation.EstimationConfig(k=args.k, k_s=args.ks, lambda_nmds=args.lambda_nmds,
                                      brent_tol=args.brent_tol, exhaustive_cutoff=args.exhaustive_cutoff)
    report = estimation.estimate_k(emb, info, _probs(emb.data, args.checkpoint), cfg)
    for stage, seconds in report.timing.items():
        log.info("estimate-k %s: %.3fs", stage, seconds)
    body = report.to_json()
    # wall-clock numbers are not reproducible; they live in the log only
    body.pop("timing")
    _write_json(args.out / "estimate.json", body)
    with open(args.out / "probes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["K", "ACC"])
        writer.writerows(sorted(report.probe_history))
    return {"k_hat": report.k_hat, "lower": report.lower, "upper": report.upper,
            "probes": len(report.probe_history), "search": report.search}


def cmd_eval(args) -> dict:
    emb, info = store.load_dataset(args.manifest)
    if info.true_labels is None:
        raise ValueError("manifest has no true_labels to evaluate against")
    pred = store._read_ints(args.pred)
    if pred.size != emb.n:
        raise ValueError(f"{pred.size} predictions for {emb.n} samples")
    if args.subset is not None:
        ids = np.unique(store._read_ints(args.subset))
    elif args.all or info.unlabelled_ids.size == 0:
        ids = np.arange(emb.n)
    else:
        ids = info.unlabelled_ids
    report = evaluation.gcd_report(pred[ids], info.true_labels[ids], info.old_class_set)
    _write_json(args.out / "eval.json", report.to_json())
    return {"acc_all": report.acc_all, "acc_old": report.acc_old, "acc_new": report.acc_new,
            "balanced_acc": report.balanced_acc}


COMMANDS = {
    "synth": cmd_synth,
    "knn": cmd_knn,
    "density": cmd_density,
    "select": cmd_select,
    "train": cmd_train,
    "estimate-k": cmd_estimate,
    "eval": cmd_eval,
}


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _fail(exc: BaseException, code: int) -> int:
    print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = _parse(argv)
    except UsageError as exc:
        return _fail(exc, 2)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(exc, 1)
    handler = logging.FileHandler(args.out / "ltgcd.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        with _thread_limit(args.threads):
            log.info("command %s", " ".join(sys.argv[1:] if argv is None else argv))
            summary = COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(exc, 2)
    except (ValueError, OSError, KeyError, classifier.TrainingDiverged) as exc:
        log.error("%s failed: %s", args.command, exc)
        return _fail(exc, 1)
    finally:
        root.removeHandler(handler)
        handler.close()
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
