"""Command-line entry point.

Exit status: 0 on success, 2 on a configuration error, 3 on a runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from .autoencoder import AeModel, reconstruction_mse, select_threshold, train_autoencoder
from .config import ConfigError, load_config
from .heuristics import DEFAULT_THRESHOLDS, builtin_rules, label_dataset
from .metrics import binary_metrics, multilabel_metrics
from .pipeline import PipelineError, run_experiment
from .resampling import label_imbalance_ratio, resample_dataset
from .semisup import OneClassModel, fit_detector, threshold_scores
from .supervised import (
    ALGORITHMS,
    MultiLabelModel,
    feature_importance_nfiv,
    load_model,
    save_model,
    train_classifier,
    wrap_binary_relevance,
)
from .telemetry import CATEGORIES, FEATURES, GeneratorConfig, fit_standardizer, generate_synthetic, read_dataset, write_dataset

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _params(pairs: list[str]) -> dict:
    """``key=value`` pairs; values parse as int, float, None or string."""
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        for cast in (int, float):
            try:
                out[key] = cast(value)
                break
            except ValueError:
                continue
        else:
            out[key] = None if value.lower() == "none" else value
    return out


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def cmd_generate(args) -> None:
    cfg = GeneratorConfig(n_benign=args.n_benign, n_anomalous=args.n_anomalous, seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_dataset(generate_synthetic(cfg), args.out)


def cmd_label(args) -> None:
    params = _params(args.param)
    unknown = set(params) - set(DEFAULT_THRESHOLDS)
    if unknown:
        raise ConfigError(f"unknown heuristic threshold(s) {sorted(unknown)}")
    ds = read_dataset(args.input)
    labeled, tags = label_dataset(ds, builtin_rules(params))
    write_dataset(labeled, args.out)
    print(f"{len(tags.tags)} tags on {len({a for a, _ in tags.tags})} accounts")


def cmd_resample(args) -> None:
    ds = read_dataset(args.input)
    mode = {"smote": "binary", "mlsmote": "multilabel"}[args.mode]
    before = label_imbalance_ratio(ds.labels[ds.is_anomalous])
    out, flags = resample_dataset(ds, mode, args.k, args.smote_pct, args.lir_critical, args.seed)
    after = label_imbalance_ratio(out.labels[out.is_anomalous])
    write_dataset(out, args.out)
    _print_json({"synthetic": int(flags.sum()), "lir_before": before.to_dict(), "lir_after": after.to_dict()})


def cmd_train(args) -> None:
    if args.algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {args.algorithm!r}")
    ds = read_dataset(args.input)
    params = _params(args.param)
    std = fit_standardizer(ds.X)
    if args.task == "binary":
        model = train_classifier(args.algorithm, ds.X, ds.is_anomalous.astype(int), seed=args.seed, standardization=std, **params)
    else:
        anomalous = ds.subset(ds.is_anomalous)
        std = fit_standardizer(anomalous.X)
        model = wrap_binary_relevance(args.algorithm, anomalous.X, anomalous.labels, seed=args.seed, standardization=std, **params)
    save_model(model, args.out)


def cmd_train_semisup(args) -> None:
    ds = read_dataset(args.input)
    benign = ds.X[~ds.is_anomalous] if ds.labels is not None else ds.X
    model = fit_detector(args.algorithm, benign, seed=args.seed, **_params(args.param))
    _, thr = threshold_scores(model, model.score(benign), args.contamination)
    model.with_threshold(thr).save(args.out)


def _load_any(path: str):
    with open(path) as fh:
        d = json.load(fh)
    if "architecture" in d:
        return AeModel.from_dict(d)
    if d.get("algorithm") in ("iforest", "lof", "elliptic", "ocsvm"):
        return OneClassModel.from_dict(d)
    return load_model(path)


def cmd_evaluate(args) -> None:
    model = _load_any(args.model)
    ds = read_dataset(args.input)
    if isinstance(model, MultiLabelModel):
        sub = ds.subset(ds.is_anomalous)
        rep = multilabel_metrics(model.predict(sub.X), sub.labels, model.score(sub.X))
    else:
        rep = binary_metrics(model.predict(ds.X), ds.is_anomalous.astype(int), model.score(ds.X))
    _print_json(rep.to_dict())


def cmd_predict(args) -> None:
    model = _load_any(args.model)
    ds = read_dataset(args.input)
    scores = np.atleast_2d(model.score(ds.X).T).T
    bits = np.atleast_2d(model.predict(ds.X).T).T
    names = list(CATEGORIES) if scores.shape[1] == len(CATEGORIES) and isinstance(model, MultiLabelModel) else ["anomalous"]
    with open(args.out, "w", newline="") if args.out else _stdout() as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["account_id", "day_index", *(f"score_{n}" for n in names), *(f"pred_{n}" for n in names)])
        for i in range(len(ds)):
            w.writerow([ds.account_ids[i], int(ds.day_index[i]), *(repr(float(s)) for s in scores[i]), *(int(b) for b in bits[i])])


class _stdout:
    def __enter__(self):
        return sys.stdout

    def __exit__(self, *exc):
        return False


def cmd_importance(args) -> None:
    model = load_model(args.model)
    nfiv = np.atleast_2d(feature_importance_nfiv(model))
    header = list(CATEGORIES) if isinstance(model, MultiLabelModel) else ["nfiv"]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["feature", *header])
    for i, f in enumerate(FEATURES[: nfiv.shape[1]]):
        w.writerow([f, *(repr(float(v)) for v in nfiv[:, i])])


def cmd_train_ae(args) -> None:
    ds = read_dataset(args.input)
    benign = ds.X[~ds.is_anomalous] if ds.labels is not None else ds.X
    rng = np.random.default_rng(args.seed)
    perm = rng.permutation(len(benign))
    n_val = max(1, int(round(args.validation * len(benign))))
    val, fit = benign[perm[:n_val]], benign[perm[n_val:]]
    model = train_autoencoder(fit, epochs=args.epochs, batch=args.batch, lr=args.lr, seed=args.seed)
    model = model.with_threshold(select_threshold(model, val, args.quantile))
    model.save(args.out)
    if args.loss_csv:
        model.write_loss_csv(args.loss_csv)


def cmd_score_ae(args) -> None:
    model = AeModel.load(args.model)
    ds = read_dataset(args.input)
    mse = reconstruction_mse(model, ds.X)
    with open(args.out, "w", newline="") if args.out else _stdout() as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["account_id", "day_index", "mse", "anomalous"])
        for i in range(len(ds)):
            w.writerow([ds.account_ids[i], int(ds.day_index[i]), repr(float(mse[i])), int(mse[i] > model.threshold)])


def cmd_run(args) -> None:
    cfg = load_config(args.config, args.seed, args.out)
    bundle = run_experiment(cfg)
    print(f"wrote {cfg.out}/report.json")
    _summary(bundle.report)


def cmd_report(args) -> None:
    with open(args.report) as fh:
        _summary(json.load(fh))


def _fmt(v) -> str:
    return "  -  " if v is None else f"{v:.3f}"


def _summary(report: dict) -> None:
    cols = ("accuracy", "precision", "recall", "f05_score", "f1_score", "f2_score", "roc_auc")
    if "semisup" in report:
        print("\nsemi-supervised (held-out test)")
        print(f"{'model':<20}" + "".join(f"{c:>11}" for c in cols))
        for m in report["semisup"]["models"].values():
            print(f"{m['display_name']:<20}" + "".join(f"{_fmt(m['test'].get(c)):>11}" for c in cols))
    if "binary" in report:
        print("\nbinary classification (held-out test)")
        print(f"{'model':<20}" + "".join(f"{c:>11}" for c in cols))
        for name, m in report["binary"]["models"].items():
            print(f"{name:<20}" + "".join(f"{_fmt(m['test'].get(c)):>11}" for c in cols))
    if "multilabel" in report:
        mcols = ("emr", "hamming_loss", "hamming_score", "f1_score", "roc_auc")
        print("\nmulti-label classification (held-out test; original data in parentheses)")
        print(f"{'model':<20}" + "".join(f"{c:>20}" for c in mcols))
        for name, variants in report["multilabel"]["models"].items():
            main = variants.get("upsampled", variants.get("original"))
            orig = variants.get("original") if "upsampled" in variants else None
            cells = []
            for c in mcols:
                cell = _fmt(main["test"].get(c))
                if orig is not None:
                    cell += f" ({_fmt(orig['test'].get(c))})"
                cells.append(f"{cell:>20}")
            print(f"{name:<20}" + "".join(cells))
    if "nfiv" in report:
        print("\ntop-3 features by normalized importance")
        for c, top in report["nfiv"]["top3"].items():
            print(f"  {c:<8} " + ", ".join(top))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamshield", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic labeled dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--n-benign", type=int, default=20_000)
    g.add_argument("--n-anomalous", type=int, default=2_000)
    g.set_defaults(func=cmd_generate)

    lb = sub.add_parser("label", help="label records with the built-in heuristics")
    lb.add_argument("--in", dest="input", required=True)
    lb.add_argument("--out", required=True)
    lb.add_argument("--param", action="append", help="threshold override, e.g. T1=120")
    lb.set_defaults(func=cmd_label)

    rs = sub.add_parser("resample", help="append SMOTE / MLSMOTE synthetics")
    rs.add_argument("--in", dest="input", required=True)
    rs.add_argument("--out", required=True)
    rs.add_argument("--mode", choices=("smote", "mlsmote"), default="mlsmote")
    rs.add_argument("--k", type=int, default=5)
    rs.add_argument("--smote-pct", type=int, default=100)
    rs.add_argument("--lir-critical", type=float, default=1.1)
    rs.add_argument("--seed", type=int, default=0)
    rs.set_defaults(func=cmd_resample)

    tr = sub.add_parser("train", help="train a supervised model")
    tr.add_argument("--in", dest="input", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--algorithm", default="gradient_boosting")
    tr.add_argument("--task", choices=("binary", "multilabel"), default="binary")
    tr.add_argument("--param", action="append")
    tr.add_argument("--seed", type=int, default=0)
    tr.set_defaults(func=cmd_train)

    ts = sub.add_parser("train-semisup", help="fit a one-class detector on benign records")
    ts.add_argument("--in", dest="input", required=True)
    ts.add_argument("--out", required=True)
    ts.add_argument("--algorithm", choices=("iforest", "lof", "elliptic", "ocsvm"), default="iforest")
    ts.add_argument("--contamination", type=float, default=0.05)
    ts.add_argument("--param", action="append")
    ts.add_argument("--seed", type=int, default=0)
    ts.set_defaults(func=cmd_train_semisup)

    ev = sub.add_parser("evaluate", help="metrics of a saved model on a labeled CSV")
    ev.add_argument("--model", required=True)
    ev.add_argument("--in", dest="input", required=True)
    ev.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("predict", help="scores and bits of a saved model")
    pr.add_argument("--model", required=True)
    pr.add_argument("--in", dest="input", required=True)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    im = sub.add_parser("importance", help="normalized feature importance of a tree model")
    im.add_argument("--model", required=True)
    im.set_defaults(func=cmd_importance)

    ta = sub.add_parser("train-ae", help="train the autoencoder on benign records")
    ta.add_argument("--in", dest="input", required=True)
    ta.add_argument("--out", required=True)
    ta.add_argument("--epochs", type=int, default=100)
    ta.add_argument("--batch", type=int, default=128)
    ta.add_argument("--lr", type=float, default=1e-3)
    ta.add_argument("--quantile", type=float, default=0.95)
    ta.add_argument("--validation", type=float, default=0.2)
    ta.add_argument("--loss-csv")
    ta.add_argument("--seed", type=int, default=0)
    ta.set_defaults(func=cmd_train_ae)

    sa = sub.add_parser("score-ae", help="reconstruction MSE per record")
    sa.add_argument("--model", required=True)
    sa.add_argument("--in", dest="input", required=True)
    sa.add_argument("--out")
    sa.set_defaults(func=cmd_score_ae)

    rn = sub.add_parser("run", help="run a configured experiment end to end")
    rn.add_argument("--config")
    rn.add_argument("--seed", type=int)
    rn.add_argument("--out")
    rn.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="print the tables of a report.json")
    rp.add_argument("--report", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, KeyError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
