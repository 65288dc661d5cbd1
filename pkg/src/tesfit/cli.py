"""Command-line entry point.

Subcommands: synth, train, eval, grid, verify, gradcheck, fewshot,
longtail.  Every option can come from a YAML config file (flat keys, with
an optional nested hyperparams section) and be overridden by flags.
Exit codes: 0 success, 1 runtime failure or violated bound, 2 usage or
config error.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import yaml

from . import data as dio
from .errors import ConvergenceError, EvaluationError, FormatError, ParameterError, TrainingError
from .losses import Hyperparams, zero_shot_predict
from .metrics import evaluate, write_confusion_csv
from .model import ModelSnapshot, rebuild_for_inference
from .optim import TrainConfig, TrainingTrace, grid_search, train, write_grid_csv
from .pipeline import displacement_run, gradcheck_suite, initialize_model, theorem2_random_draws
from .theory import estimate_constants, verify_corollary1, verify_prop1, verify_theorem1, write_bound_csv


class UsageError(Exception):
    """Config or argument problem detected before any work starts."""


# keys accepted in YAML config files, per command
_COMMON_TRAIN_KEYS = {
    "features", "proxies", "out", "val_fraction", "loss", "epochs", "batch_size",
    "momentum", "lr", "lr_backbone", "lr_head", "weight_decay", "seed",
    "use_adapter", "classifier_init", "head_init", "probe_l2", "hidden_dim",
    "lambda_v", "lambda_t", "tau_text", "tau_vision", "reg_lambda", "ls_epsilon",
}
_HP_KEYS = {"lambda_v", "lambda_t", "tau_text", "tau_vision", "reg_lambda", "ls_epsilon"}


def _load_config(path: str | None, allowed: set[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {path} does not exist")
    doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must be a mapping")
    flat: dict = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            # one nested level allowed (e.g. a hyperparams: section)
            for sub, sval in value.items():
                flat[str(sub)] = sval
        else:
            flat[str(key)] = value
    unknown = set(flat) - allowed
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return flat


def _merged(args: argparse.Namespace, config: dict, key: str, default=None):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config and config[key] is not None:
        return config[key]
    return default


def _require_prefix(prefix: str, what: str) -> str:
    for path in dio.dataset_paths(prefix)[:2]:
        if not Path(path).exists():
            raise UsageError(f"{what} file {path} does not exist")
    return prefix


def _train_config_from(args, config) -> tuple[TrainConfig, dict]:
    loss = str(_merged(args, config, "loss", "CE")).upper()
    hp = Hyperparams(
        lambda_v=float(_merged(args, config, "lambda_v", 0.1)),
        lambda_t=float(_merged(args, config, "lambda_t", 0.7)),
        tau_text=float(_merged(args, config, "tau_text", 0.03)),
        tau_vision=float(_merged(args, config, "tau_vision", 1.0)),
        reg_lambda=float(_merged(args, config, "reg_lambda", 1.0)),
        ls_epsilon=float(_merged(args, config, "ls_epsilon", 0.1)),
    )
    lr = float(_merged(args, config, "lr", 0.01))
    wd = _merged(args, config, "weight_decay")
    tc = TrainConfig(
        eta0_classifier=lr,
        eta0_backbone=float(_merged(args, config, "lr_backbone", lr)),
        eta0_head=float(_merged(args, config, "lr_head", lr)),
        epochs=int(_merged(args, config, "epochs", 100)),
        batch_size=int(_merged(args, config, "batch_size", 256)),
        momentum=float(_merged(args, config, "momentum", 0.9)),
        weight_decay=None if wd is None else float(wd),
        seed=int(_merged(args, config, "seed", 0)),
        loss_kind=loss,
        hyperparams=hp,
    )
    extras = {
        "features": _merged(args, config, "features"),
        "proxies": _merged(args, config, "proxies"),
        "out": _merged(args, config, "out", "runs"),
        "val_fraction": float(_merged(args, config, "val_fraction", 0.2)),
        "use_adapter": bool(_merged(args, config, "use_adapter", True)),
        "classifier_init": str(_merged(args, config, "classifier_init", "probe")),
        "head_init": str(_merged(args, config, "head_init", "identity")),
        "probe_l2": float(_merged(args, config, "probe_l2", 1e-2)),
        "hidden_dim": _merged(args, config, "hidden_dim"),
    }
    return tc, extras


def _prepare_run(tc: TrainConfig, extras: dict):
    if extras["features"] is None:
        raise UsageError("a dataset prefix is required (--features)")
    _require_prefix(extras["features"], "feature")
    full = dio.read_features(extras["features"])
    proxies = None
    if tc.loss_kind in ("TLS", "TES_M", "TES_C", "TES"):
        if extras["proxies"] is None:
            raise UsageError(f"loss {tc.loss_kind} requires --proxies")
        if not Path(str(extras["proxies"]) + ".tesf").exists():
            raise UsageError(f"proxy file {extras['proxies']}.tesf does not exist")
        proxies = dio.read_proxies(extras["proxies"])
        if proxies.z.shape[1] != full.n_classes:
            raise UsageError(
                f"proxy count {proxies.z.shape[1]} != class count {full.n_classes}"
            )
    train_ds, val_ds = dio.split(full, extras["val_fraction"], seed=tc.seed)
    return full, train_ds, val_ds, proxies


def _build_model(tc: TrainConfig, train_ds, proxies, extras):
    return initialize_model(
        train_ds,
        tc.loss_kind,
        seed=tc.seed,
        d_z=None if proxies is None else proxies.z.shape[0],
        hidden=extras["hidden_dim"],
        use_adapter=extras["use_adapter"],
        classifier_init=extras["classifier_init"],
        head_init=extras["head_init"],
        probe_mu=extras["probe_l2"],
    )


# --- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.dim < args.classes:
        raise UsageError(f"dim {args.dim} must be >= class count {args.classes}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, truth = dio.synth_generate(args.seed, args.classes, args.dim, args.per_class, args.margin)
    dio.write_features(out / "data", ds)
    proxies = dio.make_noisy_text_proxies(truth, args.seed, noise=args.proxy_noise)
    dio.write_proxies(out / "proxies", proxies)
    print(f"wrote {ds.n} examples, {ds.n_classes} classes to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config, _COMMON_TRAIN_KEYS)
    tc, extras = _train_config_from(args, config)
    _, train_ds, val_ds, proxies = _prepare_run(tc, extras)
    model = _build_model(tc, train_ds, proxies, extras)
    model, trace = train(tc, train_ds, val_ds, model, proxies)

    out = Path(extras["out"])
    out.mkdir(parents=True, exist_ok=True)
    model.snapshot("final").save(out / "snapshot.tesm")
    trace.save(out / "trace.json")
    preds = model.predict(val_ds.features)
    result = evaluate(preds, val_ds.labels, val_ds.n_classes)
    write_confusion_csv(out / "confusion.csv", result, val_ds.class_names)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["top1", "mean_per_class", "n_eval", "final_train_loss"])
        writer.writerow([repr(result.top1), repr(result.mean_per_class),
                         result.n_eval, repr(trace.epoch_train_loss[-1])])
    print(f"top1 {result.top1:.4f}  mean_per_class {result.mean_per_class:.4f}")
    return 0


def cmd_eval(args) -> int:
    _require_prefix(args.features, "feature")
    if not Path(args.snapshot).exists():
        raise UsageError(f"snapshot {args.snapshot} does not exist")
    ds = dio.read_features(args.features)
    snap = ModelSnapshot.load(args.snapshot)
    model = rebuild_for_inference(snap, ds.dim)
    preds = model.predict(ds.features)
    result = evaluate(preds, ds.labels, ds.n_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_confusion_csv(out / "confusion.csv", result, ds.class_names)
    print(f"top1 {result.top1:.4f}  mean_per_class {result.mean_per_class:.4f}")
    return 0


def cmd_zeroshot(args) -> int:
    _require_prefix(args.features, "feature")
    ds = dio.read_features(args.features)
    proxies = dio.read_proxies(args.proxies)
    z_tilde = proxies.z / np.linalg.norm(proxies.z, axis=0, keepdims=True)
    preds = zero_shot_predict(ds.features, z_tilde)
    result = evaluate(preds, ds.labels, ds.n_classes)
    print(f"top1 {result.top1:.4f}  mean_per_class {result.mean_per_class:.4f}")
    return 0


def cmd_grid(args) -> int:
    config = _load_config(args.config, _COMMON_TRAIN_KEYS)
    tc, extras = _train_config_from(args, config)
    _, train_ds, val_ds, proxies = _prepare_run(tc, extras)
    if val_ds.n == 0:
        raise UsageError("grid search needs a nonempty validation split")

    def factory(cell_config):
        return _build_model(cell_config, train_ds, proxies, extras)

    best, rows = grid_search(
        tc, train_ds, val_ds, factory, proxies,
        search_weight_decay=args.search_weight_decay,
        search_lambda_t=args.search_lambda_t,
    )
    out = Path(extras["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_grid_csv(out / "grid.csv", rows)
    best_doc = {
        "features": extras["features"],
        "proxies": extras["proxies"],
        "val_fraction": extras["val_fraction"],
        "loss": best.loss_kind,
        "epochs": best.epochs,
        "batch_size": best.batch_size,
        "momentum": best.momentum,
        "lr": best.eta0_classifier,
        "lr_backbone": best.eta0_backbone,
        "lr_head": best.eta0_head,
        "weight_decay": best.weight_decay,
        "seed": best.seed,
        "use_adapter": extras["use_adapter"],
        "classifier_init": extras["classifier_init"],
        "head_init": extras["head_init"],
        "probe_l2": extras["probe_l2"],
        "hyperparams": {
            "lambda_v": best.hyperparams.lambda_v,
            "lambda_t": best.hyperparams.lambda_t,
            "tau_text": best.hyperparams.tau_text,
            "tau_vision": best.hyperparams.tau_vision,
            "reg_lambda": best.hyperparams.reg_lambda,
            "ls_epsilon": best.hyperparams.ls_epsilon,
        },
    }
    (out / "best.yaml").write_text(yaml.safe_dump(best_doc, sort_keys=True), encoding="utf-8")
    print(f"{len(rows)} cells; best lr {best.eta0_classifier:g} "
          f"val_top1 {max(r['val_top1'] for r in rows):.4f}")
    return 0


def cmd_verify(args) -> int:
    reports = []
    if args.trace:
        if not Path(args.trace).exists():
            raise UsageError(f"trace file {args.trace} does not exist")
        _require_prefix(args.features, "feature")
        ds = dio.read_features(args.features)
        trace = TrainingTrace.load(args.trace)
        m, lips, delta = estimate_constants(ds.features, ds.labels, args.mu, trace)
        d = ds.dim
        w0 = trace.initial.groups["classifier"].reshape(d, -1)
        wt = trace.final.groups["classifier"].reshape(d, -1)
        from .model import parameter_distance
        eps = parameter_distance(trace.initial, trace.final, "adapter")
        thm1 = verify_theorem1(w0, wt, m, lips, eps)
        prop1 = verify_prop1(trace)
        reports += [thm1, prop1, verify_corollary1(thm1, prop1)]
    else:
        for eta0 in args.eta0_backbone:
            art = displacement_run(seed=args.seed, eta0_backbone=eta0, mu=args.mu)
            for rep in art.reports:
                rep.name = f"{rep.name}@eta0={eta0:g}"
                reports.append(rep)
    reports.append(theorem2_random_draws(draws=args.theorem2_draws, seed=args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_bound_csv(out / "bounds.csv", reports)
    violated = [r.name for r in reports if r.violated]
    for r in reports:
        status = "HOLDS" if r.holds else ("violated" if r.violated else "not asserted")
        print(f"{r.name}: lhs={r.lhs:.6g} rhs={r.rhs:.6g} [{status}]")
    if violated:
        print(f"violated: {violated}", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    rows = gradcheck_suite(points=args.points, seed=args.seed)
    worst = 0.0
    print(f"{'loss':8s} {'point':5s} {'max_rel_err':>12s} {'max_abs_err':>12s}")
    for kind, point, report in rows:
        worst = max(worst, report.max_rel_error)
        print(f"{kind:8s} {point:<5d} {report.max_rel_error:12.3e} {report.max_abs_error:12.3e}")
    print(f"worst relative error {worst:.3e} over {len(rows)} rows")
    return 0 if worst <= args.tolerance else 1


def cmd_fewshot(args) -> int:
    _require_prefix(args.input, "feature")
    ds = dio.read_features(args.input)
    out = dio.few_shot_subsample(ds, fraction=args.fraction,
                                 min_per_class=args.min_per_class, seed=args.seed)
    dio.write_features(args.out, out)
    print(f"kept {out.n}/{ds.n} examples")
    return 0


def cmd_longtail(args) -> int:
    _require_prefix(args.input, "feature")
    ds = dio.read_features(args.input)
    out = dio.long_tail_subsample(ds, imbalance_ratio=args.ratio, seed=args.seed)
    dio.write_features(args.out, out)
    print(f"kept {out.n}/{ds.n} examples, counts {out.class_counts().tolist()}")
    return 0


# --- parser ------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file; flags override its keys")
    p.add_argument("--features", help="dataset prefix (expects .tesf/.tesl/.names)")
    p.add_argument("--proxies", help="text proxy prefix (expects .tesf/.names)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--loss", choices=["CE", "LS", "TLS", "TES_M", "TES_C", "TES",
                                      "ce", "ls", "tls", "tes_m", "tes_c", "tes"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-backbone", dest="lr_backbone", type=float)
    p.add_argument("--lr-head", dest="lr_head", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-v", dest="lambda_v", type=float)
    p.add_argument("--lambda-t", dest="lambda_t", type=float)
    p.add_argument("--tau-text", dest="tau_text", type=float)
    p.add_argument("--tau-vision", dest="tau_vision", type=float)
    p.add_argument("--reg-lambda", dest="reg_lambda", type=float)
    p.add_argument("--ls-epsilon", dest="ls_epsilon", type=float)
    p.add_argument("--use-adapter", dest="use_adapter", type=lambda s: s.lower() != "false")
    p.add_argument("--classifier-init", dest="classifier_init", choices=["probe", "gaussian"])
    p.add_argument("--head-init", dest="head_init", choices=["identity", "gaussian"])
    p.add_argument("--probe-l2", dest="probe_l2", type=float)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tesfit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--per-class", dest="per_class", type=int, default=100)
    p.add_argument("--margin", type=float, default=3.0)
    p.add_argument("--proxy-noise", dest="proxy_noise", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a classifier head")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a snapshot on a dataset")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", default="evalout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("zeroshot", help="zero-shot accuracy of text proxies")
    p.add_argument("--features", required=True)
    p.add_argument("--proxies", required=True)
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("grid", help="hyperparameter grid search")
    _add_train_flags(p)
    p.add_argument("--search-weight-decay", action="store_true")
    p.add_argument("--search-lambda-t", action="store_true")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("verify", help="run the displacement-bound verifiers")
    p.add_argument("--out", default="verifyout")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mu", type=float, default=1e-2)
    p.add_argument("--eta0-backbone", dest="eta0_backbone", type=float, nargs="+",
                   default=[1e-4, 1e-3])
    p.add_argument("--theorem2-draws", dest="theorem2_draws", type=int, default=1000)
    p.add_argument("--trace", help="verify an existing trace instead of a fresh run")
    p.add_argument("--features", help="dataset prefix for --trace mode")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference audit of every loss")
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fewshot", help="per-class fractional subsample with a floor")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--min-per-class", dest="min_per_class", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("longtail", help="exponential long-tail subsample")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_longtail)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, FormatError, ConvergenceError, EvaluationError, OSError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime contract: anything unexpected is a failure
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
