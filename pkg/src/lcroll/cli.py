"""Command-line entry point: ``lcroll {generate,train,rollout,evaluate}``.

Every command writes ``<out>.manifest.json`` next to its primary output with
the resolved arguments, seeds, output hashes and timings. Primary outputs
depend only on the arguments, so re-running a manifest reproduces them
byte for byte. On failure, partially written outputs are removed.

Seed derivation: ``generate`` passes ``--seed`` to the generator; ``train``
uses it for the train/test split, for model initialization and for training;
``rollout`` and ``evaluate`` use it as the root of the per-trajectory and
per-cell streams.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from lcroll import vrnn
from lcroll.baselines import StaticForestModel, fit_static
from lcroll.curve_data import (
    DatasetError,
    NormalizationRecord,
    SplitSpec,
    apply_normalization,
    load_dataset,
    normalize,
    save_dataset,
    split,
)
from lcroll.evaluation import (
    EvalProtocol,
    LsvMethod,
    RolloutMethod,
    StaticMethod,
    emit_plot_data,
    evaluate,
    write_report_json,
)
from lcroll.forest import ForestTrainConfig, RegressionForest, fit_forest, load_forest_doc, save_forest
from lcroll.rollout import (
    RolloutConfig,
    make_training_windows,
    roll_out,
    vrnn_predictor,
    windowed_forest_predictor,
)
from lcroll.synth_bench import ConfigSpace, GeneratorSpec, generate_benchmark

log = logging.getLogger("lcroll")


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fmt_from(path: Path, explicit: str | None) -> str:
    if explicit:
        return explicit
    return "json" if path.suffix.lower() == ".json" else "csv"


def _write_manifest(out: Path, args: argparse.Namespace, argv: list[str], outputs: list[Path],
                    started: float, inputs: list[Path] = ()) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": args.command,
        "argv": argv,
        "config": resolved,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _sha256(p) for p in inputs if p.is_file()},
        "outputs": {str(p): _sha256(p) for p in outputs if p.is_file()},
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    with open(out.parent / (out.name + ".manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=1, default=str)
        fh.write("\n")


# ---------------------------------------------------------------------------
# model files


def load_model(path: Path):
    """Returns (kind, model object, document)."""
    with open(path) as fh:
        doc = json.load(fh)
    kind = doc.get("type")
    if kind == "vrnn":
        return kind, vrnn.VrnnModel.from_dict(doc), doc
    if kind in ("rf", "static"):
        forest = RegressionForest.from_dict(load_forest_doc(path))
        if kind == "rf":
            return kind, forest, doc
        return kind, StaticForestModel(forest, int(doc["max_epoch"])), doc
    raise UsageError(f"{path}: unknown model type {kind!r}")


def method_from_model(kind: str, model, doc: dict):
    if kind == "vrnn":
        return RolloutMethod(vrnn_predictor(model))
    if kind == "rf":
        return RolloutMethod(windowed_forest_predictor(model, int(doc["window"])))
    return StaticMethod(model)


def _normalization(doc: dict) -> NormalizationRecord:
    return NormalizationRecord.from_dict(doc.get("normalization", {"scheme": "none"}))


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> list[Path]:
    out = Path(args.out)
    spec = GeneratorSpec(args.configs, args.epochs, args.noise, "exp_saturation", args.seed)
    dataset = generate_benchmark(ConfigSpace(), spec)
    save_dataset(dataset, out, _fmt_from(out, args.format))
    log.info("wrote %d curves x %d epochs to %s", args.configs, args.epochs, out)
    return [out]


_VRNN_FLAGS = ("lstm_units", "mlp_units", "config_mlp_units", "stacked_lstms", "mlp_layers",
               "config_mlp_layers", "dropout", "lr", "final_lr_fraction", "momentum", "batch",
               "epochs", "scheduler", "initial_observed")
_FOREST_FLAGS = ("trees", "max_depth", "min_samples_leaf", "feature_subsample", "no_bootstrap")


def _given(args, names) -> list[str]:
    return [n for n in names if getattr(args, n) not in (None, False)]


def cmd_train(args) -> list[Path]:
    if args.model != "rf" and args.window is not None:
        raise UsageError("--window only applies to --model rf")
    if args.model == "vrnn" and _given(args, _FOREST_FLAGS):
        raise UsageError(f"forest flags {_given(args, _FOREST_FLAGS)} do not apply to vrnn")
    if args.model != "vrnn" and _given(args, _VRNN_FLAGS):
        raise UsageError(f"vrnn flags {_given(args, _VRNN_FLAGS)} do not apply to {args.model}")

    data_path = Path(args.data)
    dataset = load_dataset(data_path)
    train_set, test_set = split(dataset, SplitSpec(args.test_fraction, args.seed))
    train_set, record = normalize(train_set, args.normalize)

    out = Path(args.out)
    extra = {"normalization": record.to_dict(), "trained_on": dataset.name}
    if args.model in ("rf", "rfb"):
        fcfg = ForestTrainConfig(
            num_trees=args.trees or 100,
            max_depth=args.max_depth or 64,
            min_samples_leaf=args.min_samples_leaf or 1,
            feature_subsample=args.feature_subsample or 1.0 / 3.0,
            bootstrap=not args.no_bootstrap,
            seed=args.seed,
        )
        if args.model == "rf":
            window = args.window or 4
            X, y = make_training_windows(train_set, window)
            save_forest(fit_forest(X, y, fcfg), out, type="rf", window=window, **extra)
        else:
            model = fit_static(train_set, fcfg)
            save_forest(model.forest, out, type="static", max_epoch=model.max_epoch, **extra)
    else:
        arch = vrnn.Architecture(
            lstm_units=args.lstm_units or 6,
            mlp_units=args.mlp_units or 103,
            config_mlp_units=args.config_mlp_units or 115,
            num_stacked_lstms=args.stacked_lstms or 2,
            mlp_layers=args.mlp_layers or 1,
            config_mlp_layers=args.config_mlp_layers or 1,
        )
        tcfg = vrnn.VrnnTrainConfig(
            initial_lr=args.lr or 0.027,
            final_lr_fraction=args.final_lr_fraction or 0.0008,
            momentum=0.9 if args.momentum is None else args.momentum,
            batch_size=args.batch or 22,
            epochs=args.epochs or 100,
            scheduler=args.scheduler or "cos",
            curriculum_initial_len=args.initial_observed or 5,
            seed=args.seed,
        )
        dropout = 0.1 if args.dropout is None else args.dropout
        model = vrnn.init_model(dataset.config_dim, arch, dropout, args.seed)
        model, history = vrnn.train(model, train_set, tcfg)
        log.info("vrnn full-length loss %.6g -> %.6g", history.initial_full_loss,
                 history.final_full_loss)
        vrnn.save_model(model, out, **extra)

    split_path = out.parent / (out.name + ".split.json")
    with open(split_path, "w") as fh:
        json.dump({"dataset": str(data_path), "seed": args.seed,
                   "test_fraction": args.test_fraction,
                   "train_ids": train_set.ids, "test_ids": test_set.ids}, fh, indent=1)
        fh.write("\n")
    return [out, split_path]


def cmd_rollout(args) -> list[Path]:
    kind, model, doc = load_model(Path(args.model))
    if kind == "static":
        raise UsageError("static models do not roll out; use evaluate")
    dataset = apply_normalization(load_dataset(Path(args.data)), _normalization(doc))
    try:
        curve = dataset.get(args.curve)
    except KeyError:
        shown = ", ".join(dataset.ids[:20]) + (" ..." if len(dataset) > 20 else "")
        raise UsageError(f"unknown curve id {args.curve!r}; available: {shown}") from None
    if args.observed > len(curve):
        raise UsageError(f"curve {curve.id} has only {len(curve)} epochs")
    predictor = method_from_model(kind, model, doc).predictor
    result = roll_out(predictor, curve.config, curve.values[: args.observed],
                      RolloutConfig(args.rollouts, args.horizon, args.seed))
    out = Path(args.out)
    outputs = [out]
    traj = Path(args.trajectories) if args.trajectories else None
    if traj:
        outputs.append(traj)
    result.write_csv(out, traj)
    return outputs


def cmd_evaluate(args) -> list[Path]:
    data_path = Path(args.data)
    dataset = load_dataset(data_path)
    if args.split:
        with open(args.split) as fh:
            test_ids = set(json.load(fh)["test_ids"])
        dataset = dataset.replace_curves([c for c in dataset.curves if c.id in test_ids])
        if len(dataset) == 0:
            raise UsageError(f"no curves of {data_path} are listed in {args.split}")

    names = args.name or []
    if names and len(names) != len(args.model):
        raise UsageError("--name must be given once per --model")
    methods = {}
    records = set()
    for i, spec in enumerate(args.model):
        if spec == "lsv":
            name, method = "LSV", LsvMethod()
        else:
            kind, model, doc = load_model(Path(spec))
            rec = _normalization(doc)
            records.add(json.dumps(rec.to_dict(), sort_keys=True))
            method = method_from_model(kind, model, doc)
            name = {"vrnn": "VRNN", "rf": f"RF {doc.get('window')}", "static": "RF-B"}[kind]
        if names:
            name = names[i]
        if name in methods:
            raise UsageError(f"duplicate method name {name!r}; use --name")
        methods[name] = method
    if len(records) > 1:
        raise UsageError("models were trained with different normalizations")
    record = NormalizationRecord.from_dict(json.loads(records.pop())) if records else \
        NormalizationRecord("none")
    dataset = apply_normalization(dataset, record)

    targets = None
    if args.target is not None:
        targets = (args.target,)
    elif args.targets and args.targets != "all":
        targets = tuple(_int_list(args.targets))
    protocol = EvalProtocol(
        tuple(args.observed), targets, args.rollouts, args.seed,
        "raw" if record.scheme == "none" else "normalized",
    )
    report = evaluate(methods, dataset, protocol)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    write_report_json(report, report_path)
    emit_plot_data(report, out_dir)
    for s in report.summaries:
        ll = "--" if s.avg_median_ll is None else f"{s.avg_median_ll:.4g}"
        print(f"{s.method:8s} observed={s.observed:3d}  mse={s.avg_mse:.4g}  ll={ll}")
    return [report_path] + [out_dir / n for n in
                            ("metrics_by_target.csv", "adaptation.csv", "predicted_vs_true.csv")]


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcroll", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic learning-curve benchmark")
    p.add_argument("--configs", type=_positive_int, default=5000)
    p.add_argument("--epochs", type=_positive_int, default=50)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["csv", "json"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="split a dataset and train a model on the train side")
    p.add_argument("--model", choices=["vrnn", "rf", "rfb"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--normalize", choices=["none", "minmax_per_dataset"], default="none")
    p.add_argument("--window", type=_positive_int, help="lag window K (rf only, default 4)")
    g = p.add_argument_group("forest")
    g.add_argument("--trees", type=_positive_int)
    g.add_argument("--max-depth", type=_positive_int)
    g.add_argument("--min-samples-leaf", type=_positive_int)
    g.add_argument("--feature-subsample", type=float)
    g.add_argument("--no-bootstrap", action="store_true")
    g = p.add_argument_group("vrnn (defaults: incumbent configuration)")
    g.add_argument("--lstm-units", type=_positive_int)
    g.add_argument("--mlp-units", type=_positive_int)
    g.add_argument("--config-mlp-units", type=_positive_int)
    g.add_argument("--stacked-lstms", type=int, choices=[1, 2])
    g.add_argument("--mlp-layers", type=_positive_int)
    g.add_argument("--config-mlp-layers", type=_positive_int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--final-lr-fraction", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--batch", type=_positive_int)
    g.add_argument("--epochs", type=_positive_int)
    g.add_argument("--scheduler", choices=["cos", "exp", "const"])
    g.add_argument("--initial-observed", type=_positive_int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="extrapolate one curve and write mean/variance")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--curve", required=True)
    p.add_argument("--observed", type=int, required=True)
    p.add_argument("--horizon", type=_positive_int, default=50)
    p.add_argument("--rollouts", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trajectories", help="optional per-trajectory CSV")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("evaluate", help="score models on test curves over an observed-epoch sweep")
    p.add_argument("--model", action="append", required=True,
                   help="model file, or 'lsv'; repeatable")
    p.add_argument("--name", action="append", help="display name per --model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="split record from train; restricts to its test ids")
    p.add_argument("--observed", type=_int_list, default=[4, 8, 16, 32])
    p.add_argument("--targets", default="all", help="comma list or 'all'")
    p.add_argument("--target", type=_positive_int, help="single target epoch")
    p.add_argument("--rollouts", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    out = Path(args.out)
    existed = {p: p.exists() for p in _candidate_outputs(args)}
    try:
        outputs = args.func(args)
    except (UsageError, DatasetError, ValueError, FileNotFoundError, KeyError) as exc:
        for p, was_there in existed.items():
            if not was_there and p.is_file():
                p.unlink()
        print(f"lcroll {args.command}: error: {exc}", file=sys.stderr)
        return 2
    inputs = [Path(x) for x in (getattr(args, "data", None), ) if x]
    if args.command != "evaluate":
        inputs += [Path(m) for m in [getattr(args, "model", None)] if isinstance(m, str)]
    _write_manifest(out, args, argv, outputs, started, inputs)
    return 0


def _candidate_outputs(args) -> list[Path]:
    out = Path(args.out)
    if args.command == "evaluate":
        return [out / n for n in ("report.json", "metrics_by_target.csv", "adaptation.csv",
                                  "predicted_vs_true.csv")]
    paths = [out, out.parent / (out.name + ".split.json")]
    if getattr(args, "trajectories", None):
        paths.append(Path(args.trajectories))
    return paths


if __name__ == "__main__":
    sys.exit(main())
