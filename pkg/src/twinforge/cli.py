"""``twinforge`` command line: data, training, evaluation and ledger utilities.

Every subcommand prints one JSON document to stdout (or ``--out``). Exit
status is 0 on success, 1 on validation/usage errors, 2 on internal errors.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from twinforge.contracts import ModelRegistry, PatternFeed, TwinContract
from twinforge.evaluation import (
    default_grid,
    evaluation_report,
    sweep_tau,
    write_curve_csv,
)
from twinforge.exceptions import TwinforgeError
from twinforge.ledger import DynamicMetadata, Ledger
from twinforge.models import (
    BiGRUClassifier,
    DenoisingAutoencoder,
    ThresholdConfig,
    load_model,
    save_model,
)
from twinforge.nn import TrainConfig
from twinforge.telemetry import (
    N_FEATURES,
    WINDOW_ROWS,
    DatasetSplit,
    generate_synthetic,
    ingest_csv,
    normalize_and_split,
    read_patterns,
    window_cycles,
    write_csv,
)

logger = logging.getLogger("twinforge")

SEED_ENV = "TWINFORGE_SEED"
DAE_NAME, CLF_NAME = "dae", "clf"


class UsageError(TwinforgeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _env_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


@dataclass
class RunConfig:
    """Everything a subcommand needs, validated before it does any work."""

    data_dir: Path = None
    model_dir: Path = None
    ledger_file: Path = None
    seed: int = 0
    tau: float = 0.695
    train: TrainConfig = None
    dt_count: int = None
    cycles_per_dt: int = None

    @classmethod
    def from_args(cls, args):
        seed = args.seed if getattr(args, "seed", None) is not None else _env_seed()
        train = None
        if hasattr(args, "epochs"):
            train = TrainConfig(
                learning_rate=args.lr,
                epochs=args.epochs,
                batch_size=args.batch_size,
                dropout_rate=getattr(args, "dropout", 0.0),
                input_noise_sigma=getattr(args, "noise", 0.0),
                seed=seed,
            )
        cfg = cls(
            data_dir=Path(args.data) if getattr(args, "data", None) else None,
            model_dir=Path(args.models) if getattr(args, "models", None) else None,
            ledger_file=Path(args.ledger) if getattr(args, "ledger", None) else None,
            seed=seed,
            tau=getattr(args, "tau", 0.695),
            train=train,
            dt_count=getattr(args, "dts", None),
            cycles_per_dt=getattr(args, "cycles", None),
        )
        ThresholdConfig(cfg.tau)
        if cfg.dt_count is not None and cfg.dt_count < 2:
            raise UsageError("--dts must be >= 2")
        if cfg.cycles_per_dt is not None and cfg.cycles_per_dt < 1:
            raise UsageError("--cycles must be >= 1")
        if hasattr(args, "train_fraction") and not 0.0 < args.train_fraction < 1.0:
            raise UsageError("--train-fraction must lie in (0, 1)")
        return cfg

    def need_data(self):
        if self.data_dir is None or not (self.data_dir / "stats.json").exists():
            raise UsageError(f"dataset directory {self.data_dir} not found (run gen-data)")
        return DatasetSplit.load(self.data_dir)

    def need_models(self, classifier=True):
        if self.model_dir is None or not (self.model_dir / f"{DAE_NAME}.json").exists():
            raise UsageError(f"no trained autoencoder in {self.model_dir} (run train-dae)")
        dae = load_model(self.model_dir, DAE_NAME)
        if not classifier:
            return dae, None
        if not (self.model_dir / f"{CLF_NAME}.json").exists():
            raise UsageError(f"no trained classifier in {self.model_dir} (run train-clf)")
        return dae, load_model(self.model_dir, CLF_NAME)

    def need_ledger_path(self):
        if self.ledger_file is None:
            raise UsageError("--ledger is required")
        if not self.ledger_file.parent.exists():
            raise UsageError(f"ledger directory {self.ledger_file.parent} does not exist")
        return self.ledger_file

    def contract(self, ledger):
        dae, clf = self.need_models()
        split = self.need_data()
        registry = ModelRegistry({DAE_NAME: dae}, {CLF_NAME: clf})
        return TwinContract(ledger, registry, PatternFeed.from_split(split))


# ---------------------------------------------------------------------------
# command implementations


def _split_from_cycles(cycles, args, out_dir):
    split = normalize_and_split(window_cycles(cycles), args.train_fraction, args.seed)
    split.save(out_dir)
    return {
        "out_dir": str(out_dir),
        "cycles": len(cycles),
        "total_samples": len(split.train_X) + len(split.test_X),
        "train_samples": len(split.train_X),
        "test_samples": len(split.test_X),
        "n_classes": split.n_classes,
        "normalization": split.normalization_stats,
        "seed": split.split_seed,
    }


def cmd_gen_data(args, cfg):
    cycles = generate_synthetic(cfg.dt_count, cfg.cycles_per_dt, cfg.seed)
    args.seed = cfg.seed
    out = _split_from_cycles(cycles, args, Path(args.out_dir))
    if args.csv:
        write_csv(cycles, args.csv)
        out["csv"] = str(args.csv)
    return out


def cmd_ingest(args, cfg):
    path = Path(args.csv)
    if not path.exists():
        raise UsageError(f"CSV file {path} not found")
    args.seed = cfg.seed
    cycles = ingest_csv(path)
    out = _split_from_cycles(cycles, args, Path(args.out_dir))
    out["dropped_columns"] = ["voltage_charge"]
    return out


def cmd_train_dae(args, cfg):
    split = cfg.need_data()
    dae = DenoisingAutoencoder.from_config(cfg.train)
    dae.fit(split.train_X, eval_set=split.test_X)
    save_model(dae, cfg.model_dir, DAE_NAME)
    h = dae.history_
    report = {
        "model": str(cfg.model_dir / f"{DAE_NAME}.twm"),
        "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in dae.get_params().items()},
        "train_mse": h["train_mse"],
        "test_mse": h["test_mse"],
        "final_train_mse": dae.reconstruction_mse(split.train_X),
        "final_test_mse": dae.reconstruction_mse(split.test_X),
    }
    (cfg.model_dir / f"{DAE_NAME}_report.json").write_text(json.dumps(report, indent=2))
    return report


def cmd_train_clf(args, cfg):
    split = cfg.need_data()
    dae, _ = cfg.need_models(classifier=False)
    clf = BiGRUClassifier.from_config(cfg.train, hidden_size=args.hidden,
                                      n_classes=split.n_classes)
    Ztr, Zte = dae.transform(split.train_X), dae.transform(split.test_X)
    clf.fit(Ztr, split.train_y, eval_set=(Zte, split.test_y))
    save_model(clf, cfg.model_dir, CLF_NAME)
    report = {"model": str(cfg.model_dir / f"{CLF_NAME}.twm"), "params": clf.get_params(),
              **clf.history_}
    report["final_test_accuracy"] = clf.history_["test_accuracy"][-1] if clf.history_["test_accuracy"] else None
    (cfg.model_dir / f"{CLF_NAME}_report.json").write_text(json.dumps(report, indent=2))
    return report


def _test_predictions(cfg):
    split = cfg.need_data()
    dae, clf = cfg.need_models()
    preds = clf.predict_with_threshold(dae.transform(split.test_X), cfg.tau)
    return list(zip(split.test_y.tolist(), preds)), split.n_classes


def cmd_evaluate(args, cfg):
    pairs, n_classes = _test_predictions(cfg)
    grid = default_grid(args.grid_step) if args.grid_step else None
    return evaluation_report(pairs, n_classes, cfg.tau, grid)


def cmd_sweep_tau(args, cfg):
    pairs, _ = _test_predictions(cfg)
    sweep = sweep_tau(pairs, default_grid(args.grid_step))
    if args.csv:
        write_curve_csv(sweep, args.csv)
    return sweep.to_dict()


def _parse_traits(items):
    traits = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"trait {item!r} must look like trait_type=value")
        k, v = item.split("=", 1)
        traits[k] = v
    return traits


def cmd_mint(args, cfg):
    path = cfg.need_ledger_path()
    ledger = Ledger.load(path)
    if args.metadata:
        doc = DynamicMetadata.from_json_dict(json.loads(Path(args.metadata).read_text()))
    else:
        doc = DynamicMetadata(args.name, args.description, args.image,
                              writable=tuple(_parse_traits(args.trait).items()))
    token_id = ledger.mint(args.owner, doc)
    if args.source:
        ledger.bind(token_id, args.source, DAE_NAME, CLF_NAME, args.interval)
    ledger.save(path)
    return {"token_id": token_id, "uri": ledger.token(token_id).uri, "bound_to": args.source}


def cmd_clone(args, cfg):
    path = cfg.need_ledger_path()
    ledger = Ledger.load(path)
    if args.mode == "uri":
        if not args.uri:
            raise UsageError("--uri is required for --mode uri")
        token_id = ledger.clone_by_uri(args.owner, args.uri)
    elif args.mode == "token":
        if args.token is None:
            raise UsageError("--token is required for --mode token")
        token_id = ledger.clone_by_token_id(args.owner, args.token)
    else:
        if args.token is None:
            raise UsageError("--token (the impersonated source) is required for --mode random")
        token_id = ledger.clone_random(args.owner, args.token, args.fields, cfg.seed)
    if args.source:
        ledger.bind(token_id, args.source, DAE_NAME, CLF_NAME, args.interval)
    ledger.save(path)
    rec = ledger.token(token_id)
    return {"token_id": token_id, "uri": rec.uri, "provenance": rec.provenance.value,
            "source_token": rec.source_token}


def cmd_compare(args, cfg):
    ledger = Ledger.load(cfg.need_ledger_path())
    return {"a": args.a, "b": args.b,
            "similarity": ledger.similarity(args.a, args.b, include_read_only=args.full)}


def cmd_update_meta(args, cfg):
    path = cfg.need_ledger_path()
    ledger = Ledger.load(path)
    contract = cfg.contract(ledger)
    if args.token is None:
        if args.tick is None:
            raise UsageError("--tick is required when updating every bound token")
        updated = contract.tick(args.tick)
    else:
        tick = args.tick
        if tick is None:
            tick = ledger.metadata(args.token).read_only.updated_at
        contract.update_from_feed(args.token, tick)
        updated = [args.token]
    ledger.save(path)
    return {
        "updated": updated,
        "updated_at": {t: ledger.metadata(t).read_only.updated_at for t in updated},
    }


def _load_cached(args, split):
    if args.cached_source:
        stack = PatternFeed.from_split(split).sources.get(args.cached_source)
        if stack is None:
            raise UsageError(f"unknown data source {args.cached_source!r}")
        return stack[args.cached_index % len(stack)]
    if not args.cached:
        raise UsageError("one of --cached or --cached-source is required")
    path = Path(args.cached)
    if not path.exists():
        raise UsageError(f"cached pattern file {path} not found")
    if path.suffix == ".bin":
        stack = read_patterns(path)
        return stack[args.cached_index % len(stack)]
    doc = json.loads(path.read_text())
    arr = np.asarray(doc["pattern"] if isinstance(doc, dict) else doc, dtype=np.float64)
    if arr.shape != (WINDOW_ROWS, N_FEATURES):
        raise UsageError(f"cached pattern must be {WINDOW_ROWS}x{N_FEATURES}, got {arr.shape}")
    return arr


def cmd_verify(args, cfg):
    ledger = Ledger.load(cfg.need_ledger_path())
    contract = cfg.contract(ledger)
    cached = _load_cached(args, cfg.need_data())
    return contract.verify(args.token, cached, ThresholdConfig(cfg.tau)).to_dict()


def cmd_demo_divergence(args, cfg):
    path = cfg.need_ledger_path()
    ledger = Ledger.load(path)
    contract = cfg.contract(ledger)
    cached = None
    if args.cached or args.cached_source:
        cached = _load_cached(args, cfg.need_data())
    report = contract.divergence_demo(args.token, args.ticks, args.fake_source,
                                      attacker=args.attacker, start_tick=args.start_tick,
                                      cached_pattern=cached, thr=ThresholdConfig(cfg.tau))
    ledger.save(path)
    return report


def cmd_replay(args, cfg):
    path = cfg.need_ledger_path()
    if not path.exists():
        raise UsageError(f"ledger file {path} not found")
    events = json.loads(path.read_text())
    ledger = Ledger.replay(events)
    snap = ledger.snapshot()
    out = {"events": len(events), "tokens": len(ledger.tokens), "next_id": ledger.next_id,
           "clock": ledger.clock, "state": snap}
    return out


# ---------------------------------------------------------------------------
# parser


def _add_io(p):
    p.add_argument("--out", help="write the JSON result to this file instead of stdout")
    p.add_argument("--pretty", action="store_true", help="human-readable output")
    p.add_argument("--seed", type=int, default=None,
                   help=f"random seed (default: ${SEED_ENV} or 0)")


def _add_paths(p, data=False, models=False, ledger=False):
    if data:
        p.add_argument("--data", default="data", help="dataset directory (default: data)")
    if models:
        p.add_argument("--models", default="models", help="model directory (default: models)")
    if ledger:
        p.add_argument("--ledger", default="ledger.json", help="ledger event log (default: ledger.json)")


def _add_tau(p):
    p.add_argument("--tau", type=float, default=0.695,
                   help="confidence threshold for out-of-class rejection (default: 0.695)")


def _add_cached(p):
    p.add_argument("--cached", help="cached pattern: JSON 34x5 array or a .bin pattern file")
    p.add_argument("--cached-source", help="take the cached pattern from a data source, e.g. dt:0")
    p.add_argument("--cached-index", type=int, default=0,
                   help="pattern index within --cached .bin file or --cached-source (default: 0)")


def build_parser():
    parser = _Parser(prog="twinforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic dataset split")
    _add_io(p)
    p.add_argument("--dts", type=int, default=4, help="number of devices (default: 4)")
    p.add_argument("--cycles", type=int, default=132, help="cycles per device (default: 132)")
    p.add_argument("--train-fraction", type=float, default=0.8, help="train share (default: 0.8)")
    p.add_argument("--out-dir", default="data", help="dataset directory to write (default: data)")
    p.add_argument("--csv", help="also export the raw cycles as CSV")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ingest", help="ingest a telemetry CSV into a dataset split")
    _add_io(p)
    p.add_argument("--csv", required=True, help="input CSV file")
    p.add_argument("--train-fraction", type=float, default=0.8, help="train share (default: 0.8)")
    p.add_argument("--out-dir", default="data", help="dataset directory to write (default: data)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train-dae", help="train the denoising autoencoder")
    _add_io(p)
    _add_paths(p, data=True, models=True)
    p.add_argument("--epochs", type=int, default=30, help="training epochs (default: 30)")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate (default: 1e-3)")
    p.add_argument("--batch-size", type=int, default=32, help="batch size (default: 32)")
    p.add_argument("--noise", type=float, default=0.05, help="input noise sigma (default: 0.05)")
    p.add_argument("--dropout", type=float, default=0.0, help="dropout rate (default: 0.0)")
    p.set_defaults(func=cmd_train_dae)

    p = sub.add_parser("train-clf", help="train the Bi-GRU classifier on encodings")
    _add_io(p)
    _add_paths(p, data=True, models=True)
    p.add_argument("--epochs", type=int, default=20, help="training epochs (default: 20)")
    p.add_argument("--lr", type=float, default=5e-3, help="learning rate (default: 5e-3)")
    p.add_argument("--batch-size", type=int, default=32, help="batch size (default: 32)")
    p.add_argument("--hidden", type=int, default=32, help="GRU units per direction (default: 32)")
    p.set_defaults(func=cmd_train_clf)

    p = sub.add_parser("evaluate", help="confusion, soundness and completeness on the test split")
    _add_io(p)
    _add_paths(p, data=True, models=True)
    _add_tau(p)
    p.add_argument("--grid-step", type=float, default=None, help="also include a tau sweep")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-tau", help="sweep the confidence threshold")
    _add_io(p)
    _add_paths(p, data=True, models=True)
    p.add_argument("--grid-step", type=float, default=0.01, help="grid spacing (default: 0.01)")
    p.add_argument("--csv", help="also write the curve as CSV")
    p.set_defaults(func=cmd_sweep_tau)

    p = sub.add_parser("mint", help="mint a new twin token")
    _add_io(p)
    _add_paths(p, ledger=True)
    p.add_argument("--owner", required=True, help="owner account")
    p.add_argument("--name", default="Heater twin", help="metadata name")
    p.add_argument("--description", default="Digital twin of an industrial heater",
                   help="metadata description")
    p.add_argument("--image", default="ipfs://heater.png", help="metadata image reference")
    p.add_argument("--trait", action="append", help="writable trait as trait_type=value (repeatable)")
    p.add_argument("--metadata", help="JSON metadata document to mint instead of the flags")
    p.add_argument("--source", help="bind the token to a live data source, e.g. dt:0")
    p.add_argument("--interval", type=int, default=1, help="update interval in ticks (default: 1)")
    p.set_defaults(func=cmd_mint)

    p = sub.add_parser("clone", help="clone a token (by uri, token id, or random metadata)")
    _add_io(p)
    _add_paths(p, ledger=True)
    p.add_argument("--owner", required=True, help="owner of the clone")
    p.add_argument("--mode", choices=("uri", "token", "random"), required=True, help="cloning mode")
    p.add_argument("--uri", help="metadata URI to mirror (mode uri)")
    p.add_argument("--token", type=int, help="token to clone (mode token) or impersonate (mode random)")
    p.add_argument("--fields", type=int, default=5, help="random traits (mode random, default: 5)")
    p.add_argument("--source", help="bind the clone to a live data source")
    p.add_argument("--interval", type=int, default=1, help="update interval in ticks (default: 1)")
    p.set_defaults(func=cmd_clone)

    p = sub.add_parser("compare", help="metadata similarity of two tokens")
    _add_io(p)
    _add_paths(p, ledger=True)
    p.add_argument("--a", type=int, required=True, help="first token id")
    p.add_argument("--b", type=int, required=True, help="second token id")
    p.add_argument("--full", action="store_true", help="include readOnly_attributes")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("update-meta", help="refresh pattern encodings from live sources")
    _add_io(p)
    _add_paths(p, data=True, models=True, ledger=True)
    p.add_argument("--token", type=int, help="token to update (default: every bound token)")
    p.add_argument("--tick", type=int, help="logical tick selecting the live pattern")
    p.set_defaults(func=cmd_update_meta)

    p = sub.add_parser("verify", help="verify a token against a cached pattern")
    _add_io(p)
    _add_paths(p, data=True, models=True, ledger=True)
    _add_tau(p)
    _add_cached(p)
    p.add_argument("--token", type=int, required=True, help="token to verify")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("demo-divergence", help="genuine vs fake clone drift demonstration")
    _add_io(p)
    _add_paths(p, data=True, models=True, ledger=True)
    _add_tau(p)
    _add_cached(p)
    p.add_argument("--token", type=int, required=True, help="original (bound) token")
    p.add_argument("--ticks", type=int, default=1, help="update cycles to run (default: 1)")
    p.add_argument("--fake-source", required=True, help="data source feeding the fake clone")
    p.add_argument("--attacker", default="attacker", help="fake clone owner (default: attacker)")
    p.add_argument("--start-tick", type=int, default=0, help="first tick (default: 0)")
    p.set_defaults(func=cmd_demo_divergence)

    p = sub.add_parser("replay", help="rebuild ledger state from its event log")
    _add_io(p)
    _add_paths(p, ledger=True)
    p.set_defaults(func=cmd_replay)
    return parser


def _render(result, pretty):
    if not pretty:
        return json.dumps(result, sort_keys=True)
    lines = []
    width = max((len(str(k)) for k in result), default=0)
    for k, v in result.items():
        if isinstance(v, (dict, list)):
            lines.append(f"{k}:")
            lines.append(json.dumps(v, indent=2, sort_keys=True))
        else:
            lines.append(f"{str(k).ljust(width)}  {v}")
    return "\n".join(lines)


def main(argv=None):
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = RunConfig.from_args(args)
        result = args.func(args, cfg)
        text = _render(result, args.pretty)
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        else:
            print(text)
        return 0
    except (TwinforgeError, ValueError, LookupError, PermissionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
