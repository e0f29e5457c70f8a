"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 I/O error.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, data, fileio
from .attacks import KINDS, AttackConfig, attack_batch
from .defense import GENERATION_MODES, AdvTrainConfig, adversarial_train
from .errors import AdvIdsError, ConfigError, NumericalError, ParseError
from .experiments import (DEFAULT_DEFENSE_EPS, DEFAULT_EPS_GRID, DEFAULT_MIX_RATIOS,
                          ExperimentManifest, SweepResult, clean_accuracy_table, emit_report,
                          flatten_config, run_attack_comparison, run_defense_grid)
from .nn import TrainConfig, build_detector, evaluate, load_model, save_model, train

log = logging.getLogger("advids")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4


def _floats(text):
    try:
        return tuple(float(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return tuple(int(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text):
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel grid points for sweeps")
    p.add_argument("--config", type=Path, help="key=value file supplying any flag")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _train_flags(p):
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--learning-rate", type=float, default=d.learning_rate)
    g.add_argument("--dropout-rate", type=float, default=d.dropout_rate)
    g.add_argument("--hidden", type=_ints, default=d.hidden, help="hidden widths, e.g. 512,512")
    g.add_argument("--dtype", choices=("float64", "float32"), default=d.dtype)


def _attack_flags(p, kind=True, epsilon=True, restarts=5):
    g = p.add_argument_group("attack")
    if kind:
        g.add_argument("--kind", type=str.upper, choices=KINDS, default="PGD")
    if epsilon:
        g.add_argument("--epsilon", type=float, default=0.1)
    g.add_argument("--step-size", type=float, default=None, help="default: epsilon / 4")
    g.add_argument("--iterations", type=int, default=10)
    g.add_argument("--restarts", type=int, default=restarts)
    g.add_argument("--use-sign", type=_bool, default=True)


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="advids", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"advids {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="parse, split and encode an NSL-KDD file")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--standardize-onehot", type=_bool, default=True)

    p = sub.add_parser("train", parents=[common], help="train the baseline detector")
    p.add_argument("--data", type=Path, required=True, help="directory written by prepare")
    _train_flags(p)

    p = sub.add_parser("attack", parents=[common], help="generate adversarial samples")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    _attack_flags(p)

    p = sub.add_parser("adv-train", parents=[common], help="adversarial training")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, help="pretrained baseline (trained here if omitted)")
    p.add_argument("--epsilon-defense", type=float, default=0.7)
    p.add_argument("--mix-ratio", type=float, default=0.5)
    p.add_argument("--generation", choices=GENERATION_MODES, default="online")
    _attack_flags(p, kind=False, epsilon=False, restarts=1)
    _train_flags(p)

    p = sub.add_parser("sweep", parents=[common], help="run an experiment grid")
    p.add_argument("--experiment", choices=("attacks", "defense"), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="baseline detector")
    p.add_argument("--eps-grid", type=_floats, default=DEFAULT_EPS_GRID)
    p.add_argument("--eps-defense-grid", type=_floats, default=DEFAULT_DEFENSE_EPS)
    p.add_argument("--mix-ratios", type=_floats, default=DEFAULT_MIX_RATIOS)
    p.add_argument("--generation", choices=GENERATION_MODES, default="online")
    p.add_argument("--defense-restarts", type=int, default=1)
    p.add_argument("--sample", type=int, default=None, help="evaluate on a seeded test subsample")
    _attack_flags(p, kind=False, epsilon=False)
    _train_flags(p)

    p = sub.add_parser("report", parents=[common], help="summarize a sweep CSV")
    p.add_argument("--csv", type=Path, required=True)
    return parser


def _config_defaults(parser, argv):
    """Feed ``--config`` file values in as parser defaults (command line wins)."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    if not known.config.is_file():
        raise ConfigError(f"config file not found: {known.config}")
    items = fileio.read_kv(known.config)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    target = subparsers.choices.get(known.command)
    if target is None:
        return
    dests = {a.dest for a in target._actions}
    values = {}
    for key, value in items.items():
        dest = key.replace("-", "_")
        if dest not in dests or dest in ("config", "help"):
            raise ConfigError(f"{known.config}: unknown setting {key!r} for '{known.command}'")
        values[dest] = value
    target.set_defaults(**values)


def _train_config(args):
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.learning_rate,
                       seed=args.seed, dropout_rate=args.dropout_rate, hidden=args.hidden, dtype=args.dtype)


def _attack_config(args, kind=None, epsilon=None):
    return AttackConfig(kind=kind or args.kind, epsilon=args.epsilon if epsilon is None else epsilon,
                        step_size=args.step_size, iterations=args.iterations, restarts=args.restarts,
                        seed=args.seed, use_sign=args.use_sign)


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise ConfigError(f"input not found: {p}")


def _load_split(data_dir, name):
    path = Path(data_dir) / f"{name}.mat"
    _require(path)
    return data.EncodedDataset.load(path, name)


def _manifest(args, experiment, config, fingerprints):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "verbose", "command")}
    cfg.update(config)
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in cfg.items()}
    return ExperimentManifest(experiment, cfg, fingerprints)


def cmd_prepare(args):
    _require(args.input)
    spec = data.SplitSpec(args.test_fraction, args.seed)
    records = data.parse_csv(args.input)
    if not records:
        raise ConfigError(f"{args.input} contains no records")
    train_recs, test_recs = data.split(records, spec)
    schema = data.fit_schema(train_recs, args.standardize_onehot)
    train_ds = data.encode(train_recs, schema, "train")
    test_ds = data.encode(test_recs, schema, "test")
    report = data.split_report(train_recs, test_recs)

    out = args.out
    schema.save(out / "schema.txt")
    train_ds.save(out / "train.mat")
    test_ds.save(out / "test.mat")
    with fileio.atomic_write(out / "split_report.csv") as fh:
        fh.write(data.format_split_report(report))
    manifest = _manifest(args, "prepare", {"records": len(records), "train_rows": len(train_ds),
                                           "test_rows": len(test_ds), "encoded_dim": schema.encoded_dim,
                                           "unseen_test_values": sum(test_ds.unseen.values())},
                         {"input": fileio.sha256_file(args.input),
                          "train.mat": fileio.sha256_file(out / "train.mat"),
                          "test.mat": fileio.sha256_file(out / "test.mat")})
    manifest.save(out / "prepare.manifest")
    log.info("prepared %d train / %d test rows, %d encoded columns; max class-share gap vs reference %.4f",
             len(train_ds), len(test_ds), schema.encoded_dim, data.max_proportion_gap(report))


def cmd_train(args):
    train_ds = _load_split(args.data, "train")
    test_ds = _load_split(args.data, "test")
    cfg = _train_config(args)
    model = build_detector(train_ds.features.shape[1], cfg)
    model, history = train(model, train_ds, cfg)
    ev = evaluate(model, test_ds)
    out = args.out
    save_model(out / "model.mdl", model, cfg, {"data_fingerprint": train_ds.fingerprint()})
    fileio.write_kv(out / "train_metrics.txt", {
        "clean_accuracy": ev.accuracy,
        "confusion": ev.confusion.reshape(-1).tolist(),
        "loss_history": history,
        "n_test": ev.n,
    }, header="confusion is row-major [[tn, fp], [fn, tp]] with normal=0, anomaly=1")
    _manifest(args, "train", flatten_config("train.", cfg),
              {"train.mat": fileio.sha256_file(Path(args.data) / "train.mat"),
               "model.mdl": fileio.sha256_file(out / "model.mdl")}).save(out / "train.manifest")
    log.info("clean test accuracy %.4f", ev.accuracy)


def cmd_attack(args):
    _require(args.model)
    ds = _load_split(args.data, args.split)
    model, _ = load_model(args.model)
    cfg = _attack_config(args)
    adv = attack_batch(model, ds, cfg)
    clean = evaluate(model, ds).accuracy
    attacked = evaluate(model, adv.as_dataset(ds)).accuracy
    stem = f"adv_{cfg.kind.lower()}_eps{cfg.epsilon:g}"
    adv.save(args.out / f"{stem}.mat", args.out / f"{stem}.txt")
    fileio.write_kv(args.out / f"{stem}_metrics.txt",
                    {"clean_accuracy": clean, "adversarial_accuracy": attacked, "n": len(ds)})
    _manifest(args, "attack", flatten_config("attack.", cfg.as_dict()),
              {"model": fileio.sha256_file(args.model),
               f"{stem}.mat": fileio.sha256_file(args.out / f"{stem}.mat")}).save(args.out / f"{stem}.manifest")
    log.info("%s eps=%g: accuracy %.4f -> %.4f", cfg.kind, cfg.epsilon, clean, attacked)


def cmd_adv_train(args):
    _require(args.model)
    train_ds = _load_split(args.data, "train")
    test_ds = _load_split(args.data, "test")
    tcfg = _train_config(args)
    donor = None
    if args.model is not None:
        donor, _ = load_model(args.model)
    acfg = _attack_config(args, kind="PGD", epsilon=args.epsilon_defense)
    cfg = AdvTrainConfig(args.epsilon_defense, args.mix_ratio, acfg, tcfg, args.seed, args.generation)
    result = adversarial_train(train_ds, cfg, donor=donor)
    name = f"hardened_ed{args.epsilon_defense:g}_r{args.mix_ratio:g}"
    result.save(args.out / f"{name}.mdl")
    if args.model is None:
        save_model(args.out / "baseline.mdl", result.baseline, tcfg)
    fileio.write_kv(args.out / f"{name}_metrics.txt", {
        "clean_accuracy_hardened": evaluate(result.hardened, test_ds).accuracy,
        "clean_accuracy_baseline": evaluate(result.baseline, test_ds).accuracy,
        "adversarial_rows": result.adversarial_rows,
        "total_rows": result.total_rows,
        "loss_history": result.hardened_history,
    })
    _manifest(args, "adv-train", flatten_config("defense.", cfg),
              {"train.mat": fileio.sha256_file(Path(args.data) / "train.mat"),
               f"{name}.mdl": fileio.sha256_file(args.out / f"{name}.mdl")}).save(args.out / f"{name}.manifest")


def cmd_sweep(args):
    _require(args.model)
    test_ds = _load_split(args.data, "test")
    model, header = load_model(args.model)
    if args.sample:
        test_ds = test_ds.sample(args.sample, seed=args.seed)
        log.info("evaluating on a %d-row sample of the test split", len(test_ds))
    attack = AttackConfig(kind="PGD", epsilon=0.0, step_size=args.step_size, iterations=args.iterations,
                          restarts=args.restarts, seed=args.seed, use_sign=args.use_sign)
    fingerprints = {"test.mat": fileio.sha256_file(Path(args.data) / "test.mat"),
                    "model": fileio.sha256_file(args.model)}
    if args.experiment == "attacks":
        result = run_attack_comparison(model, test_ds, args.eps_grid, attack, master_seed=args.seed,
                                       jobs=args.jobs)
    else:
        train_ds = _load_split(args.data, "train")
        fingerprints["train.mat"] = fileio.sha256_file(Path(args.data) / "train.mat")
        defense_attack = AttackConfig(kind="PGD", step_size=args.step_size, iterations=args.iterations,
                                      restarts=args.defense_restarts, use_sign=args.use_sign)
        result = run_defense_grid(train_ds, test_ds, args.eps_defense_grid, args.mix_ratios, args.eps_grid,
                                  _train_config(args), attack, defense_attack, args.generation,
                                  master_seed=args.seed, baseline=model, jobs=args.jobs)
    manifest = _manifest(args, f"sweep-{args.experiment}", {"n_test": len(test_ds),
                                                            "attack_defaults": attack.as_dict()}, fingerprints)
    emit_report(result, args.out, args.experiment, manifest)
    for kind in sorted({r.attack for r in result}):
        log.info("%s: minimum accuracy %.4f", kind, result.min_accuracy(kind))


def cmd_report(args):
    _require(args.csv)
    result = SweepResult.from_csv(args.csv.read_text(encoding="utf-8"))
    experiment = args.csv.stem
    emit_report(result, args.out, experiment)
    lines = ["model_id,attack,min_accuracy,eps_at_min"]
    for mid in result.model_ids():
        for kind in sorted({r.attack for r in result.select(model_id=mid)}):
            rows = result.select(model_id=mid, attack=kind)
            worst = min(rows, key=lambda r: (r.accuracy, r.eps_attack))
            lines.append(f"{mid},{kind},{worst.accuracy!r},{worst.eps_attack!r}")
    clean = clean_accuracy_table(result)
    if clean:
        lines += ["", "model_id,eps_defense,mix_ratio,clean_accuracy"]
        lines += [f"{m},{'' if e is None else e},{'' if r is None else r},{a!r}" for m, e, r, a in clean]
    with fileio.atomic_write(args.out / f"{experiment}_summary.csv") as fh:
        fh.write("\n".join(lines) + "\n")


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "attack": cmd_attack,
            "adv-train": cmd_adv_train, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _config_defaults(parser, argv)
    except (ConfigError, ParseError) as exc:
        print(f"advids: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose + 1, 2), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"advids: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ParseError, AdvIdsError) as exc:
        print(f"advids: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"advids: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
