"""Command line entry point: ``coarse2fine {generate,train,eval,solve}``.

Every option can also come from an INI file given with ``--config``; all
sections are flattened and keys use the long option names (``lambda-m`` or
``lambda_m``). Command-line flags win over file values.

Exit status: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .datagen import TaxonomySpec, generate, geometric_weights, load_csv, save_csv
from .losses import LossWeights
from .metrics import evaluate
from .nncore import OptimizerConfig, load_checkpoint, save_checkpoint
from .relations import (RelationMatrix, read_cost_csv, read_relation, solve_relations_bruteforce,
                        solve_relations_exact, write_relation)
from .trainer import TrainRunConfig, max_neighbors, predict_fine, train_multi

log = logging.getLogger("coarse2fine")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> list[int]:
    return [int(t) for t in str(text).replace(",", " ").split()]


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- generate -------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.num_fine < args.num_coarse:
        raise UsageError(f"--num-fine ({args.num_fine}) must be >= --num-coarse ({args.num_coarse})")
    if args.assignment:
        assignment = _ints(args.assignment)
        if len(assignment) != args.num_fine:
            raise UsageError("--assignment must list one coarse class per fine class")
    else:
        assignment = [i % args.num_coarse for i in range(args.num_fine)]
    weights = geometric_weights(args.num_fine, args.imbalance) if args.imbalance > 1 else None
    try:
        spec = TaxonomySpec(assignment, args.num_coarse, weights=weights, separation=args.separation,
                            within_separation=args.within_separation, noise=args.noise)
        if args.samples < args.num_fine or args.dim < 2:
            raise ValueError("need --samples >= --num-fine and --dim >= 2")
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    dataset = generate(spec, args.samples, args.dim, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(dataset, out / "dataset.csv")
    write_relation(out / "taxonomy.txt", spec.relation())
    meta = {
        "config": _resolved(args),
        "taxonomy": asdict(spec),
        "fine_histogram": np.bincount(dataset.fine_labels, minlength=spec.num_fine).tolist(),
        "coarse_histogram": np.bincount(dataset.coarse_labels, minlength=spec.num_coarse).tolist(),
        "requested_weights": list(spec.weights) if spec.weights is not None
        else [1.0 / spec.num_fine] * spec.num_fine,
    }
    (out / "meta.json").write_text(_dump(meta))
    log.info("wrote %s (N=%d, K_C=%d, K_F=%d)", out / "dataset.csv", len(dataset), spec.num_coarse, spec.num_fine)
    return EXIT_OK


# -- train ----------------------------------------------------------------------------

def _train_config(args) -> TrainRunConfig:
    try:
        return TrainRunConfig(
            num_fine=args.num_fine, epochs=args.epochs, batch_size=args.batch_size,
            gather_multiplier=args.gather_multiplier, seed=args.seed, depth=args.depth, hidden=args.hidden,
            use_coarse=not args.no_coarse, use_fine=not args.no_fine, use_reg=not args.no_reg,
            optimizer=OptimizerConfig(learning_rate=args.lr, momentum=args.momentum,
                                      milestones=tuple(_ints(args.milestones)), decay=args.decay),
            weights=LossWeights(lambda1=args.lambda1, lambda2=args.lambda2, lambda3=args.lambda3,
                                lambda_m=args.lambda_m, temperature=args.temperature, gamma=args.ema_gamma,
                                num_neighbors=args.neighbors, update_period=args.update_period),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    missing = [p for p in args.datasets if not Path(p).is_file()]
    if missing:
        raise UsageError(f"dataset file(s) not found: {', '.join(missing)}")
    config = _train_config(args)
    try:
        datasets = [load_csv(p, index=l) for l, p in enumerate(args.datasets)]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for p, ds in zip(args.datasets, datasets):
        if ds.num_coarse > config.num_fine:
            raise UsageError(f"{p}: {ds.num_coarse} coarse classes but only {config.num_fine} fine classes")

    groups = np.concatenate([l * 1_000_000 + ds.coarse_labels for l, ds in enumerate(datasets)])
    limit = max_neighbors(groups)
    if limit < 1:
        raise UsageError("some coarse class has a single sample; neighbours cannot be formed")
    if config.weights.num_neighbors > limit:
        log.warning("!!! reducing the neighbour count from %d to %d: the smallest coarse class has "
                    "only %d samples !!!", config.weights.num_neighbors, limit, limit + 1)
        config.weights.num_neighbors = limit

    report = train_multi(datasets, config)

    doc = report.to_dict()
    doc["datasets"] = list(args.datasets)
    # out_dir is left out so that reruns into another directory stay byte-identical
    doc["command"] = {k: v for k, v in _resolved(args).items() if k != "out_dir"}
    if all(ds.fine_labels is not None for ds in datasets):
        doc["metrics"] = []
        for ds, rel in zip(datasets, report.relations):
            pred = predict_fine(report.state, ds.features)
            doc["metrics"].append(evaluate(pred, ds.fine_labels, config.num_fine, rel,
                                           ds.true_relation()).to_dict())

    # stage everything, then move into place so a failure leaves no partial outputs
    out = Path(args.out_dir)
    with tempfile.TemporaryDirectory(dir=out.parent if out.parent.exists() else None) as tmp:
        tmp = Path(tmp)
        extra = {"num_fine": config.num_fine,
                 "num_coarse": [r.num_coarse for r in report.relations],
                 "relations": [r.assignment.tolist() for r in report.relations]}
        save_checkpoint(tmp / "model.ckpt", report.state, extra)
        for l, rel in enumerate(report.relations):
            write_relation(tmp / f"relation_{l}.txt", rel)
        (tmp / "report.json").write_text(_dump(doc))
        out.mkdir(parents=True, exist_ok=True)
        for f in sorted(tmp.iterdir()):
            shutil.move(str(f), out / f.name)
    log.info("training finished: %d steps, outputs in %s", report.state.step, out)
    return EXIT_OK


# -- eval -----------------------------------------------------------------------------

def cmd_eval(args) -> int:
    for p in (args.checkpoint, args.dataset, args.reference):
        if p and not Path(p).is_file():
            raise UsageError(f"file not found: {p}")
    state, extra = load_checkpoint(args.checkpoint)
    num_fine = int(extra.get("num_fine", state.num_outputs))
    dataset = load_csv(args.dataset, num_fine=num_fine)
    if dataset.fine_labels is None:
        raise UsageError(f"{args.dataset}: no 'fine' column; evaluation needs fine labels")
    reference = read_relation(args.reference) if args.reference else dataset.true_relation()
    if args.relation:
        learned = read_relation(args.relation)
    elif extra.get("relations"):
        l = args.dataset_index
        learned = RelationMatrix(np.array(extra["relations"][l]), int(extra["num_coarse"][l]))
    else:
        learned = None
    pred = predict_fine(state, dataset.features, args.which)
    report = evaluate(pred, dataset.fine_labels, num_fine, learned,
                      reference if learned is not None else None)
    text = report.to_json() + "\n"
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- solve ----------------------------------------------------------------------------

def cmd_solve(args) -> int:
    if not Path(args.cost).is_file():
        raise UsageError(f"file not found: {args.cost}")
    try:
        cost = read_cost_csv(args.cost, args.samples)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cost.num_fine < cost.num_coarse:
        raise UsageError(f"infeasible: {cost.num_fine} fine classes < {cost.num_coarse} coarse classes")
    solver = solve_relations_bruteforce if args.oracle else solve_relations_exact
    relation, obj = solver(cost, args.lambda_m)
    if args.output:
        write_relation(args.output, relation)
    sys.stdout.write(_dump({"solver": "bruteforce" if args.oracle else "exact",
                            "assignment": relation.assignment.tolist(),
                            "linear": obj.linear_term, "balance": obj.balance_term,
                            "lambda_m": obj.lambda_m, "total": obj.total}))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def _resolved(args) -> dict:
    skip = {"func", "config", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coarse2fine", description=__doc__.splitlines()[0])
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file with option defaults")
    common.add_argument("--seed", type=int, help="random seed (required by generate and train)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="synthetic hierarchical mixture")
    g.add_argument("--num-coarse", type=int, default=4)
    g.add_argument("--num-fine", type=int, default=12)
    g.add_argument("--samples", type=int, default=2400)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--separation", type=float, default=3.0)
    g.add_argument("--within-separation", type=float, default=2.0)
    g.add_argument("--noise", type=float, default=0.25)
    g.add_argument("--imbalance", type=float, default=1.0,
                   help="largest/smallest fine class size ratio (geometric profile)")
    g.add_argument("--assignment", help="comma-separated coarse parent per fine class")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="alternating training on one or more datasets")
    t.add_argument("datasets", nargs="+", help="CSV files; several files train with one relation each")
    t.add_argument("--num-fine", type=int, required=True)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=256)
    t.add_argument("--gather-multiplier", type=int, default=20)
    t.add_argument("--depth", type=int, default=4)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--lr", type=float, default=0.03)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--milestones", default="60,80")
    t.add_argument("--decay", type=float, default=0.1)
    t.add_argument("--lambda1", type=float, default=0.5)
    t.add_argument("--lambda2", type=float, default=0.5)
    t.add_argument("--lambda3", type=float, default=2.0)
    t.add_argument("--lambda-m", type=float, default=0.1)
    t.add_argument("--temperature", type=float, default=0.9)
    t.add_argument("--ema-gamma", type=float, default=0.99)
    t.add_argument("--neighbors", type=int, default=20)
    t.add_argument("--update-period", type=int, default=20)
    t.add_argument("--no-coarse", action="store_true", help="drop the coarse and confidence terms")
    t.add_argument("--no-fine", action="store_true", help="drop the neighbour and confidence terms")
    t.add_argument("--no-reg", action="store_true", help="drop the entropy regulariser")
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on labelled data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--reference", help="reference taxonomy file (default: implied by the fine labels)")
    e.add_argument("--relation", help="learned relation file (default: stored in the checkpoint)")
    e.add_argument("--dataset-index", type=int, default=0)
    e.add_argument("--which", choices=("current", "ema"), default="current")
    e.add_argument("--output")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("solve", parents=[common], help="solve the relation problem for a cost CSV")
    s.add_argument("cost")
    s.add_argument("--lambda-m", type=float, default=0.1)
    s.add_argument("--samples", type=float, help="sample count N (default: sum of the cost matrix)")
    s.add_argument("--oracle", action="store_true", help="use exhaustive enumeration")
    s.add_argument("--output", help="relation file to write")
    s.set_defaults(func=cmd_solve)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    if not Path(known.config).is_file():
        raise UsageError(f"config file not found: {known.config}")
    ini = configparser.ConfigParser()
    ini.read(known.config)
    values = {}
    for section in ini.sections():
        for key, raw in ini.items(section):
            values[key.replace("-", "_")] = raw
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for cmd_parser in sub.choices.values():
        defaults = {}
        for action in cmd_parser._actions:
            if action.dest in values:
                raw = values[action.dest]
                if isinstance(action, argparse._StoreTrueAction):
                    defaults[action.dest] = raw.strip().lower() in ("1", "true", "yes", "on")
                elif action.nargs == "+":
                    defaults[action.dest] = raw.split()
                    action.required = False
                    action.nargs = "*"
                else:
                    defaults[action.dest] = action.type(raw) if action.type else raw
                    action.required = False
        cmd_parser.set_defaults(**defaults)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.seed is None and args.command in ("generate", "train"):
            raise UsageError("--seed is required (flag or config file)")
        if getattr(args, "datasets", None) == []:
            raise UsageError("at least one dataset is required")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
