"""Command-line pipeline: gen -> train-head -> fit -> score -> eval -> report.

Exit codes: 0 success, 1 invalid input or usage, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import featstore
from .featstore import atomic_write_text, dump_json, load_feature_table, save_feature_table
from .heads import TrainConfig, apply_heads, load_head_params, save_head_params, train_heads
from .metrics import AUTC_DEFINITION, MetricsSummary, summarize
from .prototypes import (
    build_knn_index,
    fit_class_means,
    load_artifact,
    save_knn_index,
    save_prototypes,
)
from .report import render_report
from .scorers import (
    METHODS,
    Artifacts,
    UnknownMethodError,
    load_scores,
    resolve_method,
    save_scores,
    score_dataset,
)
from .synthgen import SynthConfig, gen_gaussian_benchmark

log = logging.getLogger("wildood")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_list(count: int):
    def parse(text: str) -> tuple[int, ...]:
        try:
            vals = tuple(int(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {count} comma-separated integers, got {text!r}")
        if len(vals) != count:
            raise argparse.ArgumentTypeError(f"expected {count} comma-separated integers, got {text!r}")
        return vals

    return parse


def _kv(text: str) -> dict:
    out = {}
    for item in filter(None, text.split(",")):
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for all randomness")
    common.add_argument("--verbose", "-v", action="count", default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file mirroring the flags")

    parser = _Parser(prog="wildood", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--verbose", "-v", action="count", default=0)
    parser.add_argument("--config", default=None)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic benchmark")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--ood-clusters", type=int, default=6)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--per-class", type=_int_list(3), default=(300, 100, 100), help="train,val,test")
    p.add_argument("--ood-per-cluster", type=_int_list(2), default=(30, 70), help="val,test")
    p.add_argument("--sep", type=float, default=6.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--push", type=float, default=0.25)
    p.add_argument("--label-offset", type=float, default=0.0)
    p.add_argument("--out", required=True, help="output prefix or .manifest.json path")

    p = sub.add_parser("train-head", parents=[common], help="train classification + projection heads")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--hidden", type=int, default=512)
    p.add_argument("--proj-dim", type=int, default=32)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--noise-aug", type=float, default=0.1)
    p.add_argument("--label-aware", action="store_true")
    p.add_argument("--out-params", required=True)
    p.add_argument("--history", help="write per-epoch loss/accuracy JSON here")

    p = sub.add_parser("fit", parents=[common], help="fit class means or a KNN index")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--split", default="val", choices=featstore.SPLITS)
    p.add_argument("--space", default="raw", choices=("raw", "projected"))
    p.add_argument("--kind", default="prototypes", choices=("prototypes", "index"))
    p.add_argument("--normalization", default=None, choices=("none", "unit_l2"),
                   help="index only; default unit_l2")
    p.add_argument("--head-params", help="compute projected features with these heads")
    p.add_argument("--out", required=True)

    p = sub.add_parser("score", parents=[common], help="score a split with one method or 'all'")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--params", type=_kv, default={}, help="e.g. k=50,T=1,eps=1e-12")
    p.add_argument("--agreement-variant", default="literal", choices=("literal", "normalized"))
    p.add_argument("--protos")
    p.add_argument("--index", action="append", default=[], help="KNN index; repeat for raw and projected")
    p.add_argument("--head-params")
    p.add_argument("--split", default="test", choices=featstore.SPLITS)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="compute metrics for a scores file")
    p.add_argument("--scores", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--threshold-scores", help="scores on a held-out split for the Youden threshold")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", parents=[common], help="render summaries as Markdown + CSV")
    p.add_argument("summaries", nargs="+")
    p.add_argument("--out", help="Markdown path (stdout when omitted)")
    p.add_argument("--csv", help="CSV path for the OOD table")
    return parser


# -- subcommands --------------------------------------------------------------


def cmd_gen(args) -> None:
    cfg = SynthConfig(
        n_id_classes=args.classes,
        n_ood_clusters=args.ood_clusters,
        dim=args.dim,
        per_class=args.per_class,
        ood_per_cluster=args.ood_per_cluster,
        class_sep=args.sep,
        noise_sigma=args.sigma,
        ood_push=args.push,
        label_offset=args.label_offset,
        seed=args.seed,
    )
    path = save_feature_table(gen_gaussian_benchmark(cfg), args.out)
    log.info("wrote %s", path)


def cmd_train_head(args) -> None:
    table = load_feature_table(args.input)
    cfg = TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        warmup_epochs=args.warmup,
        max_epochs=args.epochs,
        batch_size=args.batch,
        temperature=args.tau,
        ntxent_weight=args.lam,
        noise_aug_sigma=args.noise_aug,
        hidden=args.hidden,
        proj_dim=args.proj_dim,
        label_aware=args.label_aware,
        seed=args.seed,
    )
    history: list = []
    params = train_heads(table, cfg, history=history)
    save_head_params(params, args.out_params)
    if args.history:
        atomic_write_text(args.history, dump_json(history))


def cmd_fit(args) -> None:
    table = load_feature_table(args.input)
    if args.head_params:
        table = apply_heads(table, load_head_params(args.head_params))
    if args.kind == "prototypes":
        if args.normalization not in (None, "none"):
            raise UsageError("--normalization applies to --kind index only")
        save_prototypes(fit_class_means(table, args.split, args.space), args.out)
    else:
        index = build_knn_index(table, args.split, args.space, args.normalization or "unit_l2")
        save_knn_index(index, args.out)


def _artifacts(args) -> Artifacts:
    protos = load_artifact(args.protos) if args.protos else None
    knn_index = contrastive_index = None
    for path in args.index:
        index = load_artifact(path)
        if index.space == "raw":
            knn_index = index
        else:
            contrastive_index = index
    heads = load_head_params(args.head_params) if args.head_params else None
    return Artifacts(protos=protos, knn_index=knn_index, contrastive_index=contrastive_index, heads=heads)


def _method_params(info, given: dict, variant: str, explicit: bool) -> dict:
    accepted = set(info.defaults)
    if info.name == "TempScaling" and explicit:
        accepted.add("T")
    out = {k: v for k, v in given.items() if k in accepted}
    if "variant" in info.defaults:
        out.setdefault("variant", variant)
    return out


def cmd_score(args) -> None:
    table = load_feature_table(args.input)
    artifacts = _artifacts(args)
    if args.method.lower() == "all":
        infos = list(METHODS.values())
    else:
        infos = [resolve_method(args.method)]
    known = {k for info in METHODS.values() for k in info.defaults} | {"T"}
    unknown = set(args.params) - known
    if unknown:
        raise UsageError(f"unknown --params keys: {sorted(unknown)}")
    reports = [
        score_dataset(
            info.name,
            table,
            artifacts,
            _method_params(info, args.params, args.agreement_variant, explicit=len(infos) == 1),
            split=args.split,
        )
        for info in infos
    ]
    save_scores(reports, args.out)


def cmd_eval(args) -> None:
    table = load_feature_table(args.table)
    reports = load_scores(args.scores)
    thresholds = {}
    if args.threshold_scores:
        thresholds = {r.method: r for r in load_scores(args.threshold_scores)}
    summaries = [summarize(r, table, thresholds.get(r.method)).to_dict() for r in reports]
    doc = {
        "autc_definition": AUTC_DEFINITION,
        "scores_file": Path(args.scores).name,
        "methods": summaries,
    }
    atomic_write_text(args.out, dump_json(doc))


def cmd_report(args) -> None:
    groups = {}
    for path in args.summaries:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        name = Path(path).stem
        if name in groups:
            name = str(path)
        groups[name] = {s["method"]: MetricsSummary.from_dict(s) for s in doc["methods"]}
    md, table_csv = render_report(groups)
    if args.out:
        atomic_write_text(args.out, md)
    else:
        sys.stdout.write(md)
    if args.csv:
        atomic_write_text(args.csv, table_csv)


COMMANDS = {
    "gen": cmd_gen,
    "train-head": cmd_train_head,
    "fit": cmd_fit,
    "score": cmd_score,
    "eval": cmd_eval,
    "report": cmd_report,
}


# -- config handling ------------------------------------------------------------


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse with precedence flags > ``--config`` JSON > defaults."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{args.config}: config must be a JSON object")

    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sub = subparsers.choices[args.command]
    flat = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    flat.update(raw.get(args.command, {}))
    dests = {a.dest: a for a in sub._actions} | {a.dest: a for a in parser._actions}
    for opt_action in sub._actions:
        for opt in opt_action.option_strings:
            if opt.startswith("--"):
                dests.setdefault(opt[2:].replace("-", "_"), opt_action)
    defaults = {}
    for key, value in flat.items():
        action = dests.get(key.replace("-", "_"))
        if action is None or action.dest in ("help", "config", "command"):
            raise UsageError(f"{args.config}: unknown option {key!r} for {args.command}")
        if isinstance(value, list) and action.type is not None and action.nargs is None:
            value = ",".join(str(v) for v in value)
        if isinstance(value, str) and action.type is not None:
            value = action.type(value)
        defaults[action.dest] = value
    top = {k: v for k, v in defaults.items() if k in ("seed", "verbose")}
    parser.set_defaults(**top)
    sub.set_defaults(**{k: v for k, v in defaults.items() if k not in top})
    return parser.parse_args(argv)


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    except OSError as exc:
        sys.stderr.write(f"wildood: {exc}\n")
        return EXIT_IO

    level = logging.WARNING - 10 * min(int(args.verbose), 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UnknownMethodError as exc:
        sys.stderr.write(f"wildood {args.command}: {exc}\n")
        return EXIT_INVALID
    except OSError as exc:
        sys.stderr.write(f"wildood {args.command}: {exc}\n")
        return EXIT_IO
    except (ValueError, KeyError, FloatingPointError) as exc:
        sys.stderr.write(f"wildood {args.command}: {exc}\n")
        return EXIT_INVALID
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
