"""Command-line pipeline: prepare, train, evaluate, export-embeddings.

File formats are plain tab-separated text (one event per line) and flat
`key = value` configs; every artifact is bit-reproducible under a fixed
seed.  Exit codes: 0 success, 1 input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation, model, training
from .errors import ConfigError, IngestionError, NumericalError, SocialRecError
from .graphs import InteractionRecord
from .numerics import Tape

log = logging.getLogger(__name__)

RATING_TYPE_NAMES = ("negative", "below_average", "neutral", "above_average", "positive")
BUNDLE_FORMAT = "socialrec-bundle-1"


# -- bundle files -------------------------------------------------------------


@dataclass
class DatasetBundle:
    """Dense-indexed dataset plus the vocabularies mapping back to input ids."""

    user_count: int
    item_count: int
    type_count: int
    user_names: list
    item_names: list
    type_names: list
    records: list
    social_edges: list
    item_categories: dict | None
    min_common_users: int
    rating_scale: bool

    def to_dataset(self) -> training.RecDataset:
        return training.RecDataset(
            user_count=self.user_count,
            item_count=self.item_count,
            type_count=self.type_count,
            records=self.records,
            social_edges=self.social_edges,
            item_categories=self.item_categories,
            min_common_users=self.min_common_users,
        )


def _read_tsv(path: Path, n_fields: int):
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != n_fields:
                raise IngestionError(
                    f"{path} line {lineno}: expected {n_fields} tab-separated "
                    f"fields, got {len(parts)}")
            rows.append((lineno, parts))
    return rows


def _write_vocab(path: Path, names):
    path.write_text("".join(f"{i}\t{name}\n" for i, name in enumerate(names)),
                    encoding="utf-8")


def _read_vocab(path: Path):
    return [parts[1] for _, parts in _read_tsv(path, 2)]


def cmd_prepare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    users: dict[str, int] = {}
    items: dict[str, int] = {}
    types: dict[str, int] = {}
    if args.rating_scale:
        types = {str(i + 1): i for i in range(5)}
    rows = []
    for lineno, (user, item, typ, ts) in _read_tsv(Path(args.interactions), 4):
        try:
            timestamp = int(ts)
        except ValueError:
            raise IngestionError(
                f"{args.interactions} line {lineno}: timestamp {ts!r} is not an integer")
        if timestamp < 0:
            raise IngestionError(
                f"{args.interactions} line {lineno}: negative timestamp {timestamp}")
        if args.rating_scale and typ not in types:
            raise IngestionError(
                f"{args.interactions} line {lineno}: rating {typ!r} outside 1..5")
        u = users.setdefault(user, len(users))
        v = items.setdefault(item, len(items))
        k = types.setdefault(typ, len(types))
        rows.append((u, v, k, timestamp))
    if not rows:
        raise IngestionError(f"{args.interactions}: no interaction records")

    arr = np.array(rows, dtype="<i8")
    (out / "records.i64").write_bytes(arr.tobytes())
    _write_vocab(out / "vocab_users.tsv", list(users))
    _write_vocab(out / "vocab_items.tsv", list(items))
    type_names = (list(RATING_TYPE_NAMES) if args.rating_scale
                  else list(types))
    _write_vocab(out / "vocab_types.tsv", type_names)

    social_rows = []
    social_dropped = 0
    for lineno, (a, b) in _read_tsv(Path(args.social), 2):
        if a in users and b in users:
            social_rows.append((users[a], users[b]))
        else:
            social_dropped += 1
    if social_dropped:
        log.warning("dropped %d social edge(s) naming unknown users", social_dropped)
    social_arr = np.array(social_rows, dtype="<i8").reshape(len(social_rows), 2)
    (out / "social.i64").write_bytes(social_arr.tobytes())

    categories_dropped = 0
    if args.item_categories:
        lines = []
        for lineno, (item, cat) in _read_tsv(Path(args.item_categories), 2):
            if item in items:
                lines.append(f"{items[item]}\t{cat}\n")
            else:
                categories_dropped += 1
        if categories_dropped:
            log.warning("dropped %d category row(s) naming unknown items",
                        categories_dropped)
        (out / "item_categories.tsv").write_text("".join(lines), encoding="utf-8")

    records = [InteractionRecord(*row) for row in rows]
    split = evaluation.leave_one_out_split(records)
    split_lines = ["user\tval_item\tval_type\tval_ts\ttest_item\ttest_type\ttest_ts\n"]
    for u in range(len(users)):
        val = split.validation.get(u)
        test = split.test.get(u)
        val_part = (f"{val.item}\t{val.type_id}\t{val.timestamp}"
                    if val else "-1\t-1\t-1")
        test_part = (f"{test.item}\t{test.type_id}\t{test.timestamp}"
                     if test else "-1\t-1\t-1")
        split_lines.append(f"{u}\t{val_part}\t{test_part}\n")
    (out / "split.tsv").write_text("".join(split_lines), encoding="utf-8")

    manifest = [
        f"format = {BUNDLE_FORMAT}",
        f"user_count = {len(users)}",
        f"item_count = {len(items)}",
        f"type_count = {len(type_names)}",
        f"record_count = {len(rows)}",
        f"social_edge_count = {len(social_rows)}",
        f"social_dropped = {social_dropped}",
        f"item_graph = {'categories' if args.item_categories else 'cointeraction'}",
        f"categories_dropped = {categories_dropped}",
        f"min_common_users = {args.min_common_users}",
        f"rating_scale = {'true' if args.rating_scale else 'false'}",
    ]
    (out / "bundle.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    print(f"prepared bundle in {out}: {len(users)} users, {len(items)} items, "
          f"{len(type_names)} types, {len(rows)} records")
    return 0


def load_bundle(path) -> DatasetBundle:
    path = Path(path)
    manifest = training.parse_kv_text((path / "bundle.txt").read_text(encoding="utf-8"),
                                      label=str(path / "bundle.txt"))
    if manifest.get("format") != BUNDLE_FORMAT:
        raise ConfigError(f"unsupported bundle format {manifest.get('format')!r}")
    user_count = int(manifest["user_count"])
    item_count = int(manifest["item_count"])
    type_count = int(manifest["type_count"])

    raw = np.frombuffer((path / "records.i64").read_bytes(), dtype="<i8")
    if raw.size != 4 * int(manifest["record_count"]):
        raise IngestionError(f"{path / 'records.i64'}: unexpected size")
    records = [InteractionRecord(int(u), int(v), int(k), int(ts))
               for u, v, k, ts in raw.reshape(-1, 4)]

    social_raw = np.frombuffer((path / "social.i64").read_bytes(), dtype="<i8")
    social_edges = [(int(a), int(b)) for a, b in social_raw.reshape(-1, 2)]

    item_categories = None
    if manifest["item_graph"] == "categories":
        item_categories = {}
        for _, (item, cat) in _read_tsv(path / "item_categories.tsv", 2):
            item_categories.setdefault(int(item), []).append(cat)

    return DatasetBundle(
        user_count=user_count,
        item_count=item_count,
        type_count=type_count,
        user_names=_read_vocab(path / "vocab_users.tsv"),
        item_names=_read_vocab(path / "vocab_items.tsv"),
        type_names=_read_vocab(path / "vocab_types.tsv"),
        records=records,
        social_edges=social_edges,
        item_categories=item_categories,
        min_common_users=int(manifest["min_common_users"]),
        rating_scale=manifest["rating_scale"] == "true",
    )


# -- train ----------------------------------------------------------------------


def _load_config(args) -> training.TrainConfig:
    mapping = training.parse_kv_text(Path(args.config).read_text(encoding="utf-8"),
                                     label=args.config)
    overrides = {}
    for name in ("seed", "layers", "epochs", "dim", "batch_size"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "learning_rate", None) is not None:
        overrides["learning_rate"] = args.learning_rate
    for flag in args.ablate or ():
        if flag not in training.ABLATION_FLAGS:
            raise ConfigError(
                f"unknown ablation flag {flag!r}; choose from "
                f"{', '.join(training.ABLATION_FLAGS)}")
        overrides[flag] = True
    return training.config_from_mapping(mapping, require_complete=True,
                                        overrides=overrides)


def cmd_train(args) -> int:
    if args.write_default_config:
        Path(args.write_default_config).write_text(
            training.config_to_text(training.TrainConfig()), encoding="utf-8")
        print(f"wrote default config to {args.write_default_config}")
        return 0
    if not args.bundle or not args.config or not args.out:
        raise ConfigError("train requires --bundle, --config and --out")
    bundle = load_bundle(args.bundle)
    config = _load_config(args)
    result = training.fit(bundle.to_dataset(), config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    training.save_checkpoint(out / "checkpoint", result.params, config,
                             result.best_epoch, result.best_metric)
    (out / "history.tsv").write_text(training.history_to_text(result.history),
                                     encoding="utf-8")
    print(f"trained {len(result.history)} epoch(s); best val HR@10 "
          f"{result.best_metric:.4f} at epoch {result.best_epoch} "
          f"(stopped: {result.stopped})")
    print(f"checkpoint: {out / 'checkpoint'}")
    return 0


# -- evaluate ---------------------------------------------------------------------


def _check_shapes(params: model.ModelParams, config: training.TrainConfig,
                  bundle: DatasetBundle):
    expected_types = 1 if config.no_multi_type else bundle.type_count
    if params.user_count != bundle.user_count:
        raise ConfigError(
            f"user_table: expected shape ({bundle.user_count}, {params.dim}), "
            f"checkpoint has ({params.user_count}, {params.dim})")
    if params.item_count != bundle.item_count or params.type_count != expected_types:
        raise ConfigError(
            f"item_table: expected shape ({bundle.item_count * expected_types}, "
            f"{params.dim}), checkpoint has "
            f"({params.item_count * params.type_count}, {params.dim})")


def cmd_evaluate(args) -> int:
    bundle = load_bundle(args.bundle)
    params, config, epoch, metric = training.load_checkpoint(args.checkpoint)
    _check_shapes(params, config, bundle)

    target_type = None
    if args.target_type is not None:
        if config.no_multi_type:
            raise ConfigError("checkpoint was trained with no_multi_type; "
                              "target-type evaluation is unavailable")
        if args.target_type not in bundle.type_names:
            raise ConfigError(f"unknown interaction type {args.target_type!r}; "
                              f"known: {', '.join(bundle.type_names)}")
        target_type = bundle.type_names.index(args.target_type)

    split, prepared, _, _ = training.prepare_training(bundle.to_dataset(), config)
    report = evaluation.evaluate(
        params, prepared, split, bundle.item_count, top_n=args.topn,
        seed=args.seed, target_type=target_type,
        score_stage=config.score_stage, which=args.split)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = report.to_text()
    name_lines = "".join(f"type_name.{i} = {n}\n"
                         for i, n in enumerate(bundle.type_names))
    (out / "report.txt").write_text(text + name_lines, encoding="utf-8")
    rows = ["metric\tbucket\tvalue\n"]
    rows += [f"{m}\t{b}\t{v!r}\n" for m, b, v in report.to_rows()]
    (out / "report.tsv").write_text("".join(rows), encoding="utf-8")
    print(f"evaluated {report.users_evaluated} users on {args.split} "
          f"(checkpoint epoch {epoch}, val {metric:.4f})")
    print(f"HR@{report.top_n} = {report.hr:.4f}   NDCG@{report.top_n} = {report.ndcg:.4f}")
    print(f"reports: {out / 'report.txt'}, {out / 'report.tsv'}")
    return 0


# -- export ----------------------------------------------------------------------


def cmd_export(args) -> int:
    bundle = load_bundle(args.bundle)
    params, config, _, _ = training.load_checkpoint(args.checkpoint)
    _check_shapes(params, config, bundle)
    _, prepared, _, _ = training.prepare_training(bundle.to_dataset(), config)
    out = model.forward(Tape(), params, prepared)
    user_emb, item_emb = model.scoring_embeddings(out, config.score_stage)

    lines = []
    for i, name in enumerate(bundle.user_names):
        vals = "\t".join(repr(float(x)) for x in user_emb.values[i])
        lines.append(f"user\t{name}\t{vals}\n")
    for j, name in enumerate(bundle.item_names):
        vals = "\t".join(repr(float(x)) for x in item_emb.values[j])
        lines.append(f"item\t{name}\t{vals}\n")
    Path(args.out).write_text("".join(lines), encoding="utf-8")
    print(f"wrote {len(lines)} embedding rows of width "
          f"{user_emb.shape[1]} to {args.out}")
    return 0


# -- argument surface ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="socialrec",
        description="Train and evaluate the coupled-graph social recommender.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="index raw TSV inputs into a dataset bundle")
    p.add_argument("--interactions", required=True,
                   help="TSV: user, item, type, unix timestamp")
    p.add_argument("--social", required=True, help="TSV: user, user")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--item-categories", help="TSV: item, category")
    group.add_argument("--item-cointeraction", action="store_true",
                       help="derive the item graph from co-interaction instead")
    p.add_argument("--min-common-users", type=int, default=1,
                   help="co-interaction edge threshold (default 1)")
    p.add_argument("--rating-scale", action="store_true",
                   help="treat the type column as ratings 1..5 mapped to "
                        "negative/below_average/neutral/above_average/positive")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fit the model and save the best checkpoint")
    p.add_argument("--bundle", help="prepared bundle directory")
    p.add_argument("--config", help="flat key = value training config")
    p.add_argument("--out", help="output directory (checkpoint/ + history.tsv)")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--layers", type=int, help="override interaction layer count")
    p.add_argument("--epochs", type=int, help="override epoch cap")
    p.add_argument("--dim", type=int, help="override embedding width")
    p.add_argument("--batch-size", dest="batch_size", type=int,
                   help="override triple batch size")
    p.add_argument("--learning-rate", dest="learning_rate", type=float,
                   help="override learning rate")
    p.add_argument("--ablate", action="append", metavar="FLAG",
                   help=f"disable a component; one of {', '.join(training.ABLATION_FLAGS)}")
    p.add_argument("--write-default-config", metavar="PATH",
                   help="write the documented default config to PATH and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank held-out items and write reports")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--bundle", required=True, help="prepared bundle directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--target-type", help="restrict to one held-out interaction type")
    p.add_argument("--topn", type=int, default=10, help="metric cutoff (default 10)")
    p.add_argument("--seed", type=int, default=0,
                   help="negative-candidate seed (default 0)")
    p.add_argument("--split", choices=("test", "validation"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-embeddings",
                       help="write final embeddings as TSV (kind, id, values)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True, help="output TSV file")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; that's input error
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (SocialRecError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
