"""Joint optimization: pairwise ranking, L2, and contrastive readout losses.

One epoch is one sampled batch of (user, positive, negative) triples, one
full forward pass, one backward pass, and one Adam update, followed by a
validation ranking check.  Early stopping returns the best-validation
checkpoint after a configurable run of non-improving epochs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import evaluation, model
from .errors import ConfigError, EvaluationError, IngestionError, NumericalError
from .graphs import (InteractionRecord, build_item_graph_categories,
                     build_item_graph_cointeraction, build_multityped_graph,
                     build_social_graph)
from .numerics import (STREAM_CORRUPT, STREAM_TRIPLES, STREAM_VALID_NEGATIVES,
                       AdamState, Tape, Tensor, adam_step, rng_for)
from .temporal import TimeCodec

log = logging.getLogger(__name__)

ABLATION_FLAGS = ("no_multi_type", "no_social", "no_item_graph", "no_temporal", "no_mi")

# Default tuning grids for the headline hyper-parameters.
DEFAULT_GRID = {
    "learning_rate": (0.001, 0.005, 0.01),
    "batch_size": (1024, 2048, 4096, 8192),
    "dim": (8, 16, 32, 64),
}

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class BprTriple:
    """User with one observed and one unobserved item."""

    user: int
    pos_item: int
    neg_item: int


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 1024
    epochs: int = 200
    patience: int = 5
    l2_weight: float = 1e-4
    mi_weight_user: float = 0.1
    mi_weight_item: float = 0.1
    layers: int = 2
    prop_layers: int = 2
    dim: int = 16
    types: int = 0  # 0 = infer from the dataset
    granularity: int = 86_400
    seed: int = 0
    negative_slope: float = 0.2
    score_stage: str = "propagated"  # or "encoded"
    bpr_per_type: bool = False
    shared_pair_frequency: bool = False
    no_multi_type: bool = False
    no_social: bool = False
    no_item_graph: bool = False
    no_temporal: bool = False
    no_mi: bool = False

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.dim < 2 or self.dim % 2:
            raise ConfigError(f"dim must be even and >= 2, got {self.dim}")
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.prop_layers < 1:
            raise ConfigError(f"prop_layers must be >= 1, got {self.prop_layers}")
        if self.granularity <= 0:
            raise ConfigError(f"granularity must be positive, got {self.granularity}")
        if self.score_stage not in ("propagated", "encoded"):
            raise ConfigError(
                f"score_stage must be 'propagated' or 'encoded', got {self.score_stage!r}"
            )
        return self


def config_items(cfg: TrainConfig):
    """(name, value) pairs in declaration order."""
    return [(f.name, getattr(cfg, f.name)) for f in fields(TrainConfig)]


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for name, value in config_items(cfg):
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def parse_kv_text(text: str, label: str = "config") -> dict:
    """Parse flat `key = value` text; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{label} line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(name: str, kind: type, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected true/false, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {raw!r}") from exc


def config_from_mapping(mapping: dict, require_complete: bool = True,
                        overrides: dict | None = None) -> TrainConfig:
    """Build a TrainConfig from string values, checking key completeness."""
    defaults = TrainConfig()
    known = {f.name: f.type for f in fields(TrainConfig)}
    unknown = sorted(set(mapping) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    missing = [name for name in known if name not in mapping]
    if missing and require_complete:
        listing = "; ".join(
            f"{name} (default {getattr(defaults, name)})" for name in missing
        )
        raise ConfigError(f"missing config keys: {listing}")
    kinds = {"float": float, "int": int, "str": str, "bool": bool}
    values = {}
    for name in known:
        kind = kinds[known[name]] if isinstance(known[name], str) else known[name]
        if name in mapping:
            values[name] = _coerce(name, kind, str(mapping[name]))
        else:
            values[name] = getattr(defaults, name)
    cfg = TrainConfig(**values)
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg.validate()


@dataclass
class RecDataset:
    """Raw dense-indexed inputs: interactions plus side relations."""

    user_count: int
    item_count: int
    type_count: int
    records: list  # InteractionRecord
    social_edges: list  # (user, user) pairs
    item_categories: dict | None = None  # None => co-interaction item graph
    min_common_users: int = 1


# -- BPR sampling ----------------------------------------------------------------


class TripleSampler:
    """Uniform positive draws with rejection-sampled negatives.

    Positives are the distinct (user, item) pairs of the given records (or
    (user, item, type) when sampling per type).  Negatives are items the
    user never interacted with, additionally excluding `exclude[user]`
    (held-out items).  Users with no admissible negative are skipped with
    a warning.
    """

    def __init__(self, records, item_count: int, per_type: bool = False,
                 exclude: dict | None = None):
        self.item_count = item_count
        interacted: dict[int, set] = {}
        pairs = []
        seen = set()
        for rec in records:
            u, v, k = int(rec[0]), int(rec[1]), int(rec[2])
            interacted.setdefault(u, set()).add(v)
            key = (u, v, k) if per_type else (u, v)
            if key not in seen:
                seen.add(key)
                pairs.append((u, v))
        self.blocked = {}
        for u, items in interacted.items():
            blocked = set(items)
            if exclude and u in exclude:
                blocked |= set(exclude[u])
            self.blocked[u] = blocked
        usable = [(u, v) for u, v in pairs if len(self.blocked[u]) < item_count]
        skipped = len({u for u, _ in pairs}) - len({u for u, _ in usable})
        if skipped:
            log.warning("%d user(s) interact with every item; skipped from sampling", skipped)
        if not usable:
            raise IngestionError("no user has both a positive and a non-interacted item")
        self.pair_users = np.array([u for u, _ in usable], dtype=np.int64)
        self.pair_items = np.array([v for _, v in usable], dtype=np.int64)

    def sample(self, batch_size: int, rng) -> list:
        picks = rng.integers(0, self.pair_users.size, size=batch_size)
        triples = []
        for p in picks:
            u = int(self.pair_users[p])
            pos = int(self.pair_items[p])
            blocked = self.blocked[u]
            while True:
                neg = int(rng.integers(0, self.item_count))
                if neg not in blocked:
                    break
            triples.append(BprTriple(u, pos, neg))
        return triples


def sample_bpr_triples(records, item_count: int, batch_size: int, rng,
                       per_type: bool = False, exclude: dict | None = None) -> list:
    return TripleSampler(records, item_count, per_type=per_type,
                         exclude=exclude).sample(batch_size, rng)


# -- loss pieces -----------------------------------------------------------------


def bpr_term(pos_score: float, neg_score: float) -> float:
    """-ln(sigmoid(pos - neg)), evaluated stably."""
    return float(np.logaddexp(0.0, -(pos_score - neg_score)))


def component_permutation(labels, rng, within_components: bool = True) -> np.ndarray:
    """Uniform random permutation of node slots; fixed points allowed.

    With `within_components` each component is permuted in place, keeping
    corrupted pairs component-aligned.  Without it the permutation runs over
    the whole family, so most corrupted rows land at slots of a different
    component and form genuinely misplaced node-summary pairs; the training
    loop uses this mode because component-aligned corruption pairs each
    summary with the same score multiset it already sees from the positives,
    leaving nothing to discriminate.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if not within_components:
        return rng.permutation(labels.size).astype(np.int64)
    perm = np.arange(labels.size, dtype=np.int64)
    for c in range(int(labels.max()) + 1 if labels.size else 0):
        members = np.flatnonzero(labels == c)
        if members.size > 1:
            perm[members] = members[rng.permutation(members.size)]
    return perm


def shuffle_corrupt(z, labels, rng, within_components: bool = True) -> np.ndarray:
    """Row-shuffled copy of z; the row multiset is preserved exactly."""
    values = z.values if isinstance(z, Tensor) else np.asarray(z)
    return values[component_permutation(labels, rng, within_components)]


def _log_prob(tape: Tape, scores: Tensor, complement: bool) -> Tensor:
    # log sigmoid(+s) for positives, log(1 - sigmoid(s)) = log sigmoid(-s)
    # for corrupted pairs; computed in one stable op so saturated pairs keep
    # their gradient instead of dying in a clamped log
    if complement:
        scores = tape.scale(scores, -1.0)
    return tape.log_sigmoid(scores)


def _mi_side(tape: Tape, z: Tensor, z_tilde: Tensor, summaries: Tensor,
             labels: np.ndarray, weight: float) -> Tensor | None:
    labels = np.asarray(labels, dtype=np.int64)
    sizes = np.bincount(labels, minlength=int(labels.max()) + 1 if labels.size else 0)
    eligible = np.flatnonzero(sizes[labels] >= 2)
    if eligible.size == 0 or weight == 0.0:
        return None
    own_summary = tape.gather_rows(summaries, labels[eligible])
    pos = tape.rowwise_dot(tape.gather_rows(z, eligible), own_summary)
    neg = tape.rowwise_dot(tape.gather_rows(z_tilde, eligible), own_summary)
    total = tape.add(tape.sum_all(_log_prob(tape, pos, complement=False)),
                     tape.sum_all(_log_prob(tape, neg, complement=True)))
    return tape.scale(total, -weight / (2.0 * eligible.size))


def mi_loss(tape: Tape, z_user, z_user_tilde, user_summaries, user_labels,
            z_item, z_item_tilde, item_summaries, item_labels,
            weight_user: float, weight_item: float) -> Tensor:
    """Binary cross-entropy over true versus shuffled node-summary pairs.

    Each side averages over its positive and corrupted samples together and
    is scaled by its balance weight; nodes in singleton components are
    excluded because their corrupted pair would equal the positive pair.
    Pass None for an absent side.
    """
    total = Tensor(np.zeros((1, 1)))
    if z_user is not None and user_summaries is not None:
        side = _mi_side(tape, z_user, z_user_tilde, user_summaries, user_labels,
                        weight_user)
        if side is not None:
            total = tape.add(total, side)
    if z_item is not None and item_summaries is not None:
        side = _mi_side(tape, z_item, z_item_tilde, item_summaries, item_labels,
                        weight_item)
        if side is not None:
            total = tape.add(total, side)
    return total


def total_loss(tape: Tape, params: model.ModelParams, prepared: model.PreparedGraphs,
               out: model.ForwardOutput, triples, config: TrainConfig,
               user_perm=None, item_perm=None):
    """Ranking loss summed over triples, plus L2 and the contrastive term.

    Returns (loss tensor, float components).  Corruption permutations must be
    supplied for any side participating in the contrastive term.
    """
    user_emb, item_emb = model.scoring_embeddings(out, config.score_stage)

    users = np.array([t.user for t in triples], dtype=np.int64)
    pos = np.array([t.pos_item for t in triples], dtype=np.int64)
    neg = np.array([t.neg_item for t in triples], dtype=np.int64)
    u_rows = tape.gather_rows(user_emb, users)
    diff = tape.sub(tape.rowwise_dot(u_rows, tape.gather_rows(item_emb, pos)),
                    tape.rowwise_dot(u_rows, tape.gather_rows(item_emb, neg)))
    bpr = tape.scale(tape.sum_all(_log_prob(tape, diff, complement=False)), -1.0)

    reg = Tensor(np.zeros((1, 1)))
    for t in params.tensors():
        reg = tape.add(reg, tape.sum_all(tape.mul(t, t)))
    reg = tape.scale(reg, params.l2_weight)

    mi = Tensor(np.zeros((1, 1)))
    if not config.no_mi:
        user_side = out.user_summaries is not None
        item_side = out.item_summaries is not None
        z_u_tilde = tape.gather_rows(out.user_final, user_perm) if user_side else None
        z_v_tilde = tape.gather_rows(out.item_final, item_perm) if item_side else None
        mi = mi_loss(tape,
                     out.user_final if user_side else None,
                     z_u_tilde, out.user_summaries, prepared.user_labels,
                     out.item_final if item_side else None,
                     z_v_tilde, out.item_summaries, prepared.item_labels,
                     params.mi_weight_user, params.mi_weight_item)

    loss = tape.add(tape.add(bpr, reg), mi)
    components = {"bpr": bpr.item(), "reg": reg.item(), "mi": mi.item(),
                  "total": loss.item()}
    return loss, components


# -- training loop -----------------------------------------------------------------


@dataclass
class TrainResult:
    params: model.ModelParams  # best-validation checkpoint
    history: list  # one dict per completed epoch
    best_epoch: int
    best_metric: float
    stopped: str  # "early", "cap", "diverged"


def _effective_records(dataset: RecDataset, config: TrainConfig):
    if config.types and config.types != dataset.type_count and not config.no_multi_type:
        raise ConfigError(
            f"config types={config.types} but dataset has {dataset.type_count}"
        )
    if config.no_multi_type:
        merged = [InteractionRecord(r[0], r[1], 0, r[3]) for r in dataset.records]
        return merged, 1
    return list(dataset.records), dataset.type_count


def prepare_training(dataset: RecDataset, config: TrainConfig):
    """Split the data and assemble every graph structure training needs.

    Returns (split, prepared, codec, type_count).  The codec origin comes
    from the training split only.
    """
    records, type_count = _effective_records(dataset, config)
    split = evaluation.leave_one_out_split(records)
    train = split.train_records
    origin = min((r[3] for r in train), default=0)
    codec = TimeCodec(origin=origin, granularity=config.granularity, dim=config.dim,
                      shared_pair_frequency=config.shared_pair_frequency)
    graph = build_multityped_graph(train, dataset.user_count, dataset.item_count,
                                   type_count, codec)
    social = None
    if not config.no_social:
        social = build_social_graph(dataset.social_edges, dataset.user_count)
    item_graph = None
    if not config.no_item_graph:
        if dataset.item_categories is not None:
            item_graph = build_item_graph_categories(
                dataset.item_categories, dataset.item_count, seed=config.seed)
        else:
            item_graph = build_item_graph_cointeraction(
                train, dataset.item_count, type_count,
                min_common_users=dataset.min_common_users)
    prepared = model.PreparedGraphs.assemble(graph, codec, social, item_graph,
                                             temporal=not config.no_temporal)
    return split, prepared, codec, type_count


def _validation_ranks(params, prepared, split, candidates, stage):
    tape = Tape()
    out = model.forward(tape, params, prepared)
    user_emb, item_emb = model.scoring_embeddings(out, stage)
    users_emb = user_emb.values
    items_emb = item_emb.values
    ranks = []
    for user in sorted(candidates):
        held = split.validation[user].item
        cand = np.append(candidates[user], held)
        scores = items_emb[cand] @ users_emb[user]
        ranks.append(evaluation.rank_of(held, cand, scores))
    return ranks


def fit(dataset: RecDataset, config: TrainConfig, val_metric=None) -> TrainResult:
    """Train with early stopping on validation hit ratio at 10.

    `val_metric(params) -> float` replaces the built-in validation check when
    given (the early-stop state machine is otherwise identical).
    """
    config.validate()
    split, prepared, codec, type_count = prepare_training(dataset, config)

    if val_metric is None:
        if not split.validation:
            raise EvaluationError("no user has a validation item; cannot early-stop")
        neg_rng = rng_for(config.seed, STREAM_VALID_NEGATIVES)
        candidates = {}
        for user in sorted(split.validation):
            negs, _ = evaluation.sample_eval_negatives(
                user, split.interacted[user], dataset.item_count, neg_rng)
            candidates[user] = negs

    params = model.init_params(
        dataset.user_count, dataset.item_count, type_count, config.dim,
        config.layers, config.seed, prop_layers=config.prop_layers,
        negative_slope=config.negative_slope, mi_weight_user=config.mi_weight_user,
        mi_weight_item=config.mi_weight_item, l2_weight=config.l2_weight)

    exclude = {u: {h.item for h in (split.validation.get(u), split.test.get(u)) if h}
               for u in split.interacted}
    sampler = TripleSampler(split.train_records, dataset.item_count,
                            per_type=config.bpr_per_type, exclude=exclude)

    triple_rng = rng_for(config.seed, STREAM_TRIPLES)
    corrupt_rng = rng_for(config.seed, STREAM_CORRUPT)
    state = AdamState.for_params(params.tensors())

    history = []
    best_params = params.copy()
    best_metric = -np.inf
    best_epoch = -1
    bad_epochs = 0
    stopped = "cap"

    for epoch in range(config.epochs):
        user_perm = item_perm = None
        if not config.no_mi:
            if prepared.user_labels is not None:
                user_perm = component_permutation(prepared.user_labels, corrupt_rng,
                                                  within_components=False)
            if prepared.item_labels is not None:
                item_perm = component_permutation(prepared.item_labels, corrupt_rng,
                                                  within_components=False)
        triples = sampler.sample(config.batch_size, triple_rng)

        tape = Tape()
        out = model.forward(tape, params, prepared)
        loss, comps = total_loss(tape, params, prepared, out, triples, config,
                                 user_perm=user_perm, item_perm=item_perm)
        if not np.isfinite(comps["total"]) or comps["total"] > DIVERGENCE_LIMIT:
            log.error("epoch %d: loss diverged (components: %s); stopping", epoch, comps)
            if best_epoch < 0:
                raise NumericalError(f"training diverged at epoch {epoch}: {comps}")
            stopped = "diverged"
            break
        for t in params.tensors():
            t.zero_grad()
        tape.backward(loss)
        adam_step(params.tensors(), [t.grad_or_zeros() for t in params.tensors()],
                  state, lr=config.learning_rate)

        if val_metric is not None:
            metric = float(val_metric(params))
        else:
            ranks = _validation_ranks(params, prepared, split, candidates,
                                      config.score_stage)
            metric, _ = evaluation.hr_ndcg_at_n(ranks, 10)
        history.append({"epoch": epoch, "total": comps["total"], "bpr": comps["bpr"],
                        "reg": comps["reg"], "mi": comps["mi"], "val_hr10": metric})

        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_params = params.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                stopped = "early"
                break

    if best_epoch < 0:  # no epoch completed an evaluation
        best_params, best_epoch, best_metric = params.copy(), 0, 0.0
    return TrainResult(params=best_params, history=history, best_epoch=best_epoch,
                       best_metric=best_metric, stopped=stopped)


# -- checkpoint files -----------------------------------------------------------------

CHECKPOINT_FORMAT = "socialrec-checkpoint-1"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def save_checkpoint(path, params: model.ModelParams, config: TrainConfig,
                    epoch: int, metric: float):
    """Manifest text plus one raw little-endian float64 file per tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"format = {CHECKPOINT_FORMAT}",
             f"user_count = {params.user_count}",
             f"item_count = {params.item_count}",
             f"type_count = {params.type_count}",
             f"epoch = {epoch}",
             f"metric = {_fmt(float(metric))}"]
    for name, value in config_items(config):
        lines.append(f"config.{name} = {_fmt(value)}")
    for name, tensor in params.trainable():
        fname = f"{name}.f64"
        (path / fname).write_bytes(
            np.ascontiguousarray(tensor.values, dtype="<f8").tobytes())
        lines.append(f"tensor.{name}.file = {fname}")
        lines.append(f"tensor.{name}.shape = {tensor.shape[0]} {tensor.shape[1]}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Returns (params, config, epoch, metric)."""
    path = Path(path)
    manifest = parse_kv_text((path / "manifest.txt").read_text(encoding="utf-8"),
                             label=str(path / "manifest.txt"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {manifest.get('format')!r}")
    cfg_raw = {k[len("config."):]: v for k, v in manifest.items()
               if k.startswith("config.")}
    config = config_from_mapping(cfg_raw, require_complete=True)

    def read_tensor(name) -> Tensor:
        shape_key = f"tensor.{name}.shape"
        file_key = f"tensor.{name}.file"
        if shape_key not in manifest or file_key not in manifest:
            raise ConfigError(f"checkpoint is missing tensor {name}")
        r, c = (int(x) for x in manifest[shape_key].split())
        raw = (path / manifest[file_key]).read_bytes()
        arr = np.frombuffer(raw, dtype="<f8")
        if arr.size != r * c:
            raise ConfigError(
                f"tensor {name}: file holds {arr.size} values, expected {r}x{c}")
        return Tensor(arr.reshape(r, c).copy())

    user_count = int(manifest["user_count"])
    item_count = int(manifest["item_count"])
    type_count = int(manifest["type_count"])
    params = model.ModelParams(
        user_count=user_count,
        item_count=item_count,
        type_count=type_count,
        dim=config.dim,
        layers=config.layers,
        prop_layers=config.prop_layers,
        negative_slope=config.negative_slope,
        user_table=read_tensor("user_table"),
        item_table=read_tensor("item_table"),
        neighbor_weights=[read_tensor(f"neighbor_w{l}") for l in range(config.layers)],
        self_weights=[read_tensor(f"self_w{l}") for l in range(config.layers)],
        gate_query=read_tensor("gate_query"),
        mi_weight_user=config.mi_weight_user,
        mi_weight_item=config.mi_weight_item,
        l2_weight=config.l2_weight,
    )
    return params, config, int(manifest["epoch"]), float(manifest["metric"])


HISTORY_COLUMNS = ("epoch", "total", "bpr", "reg", "mi", "val_hr10")


def history_to_text(history) -> str:
    lines = ["\t".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append("\t".join(_fmt(row[c]) for c in HISTORY_COLUMNS))
    return "\n".join(lines) + "\n"
