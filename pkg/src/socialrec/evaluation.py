"""Leave-one-out ranking protocol with sampled negatives and bucket reports.

Each user's latest interaction is held out for test and the second-latest
for validation; the held-out item is ranked against 99 sampled non-interacted
items.  Hit ratio and NDCG are reported overall, per sparsity quartile, and
per held-out interaction type.  Ties rank pessimistically so a constant
scorer cannot look good.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import model
from .errors import EvaluationError
from .numerics import STREAM_EVAL_NEGATIVES, Tape, rng_for

log = logging.getLogger(__name__)

NUM_EVAL_NEGATIVES = 99
SPARSITY_BUCKETS = ("q1_sparsest", "q2", "q3", "q4_densest")


@dataclass(frozen=True)
class HeldOut:
    """One held-out interaction of a user."""

    item: int
    type_id: int
    timestamp: int


@dataclass
class SplitDataset:
    """Training records plus per-user held-out validation/test interactions."""

    train_records: list
    validation: dict  # user -> HeldOut
    test: dict  # user -> HeldOut
    interacted: dict  # user -> set of item ids across all splits
    train_counts: dict  # user -> number of training records
    single_interaction_users: list = field(default_factory=list)


def leave_one_out_split(records) -> SplitDataset:
    """Latest interaction per user goes to test, second-latest to validation.

    Interactions are grouped by item (an item's time is its latest event), so
    held-out items never appear in the training records of the same user.
    Ties are broken by stable input order.  Users with a single interacted
    item stay train-only and are flagged.
    """
    order: dict[int, list] = {}
    latest: dict[tuple[int, int], int] = {}
    per_user: dict[int, list] = {}
    for pos, rec in enumerate(records):
        u, v, k, ts = int(rec[0]), int(rec[1]), int(rec[2]), int(rec[3])
        per_user.setdefault(u, []).append((v, k, ts))
        key = (u, v)
        if key not in latest:
            order.setdefault(u, []).append(v)
            latest[key] = ts
        elif ts > latest[key]:
            latest[key] = ts

    validation: dict[int, HeldOut] = {}
    test: dict[int, HeldOut] = {}
    held_items: dict[int, set] = {}
    singles = []
    for u in sorted(order):
        items = sorted(order[u], key=lambda v: latest[(u, v)])  # stable on ties
        if len(items) == 1:
            singles.append(u)
            held_items[u] = set()
            continue
        held = {items[-1]}
        test[u] = _held_out_for(per_user[u], items[-1])
        if len(items) >= 3:
            held.add(items[-2])
            validation[u] = _held_out_for(per_user[u], items[-2])
        held_items[u] = held
    if singles:
        log.warning("%d user(s) have a single interacted item; train-only", len(singles))

    train_records = [rec for rec in records
                     if int(rec[1]) not in held_items[int(rec[0])]]
    train_counts: dict[int, int] = {}
    for rec in train_records:
        u = int(rec[0])
        train_counts[u] = train_counts.get(u, 0) + 1
    interacted = {u: {v for v, _, _ in events} for u, events in per_user.items()}
    return SplitDataset(
        train_records=train_records,
        validation=validation,
        test=test,
        interacted=interacted,
        train_counts=train_counts,
        single_interaction_users=singles,
    )


def _held_out_for(events, item) -> HeldOut:
    best = None
    for v, k, ts in events:
        if v == item and (best is None or ts >= best.timestamp):
            best = HeldOut(item=v, type_id=k, timestamp=ts)
    return best


def sample_eval_negatives(user: int, interacted_set, item_count: int, rng,
                          count: int = NUM_EVAL_NEGATIVES):
    """Distinct non-interacted items, uniform without replacement.

    Returns (ids, shortfall): when fewer than `count` candidates exist, all
    of them are returned and `shortfall` is True.
    """
    pool = np.setdiff1d(np.arange(item_count, dtype=np.int64),
                        np.fromiter(interacted_set, dtype=np.int64,
                                    count=len(interacted_set)))
    if pool.size < count:
        log.warning("user %d: only %d negative candidates (< %d)",
                    user, pool.size, count)
        return pool, True
    return np.sort(rng.choice(pool, size=count, replace=False)), False


def rank_of(test_item: int, candidates, scores) -> int:
    """1-based rank of the held-out item; tied candidates count as above it."""
    candidates = np.asarray(candidates)
    scores = np.asarray(scores, dtype=np.float64)
    where = np.flatnonzero(candidates == test_item)
    if where.size == 0:
        raise EvaluationError(f"held-out item {test_item} missing from candidates")
    idx = int(where[0])
    own = scores[idx]
    others = np.delete(scores, idx)
    return 1 + int(np.count_nonzero(others >= own))


def hr_ndcg_at_n(ranks, n: int):
    """Mean hit indicator and mean discounted gain over 1-based ranks."""
    ranks = np.asarray(list(ranks), dtype=np.int64)
    if ranks.size == 0:
        raise EvaluationError("no ranks to aggregate")
    if ranks.min() < 1:
        raise EvaluationError("ranks must be 1-based")
    hits = ranks <= n
    hr = float(hits.mean())
    gains = np.where(hits, 1.0 / np.log2(ranks + 1.0), 0.0)
    return hr, float(gains.mean())


def sparsity_buckets(train_counts: dict, users) -> dict:
    """Population-quartile bucket per user by training interaction count.

    Boundary counts go to the lower bucket, so heavily tied populations
    lean toward the sparse end.
    """
    users = list(users)
    counts = np.array([train_counts.get(u, 0) for u in users], dtype=np.int64)
    srt = np.sort(counts)
    n = srt.size
    cuts = [srt[max(0, (q * n) // 4 - 1)] for q in (1, 2, 3)]
    assignment = {}
    for u, c in zip(users, counts):
        if c <= cuts[0]:
            assignment[u] = 0
        elif c <= cuts[1]:
            assignment[u] = 1
        elif c <= cuts[2]:
            assignment[u] = 2
        else:
            assignment[u] = 3
    return assignment


@dataclass
class BucketStat:
    name: str
    population: int
    hr: float
    ndcg: float


@dataclass
class EvalReport:
    top_n: int
    which: str  # "test" or "validation"
    target_type: int | None
    users_evaluated: int
    hr: float
    ndcg: float
    buckets: list  # BucketStat, one per sparsity quartile
    per_type: dict  # type id -> BucketStat
    shortfall_users: int  # users with fewer than 99 candidates

    def to_text(self) -> str:
        lines = [f"top_n = {self.top_n}",
                 f"split = {self.which}",
                 f"target_type = {'all' if self.target_type is None else self.target_type}",
                 f"users_evaluated = {self.users_evaluated}",
                 f"shortfall_users = {self.shortfall_users}",
                 f"hr = {self.hr!r}",
                 f"ndcg = {self.ndcg!r}"]
        for b in self.buckets:
            lines.append(f"bucket.{b.name}.population = {b.population}")
            lines.append(f"bucket.{b.name}.hr = {b.hr!r}")
            lines.append(f"bucket.{b.name}.ndcg = {b.ndcg!r}")
        for k in sorted(self.per_type):
            s = self.per_type[k]
            lines.append(f"type.{s.name}.population = {s.population}")
            lines.append(f"type.{s.name}.hr = {s.hr!r}")
            lines.append(f"type.{s.name}.ndcg = {s.ndcg!r}")
        return "\n".join(lines) + "\n"

    def to_rows(self):
        """(metric, bucket, value) rows for the machine-readable table."""
        rows = [("hr", "overall", self.hr), ("ndcg", "overall", self.ndcg)]
        for b in self.buckets:
            rows.append(("hr", b.name, b.hr))
            rows.append(("ndcg", b.name, b.ndcg))
        for k in sorted(self.per_type):
            s = self.per_type[k]
            rows.append(("hr", f"type_{s.name}", s.hr))
            rows.append(("ndcg", f"type_{s.name}", s.ndcg))
        return rows


def score_candidates(user_emb: np.ndarray, item_emb: np.ndarray, user: int,
                     candidates) -> np.ndarray:
    return item_emb[np.asarray(candidates)] @ user_emb[user]


def evaluate(params, prepared, split: SplitDataset, item_count: int, *,
             top_n: int = 10, seed: int = 0, target_type: int | None = None,
             score_stage: str = "propagated", which: str = "test") -> EvalReport:
    """Rank every held-out item against its sampled candidates and aggregate.

    Negative candidate sets are drawn once from a seed stream independent of
    training, in user-id order, so reports are reproducible per seed.
    """
    held = split.test if which == "test" else split.validation
    users = sorted(held)
    if target_type is not None:
        users = [u for u in users if held[u].type_id == target_type]
    if not users:
        raise EvaluationError(f"no users to evaluate (split={which}, "
                              f"target_type={target_type})")

    tape = Tape()
    out = model.forward(tape, params, prepared)
    user_emb, item_emb = model.scoring_embeddings(out, score_stage)
    user_emb, item_emb = user_emb.values, item_emb.values

    rng = rng_for(seed, STREAM_EVAL_NEGATIVES)
    ranks = {}
    shortfalls = 0
    for u in users:
        negs, short = sample_eval_negatives(u, split.interacted[u], item_count, rng)
        shortfalls += bool(short)
        cand = np.append(negs, held[u].item)
        scores = score_candidates(user_emb, item_emb, u, cand)
        ranks[u] = rank_of(held[u].item, cand, scores)

    hr, ndcg = hr_ndcg_at_n(list(ranks.values()), top_n)

    assignment = sparsity_buckets(split.train_counts, users)
    buckets = []
    for b, name in enumerate(SPARSITY_BUCKETS):
        members = [u for u in users if assignment[u] == b]
        if members:
            bhr, bndcg = hr_ndcg_at_n([ranks[u] for u in members], top_n)
        else:
            bhr = bndcg = 0.0
        buckets.append(BucketStat(name=name, population=len(members),
                                  hr=bhr, ndcg=bndcg))

    per_type = {}
    for k in sorted({held[u].type_id for u in users}):
        members = [u for u in users if held[u].type_id == k]
        thr, tndcg = hr_ndcg_at_n([ranks[u] for u in members], top_n)
        per_type[k] = BucketStat(name=str(k), population=len(members),
                                 hr=thr, ndcg=tndcg)

    return EvalReport(
        top_n=top_n,
        which=which,
        target_type=target_type,
        users_evaluated=len(users),
        hr=hr,
        ndcg=ndcg,
        buckets=buckets,
        per_type=per_type,
        shortfall_users=shortfalls,
    )
