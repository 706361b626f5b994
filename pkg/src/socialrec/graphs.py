"""Construction and normalization of the three relation structures.

Three graphs feed the model: a bipartite user/item graph whose items are
expanded into one sub-vertex per interaction type, an undirected user-user
graph, and an undirected item-item graph built from shared categories or
co-interaction.  Built graphs are immutable and shareable across threads.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import IngestionError
from .numerics import STREAM_GRAPH, SparseMatrix, rng_for
from .temporal import TimeCodec, slot_of

log = logging.getLogger(__name__)


class InteractionRecord(NamedTuple):
    """One (user, item, type, timestamp) event."""

    user_id: int
    item_id: int
    type_id: int
    timestamp: int


@dataclass(frozen=True)
class MultiTypedGraph:
    """Bipartite graph of users versus type-specific item sub-vertices.

    Item j under type k is sub-vertex j * type_count + k.  Each edge carries
    the time slot of its (deduplicated) interaction; duplicate (user, item,
    type) events keep only the most recent timestamp.
    """

    user_count: int
    item_count: int
    type_count: int
    edge_users: np.ndarray  # (E,) int64
    edge_targets: np.ndarray  # (E,) int64 sub-vertex ids
    edge_slots: np.ndarray  # (E,) int64
    user_degree: np.ndarray  # (I,) int64
    target_degree: np.ndarray  # (J*K,) int64

    @property
    def sub_vertex_count(self) -> int:
        return self.item_count * self.type_count

    @property
    def vertex_count(self) -> int:
        return self.user_count + self.sub_vertex_count

    @property
    def edge_count(self) -> int:
        return int(self.edge_users.size)

    @property
    def max_slot(self) -> int:
        return int(self.edge_slots.max()) if self.edge_slots.size else 0


def build_multityped_graph(records, user_count: int, item_count: int,
                           type_count: int, codec: TimeCodec) -> MultiTypedGraph:
    """Expand interaction records into the type-aware bipartite graph."""
    if min(user_count, item_count, type_count) < 1:
        raise IngestionError("user, item and type counts must all be >= 1")
    latest: dict[tuple[int, int], int] = {}
    for rec in records:
        u, v, k, ts = int(rec[0]), int(rec[1]), int(rec[2]), int(rec[3])
        if not (0 <= u < user_count and 0 <= v < item_count and 0 <= k < type_count):
            raise IngestionError(
                f"record (user={u}, item={v}, type={k}, t={ts}) out of range for "
                f"I={user_count}, J={item_count}, K={type_count}"
            )
        key = (u, v * type_count + k)
        prev = latest.get(key)
        if prev is None or ts > prev:
            latest[key] = ts

    n_sub = item_count * type_count
    if latest:
        pairs = sorted(latest.items())
        edge_users = np.array([u for (u, _), _ in pairs], dtype=np.int64)
        edge_targets = np.array([t for (_, t), _ in pairs], dtype=np.int64)
        edge_slots = np.array([slot_of(codec, ts) for _, ts in pairs], dtype=np.int64)
    else:
        edge_users = np.zeros(0, dtype=np.int64)
        edge_targets = np.zeros(0, dtype=np.int64)
        edge_slots = np.zeros(0, dtype=np.int64)

    user_degree = np.bincount(edge_users, minlength=user_count).astype(np.int64)
    target_degree = np.bincount(edge_targets, minlength=n_sub).astype(np.int64)
    return MultiTypedGraph(
        user_count=user_count,
        item_count=item_count,
        type_count=type_count,
        edge_users=edge_users,
        edge_targets=edge_targets,
        edge_slots=edge_slots,
        user_degree=user_degree,
        target_degree=target_degree,
    )


@dataclass
class RelationGraph:
    """Undirected graph over one entity family (users or items).

    Adjacency is stored as deduplicated endpoint arrays with a < b; the
    symmetric-normalized propagation operator and connected-component labels
    are derived lazily and cached.
    """

    node_count: int
    edge_a: np.ndarray  # (M,) int64, edge_a < edge_b
    edge_b: np.ndarray

    _normalized: SparseMatrix | None = field(default=None, repr=False, compare=False)
    _labels: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_pairs(cls, pairs, node_count: int, what: str = "node") -> "RelationGraph":
        """Deduplicate, symmetrize, and drop self-edges (with a warning)."""
        dropped_self = 0
        seen = set()
        for a, b in pairs:
            a, b = int(a), int(b)
            if not (0 <= a < node_count and 0 <= b < node_count):
                raise IngestionError(
                    f"{what} edge ({a}, {b}) out of range for {node_count} nodes"
                )
            if a == b:
                dropped_self += 1
                continue
            seen.add((min(a, b), max(a, b)))
        if dropped_self:
            log.warning("dropped %d self-edge(s) from %s graph", dropped_self, what)
        if seen:
            arr = np.array(sorted(seen), dtype=np.int64)
            edge_a, edge_b = arr[:, 0], arr[:, 1]
        else:
            edge_a = np.zeros(0, dtype=np.int64)
            edge_b = np.zeros(0, dtype=np.int64)
        return cls(node_count=node_count, edge_a=edge_a, edge_b=edge_b)

    @property
    def edge_count(self) -> int:
        return int(self.edge_a.size)

    def degrees(self) -> np.ndarray:
        deg = np.bincount(self.edge_a, minlength=self.node_count)
        deg += np.bincount(self.edge_b, minlength=self.node_count)
        return deg.astype(np.int64)

    @property
    def normalized(self) -> SparseMatrix:
        if self._normalized is None:
            self._normalized = normalize(self)
        return self._normalized

    @property
    def component_labels(self) -> np.ndarray:
        if self._labels is None:
            self._labels = connected_components(self)
        return self._labels


def build_social_graph(user_edges, user_count: int) -> RelationGraph:
    """Undirected user-user ties; one-way input edges are symmetrized."""
    return RelationGraph.from_pairs(user_edges, user_count, what="social")


def build_item_graph_categories(item_category_map, item_count: int,
                                max_edges_per_category: int = 500,
                                seed: int = 0) -> RelationGraph:
    """Connect items sharing at least one category label.

    A category whose full clique would exceed `max_edges_per_category`
    edges is wired through a sampled hub set instead: every member connects
    to each hub, which keeps the group connected at bounded edge count.
    """
    members: dict[object, list[int]] = {}
    for item, categories in item_category_map.items():
        item = int(item)
        if not (0 <= item < item_count):
            raise IngestionError(f"unknown item id {item} (J={item_count})")
        if isinstance(categories, (str, int)):
            categories = [categories]
        for cat in categories:
            members.setdefault(cat, []).append(item)

    rng = rng_for(seed, STREAM_GRAPH)
    pairs = []
    for cat in sorted(members, key=repr):
        group = sorted(set(members[cat]))
        m = len(group)
        if m < 2:
            continue
        if m * (m - 1) // 2 <= max_edges_per_category:
            pairs.extend(itertools.combinations(group, 2))
        else:
            n_hubs = max(1, max_edges_per_category // m)
            hubs = rng.choice(m, size=n_hubs, replace=False)
            for h in sorted(int(x) for x in hubs):
                hub = group[h]
                pairs.extend((hub, other) for other in group if other != hub)
    return RelationGraph.from_pairs(pairs, item_count, what="item-category")


def build_item_graph_cointeraction(records, item_count: int, type_count: int,
                                   min_common_users: int = 1) -> RelationGraph:
    """Connect items interacted with by enough common users under one type."""
    if min_common_users < 1:
        raise IngestionError(f"min_common_users must be >= 1, got {min_common_users}")
    by_user_type: dict[tuple[int, int], set[int]] = {}
    for rec in records:
        u, v, k = int(rec[0]), int(rec[1]), int(rec[2])
        if not (0 <= v < item_count and 0 <= k < type_count):
            raise IngestionError(f"record item={v}, type={k} out of range")
        by_user_type.setdefault((u, k), set()).add(v)

    common: dict[tuple[int, int], set[int]] = {}
    for (u, _), items in by_user_type.items():
        for a, b in itertools.combinations(sorted(items), 2):
            common.setdefault((a, b), set()).add(u)

    pairs = [pair for pair, users in common.items() if len(users) >= min_common_users]
    return RelationGraph.from_pairs(pairs, item_count, what="item-cointeraction")


def normalize(graph: RelationGraph) -> SparseMatrix:
    """Symmetric normalization of the self-loop-augmented adjacency.

    Returns the operator with entries 1/sqrt(d_a * d_b) at every edge of
    A+I, where d are the degrees of A+I.  Isolated nodes keep their own
    embedding through the unit self-loop.
    """
    n = graph.node_count
    deg = graph.degrees() + 1  # self loops
    rows = np.concatenate([np.arange(n), graph.edge_a, graph.edge_b])
    cols = np.concatenate([np.arange(n), graph.edge_b, graph.edge_a])
    inv_sqrt = 1.0 / np.sqrt(deg.astype(np.float64))
    vals = inv_sqrt[rows] * inv_sqrt[cols]
    return SparseMatrix.from_coo(n, n, rows, cols, vals)


def connected_components(graph: RelationGraph) -> np.ndarray:
    """Component label per node; labels numbered by first node occurrence."""
    parent = np.arange(graph.node_count, dtype=np.int64)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for a, b in zip(graph.edge_a, graph.edge_b):
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    labels = np.empty(graph.node_count, dtype=np.int64)
    next_label = 0
    seen: dict[int, int] = {}
    for node in range(graph.node_count):
        root = find(node)
        if root not in seen:
            seen[root] = next_label
            next_label += 1
        labels[node] = seen[root]
    return labels
