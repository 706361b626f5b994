"""Forward pass: typed message passing, gated fusion, relational propagation.

The interaction encoder alternates user and item sub-vertex updates over the
bipartite multi-typed graph, adding per-edge time embeddings, then stacks all
layer outputs feature-wise.  Per-type item encodings are fused by a learned
softmax gate.  Both entity families are then smoothed over their relation
graphs by a parameter-free normalized-adjacency update, and each connected
component is summarized by mean pooling for the contrastive readout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .graphs import MultiTypedGraph, RelationGraph
from .numerics import STREAM_INIT, SparseMatrix, Tape, Tensor, rng_for
from .temporal import TimeCodec, time_table


@dataclass
class ModelParams:
    """All trainable tensors plus the hyper-parameters shaping them."""

    user_count: int
    item_count: int
    type_count: int
    dim: int
    layers: int  # interaction encoder depth L
    prop_layers: int  # relational propagation depth
    negative_slope: float
    user_table: Tensor  # (I, d)
    item_table: Tensor  # (J*K, d)
    neighbor_weights: list  # L tensors (d, d)
    self_weights: list  # L tensors (d, d)
    gate_query: Tensor  # ((L+1)*d, 1)
    mi_weight_user: float = 0.1
    mi_weight_item: float = 0.1
    l2_weight: float = 1e-4

    @property
    def concat_dim(self) -> int:
        return (self.layers + 1) * self.dim

    def trainable(self):
        """Ordered (name, tensor) pairs; order is the checkpoint layout."""
        out = [("user_table", self.user_table), ("item_table", self.item_table)]
        for l, (wn, ws) in enumerate(zip(self.neighbor_weights, self.self_weights)):
            out.append((f"neighbor_w{l}", wn))
            out.append((f"self_w{l}", ws))
        out.append(("gate_query", self.gate_query))
        return out

    def tensors(self):
        return [t for _, t in self.trainable()]

    def copy(self) -> "ModelParams":
        dup = ModelParams(
            user_count=self.user_count,
            item_count=self.item_count,
            type_count=self.type_count,
            dim=self.dim,
            layers=self.layers,
            prop_layers=self.prop_layers,
            negative_slope=self.negative_slope,
            user_table=Tensor(self.user_table.values.copy()),
            item_table=Tensor(self.item_table.values.copy()),
            neighbor_weights=[Tensor(w.values.copy()) for w in self.neighbor_weights],
            self_weights=[Tensor(w.values.copy()) for w in self.self_weights],
            gate_query=Tensor(self.gate_query.values.copy()),
            mi_weight_user=self.mi_weight_user,
            mi_weight_item=self.mi_weight_item,
            l2_weight=self.l2_weight,
        )
        return dup


def _glorot(rng, rows, cols):
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_params(user_count: int, item_count: int, type_count: int, dim: int,
                layers: int, seed: int, prop_layers: int = 2,
                negative_slope: float = 0.2, mi_weight_user: float = 0.1,
                mi_weight_item: float = 0.1, l2_weight: float = 1e-4) -> ModelParams:
    """Seeded scaled-uniform init; the gate query starts at zero."""
    if min(user_count, item_count, type_count, dim) < 1:
        raise ConfigError("all model dimensions must be positive")
    if layers < 0:
        raise ConfigError(f"layer count must be >= 0, got {layers}")
    if prop_layers < 1:
        raise ConfigError(f"propagation depth must be >= 1, got {prop_layers}")
    rng = rng_for(seed, STREAM_INIT)
    n_sub = item_count * type_count
    user_table = Tensor(_glorot(rng, user_count, dim))
    item_table = Tensor(_glorot(rng, n_sub, dim))
    neighbor_weights = [Tensor(_glorot(rng, dim, dim)) for _ in range(layers)]
    self_weights = [Tensor(_glorot(rng, dim, dim)) for _ in range(layers)]
    gate_query = Tensor(np.zeros(((layers + 1) * dim, 1)))
    return ModelParams(
        user_count=user_count,
        item_count=item_count,
        type_count=type_count,
        dim=dim,
        layers=layers,
        prop_layers=prop_layers,
        negative_slope=negative_slope,
        user_table=user_table,
        item_table=item_table,
        neighbor_weights=neighbor_weights,
        self_weights=self_weights,
        gate_query=gate_query,
        mi_weight_user=mi_weight_user,
        mi_weight_item=mi_weight_item,
        l2_weight=l2_weight,
    )


@dataclass(frozen=True)
class InteractionOperators:
    """Fixed structures driving one encoder layer over the bipartite graph.

    Message matrices carry the 1/(sender degree) weights; self-scale columns
    carry 1/(own degree) with zero-degree vertices clamped to 1.  Time biases
    are the degree-weighted sums of per-edge slot embeddings, identical at
    every layer, or None when temporal context is disabled.
    """

    user_msg: SparseMatrix  # (I, J*K)
    item_msg: SparseMatrix  # (J*K, I)
    user_self_scale: np.ndarray  # (I, 1)
    item_self_scale: np.ndarray  # (J*K, 1)
    user_time_bias: np.ndarray | None  # (I, d)
    item_time_bias: np.ndarray | None  # (J*K, d)


def build_operators(graph: MultiTypedGraph, codec: TimeCodec | None,
                    temporal: bool = True) -> InteractionOperators:
    n_users = graph.user_count
    n_sub = graph.sub_vertex_count
    inv_user = 1.0 / np.maximum(graph.user_degree, 1).astype(np.float64)
    inv_target = 1.0 / np.maximum(graph.target_degree, 1).astype(np.float64)

    eu, et, es = graph.edge_users, graph.edge_targets, graph.edge_slots
    user_msg = SparseMatrix.from_coo(n_users, n_sub, eu, et, inv_target[et])
    item_msg = SparseMatrix.from_coo(n_sub, n_users, et, eu, inv_user[eu])

    user_bias = item_bias = None
    if temporal:
        if codec is None:
            raise ConfigError("temporal context requires a time codec")
        table = time_table(codec, graph.max_slot + 1)
        n_slots = table.shape[0]
        slot_u = sp.coo_matrix((inv_target[et], (eu, es)), shape=(n_users, n_slots)).tocsr()
        slot_v = sp.coo_matrix((inv_user[eu], (et, es)), shape=(n_sub, n_slots)).tocsr()
        user_bias = np.asarray(slot_u @ table)
        item_bias = np.asarray(slot_v @ table)
    return InteractionOperators(
        user_msg=user_msg,
        item_msg=item_msg,
        user_self_scale=inv_user[:, None],
        item_self_scale=inv_target[:, None],
        user_time_bias=user_bias,
        item_time_bias=item_bias,
    )


def propagate_layer(tape: Tape, user_states: Tensor, item_states: Tensor,
                    ops: InteractionOperators, neighbor_weight: Tensor,
                    self_weight: Tensor, slope: float):
    """One bipartite update: degree-scaled self term plus aggregated messages.

    Each side receives (1/own_degree) * own_state @ self_weight plus the sum
    over incident edges of (1/sender_degree) * (sender_state + time_embedding)
    @ neighbor_weight, passed through a leaky rectifier.
    """

    def side(states, other, msg, self_scale, bias):
        self_term = tape.matmul(tape.mul(states, Tensor(self_scale)), self_weight)
        gathered = tape.spmm(msg, other)
        if bias is not None:
            gathered = tape.add(gathered, Tensor(bias))
        nbr_term = tape.matmul(gathered, neighbor_weight)
        return tape.leaky_relu(tape.add(self_term, nbr_term), slope)

    next_users = side(user_states, item_states, ops.user_msg,
                      ops.user_self_scale, ops.user_time_bias)
    next_items = side(item_states, user_states, ops.item_msg,
                      ops.item_self_scale, ops.item_time_bias)
    return next_users, next_items


def encode_interactions(tape: Tape, params: ModelParams, ops: InteractionOperators):
    """Run all encoder layers and concatenate every layer's states.

    Returns (user_layers, item_layers, user_concat, item_concat); the concat
    width is (layers + 1) * dim.
    """
    user_layers = [params.user_table]
    item_layers = [params.item_table]
    for wn, ws in zip(params.neighbor_weights, params.self_weights):
        u, v = propagate_layer(tape, user_layers[-1], item_layers[-1], ops,
                               wn, ws, params.negative_slope)
        user_layers.append(u)
        item_layers.append(v)
    user_concat = tape.concat_cols(user_layers)
    item_concat = tape.concat_cols(item_layers)
    return user_layers, item_layers, user_concat, item_concat


def item_type_views(tape: Tape, item_concat: Tensor, item_count: int, type_count: int):
    """Split the sub-vertex encoding into one (J, width) tensor per type."""
    base = np.arange(item_count, dtype=np.int64) * type_count
    return [tape.gather_rows(item_concat, base + k) for k in range(type_count)]


def gated_fusion(tape: Tape, type_encodings, gate_query: Tensor):
    """Softmax-gated sum of per-type encodings, per item.

    Gate logits are inner products with a single learned query; gates are
    nonnegative and sum to one, so the output stays in the convex hull of
    the type-specific encodings.  Returns (fused, gates).
    """
    type_encodings = list(type_encodings)
    logits = tape.concat_cols([tape.matmul(h, gate_query) for h in type_encodings])
    gates = tape.softmax_rows(logits)
    fused = None
    for k, h in enumerate(type_encodings):
        contrib = tape.mul(h, tape.slice_cols(gates, k, k + 1))
        fused = contrib if fused is None else tape.add(fused, contrib)
    return fused, gates


def relational_propagate(tape: Tape, z0: Tensor, operator: SparseMatrix,
                         num_layers: int, slope: float) -> Tensor:
    """Parameter-free smoothing: repeated normalized-adjacency updates."""
    z = z0
    for _ in range(num_layers):
        z = tape.leaky_relu(tape.spmm(operator, z), slope)
    return z


def readout(tape: Tape, z: Tensor, labels: np.ndarray) -> Tensor:
    """Mean-pool rows per connected component; row c summarizes component c."""
    labels = np.asarray(labels, dtype=np.int64)
    n_comp = int(labels.max()) + 1 if labels.size else 0
    sizes = np.bincount(labels, minlength=n_comp).astype(np.float64)
    sums = tape.scatter_add_rows(z, labels, n_comp)
    return tape.mul(sums, Tensor(1.0 / sizes[:, None]))


def discriminate(z_row, f_row) -> float:
    """Probability that a node embedding belongs to a component summary."""
    z = np.asarray(z_row, dtype=np.float64).ravel()
    f = np.asarray(f_row, dtype=np.float64).ravel()
    if z.shape != f.shape:
        raise ConfigError(f"embedding lengths differ: {z.shape} vs {f.shape}")
    x = float(z @ f)
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def score(user_vec, item_vec) -> float:
    """Predicted preference: plain (unbounded) inner product."""
    u = np.asarray(user_vec, dtype=np.float64).ravel()
    v = np.asarray(item_vec, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ConfigError(f"embedding lengths differ: {u.shape} vs {v.shape}")
    return float(u @ v)


@dataclass(frozen=True)
class PreparedGraphs:
    """Everything structure-derived that the forward pass consumes."""

    interaction: InteractionOperators
    user_operator: SparseMatrix | None = None
    user_labels: np.ndarray | None = None
    item_operator: SparseMatrix | None = None
    item_labels: np.ndarray | None = None

    @classmethod
    def assemble(cls, graph: MultiTypedGraph, codec: TimeCodec | None,
                 social: RelationGraph | None, item_graph: RelationGraph | None,
                 temporal: bool = True) -> "PreparedGraphs":
        return cls(
            interaction=build_operators(graph, codec, temporal=temporal),
            user_operator=social.normalized if social is not None else None,
            user_labels=social.component_labels if social is not None else None,
            item_operator=item_graph.normalized if item_graph is not None else None,
            item_labels=item_graph.component_labels if item_graph is not None else None,
        )


@dataclass
class ForwardOutput:
    """All intermediate and final states of one forward pass."""

    user_layers: list
    item_layers: list
    user_concat: Tensor  # (I, (L+1)d)
    item_type_concat: list  # per type, (J, (L+1)d)
    item_fused: Tensor  # (J, (L+1)d)
    gates: Tensor  # (J, K)
    user_final: Tensor  # (I, (L+1)d)
    item_final: Tensor  # (J, (L+1)d)
    user_summaries: Tensor | None  # (components, (L+1)d)
    item_summaries: Tensor | None


def scoring_embeddings(out: "ForwardOutput", stage: str):
    """Embedding pair feeding the preference inner product."""
    if stage == "encoded":
        return out.user_concat, out.item_fused
    return out.user_final, out.item_final


def forward(tape: Tape, params: ModelParams, prepared: PreparedGraphs) -> ForwardOutput:
    user_layers, item_layers, user_concat, item_concat = encode_interactions(
        tape, params, prepared.interaction
    )
    views = item_type_views(tape, item_concat, params.item_count, params.type_count)
    item_fused, gates = gated_fusion(tape, views, params.gate_query)

    user_final = user_concat
    user_summaries = None
    if prepared.user_operator is not None:
        user_final = relational_propagate(tape, user_concat, prepared.user_operator,
                                          params.prop_layers, params.negative_slope)
        user_summaries = readout(tape, user_final, prepared.user_labels)

    item_final = item_fused
    item_summaries = None
    if prepared.item_operator is not None:
        item_final = relational_propagate(tape, item_fused, prepared.item_operator,
                                          params.prop_layers, params.negative_slope)
        item_summaries = readout(tape, item_final, prepared.item_labels)

    return ForwardOutput(
        user_layers=user_layers,
        item_layers=item_layers,
        user_concat=user_concat,
        item_type_concat=views,
        item_fused=item_fused,
        gates=gates,
        user_final=user_final,
        item_final=item_final,
        user_summaries=user_summaries,
        item_summaries=item_summaries,
    )
