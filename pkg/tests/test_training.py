import math

import numpy as np
import pytest

from socialrec import evaluation, model, training
from socialrec.errors import ConfigError, IngestionError
from socialrec.graphs import (InteractionRecord, build_item_graph_categories,
                              build_multityped_graph, build_social_graph)
from socialrec.numerics import Tape, Tensor, rng_for
from socialrec.synth import planted_dataset
from socialrec.temporal import TimeCodec
from socialrec.training import (BprTriple, TrainConfig, TripleSampler, bpr_term,
                                component_permutation, config_from_mapping,
                                config_to_text, fit, load_checkpoint, mi_loss,
                                parse_kv_text, sample_bpr_triples, save_checkpoint,
                                shuffle_corrupt, total_loss)

DAY = 86_400


def prepared_from(dataset, dim, temporal=True):
    codec = TimeCodec(origin=0, granularity=DAY, dim=dim)
    gm = build_multityped_graph(dataset.records, dataset.user_count,
                                dataset.item_count, dataset.type_count, codec)
    social = build_social_graph(dataset.social_edges, dataset.user_count)
    items = build_item_graph_categories(dataset.item_categories, dataset.item_count)
    return model.PreparedGraphs.assemble(gm, codec, social, items, temporal=temporal)


# -- triple sampling -----------------------------------------------------------------


def test_negatives_only_from_complement():
    recs = [InteractionRecord(0, 0, 0, 1)]
    rng = rng_for(1, 0)
    triples = sample_bpr_triples(recs, 3, 200, rng)
    assert all(t.pos_item == 0 and t.neg_item in (1, 2) for t in triples)


def test_sampling_deterministic_per_seed():
    recs = [InteractionRecord(0, 0, 0, 1), InteractionRecord(1, 2, 1, 2)]
    a = sample_bpr_triples(recs, 5, 50, rng_for(9, 0))
    b = sample_bpr_triples(recs, 5, 50, rng_for(9, 0))
    assert a == b


def test_negative_frequency_uniform_within_3_sigma():
    recs = [InteractionRecord(0, 0, 0, 1)]
    triples = sample_bpr_triples(recs, 21, 10_000, rng_for(3, 0))
    counts = np.bincount([t.neg_item for t in triples], minlength=21)
    assert counts[0] == 0
    expected = 10_000 / 20
    sigma = math.sqrt(10_000 * (1 / 20) * (19 / 20))
    assert all(abs(c - expected) <= 3 * sigma for c in counts[1:])


def test_user_with_all_items_skipped(caplog):
    recs = [InteractionRecord(0, 0, 0, 1), InteractionRecord(0, 1, 0, 2),
            InteractionRecord(1, 0, 0, 3)]
    sampler = TripleSampler(recs, 2)
    triples = sampler.sample(50, rng_for(0, 0))
    assert all(t.user == 1 for t in triples)
    assert "interact with every item" in caplog.text


def test_no_sampleable_user_raises():
    with pytest.raises(IngestionError):
        TripleSampler([InteractionRecord(0, 0, 0, 1)], 1)


def test_exclude_blocks_heldout_negatives():
    recs = [InteractionRecord(0, 0, 0, 1)]
    sampler = TripleSampler(recs, 4, exclude={0: {1, 2}})
    triples = sampler.sample(100, rng_for(4, 0))
    assert all(t.neg_item == 3 for t in triples)


# -- loss pieces ----------------------------------------------------------------------


def test_bpr_term_values():
    assert bpr_term(1.0, 1.0) == pytest.approx(math.log(2.0), abs=1e-12)
    assert bpr_term(20.0, 0.0) < 1e-8
    assert bpr_term(0.0, math.log(3.0)) == pytest.approx(math.log(4.0), abs=1e-12)


def test_shuffle_singleton_component_unchanged(rng):
    z = rng.normal(size=(3, 2))
    out = shuffle_corrupt(z, np.array([0, 1, 2]), rng_for(0, 0))
    np.testing.assert_array_equal(out, z)


def test_shuffle_two_row_component_half_swap():
    swaps = 0
    n = 400
    rng = rng_for(17, 0)
    for _ in range(n):
        perm = component_permutation(np.array([0, 0]), rng)
        swaps += perm[0] == 1
    sigma = math.sqrt(n * 0.25)
    assert abs(swaps - n / 2) <= 3 * sigma


def test_shuffle_preserves_multiset(rng):
    z = rng.normal(size=(8, 3))
    labels = np.array([0, 0, 0, 1, 1, 2, 2, 2])
    out = shuffle_corrupt(z, labels, rng_for(5, 0))
    np.testing.assert_allclose(np.sort(out, axis=0), np.sort(z, axis=0))
    for c in range(3):
        members = labels == c
        np.testing.assert_allclose(np.sort(out[members], axis=0),
                                   np.sort(z[members], axis=0))


def test_mi_loss_hand_value():
    # one two-member component, all scores zero -> ln 2
    z = Tensor([[1.0, 0.0], [-1.0, 0.0]])
    z_tilde = Tensor([[-1.0, 0.0], [1.0, 0.0]])
    summaries = Tensor([[0.0, 0.0]])
    labels = np.array([0, 0])
    out = mi_loss(Tape(), z, z_tilde, summaries, labels,
                  None, None, None, None, 1.0, 0.0)
    assert out.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_mi_loss_zero_weights():
    z = Tensor([[1.0, 2.0], [2.0, 1.0]])
    out = mi_loss(Tape(), z, z, Tensor([[1.0, 1.0]]), np.array([0, 0]),
                  z, z, Tensor([[1.0, 1.0]]), np.array([0, 0]), 0.0, 0.0)
    assert out.item() == 0.0


def test_mi_loss_separated_scores_near_zero():
    z = Tensor([[50.0], [50.0]])
    z_tilde = Tensor([[-50.0], [-50.0]])
    summaries = Tensor([[1.0]])
    out = mi_loss(Tape(), z, z_tilde, summaries, np.array([0, 0]),
                  None, None, None, None, 1.0, 0.0)
    assert 0.0 <= out.item() < 1e-12


def test_mi_loss_invariant_to_sample_order(rng):
    z = rng.normal(size=(6, 3))
    labels = np.array([0, 0, 0, 1, 1, 1])
    perm_rows = np.array([2, 0, 1, 5, 4, 3])  # stays within components
    summaries = rng.normal(size=(2, 3))
    z_t = z[perm_rows]

    def value(order):
        return mi_loss(Tape(), Tensor(z[order]), Tensor(z_t[order]),
                       Tensor(summaries), labels[order],
                       None, None, None, None, 0.7, 0.0).item()

    base = value(np.arange(6))
    shuffled = value(np.array([3, 1, 5, 0, 2, 4]))
    assert shuffled == pytest.approx(base, abs=1e-12)


def test_mi_singletons_excluded(rng):
    z = Tensor(rng.normal(size=(3, 2)))
    labels = np.array([0, 1, 2])
    out = mi_loss(Tape(), z, z, Tensor(rng.normal(size=(3, 2))), labels,
                  None, None, None, None, 1.0, 0.0)
    assert out.item() == 0.0


# -- total loss against an independent recomputation ------------------------------------


def oracle_total_loss(dataset, params, triples, user_perm, item_perm, cfg):
    """Standalone scalar recomputation with plain loops; no tape, no scipy."""
    I, J, K = dataset.user_count, dataset.item_count, dataset.type_count
    d, L, Ls = params.dim, params.layers, params.prop_layers
    slope = params.negative_slope

    def lrelu(x):
        return np.where(x >= 0, x, slope * x)

    def sigm(x):
        return 1.0 / (1.0 + np.exp(-x))

    # deduplicated edges, latest timestamp wins
    latest = {}
    for u, v, k, ts in dataset.records:
        key = (u, v * K + k)
        if key not in latest or ts > latest[key]:
            latest[key] = ts
    edges = [(u, t, ts // DAY) for (u, t), ts in latest.items()]
    deg_u = np.zeros(I)
    deg_t = np.zeros(J * K)
    for u, t, _ in edges:
        deg_u[u] += 1
        deg_t[t] += 1

    def slot_vec(slot):
        e = np.arange(d)
        angle = slot / np.power(10_000.0, e / d)
        return np.where(e % 2 == 0, np.sin(angle), np.cos(angle))

    hu = [params.user_table.values.copy()]
    hv = [params.item_table.values.copy()]
    for l in range(L):
        w1 = params.neighbor_weights[l].values
        w2 = params.self_weights[l].values
        nu = np.zeros((I, d))
        nv = np.zeros((J * K, d))
        for u in range(I):
            nu[u] = (hu[l][u] / max(deg_u[u], 1)) @ w2
        for t in range(J * K):
            nv[t] = (hv[l][t] / max(deg_t[t], 1)) @ w2
        for u, t, slot in edges:
            nu[u] += ((hv[l][t] + slot_vec(slot)) / deg_t[t]) @ w1
            nv[t] += ((hu[l][u] + slot_vec(slot)) / deg_u[u]) @ w1
        hu.append(lrelu(nu))
        hv.append(lrelu(nv))
    hu_star = np.concatenate(hu, axis=1)
    hv_star = np.concatenate(hv, axis=1)

    q = params.gate_query.values.ravel()
    fused = np.zeros((J, (L + 1) * d))
    for j in range(J):
        rows = np.stack([hv_star[j * K + k] for k in range(K)])
        logits = rows @ q
        g = np.exp(logits - logits.max())
        g /= g.sum()
        fused[j] = g @ rows

    def dense_eta(n, pairs):
        a = np.eye(n)
        for x, y in pairs:
            if x != y:
                a[x, y] = a[y, x] = 1.0
        dinv = np.diag(1.0 / np.sqrt(a.sum(axis=1)))
        return dinv @ a @ dinv

    def components(n, pairs):
        labels = list(range(n))

        def root(x):
            while labels[x] != x:
                x = labels[x]
            return x

        for x, y in pairs:
            rx, ry = root(x), root(y)
            if rx != ry:
                labels[max(rx, ry)] = min(rx, ry)
        return np.array([root(x) for x in range(n)])

    social_pairs = [(a, b) for a, b in dataset.social_edges]
    eta_u = dense_eta(I, social_pairs)
    z_u = hu_star
    for _ in range(Ls):
        z_u = lrelu(eta_u @ z_u)

    cat_pairs = []
    groups = {}
    for j, cats in dataset.item_categories.items():
        for c in cats:
            groups.setdefault(c, []).append(j)
    for group in groups.values():
        for a in group:
            for b in group:
                if a < b:
                    cat_pairs.append((a, b))
    eta_v = dense_eta(J, cat_pairs)
    z_v = fused
    for _ in range(Ls):
        z_v = lrelu(eta_v @ z_v)

    log_sig = lambda s: -np.logaddexp(0.0, -s)
    loss = 0.0
    for t in triples:
        diff = z_u[t.user] @ z_v[t.pos_item] - z_u[t.user] @ z_v[t.neg_item]
        loss -= log_sig(diff)

    for _, tensor in params.trainable():
        loss += params.l2_weight * (tensor.values ** 2).sum()

    for z, perm, pairs, n, weight in (
            (z_u, user_perm, social_pairs, I, params.mi_weight_user),
            (z_v, item_perm, cat_pairs, J, params.mi_weight_item)):
        labels = components(n, pairs)
        sizes = {c: (labels == c).sum() for c in set(labels.tolist())}
        f = {c: z[labels == c].mean(axis=0) for c in sizes}
        eligible = [i for i in range(n) if sizes[labels[i]] >= 2]
        if not eligible:
            continue
        acc = 0.0
        for i in eligible:
            acc += log_sig(z[i] @ f[labels[i]])
            acc += log_sig(-(z[perm[i]] @ f[labels[i]]))
        loss -= weight * acc / (2 * len(eligible))
    return float(loss)


def canonical_loss_setup(canonical, no_mi=False, l2=1e-4):
    cfg = TrainConfig(dim=4, layers=1, prop_layers=1, l2_weight=l2,
                      no_mi=no_mi).validate()
    params = model.init_params(5, 8, 2, 4, 1, seed=21, prop_layers=1,
                               l2_weight=l2)
    prepared = prepared_from(canonical, dim=4)
    triples = [BprTriple(0, 0, 3), BprTriple(1, 3, 0),
               BprTriple(2, 5, 7), BprTriple(4, 7, 0)]
    user_perm = np.array([1, 2, 0, 4, 3])
    item_perm = np.array([1, 2, 3, 0, 7, 4, 5, 6])
    return cfg, params, prepared, triples, user_perm, item_perm


def test_total_loss_matches_standalone_recomputation(canonical):
    cfg, params, prepared, triples, user_perm, item_perm = \
        canonical_loss_setup(canonical)
    tape = Tape()
    out = model.forward(tape, params, prepared)
    loss, comps = total_loss(tape, params, prepared, out, triples, cfg,
                             user_perm=user_perm, item_perm=item_perm)
    expect = oracle_total_loss(canonical, params, triples, user_perm,
                               item_perm, cfg)
    assert loss.item() == pytest.approx(expect, abs=1e-10)
    assert comps["total"] == pytest.approx(comps["bpr"] + comps["reg"] + comps["mi"])


def test_total_loss_pure_bpr_when_ablated(canonical):
    cfg, params, prepared, triples, *_ = canonical_loss_setup(
        canonical, no_mi=True, l2=0.0)
    tape = Tape()
    out = model.forward(tape, params, prepared)
    loss, comps = total_loss(tape, params, prepared, out, triples, cfg)
    z_u, z_v = out.user_final.values, out.item_final.values
    expect = sum(bpr_term(z_u[t.user] @ z_v[t.pos_item],
                          z_u[t.user] @ z_v[t.neg_item]) for t in triples)
    assert loss.item() == pytest.approx(expect, abs=1e-10)
    assert comps["mi"] == 0.0 and comps["reg"] == 0.0


def test_zero_params_zero_regularizer(canonical):
    cfg, params, prepared, triples, up, ip = canonical_loss_setup(canonical, l2=1.0)
    for _, t in params.trainable():
        t.values[:] = 0.0
    tape = Tape()
    out = model.forward(tape, params, prepared)
    _, comps = total_loss(tape, params, prepared, out, triples, cfg,
                          user_perm=up, item_perm=ip)
    assert comps["reg"] == 0.0


def test_one_adam_step_decreases_single_triple_bpr(canonical):
    cfg, params, prepared, _, *_ = canonical_loss_setup(
        canonical, no_mi=True, l2=0.0)
    # the negative must sit in the other item-graph component: propagation
    # over a full category clique averages its members, so same-category
    # items score identically and carry no ranking gradient
    triple = [BprTriple(0, 0, 7)]

    def current_bpr():
        tape = Tape()
        out = model.forward(tape, params, prepared)
        loss, _ = total_loss(tape, params, prepared, out, triple, cfg)
        return tape, loss

    tape, loss = current_bpr()
    before = loss.item()
    for t in params.tensors():
        t.zero_grad()
    tape.backward(loss)
    from socialrec.numerics import AdamState, adam_step
    adam_step(params.tensors(), [t.grad_or_zeros() for t in params.tensors()],
              AdamState.for_params(params.tensors()), lr=1e-3)
    _, loss2 = current_bpr()
    assert loss2.item() < before


# -- fit -----------------------------------------------------------------------------


def small_config(**kw):
    base = dict(epochs=4, batch_size=32, dim=8, layers=1, prop_layers=1,
                learning_rate=0.005, seed=5)
    base.update(kw)
    return TrainConfig(**base).validate()


def test_early_stopping_state_machine():
    ds = planted_dataset()
    sequence = [0.1, 0.2, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3]
    snapshots = []

    def metric(params):
        snapshots.append(params.user_table.values.copy())
        return sequence[len(snapshots) - 1]

    result = fit(ds, small_config(epochs=20, patience=5), val_metric=metric)
    assert len(result.history) == 8  # 3 improving + 5 flat
    assert result.stopped == "early"
    assert result.best_epoch == 2
    assert result.best_metric == pytest.approx(0.3)
    np.testing.assert_array_equal(result.params.user_table.values, snapshots[2])


def test_monotone_improvement_runs_to_cap():
    ds = planted_dataset()
    calls = []

    def metric(params):
        calls.append(1)
        return float(len(calls))

    result = fit(ds, small_config(epochs=6, patience=3), val_metric=metric)
    assert len(result.history) == 6
    assert result.stopped == "cap"
    assert result.best_epoch == 5


def test_fit_deterministic_and_checkpoint_bit_identical(tmp_path):
    ds = planted_dataset()
    cfg = small_config(epochs=3)
    r1 = fit(ds, cfg)
    r2 = fit(ds, cfg)
    assert r1.history == r2.history
    save_checkpoint(tmp_path / "a", r1.params, cfg, r1.best_epoch, r1.best_metric)
    save_checkpoint(tmp_path / "b", r2.params, cfg, r2.best_epoch, r2.best_metric)
    for fa in sorted((tmp_path / "a").iterdir()):
        fb = tmp_path / "b" / fa.name
        assert fa.read_bytes() == fb.read_bytes()


def test_fit_divergence_returns_last_good(caplog):
    ds = planted_dataset()
    result = fit(ds, small_config(epochs=6, learning_rate=1e5, batch_size=64),
                 val_metric=lambda p: 0.5)
    assert result.stopped == "diverged"
    assert "diverged" in caplog.text


def test_ablation_everything_off_zeroes_mi():
    ds = planted_dataset()
    cfg = small_config(no_social=True, no_item_graph=True, no_mi=True, epochs=3)
    result = fit(ds, cfg)
    assert all(row["mi"] == 0.0 for row in result.history)


# -- checkpoints and config text -------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = small_config()
    params = model.init_params(6, 7, 2, cfg.dim, cfg.layers, seed=1,
                               prop_layers=cfg.prop_layers)
    save_checkpoint(tmp_path / "ck", params, cfg, epoch=4, metric=0.625)
    loaded, cfg2, epoch, metric = load_checkpoint(tmp_path / "ck")
    assert epoch == 4 and metric == 0.625
    assert cfg2 == cfg
    for (na, ta), (nb, tb) in zip(params.trainable(), loaded.trainable()):
        assert na == nb
        np.testing.assert_array_equal(ta.values, tb.values)


def test_config_text_round_trip():
    cfg = TrainConfig(learning_rate=0.01, no_social=True, dim=32)
    parsed = config_from_mapping(parse_kv_text(config_to_text(cfg)))
    assert parsed == cfg


def test_missing_config_keys_listed_with_defaults():
    with pytest.raises(ConfigError) as err:
        config_from_mapping({"learning_rate": "0.01"})
    msg = str(err.value)
    assert "batch_size (default 1024)" in msg
    assert "patience (default 5)" in msg


def test_unknown_config_key_rejected():
    text = config_to_text(TrainConfig()) + "learning_rte = 0.1\n"
    with pytest.raises(ConfigError, match="learning_rte"):
        config_from_mapping(parse_kv_text(text))


def test_config_validation_bounds():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(dim=7).validate()
    with pytest.raises(ConfigError):
        TrainConfig(score_stage="banana").validate()
