"""Model assembly: groups, heads, encoding, forward properties, prediction."""

import numpy as np
import pytest

from xlvqa import nn
from xlvqa.data import DataConfig, LanguageConfig, build_corpus_and_splits
from xlvqa.model import (
    GROUPS,
    Batch,
    HeadKind,
    ModelConfig,
    ParameterSet,
    ablate_text_to_placeholder,
    ablate_zero_visual,
    build_model,
    encode_batch,
    forward,
    fresh_head_trans,
    predict,
)


def tiny_dataset():
    cfg = DataConfig(
        seed=11,
        n_train_scenes=12,
        n_dev_scenes=3,
        n_test_scenes=6,
        n_fewshot_scenes=2,
        n_pretrain_scenes=2,
        languages=(LanguageConfig("t", 0.25, "reverse"),),
    )
    return build_corpus_and_splits(cfg)


def tiny_model_cfg(ds, **over):
    base = dict(
        d_model=16, layers=1, heads=2, vocab_size=len(ds.vocab), d_v=ds.config.d_v,
        d_h=16, n_classes=20, head_dropout=0.0,
    )
    base.update(over)
    return ModelConfig(**base)


def tiny_batch(ds, cfg, with_qtype=True, n=4, ablation="none"):
    split = ds.splits.train
    return encode_batch(split.records[:n], split.features, cfg, ds.vocab, with_qtype, ablation)


def test_group_partition_complete_and_disjoint():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds)
    ps = build_model(cfg, HeadKind.DEEP, seed=0)
    seen = set()
    for group in GROUPS:
        for name in ps.group(group):
            key = f"{group}/{name}"
            assert key not in seen
            seen.add(key)
    assert seen == set(ps.named().keys())
    assert set(ps.trainable()) == seen
    assert not set(ps.trainable(GROUPS))


def test_head_param_counts():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds, d_model=16, d_h=24, n_classes=20)

    def head_sizes(kind):
        ps = build_model(cfg, kind, seed=1)
        return sum(
            t.data.size
            for g in ("head_trans", "head_weight", "head_bias")
            for t in ps.group(g).values()
        )

    d, dh, c = 16, 24, 20
    assert head_sizes(HeadKind.LINEAR) == d * c + c
    assert head_sizes(HeadKind.DEEP) == d * dh + dh + 2 * dh + dh * c + c
    assert head_sizes(HeadKind.DEEP_NO_LN) == d * dh + dh + dh * c + c


def test_deep_head_first_layer_orthogonal():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds, d_model=16, d_h=32)
    ps = build_model(cfg, HeadKind.DEEP, seed=3)
    w = ps["head_trans/w1"].data  # (d_model, d_h), rows <= cols
    assert np.abs(w @ w.T - np.eye(16)).max() < 1e-6


def test_build_deterministic_in_seed():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds)
    a = build_model(cfg, HeadKind.DEEP, seed=5).arrays()
    b = build_model(cfg, HeadKind.DEEP, seed=5).arrays()
    c = build_model(cfg, HeadKind.DEEP, seed=6).arrays()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_encode_batch_qtype_prefix_and_widths():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds)
    records = ds.splits.train.records[:3]
    plain = encode_batch(records, ds.splits.train.features, cfg, ds.vocab, with_qtype=False)
    tagged = encode_batch(records, ds.splits.train.features, cfg, ds.vocab, with_qtype=True)
    assert tagged.token_ids.shape[1] == plain.token_ids.shape[1] + 2
    for i, r in enumerate(records):
        assert tagged.token_ids[i, 1] == ds.vocab.qtype_token(r.qtype)
        assert tagged.token_ids[i, 2] == 5  # colon id
    with pytest.raises(ValueError):
        encode_batch(records, ds.splits.train.features, cfg, ds.vocab, True, ablation="nope")


def test_encode_batch_overflow():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds, max_text_len=3)
    with pytest.raises(ValueError):
        encode_batch(ds.splits.train.records[:2], ds.splits.train.features, cfg, ds.vocab, True)


def test_text_only_ablation_is_single_question_mark():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds)
    batch = tiny_batch(ds, cfg, ablation="text-only-?")
    assert batch.token_ids.shape[1] == 3
    assert (batch.token_ids[:, 1] == 4).all()  # '?' id
    np.testing.assert_array_equal(batch.feats, batch.base_feats)


def test_zero_visual_ablation_preserves_count():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds)
    base = tiny_batch(ds, cfg)
    batch = ablate_zero_visual(base)
    assert (batch.feats == 0).all() and (batch.spatial == 0).all()
    np.testing.assert_array_equal(batch.counts, base.counts)
    np.testing.assert_array_equal(batch.token_ids, base.token_ids)


def test_ablation_idempotence():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds)
    base = tiny_batch(ds, cfg)
    once = ablate_text_to_placeholder(base)
    twice = ablate_text_to_placeholder(once)
    np.testing.assert_array_equal(once.token_ids, twice.token_ids)
    np.testing.assert_array_equal(once.feats, twice.feats)
    z1 = ablate_zero_visual(base)
    z2 = ablate_zero_visual(z1)
    np.testing.assert_array_equal(z1.feats, z2.feats)
    np.testing.assert_array_equal(z1.token_ids, z2.token_ids)


def test_forward_shapes_and_eval_determinism():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds, head_dropout=0.5)
    ps = build_model(cfg, HeadKind.DEEP, seed=0)
    batch = tiny_batch(ds, cfg)
    with nn.no_grad():
        a = forward(ps, batch, cfg, HeadKind.DEEP, train=False)
        b = forward(ps, batch, cfg, HeadKind.DEEP, train=False)
    assert a.data.shape == (len(batch), cfg.n_classes)
    np.testing.assert_array_equal(a.data, b.data)


def test_forward_object_permutation_invariance():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds)
    ps = build_model(cfg, HeadKind.DEEP, seed=0)
    batch = tiny_batch(ds, cfg)
    with nn.no_grad():
        ref = forward(ps, batch, cfg, HeadKind.DEEP).data
    rng = np.random.default_rng(0)
    perm = rng.permutation(batch.feats.shape[1])
    shuffled = Batch(
        batch.token_ids, batch.text_mask, batch.pos_ids,
        batch.feats[:, perm], batch.spatial[:, perm], batch.obj_mask[:, perm],
        batch.counts, batch.labels,
    )
    with nn.no_grad():
        out = forward(ps, shuffled, cfg, HeadKind.DEEP).data
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_forward_padding_invariance():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds)
    ps = build_model(cfg, HeadKind.DEEP, seed=2)
    batch = tiny_batch(ds, cfg, n=6)
    assert (batch.text_mask == 0).any(), "want padded text positions"
    with nn.no_grad():
        ref = forward(ps, batch, cfg, HeadKind.DEEP).data
    tokens = batch.token_ids.copy()
    tokens[batch.text_mask == 0] = 7  # arbitrary real token id in padded slots
    feats = batch.feats.copy()
    if (batch.obj_mask == 0).any():
        feats[batch.obj_mask == 0] = 123.0
    poked = Batch(
        tokens, batch.text_mask, batch.pos_ids, feats, batch.spatial,
        batch.obj_mask, batch.counts, batch.labels,
    )
    with nn.no_grad():
        out = forward(ps, poked, cfg, HeadKind.DEEP).data
    np.testing.assert_allclose(out, ref, atol=1e-7)


def test_full_model_gradient_check():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds, d_model=8, heads=2, d_h=8, head_dropout=0.0)
    ps = build_model(cfg, HeadKind.DEEP, seed=4)
    batch = tiny_batch(ds, cfg, n=3)

    def loss():
        logits = forward(ps, batch, cfg, HeadKind.DEEP, train=True)
        return nn.cross_entropy(logits, batch.labels)

    err = nn.grad_check(loss, ps.named(), h=1e-5, max_coords_per_tensor=4, seed=0)
    assert err < 1e-3, err


def test_predict_tie_break_and_scale_invariance():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds)
    ps = build_model(cfg, HeadKind.LINEAR, seed=0)
    batch = tiny_batch(ds, cfg)
    logits = forward(ps, batch, cfg, HeadKind.LINEAR).data
    pred = predict(ps, batch, cfg, HeadKind.LINEAR)
    np.testing.assert_array_equal(pred, logits.argmax(axis=1))
    # explicit tie: classes 3 and 7 equal maxima -> 3
    tie = np.zeros((1, 10))
    tie[0, 3] = tie[0, 7] = 5.0
    assert int(tie.argmax(axis=1)[0]) == 3
    # positive rescaling of logits never changes the argmax
    scaled = logits * 3.7
    np.testing.assert_array_equal(scaled.argmax(axis=1), logits.argmax(axis=1))


def test_dropout_active_only_in_training():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds, head_dropout=0.5)
    ps = build_model(cfg, HeadKind.DEEP, seed=1)
    batch = tiny_batch(ds, cfg)
    a = forward(ps, batch, cfg, HeadKind.DEEP, train=True, rng=nn.derive_rng(0, "a")).data
    b = forward(ps, batch, cfg, HeadKind.DEEP, train=True, rng=nn.derive_rng(0, "b")).data
    assert not np.array_equal(a, b)
    with pytest.raises(ValueError):
        forward(ps, batch, cfg, HeadKind.DEEP, train=True)


def test_parameterset_save_load_round_trip(tmp_path):
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds)
    ps = build_model(cfg, HeadKind.DEEP, seed=9)
    path = tmp_path / "model.xtc"
    ps.save(path, meta={"head": "deep"})
    loaded, meta = ParameterSet.load(path)
    assert meta == {"head": "deep"}
    for key, t in ps.named().items():
        np.testing.assert_array_equal(loaded[key].data, t.data)
        assert loaded[key].data.tobytes() == t.data.tobytes()


def test_fresh_head_trans_changes_only_that_group():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(ds)
    ps = build_model(cfg, HeadKind.DEEP, seed=0)
    before = ps.arrays()
    fresh_head_trans(ps, cfg, HeadKind.DEEP, seed=123)
    after = ps.arrays()
    assert not np.array_equal(after["head_trans/w1"], before["head_trans/w1"])
    for key in before:
        if not key.startswith("head_trans/"):
            np.testing.assert_array_equal(after[key], before[key])
    # deterministic in the reinit seed
    ps2 = build_model(cfg, HeadKind.DEEP, seed=0)
    fresh_head_trans(ps2, cfg, HeadKind.DEEP, seed=123)
    np.testing.assert_array_equal(ps2["head_trans/w1"].data, ps["head_trans/w1"].data)
