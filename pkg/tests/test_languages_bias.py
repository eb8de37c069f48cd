"""Rendering across languages, overlap/order semantics, cue-token bias calibration."""

import math
from collections import Counter

import numpy as np
import pytest

from xlvqa.data import (
    ANSWER_CLASSES,
    BiasSpec,
    COLON,
    DataConfig,
    LanguageConfig,
    SceneConfig,
    apply_order,
    assign_cue,
    build_corpus_and_splits,
    build_vocabulary,
    generate_question,
    generate_scene,
    inject_text_bias,
    render,
)

CFG = SceneConfig()


def _vocab_and_langs(targets):
    return build_vocabulary("en", targets, seed=0)


def test_render_qtype_prefix():
    vocab, langs = _vocab_and_langs([("t", 0.5, "identity")])
    scene = generate_scene(0, CFG, scene_id="r")
    q = generate_question(scene, "verify", 0)
    ids = render(q, langs["en"], with_qtype=True, vocab=vocab)
    assert ids[0] == vocab.qtype_token("verify")
    assert ids[1] == COLON
    assert tuple(ids[2:]) == tuple(render(q, langs["en"], with_qtype=False, vocab=vocab))


def test_full_overlap_identity_language_renders_identically():
    vocab, langs = _vocab_and_langs([("t", 1.0, "identity")])
    scene = generate_scene(1, CFG, scene_id="r1")
    q = generate_question(scene, "logical", 1)
    assert render(q, langs["t"], False, vocab) == render(q, langs["en"], False, vocab)


def test_zero_overlap_language_bodies_disjoint():
    vocab, langs = _vocab_and_langs([("t", 0.0, "identity")])
    scene = generate_scene(2, CFG, scene_id="r2")
    for qtype in ("verify", "logical", "query"):
        q = generate_question(scene, qtype, 2)
        src = set(render(q, langs["en"], False, vocab))
        tgt = set(render(q, langs["t"], False, vocab))
        assert src.isdisjoint(tgt)


def test_partial_overlap_fraction():
    from xlvqa.data.vocab import CONCEPTS

    _, langs = _vocab_and_langs([("t", 0.25, "identity")])
    assert len(langs["t"].shared) == round(0.25 * len(CONCEPTS))


def test_order_transforms():
    base = [10, 11, 12, 13, 14]
    assert apply_order(base, "identity") == base
    assert apply_order(base, "reverse") == base[::-1]
    assert apply_order(base, "rotate:2") == [13, 14, 10, 11, 12]
    shuffled = apply_order(base, "shuffle:7")
    assert sorted(shuffled) == sorted(base)
    assert apply_order(base, "shuffle:7") == shuffled  # deterministic
    with pytest.raises(ValueError):
        apply_order(base, "bogus")


def test_order_transform_is_permutation_of_body_only():
    vocab, langs = _vocab_and_langs([("t", 1.0, "reverse")])
    scene = generate_scene(3, CFG, scene_id="r3")
    q = generate_question(scene, "query", 3)
    body_src = render(q, langs["en"], False, vocab)
    body_tgt = render(q, langs["t"], False, vocab)
    assert body_tgt == body_src[::-1]
    with_q = render(q, langs["t"], True, vocab)
    assert with_q[:2] == [vocab.qtype_token("query"), COLON]
    assert with_q[2:] == body_tgt


def _biased_dataset(beta, qtypes, seed=5, scenes=150):
    cfg = DataConfig(
        seed=seed,
        n_train_scenes=scenes,
        n_dev_scenes=5,
        n_test_scenes=40,
        n_fewshot_scenes=2,
        n_pretrain_scenes=2,
        languages=(LanguageConfig("t", 0.0, "identity"),),
        bias_beta=beta,
        bias_qtypes=qtypes,
    )
    return build_corpus_and_splits(cfg)


def _cue_rule_accuracy(train_records, test_records, vocab):
    """Best answer-from-cue-only rule: fit argmax table on train, score on test."""
    cue_ids = set(vocab.cue_ids.values())
    table = {}
    for r in train_records:
        cues = [t for t in r.token_ids if t in cue_ids]
        if cues:
            table.setdefault(cues[-1], Counter())[r.answer] += 1
    rule = {cue: counts.most_common(1)[0][0] for cue, counts in table.items()}
    hits = total = 0
    for r in test_records:
        cues = [t for t in r.token_ids if t in cue_ids]
        if not cues:
            continue
        total += 1
        hits += rule.get(cues[-1], -1) == r.answer
    return hits / max(total, 1), total


def test_beta_one_cue_rule_is_perfect():
    ds = _biased_dataset(1.0, ("verify",))
    train = [r for r in ds.splits.train.records if r.qtype == "verify"]
    test = [r for r in ds.splits.test.records if r.qtype == "verify" and r.language == "en"]
    acc, n = _cue_rule_accuracy(train, test, ds.vocab)
    assert n > 20
    assert acc == 1.0


def test_beta_zero_mutual_information_near_zero():
    ds = _biased_dataset(0.0, ("verify",), scenes=400)
    joint = Counter()
    for r in ds.splits.train.records:
        if r.qtype != "verify":
            continue
        cue = r.token_ids[-1]
        joint[(cue, r.answer)] += 1
    n = sum(joint.values())
    assert n > 300
    pc = Counter()
    pa = Counter()
    for (c, a), k in joint.items():
        pc[c] += k
        pa[a] += k
    mi = 0.0
    for (c, a), k in joint.items():
        p = k / n
        mi += p * math.log2(p / ((pc[c] / n) * (pa[a] / n)))
    assert mi < 0.02, mi


def test_beta_half_cue_rule_calibration():
    ds = _biased_dataset(0.5, ("verify",), scenes=400)
    train = [r for r in ds.splits.train.records if r.qtype == "verify"]
    test = [r for r in ds.splits.test.records if r.qtype == "verify" and r.language == "en"]
    acc, n = _cue_rule_accuracy(train + test, train + test, ds.vocab)
    labels = [r.answer for r in train + test]
    chance = Counter(labels).most_common(1)[0][1] / len(labels)
    expected = 0.5 + 0.5 * chance
    assert abs(acc - expected) < 0.02, (acc, expected, n)


def test_cue_shared_across_languages_and_flagged():
    ds = _biased_dataset(1.0, ("verify", "logical"))
    by_qid = {}
    for r in ds.splits.test.records:
        if r.cue:
            by_qid.setdefault(r.qid, set()).add(r.token_ids[-1])
    assert by_qid, "expected biased records"
    for qid, cues in by_qid.items():
        assert len(cues) == 1  # same shared cue token in every language


def test_unbiased_qtypes_untouched():
    ds = _biased_dataset(1.0, ("verify",))
    for r in ds.splits.train.records:
        if r.qtype != "verify":
            assert not r.cue
            assert all(t not in set(ds.vocab.cue_ids.values()) for t in r.token_ids)


def test_inject_bias_is_pure():
    ds = _biased_dataset(0.0, ())
    before = [r.token_ids for r in ds.splits.train.records[:20]]
    ds2 = inject_text_bias(ds, BiasSpec(1.0, ("verify",)), seed=1)
    after = [r.token_ids for r in ds.splits.train.records[:20]]
    assert before == after  # original untouched
    assert any(r.cue for r in ds2.splits.train.records)
