"""Dataset assembly: scenes, questions, splits, few-shot pools, pretraining captions.

Split structure mirrors a zero-shot transfer benchmark: the train and dev
splits carry source-language questions only, every test question exists in
every configured language, and few-shot pools are keyed by scene so "k shots"
means all questions of k scenes in one target language. Scene id ranges make
the splits disjoint by construction; validation re-checks it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..config import ConfigError, config_hash, dataclass_from_dict, dataclass_to_dict
from ..nn.rng import derive_rng, seed_from
from ..nn.serialize import load_tensors, save_tensors
from .bias import BiasSpec, assign_cue
from .languages import render, render_concepts
from .questions import InadmissibleSceneError, Question, generate_question
from .scenes import FeatureSpace, Scene, SceneConfig, VisualFeatures, generate_scene
from .vocab import QTYPES, LanguageSpec, Vocabulary, build_vocabulary

GQA_TESTDEV_QTYPE_COUNTS = {
    "verify": 2251,
    "logical": 1803,
    "compare": 589,
    "query": 6804,
    "choose": 1129,
}

CAPTION_TEMPLATE = ("there", "is", "a")  # + size, color, material, shape


@dataclass(frozen=True)
class LanguageConfig:
    name: str
    rho: float
    order: str = "identity"


DEFAULT_TARGET_LANGUAGES = (
    LanguageConfig("l1", 0.25, "identity"),
    LanguageConfig("l2", 0.25, "rotate:2"),
    LanguageConfig("l3", 0.10, "identity"),
    LanguageConfig("l4", 0.10, "reverse"),
    LanguageConfig("l5", 0.0, "identity"),
    LanguageConfig("l6", 0.0, "rotate:3"),
    LanguageConfig("l7", 0.0, "reverse"),
)


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    n_train_scenes: int = 300
    n_dev_scenes: int = 40
    n_test_scenes: int = 80
    n_fewshot_scenes: int = 60
    n_pretrain_scenes: int = 240
    questions_per_scene: int = 6
    captions_per_scene: int = 2
    min_objects: int = 3
    max_objects: int = 8
    d_v: int = 32
    feature_noise: float = 0.1
    source_language: str = "en"
    languages: tuple[LanguageConfig, ...] = DEFAULT_TARGET_LANGUAGES
    qtype_weights: dict = field(default_factory=lambda: dict(GQA_TESTDEV_QTYPE_COUNTS))
    query_attrs: tuple[str, ...] = ("color", "size", "material")
    bias_beta: float = 0.0
    bias_qtypes: tuple[str, ...] = ()


@dataclass
class QuestionRecord:
    qid: str
    scene_id: str
    qtype: str
    language: str
    token_ids: tuple[int, ...]
    answer: int
    cue: bool = False


@dataclass
class Split:
    name: str
    records: list[QuestionRecord]
    features: dict[str, VisualFeatures]


@dataclass
class FewshotPool:
    language: str
    scene_order: tuple[str, ...]
    records_by_scene: dict[str, list[QuestionRecord]]


@dataclass
class DatasetSplits:
    train: Split
    dev: Split
    test: Split
    fewshot: dict[str, FewshotPool]
    fewshot_features: dict[str, VisualFeatures]


@dataclass
class CaptionRecord:
    cid: str
    scene_id: str
    attrs: tuple[str, str, str, str]  # (size, color, material, shape)
    matched: bool
    renderings: dict[str, tuple[int, ...]]


@dataclass
class PretrainCorpus:
    records: list[CaptionRecord]
    features: dict[str, VisualFeatures]


@dataclass
class Dataset:
    config: DataConfig
    vocab: Vocabulary
    languages: dict[str, LanguageSpec]
    splits: DatasetSplits
    pretrain: PretrainCorpus
    questions: dict[str, Question] | None = None
    scenes: dict[str, Scene] | None = None
    feature_space: FeatureSpace | None = None

    @property
    def target_languages(self) -> list[str]:
        src = self.config.source_language
        return [name for name in self.languages if name != src]

    @property
    def fingerprint(self) -> str:
        return config_hash(self.config)


def _make_scenes(cfg: DataConfig, prefix: str, count: int) -> dict[str, Scene]:
    scene_cfg = SceneConfig(cfg.min_objects, cfg.max_objects)
    scenes = {}
    for i in range(count):
        sid = f"{prefix}{i:05d}"
        scenes[sid] = generate_scene(seed_from(cfg.seed, "scene", sid), scene_cfg, scene_id=sid)
    return scenes


def _sample_questions(cfg: DataConfig, scenes: dict[str, Scene]) -> dict[str, list[Question]]:
    names = list(cfg.qtype_weights)
    for name in names:
        if name not in QTYPES:
            raise ConfigError(f"unknown question type in qtype_weights: {name!r}")
    weights = np.array([float(cfg.qtype_weights[n]) for n in names])
    probs = weights / weights.sum()
    out: dict[str, list[Question]] = {}
    binary_toggle = 0  # alternates gold yes/no across the split, exact balance
    for sid in sorted(scenes):
        scene = scenes[sid]
        rng = derive_rng(cfg.seed, "qtype-mix", sid)
        questions = []
        for j in range(cfg.questions_per_scene):
            qid = f"{sid}.q{j}"
            question = None
            for attempt in range(20):
                qtype = names[rng.choice(len(names), p=probs)]
                want_yes = None
                if qtype in ("verify", "logical"):
                    want_yes = binary_toggle % 2 == 0
                try:
                    question = generate_question(
                        scene,
                        qtype,
                        seed_from(cfg.seed, "question", qid, attempt),
                        query_attrs=cfg.query_attrs,
                        qid=qid,
                        want_yes=want_yes,
                    )
                    break
                except InadmissibleSceneError:
                    continue
            if question is not None:
                if question.qtype in ("verify", "logical"):
                    binary_toggle += 1
                questions.append(question)
        out[sid] = questions
    return out


def _featurize_all(space: FeatureSpace, scenes: dict[str, Scene], seed: int) -> dict[str, VisualFeatures]:
    return {sid: space.featurize(scene, seed) for sid, scene in scenes.items()}


def _records_for(
    questions: dict[str, list[Question]],
    languages: list[LanguageSpec],
    vocab: Vocabulary,
) -> list[QuestionRecord]:
    records = []
    for sid in sorted(questions):
        for q in questions[sid]:
            for lang in languages:
                ids = tuple(render(q, lang, with_qtype=False, vocab=vocab))
                records.append(QuestionRecord(q.qid, sid, q.qtype, lang.name, ids, q.answer))
    return records


def _mismatch_attrs(scene: Scene, rng) -> tuple[str, str, str, str] | None:
    """A caption tuple false for the scene: one attribute of a real object is
    swapped to a value no object in the scene carries."""
    from .vocab import ATTRIBUTES

    obj = scene.objects[rng.integers(len(scene.objects))]
    attrs = {"size": obj.size, "color": obj.color, "material": obj.material, "shape": obj.shape}
    order = list(rng.permutation(len(attrs)))
    names = list(attrs)
    for i in order:
        attr = names[i]
        present = {o.attr(attr) for o in scene.objects}
        absent = [v for v in ATTRIBUTES[attr] if v not in present]
        if absent:
            attrs[attr] = absent[rng.integers(len(absent))]
            return (attrs["size"], attrs["color"], attrs["material"], attrs["shape"])
    return None


def _pretrain_corpus(
    cfg: DataConfig,
    scenes: dict[str, Scene],
    features: dict[str, VisualFeatures],
    languages: dict[str, LanguageSpec],
    vocab: Vocabulary,
) -> PretrainCorpus:
    records = []
    for sid in sorted(scenes):
        scene = scenes[sid]
        rng = derive_rng(cfg.seed, "captions", sid)
        for j in range(cfg.captions_per_scene):
            obj = scene.objects[rng.integers(len(scene.objects))]
            attrs = (obj.size, obj.color, obj.material, obj.shape)
            records.append(_caption_record(f"{sid}.c{j}", sid, attrs, True, languages, vocab))
            neg = _mismatch_attrs(scene, rng)
            if neg is not None:
                records.append(_caption_record(f"{sid}.m{j}", sid, neg, False, languages, vocab))
    return PretrainCorpus(records, features)


def _caption_record(cid, sid, attrs, matched, languages, vocab) -> CaptionRecord:
    concepts = CAPTION_TEMPLATE + attrs
    renderings = {
        name: tuple(render_concepts(concepts, spec)) for name, spec in languages.items()
    }
    return CaptionRecord(cid, sid, attrs, matched, renderings)


def build_corpus_and_splits(cfg: DataConfig) -> Dataset:
    """Build the full dataset (pretraining corpus plus splits) from one config."""
    lang_configs = [(lc.name, lc.rho, lc.order) for lc in cfg.languages]
    vocab, languages = build_vocabulary(cfg.source_language, lang_configs, cfg.seed)
    source = languages[cfg.source_language]
    all_langs = list(languages.values())
    target_langs = [l for l in all_langs if l.name != cfg.source_language]

    space = FeatureSpace(cfg.seed, cfg.d_v, cfg.feature_noise)
    pools = {
        "train": _make_scenes(cfg, "tr", cfg.n_train_scenes),
        "dev": _make_scenes(cfg, "dv", cfg.n_dev_scenes),
        "test": _make_scenes(cfg, "te", cfg.n_test_scenes),
        "fewshot": _make_scenes(cfg, "fs", cfg.n_fewshot_scenes),
        "pretrain": _make_scenes(cfg, "pt", cfg.n_pretrain_scenes),
    }
    overlap = set(pools["train"]) & set(pools["test"])
    if overlap:
        raise ConfigError(f"train/test scene overlap: {sorted(overlap)[:3]}")

    questions: dict[str, Question] = {}
    per_split_questions = {}
    for split_name in ("train", "dev", "test", "fewshot"):
        qs = _sample_questions(cfg, pools[split_name])
        per_split_questions[split_name] = qs
        for qlist in qs.values():
            for q in qlist:
                questions[q.qid] = q

    feats = {name: _featurize_all(space, scenes, cfg.seed) for name, scenes in pools.items()}

    train = Split("train", _records_for(per_split_questions["train"], [source], vocab), feats["train"])
    dev = Split("dev", _records_for(per_split_questions["dev"], [source], vocab), feats["dev"])
    test = Split("test", _records_for(per_split_questions["test"], all_langs, vocab), feats["test"])

    fewshot = {}
    for lang in target_langs:
        recs = _records_for(per_split_questions["fewshot"], [lang], vocab)
        by_scene: dict[str, list[QuestionRecord]] = {}
        for r in recs:
            by_scene.setdefault(r.scene_id, []).append(r)
        fewshot[lang.name] = FewshotPool(lang.name, tuple(sorted(by_scene)), by_scene)

    pretrain = _pretrain_corpus(cfg, pools["pretrain"], feats["pretrain"], languages, vocab)

    dataset = Dataset(
        config=cfg,
        vocab=vocab,
        languages=languages,
        splits=DatasetSplits(train, dev, test, fewshot, feats["fewshot"]),
        pretrain=pretrain,
        questions=questions,
        scenes={sid: s for pool in pools.values() for sid, s in pool.items()},
        feature_space=space,
    )
    if cfg.bias_qtypes:
        dataset = inject_text_bias(dataset, BiasSpec(cfg.bias_beta, cfg.bias_qtypes), cfg.seed)
    return dataset


def inject_text_bias(dataset: Dataset, bias: BiasSpec, seed) -> Dataset:
    """Append one cue token to every rendering of each targeted question.

    The cue class is decided once per question id, so all languages carry the
    same (shared-vocabulary) cue token.
    """
    if dataset.questions is None:
        raise ValueError("bias injection needs the in-memory question table")
    cues: dict[str, int] = {}
    for qid, q in dataset.questions.items():
        cue_class = assign_cue(q, bias, seed)
        if cue_class is not None:
            cues[qid] = dataset.vocab.cue_token(cue_class)

    def patch(records: list[QuestionRecord]) -> list[QuestionRecord]:
        out = []
        for r in records:
            cue_id = cues.get(r.qid)
            if cue_id is None:
                out.append(r)
            else:
                out.append(replace(r, token_ids=r.token_ids + (cue_id,), cue=True))
        return out

    splits = dataset.splits
    new_fewshot = {}
    for lang, pool in splits.fewshot.items():
        new_fewshot[lang] = FewshotPool(
            pool.language,
            pool.scene_order,
            {sid: patch(rs) for sid, rs in pool.records_by_scene.items()},
        )
    new_splits = DatasetSplits(
        Split(splits.train.name, patch(splits.train.records), splits.train.features),
        Split(splits.dev.name, patch(splits.dev.records), splits.dev.features),
        Split(splits.test.name, patch(splits.test.records), splits.test.features),
        new_fewshot,
        splits.fewshot_features,
    )
    return replace(dataset, splits=new_splits)


# -- persistence ----------------------------------------------------------------


def _features_to_arrays(features: dict[str, VisualFeatures]) -> dict[str, np.ndarray]:
    arrays = {}
    for sid in sorted(features):
        vf = features[sid]
        arrays[f"{sid}/features"] = vf.features
        arrays[f"{sid}/spatial"] = vf.spatial
        arrays[f"{sid}/count"] = np.array([vf.object_count], dtype=np.int64)
    return arrays


def _features_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, VisualFeatures]:
    out: dict[str, VisualFeatures] = {}
    sids = {name.split("/")[0] for name in arrays}
    for sid in sorted(sids):
        out[sid] = VisualFeatures(
            arrays[f"{sid}/features"],
            arrays[f"{sid}/spatial"],
            int(arrays[f"{sid}/count"][0]),
        )
    return out


def _record_line(r: QuestionRecord, split: str) -> str:
    return json.dumps(
        {
            "qid": r.qid,
            "scene_id": r.scene_id,
            "qtype": r.qtype,
            "language": r.language,
            "token_ids": list(r.token_ids),
            "answer": r.answer,
            "cue": r.cue,
            "split": split,
        },
        sort_keys=True,
        separators=(",", ":"),
    )


def save_dataset(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(dataclass_to_dict(dataset.config), sort_keys=True, indent=1) + "\n"
    )
    vocab_doc = dataset.vocab.to_dict()
    vocab_doc["languages"] = {
        name: {
            "rho": spec.rho,
            "order": spec.order,
            "lexicon": spec.lexicon,
            "shared": sorted(spec.shared),
        }
        for name, spec in dataset.languages.items()
    }
    (out / "vocab.json").write_text(json.dumps(vocab_doc, sort_keys=True) + "\n")

    lines = []
    for split in (dataset.splits.train, dataset.splits.dev, dataset.splits.test):
        lines.extend(_record_line(r, split.name) for r in split.records)
    for lang in sorted(dataset.splits.fewshot):
        pool = dataset.splits.fewshot[lang]
        for sid in pool.scene_order:
            lines.extend(_record_line(r, f"fewshot:{lang}") for r in pool.records_by_scene[sid])
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")

    meta = {"fingerprint": dataset.fingerprint}
    save_tensors(out / "features_train.xtc", _features_to_arrays(dataset.splits.train.features), meta)
    save_tensors(out / "features_dev.xtc", _features_to_arrays(dataset.splits.dev.features), meta)
    save_tensors(out / "features_test.xtc", _features_to_arrays(dataset.splits.test.features), meta)
    save_tensors(out / "features_fewshot.xtc", _features_to_arrays(dataset.splits.fewshot_features), meta)
    save_tensors(out / "features_pretrain.xtc", _features_to_arrays(dataset.pretrain.features), meta)

    cap_lines = [
        json.dumps(
            {
                "cid": c.cid,
                "scene_id": c.scene_id,
                "attrs": list(c.attrs),
                "matched": c.matched,
                "renderings": {k: list(v) for k, v in sorted(c.renderings.items())},
            },
            sort_keys=True,
            separators=(",", ":"),
        )
        for c in dataset.pretrain.records
    ]
    (out / "pretrain.jsonl").write_text("\n".join(cap_lines) + "\n")


def load_dataset(path) -> Dataset:
    root = Path(path)
    cfg = dataclass_from_dict(DataConfig, json.loads((root / "config.json").read_text()))
    vocab_doc = json.loads((root / "vocab.json").read_text())
    vocab = Vocabulary.from_dict(vocab_doc)
    languages = {
        name: LanguageSpec(
            name, d["rho"], d["order"], dict(d["lexicon"]), frozenset(d["shared"])
        )
        for name, d in vocab_doc["languages"].items()
    }

    feats = {
        name: _features_from_arrays(load_tensors(root / f"features_{name}.xtc")[0])
        for name in ("train", "dev", "test", "fewshot", "pretrain")
    }

    split_records: dict[str, list[QuestionRecord]] = {"train": [], "dev": [], "test": []}
    fewshot_records: dict[str, list[QuestionRecord]] = {}
    with open(root / "manifest.jsonl") as fh:
        for line in fh:
            d = json.loads(line)
            rec = QuestionRecord(
                d["qid"], d["scene_id"], d["qtype"], d["language"],
                tuple(d["token_ids"]), d["answer"], d["cue"],
            )
            split = d["split"]
            if split.startswith("fewshot:"):
                fewshot_records.setdefault(split.split(":", 1)[1], []).append(rec)
            else:
                split_records[split].append(rec)

    fewshot = {}
    for lang, recs in fewshot_records.items():
        by_scene: dict[str, list[QuestionRecord]] = {}
        for r in recs:
            by_scene.setdefault(r.scene_id, []).append(r)
        fewshot[lang] = FewshotPool(lang, tuple(sorted(by_scene)), by_scene)

    cap_records = []
    with open(root / "pretrain.jsonl") as fh:
        for line in fh:
            d = json.loads(line)
            cap_records.append(
                CaptionRecord(
                    d["cid"], d["scene_id"], tuple(d["attrs"]), d["matched"],
                    {k: tuple(v) for k, v in d["renderings"].items()},
                )
            )

    return Dataset(
        config=cfg,
        vocab=vocab,
        languages=languages,
        splits=DatasetSplits(
            Split("train", split_records["train"], feats["train"]),
            Split("dev", split_records["dev"], feats["dev"]),
            Split("test", split_records["test"], feats["test"]),
            fewshot,
            feats["fewshot"],
        ),
        pretrain=PretrainCorpus(cap_records, feats["pretrain"]),
    )
