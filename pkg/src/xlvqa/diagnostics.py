"""Unimodal diagnostic protocols and the evaluation engine.

Protocols pair a training-input mode with an evaluation-input mode:

  MM     multimodal train, multimodal eval
  MM-V   multimodal train, text replaced by '?' at eval
  MM-T   multimodal train, visual features zeroed at eval (count kept)
  V-V    text replaced by '?' at train and eval
  T-T    visual zeroed at train and eval
  TG-TG  object features resampled per image from a Gaussian matching that
         image's per-dimension feature moments; spatial and count kept

Accuracies are exact-match, reported per (language, question type) with raw
counts, alongside the answer-class prior of the split as a chance baseline.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import nn
from .data.corpus import Dataset, Split
from .data.scenes import VisualFeatures
from .model import (
    Batch,
    HeadKind,
    Model,
    ModelConfig,
    ablate_text_to_placeholder,
    ablate_zero_visual,
    encode_batch,
)
from .training import PretrainedSnapshot, StageSchedule, Strategy, finetune


class Protocol(str, Enum):
    MM = "MM"
    MM_V = "MM-V"
    MM_T = "MM-T"
    V_V = "V-V"
    T_T = "T-T"
    TG_TG = "TG-TG"


UNIMODAL_TRAINED = (Protocol.V_V, Protocol.T_T, Protocol.TG_TG)

ABLATION_MODES = ("none", "text-only-?", "zero-visual", "gaussian")


def gaussian_features(features: VisualFeatures, seed) -> VisualFeatures:
    """Resample object features from a per-dimension Gaussian fit to this image.

    Mean and standard deviation are computed over the image's own objects
    (population std); a single-object image has zero variance, so the sampler
    returns the mean, i.e. the original features. Spatial vectors and the
    object count are untouched.
    """
    rng = nn.derive_rng(seed, "gaussian-features")
    mu = features.features.mean(axis=0, keepdims=True)
    sd = features.features.std(axis=0, keepdims=True)
    sampled = mu + sd * rng.standard_normal(features.features.shape)
    return VisualFeatures(sampled, features.spatial.copy(), features.object_count)


def _gaussian_batch(batch: Batch, seed) -> Batch:
    rng = nn.derive_rng(seed, "gaussian-batch")
    feats = np.zeros_like(batch.base_feats)
    for i in range(batch.base_feats.shape[0]):
        real = batch.obj_mask[i] > 0
        objs = batch.base_feats[i, real]
        mu = objs.mean(axis=0, keepdims=True)
        sd = objs.std(axis=0, keepdims=True)
        feats[i, real] = mu + sd * rng.standard_normal(objs.shape)
    from dataclasses import replace

    return replace(
        batch,
        token_ids=batch.base_token_ids,
        text_mask=batch.base_text_mask,
        pos_ids=batch.base_pos_ids,
        feats=feats,
        spatial=batch.base_spatial,
        ablation="gaussian",
    )


def apply_ablation(batch: Batch, mode: str, seed=0) -> Batch:
    """Rewrite an encoded batch for one diagnostic mode (idempotent per seed)."""
    if mode == "none":
        return batch
    if mode == "text-only-?":
        return ablate_text_to_placeholder(batch)
    if mode == "zero-visual":
        return ablate_zero_visual(batch)
    if mode == "gaussian":
        return _gaussian_batch(batch, seed)
    raise ValueError(f"unknown ablation mode {mode!r}")


PROTOCOL_MODES: dict[Protocol, tuple[str, str]] = {
    Protocol.MM: ("none", "none"),
    Protocol.MM_V: ("none", "text-only-?"),
    Protocol.MM_T: ("none", "zero-visual"),
    Protocol.V_V: ("text-only-?", "text-only-?"),
    Protocol.T_T: ("zero-visual", "zero-visual"),
    Protocol.TG_TG: ("gaussian", "gaussian"),
}


# -- report ----------------------------------------------------------------------


@dataclass(frozen=True)
class CellKey:
    protocol: str
    strategy: str
    language: str
    qtype: str
    seed: int


@dataclass
class Cell:
    correct: int = 0
    total: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else float("nan")


class EvalReport:
    """Accuracy cells indexed by (protocol, strategy, language, qtype, seed)."""

    def __init__(self, source_language: str):
        self.source_language = source_language
        self.cells: dict[CellKey, Cell] = {}
        self.chance: dict[str, float] = {}

    def add_counts(self, key: CellKey, correct: int, total: int) -> None:
        if correct > total:
            raise ValueError("correct cannot exceed total")
        cell = self.cells.setdefault(key, Cell())
        cell.correct += correct
        cell.total += total

    def merge(self, other: "EvalReport") -> "EvalReport":
        if other.source_language != self.source_language:
            raise ValueError("cannot merge reports with different source languages")
        for key, cell in other.cells.items():
            self.add_counts(key, cell.correct, cell.total)
        self.chance.update(other.chance)
        return self

    # -- views --------------------------------------------------------------

    def seeds(self, protocol: str, strategy: str) -> list[int]:
        return sorted({k.seed for k in self.cells if k.protocol == protocol and k.strategy == strategy})

    def languages(self, protocol: str, strategy: str) -> list[str]:
        return sorted({k.language for k in self.cells if k.protocol == protocol and k.strategy == strategy})

    def language_accuracy(self, protocol: str, strategy: str, language: str, seed: int) -> float:
        correct = total = 0
        for key, cell in self.cells.items():
            if (key.protocol, key.strategy, key.language, key.seed) == (protocol, strategy, language, seed):
                correct += cell.correct
                total += cell.total
        return correct / total if total else float("nan")

    def qtype_accuracy(
        self, protocol: str, strategy: str, qtype: str, seed: int, languages: list[str]
    ) -> float:
        per_lang = []
        for lang in languages:
            for key, cell in self.cells.items():
                if key == CellKey(protocol, strategy, lang, qtype, seed):
                    per_lang.append(cell.accuracy)
        return float(np.mean(per_lang)) if per_lang else float("nan")

    def target_languages(self, protocol: str, strategy: str) -> list[str]:
        return [l for l in self.languages(protocol, strategy) if l != self.source_language]

    def target_mean(self, protocol: str, strategy: str, seed: int) -> float:
        """Mean of per-language accuracies over target languages (source excluded)."""
        targets = self.target_languages(protocol, strategy)
        if not targets:
            raise ValueError("report has no target languages")
        return float(np.mean([self.language_accuracy(protocol, strategy, l, seed) for l in targets]))

    def transfer_gap(self, protocol: str, strategy: str, seed: int) -> float:
        src = self.language_accuracy(protocol, strategy, self.source_language, seed)
        return src - self.target_mean(protocol, strategy, seed)

    def transfer_gap_table(self) -> dict[tuple[str, str], dict]:
        """Per (protocol, strategy): per-seed transfer gaps and their mean."""
        out = {}
        pairs = sorted({(k.protocol, k.strategy) for k in self.cells})
        for protocol, strategy in pairs:
            gaps = {s: self.transfer_gap(protocol, strategy, s) for s in self.seeds(protocol, strategy)}
            out[(protocol, strategy)] = {"per_seed": gaps, "mean": float(np.mean(list(gaps.values())))}
        return out

    # -- serialization --------------------------------------------------------

    def to_nested(self) -> dict:
        nested: dict = {}
        for key in sorted(self.cells, key=lambda k: (k.protocol, k.strategy, k.language, k.qtype, k.seed)):
            cell = self.cells[key]
            nested.setdefault(key.protocol, {}).setdefault(key.strategy, {}).setdefault(
                key.language, {}
            ).setdefault(key.qtype, {})[str(key.seed)] = {"correct": cell.correct, "total": cell.total}
        return {"source_language": self.source_language, "chance": self.chance, "accuracy": nested}

    @classmethod
    def from_nested(cls, doc: dict) -> "EvalReport":
        report = cls(doc["source_language"])
        report.chance = dict(doc.get("chance", {}))
        for protocol, strategies in doc["accuracy"].items():
            for strategy, languages in strategies.items():
                for language, qtypes in languages.items():
                    for qtype, seeds in qtypes.items():
                        for seed, counts in seeds.items():
                            report.add_counts(
                                CellKey(protocol, strategy, language, qtype, int(seed)),
                                counts["correct"],
                                counts["total"],
                            )
        return report

    def to_flat_rows(self) -> list[str]:
        rows = ["protocol\tstrategy\tlanguage\tqtype\tseed\tcorrect\ttotal\taccuracy"]
        for key in sorted(self.cells, key=lambda k: (k.protocol, k.strategy, k.language, k.qtype, k.seed)):
            c = self.cells[key]
            rows.append(
                f"{key.protocol}\t{key.strategy}\t{key.language}\t{key.qtype}\t{key.seed}"
                f"\t{c.correct}\t{c.total}\t{c.accuracy:.6f}"
            )
        return rows

    def save(self, json_path, tsv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_nested(), sort_keys=True, indent=1) + "\n")
        if tsv_path is not None:
            Path(tsv_path).write_text("\n".join(self.to_flat_rows()) + "\n")

    @classmethod
    def load(cls, json_path) -> "EvalReport":
        return cls.from_nested(json.loads(Path(json_path).read_text()))


def chance_baselines(split: Split) -> dict[str, float]:
    """Majority-class accuracy of the split's answer prior, per qtype and overall."""
    source_records = [r for r in split.records]
    by_qtype: dict[str, Counter] = {}
    overall: Counter = Counter()
    seen = set()
    for r in source_records:
        if r.qid in seen:  # count each question once, not once per language
            continue
        seen.add(r.qid)
        by_qtype.setdefault(r.qtype, Counter())[r.answer] += 1
        overall[r.answer] += 1
    out = {}
    for qtype, counts in sorted(by_qtype.items()):
        out[qtype] = counts.most_common(1)[0][1] / sum(counts.values())
    out["overall"] = overall.most_common(1)[0][1] / sum(overall.values())
    return out


# -- evaluation engine -------------------------------------------------------------


def evaluate(
    model: Model,
    split: Split,
    vocab,
    languages: list[str],
    with_qtype: bool | None = None,
    ablation: str = "none",
    ablation_seed=0,
    batch_size: int = 256,
) -> dict[tuple[str, str], tuple[int, int]]:
    """Exact-match counts per (language, qtype); the model is never mutated."""
    if with_qtype is not None and with_qtype != model.with_qtype:
        raise ValueError("qtype conditioning must match the training configuration")
    available = {r.language for r in split.records}
    missing = [l for l in languages if l not in available]
    if missing:
        raise ValueError(f"languages missing from split: {missing}")
    table: dict[tuple[str, str], list[int]] = {}
    for lang in languages:
        records = [r for r in split.records if r.language == lang]
        for lo in range(0, len(records), batch_size):
            chunk = records[lo : lo + batch_size]
            batch = encode_batch(chunk, split.features, model.cfg, vocab, model.with_qtype)
            batch = apply_ablation(batch, ablation, seed=nn.seed_from(ablation_seed, lang, lo))
            preds = model.predict(batch)
            hits = preds == batch.labels
            for r, hit in zip(chunk, hits):
                cell = table.setdefault((lang, r.qtype), [0, 0])
                cell[0] += int(hit)
                cell[1] += 1
    return {k: (v[0], v[1]) for k, v in table.items()}


def add_evaluation(
    report: EvalReport,
    protocol: str,
    strategy: str,
    seed: int,
    counts: dict[tuple[str, str], tuple[int, int]],
) -> None:
    for (language, qtype), (correct, total) in counts.items():
        report.add_counts(CellKey(protocol, strategy, language, qtype, seed), correct, total)


def train_transform_for(protocol: Protocol, seed):
    """Batch transform applied during training under a protocol, or None."""
    train_mode = PROTOCOL_MODES[Protocol(protocol)][0]
    if train_mode == "none":
        return None

    def transform(batch: Batch, epoch: int, bi: int) -> Batch:
        return apply_ablation(batch, train_mode, seed=nn.seed_from(seed, "train-ablate", epoch, bi))

    return transform


def run_protocol(
    protocol: Protocol,
    strategy: Strategy,
    dataset: Dataset,
    snapshot: PretrainedSnapshot,
    cfg: ModelConfig,
    head: HeadKind,
    with_qtype: bool,
    schedule: StageSchedule,
    seeds: list[int],
    trained: dict[int, Model] | None = None,
    report: EvalReport | None = None,
    languages: list[str] | None = None,
    label: str | None = None,
) -> EvalReport:
    """Fill report cells for one protocol/strategy over the given seeds.

    MM, MM-V and MM-T reuse multimodally trained models (from ``trained`` when
    provided); V-V, T-T and TG-TG train fresh models with the ablation applied
    to every training batch. Cells are stamped with ``label`` (defaults to the
    bare strategy name).
    """
    protocol = Protocol(protocol)
    strategy = Strategy(strategy)
    if report is None:
        report = EvalReport(dataset.config.source_language)
    report.chance.update(chance_baselines(dataset.splits.test))
    if languages is None:
        languages = sorted(dataset.languages)
    train_mode, eval_mode = PROTOCOL_MODES[protocol]
    for seed in seeds:
        if protocol in UNIMODAL_TRAINED:
            result = finetune(
                snapshot, dataset, strategy, schedule, cfg, head, with_qtype, seed,
                train_transform=train_transform_for(protocol, seed),
                eval_transform=lambda b, e, i: apply_ablation(b, eval_mode, seed=nn.seed_from(seed, "dev-ablate", i)),
            )
            model = result.model
        elif trained is not None and seed in trained:
            model = trained[seed]
        else:
            model = finetune(snapshot, dataset, strategy, schedule, cfg, head, with_qtype, seed).model
        counts = evaluate(
            model, dataset.splits.test, dataset.vocab, languages,
            ablation=eval_mode, ablation_seed=nn.seed_from(seed, "eval-ablate"),
        )
        add_evaluation(report, protocol.value, label or strategy.value, seed, counts)
    return report
