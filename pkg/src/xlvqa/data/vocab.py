"""Closed concept inventory, answer classes, and the shared multilingual vocabulary.

Every language maps the same concept inventory (attribute values plus
template function words) onto surface token ids. A target language shares a
fraction rho of its surface forms with the source language; the rest get
private ids. Question-type tokens, cue tokens, and punctuation are shared
across all languages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..nn.rng import derive_rng

SHAPES = ("cube", "sphere", "cylinder", "cone", "pyramid", "torus")
COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "gray", "brown")
SIZES = ("small", "large")
MATERIALS = ("matte", "shiny")

ATTRIBUTES = {"shape": SHAPES, "color": COLORS, "size": SIZES, "material": MATERIALS}

ANSWER_CLASSES = ("yes", "no") + COLORS + SHAPES + SIZES + MATERIALS
ANSWER_INDEX = {a: i for i, a in enumerate(ANSWER_CLASSES)}

QTYPES = ("verify", "logical", "compare", "query", "choose")

FUNCTION_WORDS = (
    "is", "there", "a", "or", "and", "the", "which", "what",
    "larger", "smaller", "color", "size", "material",
)

CONCEPTS = FUNCTION_WORDS + COLORS + SHAPES + SIZES + MATERIALS

PAD, CLS, SEP, MASK, QMARK, COLON = range(6)
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "?", ":")


@dataclass(frozen=True)
class LanguageSpec:
    """One synthetic language: lexicon, overlap fraction, word-order transform."""

    name: str
    rho: float
    order: str  # identity | reverse | rotate:k | shuffle:k
    lexicon: dict = field(hash=False, compare=False, default_factory=dict)  # concept -> token id
    shared: frozenset = frozenset()  # concepts whose surface equals the source's

    def token(self, concept: str) -> int:
        try:
            return self.lexicon[concept]
        except KeyError:
            raise KeyError(f"concept {concept!r} missing from lexicon of {self.name!r}") from None


class Vocabulary:
    """Id space: specials, qtype tokens, cue tokens, then per-language lexemes."""

    def __init__(self, tokens: list[str], qtype_ids: dict[str, int], cue_ids: dict[str, int]):
        self.tokens = tokens
        self.qtype_ids = qtype_ids
        self.cue_ids = cue_ids

    def __len__(self) -> int:
        return len(self.tokens)

    def qtype_token(self, qtype: str) -> int:
        return self.qtype_ids[qtype]

    def cue_token(self, answer_class: str) -> int:
        return self.cue_ids[answer_class]

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "qtype_ids": self.qtype_ids, "cue_ids": self.cue_ids}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(list(d["tokens"]), dict(d["qtype_ids"]), dict(d["cue_ids"]))


def build_vocabulary(
    source: str,
    language_configs,  # iterable of (name, rho, order)
    seed: int,
) -> tuple[Vocabulary, dict[str, LanguageSpec]]:
    """Construct the shared vocabulary and one LanguageSpec per language.

    The source language owns one token per concept; each target shares the
    source token for round(rho * |concepts|) concepts (chosen deterministically
    from the dataset seed) and mints private tokens for the rest.
    """
    tokens = list(SPECIAL_TOKENS)
    qtype_ids = {}
    for q in QTYPES:
        qtype_ids[q] = len(tokens)
        tokens.append(f"qtype:{q}")
    cue_ids = {}
    for cls_name in ANSWER_CLASSES:
        cue_ids[cls_name] = len(tokens)
        tokens.append(f"cue:{cls_name}")

    source_lexicon = {}
    for concept in CONCEPTS:
        source_lexicon[concept] = len(tokens)
        tokens.append(f"{source}:{concept}")
    specs = {source: LanguageSpec(source, 1.0, "identity", source_lexicon, frozenset(CONCEPTS))}

    for name, rho, order in language_configs:
        if name == source:
            continue
        rng = derive_rng(seed, "language", name)
        n_shared = int(round(rho * len(CONCEPTS)))
        shared_idx = sorted(rng.choice(len(CONCEPTS), size=n_shared, replace=False).tolist())
        shared = frozenset(CONCEPTS[i] for i in shared_idx)
        lexicon = {}
        for concept in CONCEPTS:
            if concept in shared:
                lexicon[concept] = source_lexicon[concept]
            else:
                lexicon[concept] = len(tokens)
                tokens.append(f"{name}:{concept}")
        specs[name] = LanguageSpec(name, rho, order, lexicon, shared)

    return Vocabulary(tokens, qtype_ids, cue_ids), specs
