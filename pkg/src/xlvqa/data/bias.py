"""Controllable text-side answer cues.

Questions of the targeted types always receive one cue token (a reserved,
language-shared id appended after the body). With probability beta the cue
encodes the gold answer; otherwise it is drawn uniformly from the question's
structural answer candidates, so beta=0 cues carry no information and the
best cue-only predictor scores beta + (1-beta) * chance.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..nn.rng import derive_rng
from .questions import Question, answer_support
from .vocab import ANSWER_CLASSES, Vocabulary


@dataclass(frozen=True)
class BiasSpec:
    beta: float = 0.0
    qtypes: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


def assign_cue(question: Question, bias: BiasSpec, seed) -> str | None:
    """Cue class for one question, or None when its type is not targeted."""
    if question.qtype not in bias.qtypes:
        return None
    rng = derive_rng(seed, "bias", question.qid)
    if rng.random() < bias.beta:
        return ANSWER_CLASSES[question.answer]
    support = answer_support(question)
    return support[rng.integers(len(support))]


def cue_token_for(question: Question, bias: BiasSpec, seed, vocab: Vocabulary) -> int | None:
    cue_class = assign_cue(question, bias, seed)
    return None if cue_class is None else vocab.cue_token(cue_class)
