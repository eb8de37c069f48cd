"""Surface rendering of questions and captions into each synthetic language."""

from __future__ import annotations

import numpy as np

from ..nn.rng import derive_rng
from .questions import Question
from .vocab import COLON, LanguageSpec, Vocabulary


def apply_order(token_ids: list[int], order: str) -> list[int]:
    """Apply a language's word-order transform to a rendered body."""
    n = len(token_ids)
    if order == "identity" or n < 2:
        return list(token_ids)
    if order == "reverse":
        return list(reversed(token_ids))
    kind, _, arg = order.partition(":")
    if kind == "rotate":
        k = int(arg) % n
        return token_ids[-k:] + token_ids[:-k] if k else list(token_ids)
    if kind == "shuffle":
        perm = derive_rng("order", arg, n).permutation(n)
        return [token_ids[i] for i in perm]
    raise ValueError(f"unknown order transform {order!r}")


def render_concepts(concepts, lang: LanguageSpec) -> list[int]:
    body = [lang.token(c) for c in concepts]
    return apply_order(body, lang.order)


def render(question: Question, lang: LanguageSpec, with_qtype: bool, vocab: Vocabulary) -> list[int]:
    """Token ids for a question in one language.

    The word-order transform touches the question body only. When qtype
    conditioning is on, the sequence starts with the source-language
    question-type token and a colon.
    """
    body = render_concepts(question.body_concepts, lang)
    if with_qtype:
        return [vocab.qtype_token(question.qtype), COLON] + body
    return body


def qtype_prefix(qtype: str, vocab: Vocabulary) -> list[int]:
    return [vocab.qtype_token(qtype), COLON]
