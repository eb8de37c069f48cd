"""Logical forms, the gold-answer oracle, and template-based question generation.

The five structural question types map onto seven logical-form templates:

  verify   Exists / HasAttr          ("is there a red cube", "is the red cube shiny")
  logical  ExistsEither / HasBoth    ("is there a red cube or a blue torus", "... large and shiny")
  compare  CompareSize               ("which is larger the red cube or the blue torus")
  query    QueryAttr                 ("what color is the cube")
  choose   ChooseAttr                ("what color is the cube red or blue")

Answers come from a closed class set; compare answers name the winning
object's shape. Referents must resolve uniquely and comparison ties are
rejected at generation time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..nn.rng import derive_rng
from .scenes import Scene, SceneObject
from .vocab import ANSWER_INDEX, ATTRIBUTES, COLORS, QTYPES, SHAPES

_DESC_ATTR_ORDER = ("size", "color", "material", "shape")


class ReferentError(ValueError):
    """A descriptor matched zero or more than one object."""


class ComparisonTieError(ValueError):
    """Compared objects have equal size."""


class InadmissibleSceneError(ValueError):
    """The scene cannot host the requested question type."""


@dataclass(frozen=True)
class Descriptor:
    """Conjunction of attribute constraints identifying object(s) in a scene."""

    shape: str | None = None
    color: str | None = None
    size: str | None = None
    material: str | None = None

    def constraints(self):
        return tuple((a, getattr(self, a)) for a in _DESC_ATTR_ORDER if getattr(self, a) is not None)

    def matches(self, obj: SceneObject) -> bool:
        return all(obj.attr(a) == v for a, v in self.constraints())

    def concepts(self) -> tuple[str, ...]:
        return tuple(v for _, v in self.constraints())


@dataclass(frozen=True)
class Exists:
    target: Descriptor


@dataclass(frozen=True)
class ExistsEither:
    first: Descriptor
    second: Descriptor


@dataclass(frozen=True)
class HasAttr:
    target: Descriptor
    attr: str
    value: str


@dataclass(frozen=True)
class HasBoth:
    target: Descriptor
    value_a: str  # a size value
    value_b: str  # a material value


@dataclass(frozen=True)
class CompareSize:
    want_larger: bool
    first: Descriptor
    second: Descriptor


@dataclass(frozen=True)
class QueryAttr:
    target: Descriptor
    attr: str


@dataclass(frozen=True)
class ChooseAttr:
    target: Descriptor
    attr: str
    options: tuple[str, str]


LogicalForm = Exists | ExistsEither | HasAttr | HasBoth | CompareSize | QueryAttr | ChooseAttr


def resolve(scene: Scene, desc: Descriptor) -> SceneObject:
    matches = [o for o in scene.objects if desc.matches(o)]
    if len(matches) != 1:
        raise ReferentError(f"descriptor {desc} matched {len(matches)} objects in {scene.scene_id}")
    return matches[0]


def derive_answer(scene: Scene, form: LogicalForm) -> int:
    """Evaluate a logical form against the scene; returns an answer class index."""
    if isinstance(form, Exists):
        answer = "yes" if any(form.target.matches(o) for o in scene.objects) else "no"
    elif isinstance(form, ExistsEither):
        hit = any(form.first.matches(o) or form.second.matches(o) for o in scene.objects)
        answer = "yes" if hit else "no"
    elif isinstance(form, HasAttr):
        obj = resolve(scene, form.target)
        answer = "yes" if obj.attr(form.attr) == form.value else "no"
    elif isinstance(form, HasBoth):
        obj = resolve(scene, form.target)
        answer = "yes" if (obj.size == form.value_a and obj.material == form.value_b) else "no"
    elif isinstance(form, CompareSize):
        a = resolve(scene, form.first)
        b = resolve(scene, form.second)
        if a.size == b.size:
            raise ComparisonTieError(f"tie between {form.first} and {form.second}")
        winner_size = "large" if form.want_larger else "small"
        answer = a.shape if a.size == winner_size else b.shape
    elif isinstance(form, QueryAttr):
        answer = resolve(scene, form.target).attr(form.attr)
    elif isinstance(form, ChooseAttr):
        gold = resolve(scene, form.target).attr(form.attr)
        if gold not in form.options:
            raise ReferentError(f"gold value {gold!r} not among offered options {form.options}")
        answer = gold
    else:
        raise TypeError(f"unknown logical form {type(form).__name__}")
    return ANSWER_INDEX[answer]


@dataclass(frozen=True)
class Question:
    qid: str
    qtype: str
    form: LogicalForm = field(hash=False)
    answer: int  # class index
    body_concepts: tuple[str, ...]  # source-language concept sequence (no qtype prefix)


def answer_support(question: Question) -> tuple[str, ...]:
    """Structural answer candidates for a question (used for cue calibration)."""
    if question.qtype in ("verify", "logical"):
        return ("yes", "no")
    if question.qtype == "compare":
        return SHAPES
    if question.qtype == "query":
        return ATTRIBUTES[question.form.attr]
    if question.qtype == "choose":
        return question.form.options
    raise ValueError(f"unknown qtype {question.qtype!r}")


def _canonical(obj: SceneObject) -> Descriptor:
    return Descriptor(shape=obj.shape, color=obj.color)


def unique_descriptor(scene: Scene, obj: SceneObject, exclude: str | None = None) -> Descriptor | None:
    """Shortest descriptor (from a fixed preference list) unique for obj, or None."""
    candidates = (
        ("shape",),
        ("color", "shape"),
        ("size", "shape"),
        ("material", "shape"),
        ("size", "color", "shape"),
        ("material", "color", "shape"),
        ("size", "material", "shape"),
    )
    for attrs in candidates:
        if exclude is not None and exclude in attrs:
            continue
        desc = Descriptor(**{a: obj.attr(a) for a in attrs})
        if sum(desc.matches(o) for o in scene.objects) == 1:
            return desc
    return None


def _absent_pair_descriptor(scene: Scene, rng) -> Descriptor:
    present = {(o.color, o.shape) for o in scene.objects}
    for _ in range(1000):
        color = COLORS[rng.integers(len(COLORS))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        if (color, shape) not in present:
            return Descriptor(shape=shape, color=color)
    raise InadmissibleSceneError("could not sample an absent (color, shape) pair")


def _pick(rng, seq):
    return seq[rng.integers(len(seq))]


def _render_body(form: LogicalForm) -> tuple[str, ...]:
    if isinstance(form, Exists):
        return ("is", "there", "a", *form.target.concepts())
    if isinstance(form, ExistsEither):
        return ("is", "there", "a", *form.first.concepts(), "or", "a", *form.second.concepts())
    if isinstance(form, HasAttr):
        return ("is", "the", *form.target.concepts(), form.value)
    if isinstance(form, HasBoth):
        return ("is", "the", *form.target.concepts(), form.value_a, "and", form.value_b)
    if isinstance(form, CompareSize):
        word = "larger" if form.want_larger else "smaller"
        return ("which", "is", word, "the", *form.first.concepts(), "or", "the", *form.second.concepts())
    if isinstance(form, QueryAttr):
        return ("what", form.attr, "is", "the", *form.target.concepts())
    if isinstance(form, ChooseAttr):
        return ("what", form.attr, "is", "the", *form.target.concepts(), form.options[0], "or", form.options[1])
    raise TypeError(type(form).__name__)


def _make_verify(scene: Scene, rng, want_yes: bool | None = None) -> LogicalForm:
    if want_yes is None:
        want_yes = rng.random() < 0.5
    if rng.random() < 0.5:  # existence template
        if want_yes:
            return Exists(_canonical(_pick(rng, scene.objects)))
        return Exists(_absent_pair_descriptor(scene, rng))
    obj = _pick(rng, scene.objects)
    attr = _pick(rng, ("size", "material"))
    true_value = obj.attr(attr)
    if want_yes:
        value = true_value
    else:
        value = next(v for v in ATTRIBUTES[attr] if v != true_value)
    return HasAttr(_canonical(obj), attr, value)


def _make_logical(scene: Scene, rng, want_yes: bool | None = None) -> LogicalForm:
    if want_yes is None:
        want_yes = rng.random() < 0.5
    if rng.random() < 0.5:  # disjunction over existence
        if want_yes:
            present = _canonical(_pick(rng, scene.objects))
            absent = _absent_pair_descriptor(scene, rng)
            pair = (present, absent) if rng.random() < 0.5 else (absent, present)
        else:
            first = _absent_pair_descriptor(scene, rng)
            second = _absent_pair_descriptor(scene, rng)
            pair = (first, second)
        return ExistsEither(*pair)
    obj = _pick(rng, scene.objects)
    size_v, mat_v = obj.size, obj.material
    if not want_yes:
        if rng.random() < 0.5:
            size_v = next(v for v in ATTRIBUTES["size"] if v != size_v)
        else:
            mat_v = next(v for v in ATTRIBUTES["material"] if v != mat_v)
    return HasBoth(_canonical(obj), size_v, mat_v)


def _make_compare(scene: Scene, rng) -> LogicalForm:
    pairs = [
        (a, b)
        for i, a in enumerate(scene.objects)
        for b in scene.objects[i + 1 :]
        if a.size != b.size
    ]
    if not pairs:
        raise InadmissibleSceneError("compare needs two size-distinct objects")
    a, b = pairs[rng.integers(len(pairs))]
    if rng.random() < 0.5:
        a, b = b, a
    return CompareSize(bool(rng.random() < 0.5), _canonical(a), _canonical(b))


def _make_query(scene: Scene, rng, attrs: tuple[str, ...]) -> LogicalForm:
    attr_order = list(rng.permutation(len(attrs)))
    for ai in attr_order:
        attr = attrs[ai]
        obj_order = list(rng.permutation(len(scene.objects)))
        for oi in obj_order:
            desc = unique_descriptor(scene, scene.objects[oi], exclude=attr)
            if desc is not None:
                return QueryAttr(desc, attr)
    raise InadmissibleSceneError("no object admits an attribute query")


def _make_choose(scene: Scene, rng, attrs: tuple[str, ...]) -> LogicalForm:
    q = _make_query(scene, rng, attrs)
    gold = resolve(scene, q.target).attr(q.attr)
    distractor = _pick(rng, tuple(v for v in ATTRIBUTES[q.attr] if v != gold))
    options = (gold, distractor) if rng.random() < 0.5 else (distractor, gold)
    return ChooseAttr(q.target, q.attr, options)


def generate_question(
    scene: Scene,
    qtype: str,
    seed,
    query_attrs: tuple[str, ...] = ("color", "size", "material"),
    qid: str = "",
    want_yes: bool | None = None,
) -> Question:
    """Sample one question of the given type; deterministic in (scene, qtype, seed).

    ``want_yes`` pins the gold answer of binary templates; the corpus builder
    alternates it so yes/no stay balanced exactly, not just in expectation.
    """
    if qtype not in QTYPES:
        raise ValueError(f"unknown question type {qtype!r}")
    rng = derive_rng("question", scene.scene_id, qtype, seed)
    if qtype == "verify":
        form = _make_verify(scene, rng, want_yes)
    elif qtype == "logical":
        form = _make_logical(scene, rng, want_yes)
    elif qtype == "compare":
        form = _make_compare(scene, rng)
    elif qtype == "query":
        form = _make_query(scene, rng, query_attrs)
    else:
        form = _make_choose(scene, rng, query_attrs)
    answer = derive_answer(scene, form)
    return Question(qid, qtype, form, answer, _render_body(form))
