"""Pretraining and the fine-tuning strategies with freeze/reset semantics.

Strategies:
  standard   all parameters trainable for the whole budget
  ft         frozen token embeddings, whole budget
  ft-short   frozen token embeddings, stage-1 budget only
  ft-long    frozen token embeddings, stage-1 + stage-2 budget in one phase
  sb         two stages: (1) fine-tune with frozen token embeddings,
             (2) freeze head weight (bias stays trainable), reset backbone /
             visual / position / segment groups to the pretrained snapshot,
             re-initialize the head transformation, train again
  ft-star    like ft, but split into two phases with a fresh optimizer and
             learning-rate schedule at the phase boundary (no resets)

"Text embeddings" means the token table only; position and segment tables
stay trainable (stage-2 reset covers them anyway). Set
``freeze_positions_too`` on the schedule to test the wider reading.

Pretraining optimizes masked-token prediction over all languages plus a
binary image-caption matching head, with an optional translation-pair
objective (masked prediction over concatenated parallel captions). The task
head groups are excluded from pretraining updates, so the snapshot carries
their pristine initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from . import nn
from .data.corpus import Dataset, FewshotPool, QuestionRecord
from .data.scenes import VisualFeatures
from .data.vocab import CLS, MASK, PAD, SEP, Vocabulary
from .model import (
    Batch,
    HeadKind,
    Model,
    ModelConfig,
    ParameterSet,
    encode_batch,
    forward,
    fresh_head_trans,
)


class Strategy(str, Enum):
    STANDARD = "standard"
    FT = "ft"
    FT_SHORT = "ft-short"
    FT_LONG = "ft-long"
    SB = "sb"
    FT_STAR = "ft-star"


SNAPSHOT_RESET_GROUPS = ("backbone", "visual_projections", "position_embeddings", "segment_embeddings")

# Paper-scale reference learning rates, kept as named presets; the toy
# defaults below train from a much shorter pretraining and use larger steps.
LR_PRESETS = {"m3p-paper": 2e-5, "uc2-paper": 1e-4, "fewshot-paper": 5e-5}


@dataclass(frozen=True)
class StageSchedule:
    total_epochs: int = 6
    stage1_epochs: int = 4
    stage2_epochs: int = 2
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    lr_decay: str = "linear"  # or "constant"
    fewshot_lr: float = 1e-4
    fewshot_epochs: int = 10
    freeze_positions_too: bool = False

    def __post_init__(self):
        if self.lr_decay not in ("linear", "constant", "cooldown"):
            raise ValueError("lr_decay must be 'linear', 'constant' or 'cooldown'")


SCHEDULE_PRESETS = {
    "m3p-like": {"total_epochs": 6, "stage1_epochs": 4, "stage2_epochs": 2},
    "uc2-like": {"total_epochs": 6, "stage1_epochs": 3, "stage2_epochs": 3},
}


def schedule_from_preset(name: str, **overrides) -> StageSchedule:
    if name not in SCHEDULE_PRESETS:
        raise KeyError(f"unknown stage preset {name!r}; options: {sorted(SCHEDULE_PRESETS)}")
    kwargs = dict(SCHEDULE_PRESETS[name])
    kwargs.update(overrides)
    return StageSchedule(**kwargs)


class BudgetMismatchError(ValueError):
    """Stage epochs do not add up to the total budget."""


def freeze_mask(strategy: Strategy, stage: int = 1, freeze_positions_too: bool = False) -> frozenset[str]:
    """Parameter groups excluded from optimizer updates for a strategy phase."""
    strategy = Strategy(strategy)
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    if stage == 2 and strategy not in (Strategy.SB, Strategy.FT_STAR):
        raise ValueError(f"strategy {strategy.value} has no stage 2")
    text = {"text_embeddings"}
    if freeze_positions_too:
        text |= {"position_embeddings", "segment_embeddings"}
    if strategy is Strategy.STANDARD:
        return frozenset()
    if strategy in (Strategy.FT, Strategy.FT_SHORT, Strategy.FT_LONG, Strategy.FT_STAR):
        return frozenset(text)
    if strategy is Strategy.SB:
        return frozenset(text) if stage == 1 else frozenset(text | {"head_weight"})
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class PretrainConfig:
    """Masked-token + image-caption-matching pretraining.

    Each epoch interleaves masked-prediction batches (which also carry the
    translation-pair objective and drive cross-lingual embedding alignment)
    with clean-input matching batches scored by the late-interaction head.
    """

    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    lr_decay: str = "cooldown"
    mask_prob: float = 0.15
    translation_pairs: bool = True
    match_weight: float = 1.0
    mlm_weight: float = 1.0
    heldout_scenes: int = 24
    seed: int = 0


@dataclass
class PretrainedSnapshot:
    """Immutable record of pretrained weights; consumers must copy before training."""

    params: ParameterSet
    corpus_fingerprint: str
    seed: int
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        meta = dict(self.meta)
        meta.update({"corpus_fingerprint": self.corpus_fingerprint, "seed": self.seed})
        self.params.save(path, meta)

    @classmethod
    def load(cls, path) -> "PretrainedSnapshot":
        params, meta = ParameterSet.load(path)
        return cls(params, meta.pop("corpus_fingerprint", ""), meta.pop("seed", 0), meta)


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    step_counts: dict[str, int]
    stage1_params: ParameterSet | None = None

    @property
    def total_steps(self) -> int:
        return sum(self.step_counts.values())


BatchTransform = Callable[[Batch, int, int], Batch]  # (batch, epoch, batch_idx) -> batch


def _linear_lr(base: float, step: int, total: int, decay: str) -> float:
    if decay == "constant" or total <= 0:
        return base
    if decay == "cooldown":  # flat, then linear to zero over the last quarter
        knee = 0.75 * total
        if step < knee:
            return base
        return base * max(0.0, 1.0 - (step - knee) / (total - knee))
    return base * max(0.0, 1.0 - step / total)


def _batched(indices: np.ndarray, size: int):
    for i in range(0, len(indices), size):
        yield indices[i : i + size]


def accuracy_on_records(
    model: Model,
    records: list[QuestionRecord],
    features: dict[str, VisualFeatures],
    vocab: Vocabulary,
    batch_size: int = 256,
    transform: BatchTransform | None = None,
) -> float:
    if not records:
        return float("nan")
    hits = 0
    for lo in range(0, len(records), batch_size):
        chunk = records[lo : lo + batch_size]
        batch = encode_batch(chunk, features, model.cfg, vocab, model.with_qtype)
        if transform is not None:
            batch = transform(batch, 0, lo)
        hits += int((model.predict(batch) == batch.labels).sum())
    return hits / len(records)


def train_phase(
    model: Model,
    dataset: Dataset,
    records: list[QuestionRecord],
    features: dict[str, VisualFeatures],
    *,
    mask: frozenset[str],
    epochs: int,
    schedule: StageSchedule,
    seed,
    phase: str,
    lr: float | None = None,
    train_transform: BatchTransform | None = None,
    eval_transform: BatchTransform | None = None,
    log: list[dict] | None = None,
) -> int:
    """Run one optimization phase in place; returns the optimizer step count."""
    base_lr = schedule.lr if lr is None else lr
    trainable = model.params.trainable(mask)
    opt = nn.AdamW(base_lr, weight_decay=schedule.weight_decay, clip_norm=schedule.clip_norm)
    n = len(records)
    steps_per_epoch = math.ceil(n / schedule.batch_size)
    total_steps = steps_per_epoch * epochs
    step = 0
    for epoch in range(epochs):
        order = nn.derive_rng(seed, "order", phase, epoch).permutation(n)
        losses = []
        norms = []
        for bi, idx in enumerate(_batched(order, schedule.batch_size)):
            chunk = [records[i] for i in idx]
            batch = encode_batch(chunk, features, model.cfg, dataset.vocab, model.with_qtype)
            if train_transform is not None:
                batch = train_transform(batch, epoch, bi)
            rng = nn.derive_rng(seed, "dropout", phase, epoch, bi)
            logits = forward(model.params, batch, model.cfg, model.head, train=True, rng=rng)
            loss = nn.cross_entropy(logits, batch.labels)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"training diverged in phase {phase!r}")
            loss.backward()
            grads = {k: t.grad for k, t in trainable.items() if t.grad is not None}
            norms.append(nn.global_norm(grads))
            grads = nn.clip_global_norm(grads, schedule.clip_norm)
            opt.step({k: trainable[k] for k in grads}, grads, lr=_linear_lr(base_lr, step, total_steps, schedule.lr_decay))
            step += 1
            losses.append(float(loss.data))
        if log is not None:
            dev = dataset.splits.dev
            dev_acc = accuracy_on_records(
                model, dev.records, dev.features, dataset.vocab, transform=eval_transform
            )
            log.append(
                {
                    "phase": phase,
                    "epoch": epoch + 1,
                    "loss": float(np.mean(losses)),
                    "dev_acc": dev_acc,
                    "grad_norm": float(np.mean(norms)),
                }
            )
    return step


def reset_for_stage2(
    current: ParameterSet,
    snapshot: PretrainedSnapshot,
    cfg: ModelConfig,
    head: HeadKind,
    seed,
) -> ParameterSet:
    """Stage-2 parameter surgery.

    Backbone, visual projections, position and segment embeddings return to
    the pretrained snapshot; token embeddings, head weight and head bias are
    carried over from stage 1; the head transformation is freshly initialized
    from a stream derived from (seed, "stage2").
    """
    cur_keys = set(current.named())
    snap_keys = set(snapshot.params.named())
    if cur_keys != snap_keys:
        raise ValueError("parameter groups of current model and snapshot do not align")
    out = current.copy()
    out.load_arrays(snapshot.params.arrays(), groups=SNAPSHOT_RESET_GROUPS)
    fresh_head_trans(out, cfg, head, nn.seed_from(seed, "stage2"))
    return out


def _validate_budget(strategy: Strategy, schedule: StageSchedule) -> None:
    staged = (Strategy.SB, Strategy.FT_SHORT, Strategy.FT_LONG, Strategy.FT_STAR)
    if strategy in staged and schedule.stage1_epochs + schedule.stage2_epochs != schedule.total_epochs:
        raise BudgetMismatchError(
            f"stage1 ({schedule.stage1_epochs}) + stage2 ({schedule.stage2_epochs}) "
            f"!= total ({schedule.total_epochs})"
        )


def finetune(
    snapshot: PretrainedSnapshot,
    dataset: Dataset,
    strategy: Strategy,
    schedule: StageSchedule,
    cfg: ModelConfig,
    head: HeadKind,
    with_qtype: bool,
    seed,
    train_transform: BatchTransform | None = None,
    eval_transform: BatchTransform | None = None,
    resume_stage1: ParameterSet | None = None,
) -> TrainResult:
    """Fine-tune from a pretrained snapshot on the source-language train split.

    ``resume_stage1`` lets sb / ft-star runs start from a cached end-of-stage-1
    parameter set; with the same seed the outcome is bit-identical to running
    stage 1 in-process (the stage-1 phase of every staged strategy draws from
    the same derived streams).
    """
    strategy = Strategy(strategy)
    _validate_budget(strategy, schedule)
    model = Model(cfg, HeadKind(head), with_qtype, snapshot.params.copy())
    train = dataset.splits.train
    log: list[dict] = []
    step_counts: dict[str, int] = {}
    stage1_params: ParameterSet | None = None
    fpt = schedule.freeze_positions_too
    stage1_steps = math.ceil(len(train.records) / schedule.batch_size) * schedule.stage1_epochs

    def phase(name, mask, epochs):
        return train_phase(
            model, dataset, train.records, train.features,
            mask=mask, epochs=epochs, schedule=schedule, seed=seed, phase=name,
            train_transform=train_transform, eval_transform=eval_transform, log=log,
        )

    if strategy in (Strategy.STANDARD, Strategy.FT, Strategy.FT_LONG):
        step_counts["stage1"] = phase("stage1", freeze_mask(strategy, 1, fpt), schedule.total_epochs)
    elif strategy is Strategy.FT_SHORT:
        step_counts["stage1"] = phase("stage1", freeze_mask(strategy, 1, fpt), schedule.stage1_epochs)
        stage1_params = model.params.copy()
    elif strategy in (Strategy.FT_STAR, Strategy.SB):
        if resume_stage1 is not None:
            model.params = resume_stage1.copy()
            step_counts["stage1"] = stage1_steps
            log.append({"phase": "stage1", "resumed": True, "steps": stage1_steps})
        else:
            step_counts["stage1"] = phase("stage1", freeze_mask(strategy, 1, fpt), schedule.stage1_epochs)
        stage1_params = model.params.copy()
        if strategy is Strategy.SB:
            model.params = reset_for_stage2(model.params, snapshot, cfg, head, seed)
        step_counts["stage2"] = phase("stage2", freeze_mask(strategy, 2, fpt), schedule.stage2_epochs)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    return TrainResult(model, log, step_counts, stage1_params)


def fewshot_adapt(
    model: Model,
    dataset: Dataset,
    target_lang: str,
    k: int,
    seed,
    schedule: StageSchedule,
    strategy: Strategy,
) -> Model:
    """Adapt a fine-tuned model on all questions of k pool scenes in one language.

    Scene subsets are nested in k for a fixed seed. The freeze mask is the
    final-stage mask of the model's strategy. k=0 returns the model unchanged.
    """
    if k == 0:
        return model
    pool: FewshotPool = dataset.splits.fewshot[target_lang]
    if k > len(pool.scene_order):
        raise ValueError(f"k={k} exceeds the few-shot pool ({len(pool.scene_order)} scenes)")
    perm = nn.derive_rng(seed, "fewshot-scenes", target_lang).permutation(len(pool.scene_order))
    chosen = [pool.scene_order[i] for i in perm[:k]]
    records = [r for sid in chosen for r in pool.records_by_scene[sid]]

    strategy = Strategy(strategy)
    final_stage = 2 if strategy in (Strategy.SB, Strategy.FT_STAR) else 1
    mask = freeze_mask(strategy, final_stage, schedule.freeze_positions_too)

    adapted = Model(model.cfg, model.head, model.with_qtype, model.params.copy())
    train_phase(
        adapted, dataset, records, dataset.splits.fewshot_features,
        mask=mask, epochs=schedule.fewshot_epochs, schedule=schedule,
        seed=nn.seed_from(seed, "fewshot", target_lang, k), phase=f"fewshot-{target_lang}-{k}",
        lr=schedule.fewshot_lr,
    )
    return adapted


# -- pretraining -------------------------------------------------------------------


@dataclass
class _PretrainItem:
    scene_id: str
    segments: tuple[tuple[int, ...], ...]  # one or two caption renderings
    matched: bool
    is_pair: bool


def _encode_pretrain_batch(
    items: list[_PretrainItem],
    features: dict[str, VisualFeatures],
    cfg: ModelConfig,
    mask_prob: float,
    rng: np.random.Generator,
    do_mask: bool = True,
):
    bsz = len(items)
    seqs = []
    for it in items:
        seq = [CLS]
        for segment in it.segments:
            seq.extend(segment)
            seq.append(SEP)
        seqs.append(seq)
    width = max(len(s) for s in seqs)
    token_ids = np.full((bsz, width), PAD, dtype=np.int64)
    text_mask = np.zeros((bsz, width))
    pos_ids = np.tile(np.arange(width, dtype=np.int64), (bsz, 1))
    max_obj = max(features[it.scene_id].object_count for it in items)
    feats = np.zeros((bsz, max_obj, cfg.d_v))
    spatial = np.zeros((bsz, max_obj, 5))
    obj_mask = np.zeros((bsz, max_obj))
    counts = np.zeros(bsz, dtype=np.int64)

    rows, cols, targets = [], [], []
    match_labels = np.zeros(bsz, dtype=np.int64)
    single = np.zeros(bsz, dtype=bool)
    for i, (it, seq) in enumerate(zip(items, seqs)):
        token_ids[i, : len(seq)] = seq
        text_mask[i, : len(seq)] = 1.0
        if do_mask:
            maskable = [j for j, t in enumerate(seq) if t not in (CLS, SEP)]
            picks = [j for j in maskable if rng.random() < mask_prob]
            if not picks:
                picks = [maskable[int(rng.integers(len(maskable)))]]
            for j in picks:
                rows.append(i)
                cols.append(j)
                targets.append(seq[j])
                token_ids[i, j] = MASK
        vf = features[it.scene_id]
        n = vf.object_count
        feats[i, :n] = vf.features
        spatial[i, :n] = vf.spatial
        obj_mask[i, :n] = 1.0
        counts[i] = min(n, cfg.max_objects)
        match_labels[i] = int(it.matched)
        single[i] = not it.is_pair

    batch = Batch(token_ids, text_mask, pos_ids, feats, spatial, obj_mask, counts)
    return batch, (np.array(rows), np.array(cols), np.array(targets)), match_labels, single


def _match_logits(states: nn.Tensor, batch: Batch, aux: dict) -> nn.Tensor:
    """Late-interaction matching score: mean over caption tokens of the best
    cosine against any object state, scaled and shifted into a binary logit.

    Cosine similarities give the alignment a first-order gradient path; a
    classifier read off [CLS] alone must route everything through initially
    diffuse attention and does not get off the ground at this scale.
    """
    b, _, d = states.shape
    n_text = batch.text_mask.shape[1]
    token_weights = batch.text_mask.copy()
    token_weights[:, 0] = 0.0  # CLS
    token_weights[batch.token_ids == SEP] = 0.0
    text = states[:, :n_text, :]
    objs = states[:, n_text + 1 :, :]
    text_n = text / (nn.tsum(text * text, axis=2, keepdims=True) ** 0.5 + 1e-8)
    objs_n = objs / (nn.tsum(objs * objs, axis=2, keepdims=True) ** 0.5 + 1e-8)
    sims = nn.matmul(text_n, nn.transpose(objs_n, (0, 2, 1)))  # (B, T, M)
    masked = np.where(batch.obj_mask[:, None, :] > 0, sims.data, -np.inf)
    best = masked.argmax(axis=2)
    rows, cols = np.meshgrid(np.arange(b), np.arange(text.data.shape[1]), indexing="ij")
    best_sims = sims[rows, cols, best]  # (B, T); gradient flows to the argmax entries
    weights = token_weights / np.maximum(token_weights.sum(axis=1, keepdims=True), 1.0)
    score = nn.tsum(best_sims * weights, axis=1, keepdims=True)
    logit = score * aux["pretrain_aux/match_scale"] + aux["pretrain_aux/match_bias"]
    return nn.concat([nn.Tensor(np.zeros((b, 1))), logit], axis=1)


def _encoder_states(ps: ParameterSet, batch: Batch, cfg: ModelConfig) -> nn.Tensor:
    """Backbone forward up to the final hidden states (no task head)."""
    params = ps.named()
    d = cfg.d_model
    tok = nn.embedding(params["text_embeddings/token_table"], batch.token_ids)
    pos = nn.embedding(params["position_embeddings/pos_table"], batch.pos_ids)
    seg = params["segment_embeddings/seg_table"]
    text = tok + pos + nn.reshape(seg[0], (1, 1, d))
    count_vec = nn.embedding(params["visual_projections/count_table"], batch.counts)
    count = (
        nn.reshape(count_vec, (len(batch), 1, d))
        + nn.reshape(params["position_embeddings/pos_table"][cfg.n_positions - 1], (1, 1, d))
        + nn.reshape(seg[1], (1, 1, d))
    )
    obj = (
        nn.affine(nn.Tensor(batch.feats), params["visual_projections/feat_w"], params["visual_projections/feat_b"])
        + nn.affine(nn.Tensor(batch.spatial), params["visual_projections/spatial_w"], params["visual_projections/spatial_b"])
        + nn.reshape(seg[1], (1, 1, d))
    )
    x = nn.concat([text, count, obj], axis=1)
    x = nn.layer_norm(x, params["backbone/emb_ln_gain"], params["backbone/emb_ln_bias"])
    ones = np.ones((len(batch), 1))
    key_mask = np.concatenate([batch.text_mask, ones, batch.obj_mask], axis=1)
    mask_bias = ((1.0 - key_mask) * -1e9)[:, None, None, :]
    from .model import _attention

    for l in range(cfg.layers):
        p = f"layer{l}"
        x = nn.layer_norm(
            x + _attention(x, params, p, mask_bias, cfg),
            params[f"backbone/{p}.ln1_gain"], params[f"backbone/{p}.ln1_bias"],
        )
        ff = nn.affine(
            nn.gelu(nn.affine(x, params[f"backbone/{p}.ffn_w1"], params[f"backbone/{p}.ffn_b1"])),
            params[f"backbone/{p}.ffn_w2"], params[f"backbone/{p}.ffn_b2"],
        )
        x = nn.layer_norm(x + ff, params[f"backbone/{p}.ln2_gain"], params[f"backbone/{p}.ln2_bias"])
    return x


def _pretrain_items(dataset: Dataset, cfg: PretrainConfig, epoch: int) -> list[_PretrainItem]:
    """One epoch of pretraining items: per-record language draw, plus pairs."""
    rng = nn.derive_rng(cfg.seed, "pretrain-items", epoch)
    langs = sorted(dataset.languages)
    src = dataset.config.source_language
    targets = [l for l in langs if l != src]
    items = []
    for rec in dataset.pretrain.records:
        lang = langs[int(rng.integers(len(langs)))]
        items.append(_PretrainItem(rec.scene_id, (rec.renderings[lang],), rec.matched, False))
        if cfg.translation_pairs and rec.matched and targets and rng.random() < 0.5:
            tgt = targets[int(rng.integers(len(targets)))]
            items.append(
                _PretrainItem(rec.scene_id, (rec.renderings[src], rec.renderings[tgt]), True, True)
            )
    return items


def _heldout_scene_ids(dataset: Dataset, cfg: PretrainConfig) -> set[str]:
    sids = sorted(dataset.pretrain.features)
    k = min(cfg.heldout_scenes, len(sids) // 5)  # never hold out the bulk of a tiny corpus
    return set(sids[-k:]) if k else set()


def pretrain(
    params: ParameterSet,
    dataset: Dataset,
    model_cfg: ModelConfig,
    cfg: PretrainConfig,
) -> tuple[PretrainedSnapshot, list[dict]]:
    """Pretrain in place and return the frozen snapshot plus the epoch log."""
    if model_cfg.max_text_len + 2 < 2 * 8 + 1:
        # two 7-token captions + separators must fit the text region
        raise ValueError("max_text_len too small for translation pairs")
    heldout = _heldout_scene_ids(dataset, cfg)
    d = model_cfg.d_model
    aux = {
        "pretrain_aux/match_scale": nn.Tensor(np.array([5.0]), requires_grad=True),
        "pretrain_aux/match_bias": nn.zeros_init((1,)),
        "pretrain_aux/mlm_bias": nn.zeros_init((model_cfg.vocab_size,)),
    }
    frozen = frozenset(("head_trans", "head_weight", "head_bias"))
    trainable = dict(params.trainable(frozen))
    trainable.update(aux)
    opt = nn.AdamW(cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    token_table = params["text_embeddings/token_table"]

    def mlm_loss(batch, mlm):
        states = _encoder_states(params, batch, model_cfg)
        rows, cols, targets = mlm
        h = states[rows, cols]
        logits = nn.matmul(h, nn.transpose(token_table)) + aux["pretrain_aux/mlm_bias"]
        return nn.cross_entropy(logits, targets) * cfg.mlm_weight

    def match_loss(batch, match_labels):
        states = _encoder_states(params, batch, model_cfg)
        logits = _match_logits(states, batch, aux)
        return nn.cross_entropy(logits, match_labels) * cfg.match_weight

    def epoch_batches(epoch: int):
        """Interleaved objective batches: masked MLM passes plus clean matching passes."""
        items = [i for i in _pretrain_items(dataset, cfg, epoch) if i.scene_id not in heldout]
        singles = [i for i in items if not i.is_pair]
        rng = nn.derive_rng(cfg.seed, "pretrain-order", epoch)
        tagged = []
        for idx in _batched(rng.permutation(len(items)), cfg.batch_size):
            tagged.append(("mlm", [items[i] for i in idx]))
        for idx in _batched(rng.permutation(len(singles)), cfg.batch_size):
            tagged.append(("match", [singles[i] for i in idx]))
        perm = rng.permutation(len(tagged))
        return [tagged[i] for i in perm]

    log: list[dict] = []
    step = 0
    total_steps = cfg.epochs * len(epoch_batches(0))
    for epoch in range(cfg.epochs):
        losses = []
        for bi, (kind, chunk) in enumerate(epoch_batches(epoch)):
            rng = nn.derive_rng(cfg.seed, "pretrain-mask", epoch, bi)
            batch, mlm, match_labels, _ = _encode_pretrain_batch(
                chunk, dataset.pretrain.features, model_cfg, cfg.mask_prob, rng,
                do_mask=(kind == "mlm"),
            )
            loss = mlm_loss(batch, mlm) if kind == "mlm" else match_loss(batch, match_labels)
            if not np.isfinite(loss.data):
                raise FloatingPointError("pretraining diverged")
            loss.backward()
            grads = {k: t.grad for k, t in trainable.items() if t.grad is not None}
            grads = nn.clip_global_norm(grads, cfg.clip_norm)
            opt.step({k: trainable[k] for k in grads}, grads, lr=_linear_lr(cfg.lr, step, total_steps, cfg.lr_decay))
            step += 1
            losses.append(float(loss.data))
        metrics = _pretrain_eval(params, dataset, model_cfg, cfg, aux, heldout)
        metrics.update({"phase": "pretrain", "epoch": epoch + 1, "loss": float(np.mean(losses))})
        log.append(metrics)

    meta = {"epochs": cfg.epochs, "metrics": log[-1] if log else {}}
    snapshot = PretrainedSnapshot(params.copy(), "", cfg.seed, meta)
    return snapshot, log


def _pretrain_eval(params, dataset, model_cfg, cfg, aux, heldout) -> dict:
    """Held-out matching AUC (unmasked inputs) and masked-token accuracy."""
    items = [i for i in _pretrain_items(dataset, cfg, 10_000) if i.scene_id in heldout]
    if not items:
        return {"heldout_auc": float("nan"), "heldout_mlm_acc": float("nan")}
    singles = [i for i in items if not i.is_pair]
    scores, labels, mlm_hits, mlm_total = [], [], 0, 0
    with nn.no_grad():
        for lo in range(0, len(items), cfg.batch_size):
            chunk = items[lo : lo + cfg.batch_size]
            rng = nn.derive_rng(cfg.seed, "pretrain-eval-mask", lo)
            batch, mlm, _, _ = _encode_pretrain_batch(
                chunk, dataset.pretrain.features, model_cfg, cfg.mask_prob, rng
            )
            states = _encoder_states(params, batch, model_cfg)
            rows, cols, targets = mlm
            h = states[rows, cols]
            mlm_logits = (h @ nn.transpose(params["text_embeddings/token_table"])) + aux["pretrain_aux/mlm_bias"]
            mlm_hits += int((np.argmax(mlm_logits.data, axis=1) == targets).sum())
            mlm_total += len(targets)
        for lo in range(0, len(singles), cfg.batch_size):
            chunk = singles[lo : lo + cfg.batch_size]
            batch, _, match_labels, _ = _encode_pretrain_batch(
                chunk, dataset.pretrain.features, model_cfg, 0.0,
                nn.derive_rng(cfg.seed, "unused"), do_mask=False,
            )
            states = _encoder_states(params, batch, model_cfg)
            logits = _match_logits(states, batch, aux).data
            scores.extend((logits[:, 1] - logits[:, 0]).tolist())
            labels.extend(match_labels.tolist())
    return {
        "heldout_auc": _rank_auc(np.array(scores), np.array(labels)),
        "heldout_mlm_acc": mlm_hits / max(mlm_total, 1),
    }


def _rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    order = np.argsort(np.concatenate([pos, neg]), kind="stable")
    ranks = np.empty(len(order))
    ranks[order] = np.arange(1, len(order) + 1)
    # average ranks over ties
    allscores = np.concatenate([pos, neg])
    for s in np.unique(allscores):
        sel = allscores == s
        ranks[sel] = ranks[sel].mean()
    r_pos = ranks[: len(pos)].sum()
    u = r_pos - len(pos) * (len(pos) + 1) / 2
    return float(u / (len(pos) * len(neg)))
