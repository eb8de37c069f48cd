"""Single-stream multimodal transformer with named parameter groups.

Text tokens and object slots share one encoder. The sequence is
[CLS] (+ qtype, colon) + question tokens + [SEP] + count token + object
slots; object slots carry no positional embedding, so the visual input is
set-structured. Classification reads the final [CLS] state through a
Linear or Deep head. Parameters are partitioned into the named groups that
freeze/reset operations act on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import nn
from .data.corpus import QuestionRecord
from .data.languages import qtype_prefix
from .data.scenes import VisualFeatures
from .data.vocab import CLS, PAD, QMARK, SEP, Vocabulary

GROUPS = (
    "text_embeddings",
    "position_embeddings",
    "segment_embeddings",
    "backbone",
    "visual_projections",
    "head_trans",
    "head_weight",
    "head_bias",
)

MODEL_PRESETS = {"small": {"layers": 2}, "base": {"layers": 4}}

_NEG_INF = -1e9


class HeadKind(str, Enum):
    LINEAR = "linear"
    DEEP = "deep"
    DEEP_NO_LN = "deep-no-ln"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 0  # 0 -> 4 * d_model
    vocab_size: int = 0  # filled from the dataset vocabulary
    max_text_len: int = 24
    max_objects: int = 8
    d_v: int = 32
    d_h: int = 64
    head_dropout: float = 0.5
    n_classes: int = 20

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        for name in ("d_model", "layers", "heads", "max_text_len", "max_objects", "d_v", "d_h", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def ffn(self) -> int:
        return self.ffn_dim if self.ffn_dim else 4 * self.d_model

    @property
    def n_positions(self) -> int:
        # CLS + qtype + colon + text + SEP + count slot
        return 3 + self.max_text_len + 1 + 1


class ParameterSet:
    """All trainable tensors, each in exactly one named group."""

    def __init__(self):
        self._groups: dict[str, dict[str, nn.Tensor]] = {g: {} for g in GROUPS}

    def add(self, group: str, name: str, tensor: nn.Tensor) -> nn.Tensor:
        if group not in self._groups:
            raise KeyError(f"unknown parameter group {group!r}")
        if name in self._groups[group]:
            raise KeyError(f"duplicate parameter {group}/{name}")
        tensor.name = f"{group}/{name}"
        self._groups[group][name] = tensor
        return tensor

    def group(self, group: str) -> dict[str, nn.Tensor]:
        return self._groups[group]

    def __getitem__(self, qualified: str) -> nn.Tensor:
        group, name = qualified.split("/", 1)
        return self._groups[group][name]

    def named(self) -> dict[str, nn.Tensor]:
        out = {}
        for group, tensors in self._groups.items():
            for name, t in tensors.items():
                out[f"{group}/{name}"] = t
        return out

    def trainable(self, frozen_groups=()) -> dict[str, nn.Tensor]:
        frozen = set(frozen_groups)
        unknown = frozen - set(GROUPS)
        if unknown:
            raise KeyError(f"unknown groups in freeze mask: {sorted(unknown)}")
        return {
            f"{group}/{name}": t
            for group, tensors in self._groups.items()
            if group not in frozen
            for name, t in tensors.items()
        }

    def copy(self) -> "ParameterSet":
        dup = ParameterSet()
        for group, tensors in self._groups.items():
            for name, t in tensors.items():
                dup.add(group, name, nn.Tensor(t.data.copy(), requires_grad=True))
        return dup

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.named().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], groups=None) -> None:
        """Overwrite (a subset of groups of) this set from raw arrays, bitwise."""
        wanted = set(GROUPS if groups is None else groups)
        for key, t in self.named().items():
            group = key.split("/", 1)[0]
            if group not in wanted:
                continue
            if key not in arrays:
                raise KeyError(f"missing parameter {key!r} in source arrays")
            if arrays[key].shape != t.data.shape:
                raise ValueError(f"shape mismatch for {key!r}")
            t.data = arrays[key].copy()

    def save(self, path, meta: dict | None = None) -> None:
        nn.save_tensors(path, self.arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple["ParameterSet", dict]:
        arrays, meta = nn.load_tensors(path)
        ps = cls()
        for key, arr in arrays.items():
            group, name = key.split("/", 1)
            ps.add(group, name, nn.Tensor(arr.copy(), requires_grad=True))
        return ps, meta


def build_model(cfg: ModelConfig, head: HeadKind, seed) -> ParameterSet:
    """Initialize all parameter groups; deterministic in the seed.

    Weight matrices use fan-in scaling (1/sqrt(fan_in)); at this width the
    common fixed 0.02 leaves attention logits so flat that the visual pathway
    never enters the circuit within a desk-scale step budget. Embedding
    tables stay at 0.02 (the post-embedding LayerNorm sets their scale).
    """
    if cfg.vocab_size < 1:
        raise ValueError("vocab_size must be set from the dataset vocabulary")
    rng = nn.derive_rng(seed, "model-init")
    emb_std = 0.02
    d = cfg.d_model
    fan = 1.0 / np.sqrt(d)
    ps = ParameterSet()

    ps.add("text_embeddings", "token_table", nn.normal_init((cfg.vocab_size, d), emb_std, rng))
    ps.add("position_embeddings", "pos_table", nn.normal_init((cfg.n_positions, d), emb_std, rng))
    ps.add("segment_embeddings", "seg_table", nn.normal_init((2, d), emb_std, rng))

    ps.add("backbone", "emb_ln_gain", nn.ones_init((d,)))
    ps.add("backbone", "emb_ln_bias", nn.zeros_init((d,)))
    for l in range(cfg.layers):
        p = f"layer{l}"
        for proj in ("q", "k", "v", "o"):
            ps.add("backbone", f"{p}.attn_w{proj}", nn.normal_init((d, d), fan, rng))
            ps.add("backbone", f"{p}.attn_b{proj}", nn.zeros_init((d,)))
        ps.add("backbone", f"{p}.ln1_gain", nn.ones_init((d,)))
        ps.add("backbone", f"{p}.ln1_bias", nn.zeros_init((d,)))
        ps.add("backbone", f"{p}.ffn_w1", nn.normal_init((d, cfg.ffn), fan, rng))
        ps.add("backbone", f"{p}.ffn_b1", nn.zeros_init((cfg.ffn,)))
        ps.add("backbone", f"{p}.ffn_w2", nn.normal_init((cfg.ffn, d), 1.0 / np.sqrt(cfg.ffn), rng))
        ps.add("backbone", f"{p}.ffn_b2", nn.zeros_init((d,)))
        ps.add("backbone", f"{p}.ln2_gain", nn.ones_init((d,)))
        ps.add("backbone", f"{p}.ln2_bias", nn.zeros_init((d,)))

    ps.add("visual_projections", "feat_w", nn.normal_init((cfg.d_v, d), 1.0 / np.sqrt(cfg.d_v), rng))
    ps.add("visual_projections", "feat_b", nn.zeros_init((d,)))
    ps.add("visual_projections", "spatial_w", nn.normal_init((5, d), 1.0 / np.sqrt(5), rng))
    ps.add("visual_projections", "spatial_b", nn.zeros_init((d,)))
    ps.add("visual_projections", "count_table", nn.normal_init((cfg.max_objects + 1, d), emb_std, rng))

    init_head(ps, cfg, head, rng)
    return ps


def init_head(ps: ParameterSet, cfg: ModelConfig, head: HeadKind, seed) -> None:
    """Fill head_trans / head_weight / head_bias (used at build and stage-2 reinit)."""
    rng = seed if isinstance(seed, np.random.Generator) else nn.derive_rng(seed, "head-init")
    d, dh, c = cfg.d_model, cfg.d_h, cfg.n_classes
    head = HeadKind(head)
    if head is HeadKind.LINEAR:
        ps.add("head_weight", "w", nn.normal_init((d, c), 0.02, rng))
        ps.add("head_bias", "b", nn.zeros_init((c,)))
        return
    ps.add("head_trans", "w1", nn.orthogonal_init(d, dh, rng))
    ps.add("head_trans", "b1", nn.zeros_init((dh,)))
    if head is HeadKind.DEEP:
        ps.add("head_trans", "ln_gain", nn.ones_init((dh,)))
        ps.add("head_trans", "ln_bias", nn.zeros_init((dh,)))
    ps.add("head_weight", "w", nn.normal_init((dh, c), 0.02, rng))
    ps.add("head_bias", "b", nn.zeros_init((c,)))


def fresh_head_trans(ps: ParameterSet, cfg: ModelConfig, head: HeadKind, seed) -> None:
    """Re-initialize only the transformation network, in place."""
    head = HeadKind(head)
    if head is HeadKind.LINEAR:
        ps.group("head_trans").clear()
        return
    rng = nn.derive_rng(seed, "head-reinit")
    group = ps.group("head_trans")
    group.clear()
    ps.add("head_trans", "w1", nn.orthogonal_init(cfg.d_model, cfg.d_h, rng))
    ps.add("head_trans", "b1", nn.zeros_init((cfg.d_h,)))
    if head is HeadKind.DEEP:
        ps.add("head_trans", "ln_gain", nn.ones_init((cfg.d_h,)))
        ps.add("head_trans", "ln_bias", nn.zeros_init((cfg.d_h,)))


# -- batch assembly --------------------------------------------------------------


@dataclass
class Batch:
    """Encoded model inputs. ``base_*`` fields keep the unablated originals so
    ablations are idempotent (they always derive from base, never stack)."""

    token_ids: np.ndarray  # (B, T) int64, [CLS] (+qtype :), body, [SEP], PAD...
    text_mask: np.ndarray  # (B, T) 1.0 on real tokens
    pos_ids: np.ndarray  # (B, T) int64
    feats: np.ndarray  # (B, M, d_v)
    spatial: np.ndarray  # (B, M, 5)
    obj_mask: np.ndarray  # (B, M)
    counts: np.ndarray  # (B,) int64
    labels: np.ndarray | None = None
    ablation: str = "none"
    base_token_ids: np.ndarray = field(default=None, repr=False)
    base_text_mask: np.ndarray = field(default=None, repr=False)
    base_pos_ids: np.ndarray = field(default=None, repr=False)
    base_feats: np.ndarray = field(default=None, repr=False)
    base_spatial: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.base_token_ids is None:
            self.base_token_ids = self.token_ids
            self.base_text_mask = self.text_mask
            self.base_pos_ids = self.pos_ids
            self.base_feats = self.feats
            self.base_spatial = self.spatial

    def __len__(self) -> int:
        return self.token_ids.shape[0]


ABLATIONS = ("none", "text-only-?", "zero-visual")


def encode_batch(
    items: list[QuestionRecord],
    features: dict[str, VisualFeatures],
    cfg: ModelConfig,
    vocab: Vocabulary,
    with_qtype: bool,
    ablation: str = "none",
) -> Batch:
    """Assemble padded model inputs for a list of records from one split."""
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    bsz = len(items)
    prefix_len = 2 if with_qtype else 0
    body_width = max(len(r.token_ids) for r in items)
    if prefix_len + body_width > cfg.max_text_len:
        raise ValueError(
            f"text length {prefix_len + body_width} exceeds max_text_len={cfg.max_text_len}"
        )
    width = 1 + prefix_len + body_width + 1  # CLS + prefix + body + SEP
    token_ids = np.full((bsz, width), PAD, dtype=np.int64)
    text_mask = np.zeros((bsz, width))
    pos_ids = np.tile(np.arange(width, dtype=np.int64), (bsz, 1))
    max_obj = max(features[r.scene_id].object_count for r in items)
    feats = np.zeros((bsz, max_obj, cfg.d_v))
    spatial = np.zeros((bsz, max_obj, 5))
    obj_mask = np.zeros((bsz, max_obj))
    counts = np.zeros(bsz, dtype=np.int64)
    labels = np.zeros(bsz, dtype=np.int64)

    for i, r in enumerate(items):
        seq = [CLS]
        if with_qtype:
            seq.extend(qtype_prefix(r.qtype, vocab))
        seq.extend(r.token_ids)
        seq.append(SEP)
        token_ids[i, : len(seq)] = seq
        text_mask[i, : len(seq)] = 1.0
        vf = features[r.scene_id]
        n = vf.object_count
        feats[i, :n] = vf.features
        spatial[i, :n] = vf.spatial
        obj_mask[i, :n] = 1.0
        counts[i] = min(n, cfg.max_objects)
        labels[i] = r.answer

    batch = Batch(token_ids, text_mask, pos_ids, feats, spatial, obj_mask, counts, labels)
    if ablation == "text-only-?":
        return ablate_text_to_placeholder(batch)
    if ablation == "zero-visual":
        return ablate_zero_visual(batch)
    return batch


def ablate_text_to_placeholder(batch: Batch) -> Batch:
    """Replace the text region with the single '?' token (visual untouched)."""
    bsz = batch.base_token_ids.shape[0]
    token_ids = np.full((bsz, 3), PAD, dtype=np.int64)
    token_ids[:, 0] = CLS
    token_ids[:, 1] = QMARK
    token_ids[:, 2] = SEP
    text_mask = np.ones((bsz, 3))
    pos_ids = np.tile(np.arange(3, dtype=np.int64), (bsz, 1))
    return replace(
        batch,
        token_ids=token_ids,
        text_mask=text_mask,
        pos_ids=pos_ids,
        feats=batch.base_feats,
        spatial=batch.base_spatial,
        ablation="text-only-?",
    )


def ablate_zero_visual(batch: Batch) -> Batch:
    """Zero object feature and spatial vectors; the count token is preserved."""
    return replace(
        batch,
        token_ids=batch.base_token_ids,
        text_mask=batch.base_text_mask,
        pos_ids=batch.base_pos_ids,
        feats=np.zeros_like(batch.base_feats),
        spatial=np.zeros_like(batch.base_spatial),
        ablation="zero-visual",
    )


# -- forward pass ----------------------------------------------------------------


def _attention(x, params, prefix, mask_bias, cfg):
    b, length, d = x.shape
    h = cfg.heads
    hd = d // h

    def heads_view(t):
        return nn.transpose(nn.reshape(t, (b, length, h, hd)), (0, 2, 1, 3))

    q = heads_view(nn.affine(x, params[f"backbone/{prefix}.attn_wq"], params[f"backbone/{prefix}.attn_bq"]))
    k = heads_view(nn.affine(x, params[f"backbone/{prefix}.attn_wk"], params[f"backbone/{prefix}.attn_bk"]))
    v = heads_view(nn.affine(x, params[f"backbone/{prefix}.attn_wv"], params[f"backbone/{prefix}.attn_bv"]))
    scores = nn.matmul(q, nn.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
    att = nn.softmax(scores + mask_bias)
    ctx = nn.reshape(nn.transpose(nn.matmul(att, v), (0, 2, 1, 3)), (b, length, d))
    return nn.affine(ctx, params[f"backbone/{prefix}.attn_wo"], params[f"backbone/{prefix}.attn_bo"])


def forward(
    ps: ParameterSet,
    batch: Batch,
    cfg: ModelConfig,
    head: HeadKind,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> nn.Tensor:
    """Logits (B, n_classes). Dropout is active only when ``train`` is True."""
    head = HeadKind(head)
    if train and cfg.head_dropout > 0 and head is not HeadKind.LINEAR and rng is None:
        raise ValueError("training forward needs an rng for dropout")
    params = ps.named()
    d = cfg.d_model

    tok = nn.embedding(params["text_embeddings/token_table"], batch.token_ids)
    pos = nn.embedding(params["position_embeddings/pos_table"], batch.pos_ids)
    seg = params["segment_embeddings/seg_table"]
    text = tok + pos + nn.reshape(seg[0], (1, 1, d))

    count_vec = nn.embedding(params["visual_projections/count_table"], batch.counts)
    count_pos = nn.reshape(
        params["position_embeddings/pos_table"][cfg.n_positions - 1], (1, 1, d)
    )
    count = (
        nn.reshape(count_vec, (len(batch), 1, d))
        + count_pos
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
    mask_bias = ((1.0 - key_mask) * _NEG_INF)[:, None, None, :]

    for l in range(cfg.layers):
        p = f"layer{l}"
        x = nn.layer_norm(
            x + _attention(x, params, p, mask_bias, cfg),
            params[f"backbone/{p}.ln1_gain"],
            params[f"backbone/{p}.ln1_bias"],
        )
        ff = nn.affine(
            nn.gelu(nn.affine(x, params[f"backbone/{p}.ffn_w1"], params[f"backbone/{p}.ffn_b1"])),
            params[f"backbone/{p}.ffn_w2"],
            params[f"backbone/{p}.ffn_b2"],
        )
        x = nn.layer_norm(
            x + ff, params[f"backbone/{p}.ln2_gain"], params[f"backbone/{p}.ln2_bias"]
        )

    cls_state = x[:, 0, :]
    if head is HeadKind.LINEAR:
        hidden = cls_state
    else:
        hidden = nn.gelu(nn.affine(cls_state, params["head_trans/w1"], params["head_trans/b1"]))
        hidden = nn.dropout(hidden, cfg.head_dropout, rng, train)
        if head is HeadKind.DEEP:
            hidden = nn.layer_norm(hidden, params["head_trans/ln_gain"], params["head_trans/ln_bias"])
    return nn.affine(hidden, params["head_weight/w"], params["head_bias/b"])


def predict(ps: ParameterSet, batch: Batch, cfg: ModelConfig, head: HeadKind) -> np.ndarray:
    """Argmax class per item; ties break to the lowest class index."""
    with nn.no_grad():
        logits = forward(ps, batch, cfg, head, train=False)
    return np.argmax(logits.data, axis=1)


@dataclass
class Model:
    """Bundle of config, head kind, qtype-conditioning flag, and parameters."""

    cfg: ModelConfig
    head: HeadKind
    with_qtype: bool
    params: ParameterSet

    def forward(self, batch: Batch, train: bool = False, rng=None) -> nn.Tensor:
        return forward(self.params, batch, self.cfg, self.head, train, rng)

    def predict(self, batch: Batch) -> np.ndarray:
        return predict(self.params, batch, self.cfg, self.head)

    def meta(self) -> dict:
        return {
            "d_model": self.cfg.d_model,
            "layers": self.cfg.layers,
            "head": str(self.head.value),
            "with_qtype": self.with_qtype,
        }
