"""Shared sequence encoder: token + position + segment embeddings followed by
self-attention blocks. One parameter set serves single sequences and
(context, candidate) pairs, so both towers of the siamese setup literally
share weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn_core
from .corpus import CLS_ID, SEP_ID
from .errors import ConfigError, ShapeMismatch, TooLong, UnknownTokenId
from .nn_core import AttentionParams, ParamGroup


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_positions: int = 514
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )


@dataclass
class PackedInput:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return len(self.token_ids)


def pack_single(seq, max_positions: int = 514) -> PackedInput:
    """[CLS] seq [SEP], all segment 0, mask true everywhere."""
    seq = list(seq)
    if len(seq) > max_positions - 2:
        raise TooLong(f"sequence of {len(seq)} tokens exceeds {max_positions - 2}")
    ids = np.array([CLS_ID] + seq + [SEP_ID], dtype=np.int64)
    return PackedInput(ids, np.zeros(len(ids), dtype=np.int64), np.ones(len(ids), dtype=bool))


def pack_pair(
    first, second, max_positions: int = 514, truncate_first: bool = True
) -> PackedInput:
    """[CLS] first [SEP] second [SEP]; second sequence and trailing SEP at
    segment 1. Overflow truncates the first sequence from the right."""
    first, second = list(first), list(second)
    budget = max_positions - 3 - len(second)
    if len(first) > budget:
        if not truncate_first or budget < 0:
            raise TooLong(
                f"pair of {len(first)}+{len(second)} tokens exceeds {max_positions - 3}"
            )
        first = first[:budget]
    ids = np.array([CLS_ID] + first + [SEP_ID] + second + [SEP_ID], dtype=np.int64)
    segments = np.zeros(len(ids), dtype=np.int64)
    segments[len(first) + 2 :] = 1
    return PackedInput(ids, segments, np.ones(len(ids), dtype=bool))


@dataclass
class LayerParams:
    attn: AttentionParams
    ln1_g: ParamGroup
    ln1_b: ParamGroup
    ff_w1: ParamGroup
    ff_b1: ParamGroup
    ff_w2: ParamGroup
    ff_b2: ParamGroup
    ln2_g: ParamGroup
    ln2_b: ParamGroup

    def groups(self) -> list[ParamGroup]:
        return self.attn.groups() + [
            self.ln1_g, self.ln1_b,
            self.ff_w1, self.ff_b1, self.ff_w2, self.ff_b2,
            self.ln2_g, self.ln2_b,
        ]


@dataclass
class EncoderParams:
    cfg: EncoderConfig
    tok_emb: ParamGroup
    pos_emb: ParamGroup
    seg_emb: ParamGroup
    layers: list[LayerParams] = field(default_factory=list)

    def groups(self) -> list[ParamGroup]:
        out = [self.tok_emb, self.pos_emb, self.seg_emb]
        for layer in self.layers:
            out.extend(layer.groups())
        return out


def init_encoder_params(
    cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "enc."
) -> EncoderParams:
    """Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains."""
    d, h = cfg.d_model, cfg.d_ff

    def w(name, rows, cols):
        return ParamGroup(prefix + name, rng.normal(0.0, 0.02, size=(rows, cols)))

    def zeros(name, rows, cols):
        return ParamGroup(prefix + name, np.zeros((rows, cols)))

    def ones(name, cols):
        return ParamGroup(prefix + name, np.ones((1, cols)))

    layers = []
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        attn = AttentionParams(
            wq=w(p + "attn.wq", d, d), wk=w(p + "attn.wk", d, d),
            wv=w(p + "attn.wv", d, d), wo=w(p + "attn.wo", d, d),
            bq=zeros(p + "attn.bq", 1, d), bk=zeros(p + "attn.bk", 1, d),
            bv=zeros(p + "attn.bv", 1, d), bo=zeros(p + "attn.bo", 1, d),
        )
        layers.append(
            LayerParams(
                attn=attn,
                ln1_g=ones(p + "ln1.g", d), ln1_b=zeros(p + "ln1.b", 1, d),
                ff_w1=w(p + "ff.w1", d, h), ff_b1=zeros(p + "ff.b1", 1, h),
                ff_w2=w(p + "ff.w2", h, d), ff_b2=zeros(p + "ff.b2", 1, d),
                ln2_g=ones(p + "ln2.g", d), ln2_b=zeros(p + "ln2.b", 1, d),
            )
        )
    return EncoderParams(
        cfg=cfg,
        tok_emb=w("tok_emb", cfg.vocab_size, d),
        pos_emb=w("pos_emb", cfg.max_positions, d),
        seg_emb=w("seg_emb", 2, d),
        layers=layers,
    )


def encoder_params_from_groups(
    cfg: EncoderConfig, by_name: dict[str, ParamGroup], prefix: str = "enc."
) -> EncoderParams:
    """Reassemble encoder params from named checkpoint groups."""

    def take(name: str, rows: int, cols: int) -> ParamGroup:
        g = by_name.get(prefix + name)
        if g is None:
            raise ShapeMismatch(f"checkpoint missing group {prefix + name!r}")
        if g.value.shape != (rows, cols):
            raise ShapeMismatch(
                f"group {g.name!r} has shape {g.value.shape}, expected {(rows, cols)}"
            )
        return g

    d, h = cfg.d_model, cfg.d_ff
    layers = []
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        attn = AttentionParams(
            wq=take(p + "attn.wq", d, d), wk=take(p + "attn.wk", d, d),
            wv=take(p + "attn.wv", d, d), wo=take(p + "attn.wo", d, d),
            bq=take(p + "attn.bq", 1, d), bk=take(p + "attn.bk", 1, d),
            bv=take(p + "attn.bv", 1, d), bo=take(p + "attn.bo", 1, d),
        )
        layers.append(
            LayerParams(
                attn=attn,
                ln1_g=take(p + "ln1.g", 1, d), ln1_b=take(p + "ln1.b", 1, d),
                ff_w1=take(p + "ff.w1", d, h), ff_b1=take(p + "ff.b1", 1, h),
                ff_w2=take(p + "ff.w2", h, d), ff_b2=take(p + "ff.b2", 1, d),
                ln2_g=take(p + "ln2.g", 1, d), ln2_b=take(p + "ln2.b", 1, d),
            )
        )
    return EncoderParams(
        cfg=cfg,
        tok_emb=take("tok_emb", cfg.vocab_size, d),
        pos_emb=take("pos_emb", cfg.max_positions, d),
        seg_emb=take("seg_emb", 2, d),
        layers=layers,
    )


def encode_with_grad(
    inp: PackedInput,
    params: EncoderParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
):
    """Forward pass returning (H, backward); backward(dH) accumulates grads."""
    cfg = params.cfg
    ids = np.asarray(inp.token_ids, dtype=np.int64)
    n = len(ids)
    if n > cfg.max_positions:
        raise TooLong(f"packed length {n} exceeds max_positions {cfg.max_positions}")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= cfg.vocab_size:
        raise UnknownTokenId(f"token id outside [0, {cfg.vocab_size})")
    if len(inp.segment_ids) != n or len(inp.mask) != n:
        raise ShapeMismatch("segment/mask length must match token length")
    rate = cfg.dropout_rate if train else 0.0
    if rate > 0 and rng is None:
        raise ValueError("training-mode encode needs an rng for dropout")

    tok, back_tok = nn_core.embedding_lookup(params.tok_emb, ids)
    pos, back_pos = nn_core.embedding_lookup(params.pos_emb, np.arange(n))
    seg, back_seg = nn_core.embedding_lookup(params.seg_emb, inp.segment_ids)
    h = tok + pos + seg
    h, back_drop0 = nn_core.dropout(h, rate, rng) if rate > 0 else (h, None)

    backs = []
    for layer in params.layers:
        a, back_attn = nn_core.multi_head_self_attention(
            h, layer.attn, cfg.n_heads, inp.mask
        )
        a, back_da = nn_core.dropout(a, rate, rng) if rate > 0 else (a, None)
        h1, back_ln1 = nn_core.layer_norm(h + a, layer.ln1_g, layer.ln1_b)
        f1, back_f1 = nn_core.affine(h1, layer.ff_w1, layer.ff_b1)
        g1, back_g1 = nn_core.gelu(f1)
        f2, back_f2 = nn_core.affine(g1, layer.ff_w2, layer.ff_b2)
        f2, back_df = nn_core.dropout(f2, rate, rng) if rate > 0 else (f2, None)
        h2, back_ln2 = nn_core.layer_norm(h1 + f2, layer.ln2_g, layer.ln2_b)
        backs.append((back_attn, back_da, back_ln1, back_f1, back_g1, back_f2, back_df, back_ln2))
        h = h2

    def backward(dh: np.ndarray) -> None:
        for back_attn, back_da, back_ln1, back_f1, back_g1, back_f2, back_df, back_ln2 in reversed(backs):
            dsum2 = back_ln2(dh)
            df2 = back_df(dsum2) if back_df else dsum2
            dg1 = back_f2(df2)
            df1 = back_g1(dg1)
            dh1 = back_f1(df1) + dsum2
            dsum1 = back_ln1(dh1)
            da = back_da(dsum1) if back_da else dsum1
            dh = back_attn(da) + dsum1
        if back_drop0:
            dh = back_drop0(dh)
        back_tok(dh)
        back_pos(dh)
        back_seg(dh)

    return h, backward


def encode(
    inp: PackedInput,
    params: EncoderParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-token embeddings, shape (packed length, d_model)."""
    h, _ = encode_with_grad(inp, params, train=train, rng=rng)
    return h
