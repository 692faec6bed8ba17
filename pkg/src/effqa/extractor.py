"""Question-agnostic answer-candidate extraction.

Start positions are scored from token embeddings; end positions are scored
conditioned on each chosen start (the token embedding concatenated with the
start embedding), and spans come out of a start-beam x end-beam search.
A classic baseline with independent start/end heads is kept for recall
comparisons.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import evalkit, nn_core
from .corpus import GoldSpan, ProcessedDataset, TokenizedContext
from .encoder import EncoderConfig, EncoderParams, encode_with_grad, init_encoder_params, pack_single
from .errors import (
    ConfigError,
    EmptyContext,
    GoldOutOfWindow,
    IndexOutOfRange,
    ShapeMismatch,
)
from .nn_core import AdamWConfig, ParamGroup

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BeamConfig:
    s: int
    e: int
    max_answer_tokens: int = 30

    def __post_init__(self):
        if self.s < 1 or self.e < 1:
            raise ConfigError("beam sizes must be >= 1")
        if self.max_answer_tokens < 1:
            raise ConfigError("max_answer_tokens must be >= 1")


@dataclass(frozen=True)
class SpanCandidate:
    start: int
    end: int
    score: float
    rank: int


@dataclass
class ExtractorParams:
    enc: EncoderParams
    start_w: ParamGroup
    start_b: ParamGroup
    end_w: ParamGroup
    end_b: ParamGroup
    cls_end_w: ParamGroup
    cls_end_b: ParamGroup

    def groups(self) -> list[ParamGroup]:
        return self.enc.groups() + [
            self.start_w, self.start_b,
            self.end_w, self.end_b,
            self.cls_end_w, self.cls_end_b,
        ]


def init_extractor_params(
    enc_cfg: EncoderConfig, rng: np.random.Generator
) -> ExtractorParams:
    d = enc_cfg.d_model
    return ExtractorParams(
        enc=init_encoder_params(enc_cfg, rng, prefix="enc."),
        start_w=ParamGroup("start_head.w", rng.normal(0.0, 0.02, size=(d, 1))),
        start_b=ParamGroup("start_head.b", np.zeros((1, 1))),
        end_w=ParamGroup("end_head.w", rng.normal(0.0, 0.02, size=(2 * d, 1))),
        end_b=ParamGroup("end_head.b", np.zeros((1, 1))),
        cls_end_w=ParamGroup("classic_end_head.w", rng.normal(0.0, 0.02, size=(d, 1))),
        cls_end_b=ParamGroup("classic_end_head.b", np.zeros((1, 1))),
    )


def save_extractor_params(params: ExtractorParams, path) -> None:
    nn_core.save_checkpoint(path, params.groups())


def load_extractor_params(path, enc_cfg: EncoderConfig) -> ExtractorParams:
    from .encoder import encoder_params_from_groups

    by_name = {g.name: g for g in nn_core.load_checkpoint(path)}
    d = enc_cfg.d_model

    def take(name: str, rows: int, cols: int) -> ParamGroup:
        g = by_name.get(name)
        if g is None:
            raise ShapeMismatch(f"checkpoint missing group {name!r}")
        if g.value.shape != (rows, cols):
            raise ShapeMismatch(
                f"group {name!r} has shape {g.value.shape}, expected {(rows, cols)}"
            )
        return g

    return ExtractorParams(
        enc=encoder_params_from_groups(enc_cfg, by_name),
        start_w=take("start_head.w", d, 1),
        start_b=take("start_head.b", 1, 1),
        end_w=take("end_head.w", 2 * d, 1),
        end_b=take("end_head.b", 1, 1),
        cls_end_w=take("classic_end_head.w", d, 1),
        cls_end_b=take("classic_end_head.b", 1, 1),
    )


def count_naive_spans(m: int) -> int:
    """Number of (start, end) spans in a length-m context: m(m+1)/2."""
    if m < 0:
        raise ValueError("context length must be >= 0")
    return m * (m + 1) // 2


def encode_context(
    ctx: TokenizedContext,
    params: ExtractorParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
):
    """Encode the context alone; returns (H over the m context tokens, backward).

    The returned backward maps dH for context rows back through the packed
    sequence (CLS/SEP rows receive zero upstream gradient).
    """
    packed = pack_single(ctx.tokens, params.enc.cfg.max_positions)
    h_full, back_full = encode_with_grad(packed, params.enc, train=train, rng=rng)
    h_ctx = h_full[1 : 1 + ctx.m]

    def backward(dh_ctx: np.ndarray) -> None:
        dh_full = np.zeros_like(h_full)
        dh_full[1 : 1 + ctx.m] = dh_ctx
        back_full(dh_full)

    return h_ctx, backward


def _start_logits(h: np.ndarray, params: ExtractorParams):
    y, back = nn_core.affine(h, params.start_w, params.start_b)
    return y.ravel(), back


def score_starts(h: np.ndarray, params: ExtractorParams) -> np.ndarray:
    """Log-probabilities over the m context positions."""
    if h.ndim != 2 or h.shape[1] != params.start_w.value.shape[0]:
        raise ShapeMismatch(f"H of shape {h.shape} does not match start head")
    logits, _ = _start_logits(h, params)
    return nn_core.log_softmax(logits)


def _end_window(start: int, m: int, max_answer_tokens: int) -> tuple[int, int]:
    return start, min(start + max_answer_tokens, m)


def _end_logits_conditional(h: np.ndarray, start: int, params: ExtractorParams):
    m = h.shape[0]
    features = np.concatenate([h, np.broadcast_to(h[start], h.shape)], axis=1)
    y, back = nn_core.affine(features, params.end_w, params.end_b)

    def backward(dlogits: np.ndarray) -> np.ndarray:
        dfeat = back(dlogits[:, None] if dlogits.ndim == 1 else dlogits)
        d = h.shape[1]
        dh = dfeat[:, :d].copy()
        dh[start] += dfeat[:, d:].sum(axis=0)
        return dh

    return y.ravel(), backward


def score_ends_conditional(
    h: np.ndarray, start: int, params: ExtractorParams, max_answer_tokens: int = 30
) -> np.ndarray:
    """Log-probabilities over end positions, restricted to the feasible
    window [start, start + max_answer_tokens); -inf outside."""
    m = h.shape[0]
    if not 0 <= start < m:
        raise IndexOutOfRange(f"start {start} outside [0, {m})")
    logits, _ = _end_logits_conditional(h, start, params)
    lo, hi = _end_window(start, m, max_answer_tokens)
    out = np.full(m, -np.inf)
    out[lo:hi] = nn_core.log_softmax(logits[lo:hi])
    return out


def _top_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best scores, ties broken by smaller index."""
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def _rank_spans(
    spans: list[tuple[int, int, float]], k: int
) -> list[SpanCandidate]:
    """Deduplicate identical (start, end) pairs, sort by score descending
    with (smaller start, smaller end) tie-break, and keep the top k."""
    best: dict[tuple[int, int], float] = {}
    for s, e, score in spans:
        key = (s, e)
        if key not in best or score > best[key]:
            best[key] = score
    ordered = sorted(best.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))
    return [
        SpanCandidate(s, e, score, rank)
        for rank, ((s, e), score) in enumerate(ordered[:k])
    ]


def beam_from_logits(
    start_logp: np.ndarray,
    end_logp_for: Callable[[int], np.ndarray],
    cfg: BeamConfig,
    k: int,
) -> list[SpanCandidate]:
    """Factorized beam search over precomputed log-probabilities.

    ``end_logp_for(start)`` returns the windowed end log-probabilities
    (length m, -inf outside the feasible window).
    """
    m = len(start_logp)
    starts = _top_indices(start_logp, min(cfg.s, m))
    spans = []
    for s in starts:
        end_logp = end_logp_for(int(s))
        feasible = np.flatnonzero(np.isfinite(end_logp))
        ends = feasible[_top_indices(end_logp[feasible], cfg.e)]
        for e in ends:
            spans.append((int(s), int(e), float(start_logp[s] + end_logp[e])))
    return _rank_spans(spans, k)


def extract_beam(
    ctx: TokenizedContext, params: ExtractorParams, cfg: BeamConfig, k: int
) -> list[SpanCandidate]:
    """Top-s starts, top-e conditional ends per start, top-k spans overall."""
    if k > cfg.s * cfg.e:
        raise ConfigError(f"requested {k} candidates > s*e = {cfg.s * cfg.e}")
    if ctx.m == 0:
        raise EmptyContext("cannot extract from an empty context")
    h, _ = encode_context(ctx, params)
    start_logp = score_starts(h, params)
    return beam_from_logits(
        start_logp,
        lambda s: score_ends_conditional(h, s, params, cfg.max_answer_tokens),
        cfg,
        k,
    )


def classic_from_logits(
    start_logp: np.ndarray,
    end_logp: np.ndarray,
    cfg: BeamConfig,
    k: int,
    mode: str = "optimal",
) -> list[SpanCandidate]:
    """Independent-head decoding from precomputed log-probabilities."""
    m = len(start_logp)
    spans = []
    if mode == "optimal":
        for s in range(m):
            lo, hi = _end_window(s, m, cfg.max_answer_tokens)
            for e in range(lo, hi):
                spans.append((s, e, float(start_logp[s] + end_logp[e])))
    elif mode == "beam":
        starts = _top_indices(start_logp, min(cfg.s, m))
        for s in starts:
            lo, hi = _end_window(int(s), m, cfg.max_answer_tokens)
            window = end_logp[lo:hi]
            ends = lo + _top_indices(window, cfg.e)
            for e in ends:
                spans.append((int(s), int(e), float(start_logp[s] + end_logp[e])))
    else:
        raise ConfigError(f"unknown classic decoding mode {mode!r}")
    return _rank_spans(spans, k)


def extract_classic(
    ctx: TokenizedContext,
    params: ExtractorParams,
    k: int,
    mode: str = "optimal",
    cfg: BeamConfig = BeamConfig(s=50, e=2),
) -> list[SpanCandidate]:
    """Baseline with start and end likelihoods computed independently."""
    if ctx.m == 0:
        raise EmptyContext("cannot extract from an empty context")
    h, _ = encode_context(ctx, params)
    start_logp = score_starts(h, params)
    end_logits, _ = nn_core.affine(h, params.cls_end_w, params.cls_end_b)
    end_logp = nn_core.log_softmax(end_logits.ravel())
    return classic_from_logits(start_logp, end_logp, cfg, k, mode)


def _loss_with_grad(
    h: np.ndarray,
    gold: GoldSpan,
    params: ExtractorParams,
    max_answer_tokens: int,
    classic_weight: float = 1.0,
    scale: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Teacher-forced loss and its gradient with respect to H.

    The main term is -log P(s*) - log P(e*|s*). The classic end head is
    trained alongside (weighted) so the baseline decoder is supervised on
    the same data. ``scale`` multiplies every accumulated gradient (used for
    batch averaging); the returned loss is unscaled.
    """
    m = h.shape[0]
    start_logits, back_start = _start_logits(h, params)
    loss_s, dlogit_s = nn_core.softmax_cross_entropy(start_logits, gold.start)
    dh = back_start(scale * dlogit_s[:, None])

    end_logits, back_end = _end_logits_conditional(h, gold.start, params)
    lo, hi = _end_window(gold.start, m, max_answer_tokens)
    masked = np.full(m, -np.inf)
    masked[lo:hi] = end_logits[lo:hi]
    loss_e, dlogit_e = nn_core.softmax_cross_entropy(masked, gold.end)
    dh += back_end(scale * dlogit_e[:, None])

    loss = loss_s + loss_e
    if classic_weight > 0.0:
        cls_logits, back_cls = nn_core.affine(h, params.cls_end_w, params.cls_end_b)
        loss_c, dlogit_c = nn_core.softmax_cross_entropy(cls_logits.ravel(), gold.end)
        dh += back_cls(scale * classic_weight * dlogit_c[:, None])
        loss += classic_weight * loss_c
    return loss, dh


def extractor_loss(
    ctx: TokenizedContext,
    gold: GoldSpan,
    params: ExtractorParams,
    max_answer_tokens: int = 30,
) -> float:
    """-log P(s*) - log P(e* | s*), end term conditioned on the gold start."""
    if not 0 <= gold.start <= gold.end < ctx.m:
        raise IndexOutOfRange(f"gold span ({gold.start}, {gold.end}) outside context")
    if gold.end - gold.start + 1 > max_answer_tokens:
        raise GoldOutOfWindow(
            f"gold span of {gold.end - gold.start + 1} tokens exceeds "
            f"max_answer_tokens {max_answer_tokens}"
        )
    h, _ = encode_context(ctx, params)
    loss, _ = _loss_with_grad(h, gold, params, max_answer_tokens, classic_weight=0.0)
    return loss


@dataclass(frozen=True)
class ExtractorTrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.0
    beam: BeamConfig = BeamConfig(s=50, e=2)
    dev_recall_k: int = 10
    dropout: bool = True
    classic_weight: float = 1.0
    seed: int = 0


@dataclass
class TrainResult:
    params: ExtractorParams
    train_losses: list[float] = field(default_factory=list)
    dev_recalls: list[float] = field(default_factory=list)


def _dev_em_recall(
    dataset: ProcessedDataset, dev, params: ExtractorParams, cfg: ExtractorTrainConfig
) -> float:
    k = min(cfg.dev_recall_k, cfg.beam.s * cfg.beam.e)
    cand_texts: list[list[str]] = []
    golds: list[list[str]] = []
    cache: dict[str, list[str]] = {}
    for q in dev:
        if q.ctx_id not in cache:
            ctx = dataset.contexts[q.ctx_id]
            spans = extract_beam(ctx, params, cfg.beam, k)
            cache[q.ctx_id] = [ctx.span_text(c.start, c.end) for c in spans]
        cand_texts.append(cache[q.ctx_id])
        golds.append(q.gold_texts)
    return evalkit.candidate_recall(cand_texts, golds).em_recall


def train_extractor(
    dataset: ProcessedDataset,
    cfg: ExtractorTrainConfig,
    enc_cfg: EncoderConfig,
    dev: list | None = None,
) -> TrainResult:
    """Minibatch AdamW on the teacher-forced span loss.

    Tracks per-epoch mean train loss and dev candidate recall; returns the
    parameters of the best dev epoch (initial parameters when epochs == 0).
    """
    rng = np.random.default_rng(cfg.seed)
    params = init_extractor_params(enc_cfg, rng)
    result = TrainResult(params=params)
    if cfg.epochs == 0:
        return result
    dev = dev if dev is not None else []
    train_qs = [
        q
        for q in dataset.questions
        if q.gold.end - q.gold.start + 1 <= cfg.beam.max_answer_tokens
    ]
    skipped = len(dataset.questions) - len(train_qs)
    if skipped:
        log.warning("skipping %d examples with gold span beyond the end window", skipped)
    if not train_qs:
        raise EmptyContext("no trainable examples")

    opt = AdamWConfig(
        learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    groups = params.groups()
    steps_per_epoch = (len(train_qs) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    best_recall = -1.0
    best_params = None
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_qs))
        epoch_loss = 0.0
        for i in range(0, len(order), cfg.batch_size):
            batch = order[i : i + cfg.batch_size]
            for j in batch:
                q = train_qs[j]
                ctx = dataset.contexts[q.ctx_id]
                h, back = encode_context(
                    ctx, params, train=cfg.dropout, rng=rng
                )
                loss, dh = _loss_with_grad(
                    h,
                    q.gold,
                    params,
                    cfg.beam.max_answer_tokens,
                    cfg.classic_weight,
                    scale=1.0 / len(batch),
                )
                back(dh)
                epoch_loss += loss
            lr = nn_core.linear_lr(
                cfg.learning_rate, step, total_steps, cfg.warmup_frac
            )
            nn_core.adamw_step(
                groups,
                AdamWConfig(
                    learning_rate=lr,
                    beta1=opt.beta1,
                    beta2=opt.beta2,
                    epsilon=opt.epsilon,
                    weight_decay=opt.weight_decay,
                ),
            )
            step += 1
        mean_loss = epoch_loss / len(train_qs)
        result.train_losses.append(mean_loss)
        if dev:
            recall = _dev_em_recall(dataset, dev, params, cfg)
            result.dev_recalls.append(recall)
            log.info(
                "extractor epoch %d: loss %.4f, dev EM-recall@%d %.3f",
                epoch, mean_loss, cfg.dev_recall_k, recall,
            )
            # ties keep the later epoch: train loss is still improving
            if recall >= best_recall:
                best_recall = recall
                best_params = _copy_params(params)
        else:
            log.info("extractor epoch %d: loss %.4f", epoch, mean_loss)
    if best_params is not None:
        result.params = best_params
    return result


def _copy_params(params: ExtractorParams) -> ExtractorParams:
    import copy

    return copy.deepcopy(params)


def dump_candidates(path, per_context: dict[str, tuple[TokenizedContext, list[SpanCandidate]]]) -> None:
    """JSON-lines candidate dump, one record per context, sorted by rank."""
    with open(path, "w", encoding="utf-8") as f:
        for ctx_id, (ctx, cands) in per_context.items():
            rec = {
                "ctx_id": ctx_id,
                "candidates": [
                    {
                        "start": c.start,
                        "end": c.end,
                        "text": ctx.span_text(c.start, c.end),
                        "score": c.score,
                    }
                    for c in sorted(cands, key=lambda c: c.rank)
                ],
            }
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
