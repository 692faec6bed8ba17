"""Siamese encoding of answer candidates and questions into one vector space.

The candidate tower packs (context, candidate) as a two-segment input; the
question tower packs the question alone. Both run through the SAME encoder
and the SAME projection head, then mean-pool. Training is a softmax
cross-entropy over each example's own candidate set.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import evalkit, nn_core
from .corpus import ProcessedDataset, TokenizedContext, TokenizedQuestion
from .encoder import (
    EncoderConfig,
    EncoderParams,
    encode_with_grad,
    init_encoder_params,
    pack_pair,
    pack_single,
)
from .errors import (
    CandidateTooLong,
    DimensionMismatch,
    IndexOutOfRange,
)
from .extractor import BeamConfig, ExtractorParams, SpanCandidate, extract_beam
from .nn_core import AdamWConfig, ParamGroup

log = logging.getLogger(__name__)

POOL_MODES = ("pair_all", "second_segment")


@dataclass
class DualEncoderParams:
    enc: EncoderParams
    proj_w: ParamGroup
    proj_b: ParamGroup
    pool: str = "pair_all"

    @property
    def dim(self) -> int:
        return self.proj_w.value.shape[1]

    def groups(self) -> list[ParamGroup]:
        return self.enc.groups() + [self.proj_w, self.proj_b]


def init_dual_encoder_params(
    enc_cfg: EncoderConfig,
    rng: np.random.Generator,
    proj_dim: int = 64,
    pool: str = "pair_all",
) -> DualEncoderParams:
    if pool not in POOL_MODES:
        raise ValueError(f"pool must be one of {POOL_MODES}")
    return DualEncoderParams(
        enc=init_encoder_params(enc_cfg, rng, prefix="enc."),
        proj_w=ParamGroup("proj.w", rng.normal(0.0, 0.02, size=(enc_cfg.d_model, proj_dim))),
        proj_b=ParamGroup("proj.b", np.zeros((1, proj_dim))),
        pool=pool,
    )


def save_dual_encoder_params(params: DualEncoderParams, path) -> None:
    nn_core.save_checkpoint(path, params.groups())


def load_dual_encoder_params(
    path, enc_cfg: EncoderConfig, proj_dim: int = 64, pool: str = "pair_all"
) -> DualEncoderParams:
    from .encoder import encoder_params_from_groups
    from .errors import ShapeMismatch

    by_name = {g.name: g for g in nn_core.load_checkpoint(path)}
    proj_w = by_name.get("proj.w")
    proj_b = by_name.get("proj.b")
    if proj_w is None or proj_b is None:
        raise ShapeMismatch("checkpoint missing projection head groups")
    if proj_w.value.shape != (enc_cfg.d_model, proj_dim) or proj_b.value.shape != (1, proj_dim):
        raise ShapeMismatch(
            f"projection head shape {proj_w.value.shape} does not match "
            f"d_model {enc_cfg.d_model} -> proj_dim {proj_dim}"
        )
    return DualEncoderParams(
        enc=encoder_params_from_groups(enc_cfg, by_name),
        proj_w=proj_w,
        proj_b=proj_b,
        pool=pool,
    )


@dataclass
class PhraseVector:
    values: np.ndarray
    ctx_id: str
    start: int
    end: int
    text: str


@dataclass
class QuestionVector:
    values: np.ndarray
    qid: str = ""


@dataclass
class PiqaTrainExample:
    question: TokenizedQuestion
    ctx: TokenizedContext
    candidates: list[SpanCandidate]
    gold_index: int


def _project_and_pool(h, params: DualEncoderParams, pool_rows: np.ndarray):
    """Projection head on every token embedding, then mean over pool rows."""
    proj, back_proj = nn_core.affine(h, params.proj_w, params.proj_b)
    vec = proj[pool_rows].mean(axis=0)

    def backward(dvec: np.ndarray) -> np.ndarray:
        dproj = np.zeros_like(proj)
        dproj[pool_rows] = dvec / len(pool_rows)
        return back_proj(dproj)

    return vec, backward


def _encode_candidate_with_grad(
    ctx: TokenizedContext,
    cand: SpanCandidate,
    params: DualEncoderParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
):
    if not 0 <= cand.start <= cand.end < ctx.m:
        raise IndexOutOfRange(f"candidate ({cand.start}, {cand.end}) outside context")
    cand_tokens = ctx.tokens[cand.start : cand.end + 1]
    max_pos = params.enc.cfg.max_positions
    if len(cand_tokens) + 3 > max_pos:
        raise CandidateTooLong(f"candidate of {len(cand_tokens)} tokens cannot be packed")
    packed = pack_pair(ctx.tokens, cand_tokens, max_pos)
    h, back_enc = encode_with_grad(packed, params.enc, train=train, rng=rng)
    if params.pool == "second_segment":
        pool_rows = np.flatnonzero(packed.segment_ids == 1)
    else:
        pool_rows = np.flatnonzero(packed.mask)
    vec, back_pool = _project_and_pool(h, params, pool_rows)

    def backward(dvec: np.ndarray) -> None:
        back_enc(back_pool(dvec))

    return vec, backward


def encode_candidate(
    ctx: TokenizedContext, cand: SpanCandidate, params: DualEncoderParams
) -> PhraseVector:
    """Dense representation of one candidate span within its context."""
    vec, _ = _encode_candidate_with_grad(ctx, cand, params)
    return PhraseVector(vec, ctx.ctx_id, cand.start, cand.end, ctx.span_text(cand.start, cand.end))


def _encode_question_with_grad(
    q: TokenizedQuestion,
    params: DualEncoderParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
):
    if q.n == 0:
        raise IndexOutOfRange("cannot encode an empty question")
    packed = pack_single(q.tokens, params.enc.cfg.max_positions)
    h, back_enc = encode_with_grad(packed, params.enc, train=train, rng=rng)
    pool_rows = np.flatnonzero(packed.mask)
    vec, back_pool = _project_and_pool(h, params, pool_rows)

    def backward(dvec: np.ndarray) -> None:
        back_enc(back_pool(dvec))

    return vec, backward


def encode_question(q: TokenizedQuestion, params: DualEncoderParams) -> QuestionVector:
    vec, _ = _encode_question_with_grad(q, params)
    return QuestionVector(vec, q.qid)


def similarity(g: QuestionVector, h: PhraseVector) -> float:
    """Raw inner product; no normalization."""
    if g.values.shape != h.values.shape:
        raise DimensionMismatch(
            f"question dim {g.values.shape} vs phrase dim {h.values.shape}"
        )
    return float(np.dot(g.values, h.values))


def contrastive_loss(similarities: np.ndarray, gold_index: int) -> tuple[float, np.ndarray]:
    """-sim[gold] + log sum exp(sim); gradient wrt the similarity vector."""
    return nn_core.softmax_cross_entropy(np.asarray(similarities, dtype=np.float64), gold_index)


def piqa_loss(
    q: TokenizedQuestion,
    candidates: list[PhraseVector],
    gold_index: int,
    params: DualEncoderParams,
) -> float:
    """Contrastive loss of the gold candidate against the other candidates
    of the same example (gold term included in the log-sum)."""
    if not candidates:
        raise IndexOutOfRange("piqa_loss needs at least one candidate")
    if not 0 <= gold_index < len(candidates):
        raise IndexOutOfRange(f"gold index {gold_index} outside candidate list")
    g = encode_question(q, params)
    sims = np.array([similarity(g, h) for h in candidates])
    loss, _ = contrastive_loss(sims, gold_index)
    return loss


def piqa_example_grads(
    example: PiqaTrainExample,
    params: DualEncoderParams,
    scale: float = 1.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> float:
    """Forward + backward for one training example; accumulates parameter
    gradients for both towers (scaled) and returns the loss."""
    qvec, back_q = _encode_question_with_grad(example.question, params, train, rng)
    cand_encs = [
        _encode_candidate_with_grad(example.ctx, c, params, train, rng)
        for c in example.candidates
    ]
    sims = np.array([np.dot(qvec, vec) for vec, _ in cand_encs])
    loss, dsims = contrastive_loss(sims, example.gold_index)
    dq = np.zeros_like(qvec)
    for ds, (vec, back_c) in zip(dsims, cand_encs):
        dq += ds * vec
        back_c(scale * ds * qvec)
    back_q(scale * dq)
    return loss


@dataclass
class TrainingSetBuild:
    examples: list[PiqaTrainExample]
    retention: float


def build_training_set(
    dataset: ProcessedDataset,
    extractor_params: ExtractorParams,
    n_train: int = 60,
    beam_cfg: BeamConfig = BeamConfig(s=50, e=2),
    extract_fn=extract_beam,
) -> TrainingSetBuild:
    """Extract candidates per question and keep only examples whose gold
    answer appears among them (first match by rank)."""
    examples: list[PiqaTrainExample] = []
    total = 0
    cand_cache: dict[str, list[SpanCandidate]] = {}
    for q in dataset.questions:
        total += 1
        if n_train == 0:
            continue
        ctx = dataset.context_of(q)
        if q.ctx_id not in cand_cache:
            cand_cache[q.ctx_id] = extract_fn(ctx, extractor_params, beam_cfg, n_train)
        cands = cand_cache[q.ctx_id]
        gold_norm = evalkit.normalize_answer(q.gold.answer_text)
        gold_index = None
        for i, c in enumerate(sorted(cands, key=lambda c: c.rank)):
            if evalkit.normalize_answer(ctx.span_text(c.start, c.end)) == gold_norm:
                gold_index = i
                break
        if gold_index is None:
            continue
        examples.append(
            PiqaTrainExample(q.question, ctx, sorted(cands, key=lambda c: c.rank), gold_index)
        )
    retention = len(examples) / total if total else 0.0
    log.info("training set: kept %d of %d examples (retention %.3f)", len(examples), total, retention)
    return TrainingSetBuild(examples, retention)


@dataclass(frozen=True)
class DualTrainConfig:
    epochs: int = 5
    micro_batch: int = 4
    grad_accum: int = 8
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    warmup_frac: float = 0.0
    proj_dim: int = 64
    pool: str = "pair_all"
    dropout: bool = True
    seed: int = 0


@dataclass
class DualTrainResult:
    params: DualEncoderParams
    train_losses: list[float] = field(default_factory=list)
    dev_ems: list[float] = field(default_factory=list)


def _dev_em(
    dev_examples: list[PiqaTrainExample], params: DualEncoderParams
) -> float:
    """Retrieval exact-match over held-out examples: does the top-similarity
    candidate normalize to the gold string?"""
    if not dev_examples:
        return 0.0
    hits = 0
    for ex in dev_examples:
        g = encode_question(ex.question, params)
        vecs = [encode_candidate(ex.ctx, c, params) for c in ex.candidates]
        sims = np.array([similarity(g, h) for h in vecs])
        best = int(np.argmax(sims))
        pred = evalkit.normalize_answer(vecs[best].text)
        gold = evalkit.normalize_answer(vecs[ex.gold_index].text)
        hits += int(pred == gold)
    return hits / len(dev_examples)


def train_dual_encoder(
    train_examples: list[PiqaTrainExample],
    cfg: DualTrainConfig,
    enc_cfg: EncoderConfig,
    dev_examples: list[PiqaTrainExample] | None = None,
) -> DualTrainResult:
    """AdamW with gradient accumulation on the per-example contrastive loss.

    Negatives for each question are its own context's other candidates.
    Returns the epoch checkpoint with the best dev retrieval EM (the last
    epoch when no dev slice is given).
    """
    rng = np.random.default_rng(cfg.seed)
    params = init_dual_encoder_params(enc_cfg, rng, cfg.proj_dim, cfg.pool)
    result = DualTrainResult(params=params)
    if cfg.epochs == 0:
        return result
    if not train_examples:
        raise IndexOutOfRange("empty training set")
    dev_examples = dev_examples or []

    groups = params.groups()
    effective_batch = cfg.micro_batch * cfg.grad_accum
    micro_per_epoch = (len(train_examples) + cfg.micro_batch - 1) // cfg.micro_batch
    steps_per_epoch = (micro_per_epoch + cfg.grad_accum - 1) // cfg.grad_accum
    total_steps = steps_per_epoch * cfg.epochs
    best_em = -1.0
    best_params = None
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_examples))
        epoch_loss = 0.0
        micro_done = 0
        for i in range(0, len(order), cfg.micro_batch):
            micro = order[i : i + cfg.micro_batch]
            for j in micro:
                epoch_loss += piqa_example_grads(
                    train_examples[j],
                    params,
                    scale=1.0 / effective_batch,
                    train=cfg.dropout,
                    rng=rng,
                )
            micro_done += 1
            if micro_done % cfg.grad_accum == 0 or i + cfg.micro_batch >= len(order):
                lr = nn_core.linear_lr(cfg.learning_rate, step, total_steps, cfg.warmup_frac)
                nn_core.adamw_step(
                    groups,
                    AdamWConfig(learning_rate=lr, weight_decay=cfg.weight_decay),
                )
                step += 1
        mean_loss = epoch_loss / len(train_examples)
        result.train_losses.append(mean_loss)
        if dev_examples:
            em = _dev_em(dev_examples, params)
            result.dev_ems.append(em)
            log.info("dual encoder epoch %d: loss %.4f, dev EM %.3f", epoch, mean_loss, em)
            # ties keep the later epoch: train loss is still improving
            if em >= best_em:
                best_em = em
                best_params = copy.deepcopy(params)
        else:
            log.info("dual encoder epoch %d: loss %.4f", epoch, mean_loss)
    if best_params is not None:
        result.params = best_params
    return result


def dump_vectors(path, vectors: list[PhraseVector]) -> None:
    """Debug JSONL dump of phrase vectors."""
    import json

    with open(path, "w", encoding="utf-8") as f:
        for v in vectors:
            f.write(
                json.dumps(
                    {
                        "ctx_id": v.ctx_id,
                        "start": v.start,
                        "end": v.end,
                        "text": v.text,
                        "vec": [float(x) for x in v.values],
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
