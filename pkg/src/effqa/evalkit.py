"""Answer normalization, EM and F1, candidate-set recall, and end-to-end
evaluation where the prediction is the top inner-product search hit."""
from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field

from .errors import EmptyGolds, LengthMismatch

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop whole-word articles, squeeze spaces."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, golds: list[str]) -> int:
    if not golds:
        raise EmptyGolds("exact_match needs at least one gold answer")
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in golds))


def _f1_single(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(pred_tokens)
    recall = num_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1(prediction: str, golds: list[str]) -> float:
    """Token-level F1 with multiset overlap, maxed over gold answers."""
    if not golds:
        raise EmptyGolds("f1 needs at least one gold answer")
    pred_tokens = normalize_answer(prediction).split()
    return max(_f1_single(pred_tokens, normalize_answer(g).split()) for g in golds)


@dataclass
class RecallReport:
    em_recall: float
    f1_max_mean: float
    k: int
    n_questions: int


def candidate_recall(
    candidates_per_question: list[list[str]], golds_per_question: list[list[str]]
) -> RecallReport:
    """Fraction of questions whose gold matches any candidate, plus the mean
    over questions of the best candidate F1."""
    if len(candidates_per_question) != len(golds_per_question):
        raise LengthMismatch(
            f"{len(candidates_per_question)} candidate lists vs "
            f"{len(golds_per_question)} gold lists"
        )
    n = len(golds_per_question)
    if n == 0:
        return RecallReport(0.0, 0.0, 0, 0)
    em_sum = 0
    f1_sum = 0.0
    max_k = 0
    for cands, golds in zip(candidates_per_question, golds_per_question):
        max_k = max(max_k, len(cands))
        if cands:
            em_sum += max(exact_match(c, golds) for c in cands)
            f1_sum += max(f1(c, golds) for c in cands)
    return RecallReport(em_sum / n, f1_sum / n, max_k, n)


@dataclass
class QuestionResult:
    qid: str
    prediction: str
    golds: list[str]
    em: int
    f1: float


@dataclass
class EvalReport:
    exact_match: float
    f1: float
    n_questions: int
    per_question: list[QuestionResult] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "exact_match": self.exact_match,
                "f1": self.f1,
                "n": self.n_questions,
                "per_question": [
                    {
                        "qid": r.qid,
                        "prediction": r.prediction,
                        "golds": r.golds,
                        "em": r.em,
                        "f1": r.f1,
                    }
                    for r in self.per_question
                ],
            },
            ensure_ascii=False,
        )

    def summary(self) -> str:
        return (
            f"{'metric':<14}{'value':>8}\n"
            f"{'-' * 22}\n"
            f"{'exact_match':<14}{self.exact_match:>8.2f}\n"
            f"{'f1':<14}{self.f1:>8.2f}\n"
            f"{'questions':<14}{self.n_questions:>8d}"
        )


def aggregate(results: list[QuestionResult]) -> EvalReport:
    n = len(results)
    if n == 0:
        return EvalReport(0.0, 0.0, 0, [])
    em = 100.0 * sum(r.em for r in results) / n
    f1_mean = 100.0 * sum(r.f1 for r in results) / n
    return EvalReport(em, f1_mean, n, results)


def evaluate_piqa(
    dataset,
    extractor_params,
    dual_params,
    k_eval: int = 100,
    beam_cfg=None,
    encode_cand=None,
    encode_q=None,
) -> EvalReport:
    """Answer every question by top-1 inner-product search over the vectors
    of its own context's extracted candidates.

    ``encode_cand(ctx, cand)`` / ``encode_q(question)`` default to the
    trained dual-encoder towers; tests may inject oracles.
    """
    # imported here: extractor/dual_encoder import this module for metrics
    from . import dual_encoder as de
    from . import extractor as ex
    from . import phrase_index as pi

    if beam_cfg is None:
        beam_cfg = ex.BeamConfig(s=50, e=2)
    if encode_cand is None:
        encode_cand = lambda ctx, cand: de.encode_candidate(ctx, cand, dual_params)
    if encode_q is None:
        encode_q = lambda q: de.encode_question(q, dual_params)

    results = []
    cand_cache: dict[str, list] = {}
    for q in dataset.questions:
        ctx = dataset.context_of(q)
        if q.ctx_id not in cand_cache:
            cand_cache[q.ctx_id] = ex.extract_beam(ctx, extractor_params, beam_cfg, k_eval)
        cands = cand_cache[q.ctx_id]
        vectors = [encode_cand(ctx, c) for c in cands]
        index = pi.build_index(vectors)
        qvec = encode_q(q.question)
        hits = pi.search(index, qvec, top_k=1, ctx_filter=q.ctx_id)
        prediction = hits[0].text if hits else ""
        results.append(
            QuestionResult(
                q.qid,
                prediction,
                list(q.gold_texts),
                exact_match(prediction, q.gold_texts),
                f1(prediction, q.gold_texts),
            )
        )
    return aggregate(results)
