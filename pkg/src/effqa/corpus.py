"""Dataset ingestion: SQuAD-v1.1-format JSON loading, offset-tracking
tokenization, gold answer alignment, vocabulary, and the JSONL cache."""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import (
    AlignmentFailure,
    EmptyCorpus,
    MalformedJson,
    MisalignedAnswer,
    SchemaViolation,
)

log = logging.getLogger(__name__)

PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<unk>", "<cls>", "<sep>")

# word runs, or single non-word non-space chars (each punctuation mark alone)
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class Token(NamedTuple):
    text: str
    char_start: int
    char_end: int


@dataclass(frozen=True)
class Answer:
    text: str
    answer_start: int


@dataclass(frozen=True)
class QA:
    qid: str
    question: str
    answers: tuple[Answer, ...]


@dataclass(frozen=True)
class Paragraph:
    context: str
    qas: tuple[QA, ...]


@dataclass(frozen=True)
class Article:
    title: str
    paragraphs: tuple[Paragraph, ...]


@dataclass(frozen=True)
class RawDataset:
    articles: tuple[Article, ...]

    @property
    def num_questions(self) -> int:
        return sum(len(p.qas) for a in self.articles for p in a.paragraphs)

    def all_qas(self):
        for a in self.articles:
            for p in a.paragraphs:
                for qa in p.qas:
                    yield p.context, qa


@dataclass
class TokenizedContext:
    """A context as token ids plus surface forms with original-string offsets."""

    tokens: list[int]
    surface: list[Token]
    m: int
    ctx_id: str = ""
    text: str = ""

    def span_text(self, start: int, end: int) -> str:
        """Original-string slice covering token span [start, end]."""
        return self.text[self.surface[start].char_start : self.surface[end].char_end]


@dataclass
class TokenizedQuestion:
    tokens: list[int]
    n: int
    qid: str = ""


@dataclass(frozen=True)
class GoldSpan:
    start: int
    end: int
    answer_text: str


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: list[str]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, texts) -> list[int]:
        return [self.id(t) for t in texts]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"tokens": self.id_to_token}, f, ensure_ascii=False)

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = json.load(f)["tokens"]
        return cls({t: i for i, t in enumerate(tokens)}, list(tokens))


def tokenize(text: str) -> list[Token]:
    """Lowercased word/punctuation tokens with offsets into the original string."""
    return [
        Token(m.group(0).lower(), m.start(), m.end())
        for m in _TOKEN_RE.finditer(text)
    ]


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


def _require(mapping, key, path):
    if not isinstance(mapping, dict) or key not in mapping:
        raise SchemaViolation(f"missing field {key!r} at {path}")
    return mapping[key]


def load_squad_json(path, skip_bad_answers: bool = False) -> RawDataset:
    """Load a SQuAD-v1.1-shaped JSON file (FQuAD uses the identical schema).

    Misaligned answers (answer_start not matching the context slice) raise
    MisalignedAnswer unless ``skip_bad_answers`` is set, in which case the
    offending QA record is dropped with a warning.
    """
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise MalformedJson(f"{path}: {e}") from e
    data = _require(payload, "data", "$")
    if not isinstance(data, list):
        raise SchemaViolation("field 'data' at $ must be a list")
    articles = []
    seen_qids: set[str] = set()
    for ai, art in enumerate(data):
        apath = f"data[{ai}]"
        title = _require(art, "title", apath)
        paragraphs = []
        for pi, para in enumerate(_require(art, "paragraphs", apath)):
            ppath = f"{apath}.paragraphs[{pi}]"
            context = _require(para, "context", ppath)
            qas = []
            for qi, qa in enumerate(_require(para, "qas", ppath)):
                qpath = f"{ppath}.qas[{qi}]"
                qid = _require(qa, "id", qpath)
                question = _require(qa, "question", qpath)
                if qid in seen_qids:
                    raise SchemaViolation(f"duplicate question id {qid!r} at {qpath}")
                seen_qids.add(qid)
                answers = []
                bad = False
                for xi, ans in enumerate(_require(qa, "answers", qpath)):
                    xpath = f"{qpath}.answers[{xi}]"
                    text = _require(ans, "text", xpath)
                    start = _require(ans, "answer_start", xpath)
                    if context[start : start + len(text)] != text:
                        msg = (
                            f"{xpath}: answer_start {start} does not match "
                            f"answer text {text!r}"
                        )
                        if skip_bad_answers:
                            log.warning("skipping %s", msg)
                            bad = True
                            break
                        raise MisalignedAnswer(msg)
                    answers.append(Answer(text, start))
                if bad:
                    continue
                qas.append(QA(qid, question, tuple(answers)))
            paragraphs.append(Paragraph(context, tuple(qas)))
        articles.append(Article(title, tuple(paragraphs)))
    return RawDataset(tuple(articles))


def tokenize_context(
    text: str, vocab: Vocab, ctx_id: str = "", max_context_tokens: int = 512
) -> TokenizedContext:
    surface = tokenize(text)[:max_context_tokens]
    ids = vocab.encode([t.text for t in surface])
    return TokenizedContext(ids, surface, len(surface), ctx_id, text)


def tokenize_question(
    text: str, vocab: Vocab, qid: str = "", max_question_tokens: int = 64
) -> TokenizedQuestion:
    surface = tokenize(text)[:max_question_tokens]
    if not surface:
        raise SchemaViolation(f"question {qid!r} has no tokens")
    ids = vocab.encode([t.text for t in surface])
    return TokenizedQuestion(ids, len(ids), qid)


def align_answer(
    ctx: TokenizedContext, answer_text: str, answer_start: int
) -> GoldSpan:
    """Minimal token span whose character range covers the answer range.

    Logs a warning when token boundaries only partially cover the range
    (answer begins or ends mid-token).
    """
    if ctx.m == 0:
        raise AlignmentFailure("empty context")
    answer_end = answer_start + len(answer_text)
    start = None
    end = None
    for i, tok in enumerate(ctx.surface):
        if tok.char_end > answer_start and tok.char_start < answer_end:
            if start is None:
                start = i
            end = i
    if start is None:
        raise AlignmentFailure(
            f"answer at chars [{answer_start}, {answer_end}) covers no token "
            f"(context truncated at {ctx.m} tokens?)"
        )
    if (
        ctx.surface[start].char_start != answer_start
        or ctx.surface[end].char_end != answer_end
    ):
        log.warning(
            "partial token cover for answer %r at %d: tokens [%d, %d]",
            answer_text,
            answer_start,
            start,
            end,
        )
    return GoldSpan(start, end, answer_text)


def build_vocab(ds: RawDataset, min_freq: int = 1) -> Vocab:
    """Specials first, then tokens with frequency >= min_freq by descending
    frequency, ties lexicographic."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    for context, qa in ds.all_qas():
        counts.update(t.text for t in tokenize(qa.question))
    for art in ds.articles:
        for para in art.paragraphs:
            counts.update(t.text for t in tokenize(para.context))
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    if not kept:
        raise EmptyCorpus(f"no token reaches min_freq={min_freq}")
    id_to_token = list(SPECIAL_TOKENS) + kept
    return Vocab({t: i for i, t in enumerate(id_to_token)}, id_to_token)


@dataclass
class QuestionRecord:
    """One question joined with its context id, training gold, and all
    acceptable gold strings for evaluation."""

    qid: str
    ctx_id: str
    question: TokenizedQuestion
    gold: GoldSpan
    gold_texts: list[str]


@dataclass
class ProcessedDataset:
    contexts: dict[str, TokenizedContext]
    questions: list[QuestionRecord]

    def context_of(self, q: QuestionRecord) -> TokenizedContext:
        return self.contexts[q.ctx_id]


@dataclass(frozen=True)
class CorpusConfig:
    max_context_tokens: int = 512
    max_question_tokens: int = 64
    min_freq: int = 1
    skip_bad_answers: bool = False


def prepare_dataset(
    raw: RawDataset, vocab: Vocab, cfg: CorpusConfig = CorpusConfig()
) -> ProcessedDataset:
    """Tokenize contexts/questions and align training golds (first answer).

    Questions whose gold answer falls beyond context truncation are dropped
    with a warning. Evaluation keeps every provided answer string.
    """
    contexts: dict[str, TokenizedContext] = {}
    questions: list[QuestionRecord] = []
    ctx_counter = 0
    for art in raw.articles:
        for para in art.paragraphs:
            ctx_id = f"c{ctx_counter}"
            ctx_counter += 1
            ctx = tokenize_context(
                para.context, vocab, ctx_id, cfg.max_context_tokens
            )
            contexts[ctx_id] = ctx
            for qa in para.qas:
                if not qa.answers:
                    log.warning("question %s has no answers; dropped", qa.qid)
                    continue
                first = qa.answers[0]
                try:
                    gold = align_answer(ctx, first.text, first.answer_start)
                except AlignmentFailure:
                    log.warning(
                        "question %s: gold beyond truncated context; dropped",
                        qa.qid,
                    )
                    continue
                q = tokenize_question(
                    qa.question, vocab, qa.qid, cfg.max_question_tokens
                )
                questions.append(
                    QuestionRecord(
                        qa.qid, ctx_id, q, gold, [a.text for a in qa.answers]
                    )
                )
    return ProcessedDataset(contexts, questions)


def write_cache(ds: ProcessedDataset, path) -> None:
    """JSON-lines cache, one record per question.

    Beyond the core fields (qid, ctx_id, ctx_tokens, q_tokens, gold) each
    record carries the context surface so original answer strings survive a
    round trip.
    """
    with open(path, "w", encoding="utf-8") as f:
        for q in ds.questions:
            ctx = ds.contexts[q.ctx_id]
            rec = {
                "qid": q.qid,
                "ctx_id": q.ctx_id,
                "ctx_tokens": list(ctx.tokens),
                "q_tokens": list(q.question.tokens),
                "gold": {
                    "start": q.gold.start,
                    "end": q.gold.end,
                    "text": q.gold.answer_text,
                },
                "golds_all": q.gold_texts,
                "ctx_text": ctx.text,
                "ctx_surface": [[t.text, t.char_start, t.char_end] for t in ctx.surface],
            }
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_cache(path) -> ProcessedDataset:
    contexts: dict[str, TokenizedContext] = {}
    questions: list[QuestionRecord] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedJson(f"{path}:{line_no + 1}: {e}") from e
            ctx_id = rec["ctx_id"]
            if ctx_id not in contexts:
                surface = [Token(t, s, e) for t, s, e in rec["ctx_surface"]]
                contexts[ctx_id] = TokenizedContext(
                    rec["ctx_tokens"], surface, len(surface), ctx_id, rec["ctx_text"]
                )
            gold = GoldSpan(rec["gold"]["start"], rec["gold"]["end"], rec["gold"]["text"])
            q = TokenizedQuestion(rec["q_tokens"], len(rec["q_tokens"]), rec["qid"])
            questions.append(
                QuestionRecord(
                    rec["qid"], ctx_id, q, gold, rec.get("golds_all", [gold.answer_text])
                )
            )
    return ProcessedDataset(contexts, questions)
