import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from effqa import corpus
from effqa.corpus import (
    CLS_ID,
    PAD_ID,
    SEP_ID,
    UNK_ID,
    CorpusConfig,
    GoldSpan,
    Token,
    TokenizedContext,
    Vocab,
    align_answer,
    build_vocab,
    load_squad_json,
    prepare_dataset,
    read_cache,
    tokenize,
    write_cache,
)
from effqa.errors import (
    AlignmentFailure,
    EmptyCorpus,
    MalformedJson,
    MisalignedAnswer,
    SchemaViolation,
)
from effqa.evalkit import normalize_answer


def squad_payload(paragraphs):
    return {"data": [{"title": "t", "paragraphs": paragraphs}]}


def write_json(tmp_path, payload, name="d.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


SMALL = squad_payload(
    [
        {
            "context": "The cat sat on the mat.",
            "qas": [
                {
                    "id": "q1",
                    "question": "Who sat?",
                    "answers": [{"text": "cat", "answer_start": 4}],
                },
                {
                    "id": "q2",
                    "question": "Where did the cat sit?",
                    "answers": [{"text": "the mat", "answer_start": 15}],
                },
            ],
        }
    ]
)


class TestTokenize:
    def test_hello_world(self):
        assert tokenize("Hello, world") == [
            Token("hello", 0, 5),
            Token(",", 5, 6),
            Token("world", 7, 12),
        ]

    def test_empty(self):
        assert tokenize("") == []

    def test_punctuation_split(self):
        assert tokenize("a-b") == [Token("a", 0, 1), Token("-", 1, 2), Token("b", 2, 3)]

    @given(st.text(max_size=80))
    def test_offsets_cover_non_whitespace(self, text):
        toks = tokenize(text)
        joined = "".join(text[t.char_start : t.char_end] for t in toks)
        assert joined == "".join(text.split())
        # spans strictly increasing and non-overlapping
        for a, b in zip(toks, toks[1:]):
            assert a.char_end <= b.char_start
        for t in toks:
            assert t.char_start < t.char_end

    @given(st.text(max_size=80))
    def test_idempotent_on_detokenized(self, text):
        once = [t.text for t in tokenize(text)]
        twice = [t.text for t in tokenize(corpus.detokenize(once))]
        assert once == twice


class TestLoadSquadJson:
    def test_counts_preserved(self, tmp_path):
        ds = load_squad_json(write_json(tmp_path, SMALL))
        assert len(ds.articles) == 1
        assert len(ds.articles[0].paragraphs) == 1
        assert ds.num_questions == 2

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(MalformedJson):
            load_squad_json(path)

    def test_schema_violation_names_path(self, tmp_path):
        payload = {"data": [{"title": "t", "paragraphs": [{"context": "c", "qas": [{"id": "q"}]}]}]}
        with pytest.raises(SchemaViolation) as e:
            load_squad_json(write_json(tmp_path, payload))
        assert "data[0].paragraphs[0].qas[0]" in str(e.value)

    def test_misaligned_answer_raises(self, tmp_path):
        payload = squad_payload(
            [
                {
                    "context": "abc def",
                    "qas": [
                        {
                            "id": "q1",
                            "question": "what?",
                            "answers": [{"text": "def", "answer_start": 0}],
                        }
                    ],
                }
            ]
        )
        with pytest.raises(MisalignedAnswer):
            load_squad_json(write_json(tmp_path, payload))

    def test_misaligned_answer_skipped_with_flag(self, tmp_path):
        payload = squad_payload(
            [
                {
                    "context": "abc def",
                    "qas": [
                        {
                            "id": "q1",
                            "question": "what?",
                            "answers": [{"text": "def", "answer_start": 0}],
                        },
                        {
                            "id": "q2",
                            "question": "what else?",
                            "answers": [{"text": "def", "answer_start": 4}],
                        },
                    ],
                }
            ]
        )
        ds = load_squad_json(write_json(tmp_path, payload), skip_bad_answers=True)
        assert ds.num_questions == 1

    def test_duplicate_qid(self, tmp_path):
        payload = squad_payload(
            [
                {
                    "context": "abc",
                    "qas": [
                        {"id": "q1", "question": "a?", "answers": [{"text": "abc", "answer_start": 0}]},
                        {"id": "q1", "question": "b?", "answers": [{"text": "abc", "answer_start": 0}]},
                    ],
                }
            ]
        )
        with pytest.raises(SchemaViolation):
            load_squad_json(write_json(tmp_path, payload))

    def test_version_key_ignored(self, tmp_path):
        payload = dict(SMALL, version="1.1")
        assert load_squad_json(write_json(tmp_path, payload)).num_questions == 2


def ctx_from_words(text, vocab=None):
    toks = tokenize(text)
    vocab = vocab or Vocab(
        {t: i + 4 for i, t in enumerate(dict.fromkeys(tt.text for tt in toks))},
        [],
    )
    ids = [vocab.token_to_id.get(t.text, UNK_ID) for t in toks]
    return TokenizedContext(ids, toks, len(toks), "c0", text)


def brute_force_align(ctx, answer_start, answer_end):
    """Oracle: smallest token span whose char range covers the answer range
    clipped to token characters; None when no token overlaps."""
    overlapping = [
        i
        for i, t in enumerate(ctx.surface)
        if t.char_end > answer_start and t.char_start < answer_end
    ]
    if not overlapping:
        return None
    return min(overlapping), max(overlapping)


class TestAlignAnswer:
    def test_exact_single_token(self):
        ctx = ctx_from_words("the cat sat")
        gold = align_answer(ctx, "cat", 4)
        assert (gold.start, gold.end, gold.answer_text) == (1, 1, "cat")

    def test_two_token_cover(self):
        ctx = ctx_from_words("the cat sat")
        gold = align_answer(ctx, "cat sat", 4)
        assert (gold.start, gold.end) == (1, 2)

    def test_partial_cover_mid_token(self):
        # derived by the minimal-cover rule: chars [5, 7) lie inside "cat"
        ctx = ctx_from_words("the cat sat")
        gold = align_answer(ctx, "at", 5)
        assert (gold.start, gold.end) == brute_force_align(ctx, 5, 7) == (1, 1)

    def test_no_cover_raises(self):
        ctx = ctx_from_words("the cat sat")
        with pytest.raises(AlignmentFailure):
            align_answer(ctx, "dog", 100)

    @given(st.data())
    def test_matches_brute_force(self, data):
        words = data.draw(
            st.lists(st.sampled_from(["ox", "emu", "crow", "a"]), min_size=1, max_size=8)
        )
        text = " ".join(words)
        ctx = ctx_from_words(text)
        start = data.draw(st.integers(0, max(0, len(text) - 1)))
        length = data.draw(st.integers(1, max(1, len(text) - start)))
        want = brute_force_align(ctx, start, start + length)
        if want is None:
            with pytest.raises(AlignmentFailure):
                align_answer(ctx, text[start : start + length], start)
        else:
            gold = align_answer(ctx, text[start : start + length], start)
            assert (gold.start, gold.end) == want


class TestBuildVocab:
    def make_raw(self, context):
        return corpus.RawDataset(
            (
                corpus.Article(
                    "t",
                    (
                        corpus.Paragraph(
                            context,
                            (corpus.QA("q1", context.split()[0], ()),),
                        ),
                    ),
                ),
            )
        )

    def test_min_freq_two(self):
        # corpus text "a a b" plus question "a": token a appears 4x, b once
        vocab = build_vocab(self.make_raw("a a b"), min_freq=2)
        assert vocab.size == 5
        assert "a" in vocab.token_to_id and "b" not in vocab.token_to_id

    def test_min_freq_one(self):
        vocab = build_vocab(self.make_raw("a a b"), min_freq=1)
        assert vocab.size == 6

    def test_special_ids_fixed(self):
        vocab = build_vocab(self.make_raw("a a b"), min_freq=1)
        assert vocab.token_to_id["<pad>"] == PAD_ID == 0
        assert vocab.token_to_id["<unk>"] == UNK_ID == 1
        assert vocab.token_to_id["<cls>"] == CLS_ID == 2
        assert vocab.token_to_id["<sep>"] == SEP_ID == 3

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpus):
            build_vocab(self.make_raw("a b c"), min_freq=99)

    def test_frequency_then_lexicographic_order(self):
        vocab = build_vocab(self.make_raw("b b c a a"), min_freq=1)
        # b: 2 in context + 1 as the question = 3; a: 2; c: 1
        assert vocab.id_to_token[4:] == ["b", "a", "c"]

    @given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=30))
    def test_deterministic(self, letters):
        raw = self.make_raw(" ".join(letters))
        v1 = build_vocab(raw, 1)
        v2 = build_vocab(raw, 1)
        assert v1.id_to_token == v2.id_to_token

    def test_save_load_round_trip(self, tmp_path):
        vocab = build_vocab(self.make_raw("a a b"), min_freq=1)
        vocab.save(tmp_path / "v.json")
        loaded = Vocab.load(tmp_path / "v.json")
        assert loaded.token_to_id == vocab.token_to_id
        assert loaded.id_to_token == vocab.id_to_token


class TestPrepareAndCache:
    def test_round_trip_normalized_gold(self, tmp_path):
        raw = load_squad_json(write_json(tmp_path, SMALL))
        vocab = build_vocab(raw)
        ds = prepare_dataset(raw, vocab)
        assert len(ds.questions) == 2
        for q in ds.questions:
            ctx = ds.context_of(q)
            span = ctx.span_text(q.gold.start, q.gold.end)
            assert normalize_answer(span) == normalize_answer(q.gold.answer_text)

    def test_truncation_drops_far_gold(self, tmp_path):
        text = " ".join(["pad"] * 30) + " needle"
        payload = squad_payload(
            [
                {
                    "context": text,
                    "qas": [
                        {
                            "id": "q1",
                            "question": "what?",
                            "answers": [{"text": "needle", "answer_start": text.index("needle")}],
                        }
                    ],
                }
            ]
        )
        raw = load_squad_json(write_json(tmp_path, payload))
        vocab = build_vocab(raw)
        ds = prepare_dataset(raw, vocab, CorpusConfig(max_context_tokens=10))
        assert ds.questions == []

    def test_cache_round_trip(self, tmp_path):
        raw = load_squad_json(write_json(tmp_path, SMALL))
        vocab = build_vocab(raw)
        ds = prepare_dataset(raw, vocab)
        cache = tmp_path / "cache.jsonl"
        write_cache(ds, cache)
        back = read_cache(cache)
        assert [q.qid for q in back.questions] == [q.qid for q in ds.questions]
        for a, b in zip(ds.questions, back.questions):
            assert a.gold == b.gold
            assert a.question.tokens == b.question.tokens
            assert a.gold_texts == b.gold_texts
        for cid, ctx in ds.contexts.items():
            assert back.contexts[cid].tokens == ctx.tokens
            assert back.contexts[cid].surface == ctx.surface
            assert back.contexts[cid].text == ctx.text

    def test_cache_records_have_required_fields(self, tmp_path):
        raw = load_squad_json(write_json(tmp_path, SMALL))
        vocab = build_vocab(raw)
        ds = prepare_dataset(raw, vocab)
        cache = tmp_path / "cache.jsonl"
        write_cache(ds, cache)
        for line in cache.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            assert set(rec) >= {"qid", "ctx_id", "ctx_tokens", "q_tokens", "gold"}
            assert set(rec["gold"]) == {"start", "end", "text"}


@settings(max_examples=40)
@given(
    st.lists(
        st.sampled_from(["sun", "moon", "tide", "dune", "fern"]),
        min_size=1,
        max_size=12,
    ),
    st.data(),
)
def test_gold_round_trip_on_word_corpora(words, data):
    """Any whole-word answer slice aligns to a span whose surface text
    normalizes to the answer."""
    text = " ".join(words)
    ctx = ctx_from_words(text)
    i = data.draw(st.integers(0, len(words) - 1))
    j = data.draw(st.integers(i, len(words) - 1))
    answer = " ".join(words[i : j + 1])
    start = ctx.surface[i].char_start
    gold = align_answer(ctx, answer, start)
    assert normalize_answer(ctx.span_text(gold.start, gold.end)) == normalize_answer(answer)
