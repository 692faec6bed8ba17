"""Synthetic corpora for offline testing, emitted in the same JSON shape as
the real datasets so the whole pipeline runs on them unchanged.

Two tasks:

* ``numbers`` — each context hides exactly one number token among filler
  words; the answer is that number. Start and end positions are both
  learnable from token identity alone.
* ``brackets`` — each context is a run of ``open <words> close`` segments;
  answers are whole bracketed spans. The correct end for a span depends on
  where its start is, which separates conditional decoding from
  independent start/end decoding.
"""
from __future__ import annotations

import json

import numpy as np

_FILLER = [
    "amber", "basin", "cedar", "drift", "ember", "fjord", "glade", "harbor",
    "inlet", "juniper", "kernel", "lagoon", "marsh", "nectar", "orchard",
    "pebble", "quarry", "ridge", "summit", "thicket", "umber", "valley",
    "willow", "yonder", "zephyr", "meadow", "tundra", "grove", "prairie",
    "canyon",
]

_CONTENT = [
    "falcon", "otter", "lynx", "heron", "badger", "viper", "stork", "bison",
    "crane", "dingo", "egret", "ferret", "gecko", "hyena", "ibis", "jackal",
    "koala", "lemur", "marten", "newt", "ocelot", "puffin", "quail", "raven",
    "shrew", "tapir", "urchin", "vole", "wombat", "yak", "zebra", "alpaca",
    "beetle", "condor", "dugong", "eland", "fossa", "gibbon", "hoopoe",
    "impala", "jerboa", "kestrel", "loris", "macaw", "numbat", "oryx",
    "pangolin", "quokka", "rhea", "serval", "tamarin", "uakari", "vicuna",
    "walrus", "xerus", "yabby", "zorilla", "addax", "bongo", "caracal",
    "dikdik", "echidna", "fulmar", "gannet", "hornbill", "indri",
]


def _join_with_offsets(tokens: list[str]) -> tuple[str, list[int]]:
    """Single-space join plus the character offset of each token."""
    offsets = []
    pos = 0
    for i, t in enumerate(tokens):
        if i > 0:
            pos += 1
        offsets.append(pos)
        pos += len(t)
    return " ".join(tokens), offsets


def make_numbers_dataset(
    n_contexts: int,
    seed: int = 0,
    min_len: int = 18,
    max_len: int = 24,
    n_numbers: int = 30,
) -> dict:
    """One hidden number token per context; the question names two filler
    words from the same context so questions differ across contexts."""
    rng = np.random.default_rng(seed)
    numbers = [str(10 + i) for i in range(n_numbers)]
    paragraphs = []
    for ci in range(n_contexts):
        length = int(rng.integers(min_len, max_len + 1))
        tokens = [str(x) for x in rng.choice(_FILLER, size=length)]
        num = numbers[int(rng.integers(len(numbers)))]
        pos = int(rng.integers(0, length))
        tokens[pos] = num
        context, offsets = _join_with_offsets(tokens)
        fillers = [t for t in tokens if not t.isdigit()]
        picks = rng.choice(len(fillers), size=2, replace=False)
        question = (
            f"what number is hidden near {fillers[int(picks[0])]} "
            f"and {fillers[int(picks[1])]}"
        )
        paragraphs.append(
            {
                "context": context,
                "qas": [
                    {
                        "id": f"num-{seed}-{ci}",
                        "question": question,
                        "answers": [{"text": num, "answer_start": offsets[pos]}],
                    }
                ],
            }
        )
    return {
        "version": "toy-numbers",
        "data": [{"title": "numbers", "paragraphs": paragraphs}],
    }


def make_brackets_dataset(
    n_contexts: int,
    seed: int = 0,
    brackets_per_context: int = 28,
    content_len: tuple[int, int] = (1, 2),
    filler_len: tuple[int, int] = (0, 2),
    questions_per_context: int | None = None,
) -> dict:
    """Contexts of ``open <content> close`` segments separated by filler.

    Each bracket's content words are distinct within its context, so the
    gold strings are unambiguous. One question per bracket (or a random
    subset of ``questions_per_context`` brackets).
    """
    if brackets_per_context * content_len[1] > len(_CONTENT):
        raise ValueError(
            f"at most {len(_CONTENT) // content_len[1]} brackets per context "
            "with distinct content words"
        )
    rng = np.random.default_rng(seed)
    paragraphs = []
    qid = 0
    for _ in range(n_contexts):
        tokens: list[str] = []
        spans = []  # (first token idx, last token idx, content words)
        content_pool = list(rng.permutation(_CONTENT))
        for _ in range(brackets_per_context):
            n_fill = int(rng.integers(filler_len[0], filler_len[1] + 1))
            tokens.extend(str(x) for x in rng.choice(_FILLER, size=n_fill))
            n_content = int(rng.integers(content_len[0], content_len[1] + 1))
            content = [content_pool.pop() for _ in range(n_content)]
            first = len(tokens)
            tokens.append("open")
            tokens.extend(content)
            tokens.append("close")
            spans.append((first, len(tokens) - 1, content))
        context, offsets = _join_with_offsets(tokens)
        chosen = range(len(spans))
        if questions_per_context is not None:
            chosen = sorted(
                int(i)
                for i in rng.choice(
                    len(spans),
                    size=min(questions_per_context, len(spans)),
                    replace=False,
                )
            )
        qas = []
        for i in chosen:
            first, last, content = spans[i]
            answer = " ".join(tokens[first : last + 1])
            qas.append(
                {
                    "id": f"br-{seed}-{qid}",
                    "question": "which span talks about " + " ".join(content),
                    "answers": [{"text": answer, "answer_start": offsets[first]}],
                }
            )
            qid += 1
        paragraphs.append({"context": context, "qas": qas})
    return {
        "version": "toy-brackets",
        "data": [{"title": "brackets", "paragraphs": paragraphs}],
    }


def write_dataset(data: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False)
