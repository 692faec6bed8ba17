import json

import numpy as np
import pytest

from effqa import corpus, toygen
from effqa.encoder import EncoderConfig


def processed_from_dict(data: dict, min_freq: int = 1, max_context_tokens: int = 512):
    """Build a ProcessedDataset straight from an in-memory dataset dict."""
    raw = _raw_from_dict(data)
    vocab = corpus.build_vocab(raw, min_freq)
    ds = corpus.prepare_dataset(
        raw, vocab, corpus.CorpusConfig(max_context_tokens=max_context_tokens)
    )
    return ds, vocab


def _raw_from_dict(data: dict) -> corpus.RawDataset:
    articles = []
    for art in data["data"]:
        paragraphs = []
        for para in art["paragraphs"]:
            qas = tuple(
                corpus.QA(
                    qa["id"],
                    qa["question"],
                    tuple(corpus.Answer(a["text"], a["answer_start"]) for a in qa["answers"]),
                )
                for qa in para["qas"]
            )
            paragraphs.append(corpus.Paragraph(para["context"], qas))
        articles.append(corpus.Article(art["title"], tuple(paragraphs)))
    return corpus.RawDataset(tuple(articles))


def tiny_encoder_config(vocab_size: int, **kw) -> EncoderConfig:
    base = dict(
        vocab_size=vocab_size, d_model=16, n_layers=1, n_heads=2, d_ff=32,
        max_positions=80, dropout_rate=0.0,
    )
    base.update(kw)
    return EncoderConfig(**base)


@pytest.fixture
def numbers_data():
    ds, vocab = processed_from_dict(toygen.make_numbers_dataset(30, seed=1))
    return ds, vocab


@pytest.fixture
def rng():
    return np.random.default_rng(0)
