"""Built-in sanity suite behind the ``selftest`` subcommand: quick versions
of the oracle and property checks, runnable without any dataset."""
from __future__ import annotations

import math
import os
import tempfile

import numpy as np

from . import corpus, evalkit, nn_core
from .dual_encoder import PhraseVector, QuestionVector, contrastive_loss
from .encoder import EncoderConfig, encode_with_grad, init_encoder_params, pack_pair, pack_single
from .extractor import BeamConfig, beam_from_logits, classic_from_logits
from .nn_core import ParamGroup
from .phrase_index import build_index, load_index, save_index, search

Check = tuple[str, bool, str]


def _enumerate_factorized(start_logp, end_logp_for, max_answer_tokens, k):
    """Independent oracle: score every feasible span, sort, take top k."""
    m = len(start_logp)
    scored = []
    for s in range(m):
        end_logp = end_logp_for(s)
        for e in range(s, min(s + max_answer_tokens, m)):
            if np.isfinite(end_logp[e]):
                scored.append((s, e, float(start_logp[s] + end_logp[e])))
    scored.sort(key=lambda t: (-t[2], t[0], t[1]))
    return [(s, e) for s, e, _ in scored[:k]]


def _windowed_logp(raw: np.ndarray, start: int, window: int) -> np.ndarray:
    m = len(raw)
    out = np.full(m, -np.inf)
    hi = min(start + window, m)
    out[start:hi] = nn_core.log_softmax(raw[start:hi])
    return out


def check_beam_oracle(seeds: int = 20) -> Check:
    window = 5
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(1, 7))
        start_logp = nn_core.log_softmax(rng.normal(size=m))
        raw_end = rng.normal(size=(m, m))
        end_for = lambda s: _windowed_logp(raw_end[s], s, window)
        cfg = BeamConfig(s=m, e=window)
        got = [(c.start, c.end) for c in beam_from_logits(start_logp, end_for, cfg, m * window)]
        want = _enumerate_factorized(start_logp, end_for, window, m * window)
        if got != want:
            return ("beam-oracle", False, f"seed {seed}: {got} != {want}")
    return ("beam-oracle", True, "")


def check_classic_oracle(trials: int = 20) -> Check:
    for seed in range(trials):
        rng = np.random.default_rng(1000 + seed)
        m = int(rng.integers(1, 9))
        window = int(rng.integers(1, m + 1))
        start_logp = nn_core.log_softmax(rng.normal(size=m))
        end_logp = nn_core.log_softmax(rng.normal(size=m))
        cfg = BeamConfig(s=m, e=m, max_answer_tokens=window)
        k = int(rng.integers(1, m * window + 1))
        got = [(c.start, c.end) for c in classic_from_logits(start_logp, end_logp, cfg, k, "optimal")]
        scored = [
            (s, e, float(start_logp[s] + end_logp[e]))
            for s in range(m)
            for e in range(s, min(s + window, m))
        ]
        scored.sort(key=lambda t: (-t[2], t[0], t[1]))
        want = [(s, e) for s, e, _ in scored[:k]]
        if got != want:
            return ("classic-oracle", False, f"seed {seed}: {got} != {want}")
    return ("classic-oracle", True, "")


def check_gradients() -> Check:
    rng = np.random.default_rng(7)
    # affine
    w = ParamGroup("w", rng.normal(size=(4, 3)))
    b = ParamGroup("b", np.zeros((1, 3)))
    x = rng.normal(size=(2, 4))
    t = rng.normal(size=(2, 3))

    def affine_loss():
        y, back = nn_core.affine(x, w, b)
        back(y - t)
        return float(0.5 * ((y - t) ** 2).sum())

    err = nn_core.grad_check(affine_loss, [w, b], max_coords_per_group=6)
    if err > 1e-6:
        return ("gradients", False, f"affine rel err {err:.2e}")

    # one full encoder block
    cfg = EncoderConfig(vocab_size=11, d_model=8, n_layers=1, n_heads=2, d_ff=16,
                        max_positions=12, dropout_rate=0.0)
    params = init_encoder_params(cfg, rng)
    packed = pack_single([4, 5, 6, 7])
    probe = rng.normal(size=(len(packed), cfg.d_model))

    def enc_loss():
        h, back = encode_with_grad(packed, params)
        back(probe)
        return float((h * probe).sum())

    err = nn_core.grad_check(enc_loss, params.groups(), max_coords_per_group=2, seed=3)
    if err > 1e-4:
        return ("gradients", False, f"encoder rel err {err:.2e}")
    return ("gradients", True, "")


def check_loss_identities() -> Check:
    loss, _ = contrastive_loss(np.array([3.7]), 0)
    if loss != 0.0:
        return ("loss-identities", False, f"singleton loss {loss}")
    loss, _ = contrastive_loss(np.array([1.25, 1.25]), 1)
    if abs(loss - math.log(2)) > 1e-12:
        return ("loss-identities", False, f"equal-pair loss {loss}")
    loss, _ = nn_core.softmax_cross_entropy(np.zeros(10), 4)
    if abs(loss - math.log(10)) > 1e-12:
        return ("loss-identities", False, f"uniform loss {loss}")
    return ("loss-identities", True, "")


def check_adamw() -> Check:
    g = ParamGroup("g", np.full((2, 2), 2.0))
    nn_core.adamw_step([g], nn_core.AdamWConfig(learning_rate=0.1, weight_decay=0.1))
    if not np.allclose(g.value, 2.0 * (1 - 0.01), atol=1e-15):
        return ("adamw-decay", False, f"value {g.value.ravel()}")
    return ("adamw-decay", True, "")


def check_index() -> Check:
    rng = np.random.default_rng(11)
    vectors = [
        PhraseVector(rng.normal(size=8), f"c{i % 5}", j, j + 1, f"t{i}-{j}")
        for i in range(5)
        for j in range(40)
    ]
    index = build_index(vectors)
    q = QuestionVector(rng.normal(size=8), "q")
    hits = search(index, q, top_k=10)
    scores = index.vectors.astype(np.float64) @ np.asarray(q.values)
    want = np.argsort(-scores, kind="stable")[:10]
    got = [index.entries.index(h.entry) for h in hits]
    if got != [int(i) for i in want]:
        return ("index-search", False, f"{got} != {list(want)}")
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "x.pqix")
        save_index(index, path)
        loaded = load_index(path)
        if not np.array_equal(
            loaded.vectors.view(np.uint8), index.vectors.view(np.uint8)
        ):
            return ("index-search", False, "round trip not bit-exact")
    return ("index-search", True, "")


def check_metrics() -> Check:
    cases = [
        (evalkit.normalize_answer("The Answer!"), "answer"),
        (evalkit.normalize_answer("a  cat"), "cat"),
        (evalkit.exact_match("The cat", ["cat"]), 1),
        (evalkit.exact_match("cats", ["cat"]), 0),
        (evalkit.f1("cat sat", ["cat"]), 2 / 3),
        (evalkit.f1("dog", ["cat"]), 0.0),
    ]
    for got, want in cases:
        if got != want:
            return ("metrics", False, f"{got!r} != {want!r}")
    return ("metrics", True, "")


def check_packing() -> Check:
    p = pack_single([10, 11])
    if list(p.token_ids) != [corpus.CLS_ID, 10, 11, corpus.SEP_ID]:
        return ("packing", False, f"single {list(p.token_ids)}")
    p = pack_pair([10, 11], [12])
    if list(p.token_ids) != [corpus.CLS_ID, 10, 11, corpus.SEP_ID, 12, corpus.SEP_ID]:
        return ("packing", False, f"pair ids {list(p.token_ids)}")
    if list(p.segment_ids) != [0, 0, 0, 0, 1, 1]:
        return ("packing", False, f"pair segments {list(p.segment_ids)}")
    return ("packing", True, "")


def check_tokenizer() -> Check:
    got = [(t.text, t.char_start, t.char_end) for t in corpus.tokenize("Hello, world")]
    if got != [("hello", 0, 5), (",", 5, 6), ("world", 7, 12)]:
        return ("tokenizer", False, repr(got))
    if corpus.tokenize("") != []:
        return ("tokenizer", False, "empty input")
    return ("tokenizer", True, "")


def run_all() -> list[Check]:
    return [
        check_tokenizer(),
        check_packing(),
        check_beam_oracle(),
        check_classic_oracle(),
        check_gradients(),
        check_loss_identities(),
        check_adamw(),
        check_index(),
        check_metrics(),
    ]
