"""Command-line pipeline: ingest -> train-extractor -> extract-candidates ->
train-encoder -> build-index -> query / evaluate, plus a selftest.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path

import numpy as np

from . import (
    corpus,
    dual_encoder as de,
    evalkit,
    extractor as ex,
    nn_core,
    phrase_index as pi,
    selftest,
)
from .config import ENV_CONFIG_VAR, PipelineConfig, load_config
from .encoder import EncoderConfig
from .errors import DataError, EffqaError, UsageError

log = logging.getLogger(__name__)

SUBCOMMANDS = (
    "ingest",
    "train-extractor",
    "extract-candidates",
    "train-encoder",
    "build-index",
    "query",
    "evaluate",
    "selftest",
)


def seed_everything(seed: int) -> np.random.Generator:
    """Seed every stochastic component from one root seed."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    return np.random.default_rng(seed)


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the CLI contract wants 1
    def error(self, message):
        raise UsageError(message)


def _encoder_config(cfg: PipelineConfig, vocab_size: int) -> EncoderConfig:
    e = cfg.encoder
    return EncoderConfig(
        vocab_size=vocab_size,
        d_model=e.d_model,
        n_layers=e.n_layers,
        n_heads=e.n_heads,
        d_ff=e.d_ff,
        max_positions=e.max_positions,
        dropout_rate=e.dropout_rate,
    )


def _beam_config(cfg: PipelineConfig) -> ex.BeamConfig:
    return ex.BeamConfig(cfg.beam.s, cfg.beam.e, cfg.beam.max_answer_tokens)


def _require_file(path: str, what: str) -> str:
    if not Path(path).is_file():
        raise DataError(f"{what} not found at {path}")
    return path


def _load_vocab(cfg: PipelineConfig) -> corpus.Vocab:
    return corpus.Vocab.load(_require_file(cfg.paths.vocab, "vocabulary"))


def _load_cache(cfg: PipelineConfig) -> corpus.ProcessedDataset:
    return corpus.read_cache(_require_file(cfg.paths.cache, "dataset cache"))


def _split_questions(ds: corpus.ProcessedDataset, dev_fraction: float, seed: int):
    """Deterministic train/dev split over questions."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds.questions))
    n_dev = int(round(dev_fraction * len(ds.questions)))
    dev_idx = set(int(i) for i in order[:n_dev])
    train = [q for i, q in enumerate(ds.questions) if i not in dev_idx]
    dev = [q for i, q in enumerate(ds.questions) if i in dev_idx]
    return train, dev


def _ensure_parent(path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def cmd_ingest(cfg: PipelineConfig, args) -> int:
    raw = corpus.load_squad_json(
        _require_file(cfg.paths.dataset, "dataset"),
        skip_bad_answers=cfg.corpus.skip_bad_answers,
    )
    vocab = corpus.build_vocab(raw, cfg.corpus.min_freq)
    ds = corpus.prepare_dataset(
        raw,
        vocab,
        corpus.CorpusConfig(
            max_context_tokens=cfg.corpus.max_context_tokens,
            max_question_tokens=cfg.corpus.max_question_tokens,
            min_freq=cfg.corpus.min_freq,
            skip_bad_answers=cfg.corpus.skip_bad_answers,
        ),
    )
    _ensure_parent(cfg.paths.cache)
    _ensure_parent(cfg.paths.vocab)
    corpus.write_cache(ds, cfg.paths.cache)
    vocab.save(cfg.paths.vocab)
    print(
        f"ingested {raw.num_questions} questions over {len(ds.contexts)} contexts; "
        f"vocab size {vocab.size}"
    )
    return 0


def cmd_train_extractor(cfg: PipelineConfig, args) -> int:
    ds = _load_cache(cfg)
    vocab = _load_vocab(cfg)
    seed_everything(cfg.seed)
    train_qs, dev_qs = _split_questions(ds, cfg.extractor_opt.dev_fraction, cfg.seed)
    train_ds = corpus.ProcessedDataset(ds.contexts, train_qs)
    tcfg = ex.ExtractorTrainConfig(
        epochs=cfg.extractor_opt.epochs,
        batch_size=cfg.extractor_opt.batch_size,
        learning_rate=cfg.extractor_opt.learning_rate,
        weight_decay=cfg.extractor_opt.weight_decay,
        warmup_frac=cfg.extractor_opt.warmup_frac,
        beam=_beam_config(cfg),
        dev_recall_k=cfg.extractor_opt.dev_recall_k,
        dropout=cfg.extractor_opt.dropout,
        seed=cfg.seed,
    )
    result = ex.train_extractor(
        train_ds, tcfg, _encoder_config(cfg, vocab.size), dev=dev_qs
    )
    _ensure_parent(cfg.paths.extractor_checkpoint)
    ex.save_extractor_params(result.params, cfg.paths.extractor_checkpoint)
    last_recall = result.dev_recalls[-1] if result.dev_recalls else float("nan")
    print(
        f"trained extractor for {cfg.extractor_opt.epochs} epochs; "
        f"final dev EM-recall@{cfg.extractor_opt.dev_recall_k} {last_recall:.3f}; "
        f"checkpoint at {cfg.paths.extractor_checkpoint}"
    )
    return 0


def _load_extractor(cfg: PipelineConfig, vocab: corpus.Vocab) -> ex.ExtractorParams:
    return ex.load_extractor_params(
        _require_file(cfg.paths.extractor_checkpoint, "extractor checkpoint"),
        _encoder_config(cfg, vocab.size),
    )


def _load_dual(cfg: PipelineConfig, vocab: corpus.Vocab) -> de.DualEncoderParams:
    return de.load_dual_encoder_params(
        _require_file(cfg.paths.dual_checkpoint, "dual encoder checkpoint"),
        _encoder_config(cfg, vocab.size),
        proj_dim=cfg.dual_opt.proj_dim,
        pool=cfg.dual_opt.pool,
    )


def cmd_extract_candidates(cfg: PipelineConfig, args) -> int:
    ds = _load_cache(cfg)
    vocab = _load_vocab(cfg)
    params = _load_extractor(cfg, vocab)
    beam = _beam_config(cfg)
    per_context = {}
    for ctx_id in sorted(ds.contexts):
        ctx = ds.contexts[ctx_id]
        per_context[ctx_id] = (ctx, ex.extract_beam(ctx, params, beam, cfg.beam.k_eval))
    _ensure_parent(cfg.paths.candidates)
    ex.dump_candidates(cfg.paths.candidates, per_context)
    total = sum(len(c) for _, c in per_context.values())
    print(f"dumped {total} candidates over {len(per_context)} contexts to {cfg.paths.candidates}")
    return 0


def cmd_train_encoder(cfg: PipelineConfig, args) -> int:
    ds = _load_cache(cfg)
    vocab = _load_vocab(cfg)
    extractor_params = _load_extractor(cfg, vocab)
    seed_everything(cfg.seed)
    train_qs, dev_qs = _split_questions(ds, cfg.extractor_opt.dev_fraction, cfg.seed)
    build = de.build_training_set(
        corpus.ProcessedDataset(ds.contexts, train_qs),
        extractor_params,
        n_train=cfg.beam.k_train,
        beam_cfg=_beam_config(cfg),
    )
    dev_build = de.build_training_set(
        corpus.ProcessedDataset(ds.contexts, dev_qs),
        extractor_params,
        n_train=cfg.beam.k_train,
        beam_cfg=_beam_config(cfg),
    )
    dcfg = de.DualTrainConfig(
        epochs=cfg.dual_opt.epochs,
        micro_batch=cfg.dual_opt.micro_batch,
        grad_accum=cfg.dual_opt.grad_accum,
        learning_rate=cfg.dual_opt.learning_rate,
        weight_decay=cfg.dual_opt.weight_decay,
        warmup_frac=cfg.dual_opt.warmup_frac,
        proj_dim=cfg.dual_opt.proj_dim,
        pool=cfg.dual_opt.pool,
        dropout=cfg.dual_opt.dropout,
        seed=cfg.seed + 1,
    )
    result = de.train_dual_encoder(
        build.examples, dcfg, _encoder_config(cfg, vocab.size), dev_examples=dev_build.examples
    )
    _ensure_parent(cfg.paths.dual_checkpoint)
    de.save_dual_encoder_params(result.params, cfg.paths.dual_checkpoint)
    print(
        f"trained dual encoder on {len(build.examples)} examples "
        f"(retention {build.retention:.3f}); checkpoint at {cfg.paths.dual_checkpoint}"
    )
    return 0


def cmd_build_index(cfg: PipelineConfig, args) -> int:
    ds = _load_cache(cfg)
    vocab = _load_vocab(cfg)
    extractor_params = _load_extractor(cfg, vocab)
    dual_params = _load_dual(cfg, vocab)
    beam = _beam_config(cfg)
    vectors = []
    for ctx_id in sorted(ds.contexts):
        ctx = ds.contexts[ctx_id]
        for cand in ex.extract_beam(ctx, extractor_params, beam, cfg.beam.k_eval):
            vectors.append(de.encode_candidate(ctx, cand, dual_params))
    index = pi.build_index(vectors)
    _ensure_parent(cfg.paths.index)
    pi.save_index(index, cfg.paths.index)
    print(f"indexed {len(index)} phrase vectors (dim {index.dim}) at {cfg.paths.index}")
    return 0


def cmd_query(cfg: PipelineConfig, args) -> int:
    if not args.question:
        raise UsageError("query requires --question")
    vocab = _load_vocab(cfg)
    dual_params = _load_dual(cfg, vocab)
    index = pi.load_index(_require_file(cfg.paths.index, "phrase index"))
    q = corpus.tokenize_question(
        args.question, vocab, qid="query", max_question_tokens=cfg.corpus.max_question_tokens
    )
    qvec = de.encode_question(q, dual_params)
    hits = pi.search(index, qvec, top_k=args.top_k, ctx_filter=args.context_id)
    if not hits:
        print("no hits")
        return 0
    for h in hits:
        print(f"{h.rank + 1:>2}. {h.score:+.4f}  [{h.entry.ctx_id}:{h.entry.start}-{h.entry.end}]  {h.text}")
    return 0


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    ds = _load_cache(cfg)
    vocab = _load_vocab(cfg)
    extractor_params = _load_extractor(cfg, vocab)
    dual_params = _load_dual(cfg, vocab)
    report = evalkit.evaluate_piqa(
        ds,
        extractor_params,
        dual_params,
        k_eval=cfg.beam.k_eval,
        beam_cfg=_beam_config(cfg),
    )
    _ensure_parent(cfg.paths.report)
    with open(cfg.paths.report, "w", encoding="utf-8") as f:
        f.write(report.to_json())
    print(report.summary())
    print(f"report written to {cfg.paths.report}")
    return 0


def cmd_selftest(cfg: PipelineConfig, args) -> int:
    results = selftest.run_all()
    ok = True
    for name, passed, detail in results:
        status = "PASS" if passed else "FAIL"
        line = f"{status} {name}"
        if detail and not passed:
            line += f": {detail}"
        print(line)
        ok = ok and passed
    print(f"{sum(p for _, p, _ in results)}/{len(results)} checks passed")
    if not ok:
        raise EffqaError("selftest failed")
    return 0


_HANDLERS = {
    "ingest": cmd_ingest,
    "train-extractor": cmd_train_extractor,
    "extract-candidates": cmd_extract_candidates,
    "train-encoder": cmd_train_encoder,
    "build-index": cmd_build_index,
    "query": cmd_query,
    "evaluate": cmd_evaluate,
    "selftest": cmd_selftest,
}


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="effqa",
        description=(
            "Phrase-indexed question answering pipeline. Any unrecognized "
            "--section.key VALUE flag overrides the matching config entry."
        ),
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS, metavar="subcommand",
                        help="|".join(SUBCOMMANDS))
    parser.add_argument("--config", default=None,
                        help=f"config file path (fallback: ${ENV_CONFIG_VAR})")
    parser.add_argument("--question", default=None, help="query: question text")
    parser.add_argument("--context-id", default=None, help="query: restrict to one context")
    parser.add_argument("--top-k", type=int, default=5, help="query: hits to print")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def _split_overrides(extras: list[str]) -> list[tuple[str, str]]:
    overrides = []
    i = 0
    while i < len(extras):
        key = extras[i]
        if not key.startswith("--") or i + 1 >= len(extras):
            raise UsageError(f"expected --section.key VALUE pairs, got {extras[i:]}")
        overrides.append((key[2:], extras[i + 1]))
        i += 2
    return overrides


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        cfg = load_config(args.config, _split_overrides(extras))
        handler = _HANDLERS.get(args.subcommand)
        if handler is None:
            raise UsageError(f"unknown subcommand {args.subcommand!r}")
        return handler(cfg, args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (EffqaError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
