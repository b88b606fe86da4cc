"""Command-line front end.

Exit statuses: 0 success, 1 usage error, 2 data/format error, 3 model or
config mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from uncertain_ner import evalkit, pipeline, tagger
from uncertain_ner.corpus import encode_corpus, format_corpus, read_corpus, scheme_of, write_corpus
from uncertain_ner.errors import ConfigError, DataFormatError, IllegalSequenceError, SchemeError
from uncertain_ner.fusion import FusionModel, train_fusion
from uncertain_ner.pipeline import RunConfig
from uncertain_ner.retrieval import KnowledgeBase, bm25_query, read_triplets
from uncertain_ner.tagger import TaggerModel

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MISMATCH = 0, 1, 2, 3

log = logging.getLogger("uncertain_ner")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _set_value(cfg: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    *parents, leaf = dotted.split(".")
    node = cfg
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {p} is not a section")
    node[leaf] = value


# flag dest -> config key
OVERRIDES = {
    "method": "method", "k": "k", "dropout": "dropout", "alpha": "alpha",
    "retrieval": "retrieval", "top_docs": "top_docs", "knowledge_chars": "knowledge_chars",
    "folds": "folds", "checkpoints": "checkpoints", "overlap_threshold": "overlap_threshold",
    "stage2_method": "stage2_method", "sample_seed": "sample_seed", "jobs": "jobs",
    "base_model": "base_model", "fusion_model": "fusion_model", "kb": "kb", "cache": "cache",
}


def build_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then ``--set`` pairs, then dedicated flags."""
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"config is not valid JSON: {exc}", path=args.config) from None
        if not isinstance(data, dict):
            raise DataFormatError("config must be a JSON object", path=args.config)
    for pair in args.set or ():
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        _set_value(data, key, raw)
    for dest, key in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            data[key] = value
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
        data.setdefault("tagger", {})["seed"] = args.seed
        data.setdefault("fusion", {})["seed"] = args.seed
    return RunConfig.from_dict(data)


def _load_base(cfg: RunConfig) -> TaggerModel:
    if not cfg.base_model:
        raise UsageError("a base model is required (--base-model or config 'base_model')")
    return TaggerModel.load(cfg.base_model)


def _load_fusion(cfg: RunConfig, base: TaggerModel) -> FusionModel | None:
    if not cfg.fusion_model:
        return None
    fusion = FusionModel.load(cfg.fusion_model)
    pipeline.check_schemes(base, fusion)
    return fusion


def _labeled(path: str, scheme=None):
    sents = read_corpus(path)
    scheme = scheme or scheme_of(sents)
    return scheme, encode_corpus(sents, scheme, path)


def _retriever(cfg: RunConfig, required: bool = False):
    ret = pipeline.make_retriever(cfg)
    if ret is None and required:
        raise UsageError("a knowledge source is required (--kb and/or --cache)")
    return ret


# -- subcommands ---------------------------------------------------------

def cmd_train_base(args, cfg: RunConfig) -> None:
    scheme, train = _labeled(args.train)
    dev = _labeled(args.dev, scheme)[1] if args.dev else None
    model = tagger.train(train, cfg.tagger, scheme, dev=dev)
    model.save(args.out)


def cmd_gen_stage2(args, cfg: RunConfig) -> None:
    scheme, train = _labeled(args.train)
    records = pipeline.gen_stage2(train, cfg, scheme, _retriever(cfg, required=True))
    pipeline.write_records(args.out, records, scheme)
    log.info("wrote %d records", len(records))


def _fusion_dev(args, cfg: RunConfig, scheme, retriever):
    if not args.dev:
        return None
    base = _load_base(cfg)
    if base.scheme != scheme:
        raise ConfigError("base model scheme differs from the stage-2 records")
    return pipeline.dev_samples(_labeled(args.dev, scheme)[1], base, retriever, cfg)


def cmd_train_fusion(args, cfg: RunConfig) -> None:
    scheme, records = pipeline.read_records(args.records)
    samples = pipeline.samples_from_records(records, scheme, cfg.fusion.max_seq_len)
    dev = _fusion_dev(args, cfg, scheme, _retriever(cfg, required=bool(args.dev)))
    model = train_fusion(samples, cfg.fusion_config(), scheme, dev=dev)
    model.save(args.out)


def cmd_kb_build(args, cfg: RunConfig) -> None:
    kb = KnowledgeBase.from_triplets(read_triplets(args.triplets))
    kb.save(args.out)
    log.info("indexed %d documents", len(kb))


def cmd_kb_query(args, cfg: RunConfig) -> None:
    if not cfg.kb:
        raise UsageError("kb-query needs --kb")
    kb = KnowledgeBase.load(cfg.kb)
    hits = [{"subject": d.subject, "body": d.body, "score": s}
            for d, s in bm25_query(kb, args.query, args.top or cfg.top_docs, args.include_zero)]
    _emit(_dump({"query": args.query, "results": hits}), args.out)


def _input_chars(path: str, scheme) -> list[list[str]]:
    sents = read_corpus(path, require_labels=False)
    for s in sents:
        if s.labels is not None:
            scheme.encode(s.labels)  # labels outside the model's scheme -> SchemeError
    return [s.chars for s in sents]


def cmd_sample(args, cfg: RunConfig) -> None:
    base = _load_base(cfg)
    lines = []
    for sid, chars in enumerate(_input_chars(args.input, base.scheme)):
        _, _, comps = pipeline.stage_one(chars, base, cfg, sid)
        lines.append(json.dumps({
            "sentence_id": sid,
            "method": cfg.method,
            "components": [{"start": c.start, "end": c.end, "text": c.text} for c in comps],
        }, sort_keys=True, ensure_ascii=False) + "\n")
    _emit("".join(lines), args.out)


def cmd_predict(args, cfg: RunConfig) -> None:
    base = _load_base(cfg)
    fusion = _load_fusion(cfg, base)
    sents = _input_chars(args.input, base.scheme)
    traces = pipeline.predict_corpus(sents, base, fusion, _retriever(cfg), cfg)
    rows = [(chars, base.scheme.decode(t.labels)) for chars, t in zip(sents, traces)]
    if args.out:
        write_corpus(args.out, rows)
    else:
        sys.stdout.write(format_corpus(rows))


def cmd_evaluate(args, cfg: RunConfig) -> None:
    if args.pred:
        gold_sents, pred_sents = read_corpus(args.input), read_corpus(args.pred)
        scheme = scheme_of(gold_sents + pred_sents)
        gold = encode_corpus(gold_sents, scheme, args.input)
        pred = encode_corpus(pred_sents, scheme, args.pred)
        if [c for c, _ in gold] != [c for c, _ in pred]:
            raise DataFormatError("prediction file text does not match the gold file", path=args.pred)
        p, r, f = evalkit.entity_f1([l for _, l in pred], [l for _, l in gold], scheme)
        report = {"precision": p, "recall": r, "f1": f, "sentences": len(gold),
                  "token_accuracy": evalkit.token_accuracy([l for _, l in pred], [l for _, l in gold])}
        _emit(_dump(report), args.out)
        return
    base = _load_base(cfg)
    fusion = _load_fusion(cfg, base)
    _, gold = _labeled(args.input, base.scheme)
    _, report = pipeline.evaluate_corpus(gold, base, fusion, _retriever(cfg), cfg)
    _emit(_dump(report.to_dict()), args.out)


def cmd_sweep(args, cfg: RunConfig) -> None:
    try:
        grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"grid is not valid JSON: {exc}", path=args.grid) from None
    if not isinstance(grid, dict) or not all(isinstance(v, list) for v in grid.values()):
        raise DataFormatError("grid must map parameter names to lists", path=args.grid)
    base = _load_base(cfg)
    retriever = _retriever(cfg)
    _, corpus = _labeled(args.input, base.scheme)
    samples = dev = None
    if args.records:
        scheme, records = pipeline.read_records(args.records)
        if scheme != base.scheme:
            raise ConfigError("stage-2 records and base model use different schemes")
        samples = pipeline.samples_from_records(records, scheme, cfg.fusion.max_seq_len)
        dev = _fusion_dev(args, cfg, scheme, retriever)
    fusion = _load_fusion(cfg, base) if samples is None else None
    evaluate = pipeline.sweep_evaluator(corpus, base, retriever, cfg, fusion, samples, dev)
    try:
        rows = evalkit.sweep(grid, evaluate)
    except ValueError as exc:
        if isinstance(exc, (ConfigError, DataFormatError)):
            raise
        raise ConfigError(str(exc)) from None
    _emit(_dump({"grid": grid, "rows": rows}), args.out)
    table = evalkit.format_table(rows)
    if args.table:
        Path(args.table).write_text(table, encoding="utf-8")
    elif args.out:
        sys.stdout.write(table)


def cmd_synth(args, cfg: RunConfig) -> None:
    from uncertain_ner.synth import make_corpus

    make_corpus(seed=args.seed, n_sentences=args.sentences).write(args.out)


# -- parser --------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, dotted for nested sections (tagger.epochs=5)")
    p.add_argument("--jobs", type=int, help="worker threads for per-sentence work")
    p.add_argument("-v", "--verbose", action="store_true")


def _models(p, fusion: bool = True) -> None:
    p.add_argument("--base-model", dest="base_model")
    if fusion:
        p.add_argument("--fusion-model", dest="fusion_model")


def _knowledge(p) -> None:
    p.add_argument("--kb", help="directory written by kb-build")
    p.add_argument("--cache", help="search cache JSONL")
    p.add_argument("--retrieval", choices=("kb", "cache", "both"))
    p.add_argument("--top-docs", dest="top_docs", type=int)
    p.add_argument("--knowledge-chars", dest="knowledge_chars", type=int)


def _sampling(p) -> None:
    p.add_argument("--method", choices=("mc_dropout", "topk", "mc"))
    p.add_argument("--k", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--sample-seed", dest="sample_seed", type=int)


def _seed(p, required: bool) -> None:
    p.add_argument("--seed", type=int, required=required)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uncertain-ner", description="Two-stage uncertainty-driven NER with knowledge fusion.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("train-base", help="train the base tagger")
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--out", required=True)
    _seed(p, True)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("gen-stage2", help="jackknife the training set into fusion training records")
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int)
    p.add_argument("--checkpoints", type=int)
    p.add_argument("--overlap-threshold", dest="overlap_threshold", type=float)
    p.add_argument("--stage2-method", dest="stage2_method", choices=("mc_dropout", "topk"))
    _sampling(p)
    _knowledge(p)
    _seed(p, True)
    p.set_defaults(func=cmd_gen_stage2)

    p = sub.add_parser("train-fusion", help="train the knowledge fusion model")
    p.add_argument("--records", required=True)
    p.add_argument("--dev", help="labeled dev corpus for checkpoint selection (needs --base-model)")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    _models(p, fusion=False)
    _sampling(p)
    _knowledge(p)
    _seed(p, True)
    p.set_defaults(func=cmd_train_fusion)

    p = sub.add_parser("kb-build", help="synthesize and index documents from SPO triplets")
    p.add_argument("--triplets", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_kb_build)

    p = sub.add_parser("kb-query", help="BM25 search over a built KB")
    p.add_argument("--kb")
    p.add_argument("--query", required=True)
    p.add_argument("--top", type=int)
    p.add_argument("--include-zero", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_kb_query)

    p = sub.add_parser("sample", help="emit uncertain components per sentence as JSONL")
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    _models(p, fusion=False)
    _sampling(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("predict", help="run both stages and write predictions")
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    _models(p)
    _sampling(p)
    _knowledge(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions, or run the pipeline on a gold corpus")
    p.add_argument("--input", required=True, help="gold corpus")
    p.add_argument("--pred", help="prediction corpus; without it the pipeline is run on --input")
    p.add_argument("--out")
    _models(p)
    _sampling(p)
    _knowledge(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="evaluate over a grid of p, k and alpha")
    p.add_argument("--grid", required=True)
    p.add_argument("--input", required=True, help="gold corpus to evaluate on")
    p.add_argument("--records", help="stage-2 records; needed when alpha is swept")
    p.add_argument("--dev", help="dev corpus for fusion checkpoint selection when retraining")
    p.add_argument("--out", help="JSON table path (stdout if omitted)")
    p.add_argument("--table", help="plain-text table path")
    _models(p)
    _sampling(p)
    _knowledge(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="write the synthetic ORG/LOC corpus and triplets")
    p.add_argument("--out", required=True)
    p.add_argument("--sentences", type=int, default=2000)
    _seed(p, True)
    p.set_defaults(func=cmd_synth)

    for sp in sub.choices.values():
        _common(sp)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("uncertain-ner: error: a subcommand is required", file=sys.stderr)
            return EXIT_USAGE
        if getattr(args, "method", None) == "mc":
            args.method = "mc_dropout"
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        cfg = build_config(args)
        args.func(args, cfg)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, SchemeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (DataFormatError, IllegalSequenceError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
