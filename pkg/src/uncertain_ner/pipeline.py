"""Two-stage orchestration and jackknifed generation of fusion training data."""
from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from uncertain_ner import tagger as tagger_mod
from uncertain_ner.errors import ConfigError, DataFormatError
from uncertain_ner.fusion import (
    FusedSample,
    FusionConfig,
    FusionModel,
    build_fused_sample,
    fuse_predict,
    train_fusion,
)
from uncertain_ner.evalkit import MetricsReport, report_from_traces
from uncertain_ner.retrieval import KnowledgeBase, Retriever, SearchCache
from uncertain_ner.tagger import TaggerConfig, TaggerModel
from uncertain_ner.tagspace import LabelScheme
from uncertain_ner.uncertainty import (
    DEFAULT_K,
    METHODS,
    MC_DROPOUT,
    CandidateSet,
    ProvisionalResult,
    UncertainComponent,
    components_from,
    sample,
)

log = logging.getLogger(__name__)

# Stride between per-sentence MC seed blocks; larger than any sensible k.
SEED_STRIDE = 1009


@dataclass
class RunConfig:
    """Every knob of a run. Defaults follow the reference hyperparameters where
    they exist (8 MC / 4 top-K candidates, alpha 0.1); max lengths live in the
    nested ``tagger`` (128) and ``fusion`` (512) sections."""

    method: str = MC_DROPOUT
    k: int | None = None  # None -> 8 for MC dropout, 4 for top-K
    dropout: float | None = None  # MC rate at inference; None -> the tagger's own rate
    alpha: float = 0.1
    retrieval: str = "kb"
    top_docs: int = 3
    knowledge_chars: int = 400
    folds: int = 5
    checkpoints: int = 3
    overlap_threshold: float = 0.5
    stage2_method: str = MC_DROPOUT
    seed: int = 0
    sample_seed: int = 0
    jobs: int = 1
    base_model: str | None = None
    fusion_model: str | None = None
    kb: str | None = None
    cache: str | None = None
    tagger: TaggerConfig = field(default_factory=TaggerConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self) -> None:
        if isinstance(self.tagger, dict):
            self.tagger = TaggerConfig(**self.tagger)
        if isinstance(self.fusion, dict):
            self.fusion = FusionConfig(**self.fusion)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS or self.stage2_method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.folds < 2:
            raise ConfigError("jackknifing needs at least 2 folds")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 < self.overlap_threshold <= 1.0:
            raise ConfigError("overlap threshold must lie in (0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.retrieval not in ("kb", "cache", "both"):
            raise ConfigError(f"unknown retrieval mode {self.retrieval!r}")
        if self.checkpoints < 1:
            raise ConfigError("need at least one augmentation checkpoint")

    @property
    def k_effective(self) -> int:
        return DEFAULT_K[self.method] if self.k is None else self.k

    def fusion_config(self) -> FusionConfig:
        """Fusion training settings with the run-level alpha applied."""
        return dataclasses.replace(self.fusion, alpha=self.alpha)

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"config is not valid JSON: {exc}", path=str(path)) from None
        return cls.from_dict(data)


@dataclass
class Trace:
    """Everything one prediction went through, for evaluation."""

    labels: tuple[int, ...]
    provisional: ProvisionalResult
    candidates: CandidateSet
    components: list[UncertainComponent]
    knowledge: list[str]


def make_retriever(cfg: RunConfig, kb: KnowledgeBase | None = None,
                   cache: SearchCache | None = None) -> Retriever | None:
    """Retriever for ``cfg.retrieval``; loads KB/cache from the configured paths
    unless already given. Returns None when no knowledge source is configured."""
    if kb is None and cfg.kb and cfg.retrieval in ("kb", "both"):
        kb = KnowledgeBase.load(cfg.kb)
    if cache is None and cfg.cache and cfg.retrieval in ("cache", "both"):
        cache = SearchCache.load(cfg.cache)
    if kb is None and cache is None:
        return None
    try:
        return Retriever(kb, cache, cfg.retrieval, cfg.top_docs, cfg.knowledge_chars)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def sentence_seed(cfg: RunConfig, sid: int) -> int:
    return cfg.sample_seed + SEED_STRIDE * sid


def stage_one(chars: Sequence[str], base: TaggerModel, cfg: RunConfig, sid: int = 0,
              method: str | None = None):
    method = method or cfg.method
    k = cfg.k_effective if method == cfg.method else DEFAULT_K[method]
    prov, cands = sample(base, chars, method, k, sentence_seed(cfg, sid), cfg.dropout)
    return prov, cands, components_from(prov, cands, base.scheme)


def predict_trace(chars: Sequence[str], base: TaggerModel, fusion: FusionModel | None,
                  retriever: Retriever | None, cfg: RunConfig, sid: int = 0) -> Trace:
    prov, cands, comps = stage_one(chars, base, cfg, sid)
    if not comps or fusion is None:
        # without a fusion model the provisional result is final (base-only mode)
        return Trace(prov.labels, prov, cands, comps, [])
    # no knowledge source behaves like a retrieval miss
    knowledge = [retriever(c.text) if retriever is not None else "" for c in comps]
    groups = [([c], know) for c, know in zip(comps, knowledge)]
    labels = fuse_predict(fusion, chars, prov.labels, groups)
    return Trace(labels, prov, cands, comps, knowledge)


def predict(chars: Sequence[str], base: TaggerModel, fusion: FusionModel | None,
            retriever: Retriever | None, cfg: RunConfig, sid: int = 0) -> tuple[int, ...]:
    """Provisional labels when stage one finds nothing uncertain, fused labels otherwise."""
    return predict_trace(chars, base, fusion, retriever, cfg, sid).labels


def predict_corpus(sentences: Sequence[Sequence[str]], base: TaggerModel, fusion: FusionModel | None,
                   retriever: Retriever | None, cfg: RunConfig) -> list[Trace]:
    def run(i):
        return predict_trace(sentences[i], base, fusion, retriever, cfg, i)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(run, range(len(sentences))))
    return [run(i) for i in range(len(sentences))]


def check_schemes(base: TaggerModel, fusion: FusionModel | None) -> None:
    if fusion is not None and fusion.scheme != base.scheme:
        raise ConfigError("base and fusion models were trained with different label schemes")


# -- stage-two training data ---------------------------------------------

def overlap_ratio(a, b) -> float:
    """Jaccard overlap of two inclusive index ranges."""
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = (a.end - a.start + 1) + (b.end - b.start + 1) - inter
    return inter / union


@dataclass
class KeptComponent:
    component: UncertainComponent
    provisional: tuple[int, ...]  # labels of the checkpoint that produced it
    knowledge: str
    checkpoint: int


@dataclass
class Stage2Record:
    sid: int
    fold: int
    chars: list[str]
    gold: tuple[int, ...]
    provisional: tuple[int, ...]
    components: list[KeptComponent]

    def fused_samples(self, scheme: LabelScheme, max_seq_len: int = 512) -> list[FusedSample]:
        return [build_fused_sample(self.chars, kc.provisional, [kc.component], kc.knowledge, scheme,
                                   max_seq_len, gold=self.gold, sid=self.sid)
                for kc in self.components]

    def to_json(self, scheme: LabelScheme) -> dict:
        return {
            "sid": self.sid,
            "fold": self.fold,
            "chars": "".join(self.chars),
            "gold": scheme.decode(self.gold),
            "provisional": scheme.decode(self.provisional),
            "components": [
                {"start": kc.component.start, "end": kc.component.end, "text": kc.component.text,
                 "provisional": scheme.decode(kc.provisional), "knowledge": kc.knowledge,
                 "checkpoint": kc.checkpoint}
                for kc in self.components
            ],
        }

    @classmethod
    def from_json(cls, d: dict, scheme: LabelScheme) -> "Stage2Record":
        comps = [KeptComponent(UncertainComponent(c["start"], c["end"], c["text"]),
                               scheme.encode(c["provisional"]), c["knowledge"], c["checkpoint"])
                 for c in d["components"]]
        return cls(d["sid"], d["fold"], list(d["chars"]), scheme.encode(d["gold"]),
                   scheme.encode(d["provisional"]), comps)


def write_records(path: str | Path, records: Sequence[Stage2Record], scheme: LabelScheme) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"scheme": scheme.to_dict()}, ensure_ascii=False, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_json(scheme), ensure_ascii=False, sort_keys=True) + "\n")


def read_records(path: str | Path) -> tuple[LabelScheme, list[Stage2Record]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise DataFormatError("empty stage-2 record file", path=str(path))
    try:
        scheme = LabelScheme.from_dict(json.loads(lines[0])["scheme"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataFormatError(f"bad header ({exc})", 1, str(path)) from None
    records = []
    for lineno, line in enumerate(lines[1:], 2):
        try:
            records.append(Stage2Record.from_json(json.loads(line), scheme))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataFormatError(f"bad record ({exc})", lineno, str(path)) from None
    return scheme, records


def jackknife_folds(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle, then contiguous split into ``folds`` near-equal parts."""
    if folds > n:
        raise ValueError(f"cannot split {n} sentences into {folds} nonempty folds")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(order, folds)]


def collect_components(chars: Sequence[str], checkpoints: Sequence[TaggerModel], cfg: RunConfig,
                       sid: int, retriever: Retriever | None) -> tuple[tuple[int, ...], list[KeptComponent]]:
    """Sample with each checkpoint in order; drop components overlapping a kept one by >= threshold."""
    kept: list[KeptComponent] = []
    last_prov: tuple[int, ...] = ()
    for ci, ckpt in enumerate(checkpoints):
        prov, _, comps = stage_one(chars, ckpt, cfg, sid, method=cfg.stage2_method)
        last_prov = prov.labels
        for comp in comps:
            if all(overlap_ratio(comp, kc.component) < cfg.overlap_threshold for kc in kept):
                know = retriever(comp.text) if retriever is not None else ""
                kept.append(KeptComponent(comp, prov.labels, know, ci))
    return last_prov, kept


def gen_stage2(corpus: Sequence[tuple[Sequence[str], Sequence[int]]], cfg: RunConfig, scheme: LabelScheme,
               retriever: Retriever | None) -> list[Stage2Record]:
    """N-fold jackknifing with checkpoint augmentation.

    For each fold a tagger is trained on the other folds and its last
    ``cfg.checkpoints`` epoch-end snapshots sample the held-out sentences.
    Only sentences with at least one kept component produce a record.
    """
    folds = jackknife_folds(len(corpus), cfg.folds, cfg.seed)
    records: list[Stage2Record] = []
    for f, held in enumerate(folds):
        train_idx = np.sort(np.concatenate([p for g, p in enumerate(folds) if g != f]))
        if len(held) == 0 or len(train_idx) == 0:
            raise ValueError(f"fold {f} has no data")
        snaps: list[TaggerModel] = []
        tcfg = dataclasses.replace(cfg.tagger, seed=cfg.tagger.seed + f)
        tagger_mod.train([corpus[i] for i in train_idx], tcfg, scheme,
                         on_epoch_end=lambda _e, m: snaps.append(m))
        ckpts = snaps[-cfg.checkpoints:] if snaps else []
        log.info("fold %d: trained on %d sentences, sampling %d with %d checkpoints",
                 f, len(train_idx), len(held), len(ckpts))
        for sid in held:
            chars, gold = corpus[sid]
            prov, kept = collect_components(chars, ckpts, cfg, int(sid), retriever)
            if kept:
                records.append(Stage2Record(int(sid), f, list(chars), tuple(gold), prov, kept))
    records.sort(key=lambda r: r.sid)
    return records


def dev_samples(corpus: Sequence[tuple[Sequence[str], Sequence[int]]], base: TaggerModel,
                retriever: Retriever, cfg: RunConfig) -> list[FusedSample]:
    """Fused samples for held-out data as prediction would see them (for checkpoint selection)."""
    out = []
    for sid, (chars, gold) in enumerate(corpus):
        prov, _, comps = stage_one(chars, base, cfg, sid)
        for c in comps:
            out.append(build_fused_sample(chars, prov.labels, [c], retriever(c.text), base.scheme,
                                          cfg.fusion.max_seq_len, gold=gold, sid=sid))
    return out


def samples_from_records(records: Sequence[Stage2Record], scheme: LabelScheme,
                         max_seq_len: int = 512) -> list[FusedSample]:
    return [s for r in records for s in r.fused_samples(scheme, max_seq_len)]


def evaluate_corpus(corpus: Sequence[tuple[Sequence[str], Sequence[int]]], base: TaggerModel,
                    fusion: FusionModel | None, retriever: Retriever | None,
                    cfg: RunConfig) -> tuple[list[Trace], MetricsReport]:
    traces = predict_corpus([c for c, _ in corpus], base, fusion, retriever, cfg)
    return traces, report_from_traces(traces, [g for _, g in corpus], base.scheme)


SWEEP_KEYS = {"p": "dropout", "dropout": "dropout", "k": "k", "alpha": "alpha"}


def sweep_evaluator(corpus, base: TaggerModel, retriever: Retriever | None, cfg: RunConfig,
                    fusion: FusionModel | None = None,
                    train_samples: Sequence[FusedSample] | None = None,
                    dev: Sequence[FusedSample] | None = None):
    """Evaluation callback for :func:`uncertain_ner.evalkit.sweep`.

    Grid points may set ``p``/``dropout``, ``k`` and ``alpha``. A fusion model
    is retrained (and memoized) for each alpha when training samples are
    given; otherwise the supplied fusion model is used for every point.
    """
    trained: dict[float, FusionModel] = {}

    def evaluate(point: dict) -> MetricsReport:
        unknown = set(point) - set(SWEEP_KEYS)
        if unknown:
            raise ConfigError(f"unsupported sweep parameters: {sorted(unknown)}")
        run = cfg.replace(**{SWEEP_KEYS[k]: v for k, v in point.items()})
        run.validate()
        model = fusion
        if train_samples is not None:
            if run.alpha not in trained:
                trained[run.alpha] = train_fusion(train_samples, run.fusion_config(), base.scheme, dev=dev)
            model = trained[run.alpha]
        elif "alpha" in point:
            raise ConfigError("sweeping alpha needs stage-2 records to retrain the fusion model")
        return evaluate_corpus(corpus, base, model, retriever, run)[1]

    return evaluate
