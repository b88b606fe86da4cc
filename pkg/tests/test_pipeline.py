import dataclasses

import numpy as np
import pytest

from uncertain_ner import pipeline, synth
from uncertain_ner import tagger as tagger_mod
from uncertain_ner.errors import ConfigError
from uncertain_ner.fusion import FusionConfig
from uncertain_ner.pipeline import (
    RunConfig,
    collect_components,
    gen_stage2,
    jackknife_folds,
    overlap_ratio,
    predict_corpus,
    predict_trace,
    read_records,
    write_records,
)
from uncertain_ner.retrieval import KnowledgeBase, Retriever
from uncertain_ner.tagger import TaggerConfig
from uncertain_ner.uncertainty import UncertainComponent as UC

FAST = dict(tagger=TaggerConfig(epochs=3, d_hid=16), fusion=FusionConfig(epochs=2, d_model=16, d_ff=16, layers=1))


@pytest.fixture(scope="module")
def small():
    data = synth.make_corpus(seed=5, n_sentences=300, n_subjects=40)
    base = tagger_mod.train(data.train, TaggerConfig(epochs=10, lr=0.5), data.scheme)
    return data, base, Retriever(KnowledgeBase.from_triplets(data.triplets))


def test_config_defaults():
    cfg = RunConfig()
    assert cfg.k_effective == 8 and cfg.replace(method="topk").k_effective == 4
    assert (cfg.folds, cfg.checkpoints, cfg.overlap_threshold, cfg.alpha) == (5, 3, 0.5, 0.1)
    assert cfg.tagger.max_seq_len == 128 and cfg.fusion.max_seq_len == 512
    assert cfg.replace(alpha=1.0).fusion_config().alpha == 1.0


@pytest.mark.parametrize("bad", [dict(folds=1), dict(k=0), dict(overlap_threshold=0.0), dict(overlap_threshold=1.5),
                                 dict(alpha=1.5), dict(method="beam"), dict(retrieval="web"),
                                 dict(dropout=1.0), dict(checkpoints=0)])
def test_config_invariants(bad):
    with pytest.raises(ConfigError):
        RunConfig(**bad)


def test_config_dict_roundtrip(tmp_path):
    cfg = RunConfig(method="topk", k=6, tagger=TaggerConfig(epochs=2))
    back = RunConfig.from_dict(cfg.to_dict())
    assert back == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"nope": 1})
    p = tmp_path / "c.json"
    p.write_text('{"method": "topk", "tagger": {"epochs": 4}}')
    loaded = RunConfig.load(p)
    assert loaded.method == "topk" and loaded.tagger.epochs == 4


def test_overlap_ratio_examples():
    assert overlap_ratio(UC(0, 3, ""), UC(0, 3, "")) == 1.0
    assert overlap_ratio(UC(0, 1, ""), UC(4, 5, "")) == 0.0
    assert overlap_ratio(UC(0, 3, ""), UC(2, 5, "")) == pytest.approx(2 / 6)


def test_jackknife_folds():
    folds = jackknife_folds(10, 2, seed=0)
    assert [len(f) for f in folds] == [5, 5]
    assert sorted(np.concatenate(folds).tolist()) == list(range(10))
    assert all(np.array_equal(a, b) for a, b in zip(folds, jackknife_folds(10, 2, seed=0)))
    assert [len(f) for f in jackknife_folds(11, 3, seed=1)] == [4, 4, 3]
    with pytest.raises(ValueError):
        jackknife_folds(2, 3, seed=0)


def test_gen_stage2_no_leak(small, monkeypatch):
    data, _, ret = small
    corpus = data.train[:10]
    seen = []
    real_train = tagger_mod.train

    def spy(c, cfg, scheme, dev=None, on_epoch_end=None):
        seen.append({"".join(chars) for chars, _ in c})
        return real_train(c, cfg, scheme, dev=dev, on_epoch_end=on_epoch_end)

    monkeypatch.setattr(tagger_mod, "train", spy)
    cfg = RunConfig(folds=2, checkpoints=2, dropout=0.5, **FAST)
    records = gen_stage2(corpus, cfg, data.scheme, ret)
    folds = jackknife_folds(10, 2, cfg.seed)
    assert len(seen) == 2 and all(len(s) <= 5 for s in seen)
    for r in records:
        assert r.sid in folds[r.fold]
        assert "".join(r.chars) not in seen[r.fold]
        assert len(r.components) >= 1
        assert tuple(r.gold) == tuple(corpus[r.sid][1])


def test_augmentation_discards_duplicates(small):
    data, base, ret = small
    cfg = RunConfig(dropout=0.5, overlap_threshold=0.5)
    for chars, _ in data.train[:40]:
        _, once = collect_components(chars, [base], cfg, 0, ret)
        _, twice = collect_components(chars, [base, base], cfg, 0, ret)
        assert [k.component for k in twice] == [k.component for k in once]
        assert all(k.checkpoint == 0 for k in twice)


def test_augmentation_threshold():
    a, b = UC(0, 3, "abcd"), UC(2, 5, "cdef")
    assert overlap_ratio(a, b) < 0.5  # kept at theta 0.5
    assert overlap_ratio(a, UC(0, 2, "abc")) >= 0.5  # dropped at theta 0.5


def test_records_roundtrip(small, tmp_path):
    data, _, ret = small
    cfg = RunConfig(folds=2, checkpoints=1, dropout=0.5, **FAST)
    records = gen_stage2(data.train[:20], cfg, data.scheme, ret)
    assert records
    path = tmp_path / "r.jsonl"
    write_records(path, records, data.scheme)
    scheme, back = read_records(path)
    assert scheme == data.scheme and back == records
    samples = pipeline.samples_from_records(back, scheme)
    assert len(samples) == sum(len(r.components) for r in records)
    assert all(s.gold is not None for s in samples)


def test_zero_dropout_is_base_viterbi(small, monkeypatch):
    data, base, ret = small
    monkeypatch.setattr(pipeline, "fuse_predict", lambda *a, **k: pytest.fail("fusion invoked"))
    cfg = RunConfig(dropout=0.0)
    for i, (chars, _) in enumerate(data.test[:50]):
        t = predict_trace(chars, base, object(), ret, cfg, i)
        assert t.components == [] and t.labels == tagger_mod.predict(base, chars)


def test_components_route_through_fusion(small, monkeypatch):
    data, base, ret = small
    calls = []

    def fake(model, chars, l_p, groups):
        calls.append(groups)
        return tuple(l_p)

    monkeypatch.setattr(pipeline, "fuse_predict", fake)
    cfg = RunConfig(dropout=0.5)
    traces = predict_corpus([c for c, _ in data.test[:30]], base, object(), ret, cfg)
    with_comps = [t for t in traces if t.components]
    assert with_comps and len(calls) == len(with_comps)
    for t, groups in zip(with_comps, calls):
        assert [g[0] for g in groups] == [[c] for c in t.components]
        assert all(len(k) <= 400 for _, k in groups)


def test_no_retriever_means_empty_knowledge(small, monkeypatch):
    data, base, _ = small
    seen = []
    monkeypatch.setattr(pipeline, "fuse_predict", lambda m, c, l_p, groups: seen.extend(groups) or tuple(l_p))
    predict_corpus([c for c, _ in data.test[:30]], base, object(), None, RunConfig(dropout=0.5))
    assert seen and all(k == "" for _, k in seen)


def test_parallel_matches_serial(small):
    data, base, ret = small
    sents = [c for c, _ in data.test[:30]]
    a = predict_corpus(sents, base, None, ret, RunConfig(dropout=0.3))
    b = predict_corpus(sents, base, None, ret, RunConfig(dropout=0.3, jobs=4))
    assert a == b


def test_make_retriever(tmp_path, small):
    data, _, _ = small
    kb = KnowledgeBase.from_triplets(data.triplets)
    kb.save(tmp_path / "kb")
    assert pipeline.make_retriever(RunConfig()) is None
    r = pipeline.make_retriever(RunConfig(kb=str(tmp_path / "kb"), knowledge_chars=10))
    assert r.max_chars == 10 and len(r(data.triplets[0].subject)) == 10
    # a KB path is ignored when the mode asks for the search cache only
    assert pipeline.make_retriever(RunConfig(kb=str(tmp_path / "kb"), retrieval="cache")) is None


def test_sweep_evaluator_single_point_matches_direct(small):
    data, base, ret = small
    cfg = RunConfig(dropout=0.2)
    corpus = data.dev[:20]
    evaluate = pipeline.sweep_evaluator(corpus, base, ret, cfg)
    direct = pipeline.evaluate_corpus(corpus, base, None, ret, cfg.replace(dropout=0.0))[1]
    assert evaluate({"p": 0.0}) == direct
    assert direct.sar == 0.0
    with pytest.raises(ConfigError):
        evaluate({"alpha": 0.5})
    with pytest.raises(ConfigError):
        evaluate({"lr": 0.5})
    assert dataclasses.asdict(direct)["size_u"] == 0
