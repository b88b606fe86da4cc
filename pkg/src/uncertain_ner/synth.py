"""Synthetic ORG/LOC corpus whose hard mentions are only resolvable with a KB.

Ambiguous mentions are names drawn from a shared character pool and placed in
type-neutral templates; their type is recorded only in the triplet KB. Easy
mentions carry a type-revealing suffix (公司, 市, ...). Test sentences use
ambiguous names that never occur in train/dev, so the base tagger has to
guess and the fusion model has to read the retrieved description.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from uncertain_ner.corpus import write_corpus
from uncertain_ner.retrieval import Triplet
from uncertain_ner.tagspace import EntitySpan, LabelScheme, spans_to_labels

NAME_POOL = "甲乙丙丁戊己庚辛壬癸子丑寅卯辰巳午未申酉戌亥金木水火土风云雷电山川河湖海星月日光华青松竹梅兰菊"
ORG_SUFFIXES = ("公司", "集团", "银行")
LOC_SUFFIXES = ("市", "省", "县")
NEUTRAL = (
    "我们昨天去了{}参观。",
    "{}最近很受关注。",
    "报道提到了{}的情况。",
    "大家都在讨论{}。",
    "他经常提起{}这个名字。",
    "听说{}变化很大。",
)
ORG_CONTEXT = ("{}宣布了新的计划。", "{}今年利润增长。", "他在{}上班。")
LOC_CONTEXT = ("他出生在{}。", "{}的天气很冷。", "我们搬到了{}。")
PAIR = ("{}和{}都有消息。", "{}与{}之间有合作。")
PLAIN = (
    "今天天气很好。", "我们一起吃饭吧。", "这本书非常有趣。", "明天要开会。",
    "他说这件事不重要。", "大家休息一下。", "会议推迟到下周。", "请把门关上。",
)
TYPE_WORDS = {"ORG": "机构", "LOC": "地点"}


@dataclass
class SynthData:
    scheme: LabelScheme
    train: list[tuple[list[str], tuple[int, ...]]]
    dev: list[tuple[list[str], tuple[int, ...]]]
    test: list[tuple[list[str], tuple[int, ...]]]
    triplets: list[Triplet]
    subjects: dict[str, str]  # ambiguous name -> type

    def write(self, directory: str | Path) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("train", "dev", "test"):
            rows = [(chars, self.scheme.decode(labels)) for chars, labels in getattr(self, name)]
            write_corpus(out / f"{name}.tsv", rows)
        with open(out / "triplets.jsonl", "w", encoding="utf-8") as fh:
            for t in self.triplets:
                fh.write(json.dumps(t._asdict(), ensure_ascii=False, sort_keys=True) + "\n")


def _bigrams(s: str) -> set[str]:
    return {s[i : i + 2] for i in range(len(s) - 1)}


def _names(rng: np.random.Generator, count: int, lengths: tuple[int, ...], banned: set[str]) -> list[str]:
    """Distinct names with no bigram shared with each other or with ``banned``."""
    names: list[str] = []
    used = set(banned)
    while len(names) < count:
        length = int(rng.choice(lengths))
        name = "".join(rng.choice(list(NAME_POOL), size=length))
        grams = _bigrams(name)
        if len(grams) < length - 1 or grams & used:
            continue
        used |= grams
        names.append(name)
    return names


def _fill(template: str, mentions: list[tuple[str, str]]) -> tuple[list[str], list[EntitySpan]]:
    pieces = template.split("{}")
    chars: list[str] = []
    spans = []
    for i, piece in enumerate(pieces):
        chars.extend(piece)
        if i < len(mentions):
            text, etype = mentions[i]
            spans.append(EntitySpan(len(chars), len(chars) + len(text) - 1, etype))
            chars.extend(text)
    return chars, spans


def make_corpus(seed: int = 0, n_sentences: int = 2000, n_subjects: int = 200,
                ambiguous_rate: float = 0.2, test_frac: float = 0.2, dev_frac: float = 0.1,
                held_out_subjects: float = 0.25) -> SynthData:
    rng = np.random.default_rng(seed)
    scheme = LabelScheme(("LOC", "ORG"))
    subjects = _names(rng, n_subjects, (2, 3), set())
    types = ["ORG" if i % 2 == 0 else "LOC" for i in range(n_subjects)]
    rng.shuffle(types)
    subject_type = dict(zip(subjects, types))
    banned = set().union(*(_bigrams(s) for s in subjects))
    cores = _names(rng, 300, (2,), banned)

    n_test = int(round(n_sentences * test_frac))
    n_dev = int(round(n_sentences * dev_frac))
    split = np.array(["train"] * (n_sentences - n_test - n_dev) + ["dev"] * n_dev + ["test"] * n_test)
    rng.shuffle(split)
    n_seen = n_subjects - int(round(n_subjects * held_out_subjects))
    seen, unseen = subjects[:n_seen], subjects[n_seen:]

    def easy():
        etype = "ORG" if rng.random() < 0.5 else "LOC"
        suffix = rng.choice(ORG_SUFFIXES if etype == "ORG" else LOC_SUFFIXES)
        return str(rng.choice(cores)) + str(suffix), etype

    data = {"train": [], "dev": [], "test": []}
    for part in split:
        r = rng.random()
        if r < ambiguous_rate:
            name = str(rng.choice(unseen if part == "test" else seen))
            amb = (name, subject_type[name])
            if rng.random() < 0.25:
                pair = [amb, easy()]
                if rng.random() < 0.5:
                    pair.reverse()
                chars, spans = _fill(str(rng.choice(PAIR)), pair)
            else:
                chars, spans = _fill(str(rng.choice(NEUTRAL)), [amb])
        elif r < ambiguous_rate + (1 - ambiguous_rate) * 0.5:
            text, etype = easy()
            ctx = ORG_CONTEXT if etype == "ORG" else LOC_CONTEXT
            chars, spans = _fill(str(rng.choice(ctx)), [(text, etype)])
        else:
            chars, spans = list(str(rng.choice(PLAIN))), []
        data[str(part)].append((chars, spans_to_labels(spans, len(chars), scheme)))

    triplets = []
    for name in subjects:
        etype = subject_type[name]
        triplets.append(Triplet(name, "类别", TYPE_WORDS[etype]))
        if etype == "ORG":
            triplets.append(Triplet(name, "成立时间", f"{int(rng.integers(1950, 2020))}年"))
        else:
            triplets.append(Triplet(name, "人口", f"{int(rng.integers(5, 900))}万"))
    return SynthData(scheme, data["train"], data["dev"], data["test"], triplets, subject_type)
