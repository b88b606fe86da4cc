"""Knowledge sources for uncertain components.

Two back ends are supported: an offline knowledge base built from
(subject, predicate, object) triplets and ranked with Okapi BM25 over
character bigrams, and a replayable search cache keyed by exact query text.
Retrieved material is flattened into one knowledge string by
:func:`assemble_knowledge`.
"""
from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

from uncertain_ner.errors import DataFormatError

K1 = 1.2
B = 0.75
ITEM_CONTENT_CHARS = 50
KNOWLEDGE_CHARS = 400
ITEM_SEP = "|"
CATEGORIES = ("encyclopedia", "other")


class Triplet(NamedTuple):
    subject: str
    predicate: str
    object: str


class KnowledgeDoc(NamedTuple):
    subject: str
    body: str


class SearchItem(NamedTuple):
    title: str
    content: str
    category: str = "other"


def terms(text: str) -> list[str]:
    """Character bigrams; a one-character text is its own single term."""
    if len(text) < 2:
        return [text] if text else []
    return [text[i : i + 2] for i in range(len(text) - 1)]


def read_triplets(path: str | Path) -> Iterator[Triplet]:
    with open(path, encoding="utf-8") as fh:
        yield from parse_triplets(fh, str(path))


def parse_triplets(lines: Iterable[str], source: str | None = None) -> Iterator[Triplet]:
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            t = Triplet(obj["subject"], obj["predicate"], obj["object"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataFormatError(f"malformed triplet ({exc})", lineno, source) from None
        if not all(isinstance(v, str) and v for v in t):
            raise DataFormatError("triplet fields must be nonempty strings", lineno, source)
        yield t


def synthesize_docs(triplets: Iterable[Triplet]) -> list[KnowledgeDoc]:
    """One descriptive document per subject, sorted by subject.

    Body is ``subject + "。"`` followed by ``"predicate:object。"`` for each
    triplet in (predicate, object) order, so input order never matters.
    """
    grouped: dict[str, list[tuple[str, str]]] = defaultdict(list)
    for t in triplets:
        grouped[t.subject].append((t.predicate, t.object))
    docs = []
    for subject in sorted(grouped):
        clauses = "".join(f"{p}:{o}。" for p, o in sorted(grouped[subject]))
        docs.append(KnowledgeDoc(subject, f"{subject}。{clauses}"))
    return docs


@dataclass
class BM25Index:
    postings: dict[str, list[tuple[int, int]]]  # term -> [(doc index, term frequency)]
    doc_len: list[int]
    k1: float = K1
    b: float = B

    @classmethod
    def build(cls, texts: Sequence[str], k1: float = K1, b: float = B) -> "BM25Index":
        postings: dict[str, list[tuple[int, int]]] = defaultdict(list)
        lengths = []
        for i, text in enumerate(texts):
            toks = terms(text)
            lengths.append(len(toks))
            for term, tf in sorted(Counter(toks).items()):
                postings[term].append((i, tf))
        return cls(dict(sorted(postings.items())), lengths, k1, b)

    @property
    def n_docs(self) -> int:
        return len(self.doc_len)

    @property
    def avgdl(self) -> float:
        return sum(self.doc_len) / self.n_docs if self.n_docs else 0.0

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def scores(self, query: str) -> list[float]:
        """BM25 score of every document; each query bigram occurrence counts once."""
        out = [0.0] * self.n_docs
        avgdl = self.avgdl
        for term in terms(query):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for doc, tf in plist:
                norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[doc] / avgdl)
                out[doc] += idf * tf * (self.k1 + 1.0) / (tf + norm)
        return out

    def to_dict(self) -> dict:
        return {"k1": self.k1, "b": self.b, "doc_len": self.doc_len,
                "postings": {t: [list(p) for p in pl] for t, pl in self.postings.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "BM25Index":
        postings = {t: [tuple(p) for p in pl] for t, pl in d["postings"].items()}
        return cls(postings, list(d["doc_len"]), d["k1"], d["b"])


@dataclass
class KnowledgeBase:
    docs: list[KnowledgeDoc]
    index: BM25Index = field(init=False)

    def __post_init__(self) -> None:
        self.index = BM25Index.build([d.body for d in self.docs])

    @classmethod
    def from_triplets(cls, triplets: Iterable[Triplet]) -> "KnowledgeBase":
        return cls(synthesize_docs(triplets))

    def __len__(self) -> int:
        return len(self.docs)

    def save(self, directory: str | Path) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "docs.jsonl", "w", encoding="utf-8") as fh:
            for d in self.docs:
                fh.write(json.dumps({"subject": d.subject, "body": d.body},
                                    ensure_ascii=False, sort_keys=True) + "\n")
        (out / "index.json").write_text(
            json.dumps(self.index.to_dict(), ensure_ascii=False, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "KnowledgeBase":
        src = Path(directory)
        docs = []
        with open(src / "docs.jsonl", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    docs.append(KnowledgeDoc(obj["subject"], obj["body"]))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataFormatError(f"malformed doc ({exc})", lineno, str(src / "docs.jsonl")) from None
        kb = cls(docs)
        idx_path = src / "index.json"
        if idx_path.exists():
            stored = BM25Index.from_dict(json.loads(idx_path.read_text(encoding="utf-8")))
            if stored.doc_len != kb.index.doc_len or stored.postings != kb.index.postings:
                raise DataFormatError("index.json does not match docs.jsonl", path=str(idx_path))
            kb.index = stored
        return kb


def build_kb(triplets: Iterable[Triplet]) -> KnowledgeBase:
    return KnowledgeBase.from_triplets(triplets)


def bm25_query(kb: KnowledgeBase, query: str, top_n: int = 3,
               include_zero: bool = False) -> list[tuple[KnowledgeDoc, float]]:
    """Rank documents by BM25, ties broken by subject.

    Documents sharing no bigram with the query score exactly 0 and are left
    out unless ``include_zero`` is set.
    """
    scores = kb.index.scores(query)
    ranked = sorted(range(len(kb.docs)), key=lambda i: (-scores[i], kb.docs[i].subject))
    out = [(kb.docs[i], scores[i]) for i in ranked if include_zero or scores[i] > 0.0]
    return out[:top_n]


class SearchCache:
    """Exact-match replay of search-engine results loaded from JSONL."""

    def __init__(self, entries: dict[str, list[SearchItem]] | None = None):
        self.entries = dict(entries or {})
        self.misses = 0
        self.missed_queries: list[str] = []

    @classmethod
    def load(cls, path: str | Path) -> "SearchCache":
        entries: dict[str, list[SearchItem]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    items = [SearchItem(it["title"], it["content"], it.get("category", "other"))
                             for it in obj["items"]]
                    query = obj["query"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataFormatError(f"malformed cache entry ({exc})", lineno, str(path)) from None
                for it in items:
                    if it.category not in CATEGORIES:
                        raise DataFormatError(f"unknown category {it.category!r}", lineno, str(path))
                entries[query] = items
        return cls(entries)

    def lookup(self, query: str) -> list[SearchItem]:
        items = self.entries.get(query)
        if items is None:
            self.misses += 1
            self.missed_queries.append(query)
            return []
        return list(items)


def cache_lookup(cache: SearchCache, query: str) -> list[SearchItem]:
    return cache.lookup(query)


def render_item(item: SearchItem, content_chars: int = ITEM_CONTENT_CHARS) -> str:
    return f"{item.title}:{item.content[:content_chars]}"


def assemble_knowledge(items: Sequence[SearchItem] | None = None,
                       docs: Sequence[KnowledgeDoc] | None = None,
                       max_chars: int = KNOWLEDGE_CHARS,
                       content_chars: int = ITEM_CONTENT_CHARS) -> str:
    """Flatten search items or KB documents into one knowledge string.

    Encyclopedia items move to the front, everything else keeps its order.
    Pieces are joined with ``|`` and the result is cut to ``max_chars``.
    """
    if items is not None and docs is not None:
        raise ValueError("pass either search items or documents, not both")
    if items is not None:
        ordered = [it for it in items if it.category == "encyclopedia"]
        ordered += [it for it in items if it.category != "encyclopedia"]
        text = ITEM_SEP.join(render_item(it, content_chars) for it in ordered)
    elif docs is not None:
        text = ITEM_SEP.join(d.body for d in docs)
    else:
        text = ""
    return text[:max_chars]


class Retriever:
    """Query front end over a KB, a search cache, or both (cache first)."""

    def __init__(self, kb: KnowledgeBase | None = None, cache: SearchCache | None = None,
                 mode: str = "kb", top_docs: int = 3, max_chars: int = KNOWLEDGE_CHARS):
        if mode not in ("kb", "cache", "both"):
            raise ValueError(f"unknown retrieval mode {mode!r}")
        if mode in ("kb", "both") and kb is None:
            raise ValueError(f"retrieval mode {mode!r} needs a knowledge base")
        if mode in ("cache", "both") and cache is None:
            raise ValueError(f"retrieval mode {mode!r} needs a search cache")
        self.kb, self.cache, self.mode = kb, cache, mode
        self.top_docs, self.max_chars = top_docs, max_chars

    def __call__(self, query: str) -> str:
        if self.mode in ("cache", "both"):
            items = self.cache.lookup(query)
            if items or self.mode == "cache":
                return assemble_knowledge(items=items, max_chars=self.max_chars)
        docs = [d for d, _ in bm25_query(self.kb, query, self.top_docs)]
        return assemble_knowledge(docs=docs, max_chars=self.max_chars)
