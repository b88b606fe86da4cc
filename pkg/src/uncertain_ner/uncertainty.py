"""Entity-level uncertainty sampling from candidate label sequences."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

from uncertain_ner import tagger as tagger_mod
from uncertain_ner.decoder import topk_viterbi, viterbi
from uncertain_ner.tagger import TaggerModel
from uncertain_ner.tagspace import EntitySpan, LabelScheme, extract_spans

MC_DROPOUT = "mc_dropout"
TOPK = "topk"
METHODS = (MC_DROPOUT, TOPK)
DEFAULT_K = {MC_DROPOUT: 8, TOPK: 4}


class UncertainComponent(NamedTuple):
    start: int
    end: int
    text: str

    def covers(self, i: int) -> bool:
        return self.start <= i <= self.end


@dataclass(frozen=True)
class ProvisionalResult:
    chars: tuple[str, ...]
    labels: tuple[int, ...]
    spans: frozenset[EntitySpan]


@dataclass(frozen=True)
class CandidateSet:
    method: str
    raw: tuple[tuple[int, ...], ...]  # every generated candidate
    candidates: tuple[tuple[int, ...], ...]  # after the single-position filter (top-K only)
    k_requested: int


def provisional_from(chars: Sequence[str], labels: Sequence[int], scheme: LabelScheme) -> ProvisionalResult:
    labels = tuple(int(x) for x in labels)
    return ProvisionalResult(tuple(chars), labels, frozenset(extract_spans(labels, scheme)))


def mc_sample(model: TaggerModel, chars: Sequence[str], k: int = 8, base_seed: int = 0,
              dropout: float | None = None) -> tuple[ProvisionalResult, CandidateSet]:
    """Provisional pass plus ``k`` dropout-active passes seeded ``base_seed + i``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scheme = model.scheme
    l_p = viterbi(tagger_mod.score(model, chars), scheme).seq
    cands = tuple(
        viterbi(tagger_mod.score(model, chars, seed=base_seed + i, dropout=dropout), scheme).seq
        for i in range(k)
    )
    return provisional_from(chars, l_p, scheme), CandidateSet(MC_DROPOUT, cands, cands, k)


def hamming(a: Sequence[int], b: Sequence[int]) -> int:
    return sum(x != y for x, y in zip(a, b))


def topk_sample(model: TaggerModel, chars: Sequence[str], k: int = 4) -> tuple[ProvisionalResult, CandidateSet]:
    """Top-1 legal sequence as provisional, ranks 1..k-1 as candidates.

    Candidates differing from the provisional result at exactly one position
    are dropped.
    """
    if k < 2:
        raise ValueError("top-K sampling needs k >= 2")
    scheme = model.scheme
    ranked = topk_viterbi(tagger_mod.score(model, chars), scheme, k)
    l_p = ranked[0].seq
    raw = tuple(r.seq for r in ranked[1:])
    kept = tuple(c for c in raw if hamming(c, l_p) != 1)
    return provisional_from(chars, l_p, scheme), CandidateSet(TOPK, raw, kept, k)


def sample(model: TaggerModel, chars: Sequence[str], method: str, k: int | None = None,
           base_seed: int = 0, dropout: float | None = None) -> tuple[ProvisionalResult, CandidateSet]:
    if method not in METHODS:
        raise ValueError(f"unknown sampling method {method!r}")
    k = DEFAULT_K[method] if k is None else k
    if method == MC_DROPOUT:
        return mc_sample(model, chars, k, base_seed, dropout)
    return topk_sample(model, chars, k)


def uncertain_entities(provisional: ProvisionalResult, cand: Sequence[int],
                       scheme: LabelScheme) -> set[EntitySpan]:
    if len(cand) != len(provisional.labels):
        raise ValueError("candidate length differs from the provisional result")
    return set(extract_spans(cand, scheme) ^ provisional.spans)


def merge_components(uncertain: Iterable, chars: Sequence[str]) -> list[UncertainComponent]:
    """Merge overlapping or touching spans into components sorted by start.

    Accepts anything with ``start``/``end`` attributes (spans or components),
    so merging already-merged components is a no-op.
    """
    spans = sorted((s.start, s.end) for s in uncertain)
    merged: list[list[int]] = []
    for start, end in spans:
        if not 0 <= start <= end < len(chars):
            raise ValueError(f"span ({start}, {end}) outside sentence of length {len(chars)}")
        if merged and start <= merged[-1][1] + 1:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [UncertainComponent(s, e, "".join(chars[s : e + 1])) for s, e in merged]


def components_from(provisional: ProvisionalResult, cands: CandidateSet,
                    scheme: LabelScheme) -> list[UncertainComponent]:
    uncertain: set[EntitySpan] = set()
    for c in cands.candidates:
        uncertain |= uncertain_entities(provisional, c, scheme)
    return merge_components(uncertain, provisional.chars)


def accepted_candidates(provisional: ProvisionalResult, cands: CandidateSet) -> list[tuple[int, ...]]:
    """Filtered candidates that differ from the provisional result, deduplicated in order."""
    seen = {provisional.labels}
    out = []
    for c in cands.candidates:
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out
