"""Legality-constrained Viterbi and list-Viterbi (k-best) decoding.

A lattice is an ``(n, L)`` array of per-position log-probabilities. Illegal
BIESO transitions, starts and ends get a ``-inf`` mask during the DP.

Ties are resolved deterministically: among equal-score sequences the one with
the smaller label id at the latest differing position wins. Both decoders
implement that same order, so ``topk_viterbi(..., 1)[0] == viterbi(...)``.
"""
from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple

import numpy as np

from uncertain_ner.tagspace import LabelScheme

LOGSUMEXP_TOL = 1e-6


class ScoredSequence(NamedTuple):
    seq: tuple[int, ...]
    score: float


@lru_cache(maxsize=32)
def _masks(scheme: LabelScheme) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return scheme.transition_mask(), scheme.start_mask(), scheme.end_mask()


def check_lattice(lattice: np.ndarray, scheme: LabelScheme | None = None, normalized: bool = True) -> np.ndarray:
    """Validate shape (and optionally log-softmax normalization) of a lattice."""
    lat = np.asarray(lattice, dtype=np.float64)
    if lat.ndim != 2 or lat.shape[0] == 0:
        raise ValueError(f"lattice must be a non-empty (n, L) matrix, got shape {lat.shape}")
    if scheme is not None and lat.shape[1] != scheme.num_labels:
        raise ValueError(f"lattice has {lat.shape[1]} columns, scheme has {scheme.num_labels} labels")
    if normalized:
        m = lat.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(lat - m).sum(axis=1, keepdims=True))).ravel()
        if np.any(np.abs(lse) > LOGSUMEXP_TOL):
            raise ValueError("lattice rows are not log-softmax normalized")
    return lat


def sequence_score(lattice: np.ndarray, seq) -> float:
    """Left-to-right sum of the selected entries (same order the DP uses)."""
    total = 0.0
    for i, lab in enumerate(seq):
        total += float(lattice[i, lab])
    return total


def viterbi(lattice: np.ndarray, scheme: LabelScheme) -> ScoredSequence:
    """Highest-scoring legal label sequence.

    Summed lattices from several fusion passes are not normalized, so no
    normalization check is done here; only the shape is validated.
    """
    lat = check_lattice(lattice, scheme, normalized=False)
    trans, start, end = _masks(scheme)
    n, L = lat.shape
    back = np.zeros((n, L), dtype=np.int64)
    delta = lat[0] + start
    for t in range(1, n):
        cand = delta[:, None] + trans  # (prev, cur)
        # argmax returns the first maximum, i.e. the smaller previous label on ties
        best_prev = np.argmax(cand, axis=0)
        back[t] = best_prev
        delta = cand[best_prev, np.arange(L)] + lat[t]
    final = delta + end
    last = int(np.argmax(final))
    seq = [last]
    for t in range(n - 1, 0, -1):
        seq.append(int(back[t, seq[-1]]))
    seq.reverse()
    return ScoredSequence(tuple(seq), sequence_score(lat, seq))


def topk_viterbi(lattice: np.ndarray, scheme: LabelScheme, k: int) -> list[ScoredSequence]:
    """The ``k`` best distinct legal sequences in nonincreasing score order.

    List-Viterbi: every (position, label) cell keeps its ``k`` best partial
    paths. Cell lists are ordered by (-score, previous label, previous rank),
    which equals ordering by score and then by the reversed label sequence.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    lat = check_lattice(lattice, scheme, normalized=False)
    trans, start, end = _masks(scheme)
    n, L = lat.shape
    allowed_prev = [np.flatnonzero(np.isfinite(trans[:, j])) for j in range(L)]

    # scores[t][j]: 1-d array of partial scores (best first)
    # backs[t][j]: (prev_label, prev_rank) arrays aligned with scores
    scores: list[list[np.ndarray]] = []
    backs: list[list[tuple[np.ndarray, np.ndarray]]] = []
    first = lat[0] + start
    scores.append([np.array([first[j]]) if np.isfinite(first[j]) else np.empty(0) for j in range(L)])
    backs.append([(np.empty(0, np.int64), np.empty(0, np.int64)) for _ in range(L)])

    for t in range(1, n):
        prev = scores[-1]
        cur_scores, cur_backs = [], []
        for j in range(L):
            parts_s, parts_i, parts_r = [], [], []
            for i in allowed_prev[j]:
                s = prev[i]
                if s.size:
                    parts_s.append(s)
                    parts_i.append(np.full(s.size, i, dtype=np.int64))
                    parts_r.append(np.arange(s.size, dtype=np.int64))
            if not parts_s:
                cur_scores.append(np.empty(0))
                cur_backs.append((np.empty(0, np.int64), np.empty(0, np.int64)))
                continue
            cs = np.concatenate(parts_s) + lat[t, j]
            ci = np.concatenate(parts_i)
            cr = np.concatenate(parts_r)
            order = np.lexsort((cr, ci, -cs))[:k]
            cur_scores.append(cs[order])
            cur_backs.append((ci[order], cr[order]))
        scores.append(cur_scores)
        backs.append(cur_backs)

    fs, fj, fr = [], [], []
    for j in range(L):
        if np.isfinite(end[j]) and scores[-1][j].size:
            s = scores[-1][j]
            fs.append(s)
            fj.append(np.full(s.size, j, dtype=np.int64))
            fr.append(np.arange(s.size, dtype=np.int64))
    if not fs:
        return []
    cs, cj, cr = np.concatenate(fs), np.concatenate(fj), np.concatenate(fr)
    order = np.lexsort((cr, cj, -cs))[:k]

    out = []
    for idx in order:
        j, r = int(cj[idx]), int(cr[idx])
        seq = [j]
        for t in range(n - 1, 0, -1):
            pi, pr = backs[t][j]
            j, r = int(pi[r]), int(pr[r])
            seq.append(j)
        seq.reverse()
        out.append(ScoredSequence(tuple(seq), sequence_score(lat, seq)))
    return out
