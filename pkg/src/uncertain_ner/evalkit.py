"""Metrics and diagnostics: entity F1, oracle F1, accuracy splits, SAR/VSR,
uncertainty statistics, the GPU cost model and a parameter sweep."""
from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

from uncertain_ner.tagspace import LabelScheme, extract_spans
from uncertain_ner.uncertainty import UncertainComponent, accepted_candidates

LabelSeq = Sequence[int]


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def _counts(pred: LabelSeq, gold: LabelSeq, scheme: LabelScheme) -> tuple[int, int, int]:
    ps, gs = extract_spans(pred, scheme), extract_spans(gold, scheme)
    tp = len(ps & gs)
    return tp, len(ps) - tp, len(gs) - tp


def entity_f1(pred: Sequence[LabelSeq], gold: Sequence[LabelSeq],
              scheme: LabelScheme) -> tuple[float, float, float]:
    """Micro P/R/F1 over exact (start, end, type) matches; 0 when a denominator vanishes."""
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted sentences vs {len(gold)} gold sentences")
    tp = fp = fn = 0
    for p, g in zip(pred, gold):
        if len(p) != len(g):
            raise ValueError("predicted and gold sentence lengths differ")
        a, b, c = _counts(p, g, scheme)
        tp, fp, fn = tp + a, fp + b, fn + c
    return _prf(tp, fp, fn)


def sentence_f1(pred: LabelSeq, gold: LabelSeq, scheme: LabelScheme) -> float:
    """Sentence-level F1; a sentence with no gold and no predicted entities scores 1."""
    tp, fp, fn = _counts(pred, gold, scheme)
    if tp + fp + fn == 0:
        return 1.0
    return _prf(tp, fp, fn)[2]


def oracle_choice(provisional: LabelSeq, candidates: Sequence[LabelSeq], gold: LabelSeq,
                  scheme: LabelScheme) -> LabelSeq:
    """Option maximizing TP - FP against gold; the provisional result wins ties."""
    best, best_val = provisional, None
    for seq in [provisional, *candidates]:
        tp, fp, _ = _counts(seq, gold, scheme)
        if best_val is None or tp - fp > best_val:
            best, best_val = seq, tp - fp
    return best


def oracle_f1(provisionals: Sequence[LabelSeq], candidates: Sequence[Sequence[LabelSeq]],
              gold: Sequence[LabelSeq], scheme: LabelScheme) -> float:
    chosen = [oracle_choice(p, c, g, scheme) for p, c, g in zip(provisionals, candidates, gold)]
    return entity_f1(chosen, gold, scheme)[2]


def acc_split(pred: Sequence[LabelSeq], gold: Sequence[LabelSeq],
              components: Sequence[Sequence[UncertainComponent]]) -> tuple[float | None, float | None]:
    """Token accuracy outside / inside uncertain components (None when a side is empty)."""
    c_in = n_in = c_out = n_out = 0
    for p, g, comps in zip(pred, gold, components):
        for i, (a, b) in enumerate(zip(p, g)):
            if any(c.start <= i <= c.end for c in comps):
                n_in += 1
                c_in += a == b
            else:
                n_out += 1
                c_out += a == b
    return (c_out / n_out if n_out else None, c_in / n_in if n_in else None)


def token_accuracy(pred: Sequence[LabelSeq], gold: Sequence[LabelSeq]) -> float:
    n = sum(len(g) for g in gold)
    return sum(a == b for p, g in zip(pred, gold) for a, b in zip(p, g)) / n if n else 0.0


def sar_vsr(provisionals: Sequence[LabelSeq], raw: Sequence[Sequence[LabelSeq]],
            kept: Sequence[Sequence[LabelSeq]], gold: Sequence[LabelSeq],
            scheme: LabelScheme) -> tuple[float, float]:
    """Sampling acceptance ratio and valuable sampling ratio.

    ``kept`` holds the surviving candidates per sentence (distinct, different
    from the provisional result, past any filter); both ratios are taken over
    the number of raw candidates generated.
    """
    n_raw = sum(len(r) for r in raw)
    n_kept = sum(len(k) for k in kept)
    if n_kept > n_raw:
        raise ValueError("more kept candidates than generated ones")
    if n_raw == 0:
        return 0.0, 0.0
    valuable = 0
    for p, ks, g in zip(provisionals, kept, gold):
        base = sentence_f1(p, g, scheme)
        valuable += sum(sentence_f1(k, g, scheme) > base for k in ks)
    return n_kept / n_raw, valuable / n_raw


def uncertainty_stats(components: Sequence[Sequence[UncertainComponent]]) -> tuple[int, int]:
    """(sentences with at least one component, total components)."""
    return sum(1 for c in components if c), sum(len(c) for c in components)


@dataclass(frozen=True)
class CostEstimate:
    k: float
    beta: float
    gamma: float
    unit_cost: float
    cost_mc: float
    cost_topk: float


def cost_model(k: float, beta: float, gamma: float, unit_cost: float = 1.0,
               beta_topk: float | None = None) -> CostEstimate:
    """Extra encoder cost of MC dropout, ``(k + beta (1+gamma)^2) C``, and of
    top-K, ``beta (1+gamma)^2 C``; ``beta_topk`` defaults to ``beta``."""
    if min(k, beta, gamma, unit_cost) < 0:
        raise ValueError("cost model inputs must be nonnegative")
    b2 = beta if beta_topk is None else beta_topk
    stage2 = (1.0 + gamma) ** 2
    return CostEstimate(k, beta, gamma, unit_cost, (k + beta * stage2) * unit_cost, b2 * stage2 * unit_cost)


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    base_precision: float
    base_recall: float
    base_f1: float
    oracle_f1: float
    acc_certain: float | None
    acc_uncertain: float | None
    base_acc_certain: float | None
    base_acc_uncertain: float | None
    sar: float
    vsr: float
    size_u: int
    num_uc: int
    sentences: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False)


def report_from_traces(traces, gold: Sequence[LabelSeq], scheme: LabelScheme) -> MetricsReport:
    """Full report for pipeline traces (see :class:`uncertain_ner.pipeline.Trace`)."""
    pred = [t.labels for t in traces]
    prov = [t.provisional.labels for t in traces]
    comps = [t.components for t in traces]
    kept = [accepted_candidates(t.provisional, t.candidates) for t in traces]
    raw = [t.candidates.raw for t in traces]
    p, r, f = entity_f1(pred, gold, scheme)
    bp, br, bf = entity_f1(prov, gold, scheme)
    acc_c, acc_u = acc_split(pred, gold, comps)
    bacc_c, bacc_u = acc_split(prov, gold, comps)
    sar, vsr = sar_vsr(prov, raw, kept, gold, scheme)
    size_u, num_uc = uncertainty_stats(comps)
    return MetricsReport(
        precision=p, recall=r, f1=f, base_precision=bp, base_recall=br, base_f1=bf,
        oracle_f1=oracle_f1(prov, [t.candidates.candidates for t in traces], gold, scheme),
        acc_certain=acc_c, acc_uncertain=acc_u, base_acc_certain=bacc_c, base_acc_uncertain=bacc_u,
        sar=sar, vsr=vsr, size_u=size_u, num_uc=num_uc, sentences=len(gold),
    )


def expand_grid(grid: dict[str, Sequence]) -> list[dict]:
    """Cartesian product of a {param: values} grid, keys in sorted order."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("sweep grid must be nonempty")
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


SWEEP_COLUMNS = ("sar", "vsr", "f1", "oracle_f1", "size_u", "num_uc")


def sweep(grid: dict[str, Sequence], evaluate: Callable[[dict], MetricsReport]) -> list[dict]:
    """Evaluate every grid point; rows carry the point's params plus metric columns."""
    rows = []
    for point in expand_grid(grid):
        rep = evaluate(point)
        row = dict(point)
        row.update({c: getattr(rep, c) for c in SWEEP_COLUMNS})
        rows.append(row)
    return rows


def format_table(rows: Sequence[dict]) -> str:
    """Aligned plain-text table; floats in [0, 1] print with 3 decimals, F1 columns x100."""
    if not rows:
        return ""
    cols = list(rows[0])

    def cell(col, v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{100 * v:.2f}" if col in ("f1", "oracle_f1") else f"{v:.3f}"
        return str(v)

    cells = [[cell(c, r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"
