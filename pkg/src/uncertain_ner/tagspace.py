"""BIESO label scheme and the span <-> label-sequence conversions.

Label id 0 is always ``O``. For every entity type ``t`` (in declared order)
the scheme appends ``B-t, I-t, E-t, S-t``. Spans are inclusive on both ends.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from uncertain_ner.errors import IllegalSequenceError, SchemeError

OUTSIDE = "O"
PREFIXES = ("B", "I", "E", "S")


class EntitySpan(NamedTuple):
    start: int
    end: int
    etype: str

    @property
    def width(self) -> int:
        return self.end - self.start + 1

    def contains(self, i: int) -> bool:
        return self.start <= i <= self.end


@dataclass(frozen=True)
class LabelScheme:
    entity_types: tuple[str, ...]
    labels: tuple[str, ...] = field(init=False)
    _index: dict = field(init=False, repr=False, compare=False)
    _prefix: tuple = field(init=False, repr=False, compare=False)
    _etype: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        types = tuple(self.entity_types)
        if len(set(types)) != len(types):
            raise SchemeError(f"duplicate entity types in {types}")
        for t in types:
            if not t or "-" in t or t == OUTSIDE:
                raise SchemeError(f"invalid entity type name {t!r}")
        labels = [OUTSIDE] + [f"{p}-{t}" for t in types for p in PREFIXES]
        object.__setattr__(self, "entity_types", types)
        object.__setattr__(self, "labels", tuple(labels))
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(labels)})
        object.__setattr__(self, "_prefix", tuple(lab[0] for lab in labels))
        object.__setattr__(self, "_etype", (None,) + tuple(t for t in types for _ in PREFIXES))

    @classmethod
    def from_labels(cls, labels: Iterable[str]) -> "LabelScheme":
        """Infer a scheme from observed label strings, types in first-seen order."""
        types: list[str] = []
        for lab in labels:
            if lab == OUTSIDE:
                continue
            prefix, _, etype = lab.partition("-")
            if prefix not in PREFIXES or not etype:
                raise SchemeError(f"not a BIESO label: {lab!r}")
            if etype not in types:
                types.append(etype)
        return cls(tuple(types))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    def label_id(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise SchemeError(f"label {label!r} not in scheme {self.entity_types}") from None

    def label_name(self, i: int) -> str:
        self._check_id(i)
        return self.labels[i]

    def encode(self, labels: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.label_id(lab) for lab in labels)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.label_name(i) for i in ids]

    def _check_id(self, i: int) -> None:
        if not 0 <= int(i) < len(self.labels):
            raise SchemeError(f"label id {i} outside scheme with {len(self.labels)} labels")

    # id layout: 0 = O, then 4 consecutive ids per type
    def prefix(self, i: int) -> str:
        self._check_id(i)
        return self._prefix[i]

    def etype(self, i: int) -> str | None:
        self._check_id(i)
        return self._etype[i]

    def id_for(self, prefix: str, etype: str) -> int:
        return self.label_id(f"{prefix}-{etype}")

    def transition_allowed(self, a: int, b: int) -> bool:
        pa, pb = self.prefix(a), self.prefix(b)
        if pa in ("O", "E", "S"):
            return pb in ("O", "B", "S")
        return pb in ("I", "E") and self.etype(a) == self.etype(b)

    def can_start(self, i: int) -> bool:
        return self.prefix(i) in ("O", "B", "S")

    def can_end(self, i: int) -> bool:
        return self.prefix(i) in ("O", "E", "S")

    def transition_mask(self) -> np.ndarray:
        """(L, L) matrix with 0 for allowed a->b and -inf otherwise."""
        n = len(self.labels)
        mask = np.full((n, n), -np.inf)
        for a in range(n):
            for b in range(n):
                if self.transition_allowed(a, b):
                    mask[a, b] = 0.0
        return mask

    def start_mask(self) -> np.ndarray:
        return np.array([0.0 if self.can_start(i) else -np.inf for i in range(len(self.labels))])

    def end_mask(self) -> np.ndarray:
        return np.array([0.0 if self.can_end(i) else -np.inf for i in range(len(self.labels))])

    def to_dict(self) -> dict:
        return {"entity_types": list(self.entity_types), "labels": list(self.labels)}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelScheme":
        scheme = cls(tuple(d["entity_types"]))
        if "labels" in d and list(d["labels"]) != list(scheme.labels):
            raise SchemeError("serialized label list does not match entity types")
        return scheme


def illegal_position(seq: Sequence[int], scheme: LabelScheme) -> int | None:
    """Index of the first position breaking BIESO legality, or None."""
    if len(seq) == 0:
        return None
    if not scheme.can_start(seq[0]):
        return 0
    for i in range(1, len(seq)):
        if not scheme.transition_allowed(seq[i - 1], seq[i]):
            return i
    if not scheme.can_end(seq[-1]):
        return len(seq) - 1
    return None


def is_legal(seq: Sequence[int], scheme: LabelScheme) -> bool:
    return illegal_position(seq, scheme) is None


def extract_spans(seq: Sequence[int], scheme: LabelScheme) -> set[EntitySpan]:
    bad = illegal_position(seq, scheme)
    if bad is not None:
        raise IllegalSequenceError(
            f"illegal BIESO sequence at position {bad}: {scheme.decode(seq)}"
        )
    spans: set[EntitySpan] = set()
    start = None
    for i, lab in enumerate(seq):
        p = scheme.prefix(lab)
        if p == "S":
            spans.add(EntitySpan(i, i, scheme.etype(lab)))
        elif p == "B":
            start = i
        elif p == "E":
            spans.add(EntitySpan(start, i, scheme.etype(lab)))
            start = None
    return spans


def spans_to_labels(spans: Iterable[EntitySpan], n: int, scheme: LabelScheme) -> tuple[int, ...]:
    seq = [0] * n
    taken = [False] * n
    for sp in sorted(spans):
        sp = EntitySpan(*sp)
        if not 0 <= sp.start <= sp.end < n:
            raise ValueError(f"span {sp} outside sentence of length {n}")
        if any(taken[sp.start : sp.end + 1]):
            raise ValueError(f"span {sp} overlaps another span")
        for i in range(sp.start, sp.end + 1):
            taken[i] = True
        if sp.start == sp.end:
            seq[sp.start] = scheme.id_for("S", sp.etype)
        else:
            seq[sp.start] = scheme.id_for("B", sp.etype)
            for i in range(sp.start + 1, sp.end):
                seq[i] = scheme.id_for("I", sp.etype)
            seq[sp.end] = scheme.id_for("E", sp.etype)
    return tuple(seq)
