"""Column corpus files: one ``char<TAB>label`` line per character, blank line between sentences."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from uncertain_ner.errors import DataFormatError, IllegalSequenceError, SchemeError
from uncertain_ner.tagspace import LabelScheme, illegal_position


@dataclass
class Sentence:
    chars: list[str]
    labels: list[str] | None  # None when the file carries no label column
    lineno: int  # line of the first character, for diagnostics

    def __len__(self) -> int:
        return len(self.chars)


def parse_corpus(lines: Iterable[str], source: str | None = None,
                 require_labels: bool = True) -> list[Sentence]:
    sentences: list[Sentence] = []
    chars: list[str] = []
    labels: list[str | None] = []
    first = 0

    def flush():
        if chars:
            labs = None if all(x is None for x in labels) else labels
            if labs is not None and any(x is None for x in labs):
                raise DataFormatError("sentence mixes labeled and unlabeled lines", first, source)
            sentences.append(Sentence(list(chars), None if labs is None else list(labs), first))
        chars.clear()
        labels.clear()

    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if line.strip() == "" and "\t" not in line:
            flush()
            continue
        cols = line.split("\t")
        if len(cols) > 2 or len(cols[0]) != 1:
            raise DataFormatError(f"expected 'char<TAB>label', got {line!r}", lineno, source)
        if len(cols) == 1:
            if require_labels:
                raise DataFormatError(f"missing label column in {line!r}", lineno, source)
            label = None
        else:
            label = cols[1].strip()
            if not label:
                raise DataFormatError("empty label", lineno, source)
        if not chars:
            first = lineno
        chars.append(cols[0])
        labels.append(label)
    flush()
    return sentences


def read_corpus(path: str | Path, require_labels: bool = True) -> list[Sentence]:
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh, str(path), require_labels)


def format_corpus(sentences: Iterable[tuple[Sequence[str], Sequence[str]]]) -> str:
    out = []
    for chars, labels in sentences:
        out.extend(f"{c}\t{lab}\n" for c, lab in zip(chars, labels))
        out.append("\n")
    return "".join(out)


def write_corpus(path: str | Path, sentences: Iterable[tuple[Sequence[str], Sequence[str]]]) -> None:
    Path(path).write_text(format_corpus(sentences), encoding="utf-8")


def encode_corpus(sentences: Sequence[Sentence], scheme: LabelScheme,
                  source: str | None = None) -> list[tuple[list[str], tuple[int, ...]]]:
    """Map label strings to ids; unknown labels raise SchemeError, bad BIESO raises IllegalSequenceError."""
    out = []
    for i, s in enumerate(sentences):
        if s.labels is None:
            raise DataFormatError("sentence has no labels", s.lineno, source)
        ids = scheme.encode(s.labels)
        bad = illegal_position(ids, scheme)
        if bad is not None:
            raise IllegalSequenceError(
                f"{source or 'corpus'}: sentence {i} (line {s.lineno}) has illegal labels at position {bad}")
        out.append((s.chars, ids))
    return out


def scheme_of(sentences: Sequence[Sentence]) -> LabelScheme:
    labels = sorted({lab for s in sentences if s.labels for lab in s.labels})
    try:
        return LabelScheme.from_labels(labels)
    except SchemeError as exc:
        raise DataFormatError(str(exc)) from None
