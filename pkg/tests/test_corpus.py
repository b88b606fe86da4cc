import pytest

from uncertain_ner.corpus import encode_corpus, format_corpus, parse_corpus, read_corpus, scheme_of, write_corpus
from uncertain_ner.errors import DataFormatError, IllegalSequenceError, SchemeError
from uncertain_ner.tagspace import LabelScheme

TEXT = "甲\tB-ORG\n乙\tE-ORG\n去\tO\n\n丙\tS-LOC\n"


def test_parse_and_roundtrip(tmp_path):
    sents = parse_corpus(TEXT.splitlines(keepends=True))
    assert [s.chars for s in sents] == [["甲", "乙", "去"], ["丙"]]
    assert sents[1].labels == ["S-LOC"] and sents[1].lineno == 5
    path = tmp_path / "c.tsv"
    write_corpus(path, [(s.chars, s.labels) for s in sents])
    assert path.read_text(encoding="utf-8") == TEXT + "\n"
    assert [s.chars for s in read_corpus(path)] == [s.chars for s in sents]


def test_scheme_and_encoding():
    sents = parse_corpus(TEXT.splitlines())
    scheme = scheme_of(sents)
    assert set(scheme.entity_types) == {"LOC", "ORG"}
    enc = encode_corpus(sents, scheme)
    assert scheme.decode(enc[0][1]) == ["B-ORG", "E-ORG", "O"]


def test_errors_cite_lines():
    with pytest.raises(DataFormatError, match="line 2"):
        parse_corpus(["a\tO\n", "ab\tO\n"], "x.tsv")
    with pytest.raises(DataFormatError, match="line 1"):
        parse_corpus(["a\tO\textra\n"])
    with pytest.raises(DataFormatError, match="line 1"):
        parse_corpus(["a\n"])
    with pytest.raises(DataFormatError, match="line 2"):
        parse_corpus(["a\tO\n", "b\t\n"])


def test_unlabeled_input_allowed_when_asked():
    sents = parse_corpus(["a\n", "b\n", "\n"], require_labels=False)
    assert sents[0].labels is None and sents[0].chars == ["a", "b"]
    with pytest.raises(DataFormatError):
        parse_corpus(["a\tO\n", "b\n"], require_labels=False)


def test_scheme_mismatch_and_illegal():
    sents = parse_corpus(TEXT.splitlines())
    with pytest.raises(SchemeError):
        encode_corpus(sents, LabelScheme(("PER",)))
    bad = parse_corpus(["a\tO\n", "\n", "b\tI-X\n", "c\tE-X\n"])
    with pytest.raises(IllegalSequenceError, match="sentence 1"):
        encode_corpus(bad, LabelScheme(("X",)))


def test_format_corpus_blank_line_per_sentence():
    assert format_corpus([(["a"], ["O"]), (["b", "c"], ["B-X", "E-X"])]) == "a\tO\n\nb\tB-X\nc\tE-X\n\n"
