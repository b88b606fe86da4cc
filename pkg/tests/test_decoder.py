import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_ranked, random_lattice
from uncertain_ner.decoder import check_lattice, topk_viterbi, viterbi
from uncertain_ner.tagspace import LabelScheme, is_legal

NEG = -np.inf


def _one_type():
    return LabelScheme(("X",))  # O, B-X, I-X, E-X, S-X


def test_viterbi_two_positions():
    # only O, B-X, E-X are live; B-X at position 0 cannot end the sentence
    s = _one_type()
    lat = np.array([[-0.5, -0.1, NEG, -9.0, NEG],
                    [-0.1, -9.0, NEG, -3.0, NEG]])
    best = viterbi(lat, s)
    assert s.decode(best.seq) == ["O", "O"]
    assert best.score == pytest.approx(-0.6, abs=1e-12)
    top = topk_viterbi(lat, s, 2)
    assert [s.decode(t.seq) for t in top] == [["O", "O"], ["B-X", "E-X"]]
    assert [t.score for t in top] == pytest.approx([-0.6, -3.1], abs=1e-12)


def test_viterbi_single_position():
    s = _one_type()
    lat = np.array([[-2.0, NEG, NEG, NEG, -0.2]])
    best = viterbi(lat, s)
    assert s.decode(best.seq) == ["S-X"]
    assert best.score == pytest.approx(-0.2)


def test_dominant_o_gives_all_o():
    s = LabelScheme(("X", "Y"))
    lat = np.full((5, 9), -20.0)
    lat[:, 0] = -1e-6
    assert viterbi(lat, s).seq == (0,) * 5


def test_k_exceeding_legal_count_returns_all():
    s = LabelScheme(("X", "Y"))
    lat = random_lattice(np.random.default_rng(0), 2, 9)
    full = brute_force_ranked(lat, list(s.labels))
    got = topk_viterbi(lat, s, 500)
    assert len(got) == len(full)
    assert [g.seq for g in got] == [f[0] for f in full]


def test_empty_lattice_and_bad_k():
    s = _one_type()
    with pytest.raises(ValueError):
        viterbi(np.zeros((0, 5)), s)
    with pytest.raises(ValueError):
        topk_viterbi(np.zeros((0, 5)), s, 2)
    with pytest.raises(ValueError):
        topk_viterbi(np.zeros((1, 5)), s, 0)
    with pytest.raises(ValueError):
        viterbi(np.zeros((2, 4)), s)


def test_check_lattice_normalization():
    check_lattice(random_lattice(np.random.default_rng(1), 3, 5))
    with pytest.raises(ValueError):
        check_lattice(np.zeros((2, 5)))


def test_ties_prefer_smaller_label_at_latest_position():
    s = _one_type()
    lat = np.full((2, 5), np.log(0.2))
    ranked = topk_viterbi(lat, s, 20)
    oracle = brute_force_ranked(lat, list(s.labels))
    assert [r.seq for r in ranked] == [o[0] for o in oracle]
    assert viterbi(lat, s).seq == ranked[0].seq


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 2), st.integers(1, 10))
def test_topk_matches_enumeration(seed, n, types, k):
    s = LabelScheme(("X", "Y")[:types])
    rng = np.random.default_rng(seed)
    lat = random_lattice(rng, n, s.num_labels)
    if rng.random() < 0.3:  # quantize to force ties
        lat = np.round(lat)
    oracle = brute_force_ranked(lat, list(s.labels))[:k]
    got = topk_viterbi(lat, s, k)
    assert [g.seq for g in got] == [o[0] for o in oracle]
    np.testing.assert_allclose([g.score for g in got], [o[1] for o in oracle], atol=1e-9, rtol=0)
    assert got[0] == viterbi(lat, s)


@given(st.integers(0, 2**32 - 1), st.integers(1, 7), st.integers(1, 9))
def test_topk_structure(seed, n, k):
    s = LabelScheme(("X", "Y"))
    lat = random_lattice(np.random.default_rng(seed), n, s.num_labels)
    a = topk_viterbi(lat, s, k)
    b = topk_viterbi(lat, s, k + 1)
    assert b[: len(a)] == a
    scores = [x.score for x in a]
    assert scores == sorted(scores, reverse=True)
    assert len({x.seq for x in a}) == len(a)
    assert all(is_legal(x.seq, s) for x in a)
