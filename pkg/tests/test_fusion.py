import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import weighted_loss_by_hand
from uncertain_ner.decoder import viterbi
from uncertain_ner.errors import ConfigError
from uncertain_ner.fusion import (
    FusionConfig,
    FusionModel,
    batch_loss_and_grads,
    build_fused_sample,
    encode,
    encode_batch,
    fuse_predict,
    gradient_check,
    init_model,
    loss_weights,
    mask_id,
    pad_label_id,
    train_fusion,
    weighted_loss,
)
from uncertain_ner.tagspace import LabelScheme
from uncertain_ner.uncertainty import UncertainComponent as UC

SX = LabelScheme(("X",))
SLO = LabelScheme(("LOC", "ORG"))
TINY = FusionConfig(d_model=8, layers=1, d_ff=8, max_seq_len=16)


def tiny_model(seed=0, scheme=SX, cfg=TINY, chars="abcdk"):
    return init_model(scheme, list(chars), cfg, np.random.default_rng(seed))


def test_label_context_example():
    s = build_fused_sample(list("abc"), SX.encode(["O", "S-X", "O"]), [UC(1, 1, "b")], "kk", SX)
    M, P = mask_id(SX), pad_label_id(SX)
    assert (M, P) == (5, 6)
    assert s.label_ctx == (0, M, 0, P, P, P)
    assert s.tokens == ("a", "b", "c", "[SEP]", "k", "k")
    assert s.knowledge == "kk"


def test_no_components_and_empty_knowledge():
    s = build_fused_sample(list("ab"), (0, 4), [], "", SX)
    assert mask_id(SX) not in s.label_ctx
    assert s.tokens == ("a", "b", "[SEP]")
    assert s.label_ctx == (0, 4, pad_label_id(SX))


def test_length_limits():
    with pytest.raises(ValueError):
        build_fused_sample(list("abcd"), (0,) * 4, [], "", SX, max_seq_len=4)
    s = build_fused_sample(list("abcd"), (0,) * 4, [], "k" * 50, SX, max_seq_len=10)
    assert len(s.tokens) == 10 and s.knowledge == "kkkkk"


@given(st.integers(1, 12), st.integers(0, 10), st.data())
def test_label_context_three_cases(n, m, data):
    l_p = tuple(data.draw(st.lists(st.sampled_from([0, 4]), min_size=n, max_size=n)))
    starts = data.draw(st.lists(st.integers(0, n - 1), max_size=3))
    comps = [UC(a, min(n - 1, a + data.draw(st.integers(0, 2))), "") for a in starts]
    s = build_fused_sample(["a"] * n, l_p, comps, "k" * m, SX)
    M, P = mask_id(SX), pad_label_id(SX)
    assert len(s.tokens) == len(s.label_ctx) == n + m + 1
    for i, v in enumerate(s.label_ctx):
        inside = i < n and any(c.start <= i <= c.end for c in comps)
        cases = [i < n and not inside and v == l_p[i], inside and v == M, i >= n and v == P]
        assert sum(cases) == 1


def test_weighted_loss_examples():
    lat = -np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    gold = [0, 0, 0]
    comps = [UC(1, 1, "")]
    assert weighted_loss(lat, gold, loss_weights(3, comps, 0.1)) == pytest.approx(2.0)
    assert weighted_loss(lat, gold, loss_weights(3, comps, 1.0)) == pytest.approx(2.0)
    everywhere = [UC(0, 2, "")]
    for alpha in (0.0, 0.3, 1.0):
        assert weighted_loss(lat, gold, loss_weights(3, everywhere, alpha)) == pytest.approx(2.0)


@given(st.integers(1, 8), st.floats(0.01, 1.0), st.data())
def test_weighted_loss_formula(n, alpha, data):
    losses = data.draw(st.lists(st.floats(0.0, 20.0), min_size=n, max_size=n))
    inside = data.draw(st.lists(st.booleans(), min_size=n, max_size=n))
    comps = [UC(i, i, "") for i, f in enumerate(inside) if f]
    lat = -np.array(losses)[:, None] * np.ones((1, 2))
    got = weighted_loss(lat, [0] * n, loss_weights(n, comps, alpha))
    assert got == pytest.approx(weighted_loss_by_hand(losses, inside, alpha), rel=1e-12, abs=1e-12)
    if alpha == 1.0 or all(inside):
        assert got == pytest.approx(np.mean(losses), rel=1e-12, abs=1e-12)


def test_knowledge_positions_carry_no_loss():
    m = tiny_model(1)
    s = build_fused_sample(list("abc"), (0, 4, 0), [UC(1, 1, "b")], "kd", SX, 16, gold=(0, 4, 0))
    base, _ = batch_loss_and_grads(m, [s], 0.1, need_grads=False)
    lat = encode(m, s)
    assert base == pytest.approx(weighted_loss(lat, s.gold, loss_weights(3, s.components, 0.1)), abs=1e-12)
    # a longer lattice (rows beyond n) does not change the loss
    padded = np.vstack([lat, np.zeros((4, lat.shape[1]))])
    assert weighted_loss(padded, s.gold, loss_weights(3, s.components, 0.1)) == pytest.approx(base, abs=1e-12)


def test_alpha_one_is_unweighted_mean():
    m = tiny_model(2)
    s = build_fused_sample(list("abcd"), (0, 1, 3, 0), [UC(1, 2, "bc")], "k", SX, 16, gold=(0, 1, 3, 4))
    loss, _ = batch_loss_and_grads(m, [s], 1.0, need_grads=False)
    lat = encode(m, s)
    assert loss == pytest.approx(-np.mean(lat[np.arange(4), list(s.gold)]), abs=1e-12)


def test_encode_normalized_and_sentence_only():
    m = tiny_model(3)
    s = build_fused_sample(list("abc"), (0, 0, 0), [UC(0, 0, "a")], "kkd", SX, 16)
    lat = encode(m, s)
    assert lat.shape == (3, SX.num_labels)
    np.testing.assert_allclose(np.logaddexp.reduce(lat, axis=1), 0.0, atol=1e-6)


def test_zero_attention_output_ignores_knowledge():
    m = tiny_model(4)
    m.params["l0.wo"][:] = 0.0
    a = build_fused_sample(list("abc"), (0, 0, 0), [UC(1, 1, "b")], "kkd", SX, 16)
    b = build_fused_sample(list("abc"), (0, 0, 0), [UC(1, 1, "b")], "dkk", SX, 16)
    np.testing.assert_allclose(encode(m, a), encode(m, b), atol=1e-12)


def test_batching_matches_single():
    m = tiny_model(5)
    ss = [build_fused_sample(list("ab"), (0, 0), [UC(0, 0, "a")], "k", SX, 16),
          build_fused_sample(list("abcd"), (0, 0, 0, 0), [], "kkkd", SX, 16)]
    for lat, s in zip(encode_batch(m, ss), ss):
        np.testing.assert_allclose(lat, encode(m, s), atol=1e-12)


def test_gradient_check_tiny():
    rng = np.random.default_rng(0)
    for t in range(3):
        m = tiny_model(t)
        n = int(rng.integers(2, 5))
        gold = tuple(int(x) for x in rng.choice([0, 4], n))
        s = build_fused_sample(list(rng.choice(list("abcz"), n)), gold, [UC(0, 0, "")],
                               "".join(rng.choice(list("kd"), 3)), SX, 16, gold=gold)
        assert gradient_check(m, s, alpha=0.1) < 1e-3


def test_fuse_predict_group_algebra():
    m = tiny_model(6)
    chars, l_p = list("abcd"), (0, 0, 0, 0)
    g1 = ([UC(1, 1, "b")], "kd")
    g2 = ([UC(3, 3, "d")], "dk")
    lat1 = encode(m, build_fused_sample(chars, l_p, *g1, SX, 16))
    lat2 = encode(m, build_fused_sample(chars, l_p, *g2, SX, 16))
    assert fuse_predict(m, chars, l_p, [g1]) == viterbi(lat1, SX).seq
    assert fuse_predict(m, chars, l_p, [g1, g1]) == viterbi(lat1, SX).seq
    assert fuse_predict(m, chars, l_p, [g1, g2]) == viterbi((lat1 + lat2) / 2, SX).seq
    with pytest.raises(ValueError):
        fuse_predict(m, chars, l_p, [])


def test_model_roundtrip(tmp_path):
    m = tiny_model(7)
    m.save(tmp_path / "f.json")
    back = FusionModel.load(tmp_path / "f.json")
    assert back.scheme == m.scheme and back.chars == m.chars and back.layers == m.layers
    for k, v in m.params.items():
        assert back.params[k].tobytes() == v.tobytes()


def test_training_rejects_bad_samples():
    s = build_fused_sample(list("ab"), (0, 0), [], "", SX, 16)
    with pytest.raises(ValueError):
        train_fusion([s], TINY, SX)
    with pytest.raises(ValueError):
        train_fusion([], TINY, SX)
    bad = build_fused_sample(list("ab"), (0, 0), [], "", SX, 16, gold=(0, 9))
    with pytest.raises(ConfigError):
        train_fusion([bad], TINY, SX)


NAMES = "甲乙丙丁戊己庚辛壬癸子丑寅卯"


def knowledge_toy(n, seed):
    """'到X了' with X masked; only the knowledge text says whether X is a place or an organization."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        name = str(rng.choice(list(NAMES)))
        etype = "ORG" if rng.random() < 0.5 else "LOC"
        gold = SLO.encode(["O", f"S-{etype}", "O"])
        know = name + ("是机构" if etype == "ORG" else "是地点")
        out.append(build_fused_sample(["到", name, "了"], SLO.encode(["O", "S-LOC", "O"]),
                                      [UC(1, 1, name)], know, SLO, 32, gold=gold, sid=i))
    return out


def test_knowledge_decides_masked_label():
    cfg = FusionConfig(d_model=32, layers=1, d_ff=32, max_seq_len=32, epochs=30, lr=3e-3, seed=0)
    model = train_fusion(knowledge_toy(200, 0), cfg, SLO)
    test = knowledge_toy(100, 1)
    hits = [viterbi(encode(model, s), SLO).seq[1] == s.gold[1] for s in test]
    assert np.mean(hits) >= 0.9
    flipped = build_fused_sample(["到", "甲", "了"], SLO.encode(["O", "S-LOC", "O"]), [UC(1, 1, "甲")],
                                 "甲是机构", SLO, 32)
    other = build_fused_sample(["到", "甲", "了"], SLO.encode(["O", "S-LOC", "O"]), [UC(1, 1, "甲")],
                               "甲是地点", SLO, 32)
    assert not np.allclose(encode(model, flipped), encode(model, other))
