"""Base character tagger: embedding window -> ReLU layer -> per-position softmax.

Backprop is written out by hand in numpy. The model scores a sentence either
deterministically or with inverted dropout driven by an explicit seed, which
is what Monte-Carlo dropout sampling needs.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from uncertain_ner.decoder import viterbi
from uncertain_ner.errors import ConfigError, IllegalSequenceError
from uncertain_ner.tagspace import LabelScheme, extract_spans, illegal_position

log = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
PAD_ID, UNK_ID = 0, 1
MODEL_VERSION = 1
PARAM_NAMES = ("emb", "w1", "b1", "w2", "b2")


@dataclass
class TaggerConfig:
    d_emb: int = 16
    d_hid: int = 64
    window: int = 2
    dropout: float = 0.1
    lr: float = 0.05
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    unk_prob: float = 0.01
    max_seq_len: int = 128


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax that stays accurate for saturated rows.

    ``log(sum exp)`` is computed as ``max + log1p(sum of the others)`` so the
    tiny losses of confident rows keep full relative precision.
    """
    idx = np.argmax(z, axis=-1)
    m = np.take_along_axis(z, idx[..., None], axis=-1)
    e = np.exp(z - m)
    np.put_along_axis(e, idx[..., None], 0.0, axis=-1)
    return z - m - np.log1p(e.sum(axis=-1, keepdims=True))


@dataclass
class TaggerModel:
    scheme: LabelScheme
    chars: list[str]  # id -> char, ids 0/1 are PAD/UNK
    window: int
    dropout: float
    params: dict[str, np.ndarray]
    _lookup: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._lookup = {c: i for i, c in enumerate(self.chars)}
        emb, w1, b1, w2, b2 = (self.params[k] for k in PARAM_NAMES)
        d_emb = emb.shape[1]
        ok = (
            emb.shape[0] == len(self.chars)
            and w1.shape == ((2 * self.window + 1) * d_emb, b1.shape[0])
            and w2.shape == (w1.shape[1], self.scheme.num_labels)
            and b2.shape == (self.scheme.num_labels,)
        )
        if not ok:
            raise ConfigError("tagger parameter shapes are inconsistent")
        if not all(np.all(np.isfinite(p)) for p in self.params.values()):
            raise ConfigError("tagger parameters contain non-finite values")

    @property
    def d_emb(self) -> int:
        return self.params["emb"].shape[1]

    @property
    def d_hid(self) -> int:
        return self.params["b1"].shape[0]

    def char_ids(self, chars: Sequence[str]) -> np.ndarray:
        return np.array([self._lookup.get(c, UNK_ID) for c in chars], dtype=np.int64)

    def copy(self) -> "TaggerModel":
        return TaggerModel(self.scheme, list(self.chars), self.window, self.dropout,
                           {k: v.copy() for k, v in self.params.items()})

    # -- serialization --------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "kind": "tagger",
            "scheme": self.scheme.to_dict(),
            "char_vocab": self.chars,
            "w": self.window,
            "p": self.dropout,
            "dims": {"vocab": len(self.chars), "d_emb": self.d_emb, "d_hid": self.d_hid,
                     "labels": self.scheme.num_labels},
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaggerModel":
        if d.get("kind") != "tagger" or d.get("version") != MODEL_VERSION:
            raise ConfigError("not a version-1 tagger model file")
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in d["params"].items()}
        return cls(LabelScheme.from_dict(d["scheme"]), list(d["char_vocab"]), int(d["w"]),
                   float(d["p"]), params)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TaggerModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def init_model(scheme: LabelScheme, chars: Sequence[str], cfg: TaggerConfig,
               rng: np.random.Generator) -> TaggerModel:
    vocab = [PAD, UNK] + sorted(set(chars) - {PAD, UNK})
    fan_in = (2 * cfg.window + 1) * cfg.d_emb
    params = {
        "emb": rng.normal(0.0, 0.5, size=(len(vocab), cfg.d_emb)),
        "w1": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, cfg.d_hid)),
        "b1": np.zeros(cfg.d_hid),
        "w2": rng.normal(0.0, np.sqrt(1.0 / cfg.d_hid), size=(cfg.d_hid, scheme.num_labels)),
        "b2": np.zeros(scheme.num_labels),
    }
    params["emb"][PAD_ID] = 0.0
    return TaggerModel(scheme, vocab, cfg.window, cfg.dropout, params)


def _windows(ids: np.ndarray, w: int) -> np.ndarray:
    padded = np.concatenate([np.full(w, PAD_ID), ids, np.full(w, PAD_ID)])
    n = len(ids)
    return np.stack([padded[j : j + n] for j in range(2 * w + 1)], axis=1)


def _forward(model: TaggerModel, win: np.ndarray, rng: np.random.Generator | None, p: float):
    """Forward over a (positions, 2w+1) window-id matrix; returns logp and a cache."""
    emb, w1, b1, w2, b2 = (model.params[k] for k in PARAM_NAMES)
    x = emb[win].reshape(win.shape[0], -1)
    mx = mh = None
    if rng is not None and p > 0.0:
        mx = (rng.random(x.shape) >= p) / (1.0 - p)
        x = x * mx
    pre = x @ w1 + b1
    h = np.maximum(pre, 0.0)
    if rng is not None and p > 0.0:
        mh = (rng.random(h.shape) >= p) / (1.0 - p)
        h = h * mh
    logp = log_softmax(h @ w2 + b2)
    return logp, (win, x, mx, pre, h, mh)


def _backward(model: TaggerModel, logp: np.ndarray, gold: np.ndarray, cache) -> dict[str, np.ndarray]:
    win, x, mx, pre, h, mh = cache
    w1, w2 = model.params["w1"], model.params["w2"]
    n = len(gold)
    dz = np.exp(logp)
    dz[np.arange(n), gold] -= 1.0
    dz /= n
    grads = {"w2": h.T @ dz, "b2": dz.sum(axis=0)}
    dh = dz @ w2.T
    if mh is not None:
        dh = dh * mh
    dpre = dh * (pre > 0)
    grads["w1"] = x.T @ dpre
    grads["b1"] = dpre.sum(axis=0)
    dx = dpre @ w1.T
    if mx is not None:
        dx = dx * mx
    demb = np.zeros_like(model.params["emb"])
    np.add.at(demb, win.ravel(), dx.reshape(win.size, -1))
    grads["emb"] = demb
    return grads


def score(model: TaggerModel, chars: Sequence[str], seed: int | None = None,
          dropout: float | None = None) -> np.ndarray:
    """Log-softmax lattice for one sentence.

    ``seed=None`` is the deterministic pass. With a seed, inverted dropout is
    applied to the embedding window and the hidden layer using a generator
    built from that seed only. ``dropout`` overrides the model's rate.
    """
    if len(chars) == 0:
        raise ValueError("cannot score an empty sentence")
    p = model.dropout if dropout is None else dropout
    rng = None if seed is None else np.random.default_rng(seed)
    logp, _ = _forward(model, _windows(model.char_ids(chars), model.window), rng, p)
    return logp


def hidden_activations(model: TaggerModel, chars: Sequence[str], seed: int | None = None,
                       pre_relu: bool = False) -> np.ndarray:
    """Hidden layer values, after ReLU and hidden dropout unless ``pre_relu``.

    The pre-activation is linear in the dropped-out input, so its mean over
    seeds equals the deterministic value; the post-ReLU mean does not.
    """
    rng = None if seed is None else np.random.default_rng(seed)
    _, cache = _forward(model, _windows(model.char_ids(chars), model.window), rng, model.dropout)
    return cache[3] if pre_relu else cache[4]


def loss_and_grads(model: TaggerModel, chars: Sequence[str], gold: Sequence[int]):
    """Mean per-position cross-entropy of one sentence and its gradients (deterministic)."""
    win = _windows(model.char_ids(chars), model.window)
    gold = np.asarray(gold, dtype=np.int64)
    logp, cache = _forward(model, win, None, 0.0)
    loss = -logp[np.arange(len(gold)), gold].mean()
    return float(loss), _backward(model, logp, gold, cache)


def gradient_check(model: TaggerModel, chars: Sequence[str], gold: Sequence[int],
                   seed: int | None = None, h: float = 1e-4) -> float:
    """Max elementwise relative error between analytic and central-difference gradients."""
    if seed is not None:
        raise ValueError("gradient check requires deterministic mode (no dropout seed)")
    _, grads = loss_and_grads(model, chars, gold)
    worst = 0.0
    for name in PARAM_NAMES:
        p = model.params[name]
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite analytic gradient for {name}")
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp, _ = loss_and_grads(model, chars, gold)
            p[idx] = old - h
            lm, _ = loss_and_grads(model, chars, gold)
            p[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        if not np.all(np.isfinite(num)):
            raise FloatingPointError(f"non-finite numerical gradient for {name}")
        rel = np.abs(g - num) / np.maximum(1e-8, np.abs(g) + np.abs(num))
        worst = max(worst, float(rel.max()))
    return worst


def predict(model: TaggerModel, chars: Sequence[str]) -> tuple[int, ...]:
    return viterbi(score(model, chars), model.scheme).seq


def _check_corpus(corpus, scheme: LabelScheme, max_len: int) -> None:
    if not corpus:
        raise ValueError("training corpus is empty")
    for i, (chars, gold) in enumerate(corpus):
        if len(chars) != len(gold) or len(chars) == 0:
            raise ValueError(f"sentence {i}: length mismatch or empty sentence")
        if len(chars) > max_len:
            raise ValueError(f"sentence {i}: length {len(chars)} exceeds max_seq_len {max_len}")
        bad = illegal_position(gold, scheme)
        if bad is not None:
            raise IllegalSequenceError(f"sentence {i}: illegal gold labels at position {bad}")


def _dev_f1(model: TaggerModel, dev) -> float:
    tp = fp = fn = 0
    for chars, gold in dev:
        pred = extract_spans(predict(model, chars), model.scheme)
        ref = extract_spans(gold, model.scheme)
        tp += len(pred & ref)
        fp += len(pred - ref)
        fn += len(ref - pred)
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def train(corpus: Sequence[tuple[Sequence[str], Sequence[int]]], cfg: TaggerConfig,
          scheme: LabelScheme, dev=None,
          on_epoch_end: Callable[[int, TaggerModel], None] | None = None) -> TaggerModel:
    """Mini-batch gradient descent on mean per-position cross-entropy.

    Returns the epoch-end checkpoint with the best dev F1 (earliest on ties)
    when ``dev`` is given, otherwise the last one. Everything random flows
    from ``cfg.seed``.
    """
    _check_corpus(corpus, scheme, cfg.max_seq_len)
    rng = np.random.default_rng(cfg.seed)
    model = init_model(scheme, [c for chars, _ in corpus for c in chars], cfg, rng)
    data = [(model.char_ids(chars), np.asarray(gold, dtype=np.int64)) for chars, gold in corpus]
    best, best_f1 = model.copy(), -1.0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for b in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[b : b + cfg.batch_size]]
            wins, golds = [], []
            for ids, gold in batch:
                if cfg.unk_prob > 0:
                    ids = np.where(rng.random(len(ids)) < cfg.unk_prob, UNK_ID, ids)
                wins.append(_windows(ids, cfg.window))
                golds.append(gold)
            win = np.concatenate(wins)
            gold = np.concatenate(golds)
            logp, cache = _forward(model, win, rng, cfg.dropout)
            total += -logp[np.arange(len(gold)), gold].sum()
            grads = _backward(model, logp, gold, cache)
            for k in PARAM_NAMES:
                model.params[k] -= cfg.lr * grads[k]
        if on_epoch_end is not None:
            on_epoch_end(epoch, model.copy())
        if dev:
            f1 = _dev_f1(model, dev)
            log.info("tagger epoch %d loss %.4f dev f1 %.4f", epoch + 1, total, f1)
            if f1 > best_f1:
                best, best_f1 = model.copy(), f1
        else:
            best = model.copy()
    return best
