"""Knowledge fusion model: re-predicts a sentence given retrieved knowledge.

Input is the sentence, a separator and the knowledge characters. Each token
embedding is the sum of a character embedding, a label-context embedding
(provisional label, MASK inside the uncertain component, PAD after the
sentence) and a learned position embedding. A post-LN single-head
transformer encoder (GELU feed-forward) follows, and only the sentence rows are projected to
label log-probabilities.

Forward and backward passes are plain numpy over padded batches.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from uncertain_ner.decoder import viterbi
from uncertain_ner.errors import ConfigError
from uncertain_ner.tagger import log_softmax
from uncertain_ner.tagspace import LabelScheme, extract_spans
from uncertain_ner.uncertainty import UncertainComponent

log = logging.getLogger(__name__)

PAD, UNK, SEP = "<pad>", "<unk>", "[SEP]"
PAD_ID, UNK_ID, SEP_ID = 0, 1, 2
MODEL_VERSION = 1
LN_EPS = 1e-5
# no key bias: it shifts every attention logit of a row equally and never matters
LAYER_PARAMS = ("wq", "bq", "wk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b",
                "wf1", "bf1", "wf2", "bf2", "ln2_g", "ln2_b")


@dataclass
class FusionConfig:
    d_model: int = 32
    layers: int = 2
    d_ff: int = 64
    max_seq_len: int = 512
    lr: float = 3e-3
    batch_size: int = 32
    epochs: int = 10
    alpha: float = 0.1
    seed: int = 0
    optimizer: str = "adam"


@dataclass(frozen=True)
class FusedSample:
    tokens: tuple[str, ...]  # c_1..c_n, SEP, k_1..k_m
    label_ctx: tuple[int, ...]  # label ids, MASK or PAD (ids from the model's layout)
    n: int
    components: tuple[UncertainComponent, ...]
    gold: tuple[int, ...] | None = None
    sid: int | str | None = None

    @property
    def knowledge(self) -> str:
        return "".join(self.tokens[self.n + 1 :])

    def in_component(self, i: int) -> bool:
        return any(c.covers(i) for c in self.components)


def mask_id(scheme: LabelScheme) -> int:
    return scheme.num_labels


def pad_label_id(scheme: LabelScheme) -> int:
    return scheme.num_labels + 1


def build_fused_sample(chars: Sequence[str], l_p: Sequence[int], components: Sequence[UncertainComponent],
                       knowledge: str, scheme: LabelScheme, max_seq_len: int = 512,
                       gold: Sequence[int] | None = None, sid=None) -> FusedSample:
    n = len(chars)
    if len(l_p) != n:
        raise ValueError("provisional labels and sentence differ in length")
    if n >= max_seq_len:
        raise ValueError(f"sentence of length {n} leaves no room under max_seq_len {max_seq_len}")
    for c in components:
        if not 0 <= c.start <= c.end < n:
            raise ValueError(f"component {c} outside sentence")
    knowledge = knowledge[: max_seq_len - n - 1]
    mask, pad = mask_id(scheme), pad_label_id(scheme)
    ctx = []
    for i in range(n):
        ctx.append(mask if any(c.covers(i) for c in components) else int(l_p[i]))
    ctx.extend([pad] * (len(knowledge) + 1))
    tokens = tuple(chars) + (SEP,) + tuple(knowledge)
    return FusedSample(tokens, tuple(ctx), n, tuple(components),
                       None if gold is None else tuple(int(g) for g in gold), sid)


def loss_weights(n: int, components: Sequence[UncertainComponent], alpha: float) -> np.ndarray:
    return np.array([1.0 if any(c.covers(i) for c in components) else alpha for i in range(n)])


def weighted_loss(lattice: np.ndarray, gold: Sequence[int], weights: Sequence[float]) -> float:
    """Position-weighted mean of per-position negative log-likelihoods."""
    lattice = np.asarray(lattice)
    gold = np.asarray(gold, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    if not len(gold) == len(w) <= lattice.shape[0]:
        raise ValueError("gold, weights and lattice rows disagree")
    losses = -lattice[np.arange(len(gold)), gold]
    return float((w * losses).sum() / w.sum())


@dataclass
class FusionModel:
    scheme: LabelScheme
    chars: list[str]
    params: dict[str, np.ndarray]
    layers: int
    _lookup: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._lookup = {c: i for i, c in enumerate(self.chars)}
        d = self.params["char_emb"].shape[1]
        ok = (self.params["char_emb"].shape[0] == len(self.chars)
              and self.params["lab_emb"].shape == (self.scheme.num_labels + 2, d)
              and self.params["pos_emb"].shape[1] == d
              and self.params["out_w"].shape == (d, self.scheme.num_labels))
        for l in range(self.layers):
            ok = ok and self.params[f"l{l}.wq"].shape == (d, d)
        if not ok:
            raise ConfigError("fusion parameter shapes are inconsistent")
        if not all(np.all(np.isfinite(p)) for p in self.params.values()):
            raise ConfigError("fusion parameters contain non-finite values")

    @property
    def d_model(self) -> int:
        return self.params["char_emb"].shape[1]

    @property
    def max_seq_len(self) -> int:
        return self.params["pos_emb"].shape[0]

    @property
    def mask_id(self) -> int:
        return mask_id(self.scheme)

    @property
    def pad_id(self) -> int:
        return pad_label_id(self.scheme)

    def token_ids(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self._lookup.get(t, UNK_ID) for t in tokens], dtype=np.int64)

    def copy(self) -> "FusionModel":
        return FusionModel(self.scheme, list(self.chars),
                           {k: v.copy() for k, v in self.params.items()}, self.layers)

    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "kind": "fusion",
            "scheme": self.scheme.to_dict(),
            "char_vocab": self.chars,
            "mask_id": self.mask_id,
            "pad_id": self.pad_id,
            "layers": self.layers,
            "dims": {"d_model": self.d_model, "max_seq_len": self.max_seq_len,
                     "d_ff": self.params["l0.wf1"].shape[1] if self.layers else 0},
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionModel":
        if d.get("kind") != "fusion" or d.get("version") != MODEL_VERSION:
            raise ConfigError("not a version-1 fusion model file")
        scheme = LabelScheme.from_dict(d["scheme"])
        if d["mask_id"] != mask_id(scheme) or d["pad_id"] != pad_label_id(scheme):
            raise ConfigError("MASK/PAD label-context ids do not match the scheme")
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in d["params"].items()}
        return cls(scheme, list(d["char_vocab"]), params, int(d["layers"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FusionModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def init_model(scheme: LabelScheme, chars: Sequence[str], cfg: FusionConfig,
               rng: np.random.Generator) -> FusionModel:
    vocab = [PAD, UNK, SEP] + sorted(set(chars) - {PAD, UNK, SEP})
    d, f = cfg.d_model, cfg.d_ff

    def dense(a, b):
        return rng.normal(0.0, np.sqrt(1.0 / a), size=(a, b))

    p = {
        "char_emb": rng.normal(0.0, 1.0, size=(len(vocab), d)),
        "lab_emb": rng.normal(0.0, 1.0, size=(scheme.num_labels + 2, d)),
        "pos_emb": rng.normal(0.0, 0.1, size=(cfg.max_seq_len, d)),
    }
    for l in range(cfg.layers):
        for name in ("q", "k", "v", "o"):
            p[f"l{l}.w{name}"] = dense(d, d)
            if name != "k":
                p[f"l{l}.b{name}"] = np.zeros(d)
        p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"] = np.ones(d), np.zeros(d)
        p[f"l{l}.wf1"], p[f"l{l}.bf1"] = dense(d, f), np.zeros(f)
        p[f"l{l}.wf2"], p[f"l{l}.bf2"] = dense(f, d), np.zeros(d)
        p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"] = np.ones(d), np.zeros(d)
    p["out_w"], p["out_b"] = dense(d, scheme.num_labels), np.zeros(scheme.num_labels)
    return FusionModel(scheme, vocab, p, cfg.layers)


# -- batched forward / backward ------------------------------------------

_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def _batch(model: FusionModel, samples: Sequence[FusedSample]):
    T = max(len(s.tokens) for s in samples)
    if T > model.max_seq_len:
        raise ValueError(f"sample length {T} exceeds fusion max_seq_len {model.max_seq_len}")
    B = len(samples)
    tok = np.full((B, T), PAD_ID, dtype=np.int64)
    lab = np.full((B, T), model.pad_id, dtype=np.int64)
    valid = np.zeros((B, T), dtype=bool)
    for b, s in enumerate(samples):
        L = len(s.tokens)
        tok[b, :L] = model.token_ids(s.tokens)
        lab[b, :L] = s.label_ctx
        valid[b, :L] = True
    return tok, lab, valid


def _forward(model: FusionModel, tok, lab, valid):
    P = model.params
    B, T = tok.shape
    d = model.d_model
    x = P["char_emb"][tok] + P["lab_emb"][lab] + P["pos_emb"][:T][None]
    key_bias = np.where(valid, 0.0, -1e30)[:, None, :]  # (B, 1, T)
    caches = []
    for l in range(model.layers):
        g = lambda k: P[f"l{l}.{k}"]  # noqa: E731
        q = x @ g("wq") + g("bq")
        k = x @ g("wk")
        v = x @ g("wv") + g("bv")
        s = q @ k.transpose(0, 2, 1) / np.sqrt(d) + key_bias
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        ctx = a @ v
        r1 = x + ctx @ g("wo") + g("bo")
        y1, ln1 = _layer_norm(r1, g("ln1_g"), g("ln1_b"))
        pre = y1 @ g("wf1") + g("bf1")
        f, tanh_pre = _gelu(pre)
        r2 = y1 + f @ g("wf2") + g("bf2")
        y2, ln2 = _layer_norm(r2, g("ln2_g"), g("ln2_b"))
        caches.append((x, q, k, v, a, ctx, y1, ln1, pre, tanh_pre, f, ln2))
        x = y2
    logp = log_softmax(x @ P["out_w"] + P["out_b"])
    return logp, (x, caches)


def _backward(model: FusionModel, tok, lab, dlogits, cache) -> dict[str, np.ndarray]:
    P = model.params
    d = model.d_model
    x_top, caches = cache
    grads: dict[str, np.ndarray] = {}
    grads["out_w"] = np.einsum("btd,btl->dl", x_top, dlogits)
    grads["out_b"] = dlogits.sum(axis=(0, 1))
    dx = dlogits @ P["out_w"].T
    for l in reversed(range(model.layers)):
        g = lambda k: P[f"l{l}.{k}"]  # noqa: E731
        x, q, k, v, a, ctx, y1, ln1, pre, tanh_pre, f, ln2 = caches[l]
        dr2, grads[f"l{l}.ln2_g"], grads[f"l{l}.ln2_b"] = _layer_norm_back(dx, g("ln2_g"), ln2)
        grads[f"l{l}.wf2"] = np.einsum("btf,btd->fd", f, dr2)
        grads[f"l{l}.bf2"] = dr2.sum(axis=(0, 1))
        dpre = (dr2 @ g("wf2").T) * _gelu_grad(pre, tanh_pre)
        grads[f"l{l}.wf1"] = np.einsum("btd,btf->df", y1, dpre)
        grads[f"l{l}.bf1"] = dpre.sum(axis=(0, 1))
        dy1 = dr2 + dpre @ g("wf1").T
        dr1, grads[f"l{l}.ln1_g"], grads[f"l{l}.ln1_b"] = _layer_norm_back(dy1, g("ln1_g"), ln1)
        grads[f"l{l}.wo"] = np.einsum("btd,bte->de", ctx, dr1)
        grads[f"l{l}.bo"] = dr1.sum(axis=(0, 1))
        dctx = dr1 @ g("wo").T
        da = dctx @ v.transpose(0, 2, 1)
        dv = a.transpose(0, 2, 1) @ dctx
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / np.sqrt(d)
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        dxl = dr1.copy()
        for name, dz in (("q", dq), ("k", dk), ("v", dv)):
            grads[f"l{l}.w{name}"] = np.einsum("btd,bte->de", x, dz)
            if name != "k":
                grads[f"l{l}.b{name}"] = dz.sum(axis=(0, 1))
            dxl += dz @ g(f"w{name}").T
        dx = dxl
    T = tok.shape[1]
    grads["char_emb"] = np.zeros_like(P["char_emb"])
    np.add.at(grads["char_emb"], tok.ravel(), dx.reshape(-1, d))
    grads["lab_emb"] = np.zeros_like(P["lab_emb"])
    np.add.at(grads["lab_emb"], lab.ravel(), dx.reshape(-1, d))
    grads["pos_emb"] = np.zeros_like(P["pos_emb"])
    grads["pos_emb"][:T] = dx.sum(axis=0)
    return grads


def encode_batch(model: FusionModel, samples: Sequence[FusedSample]) -> list[np.ndarray]:
    tok, lab, valid = _batch(model, samples)
    logp, _ = _forward(model, tok, lab, valid)
    return [logp[b, : s.n].copy() for b, s in enumerate(samples)]


def encode(model: FusionModel, sample: FusedSample) -> np.ndarray:
    """Label log-probabilities for the sentence positions of one fused sample."""
    return encode_batch(model, [sample])[0]


def batch_loss_and_grads(model: FusionModel, samples: Sequence[FusedSample], alpha: float,
                         need_grads: bool = True):
    """Mean over samples of the position-weighted loss, with gradients."""
    tok, lab, valid = _batch(model, samples)
    logp, cache = _forward(model, tok, lab, valid)
    dlogits = np.zeros_like(logp)
    total = 0.0
    B = len(samples)
    for b, s in enumerate(samples):
        if s.gold is None:
            raise ValueError("training sample without gold labels")
        w = loss_weights(s.n, s.components, alpha)
        w = w / w.sum()
        gold = np.asarray(s.gold)
        total += float((w * -logp[b, np.arange(s.n), gold]).sum())
        probs = np.exp(logp[b, : s.n])
        probs[np.arange(s.n), gold] -= 1.0
        dlogits[b, : s.n] = probs * (w / B)[:, None]
    if not need_grads:
        return total / B, None
    return total / B, _backward(model, tok, lab, dlogits, cache)


def gradient_check(model: FusionModel, sample: FusedSample, alpha: float = 0.1, h: float = 1e-4) -> float:
    """Max elementwise relative error of analytic vs central-difference gradients."""
    _, grads = batch_loss_and_grads(model, [sample], alpha)
    worst = 0.0
    for name, p in model.params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite analytic gradient for {name}")
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp, _ = batch_loss_and_grads(model, [sample], alpha, need_grads=False)
            p[idx] = old - h
            lm, _ = batch_loss_and_grads(model, [sample], alpha, need_grads=False)
            p[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        rel = np.abs(g - num) / np.maximum(1e-8, np.abs(g) + np.abs(num))
        worst = max(worst, float(rel.max()))
    return worst


def fuse_predict(model: FusionModel, chars: Sequence[str], l_p: Sequence[int],
                 groups: Sequence[tuple[Sequence[UncertainComponent], str]]) -> tuple[int, ...]:
    """Encode every (components, knowledge) group separately, sum the lattices, decode."""
    if not groups:
        raise ValueError("fuse_predict needs at least one component group")
    samples = [build_fused_sample(chars, l_p, comps, know, model.scheme, model.max_seq_len)
               for comps, know in groups]
    return viterbi(sum_lattices(encode_batch(model, samples)), model.scheme).seq


def sum_lattices(lattices: Sequence[np.ndarray]) -> np.ndarray:
    total = np.zeros_like(lattices[0])
    for lat in lattices:
        total = total + lat
    return total


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def dev_f1(model: FusionModel, dev: Sequence[FusedSample]) -> float:
    """Entity F1 over dev sentences, summing lattices of samples sharing a ``sid``."""
    groups: dict = {}
    for s in dev:
        groups.setdefault(s.sid, []).append(s)
    tp = fp = fn = 0
    for sid in sorted(groups, key=str):
        items = groups[sid]
        lat = sum_lattices(encode_batch(model, items))
        pred = extract_spans(viterbi(lat, model.scheme).seq, model.scheme)
        gold = extract_spans(items[0].gold, model.scheme)
        tp += len(pred & gold)
        fp += len(pred - gold)
        fn += len(gold - pred)
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def train_fusion(samples: Sequence[FusedSample], cfg: FusionConfig, scheme: LabelScheme,
                 dev: Sequence[FusedSample] | None = None) -> FusionModel:
    """Mini-batch training on the position-weighted loss.

    Returns the best-dev-F1 epoch checkpoint (earliest on ties) when ``dev``
    is given, else the final one.
    """
    if not samples:
        raise ValueError("no fusion training samples")
    for i, s in enumerate(samples):
        if s.gold is None or len(s.gold) != s.n:
            raise ValueError(f"sample {i}: missing or misaligned gold labels")
        if len(s.tokens) > cfg.max_seq_len:
            raise ValueError(f"sample {i}: length {len(s.tokens)} exceeds max_seq_len")
        if max(s.gold) >= scheme.num_labels or len(s.label_ctx) != len(s.tokens):
            raise ConfigError(f"sample {i}: labels do not fit the scheme")
    rng = np.random.default_rng(cfg.seed)
    model = init_model(scheme, [t for s in samples for t in s.tokens], cfg, rng)
    if cfg.optimizer == "adam":
        opt = _Adam(model.params, cfg.lr)
    elif cfg.optimizer != "sgd":
        raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")
    best, best_f1 = model.copy(), -1.0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for b in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[b : b + cfg.batch_size]]
            loss, grads = batch_loss_and_grads(model, batch, cfg.alpha)
            total += loss * len(batch)
            if cfg.optimizer == "adam":
                opt.step(model.params, grads)
            else:
                for k, g in grads.items():
                    model.params[k] -= cfg.lr * g
        if dev:
            f1 = dev_f1(model, dev)
            log.info("fusion epoch %d loss %.4f dev f1 %.4f", epoch + 1, total / len(samples), f1)
            if f1 > best_f1:
                best, best_f1 = model.copy(), f1
        else:
            log.info("fusion epoch %d loss %.4f", epoch + 1, total / len(samples))
            best = model.copy()
    return best
