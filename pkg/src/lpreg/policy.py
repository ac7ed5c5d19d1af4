"""Small autoregressive categorical policy with an analytic gradient engine.

The architecture is static: token embeddings for a fixed context window are
concatenated (optionally joined by a single-head attention read-out), passed
through two tanh layers and projected to one logit per vocabulary entry.
Gradients come from hand-written reverse-mode accumulation over that recipe
and are certified against central finite differences in the test-suite.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

LOG_CLAMP = 1e-12

DIGITS = tuple(str(d) for d in range(10))
SPECIALS = ("<pad>", "<end>", "<sep>", "ALT", "MOD", "SEQ", "SPK", "+", "-", "=", "copy", "rev")
LETTERS = tuple("abcdefgh")


class NumericalError(FloatingPointError):
    """Raised when a parameter block, loss or gradient stops being finite."""


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    designated: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        if not self.tokens:
            raise ValueError("vocabulary must be non-empty")
        seen: set[int] = set()
        for name, ids in self.designated.items():
            for i in ids:
                if not 0 <= i < len(self.tokens):
                    raise ValueError(f"designated set {name!r} has out-of-range id {i}")
                if i in seen:
                    raise ValueError(f"designated sets overlap at id {i}")
                seen.add(i)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.tokens.index(token)

    def ids(self, tokens) -> list[int]:
        return [self.tokens.index(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    @property
    def pad(self) -> int:
        return self.id("<pad>")

    @property
    def end(self) -> int:
        return self.id("<end>")

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens),
                "designated": {k: list(v) for k, v in sorted(self.designated.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["tokens"]), {k: tuple(v) for k, v in d.get("designated", {}).items()})


def default_vocabulary(size: int = 64) -> Vocabulary:
    """Digits first (so an all-tied greedy policy emits "0"), then structure, then noise symbols.

    ``ALT`` is the designated spark token; the ``~NN`` filler symbols are never
    part of any correct answer and form the designated irrelevant class.
    """
    base = DIGITS + SPECIALS + LETTERS
    if size < len(base) + 1:
        raise ValueError(f"vocabulary size must be at least {len(base) + 1}, got {size}")
    noise = tuple(f"~{i:02d}" for i in range(size - len(base)))
    tokens = base + noise
    return Vocabulary(tokens, {
        "spark": (tokens.index("ALT"),),
        "irrelevant": tuple(range(len(base), size)),
    })


BLOCK_ORDER = ("emb", "Wq", "Wk", "Wv", "W1", "b1", "W2", "b2", "Wo", "bo")


@dataclass
class PolicyParams:
    blocks: dict[str, np.ndarray]
    context_window: int
    hidden_size: int
    embed_dim: int
    attention: bool = False

    @property
    def vocab_size(self) -> int:
        return self.blocks["emb"].shape[0]

    def names(self) -> list[str]:
        return [n for n in BLOCK_ORDER if n in self.blocks]

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.blocks.items()}, self.context_window,
                            self.hidden_size, self.embed_dim, self.attention)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.blocks.items()}

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.blocks[n].ravel() for n in self.names()])

    def with_vector(self, vec: np.ndarray) -> "PolicyParams":
        out = self.copy()
        pos = 0
        for n in self.names():
            size = out.blocks[n].size
            out.blocks[n] = np.asarray(vec[pos:pos + size], dtype=np.float64).reshape(out.blocks[n].shape).copy()
            pos += size
        return out

    def check_finite(self):
        for n in self.names():
            if not np.all(np.isfinite(self.blocks[n])):
                raise NumericalError(f"non-finite values in parameter block {n!r}")


def init_params(vocab_size: int, context_window: int = 8, embed_dim: int = 16, hidden_size: int = 64,
                seed: int = 0, attention: bool = False, output_scale: float = 0.1) -> PolicyParams:
    rng = np.random.default_rng(seed)
    d_in = context_window * embed_dim + (embed_dim if attention else 0)
    blocks = {"emb": rng.normal(0.0, 1.0, (vocab_size, embed_dim))}
    if attention:
        for n in ("Wq", "Wk", "Wv"):
            blocks[n] = rng.normal(0.0, 1.0 / math.sqrt(embed_dim), (embed_dim, embed_dim))
    blocks["W1"] = rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, hidden_size))
    blocks["b1"] = np.zeros(hidden_size)
    blocks["W2"] = rng.normal(0.0, 1.0 / math.sqrt(hidden_size), (hidden_size, hidden_size))
    blocks["b2"] = np.zeros(hidden_size)
    blocks["Wo"] = rng.normal(0.0, output_scale / math.sqrt(hidden_size), (hidden_size, vocab_size))
    blocks["bo"] = np.zeros(vocab_size)
    return PolicyParams(blocks, context_window, hidden_size, embed_dim, attention)


def zero_params(vocab_size: int, context_window: int = 8, embed_dim: int = 16, hidden_size: int = 64,
                attention: bool = False) -> PolicyParams:
    p = init_params(vocab_size, context_window, embed_dim, hidden_size, seed=0, attention=attention)
    return PolicyParams(p.zeros_like(), context_window, hidden_size, embed_dim, attention)


# ---------------------------------------------------------------- forward / backward

def context_window_of(tokens, window: int, pad: int) -> np.ndarray:
    """Last ``window`` tokens, left-padded."""
    tokens = list(tokens)[-window:]
    return np.array([pad] * (window - len(tokens)) + tokens, dtype=np.int64)


def _forward(params: PolicyParams, contexts: np.ndarray):
    b = params.blocks
    n, w = contexts.shape
    if w != params.context_window:
        raise ValueError(f"context width {w} != context_window {params.context_window}")
    E = b["emb"][contexts]
    x = E.reshape(n, -1)
    cache = {"contexts": contexts, "E": E}
    if params.attention:
        scale = 1.0 / math.sqrt(params.embed_dim)
        q = E[:, -1] @ b["Wq"]
        k = E @ b["Wk"]
        v = E @ b["Wv"]
        s = np.einsum("nd,nwd->nw", q, k) * scale
        s -= s.max(axis=1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=1, keepdims=True)
        att = np.einsum("nw,nwd->nd", a, v)
        x = np.concatenate([x, att], axis=1)
        cache.update(q=q, k=k, v=v, a=a)
    h1 = np.tanh(x @ b["W1"] + b["b1"])
    h2 = np.tanh(h1 @ b["W2"] + b["b2"])
    logits = h2 @ b["Wo"] + b["bo"]
    cache.update(x=x, h1=h1, h2=h2)
    return logits, cache


def forward_batch(params: PolicyParams, contexts: np.ndarray, keep_cache: bool = False):
    """Logits for each row of an ``(N, context_window)`` token-id matrix."""
    params.check_finite()
    contexts = np.asarray(contexts, dtype=np.int64)
    if contexts.ndim != 2:
        raise ValueError("contexts must be 2-D")
    if contexts.size and (contexts.min() < 0 or contexts.max() >= params.vocab_size):
        raise ValueError("context token id out of range")
    logits, cache = _forward(params, contexts)
    return (logits, cache) if keep_cache else logits


def forward_logits(params: PolicyParams, context, pad: int = 0) -> np.ndarray:
    ctx = context_window_of(context, params.context_window, pad)
    return forward_batch(params, ctx[None, :])[0]


def backward(params: PolicyParams, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given dLoss/dlogits for every row of a cached forward pass."""
    b = params.blocks
    g = {}
    h1, h2, x, E = cache["h1"], cache["h2"], cache["x"], cache["E"]
    n, w, d = E.shape
    g["Wo"] = h2.T @ dlogits
    g["bo"] = dlogits.sum(axis=0)
    dz2 = (dlogits @ b["Wo"].T) * (1.0 - h2 * h2)
    g["W2"] = h1.T @ dz2
    g["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ b["W2"].T) * (1.0 - h1 * h1)
    g["W1"] = x.T @ dz1
    g["b1"] = dz1.sum(axis=0)
    dx = dz1 @ b["W1"].T
    dE = dx[:, :w * d].reshape(n, w, d).copy()
    if params.attention:
        scale = 1.0 / math.sqrt(d)
        q, k, v, a = cache["q"], cache["k"], cache["v"], cache["a"]
        datt = dx[:, w * d:]
        da = np.einsum("nd,nwd->nw", datt, v)
        dv = a[:, :, None] * datt[:, None, :]
        ds = a * (da - (a * da).sum(axis=1, keepdims=True)) * scale
        dq = np.einsum("nw,nwd->nd", ds, k)
        dk = ds[:, :, None] * q[:, None, :]
        g["Wq"] = E[:, -1].T @ dq
        g["Wk"] = np.einsum("nwd,nwe->de", E, dk)
        g["Wv"] = np.einsum("nwd,nwe->de", E, dv)
        dE += dk @ b["Wk"].T + dv @ b["Wv"].T
        dE[:, -1] += dq @ b["Wq"].T
    demb = np.zeros_like(b["emb"])
    np.add.at(demb, cache["contexts"].ravel(), dE.reshape(n * w, d))
    g["emb"] = demb
    return g


# ---------------------------------------------------------------- distributions

@dataclass
class TokenDistribution:
    probs: np.ndarray
    log_probs: np.ndarray
    entropy: float


def log_softmax_rows(logits: np.ndarray, temperature: float = 1.0):
    """Row-wise (probs, log_probs, entropy) with max-subtraction."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_probs = z - lse
    probs = np.exp(log_probs)
    entropy = -(probs * log_probs).sum(axis=-1)
    return probs, log_probs, np.maximum(entropy, 0.0)


def next_token_distribution(logits, temperature: float = 1.0) -> TokenDistribution:
    probs, log_probs, entropy = log_softmax_rows(np.asarray(logits, dtype=np.float64), temperature)
    return TokenDistribution(probs, log_probs, float(entropy))


# ---------------------------------------------------------------- sampling

@dataclass
class Trajectory:
    prompt: list[int]
    output: list[int]
    step_probs: list[float]
    step_distributions: list[np.ndarray] | None = None
    terminated: bool = False

    def __post_init__(self):
        if len(self.output) != len(self.step_probs):
            raise ValueError("output and step_probs lengths differ")


def _draw(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    # inverse CDF on (0, total]; never lands on a zero-probability entry
    cdf = np.cumsum(probs, axis=1)
    x = (1.0 - u) * cdf[:, -1]
    tok = (cdf < x[:, None]).sum(axis=1)
    return np.minimum(tok, probs.shape[1] - 1)


def sample_batch(params: PolicyParams, prompts, max_lens, rng: np.random.Generator, end: int, pad: int,
                 temperature: float = 1.0, greedy: bool = False, retain_distributions: bool = False
                 ) -> list[Trajectory]:
    """Decode all prompts in lock-step; rows leave the batch at ``end`` or their length cap."""
    n = len(prompts)
    max_lens = np.broadcast_to(np.asarray(max_lens, dtype=np.int64), (n,))
    if np.any(max_lens < 1):
        raise ValueError("max_len must be positive")
    for p in prompts:
        if len(p) == 0:
            raise ValueError("prompt must be non-empty")
    w = params.context_window
    ctx = np.stack([context_window_of(p, w, pad) for p in prompts]) if n else np.zeros((0, w), np.int64)
    outs = [[] for _ in range(n)]
    probs_out = [[] for _ in range(n)]
    dists = [[] for _ in range(n)] if retain_distributions else None
    done = np.zeros(n, dtype=bool)
    terminated = np.zeros(n, dtype=bool)
    for t in range(int(max_lens.max()) if n else 0):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        probs, _, _ = log_softmax_rows(forward_batch(params, ctx[active]), temperature)
        if greedy:
            tok = probs.argmax(axis=1)
        else:
            tok = _draw(probs, rng.random(active.size))
        for j, row in enumerate(active):
            outs[row].append(int(tok[j]))
            probs_out[row].append(float(probs[j, tok[j]]))
            if dists is not None:
                dists[row].append(probs[j].copy())
        ctx[active] = np.concatenate([ctx[active, 1:], tok[:, None]], axis=1)
        hit_end = tok == end
        terminated[active[hit_end]] = True
        done[active[hit_end | (t + 1 >= max_lens[active])]] = True
    return [Trajectory(list(prompts[i]), outs[i], probs_out[i],
                       dists[i] if dists is not None else None, bool(terminated[i])) for i in range(n)]


def sample_sequence(params: PolicyParams, prompt, max_len: int, seed: int, end: int = 11, pad: int = 10,
                    temperature: float = 1.0, retain_distributions: bool = False) -> Trajectory:
    rng = np.random.default_rng(seed)
    return sample_batch(params, [list(prompt)], max_len, rng, end, pad, temperature,
                        retain_distributions=retain_distributions)[0]


def mean_step_entropy(trajectories) -> float:
    ents = []
    for tr in trajectories:
        if tr.step_distributions is None:
            raise ValueError("trajectory has no retained step distributions")
        for p in tr.step_distributions:
            p = np.asarray(p)
            nz = p > 0
            ents.append(float(-(p[nz] * np.log(p[nz])).sum()))
    if not ents:
        raise ValueError("mean_step_entropy of an empty batch")
    return float(np.mean(ents))


# ---------------------------------------------------------------- gradient engine

class Loss(Protocol):
    def value(self, params: PolicyParams) -> float: ...

    def gradient(self, params: PolicyParams) -> dict[str, np.ndarray]: ...


def grad(loss: Loss, params: PolicyParams) -> dict[str, np.ndarray]:
    g = loss.gradient(params)
    for n in params.names():
        if n not in g:
            g[n] = np.zeros_like(params.blocks[n])
        if g[n].shape != params.blocks[n].shape:
            raise ValueError(f"gradient block {n!r} has shape {g[n].shape}, expected {params.blocks[n].shape}")
        if not np.all(np.isfinite(g[n])):
            raise NumericalError(f"non-finite gradient in block {n!r}")
    return g


def flatten_grads(params: PolicyParams, g: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([g[n].ravel() for n in params.names()])


def finite_difference_check(loss: Loss, params: PolicyParams, n_coords: int = 64, h: float = 1e-4,
                            seed: int = 0, floor: float = 1e-6):
    """Central differences on random coordinates; returns (max relative error, analytic, numeric)."""
    analytic = flatten_grads(params, grad(loss, params))
    vec = params.to_vector()
    rng = np.random.default_rng(seed)
    coords = rng.choice(vec.size, size=min(n_coords, vec.size), replace=False)
    numeric = np.empty(coords.size)
    for j, c in enumerate(coords):
        up, dn = vec.copy(), vec.copy()
        up[c] += h
        dn[c] -= h
        numeric[j] = (loss.value(params.with_vector(up)) - loss.value(params.with_vector(dn))) / (2 * h)
    a = analytic[coords]
    rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    return float(rel.max()), a, numeric


# ---------------------------------------------------------------- checkpoints

MAGIC = b"LPRGCKPT"


def save_checkpoint(path, params: PolicyParams, vocab: Vocabulary, config_hash: str = "",
                    extra: dict[str, np.ndarray] | None = None, meta: dict | None = None):
    """JSON header (length-prefixed) followed by little-endian float64 blocks in header order."""
    arrays = [(f"param/{n}", params.blocks[n]) for n in params.names()]
    arrays += [(f"extra/{k}", np.asarray(v, dtype=np.float64)) for k, v in sorted((extra or {}).items())]
    header = {
        "format": 1,
        "model": {"context_window": params.context_window, "hidden_size": params.hidden_size,
                  "embed_dim": params.embed_dim, "attention": params.attention},
        "vocabulary": vocab.to_dict(),
        "config_hash": config_hash,
        "blocks": [{"name": k, "shape": list(a.shape)} for k, a in arrays],
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (params, vocab, header, extra arrays)."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a policy checkpoint")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
        data = f.read()
    pos = 0
    params_blocks, extra = {}, {}
    for spec in header["blocks"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(spec["shape"])
        pos += 8 * count
        kind, name = spec["name"].split("/", 1)
        (params_blocks if kind == "param" else extra)[name] = arr
    if pos != len(data):
        raise ValueError(f"{path}: trailing or missing bytes in checkpoint")
    m = header["model"]
    params = PolicyParams(params_blocks, m["context_window"], m["hidden_size"], m["embed_dim"], m["attention"])
    params.check_finite()
    return params, Vocabulary.from_dict(header["vocabulary"]), header, extra


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]
