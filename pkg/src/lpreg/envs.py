"""Synthetic rule-verified task families.

``mod_arith``     "MOD a op b =" with digit tokens; the answer is (a op b) mod 10**d, zero-padded to d digits.
``seq_transform`` "SEQ copy|rev s1..sn <sep>"; the answer is the (reversed) symbol string then <end>.
``spark_gated``   "SPK a b <sep>"; a direct answer ``[s, <end>]`` is accepted only on a hidden
                  fraction ``p_direct`` of instances, while the connector path
                  ``[ALT, c_1..c_k, s, <end>]`` is accepted everywhere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .policy import Vocabulary, default_vocabulary

FAMILIES = ("mod_arith", "seq_transform", "spark_gated")
DIFFICULTY_BOUNDS = {"mod_arith": (1, 2), "seq_transform": (1, 3), "spark_gated": (1, 3)}
FAMILY_CODES = {name: i for i, name in enumerate(FAMILIES)}


@dataclass
class TaskInstance:
    family: str
    seed: int
    difficulty: int
    prompt: list[int]
    reference: list[int]
    response_budget: int
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"family": self.family, "seed": self.seed, "difficulty": self.difficulty,
                "prompt": self.prompt, "reference": self.reference,
                "response_budget": self.response_budget, "meta": self.meta}

    @classmethod
    def from_json(cls, d: dict) -> "TaskInstance":
        return cls(d["family"], int(d["seed"]), int(d["difficulty"]), list(d["prompt"]), list(d["reference"]),
                   int(d["response_budget"]), dict(d.get("meta", {})))


@dataclass
class VerifierOutcome:
    reward: float
    matched_path: str | None = None


def _rng(family: str, seed: int, difficulty: int) -> np.random.Generator:
    return np.random.default_rng([FAMILY_CODES[family], int(seed) & 0xFFFFFFFF, difficulty])


def _digits(value: int, width: int) -> list[str]:
    return list(str(value).zfill(width))


def connector_steps(a: int, b: int, k: int) -> list[int]:
    return [(a + (j + 2) * b) % 10 for j in range(k)]


def generate(family: str, seed: int, difficulty: int = 1, vocab: Vocabulary | None = None,
             p_direct: float = 0.6) -> TaskInstance:
    if family not in FAMILIES:
        raise ValueError(f"unknown task family {family!r}; expected one of {FAMILIES}")
    lo, hi = DIFFICULTY_BOUNDS[family]
    if not lo <= difficulty <= hi:
        raise ValueError(f"{family} difficulty must lie in [{lo}, {hi}], got {difficulty}")
    vocab = vocab or default_vocabulary()
    rng = _rng(family, seed, difficulty)
    if family == "mod_arith":
        m = 10 ** difficulty
        a, b = (int(x) for x in rng.integers(0, m, size=2))
        op = "+" if rng.random() < 0.5 else "-"
        ans = (a + b) % m if op == "+" else (a - b) % m
        prompt = ["MOD", *_digits(a, difficulty), op, *_digits(b, difficulty), "="]
        ref = _digits(ans, difficulty)
        return TaskInstance(family, seed, difficulty, vocab.ids(prompt), vocab.ids(ref), len(ref),
                            {"modulus": m})
    if family == "seq_transform":
        n = difficulty + 1
        letters = [str(c) for c in rng.choice(list("abcdefgh"), size=n)]
        instr = "copy" if rng.random() < 0.5 else "rev"
        out = letters if instr == "copy" else letters[::-1]
        prompt = ["SEQ", instr, *letters, "<sep>"]
        ref = vocab.ids(out) + [vocab.end]
        return TaskInstance(family, seed, difficulty, vocab.ids(prompt), ref, len(ref))
    a, b = (int(x) for x in rng.integers(0, 10, size=2))
    direct_ok = bool(rng.random() < p_direct)
    ans = (a + b) % 10
    steps = connector_steps(a, b, difficulty)
    prompt = ["SPK", str(a), str(b), "<sep>"]
    ref = vocab.ids(["ALT", *map(str, steps), str(ans)]) + [vocab.end]
    return TaskInstance(family, seed, difficulty, vocab.ids(prompt), ref, len(ref),
                        {"direct_ok": direct_ok, "direct": vocab.ids([str(ans)]) + [vocab.end],
                         "p_direct": p_direct})


def _normalize(output, vocab: Vocabulary) -> list[int]:
    out = [int(t) for t in output]
    if vocab.end in out:
        out = out[:out.index(vocab.end)]
    return [t for t in out if t != vocab.pad]


def verify(output, instance: TaskInstance, vocab: Vocabulary | None = None) -> VerifierOutcome:
    vocab = vocab or default_vocabulary()
    got = _normalize(output, vocab)
    if instance.family != "spark_gated":
        return VerifierOutcome(1.0 if got == _normalize(instance.reference, vocab) else 0.0)
    if got == _normalize(instance.reference, vocab):
        return VerifierOutcome(1.0, "connector")
    if got == _normalize(instance.meta["direct"], vocab):
        return VerifierOutcome(1.0 if instance.meta["direct_ok"] else 0.0, "direct")
    if got and got[0] == vocab.id("ALT"):
        return VerifierOutcome(0.0, "connector")
    return VerifierOutcome(0.0, "direct")


def make_eval_set(family: str, n: int, difficulty: int = 1, seed_offset: int = 1_000_000,
                  vocab: Vocabulary | None = None, p_direct: float = 0.6) -> list[TaskInstance]:
    return [generate(family, seed_offset + i, difficulty, vocab, p_direct) for i in range(n)]


def save_eval_set(path, instances):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for inst in instances:
            f.write(json.dumps(inst.to_json(), sort_keys=True) + "\n")


def load_eval_set(path) -> list[TaskInstance]:
    with open(path) as f:
        return [TaskInstance.from_json(json.loads(line)) for line in f if line.strip()]
