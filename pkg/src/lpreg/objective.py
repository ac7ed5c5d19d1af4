"""Lp-Reg loss, its ablations, and the GRPO-family baselines.

Every loss is evaluated from the current logits of each sampled position and
returns dLoss/dlogits alongside the value, so the policy's backward pass can
turn it into parameter gradients. Proxies, behavior probabilities, advantages
and the batch threshold are constants as far as differentiation goes.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .policy import LOG_CLAMP, PolicyParams, TokenDistribution, backward, forward_batch, log_softmax_rows
from .proxy import NoiseThresholdRule, ProxyDistribution, build_proxy_rows, forward_kl, reverse_kl

VARIANTS = ("grpo", "grpo_entropy_bonus", "clip_higher", "top_entropy_8020", "lp_reg")
TOP_ENTROPY_FRACTION = 0.2


@dataclass(frozen=True)
class ObjectiveConfig:
    variant: str = "lp_reg"
    beta: float = 1.0
    rho: float = 0.01
    threshold_rule: NoiseThresholdRule = field(default_factory=NoiseThresholdRule)
    upper_clip: float = 10.0
    kl_direction: str = "forward"
    filter_enabled: bool = True
    gate_basis: str = "lowest_probability"
    entropy_coefficient: float = 0.002
    ppo_epsilon: float = 0.2
    epsilon_high: float = 0.28
    ref_kl_beta: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.upper_clip > 1:
            raise ValueError(f"upper_clip must exceed 1, got {self.upper_clip}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.epsilon_high < self.ppo_epsilon:
            raise ValueError("epsilon_high must be >= ppo_epsilon")
        if self.kl_direction not in ("forward", "reverse"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")
        if self.gate_basis not in ("lowest_probability", "highest_entropy"):
            raise ValueError(f"unknown gate_basis {self.gate_basis!r}")

    @property
    def uses_proxy(self) -> bool:
        return self.variant == "lp_reg"

    @property
    def is_ablation(self) -> bool:
        return self.variant == "lp_reg" and (
            not self.filter_enabled or self.threshold_rule.kind == "fixed"
            or self.gate_basis == "highest_entropy" or self.kl_direction == "reverse")


# ---------------------------------------------------------------- scalar reference path

@dataclass
class TokenIngredient:
    current_prob: float
    behavior_prob: float
    advantage: float
    current_distribution: TokenDistribution
    proxy: ProxyDistribution
    token: int
    entropy: float = 0.0


@dataclass
class GateDecision:
    below_delta: bool
    proxy_positive: bool
    negative_advantage: bool

    @property
    def active(self) -> bool:
        return self.below_delta and self.proxy_positive and self.negative_advantage


def importance_ratio(current_prob: float, behavior_prob: float) -> float:
    if not behavior_prob > 0:
        raise ValueError(f"behavior probability must be positive, got {behavior_prob}")
    return current_prob / behavior_prob


def nearest_rank_count(rho: float, n: int) -> int:
    """ceil(rho * n), robust to float residue such as 0.07 * 100 = 7.000000000000001."""
    return int(math.ceil(round(rho * n, 9)))


def batch_delta(sampled_token_probs, rho: float) -> float:
    probs = np.asarray(sampled_token_probs, dtype=np.float64).ravel()
    if probs.size == 0:
        raise ValueError("batch_delta of an empty batch")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if rho == 0:
        return 0.0
    k = max(nearest_rank_count(rho, probs.size) - 1, 0)
    return float(np.sort(probs, kind="stable")[k])


def top_fraction_mask(values, fraction: float) -> np.ndarray:
    """Mask of the ceil(fraction * N) largest entries; ties resolved by lower index first."""
    values = np.asarray(values, dtype=np.float64)
    k = min(nearest_rank_count(fraction, values.size), values.size)
    mask = np.zeros(values.size, dtype=bool)
    mask[np.argsort(-values, kind="stable")[:k]] = True
    return mask


def gate(ingredient: TokenIngredient, delta: float) -> GateDecision:
    return GateDecision(
        below_delta=ingredient.current_prob < delta,
        proxy_positive=bool(ingredient.proxy.probs[ingredient.token] > 0),
        negative_advantage=ingredient.advantage < 0,
    )


def lp_reg_token_loss(ingredient: TokenIngredient, delta: float, config: ObjectiveConfig):
    """Single-token Lp-Reg contribution; returns (loss, GateDecision, kl)."""
    if config.variant != "lp_reg":
        raise ValueError("lp_reg_token_loss requires variant 'lp_reg'")
    r = importance_ratio(ingredient.current_prob, ingredient.behavior_prob)
    surrogate = min(max(r, 0.0), config.upper_clip) * ingredient.advantage
    decision = gate(ingredient, delta)
    if config.kl_direction == "forward":
        kl = forward_kl(ingredient.proxy, ingredient.current_distribution)
    else:
        kl = reverse_kl(ingredient.current_distribution, ingredient.proxy)
    loss = -surrogate
    if decision.active and config.beta != 0:
        loss = loss + config.beta * kl
    return loss, decision, kl


# ---------------------------------------------------------------- batched path

@dataclass
class TokenBatch:
    """Flat per-token ingredient streams of a rollout batch (or a group-aligned slice of one)."""

    contexts: np.ndarray
    tokens: np.ndarray
    behavior_probs: np.ndarray
    behavior_entropy: np.ndarray
    advantages: np.ndarray
    traj_index: np.ndarray
    n_traj: int
    delta: float = 0.0
    entropy_selected: np.ndarray | None = None
    proxy: np.ndarray | None = None
    behavior_dists: np.ndarray | None = None
    ref_log_probs: np.ndarray | None = None

    def __len__(self):
        return self.tokens.size

    @property
    def traj_lengths(self) -> np.ndarray:
        return np.bincount(self.traj_index, minlength=self.n_traj)

    def subset(self, traj_ids) -> "TokenBatch":
        traj_ids = np.asarray(traj_ids, dtype=np.int64)
        remap = np.full(self.n_traj, -1, dtype=np.int64)
        remap[traj_ids] = np.arange(traj_ids.size)
        sel = np.flatnonzero(remap[self.traj_index] >= 0)

        def pick(a):
            return None if a is None else a[sel]

        return replace(self, contexts=self.contexts[sel], tokens=self.tokens[sel],
                       behavior_probs=self.behavior_probs[sel], behavior_entropy=self.behavior_entropy[sel],
                       advantages=self.advantages[sel], traj_index=remap[self.traj_index[sel]],
                       n_traj=int(traj_ids.size), entropy_selected=pick(self.entropy_selected),
                       proxy=pick(self.proxy), behavior_dists=pick(self.behavior_dists),
                       ref_log_probs=pick(self.ref_log_probs))

    def freeze(self) -> "TokenBatch":
        for a in (self.contexts, self.tokens, self.behavior_probs, self.behavior_entropy, self.advantages,
                  self.traj_index, self.entropy_selected, self.proxy, self.behavior_dists, self.ref_log_probs):
            if a is not None:
                a.setflags(write=False)
        return self

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.tokens, self.behavior_probs, self.advantages, self.traj_index, self.proxy):
            if a is not None:
                h.update(np.ascontiguousarray(a).tobytes())
        h.update(repr(self.delta).encode())
        return h.hexdigest()[:16]


def make_proxy(source_probs: np.ndarray, config: ObjectiveConfig) -> np.ndarray:
    """Proxy rows for the configured filter; with the filter removed the proxy is the source itself."""
    if not config.filter_enabled:
        return np.array(source_probs, dtype=np.float64, copy=True)
    proxy, _, _ = build_proxy_rows(source_probs, config.threshold_rule)
    return proxy


def entropy_gate_mask(entropies, rho: float) -> np.ndarray:
    return top_fraction_mask(entropies, rho)


@dataclass
class LossResult:
    value: float
    dlogits: np.ndarray
    diagnostics: dict
    active: np.ndarray


def _kl_terms(logp: np.ndarray, probs: np.ndarray, proxy: np.ndarray, direction: str):
    """Per-row KL and its gradient with respect to the logits."""
    if direction == "forward":
        s = proxy > 0
        logq = np.log(np.where(s, proxy, 1.0))
        kl = np.where(s, proxy * (logq - logp), 0.0).sum(axis=1)
        return kl, probs - proxy
    c = logp - np.log(np.maximum(proxy, LOG_CLAMP))
    kl = np.where(probs > 0, probs * c, 0.0).sum(axis=1)
    return kl, probs * (c - kl[:, None])


def objective_terms(tb: TokenBatch, logits: np.ndarray, config: ObjectiveConfig,
                    proxy: np.ndarray | None = None) -> LossResult:
    n, v = logits.shape
    if n != len(tb):
        raise ValueError("logits rows do not match the token batch")
    probs, logp, ent = log_softmax_rows(logits)
    rows = np.arange(n)
    tok = tb.tokens
    cur = np.exp(logp[rows, tok])
    r = cur / tb.behavior_probs
    A = tb.advantages
    # d log p(sampled) / d logits = onehot - p
    dlp = -probs
    dlp[rows, tok] += 1.0

    below = cur < tb.delta
    if config.gate_basis == "highest_entropy":
        if tb.entropy_selected is None:
            raise ValueError("highest-entropy gate needs entropy_selected in the batch")
        below = tb.entropy_selected.copy()
    supported = proxy[rows, tok] > 0 if proxy is not None else np.zeros(n, dtype=bool)
    negative = A < 0
    active = below & supported & negative
    kl_gated = np.zeros(0)

    if config.variant == "lp_reg":
        if proxy is None:
            raise ValueError("lp_reg needs a proxy distribution")
        w = np.full(n, 1.0 / max(n, 1))
        rc = np.clip(r, 0.0, config.upper_clip)
        surrogate = rc * A
        sur_mask = np.ones(n, dtype=bool)
        if not config.filter_enabled:
            sur_mask = ~(below & negative)
        flows = (r < config.upper_clip) & sur_mask
        value_terms = -surrogate * sur_mask
        dlogits = (-(A * r * flows * w))[:, None] * dlp
        if config.beta != 0 and active.any():
            idx = np.flatnonzero(active)
            kl, dkl = _kl_terms(logp[idx], probs[idx], proxy[idx], config.kl_direction)
            value_terms = value_terms.copy()
            value_terms[idx] += config.beta * kl
            dlogits[idx] += (config.beta * w[idx])[:, None] * dkl
            kl_gated = kl
        elif active.any():
            idx = np.flatnonzero(active)
            kl_gated, _ = _kl_terms(logp[idx], probs[idx], proxy[idx], config.kl_direction)
        value = float(np.sum(value_terms * w))
    else:
        lengths = tb.traj_lengths
        w = 1.0 / (tb.n_traj * lengths[tb.traj_index])
        eps_hi = config.epsilon_high if config.variant == "clip_higher" else config.ppo_epsilon
        lo, hi = 1.0 - config.ppo_epsilon, 1.0 + eps_hi
        unclipped = r * A
        clipped = np.clip(r, lo, hi) * A
        obj = np.minimum(unclipped, clipped)
        flows = (unclipped <= clipped) | ((r >= lo) & (r <= hi))
        surrogate = obj
        if config.variant == "top_entropy_8020":
            keep = top_fraction_mask(tb.behavior_entropy, TOP_ENTROPY_FRACTION)
            w = w * keep
        value = float(-np.sum(obj * w))
        dlogits = (-(A * r * flows * w))[:, None] * dlp
        if config.variant == "grpo_entropy_bonus" and config.entropy_coefficient != 0:
            c = config.entropy_coefficient / max(n, 1)
            value -= c * float(ent.sum())
            # dH/dz = -p (log p + H)
            dlogits += c * probs * (logp + ent[:, None])
        if config.ref_kl_beta != 0:
            if tb.ref_log_probs is None:
                raise ValueError("ref_kl_beta > 0 needs reference log-probabilities in the batch")
            ref = np.exp(tb.ref_log_probs)
            kl, dkl = _kl_terms(logp, probs, ref, "reverse")
            value += config.ref_kl_beta * float(np.sum(kl * w))
            dlogits += (config.ref_kl_beta * w)[:, None] * dkl

    below_count = int(below.sum())
    supported_below = int((below & supported).sum())
    diagnostics = {
        "loss": value,
        "surrogate_mean": float(surrogate.mean()) if n else 0.0,
        "kl_mean_gated": float(kl_gated.mean()) if kl_gated.size else 0.0,
        "delta": float(tb.delta),
        "below_delta_count": below_count,
        "supported_below_count": supported_below,
        "gated_count": int(active.sum()),
        "reg_ratio": supported_below / below_count if below_count else None,
        "mean_entropy": float(ent.mean()) if n else 0.0,
        "token_count": int(n),
    }
    return LossResult(value, dlogits, diagnostics, active)


def _check_loss(value: float, tb: TokenBatch):
    if not math.isfinite(value):
        from .policy import NumericalError
        raise NumericalError(f"non-finite loss {value} (batch fingerprint {tb.fingerprint()})")


def _evaluate(tb: TokenBatch, config: ObjectiveConfig, params: PolicyParams | None, logits, proxy):
    if logits is None:
        if params is None:
            raise ValueError("either params or logits is required")
        logits = forward_batch(params, tb.contexts)
    if config.uses_proxy and proxy is None:
        proxy = tb.proxy if tb.proxy is not None else make_proxy(log_softmax_rows(logits)[0], config)
    res = objective_terms(tb, logits, config, proxy)
    _check_loss(res.value, tb)
    return res


def batch_loss(tb: TokenBatch, config: ObjectiveConfig, params=None, logits=None, proxy=None):
    """Lp-Reg loss with global token-mean normalization; returns (value, diagnostics)."""
    if config.variant != "lp_reg":
        raise ValueError("batch_loss requires variant 'lp_reg'")
    res = _evaluate(tb, config, params, logits, proxy)
    return res.value, res.diagnostics


def baseline_loss(tb: TokenBatch, config: ObjectiveConfig, params=None, logits=None):
    if config.variant == "lp_reg":
        raise ValueError("baseline_loss requires a GRPO-family variant")
    res = _evaluate(tb, config, params, logits, None)
    return res.value, res.diagnostics


def ablation_loss(tb: TokenBatch, config: ObjectiveConfig, params=None, logits=None, proxy=None):
    if not config.is_ablation:
        raise ValueError("ablation_loss needs filter_enabled=False, a fixed threshold, "
                         "gate_basis='highest_entropy' or kl_direction='reverse'")
    res = _evaluate(tb, config, params, logits, proxy)
    return res.value, res.diagnostics


def loss_and_grad(params: PolicyParams, tb: TokenBatch, config: ObjectiveConfig, proxy_source: str = "batch"):
    """Value, parameter gradients and diagnostics.

    ``proxy_source='current'`` builds the proxy from this forward pass (frozen
    for differentiation); ``'batch'`` uses the proxy stored at rollout time.
    """
    logits, cache = forward_batch(params, tb.contexts, keep_cache=True)
    proxy = None
    if config.uses_proxy:
        if proxy_source == "current" or tb.proxy is None:
            proxy = make_proxy(log_softmax_rows(logits)[0], config)
        else:
            proxy = tb.proxy
    res = objective_terms(tb, logits, config, proxy)
    _check_loss(res.value, tb)
    return res.value, backward(params, cache, res.dlogits), res.diagnostics, res


class ObjectiveLoss:
    """Adapter exposing an objective as a differentiable function of the policy parameters."""

    def __init__(self, tb: TokenBatch, config: ObjectiveConfig, proxy: np.ndarray | None = None):
        self.tb, self.config, self.proxy = tb, config, proxy

    def value(self, params: PolicyParams) -> float:
        return objective_terms(self.tb, forward_batch(params, self.tb.contexts), self.config, self.proxy).value

    def gradient(self, params: PolicyParams):
        logits, cache = forward_batch(params, self.tb.contexts, keep_cache=True)
        res = objective_terms(self.tb, logits, self.config, self.proxy)
        return backward(params, cache, res.dlogits)
