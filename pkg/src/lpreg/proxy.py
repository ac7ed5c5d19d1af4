"""Filtered, renormalized proxy distributions and KL divergences against them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import LOG_CLAMP, TokenDistribution


class DegenerateFilterError(ValueError):
    """The threshold removed every token (only reachable with a fixed threshold >= max prob)."""


@dataclass(frozen=True)
class NoiseThresholdRule:
    kind: str = "min_p"
    value: float = 0.02

    def __post_init__(self):
        if self.kind == "fixed":
            if not 0.0 <= self.value < 1.0:
                raise ValueError(f"fixed threshold must lie in [0, 1), got {self.value}")
        elif self.kind == "min_p":
            if not 0.0 < self.value < 1.0:
                raise ValueError(f"min-p ratio must lie in (0, 1), got {self.value}")
        else:
            raise ValueError(f"unknown threshold rule {self.kind!r}")


@dataclass
class ProxyDistribution:
    probs: np.ndarray
    tau_used: float
    kept_mass: float

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.probs > 0)


def _probs(dist) -> np.ndarray:
    return np.asarray(getattr(dist, "probs", dist), dtype=np.float64)


def resolve_threshold(dist, rule: NoiseThresholdRule) -> float:
    if rule.kind == "fixed":
        return float(rule.value)
    return float(rule.value * _probs(dist).max())


def build_proxy(dist, tau: float) -> ProxyDistribution:
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    p = _probs(dist)
    keep = p > tau
    kept = float(p[keep].sum())
    if not keep.any():
        raise DegenerateFilterError(f"threshold {tau} filters every token (max prob {p.max()})")
    return ProxyDistribution(np.where(keep, p / kept, 0.0), float(tau), kept)


def build_proxy_rows(probs: np.ndarray, rule: NoiseThresholdRule):
    """Vectorized :func:`build_proxy` over rows; returns (proxy probs, tau, kept mass)."""
    probs = np.asarray(probs, dtype=np.float64)
    if rule.kind == "fixed":
        tau = np.full(probs.shape[0], float(rule.value))
    else:
        tau = rule.value * probs.max(axis=1)
    keep = probs > tau[:, None]
    if probs.shape[0] and not keep.any(axis=1).all():
        bad = int(np.flatnonzero(~keep.any(axis=1))[0])
        raise DegenerateFilterError(f"threshold {tau[bad]} filters every token at row {bad}")
    kept = np.where(keep, probs, 0.0).sum(axis=1)
    proxy = np.where(keep, probs / np.where(kept > 0, kept, 1.0)[:, None], 0.0)
    return proxy, tau, kept


def forward_kl(proxy, dist) -> float:
    """KL(proxy || dist) summed over the proxy support only."""
    q = _probs(proxy)
    if isinstance(dist, TokenDistribution):
        logp = dist.log_probs
    else:
        logp = np.log(np.maximum(_probs(dist), LOG_CLAMP))
    s = q > 0
    return float(np.sum(q[s] * (np.log(q[s]) - logp[s])))


def reverse_kl(dist, proxy) -> float:
    """KL(dist || proxy) with ln proxy clamped at 1e-12 outside its support."""
    q = _probs(proxy)
    if isinstance(dist, TokenDistribution):
        p, logp = dist.probs, dist.log_probs
    else:
        p = _probs(dist)
        logp = np.log(np.maximum(p, LOG_CLAMP))
    s = p > 0
    return float(np.sum(p[s] * (logp[s] - np.log(np.maximum(q[s], LOG_CLAMP)))))
