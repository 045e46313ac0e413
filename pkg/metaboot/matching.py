"""Matching functions: dissimilarities between a frozen target and the
online iterate. Every function is minimised (at exactly 0) when both
arguments coincide, and only the second (online) argument is expected to
carry gradient."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import autodiff as ad
from .autodiff import Node

KINDS = ("kl_target_first", "kl_online_first", "kl_symmetric", "l2_params", "value_l2", "policy_plus_value")
POLICY_KINDS = ("kl_target_first", "kl_online_first", "kl_symmetric")


@dataclass(frozen=True)
class MatchingFunction:
    kind: str = "kl_target_first"
    lambda_v: float = 0.25

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"matching kind must be one of {KINDS}, got {self.kind!r}")
        if self.lambda_v < 0:
            raise ValueError("lambda_v must be >= 0")

    @property
    def needs_values(self) -> bool:
        return self.kind in ("value_l2", "policy_plus_value")


def kl_divergence(logp: Node, logq: Node) -> Node:
    """KL(p || q) per row from log-probabilities, averaged over rows."""
    per_row = ad.sum(ad.exp(logp) * (logp - logq), axis=-1)
    return ad.mean(per_row)


def symmetric_kl(logp: Node, logq: Node) -> Node:
    """Mean of both KL directions."""
    return 0.5 * (kl_divergence(logp, logq) + kl_divergence(logq, logp))


def policy_divergence(kind: str, target_logp: Node, online_logp: Node) -> Node:
    if kind == "kl_target_first":
        return kl_divergence(target_logp, online_logp)
    if kind == "kl_online_first":
        return kl_divergence(online_logp, target_logp)
    if kind == "kl_symmetric":
        return symmetric_kl(target_logp, online_logp)
    raise ValueError(f"{kind!r} is not a policy matching kind")


def l2_params(target: Sequence[Node], online: Sequence[Node]) -> Node:
    """Squared Euclidean distance between the flattened parameter vectors."""
    total = None
    for t, o in zip(target, online):
        term = ad.sum(ad.square(t - o))
        total = term if total is None else total + term
    if total is None:
        raise ValueError("l2_params needs at least one tensor")
    return total


def value_l2(target_values: Node, online_values: Node) -> Node:
    return ad.mean(ad.square(target_values - online_values))
