"""Masked hard instance mining: attention-ranked and random instance masks.

Mask vectors are ``uint8`` arrays of length N where 1 means the instance is
removed from the student's input.  Every count is ``ceil(ratio * N / 100)``
evaluated exactly (ratios are converted to fractions before rounding up).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import AllMasked, LengthMismatch, RatioOutOfRange
from .models import AttentionScores

HIGHEST = "highest"
LOWEST = "lowest"

# which ratios each strategy switches on
STRATEGIES = {
    "none": (),
    "HAM": ("h",),
    "R-HAM": ("h", "r"),
    "L-HAM": ("h", "l"),
    "LR-HAM": ("h", "l", "r"),
}


def mask_count(ratio: float, n: int) -> int:
    return math.ceil(Fraction(ratio) * n / 100)


def _check_ratio(ratio: float, limit: float = 100.0) -> None:
    if not 0 <= ratio <= limit:
        raise RatioOutOfRange(f"mask ratio {ratio} outside [0, {limit}]")


def _as_matrix(attention) -> np.ndarray:
    a = attention.values if isinstance(attention, AttentionScores) else attention
    a = np.asarray(a, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


def _rank(row: np.ndarray, direction: str) -> np.ndarray:
    # stable sort: equal scores keep ascending index order
    key = -row if direction == HIGHEST else row
    return np.argsort(key, kind="stable")


def topk_indices(attention, k: int, direction: str = HIGHEST) -> np.ndarray:
    """Indices of the k selected instances; multi-head input is fused by voting."""
    a = _as_matrix(attention)
    n_heads, n = a.shape
    if n_heads == 1:
        return np.sort(_rank(a[0], direction)[:k])
    votes = np.zeros(n, dtype=np.int64)
    for row in a:
        votes[_rank(row, direction)[:k]] += 1
    total = a.sum(axis=0)
    tie = -total if direction == HIGHEST else total
    # np.lexsort: last key is primary
    order = np.lexsort((np.arange(n), tie, -votes))
    return np.sort(order[:k])


def topk_mask(attention, ratio: float, direction: str = HIGHEST) -> np.ndarray:
    """Mask the ``ceil(ratio% * N)`` highest (or lowest) attention instances."""
    _check_ratio(ratio)
    if direction not in (HIGHEST, LOWEST):
        raise ValueError(f"direction must be {HIGHEST!r} or {LOWEST!r}")
    a = _as_matrix(attention)
    flags = np.zeros(a.shape[1], dtype=np.uint8)
    flags[topk_indices(a, mask_count(ratio, a.shape[1]), direction)] = 1
    return flags


def randomized_ham(attention, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Mask a random half of the top ``2 * ratio`` percent attention candidates."""
    _check_ratio(ratio, 50.0)
    a = _as_matrix(attention)
    n = a.shape[1]
    candidates = np.flatnonzero(topk_mask(a, 2 * ratio, HIGHEST))
    flags = np.zeros(n, dtype=np.uint8)
    k = mask_count(ratio, n)
    if k:
        flags[rng.choice(candidates, size=k, replace=False)] = 1
    return flags


def random_mask(n: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    _check_ratio(ratio)
    flags = np.zeros(n, dtype=np.uint8)
    k = mask_count(ratio, n)
    if k:
        flags[rng.choice(n, size=k, replace=False)] = 1
    return flags


@dataclass
class MaskedBag:
    features: np.ndarray
    kept_indices: np.ndarray
    flags: np.ndarray

    @property
    def n_kept(self) -> int:
        return len(self.kept_indices)


def union_masks(masks, n: int | None = None) -> np.ndarray:
    masks = [np.asarray(m, dtype=np.uint8) for m in masks]
    if n is None:
        n = len(masks[0]) if masks else 0
    out = np.zeros(n, dtype=np.uint8)
    for m in masks:
        if m.shape != (n,):
            raise LengthMismatch(f"mask of length {m.shape} for bag of {n}")
        out |= m
    return out


def union_and_apply(features, masks) -> MaskedBag:
    """OR the masks together and keep unmasked rows in their original order."""
    z = np.asarray(getattr(features, "data", features))
    flags = union_masks(masks, z.shape[0])
    kept = np.flatnonzero(flags == 0)
    if kept.size == 0:
        raise AllMasked("every instance of the bag is masked")
    return MaskedBag(z[kept], kept, flags)


def decay_ratio(beta0: float, epoch: int, total_epochs: int) -> float:
    """Cosine decay ``beta0 * (1 + cos(pi * epoch / total)) / 2``."""
    if total_epochs < 1 or not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return beta0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class MaskRatios:
    beta_h: float = 0.0
    beta_l: float = 0.0
    beta_r: float = 0.0
    randomized_ham: bool = False
    decay_high: bool = True

    @classmethod
    def for_strategy(cls, strategy: str, beta_h: float, beta_l: float, beta_r: float,
                     randomized_ham: bool = False, decay_high: bool = True) -> "MaskRatios":
        try:
            active = STRATEGIES[strategy]
        except KeyError:
            raise ValueError(f"unknown masking strategy {strategy!r}") from None
        return cls(beta_h if "h" in active else 0.0,
                   beta_l if "l" in active else 0.0,
                   beta_r if "r" in active else 0.0,
                   randomized_ham, decay_high)

    @property
    def active(self) -> bool:
        return bool(self.beta_h or self.beta_l or self.beta_r)

    def validate(self, min_bag_size: int, max_bag_size: int | None = None) -> None:
        """Check ranges and that every bag size in ``[min, max]`` keeps an instance."""
        for name in ("beta_h", "beta_l", "beta_r"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise RatioOutOfRange(f"{name}={v} outside [0, 100]")
        if self.randomized_ham and 2 * self.beta_h > 100:
            raise RatioOutOfRange(f"beta_h={self.beta_h} too large for randomized HAM")
        for n in range(min_bag_size, (max_bag_size or min_bag_size) + 1):
            total = sum(mask_count(v, n) for v in (self.beta_h, self.beta_l, self.beta_r))
            if total >= n:
                raise RatioOutOfRange(f"mask counts {total} leave no instance in a bag of {n}")

    def high_ratio(self, epoch: int, total_epochs: int) -> float:
        if self.decay_high:
            return decay_ratio(self.beta_h, epoch, total_epochs)
        return self.beta_h


def build_masks(attention, ratios: MaskRatios, beta_h: float, rng: np.random.Generator) -> dict:
    """Per-strategy masks for one bag, keyed ``"high"``, ``"low"``, ``"random"``.

    ``beta_h`` is the (possibly decayed) high-attention ratio for this epoch.
    Draw order from ``rng`` is fixed: randomized HAM first, then random.
    """
    a = _as_matrix(attention)
    n = a.shape[1]
    masks = {}
    if beta_h > 0:
        if ratios.randomized_ham:
            masks["high"] = randomized_ham(a, beta_h, rng)
        else:
            masks["high"] = topk_mask(a, beta_h, HIGHEST)
    if ratios.beta_l > 0:
        masks["low"] = topk_mask(a, ratios.beta_l, LOWEST)
    if ratios.beta_r > 0:
        masks["random"] = random_mask(n, ratios.beta_r, rng)
    return masks
