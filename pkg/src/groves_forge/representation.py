"""Counterfactual-auction tensors and flat features for one excluded player.

Tensor axes are ``(bundle, other player, channel)`` with ``2|K| + 1``
channels: the others' valuation matrix, then for each ``p = 1..|K|`` the
allocation indicator of the auction restricted to the top-``p`` bundles and
its elementwise product with the valuation matrix.
"""
from __future__ import annotations

import numpy as np

from .auction import (
    AuctionInstance,
    MultiUnitDMU,
    UnitDemand,
    allocate_hierarchical,
    allocate_unit_demand,
    greedy_order,
)

__all__ = ["num_channels", "build_tensor", "build_flat", "bundle_ranking", "allocation_indicator"]


def num_channels(width: int) -> int:
    return 2 * width + 1


def bundle_ranking(values: np.ndarray) -> np.ndarray:
    """Bundles ordered by their best bid across players (ties: lower index)."""
    score = values.max(axis=0)
    return np.lexsort((np.arange(score.size), -score))


def allocation_indicator(instance: AuctionInstance, allocation) -> np.ndarray:
    """0/1 matrix of shape (width, n) marking which player holds which bundle."""
    lang = instance.language
    out = np.zeros((lang.width, instance.n))
    for j, a in enumerate(allocation.assignment):
        if isinstance(lang, MultiUnitDMU):
            out[:a, j] = 1.0
        elif isinstance(lang, UnitDemand):
            if a >= 0:
                out[a, j] = 1.0
        else:
            out[list(a), j] = 1.0
    return out


def _dmu_indicators(values: np.ndarray) -> np.ndarray:
    # greedy prefix property: the top-p auction is the first p greedy grants
    n, width = values.shape
    winners = greedy_order(values)[:width]
    ind = np.zeros((width, width, n))
    counts = np.zeros(n, dtype=int)
    slots = np.arange(width)[:, None]
    for p, j in enumerate(winners):
        counts[j] += 1
        ind[p] = slots < counts[None, :]
    return ind


def build_tensor(instance: AuctionInstance, excluded: int) -> np.ndarray:
    """Tensor of shape ``(|K|, n - 1, 2|K| + 1)`` built without reading ``excluded``'s row."""
    if instance.n < 2:
        raise ValueError("need at least two players")
    others = instance.without(excluded)
    v = others.values
    width = instance.language.width
    x = np.empty((width, others.n, num_channels(width)))
    vt = v.T
    x[:, :, 0] = vt
    if isinstance(instance.language, MultiUnitDMU):
        ind = _dmu_indicators(v)
        for p in range(width):
            x[:, :, 2 * p + 1] = ind[p]
    else:
        oracle = allocate_unit_demand if isinstance(instance.language, UnitDemand) else allocate_hierarchical
        rank = bundle_ranking(v)
        for p in range(1, width + 1):
            alloc = oracle(others, [int(b) for b in rank[:p]])
            x[:, :, 2 * p - 1] = allocation_indicator(others, alloc)
    x[:, :, 2::2] = vt[:, :, None] * x[:, :, 1::2]
    return x


def build_flat(instance: AuctionInstance, excluded: int, n: int | None = None) -> np.ndarray:
    """Others' valuations flattened row-major, players sorted by total value.

    ``n`` is the player count a flat model was trained for.
    """
    if instance.n < 2:
        raise ValueError("need at least two players")
    if n is not None and instance.n != n:
        raise ValueError(f"flat features need exactly n={n} players, got {instance.n}")
    v = instance.without(excluded).values
    # descending total, ties by the row values themselves so the order is canonical
    keys = [-v[:, k] for k in reversed(range(v.shape[1]))] + [-v.sum(axis=1)]
    order = np.lexsort(keys)
    return np.ascontiguousarray(v[order].T).ravel()
