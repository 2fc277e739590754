"""Groves payments, the VCG instantiation and mechanism outcomes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .auction import Allocation, AuctionInstance, allocate

__all__ = [
    "MechanismOutcome",
    "VCG",
    "h_vcg",
    "groves_payment",
    "others_value",
    "vcg_outcome",
    "vcg_terms",
    "make_outcome",
]


@dataclass(frozen=True)
class MechanismOutcome:
    allocation: Allocation
    payments: np.ndarray
    utilities: np.ndarray
    budget: float


def make_outcome(allocation: Allocation, payments) -> MechanismOutcome:
    t = np.asarray(payments, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("non-finite payment")
    u = np.asarray(allocation.realized) - t
    return MechanismOutcome(allocation, t, u, float(t.sum()))


def h_vcg(instance: AuctionInstance, excluded: int) -> float:
    """Welfare the other players realize when ``excluded`` is absent."""
    if instance.n < 2:
        raise ValueError("h_vcg needs at least two players")
    return allocate(instance.without(excluded)).welfare


def others_value(allocation: Allocation, i: int) -> float:
    r = allocation.realized
    return float(sum(r[:i]) + sum(r[i + 1 :]))


def groves_payment(instance: AuctionInstance, i: int, h_value: float,
                   allocation: Allocation | None = None) -> float:
    if not 0 <= i < instance.n:
        raise IndexError(i)
    if allocation is None:
        allocation = allocate(instance)
    return h_value - others_value(allocation, i)


def vcg_terms(instance: AuctionInstance):
    """Efficient allocation, VCG payments and the Σ_{j≠i} realized values."""
    alloc = allocate(instance)
    others = np.array([others_value(alloc, i) for i in range(instance.n)])
    h = np.array([h_vcg(instance, i) for i in range(instance.n)])
    return alloc, h - others, others


def vcg_outcome(instance: AuctionInstance) -> MechanismOutcome:
    alloc, t, _ = vcg_terms(instance)
    return make_outcome(alloc, t)


class VCG:
    """The VCG mechanism behind the common mechanism interface."""

    name = "vcg"

    def outcome(self, instance: AuctionInstance) -> MechanismOutcome:
        return vcg_outcome(instance)

    def outcomes(self, instances) -> list[MechanismOutcome]:
        return [vcg_outcome(x) for x in instances]

    def compatible(self, instance: AuctionInstance) -> None:
        pass
