"""Auction instances, bidding languages and exact efficient-allocation oracles.

Three bidding languages are supported:

* ``MultiUnitDMU``: identical units, each player reports non-increasing
  marginal values for the 1st, 2nd, ... unit received.
* ``UnitDemand``: heterogeneous objects, each player wants at most one.
* ``HierarchicalBundles``: objects are the leaves of a complete binary tree
  and players value leaves or whole subtrees.

Ties are broken deterministically (lowest player index, then lowest bundle
index) so that counterfactual channels built from these oracles reproduce
bit for bit.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "MultiUnitDMU",
    "UnitDemand",
    "HierarchicalBundles",
    "BiddingLanguage",
    "Bundle",
    "AuctionInstance",
    "Allocation",
    "InvalidInstance",
    "bundle_space",
    "validate_profile",
    "allocate",
    "allocate_multi_unit",
    "allocate_unit_demand",
    "allocate_hierarchical",
    "brute_force_allocate",
    "social_welfare",
    "language_from_dict",
]

BRUTE_FORCE_LIMIT = 10**7
HIERARCHY_TOL = 1e-9


class InvalidInstance(ValueError):
    pass


@dataclass(frozen=True)
class MultiUnitDMU:
    num_items: int

    name = "multi_unit"

    def __post_init__(self):
        if self.num_items < 1:
            raise ValueError("num_items must be positive")

    @property
    def width(self) -> int:
        return self.num_items

    def to_dict(self) -> dict:
        return {"name": self.name, "num_items": self.num_items}


@dataclass(frozen=True)
class UnitDemand:
    num_objects: int

    name = "unit_demand"

    def __post_init__(self):
        if self.num_objects < 1:
            raise ValueError("num_objects must be positive")

    @property
    def width(self) -> int:
        return self.num_objects

    def to_dict(self) -> dict:
        return {"name": self.name, "num_objects": self.num_objects}


@dataclass(frozen=True)
class HierarchicalBundles:
    num_leaves: int

    name = "hierarchical"

    def __post_init__(self):
        n = self.num_leaves
        if n < 1 or n & (n - 1):
            raise ValueError(f"num_leaves must be a positive power of two, got {n}")

    @property
    def width(self) -> int:
        return 2 * self.num_leaves - 1

    def to_dict(self) -> dict:
        return {"name": self.name, "num_leaves": self.num_leaves}

    def children(self) -> list[tuple[int, int] | None]:
        """Child pair of every node in canonical order (None for leaves)."""
        return _tree(self.num_leaves)[0]

    def leaves_under(self) -> list[tuple[int, ...]]:
        return _tree(self.num_leaves)[1]


BiddingLanguage = Union[MultiUnitDMU, UnitDemand, HierarchicalBundles]


def language_from_dict(d: dict) -> BiddingLanguage:
    name = d["name"]
    if name == MultiUnitDMU.name:
        return MultiUnitDMU(int(d["num_items"]))
    if name == UnitDemand.name:
        return UnitDemand(int(d["num_objects"]))
    if name == HierarchicalBundles.name:
        return HierarchicalBundles(int(d["num_leaves"]))
    raise ValueError(f"unknown bidding language {name!r}")


_TREES: dict[int, tuple[list, list]] = {}


def _tree(num_leaves: int):
    # leaves left-to-right, then internal levels bottom-up, left-to-right
    if num_leaves in _TREES:
        return _TREES[num_leaves]
    children: list[tuple[int, int] | None] = [None] * num_leaves
    covers: list[tuple[int, ...]] = [(m,) for m in range(num_leaves)]
    level = list(range(num_leaves))
    while len(level) > 1:
        nxt = []
        for a, b in zip(level[::2], level[1::2]):
            children.append((a, b))
            covers.append(covers[a] + covers[b])
            nxt.append(len(children) - 1)
        level = nxt
    _TREES[num_leaves] = (children, covers)
    return _TREES[num_leaves]


class Bundle(NamedTuple):
    index: int
    items: tuple[int, ...]


def bundle_space(language: BiddingLanguage) -> list[Bundle]:
    """Bundle descriptors in canonical order.

    For ``MultiUnitDMU`` each descriptor is a marginal slot: slot ``m`` is the
    ``m``-th additional unit.
    """
    if isinstance(language, HierarchicalBundles):
        return [Bundle(i, c) for i, c in enumerate(language.leaves_under())]
    return [Bundle(i, (i,)) for i in range(language.width)]


def validate_profile(language: BiddingLanguage, values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (language.width,):
        raise InvalidInstance(f"expected {language.width} values, got shape {v.shape}")
    if not np.all(np.isfinite(v)) or np.any(v < 0):
        raise InvalidInstance("valuations must be finite and non-negative")
    if isinstance(language, MultiUnitDMU) and np.any(np.diff(v) > 0):
        raise InvalidInstance("multi-unit marginals must be non-increasing")
    if isinstance(language, HierarchicalBundles):
        for node, kids in enumerate(language.children()):
            if kids is None:
                continue
            parts = v[kids[0]] + v[kids[1]]
            if v[node] < parts - HIERARCHY_TOL * max(1.0, parts):
                raise InvalidInstance(
                    f"node {node} is valued below the sum of its children"
                )
    return v


class AuctionInstance:
    """A bidding language plus one valuation row per player.

    ``values`` has shape ``(n, width)``; the stored array is read-only.
    """

    __slots__ = ("language", "values")

    def __init__(self, language: BiddingLanguage, values, validate: bool = True):
        v = np.array(values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise InvalidInstance("values must be a 2-d array with one row per player")
        if validate:
            if v.shape[0] < 2:
                raise InvalidInstance("an auction needs at least two players")
            for row in v:
                validate_profile(language, row)
        v.setflags(write=False)
        self.language = language
        self.values = v

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def without(self, player: int) -> "AuctionInstance":
        """Sub-auction with ``player`` removed (may have a single bidder)."""
        return AuctionInstance(
            self.language, np.delete(self.values, player, axis=0), validate=False
        )

    def with_profile(self, player: int, profile) -> "AuctionInstance":
        v = self.values.copy()
        v[player] = validate_profile(self.language, profile)
        return AuctionInstance(self.language, v, validate=False)

    def __eq__(self, other):
        if not isinstance(other, AuctionInstance):
            return NotImplemented
        return self.language == other.language and np.array_equal(
            self.values, other.values
        )

    def __hash__(self):
        return hash((self.language, self.values.tobytes()))

    def __repr__(self):
        return f"AuctionInstance({self.language!r}, {self.values.tolist()!r})"


@dataclass(frozen=True)
class Allocation:
    """Per-player assignment plus the realized value of each player.

    ``assignment[i]`` is an item count (multi-unit), an object index or -1
    (unit demand), or a tuple of tree nodes (hierarchical).
    """

    assignment: tuple
    realized: tuple[float, ...]

    @property
    def welfare(self) -> float:
        return float(sum(self.realized))


def _realized(instance: AuctionInstance, assignment: Sequence) -> tuple[float, ...]:
    lang, v = instance.language, instance.values
    out = []
    for i, a in enumerate(assignment):
        if isinstance(lang, MultiUnitDMU):
            out.append(float(v[i, :a].sum()))
        elif isinstance(lang, UnitDemand):
            out.append(float(v[i, a]) if a >= 0 else 0.0)
        else:
            out.append(float(sum(v[i, m] for m in a)))
    return tuple(out)


def _make(instance: AuctionInstance, assignment) -> Allocation:
    assignment = tuple(assignment)
    return Allocation(assignment, _realized(instance, assignment))


def _check_language(instance, cls):
    if not isinstance(instance.language, cls):
        raise TypeError(
            f"expected a {cls.__name__} instance, got {type(instance.language).__name__}"
        )


def greedy_order(values: np.ndarray) -> np.ndarray:
    """Player receiving each successive unit under the greedy multi-unit rule.

    Merging the players' non-increasing marginal lists, with ties going to
    the lowest player index, is a lexicographic sort on (-value, player, slot).
    """
    n, width = values.shape
    players = np.repeat(np.arange(n), width)
    slots = np.tile(np.arange(width), n)
    order = np.lexsort((slots, players, -values.ravel()))
    return players[order]


def allocate_multi_unit(instance: AuctionInstance, max_items: int) -> Allocation:
    _check_language(instance, MultiUnitDMU)
    if not 0 <= max_items <= instance.language.num_items:
        raise ValueError("max_items out of range")
    winners = greedy_order(instance.values)[:max_items]
    counts = np.bincount(winners, minlength=instance.n)
    return _make(instance, (int(c) for c in counts))


def allocate_unit_demand(instance: AuctionInstance, allowed_objects=None) -> Allocation:
    """Maximum-weight matching of players to allowed objects.

    Among optimal matchings the lexicographically smallest assignment vector
    is returned, with -1 (unassigned) ordered after every object, so ties go
    to the lowest player index and then the lowest object index.
    """
    _check_language(instance, UnitDemand)
    m = instance.language.num_objects
    allowed = sorted(range(m) if allowed_objects is None else set(allowed_objects))
    if any(not 0 <= a < m for a in allowed):
        raise ValueError("allowed object out of range")
    v = instance.values
    n = instance.n
    if not allowed:
        return _make(instance, [-1] * n)
    w = v[:, allowed]

    # columns: allowed objects, then one private "unassigned" dummy per player
    def solve(fixed: dict[int, int]) -> float:
        rows = [i for i in range(n) if i not in fixed]
        used = {c for c in fixed.values() if c >= 0}
        cols = [c for c in range(len(allowed)) if c not in used]
        total = sum(w[i, c] for i, c in fixed.items() if c >= 0)
        if rows:
            mat = np.zeros((len(rows), len(cols) + len(rows)))
            if cols:
                mat[:, : len(cols)] = w[np.ix_(rows, cols)]
            r, c = linear_sum_assignment(mat, maximize=True)
            total += mat[r, c].sum()
        return total

    best = solve({})
    tol = 1e-12 * max(1.0, abs(best))
    fixed: dict[int, int] = {}
    for i in range(n):
        for c in list(range(len(allowed))) + [-1]:
            if c >= 0 and c in fixed.values():
                continue
            trial = dict(fixed)
            trial[i] = c
            if solve(trial) >= best - tol:
                fixed = trial
                break
    return _make(instance, (allowed[fixed[i]] if fixed[i] >= 0 else -1 for i in range(n)))


def allocate_hierarchical(instance: AuctionInstance, allowed_nodes=None) -> Allocation:
    """Exact welfare maximization over non-overlapping allowed subtrees.

    Bottom-up tree DP: a node is either granted whole to its best bidder or
    split into its two children, preferring the split on ties.
    """
    _check_language(instance, HierarchicalBundles)
    lang = instance.language
    width = lang.width
    allowed = (
        set(range(width)) if allowed_nodes is None else set(allowed_nodes)
    )
    if any(not 0 <= a < width for a in allowed):
        raise ValueError("allowed node out of range")
    v = instance.values
    children = lang.children()
    best = np.zeros(width)
    grant = [-1] * width  # player granted the whole node, -1 = split / empty
    for node in range(width):
        split = 0.0
        if children[node] is not None:
            a, b = children[node]
            split = best[a] + best[b]
        whole = -np.inf
        if node in allowed:
            winner = int(np.argmax(v[:, node]))
            whole = v[winner, node]
        if whole > split:
            best[node] = whole
            grant[node] = winner
        else:
            best[node] = split
    assignment: list[list[int]] = [[] for _ in range(instance.n)]
    stack = [width - 1]
    while stack:
        node = stack.pop()
        if grant[node] >= 0:
            assignment[grant[node]].append(node)
        elif children[node] is not None:
            stack.extend(children[node])
    return _make(instance, (tuple(sorted(a)) for a in assignment))


def allocate(instance: AuctionInstance) -> Allocation:
    """Efficient (welfare-maximizing) allocation over all bundles."""
    lang = instance.language
    if isinstance(lang, MultiUnitDMU):
        return allocate_multi_unit(instance, lang.num_items)
    if isinstance(lang, UnitDemand):
        return allocate_unit_demand(instance)
    return allocate_hierarchical(instance)


def _antichains(lang: HierarchicalBundles) -> list[tuple[int, ...]]:
    covers = [set(c) for c in lang.leaves_under()]
    out: list[tuple[int, ...]] = []

    def extend(start, chosen, used):
        out.append(tuple(chosen))
        for node in range(start, lang.width):
            if not covers[node] & used:
                extend(node + 1, chosen + [node], used | covers[node])

    extend(0, [], set())
    return out


def _count_feasible(instance: AuctionInstance) -> int:
    lang, n = instance.language, instance.n
    if isinstance(lang, MultiUnitDMU):
        # compositions of at most |B| items into n parts
        from math import comb

        return comb(lang.num_items + n, n)
    if isinstance(lang, UnitDemand):
        m = lang.num_objects
        return (m + 1) ** n
    return sum(n ** len(a) for a in _antichains(lang))


def brute_force_allocate(instance: AuctionInstance) -> Allocation:
    """Exhaustive enumeration of feasible allocations (test oracle)."""
    if _count_feasible(instance) > BRUTE_FORCE_LIMIT:
        raise ValueError("instance too large to enumerate")
    lang, n = instance.language, instance.n
    best, best_assignment = -np.inf, None

    def consider(assignment):
        nonlocal best, best_assignment
        w = sum(_realized(instance, assignment))
        if w > best:
            best, best_assignment = w, assignment

    if isinstance(lang, MultiUnitDMU):
        for counts in itertools.product(range(lang.num_items + 1), repeat=n):
            if sum(counts) <= lang.num_items:
                consider(counts)
    elif isinstance(lang, UnitDemand):
        for choice in itertools.product(range(-1, lang.num_objects), repeat=n):
            taken = [c for c in choice if c >= 0]
            if len(taken) == len(set(taken)):
                consider(choice)
    else:
        for chain in _antichains(lang):
            for owners in itertools.product(range(n), repeat=len(chain)):
                assignment = [[] for _ in range(n)]
                for node, owner in zip(chain, owners):
                    assignment[owner].append(node)
                consider(tuple(tuple(a) for a in assignment))
    return _make(instance, best_assignment)


def check_feasible(instance: AuctionInstance, allocation: Allocation) -> None:
    lang, n = instance.language, instance.n
    a = allocation.assignment
    if len(a) != n:
        raise InvalidInstance("allocation size does not match number of players")
    if isinstance(lang, MultiUnitDMU):
        if any(c < 0 for c in a) or sum(a) > lang.num_items:
            raise InvalidInstance("too many units allocated")
    elif isinstance(lang, UnitDemand):
        taken = [c for c in a if c >= 0]
        if len(taken) != len(set(taken)) or any(c >= lang.num_objects for c in taken):
            raise InvalidInstance("object allocated twice or out of range")
    else:
        covers = lang.leaves_under()
        seen: set[int] = set()
        for nodes in a:
            for node in nodes:
                leaves = set(covers[node])
                if leaves & seen:
                    raise InvalidInstance("overlapping bundles allocated")
                seen |= leaves


def social_welfare(instance: AuctionInstance, allocation: Allocation) -> float:
    check_feasible(instance, allocation)
    return float(sum(_realized(instance, allocation.assignment)))
