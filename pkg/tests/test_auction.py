import itertools

import numpy as np
import pytest

from groves_forge.auction import (
    AuctionInstance,
    HierarchicalBundles,
    InvalidInstance,
    MultiUnitDMU,
    UnitDemand,
    allocate,
    allocate_hierarchical,
    allocate_multi_unit,
    allocate_unit_demand,
    brute_force_allocate,
    bundle_space,
    check_feasible,
    social_welfare,
)

from conftest import LANGUAGES, random_instance


def test_bundle_space_sizes():
    assert len(bundle_space(HierarchicalBundles(8))) == 15
    assert len(bundle_space(UnitDemand(1))) == 1
    assert len(bundle_space(MultiUnitDMU(15))) == 15
    four = bundle_space(HierarchicalBundles(4))
    assert [b.items for b in four] == [(0,), (1,), (2,), (3,), (0, 1), (2, 3), (0, 1, 2, 3)]


def test_hierarchical_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        HierarchicalBundles(6)


@pytest.mark.parametrize("values", [[[1.0, 2.0], [3.0, 1.0]], [[-1.0, 0.0], [1.0, 0.0]]])
def test_invalid_multi_unit_profiles(values):
    with pytest.raises(InvalidInstance):
        AuctionInstance(MultiUnitDMU(2), values)


def test_hierarchical_superadditivity_validated():
    with pytest.raises(InvalidInstance):
        AuctionInstance(HierarchicalBundles(2), [[3.0, 3.0, 5.0], [0, 0, 0]])


def test_single_player_instance_rejected():
    with pytest.raises(InvalidInstance):
        AuctionInstance(UnitDemand(2), [[1.0, 2.0]])


def _best_split(marginals, items):
    # independent oracle: every way to hand out exactly `items` units
    best = -1.0
    for counts in itertools.product(range(items + 1), repeat=len(marginals)):
        if sum(counts) == items:
            best = max(best, sum(sum(m[:c]) for m, c in zip(marginals, counts)))
    return best


def test_multi_unit_greedy_examples():
    inst = AuctionInstance(MultiUnitDMU(3), [[5, 3, 0], [4, 1, 0]])
    two = allocate_multi_unit(inst, 2)
    assert two.assignment == (1, 1)
    assert two.welfare == 9 == _best_split([[5, 3, 0], [4, 1, 0]], 2)
    three = allocate_multi_unit(inst, 3)
    assert three.assignment == (2, 1)
    assert three.welfare == 12 == _best_split([[5, 3, 0], [4, 1, 0]], 3)
    assert allocate_multi_unit(inst, 0).welfare == 0


def test_multi_unit_wrong_language():
    with pytest.raises(TypeError):
        allocate_multi_unit(AuctionInstance(UnitDemand(1), [[1.0], [2.0]]), 1)


def test_multi_unit_ties_lowest_player():
    inst = AuctionInstance(MultiUnitDMU(2), [[5, 5], [5, 5]])
    assert allocate_multi_unit(inst, 1).assignment == (1, 0)
    assert allocate_multi_unit(inst, 2).assignment == (2, 0)


def test_unit_demand_examples(burrito):
    a = allocate_unit_demand(burrito)
    assert a.assignment == (0, -1) and a.welfare == 12
    inst = AuctionInstance(UnitDemand(2), [[3, 9], [8, 2]])
    full = allocate_unit_demand(inst)
    assert full.assignment == (1, 0) and full.welfare == 17
    restricted = allocate_unit_demand(inst, {0})
    assert restricted.assignment == (-1, 0) and restricted.welfare == 8


def test_unit_demand_tie_break_is_lexicographic():
    inst = AuctionInstance(UnitDemand(2), [[5, 5], [5, 5]])
    assert allocate_unit_demand(inst).assignment == (0, 1)
    inst = AuctionInstance(UnitDemand(3), [[1, 4, 4], [0, 4, 0]])
    assert allocate_unit_demand(inst).assignment == (2, 1)


def test_hierarchical_examples():
    lang = HierarchicalBundles(2)
    a = allocate_hierarchical(AuctionInstance(lang, [[1, 1, 5], [0, 0, 0]]))
    assert a.assignment == ((2,), ()) and a.welfare == 5
    b = allocate_hierarchical(AuctionInstance(lang, [[4, 0, 5], [0, 4, 5]]))
    assert b.assignment == ((0,), (1,)) and b.welfare == 8
    empty = allocate_hierarchical(AuctionInstance(HierarchicalBundles(4), np.zeros((3, 7))))
    assert empty.welfare == 0 and all(x == () for x in empty.assignment)


def test_hierarchical_prefers_split_on_tie():
    a = allocate_hierarchical(AuctionInstance(HierarchicalBundles(2), [[2, 3, 5], [0, 0, 0]]))
    assert a.assignment == ((0, 1), ())


def test_burrito_allocation(burrito):
    assert allocate(burrito).assignment[0] == 0
    assert social_welfare(burrito, allocate(burrito)) == 12


def test_identical_profiles_tie():
    inst = AuctionInstance(UnitDemand(1), [[7.0], [7.0]])
    assert allocate(inst).welfare == 7.0
    assert allocate(inst).assignment == (0, -1)


def test_social_welfare_rejects_infeasible(burrito):
    from groves_forge.auction import Allocation

    with pytest.raises(InvalidInstance):
        social_welfare(burrito, Allocation((0, 0), (12.0, 6.0)))


def test_brute_force_guard():
    inst = AuctionInstance(UnitDemand(8), np.ones((9, 8)))
    with pytest.raises(ValueError):
        brute_force_allocate(inst)


@pytest.mark.parametrize("language", LANGUAGES, ids=lambda l: l.name)
@pytest.mark.parametrize("integer", [False, True])
def test_oracle_matches_brute_force(language, integer):
    rng = np.random.default_rng(7)
    for _ in range(150):
        inst = random_instance(rng, language, int(rng.integers(2, 5)), integer)
        fast = allocate(inst)
        check_feasible(inst, fast)
        assert fast.welfare == pytest.approx(brute_force_allocate(inst).welfare, abs=1e-9)


@pytest.mark.parametrize("language", LANGUAGES, ids=lambda l: l.name)
def test_allocate_deterministic(language):
    rng = np.random.default_rng(3)
    for _ in range(20):
        inst = random_instance(rng, language, 3, integer=True)
        copy = AuctionInstance(language, inst.values.copy())
        assert allocate(inst) == allocate(copy)


def test_restriction_monotone():
    rng = np.random.default_rng(11)
    for _ in range(100):
        inst = random_instance(rng, MultiUnitDMU(4), 3)
        w = [allocate_multi_unit(inst, k).welfare for k in range(5)]
        assert all(b >= a for a, b in zip(w, w[1:]))
        ud = random_instance(rng, UnitDemand(4), 3)
        hi = random_instance(rng, HierarchicalBundles(4), 3)
        for lang_inst, oracle, width in [(ud, allocate_unit_demand, 4), (hi, allocate_hierarchical, 7)]:
            allowed = set()
            prev = 0.0
            for node in rng.permutation(width):
                allowed.add(int(node))
                cur = oracle(lang_inst, allowed).welfare
                assert cur >= prev - 1e-12
                prev = cur
