import itertools

import numpy as np
import pytest

from groves_forge.auction import AuctionInstance, MultiUnitDMU, UnitDemand, allocate
from groves_forge.simulators import Uniform, sample_profiles
from groves_forge.vcg import VCG, groves_payment, h_vcg, vcg_outcome

from conftest import LANGUAGES, random_instance


def test_burrito_vcg(burrito):
    assert h_vcg(burrito, 0) == 6.0
    assert h_vcg(burrito, 1) == 12.0
    assert groves_payment(burrito, 0, 6.0) == 6.0
    assert groves_payment(burrito, 1, 12.0) == 0.0
    out = vcg_outcome(burrito)
    assert out.allocation.assignment == (0, -1)
    assert list(out.payments) == [6.0, 0.0]
    assert list(out.utilities) == [6.0, 0.0]
    assert out.budget == 6.0


def test_pure_groves_subsidy(burrito):
    assert groves_payment(burrito, 1, 0.0) == -12.0
    assert groves_payment(burrito, 0, 0.0) == 0.0


def test_identical_bidders_pay_their_value():
    out = vcg_outcome(AuctionInstance(UnitDemand(1), [[4.5], [4.5], [4.5]]))
    winner = out.allocation.assignment.index(0)
    assert out.payments[winner] == 4.5
    assert out.utilities[winner] == 0.0


def test_zero_bidder_removal():
    rng = np.random.default_rng(2)
    values = sample_profiles(MultiUnitDMU(3), Uniform(0, 1), 3, rng)
    values[1] = 0.0
    inst = AuctionInstance(MultiUnitDMU(3), values)
    assert h_vcg(inst, 1) == pytest.approx(allocate(inst).welfare, abs=1e-12)


def test_h_vcg_matches_brute_force_subauction():
    rng = np.random.default_rng(5)
    for _ in range(50):
        values = sample_profiles(MultiUnitDMU(2), Uniform(0, 1), 3, rng)
        inst = AuctionInstance(MultiUnitDMU(2), values)
        for i in range(3):
            others = np.delete(values, i, axis=0)
            best = max(others[0, :a].sum() + others[1, :b].sum()
                       for a, b in itertools.product(range(3), repeat=2) if a + b <= 2)
            assert h_vcg(inst, i) == pytest.approx(best, abs=1e-12)


def test_h_vcg_needs_two_players():
    with pytest.raises(ValueError):
        h_vcg(AuctionInstance(UnitDemand(1), [[1.0]], validate=False), 0)


def test_h_vcg_ignores_excluded_report():
    rng = np.random.default_rng(8)
    for lang in LANGUAGES:
        inst = random_instance(rng, lang, 3)
        other = inst.with_profile(0, sample_profiles(lang, Uniform(0, 5), 1, rng)[0])
        assert h_vcg(inst, 0) == h_vcg(other, 0)


@pytest.mark.parametrize("language", LANGUAGES + [UnitDemand(2)], ids=lambda l: repr(l))
def test_vcg_ir_and_weak_budget_balance(language):
    rng = np.random.default_rng(13)
    for _ in range(300):
        out = vcg_outcome(random_instance(rng, language, int(rng.integers(2, 5))))
        assert out.utilities.min() >= -1e-9
        assert out.budget >= -1e-9
        assert out.budget == pytest.approx(out.payments.sum())


@pytest.mark.parametrize("language", LANGUAGES, ids=lambda l: l.name)
def test_vcg_truthful(language):
    from groves_forge.evaluation import truthfulness_audit

    rng = np.random.default_rng(21)
    for _ in range(20):
        inst = random_instance(rng, language, 3)
        for i in range(3):
            assert truthfulness_audit(VCG(), inst, i, 20, rng, Uniform(0, 1)) <= 1e-9
