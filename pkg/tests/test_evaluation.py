import numpy as np
import pytest

from groves_forge.auction import AuctionInstance, MultiUnitDMU, UnitDemand
from groves_forge.evaluation import (
    HISTOGRAM_EDGES,
    aggregate_reports,
    budget_percent_returned,
    emit_report,
    evaluate,
    read_report,
    sample_misreports,
    summarize_budgets,
    truthfulness_audit,
)
from groves_forge.mechanisms import CNN, REDISTRIBUTION, FirstPriceMechanism, LinearRedistribution, new_mechanism
from groves_forge.simulators import DatasetSpec, HierarchicalGaussian, Uniform, generate_dataset
from groves_forge.vcg import VCG

from conftest import LANGUAGES


@pytest.fixture(scope="module")
def test_set():
    return generate_dataset(DatasetSpec(MultiUnitDMU(2), Uniform(0, 1), (3,), seed=2), 300)


def test_vcg_self_comparison(test_set):
    r = evaluate(VCG(), test_set)
    assert r.mean_budget_reduction_pct == 0.0
    assert r.deficit_fraction == 0.0 and r.ir_violation_fraction == 0.0
    assert r.histogram_counts.sum() == 300
    assert r.mechanism == "vcg"


def test_zero_rebate_report_matches_vcg(test_set):
    mech = new_mechanism(REDISTRIBUTION, CNN, MultiUnitDMU(2), 0)
    mech.net.zero_()
    a, b = evaluate(mech, test_set), evaluate(VCG(), test_set)
    assert a.scalar_fields() | {"mechanism": ""} == b.scalar_fields() | {"mechanism": ""}
    assert np.array_equal(a.histogram_counts, b.histogram_counts)


def test_hand_summary():
    # VCG budgets 10, 10, 10, 0; mechanism budgets 5, -2, 10, 0
    s = summarize_budgets([5.0, -2.0, 10.0, 0.0], [10.0, 10.0, 10.0, 0.0], [0.0, 0.0, -1.0, 0.0])
    assert s["mean_budget_reduction_pct"] == pytest.approx((50 + 120 + 0) / 3)
    assert s["deficit_fraction"] == 0.25
    assert s["max_deficit_pct_of_vcg"] == pytest.approx(20.0)
    assert s["ir_violation_fraction"] == 0.25
    assert s["zero_vcg_budget_auctions"] == 1
    assert s["ratio_of_sums_reduction_pct"] == pytest.approx(100 * (1 - 13 / 30))


def test_histogram_above_hundred_counts_deficits():
    rng = np.random.default_rng(0)
    vcg = rng.uniform(0, 2, 500)
    vcg[:20] = 0.0
    budgets = vcg * rng.uniform(-0.5, 1.2, 500)
    budgets[:10] = rng.uniform(-1, 1, 10)
    s = summarize_budgets(budgets, vcg, np.zeros(500))
    above = HISTOGRAM_EDGES[:-1] >= 100.0
    assert s["histogram_counts"][above].sum() == round(s["deficit_fraction"] * 500)
    assert s["histogram_counts"].sum() == 500


def test_percent_returned_boundaries():
    pct = budget_percent_returned([0.0, -1e-12, -1.0, 1.0, -1.0], [1.0, 1.0, 0.0, 0.0, 1.0])
    assert pct[0] == 100.0 and pct[1] == 100.0
    assert pct[2] == np.inf and pct[3] == -np.inf
    assert pct[4] == 200.0


def test_empty_inputs_refused(tmp_path):
    with pytest.raises(ValueError):
        evaluate(VCG(), [])
    r = evaluate(VCG(), generate_dataset(DatasetSpec(UnitDemand(1), Uniform(0, 1), (2,)), 3))
    r.num_auctions = 0
    with pytest.raises(ValueError):
        emit_report(r, tmp_path / "r.csv")


def test_report_round_trip(test_set, tmp_path):
    lin = LinearRedistribution([0.0, 0.2, 0.1], 3)
    r = evaluate(lin, test_set)
    path, hist = emit_report(r, tmp_path / "report.csv")
    assert hist.name == "report_histogram.csv"
    assert hist.read_text().splitlines()[0] == "bin_low,bin_high,count"
    back = read_report(path)
    assert back.scalar_fields() == r.scalar_fields()
    assert np.array_equal(back.histogram_counts, r.histogram_counts)
    assert np.array_equal(back.histogram_edges, r.histogram_edges)


def test_aggregate_reports(test_set):
    lin = [LinearRedistribution([0.0, c, 0.0], 3) for c in (0.1, 0.2)]
    reports = [evaluate(m, test_set) for m in lin]
    agg = aggregate_reports(reports)
    red = [r.mean_budget_reduction_pct for r in reports]
    assert agg.seeds == 2
    assert agg.mean_budget_reduction_pct == pytest.approx(np.mean(red))
    assert agg.budget_reduction_std == pytest.approx(np.std(red))
    assert agg.histogram_counts.sum() == 600


def test_threads_do_not_change_report(test_set):
    lin = LinearRedistribution([0.01, 0.2, 0.1], 3)
    a, b = evaluate(lin, test_set), evaluate(lin, test_set, threads=4)
    assert a.scalar_fields() == b.scalar_fields()


def test_first_price_burrito_fails_audit(burrito):
    # Alice (truth 12) shades to 7, still wins and keeps 5 instead of 0
    fp = FirstPriceMechanism()
    assert fp.outcome(burrito).utilities[0] == 0.0
    lied = fp.outcome(burrito.with_profile(0, np.array([7.0])))
    assert lied.allocation.assignment[0] == 0 and lied.payments[0] == 7.0
    gain = truthfulness_audit(fp, burrito, 0, 10, np.random.default_rng(0), Uniform(6.01, 11.99))
    assert gain > 0


def test_zero_misreports(burrito):
    assert truthfulness_audit(FirstPriceMechanism(), burrito, 0, 0, np.random.default_rng(0)) == 0.0


def test_vcg_audit_on_nested_gaussian():
    rng = np.random.default_rng(1)
    rho = HierarchicalGaussian(10.0, 1.0, 2.0, 0.5)
    for lang in LANGUAGES:
        data = generate_dataset(DatasetSpec(lang, rho, (3,), seed=4), 5)
        for inst in data:
            assert truthfulness_audit(VCG(), inst, 1, 15, rng, rho) <= 1e-9
            assert truthfulness_audit(VCG(), inst, 2, 15, rng) <= 1e-9


@pytest.mark.parametrize("language", LANGUAGES, ids=lambda l: l.name)
def test_misreports_are_valid_profiles(language):
    rng = np.random.default_rng(2)
    data = generate_dataset(DatasetSpec(language, Uniform(0, 3), (3,), seed=1), 4)
    for inst in data:
        reports = sample_misreports(inst, 0, 12, rng)
        assert len(reports) == 12
        for r in reports:
            AuctionInstance(language, inst.values).with_profile(0, r)
