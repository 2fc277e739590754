"""Budget-reduction, deficit and IR metrics, truthfulness audits and CSV reports."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .auction import AuctionInstance, HierarchicalBundles, MultiUnitDMU, UnitDemand
from .simulators import sample_profiles
from .vcg import VCG

__all__ = [
    "TOL",
    "EvalReport",
    "HISTOGRAM_EDGES",
    "budget_percent_returned",
    "summarize_budgets",
    "evaluate",
    "aggregate_reports",
    "value_of",
    "truthfulness_audit",
    "sample_misreports",
    "emit_report",
    "read_report",
]

TOL = 1e-9
MISREPORT_SCALES = (0.0, 0.5, 2.0)
# percent of the VCG budget returned; bins are (low, high]
HISTOGRAM_EDGES = np.concatenate([[-np.inf], np.arange(-100.0, 201.0, 10.0), [np.inf]])


@dataclass
class EvalReport:
    mechanism: str
    num_auctions: int
    mean_budget_reduction_pct: float
    ratio_of_sums_reduction_pct: float
    deficit_fraction: float
    max_deficit_pct_of_vcg: float
    ir_violation_fraction: float
    zero_vcg_budget_auctions: int
    seeds: int = 1
    budget_reduction_std: float = 0.0
    deficit_fraction_std: float = 0.0
    histogram_edges: np.ndarray = field(default_factory=lambda: HISTOGRAM_EDGES.copy(), repr=False)
    histogram_counts: np.ndarray = field(default=None, repr=False)

    def scalar_fields(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if not f.name.startswith("histogram")}


def budget_percent_returned(budgets, vcg_budgets) -> np.ndarray:
    """Per-auction percent of the VCG budget returned, placed for histogramming.

    Deficit auctions always land strictly above 100 and others at or below,
    including auctions whose VCG budget is zero (+inf / 100 / -inf).
    """
    b = np.asarray(budgets, dtype=np.float64)
    v = np.asarray(vcg_budgets, dtype=np.float64)
    deficit = b < -TOL
    positive = v > TOL
    pct = np.where(positive, 100.0 * (1.0 - b / np.where(positive, v, 1.0)), 100.0)
    pct = np.where(~positive & deficit, np.inf, pct)
    pct = np.where(~positive & (b > TOL), -np.inf, pct)
    above = np.nextafter(100.0, np.inf)
    return np.where(deficit, np.maximum(pct, above), np.minimum(pct, 100.0))


def summarize_budgets(budgets, vcg_budgets, min_utilities) -> dict:
    b = np.asarray(budgets, dtype=np.float64)
    v = np.asarray(vcg_budgets, dtype=np.float64)
    u = np.asarray(min_utilities, dtype=np.float64)
    if b.size == 0:
        raise ValueError("cannot summarize an empty set of auctions")
    positive = v > TOL
    reduction = 1.0 - b[positive] / v[positive]
    deficit = b < -TOL
    worst = (-b[deficit & positive] / v[deficit & positive]).max() if np.any(deficit & positive) else 0.0
    vsum = v.sum()
    pct = budget_percent_returned(b, v)
    idx = np.searchsorted(HISTOGRAM_EDGES, pct, side="left") - 1
    idx = np.clip(idx, 0, len(HISTOGRAM_EDGES) - 2)
    hist = np.bincount(idx, minlength=len(HISTOGRAM_EDGES) - 1)
    return {
        "num_auctions": int(b.size),
        "mean_budget_reduction_pct": float(100.0 * reduction.mean()) if reduction.size else float("nan"),
        "ratio_of_sums_reduction_pct": float(100.0 * (1.0 - b.sum() / vsum)) if vsum > TOL else float("nan"),
        "deficit_fraction": float(deficit.mean()),
        "max_deficit_pct_of_vcg": float(100.0 * worst),
        "ir_violation_fraction": float((u < -TOL).mean()),
        "zero_vcg_budget_auctions": int((~positive).sum()),
        "histogram_counts": hist,
    }


def evaluate(mechanism, test_set, threads: int = 1) -> EvalReport:
    instances = list(test_set)
    if not instances:
        raise ValueError("empty test set")
    for inst in instances:
        mechanism.compatible(inst)
    vcg = VCG()
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            mine = list(pool.map(mechanism.outcome, instances))
            ref = list(pool.map(vcg.outcome, instances))
    else:
        mine = [mechanism.outcome(x) for x in instances]
        ref = [vcg.outcome(x) for x in instances]
    s = summarize_budgets([o.budget for o in mine], [o.budget for o in ref],
                          [o.utilities.min() for o in mine])
    hist = s.pop("histogram_counts")
    return EvalReport(mechanism=getattr(mechanism, "name", type(mechanism).__name__),
                      histogram_counts=hist, **s)


def aggregate_reports(reports: list[EvalReport]) -> EvalReport:
    """Mean across seeds; stddev columns carry the spread of the two headline metrics."""
    if not reports:
        raise ValueError("no reports to aggregate")
    red = np.array([r.mean_budget_reduction_pct for r in reports])
    dfr = np.array([r.deficit_fraction for r in reports])

    def mean(name):
        return float(np.mean([getattr(r, name) for r in reports]))

    return EvalReport(
        mechanism=reports[0].mechanism,
        num_auctions=sum(r.num_auctions for r in reports),
        mean_budget_reduction_pct=float(red.mean()),
        ratio_of_sums_reduction_pct=mean("ratio_of_sums_reduction_pct"),
        deficit_fraction=float(dfr.mean()),
        max_deficit_pct_of_vcg=max(r.max_deficit_pct_of_vcg for r in reports),
        ir_violation_fraction=mean("ir_violation_fraction"),
        zero_vcg_budget_auctions=sum(r.zero_vcg_budget_auctions for r in reports),
        seeds=len(reports),
        budget_reduction_std=float(red.std()),
        deficit_fraction_std=float(dfr.std()),
        histogram_counts=np.sum([r.histogram_counts for r in reports], axis=0),
    )


def value_of(instance: AuctionInstance, player: int, assignment) -> float:
    """``player``'s true value for their part of an allocation."""
    v = instance.values[player]
    lang = instance.language
    if isinstance(lang, MultiUnitDMU):
        return float(v[:assignment].sum())
    if isinstance(lang, UnitDemand):
        return float(v[assignment]) if assignment >= 0 else 0.0
    return float(sum(v[m] for m in assignment))


def sample_misreports(instance: AuctionInstance, player: int, count: int, rng,
                      distribution=None) -> list[np.ndarray]:
    """Scaled copies of the truth first, then fresh draws from ``distribution``.

    Without a distribution, draws are uniform on [0, 2·max value].
    """
    truth = instance.values[player]
    out = [truth * s for s in MISREPORT_SCALES][:count]
    lang = instance.language
    while len(out) < count:
        if distribution is not None:
            out.append(sample_profiles(lang, distribution, 1, rng)[0])
            continue
        hi = 2.0 * max(float(instance.values.max()), 1.0)
        base = rng.uniform(0.0, hi, lang.width)
        if isinstance(lang, MultiUnitDMU):
            base = -np.sort(-base)
        elif isinstance(lang, HierarchicalBundles):
            for node, kids in enumerate(lang.children()):
                if kids is not None:
                    base[node] = base[kids[0]] + base[kids[1]] + base[node] * 0.1
        out.append(base)
    return out


def truthfulness_audit(mechanism, instance: AuctionInstance, player: int,
                       num_misreports: int, rng, distribution=None) -> float:
    """Largest utility gain ``player`` can get by misreporting (0 when none are tried)."""
    if not 0 <= player < instance.n:
        raise IndexError(player)
    if num_misreports <= 0:
        return 0.0
    truth = mechanism.outcome(instance)
    u_truth = truth.utilities[player]
    gain = -math.inf
    for report in sample_misreports(instance, player, num_misreports, rng, distribution):
        lied = mechanism.outcome(instance.with_profile(player, report))
        u = value_of(instance, player, lied.allocation.assignment[player]) - lied.payments[player]
        gain = max(gain, u - u_truth)
    return float(gain)


_FLOAT_FIELDS = {"mean_budget_reduction_pct", "ratio_of_sums_reduction_pct", "deficit_fraction",
                 "max_deficit_pct_of_vcg", "ir_violation_fraction", "budget_reduction_std",
                 "deficit_fraction_std"}


def emit_report(report: EvalReport, path) -> tuple[Path, Path]:
    """Write ``path`` (one header row plus one data row) and ``<stem>_histogram.csv``."""
    if report.num_auctions == 0:
        raise ValueError("refusing to write an empty report")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    row = report.scalar_fields()
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in row.items()})
    hist_path = path.with_name(path.stem + "_histogram.csv")
    edges = report.histogram_edges
    with open(hist_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], report.histogram_counts):
            w.writerow([format(lo, ".17g"), format(hi, ".17g"), int(c)])
    return path, hist_path


def read_report(path) -> EvalReport:
    path = Path(path)
    with open(path, newline="") as fh:
        row = next(csv.DictReader(fh))
    kwargs = {}
    for f in fields(EvalReport):
        if f.name.startswith("histogram"):
            continue
        raw = row[f.name]
        if f.name in _FLOAT_FIELDS:
            kwargs[f.name] = float(raw)
        elif f.name == "mechanism":
            kwargs[f.name] = raw
        else:
            kwargs[f.name] = int(raw)
    hist_path = path.with_name(path.stem + "_histogram.csv")
    with open(hist_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    edges = np.array([float(r["bin_low"]) for r in rows] + [float(rows[-1]["bin_high"])])
    counts = np.array([int(r["count"]) for r in rows])
    return EvalReport(histogram_edges=edges, histogram_counts=counts, **kwargs)
