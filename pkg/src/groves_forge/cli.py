"""``groves-forge`` command line: gen-data, train, eval, audit, oracle-check.

Settings resolve in order: built-in defaults, ``--preset``, ``--config``
(a ``key = value`` text file), ``--set key=value`` and the dedicated flags.
Every command writes the resolved settings to its output directory so the
run can be repeated with ``--config <out>/<command>.config``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .auction import (
    AuctionInstance,
    HierarchicalBundles,
    MultiUnitDMU,
    UnitDemand,
    allocate,
    brute_force_allocate,
)
from .evaluation import (
    TOL,
    aggregate_reports,
    emit_report,
    evaluate,
    truthfulness_audit,
)
from .mechanisms import (
    CNN,
    GROVES,
    MLP,
    REDISTRIBUTION,
    FirstPriceMechanism,
    IncompatibleInstance,
    LearnedMechanism,
    LinearRedistribution,
    TrainConfig,
    fit_linear_redistribution,
    load_mechanism,
    new_mechanism,
    save_mechanism,
    train,
)
from .simulators import (
    ClippedGaussian,
    DatasetSpec,
    HierarchicalGaussian,
    Uniform,
    generate_dataset,
    instance_rng,
    load_dataset,
    sample_profiles,
    save_dataset,
)
from .vcg import VCG, vcg_outcome

log = logging.getLogger("groves_forge")

LINEAR = "linear"
BASELINES = ("vcg", "first-price")


@dataclasses.dataclass
class RunConfig:
    language: str = "multi_unit"
    items: int = 15
    distribution: str = "hierarchical_gaussian"
    low: float = 0.0
    high: float = 1.0
    mean: float = 10.0
    stddev: float = 2.0
    mean_of_mean: float = 10.0
    stddev_of_mean: float = 1.0
    mean_of_stddev: float = 2.0
    stddev_of_stddev: float = 0.5
    players: tuple = (10,)
    test_players: tuple = ()
    count_train: int = 100_000
    count_test: int = 2000
    data_seed: int = 0
    seeds: tuple = (0,)
    kind: str = GROVES
    backbone: str = CNN
    init: str = "random"
    lr: float = 1e-5
    lr_schedule: str = "constant"
    batch_size: int = 256
    iterations: int = 250_000
    lambda_b: float = 100.0
    lambda_r: float = 100.0
    eval_every: int = 1000
    checkpoint_every: int = 5000
    holdout: int = 500
    linear_iterations: int = 3000
    linear_lr: float = 1e-2
    linear_lambda: float = 100.0
    audit_instances: int = 100
    audit_players: int = 3
    audit_misreports: int = 50
    oracle_instances: int = 1000
    threads: int = 1

    def validate(self) -> None:
        if self.language not in ("multi_unit", "unit_demand", "hierarchical"):
            raise ValueError(f"unknown language {self.language!r}")
        if self.distribution not in ("uniform", "gaussian", "hierarchical_gaussian"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.kind not in (GROVES, REDISTRIBUTION):
            raise ValueError(f"kind must be {GROVES!r} or {REDISTRIBUTION!r}")
        if self.backbone not in (CNN, MLP, LINEAR):
            raise ValueError(f"backbone must be one of {CNN}, {MLP}, {LINEAR}")
        if self.init not in ("random", "zero"):
            raise ValueError("init must be 'random' or 'zero'")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        for name in ("count_train", "count_test", "threads", "linear_iterations",
                     "audit_instances", "audit_players", "oracle_instances"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.audit_misreports < 0:
            raise ValueError("audit_misreports must be non-negative")
        # surfaces bad language, distribution and training values before any work
        self.language_obj()
        self.distribution_obj()
        self.train_spec()
        self.test_spec()
        self.train_config(self.seeds[0])

    def language_obj(self):
        return {"multi_unit": MultiUnitDMU, "unit_demand": UnitDemand,
                "hierarchical": HierarchicalBundles}[self.language](self.items)

    def distribution_obj(self):
        if self.distribution == "uniform":
            return Uniform(self.low, self.high)
        if self.distribution == "gaussian":
            return ClippedGaussian(self.mean, self.stddev)
        return HierarchicalGaussian(self.mean_of_mean, self.stddev_of_mean,
                                    self.mean_of_stddev, self.stddev_of_stddev)

    def train_spec(self) -> DatasetSpec:
        return DatasetSpec(self.language_obj(), self.distribution_obj(), self.players, self.data_seed)

    def test_spec(self) -> DatasetSpec:
        # a distinct stream so test auctions never repeat training ones
        seed = (self.data_seed + 2**32) % 2**64
        return DatasetSpec(self.language_obj(), self.distribution_obj(),
                           self.test_players or self.players, seed)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, iterations=self.iterations,
                           lambda_b=self.lambda_b, lambda_r=self.lambda_r, seed=seed,
                           eval_every=self.eval_every, checkpoint_every=self.checkpoint_every,
                           holdout=self.holdout, lr_schedule=self.lr_schedule)

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = format(v, ".17g")
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}

PRESETS = {
    "desk-n3": {
        "language": "multi_unit", "items": "2", "distribution": "uniform", "low": "0", "high": "1",
        "players": "3", "count_train": "10000", "count_test": "2000", "iterations": "20000",
        "lr": "1e-3", "lr_schedule": "linear", "lambda_b": "50000", "lambda_r": "50000",
        "linear_lambda": "1000", "eval_every": "1000",
    },
    "desk-varn": {
        "language": "multi_unit", "items": "2", "distribution": "uniform", "low": "0", "high": "1",
        "players": "3,5", "test_players": "4", "count_train": "10000", "count_test": "2000",
        "kind": REDISTRIBUTION, "iterations": "20000", "lr": "1e-3", "lr_schedule": "linear",
        "lambda_b": "50000", "lambda_r": "50000", "eval_every": "1000",
    },
    "paper-dmu": {"language": "multi_unit", "items": "15"},
    "paper-unit-demand": {"language": "unit_demand", "items": "8"},
    "paper-hierarchical": {"language": "hierarchical", "items": "8"},
}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ValueError(f"unknown setting {key!r}")
    default = _FIELDS[key].default
    raw = raw.strip()
    if isinstance(default, tuple):
        if not raw:
            return ()
        return tuple(int(x) for x in raw.split(","))
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve_config(args) -> RunConfig:
    layers: list[tuple[str, dict[str, str]]] = []
    if args.preset:
        layers.append((f"preset {args.preset}", PRESETS[args.preset]))
    if args.config:
        layers.append((args.config, parse_config_text(Path(args.config).read_text(), args.config)))
    sets = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip().replace("-", "_")] = v
    layers.append(("--set", sets))
    flags = {}
    for key in ("kind", "backbone", "iterations", "count_train", "count_test", "data_seed",
                "players", "test_players", "lr", "init"):
        value = getattr(args, key, None)
        if value is not None:
            flags[key] = str(value)
    if getattr(args, "seeds", None) is not None:
        flags["seeds"] = args.seeds
    if getattr(args, "seed", None) is not None:
        flags["seeds"] = str(args.seed)
    threads = args.threads if args.threads is not None else os.environ.get("GROVES_FORGE_THREADS")
    if threads is not None:
        flags["threads"] = str(threads)
    layers.append(("flags", flags))

    values = {}
    for source, layer in layers:
        for key, raw in layer.items():
            try:
                values[key] = _coerce(key, raw)
            except ValueError as exc:
                raise ValueError(f"{source}: {key}: {exc}") from exc
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prepare_out(out: Path, names: list[str], force: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    existing = [n for n in names if (out / n).exists()]
    if existing and not force:
        raise FileExistsError(f"{out}: {', '.join(existing)} already exist (use --force)")


def _write_config(cfg: RunConfig, out: Path, command: str) -> None:
    (out / f"{command}.config").write_text(cfg.dumps())


# commands

def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    _prepare_out(out, ["train.jsonl", "test.jsonl"], args.force)
    _write_config(cfg, out, "gen-data")
    for name, spec, count in (("train", cfg.train_spec(), cfg.count_train),
                              ("test", cfg.test_spec(), cfg.count_test)):
        data = generate_dataset(spec, count, threads=cfg.threads)
        path = out / f"{name}.jsonl"
        save_dataset(data, path)
        print(f"{name}: {len(data)} auctions, fingerprint {spec.fingerprint()}, "
              f"sha256 {_sha256(path)[:16]}, {path}")
    return 0


def _seed_dirs(run: Path) -> list[Path]:
    dirs = sorted(p for p in run.glob("seed-*") if (p / "checkpoint.json").exists())
    if not dirs and (run / "checkpoint.json").exists():
        dirs = [run]
    if not dirs:
        raise FileNotFoundError(f"{run}: no checkpoints found")
    return dirs


def cmd_train(cfg: RunConfig, args) -> int:
    data_dir = Path(args.data)
    train_set = load_dataset(data_dir / "train.jsonl")
    spec = train_set.spec
    if spec.language != cfg.language_obj():
        raise ValueError(f"dataset language {spec.language} does not match config {cfg.language_obj()}")
    out = Path(args.out)
    _prepare_out(out, [f"seed-{s}" for s in cfg.seeds], args.force)
    _write_config(cfg, out, "train")
    for seed in cfg.seeds:
        seed_dir = out / f"seed-{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        if cfg.backbone == LINEAR:
            mech = fit_linear_redistribution(train_set, iterations=cfg.linear_iterations,
                                             lr=cfg.linear_lr, lambda_b=cfg.linear_lambda,
                                             lambda_r=cfg.linear_lambda)
            save_mechanism(mech, seed_dir / "checkpoint.json")
            print(f"seed {seed}: linear coefficients {np.array2string(mech.coefficients)}")
            continue
        mechanism = None
        if cfg.init == "zero":
            mechanism = new_mechanism(cfg.kind, cfg.backbone, spec.language, 0, spec.num_players,
                                      spec.fingerprint())
            mechanism.net.zero_()
        mech, history = train(cfg.train_config(seed), train_set, kind=cfg.kind,
                              backbone=cfg.backbone, out_dir=seed_dir, mechanism=mechanism)
        last = history[-1] if history else None
        summary = (f"held-out reduction {last['budget_reduction']:.2f}%, deficits "
                   f"{last['deficit_fraction']:.4f}") if last else "untrained"
        print(f"seed {seed}: {mech.name} {summary}, {seed_dir / 'checkpoint.json'}")
    return 0


def _load_mechanisms(args) -> list[tuple[str, object]]:
    if getattr(args, "baseline", None):
        return [(args.baseline, VCG() if args.baseline == "vcg" else FirstPriceMechanism())]
    if args.checkpoint:
        return [(str(p), load_mechanism(p)) for p in args.checkpoint]
    if not args.run:
        raise ValueError("one of --run, --checkpoint or --baseline is required")
    return [(str(d), load_mechanism(d / "checkpoint.json")) for d in _seed_dirs(Path(args.run))]


def _test_set(args):
    path = Path(args.test) if args.test else Path(args.data) / "test.jsonl"
    return load_dataset(path)


def _check_fingerprint(mech, test_set) -> None:
    trained_on = getattr(mech, "trained_on", "")
    if trained_on and trained_on != test_set.spec.fingerprint():
        warnings.warn(
            f"{mech.name} was trained on data with fingerprint {trained_on}, "
            f"test set has {test_set.spec.fingerprint()}",
            stacklevel=2,
        )


def cmd_eval(cfg: RunConfig, args) -> int:
    test_set = _test_set(args)
    mechs = _load_mechanisms(args)
    out = Path(args.out)
    _prepare_out(out, ["report.csv"], args.force)
    _write_config(cfg, out, "eval")
    reports = []
    for source, mech in mechs:
        _check_fingerprint(mech, test_set)
        try:
            report = evaluate(mech, test_set, threads=cfg.threads)
        except IncompatibleInstance as exc:
            print(f"error: {source}: {exc}", file=sys.stderr)
            return 2
        if len(mechs) > 1:
            emit_report(report, Path(source) / "report.csv")
        reports.append(report)
    report = aggregate_reports(reports) if len(reports) > 1 else reports[0]
    emit_report(report, out / "report.csv")
    print(f"{report.mechanism}: {report.num_auctions} auctions, seeds {report.seeds}, "
          f"reduction {report.mean_budget_reduction_pct:.2f}% "
          f"(std {report.budget_reduction_std:.2f}), deficits {report.deficit_fraction:.4f}, "
          f"IR violations {report.ir_violation_fraction:.4f}")
    return 0


def audit_mechanism(mech, instances, cfg: RunConfig, distribution, seed: int) -> list[dict]:
    """Hard-invariant checks on ``instances``; one row per check."""
    rows = []
    rng = np.random.default_rng(seed)
    # allocation oracle against exhaustive search where that is affordable
    mismatches = checked = 0
    for inst in instances:
        try:
            brute = brute_force_allocate(inst).welfare
        except ValueError:
            continue
        checked += 1
        mismatches += abs(allocate(inst).welfare - brute) > TOL
    rows.append({"check": "oracle_equivalence", "value": mismatches, "threshold": 0,
                 "detail": f"{checked} instances compared", "passed": mismatches == 0})
    gain = 0.0
    for inst in instances:
        for player in range(min(cfg.audit_players, inst.n)):
            gain = max(gain, truthfulness_audit(mech, inst, player, cfg.audit_misreports, rng,
                                                distribution))
    rows.append({"check": "truthfulness_max_gain", "value": gain, "threshold": TOL,
                 "detail": f"{cfg.audit_misreports} misreports per player", "passed": gain <= TOL})
    outcomes = [mech.outcome(x) for x in instances]
    refs = [vcg_outcome(x) for x in instances]
    ir = sum(int(o.utilities.min() < -TOL) for o in outcomes)
    deficits = sum(int(o.budget < -TOL) for o in outcomes)
    must_ir = isinstance(mech, (VCG, LinearRedistribution)) or (
        isinstance(mech, LearnedMechanism) and mech.kind == REDISTRIBUTION)
    rows.append({"check": "ir_violations", "value": ir, "threshold": 0,
                 "detail": "hard" if must_ir else "reported", "passed": ir == 0 or not must_ir})
    rows.append({"check": "wbb_violations", "value": deficits, "threshold": 0,
                 "detail": "hard" if isinstance(mech, VCG) else "reported",
                 "passed": deficits == 0 or not isinstance(mech, VCG)})
    if must_ir:
        worse = sum(int(np.any(o.utilities < r.utilities)) for o, r in zip(outcomes, refs))
        rows.append({"check": "utilities_below_vcg", "value": worse, "threshold": 0,
                     "detail": "hard", "passed": worse == 0})
    vcg_total = sum(r.budget for r in refs)
    rows.append({"check": "budget_vs_vcg", "value": sum(o.budget for o in outcomes) - vcg_total,
                 "threshold": "", "detail": f"vcg budget {vcg_total:.6g}", "passed": True})
    return rows


def cmd_audit(cfg: RunConfig, args) -> int:
    test_set = _test_set(args)
    instances = test_set.instances[: cfg.audit_instances]
    out = Path(args.out)
    _prepare_out(out, ["audit.csv"], args.force)
    _write_config(cfg, out, "audit")
    ok = True
    all_rows = []
    for source, mech in _load_mechanisms(args):
        _check_fingerprint(mech, test_set)
        rows = audit_mechanism(mech, instances, cfg, test_set.spec.distribution, cfg.seeds[0])
        for row in rows:
            row["mechanism"] = getattr(mech, "name", type(mech).__name__)
            row["source"] = source
            print(f"{'PASS' if row['passed'] else 'FAIL'} {row['mechanism']} {row['check']} "
                  f"= {row['value']} ({row['detail']})")
            ok &= bool(row["passed"])
        all_rows.extend(rows)
    with open(out / "audit.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["mechanism", "source", "check", "value", "threshold", "detail",
                                "passed"])
        w.writeheader()
        for row in all_rows:
            v = row["value"]
            w.writerow(row | {"value": format(v, ".17g") if isinstance(v, float) else v})
    print("audit passed" if ok else "audit FAILED")
    return 0 if ok else 1


def oracle_check(num_instances: int, seed: int = 0, max_players: int = 4, width: int = 4):
    """Compare ``allocate`` against exhaustive search on random small instances.

    Returns ``{language name: (instances, mismatches)}``.
    """
    results = {}
    languages = [MultiUnitDMU(width), UnitDemand(width), HierarchicalBundles(width)]
    for k, lang in enumerate(languages):
        mismatches = 0
        for idx in range(num_instances):
            rng = instance_rng(seed + k, idx)
            n = int(rng.integers(2, max_players + 1))
            if idx % 2:
                values = sample_profiles(lang, Uniform(0.0, 1.0), n, rng)
            else:
                # small integers make welfare ties common
                values = np.floor(sample_profiles(lang, Uniform(0.0, 5.0), n, rng))
                if isinstance(lang, HierarchicalBundles):
                    for node, kids in enumerate(lang.children()):
                        if kids is not None:
                            values[:, node] = np.maximum(values[:, node],
                                                         values[:, kids[0]] + values[:, kids[1]])
            inst = AuctionInstance(lang, values)
            if abs(allocate(inst).welfare - brute_force_allocate(inst).welfare) > TOL:
                mismatches += 1
        results[lang.name] = (num_instances, mismatches)
    return results


def cmd_oracle_check(cfg: RunConfig, args) -> int:
    results = oracle_check(cfg.oracle_instances, seed=cfg.seeds[0])
    ok = True
    for name, (count, bad) in results.items():
        print(f"{'PASS' if bad == 0 else 'FAIL'} {name}: {count} instances, {bad} mismatches")
        ok &= bad == 0
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_config(cfg, out, "oracle-check")
        with open(out / "oracle_check.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["language", "instances", "mismatches"])
            for name, (count, bad) in results.items():
                w.writerow([name, count, bad])
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int,
                        help="worker threads (default $GROVES_FORGE_THREADS or 1)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--seed", type=int, help="single training/audit seed")
    common.add_argument("--seeds", help="comma-separated seeds for multi-seed runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="groves-forge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="sample train and test auctions")
    p.add_argument("--count-train", type=int)
    p.add_argument("--count-test", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--players", help="comma-separated player counts for training data")
    p.add_argument("--test-players", help="comma-separated player counts for test data")

    p = sub.add_parser("train", parents=[common], help="train a payment rule")
    p.add_argument("--data", required=True, help="directory holding train.jsonl")
    p.add_argument("--kind", choices=[GROVES, REDISTRIBUTION])
    p.add_argument("--backbone", choices=[CNN, MLP, LINEAR])
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--init", choices=["random", "zero"])

    for name, text in (("eval", "evaluate against VCG on the test set"),
                       ("audit", "check truthfulness, IR and WBB invariants")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", help="directory holding test.jsonl")
        p.add_argument("--test", help="test dataset file (overrides --data)")
        src = p.add_mutually_exclusive_group()
        src.add_argument("--run", help="training output directory (all seed-* checkpoints)")
        src.add_argument("--checkpoint", nargs="+", type=Path)
        src.add_argument("--baseline", choices=BASELINES)

    sub.add_parser("oracle-check", parents=[common],
                   help="compare allocation oracles against exhaustive search")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "audit": cmd_audit, "oracle-check": cmd_oracle_check}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    if args.command != "oracle-check" and not args.out:
        parser.error("--out is required")
    if args.command in ("eval", "audit") and not (args.data or args.test):
        parser.error("--data or --test is required")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ValueError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
