"""Learned Groves and redistribution mechanisms, baselines, loss and training.

A learned mechanism pairs a backbone network with one of two payment forms:

* ``groves``: the network output is ``h`` in ``t_i = h(others) - Σ_{j≠i} v_j(k*)``.
* ``redistribution``: ``t_i = t_i^VCG - r(others)`` with the network as ``r >= 0``.

Either way player ``i``'s payment only depends on ``i``'s report through the
efficient allocation, so the mechanism is truthful whatever the weights.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .auction import AuctionInstance, BiddingLanguage, allocate, language_from_dict
from .neural import (
    AdamState,
    FlatNet,
    NonFiniteError,
    PaymentNetwork,
    adam_step,
    dump_json,
    init_flat,
    init_network,
    network_from_dict,
)
from .representation import build_flat, build_tensor, num_channels
from .vcg import MechanismOutcome, make_outcome, others_value, vcg_terms

__all__ = [
    "GROVES",
    "REDISTRIBUTION",
    "CNN",
    "MLP",
    "IncompatibleInstance",
    "TrainingAborted",
    "LearnedMechanism",
    "LinearRedistribution",
    "FirstPriceMechanism",
    "TrainConfig",
    "PreparedData",
    "prepare",
    "loss_and_grad",
    "loss",
    "new_mechanism",
    "train",
    "fit_linear_redistribution",
    "save_mechanism",
    "load_mechanism",
]

log = logging.getLogger(__name__)

GROVES = "groves"
REDISTRIBUTION = "redistribution"
CNN = "cnn"
MLP = "mlp"
CHECKPOINT_FORMAT = "groves-forge-checkpoint"
CHECKPOINT_VERSION = 1


class IncompatibleInstance(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class LearnedMechanism:
    def __init__(self, kind: str, net, language: BiddingLanguage,
                 trained_on: str = "", num_players: tuple[int, ...] = ()):
        if kind not in (GROVES, REDISTRIBUTION):
            raise ValueError(f"unknown mechanism kind {kind!r}")
        self.kind = kind
        self.net = net
        self.language = language
        self.trained_on = trained_on
        self.num_players = tuple(num_players)

    @property
    def backbone(self) -> str:
        return self.net.kind

    @property
    def name(self) -> str:
        return ("G-" if self.kind == GROVES else "R-") + self.backbone.upper()

    @property
    def sign(self) -> float:
        """d t_i / d net_i."""
        return 1.0 if self.kind == GROVES else -1.0

    def compatible(self, instance: AuctionInstance) -> None:
        if instance.language != self.language:
            raise IncompatibleInstance(
                f"mechanism trained for {self.language}, got {instance.language}"
            )
        if isinstance(self.net, FlatNet) and instance.n != self.net.num_players:
            raise IncompatibleInstance(
                f"MLP backbone only supports n={self.net.num_players} players, got n={instance.n}"
            )

    def features(self, instance: AuctionInstance) -> np.ndarray:
        """Stacked network inputs, one per player."""
        self.compatible(instance)
        if isinstance(self.net, FlatNet):
            return np.stack([build_flat(instance, i, self.net.num_players) for i in range(instance.n)])
        return np.stack([build_tensor(instance, i) for i in range(instance.n)])

    def network_outputs(self, instance: AuctionInstance) -> np.ndarray:
        return self.net.forward(self.features(instance))

    def payments(self, instance: AuctionInstance) -> np.ndarray:
        return self.outcome(instance).payments

    def outcome(self, instance: AuctionInstance) -> MechanismOutcome:
        out = self.network_outputs(instance)
        if self.kind == GROVES:
            alloc = allocate(instance)
            others = np.array([others_value(alloc, i) for i in range(instance.n)])
            return make_outcome(alloc, out - others)
        alloc, t_vcg, _ = vcg_terms(instance)
        return make_outcome(alloc, t_vcg - out)

    def outcomes(self, instances) -> list[MechanismOutcome]:
        return [self.outcome(x) for x in instances]


class LinearRedistribution:
    """Rebate ``max(0, c_0 + Σ_k c_k s_k)`` for sorted other-player totals ``s``."""

    name = "linear"

    def __init__(self, coefficients, num_players: int, language: BiddingLanguage | None = None):
        c = np.asarray(coefficients, dtype=np.float64)
        if c.shape != (num_players,):
            raise ValueError(f"expected {num_players} coefficients, got {c.shape}")
        self.coefficients = c
        self.num_players = num_players
        self.language = language

    def compatible(self, instance: AuctionInstance) -> None:
        if instance.n != self.num_players:
            raise IncompatibleInstance(
                f"linear redistribution fitted for n={self.num_players}, got n={instance.n}"
            )
        if self.language is not None and instance.language != self.language:
            raise IncompatibleInstance("bidding language mismatch")

    def rebates(self, instance: AuctionInstance) -> np.ndarray:
        self.compatible(instance)
        s = _sorted_other_totals(instance.values)
        return np.maximum(self.coefficients[0] + s @ self.coefficients[1:], 0.0)

    def outcome(self, instance: AuctionInstance) -> MechanismOutcome:
        r = self.rebates(instance)
        alloc, t_vcg, _ = vcg_terms(instance)
        return make_outcome(alloc, t_vcg - r)

    def outcomes(self, instances):
        return [self.outcome(x) for x in instances]


class FirstPriceMechanism:
    """Efficient allocation where each player pays their own reported value.

    Not truthful; kept as a negative control for the audits.
    """

    name = "first-price"

    def compatible(self, instance):
        pass

    def outcome(self, instance: AuctionInstance) -> MechanismOutcome:
        alloc = allocate(instance)
        return make_outcome(alloc, np.asarray(alloc.realized))

    def outcomes(self, instances):
        return [self.outcome(x) for x in instances]


def _sorted_other_totals(values: np.ndarray) -> np.ndarray:
    totals = values.sum(axis=1)
    n = totals.size
    out = np.empty((n, n - 1))
    for i in range(n):
        out[i] = -np.sort(-np.delete(totals, i))
    return out


LR_SCHEDULES = ("constant", "linear")


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 256
    iterations: int = 250_000
    lambda_b: float = 100.0
    lambda_r: float = 100.0
    seed: int = 0
    eval_every: int = 1000
    checkpoint_every: int = 5000
    holdout: int = 500
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}")
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "lr_schedule":
                continue
            if f.name in ("iterations", "seed", "holdout"):
                if value < 0:
                    raise ValueError(f"{f.name} must be non-negative")
            elif not value > 0:
                raise ValueError(f"{f.name} must be positive")


@dataclass
class PreparedData:
    """Per-instance constants of the loss, grouped by player count.

    For every group ``n``: ``inputs[n]`` holds network inputs of shape
    ``(L, n, ...)``, ``fixed[n]`` the payment terms that do not depend on the
    network (``-Σ_{j≠i} v_j(k*)`` or ``t^VCG``), ``realized[n]`` each
    player's ``v_i(k*)`` and ``vcg_budget[n]`` the VCG budget.
    ``index[n]`` maps group rows back to dataset positions.
    """

    inputs: dict[int, np.ndarray]
    fixed: dict[int, np.ndarray]
    realized: dict[int, np.ndarray]
    vcg_budget: dict[int, np.ndarray]
    index: dict[int, np.ndarray]

    @property
    def size(self) -> int:
        return sum(len(v) for v in self.index.values())

    def locate(self, positions: np.ndarray) -> dict[int, np.ndarray]:
        """Group-local rows for flat ``positions``, grouped by n in ascending order.

        Position ``p`` addresses the groups concatenated in ascending n.
        """
        if not hasattr(self, "_group_of"):
            self._group_of = np.concatenate([np.full(len(self.index[n]), n) for n in sorted(self.index)])
            self._row_of = np.concatenate([np.arange(len(self.index[n])) for n in sorted(self.index)])
        g = self._group_of[positions]
        r = self._row_of[positions]
        return {int(n): r[g == n] for n in sorted(self.index) if np.any(g == n)}


def prepare(mechanism: LearnedMechanism, instances) -> PreparedData:
    groups: dict[int, list[int]] = {}
    for k, inst in enumerate(instances):
        mechanism.compatible(inst)
        groups.setdefault(inst.n, []).append(k)
    data = PreparedData({}, {}, {}, {}, {})
    for n in sorted(groups):
        rows = [instances[k] for k in groups[n]]
        inputs, fixed, realized, budget = [], [], [], []
        for inst in rows:
            alloc, t_vcg, others = vcg_terms(inst)
            inputs.append(mechanism.features(inst))
            fixed.append(-others if mechanism.kind == GROVES else t_vcg)
            realized.append(np.asarray(alloc.realized))
            budget.append(t_vcg.sum())
        data.inputs[n] = np.stack(inputs)
        data.fixed[n] = np.stack(fixed)
        data.realized[n] = np.stack(realized)
        data.vcg_budget[n] = np.array(budget)
        data.index[n] = np.array(groups[n])
    return data


def _payments(mechanism, data: PreparedData, n: int, rows):
    x = data.inputs[n][rows]
    flat = x.reshape((-1,) + x.shape[2:])
    y, cache = mechanism.net.forward_batch(flat)
    t = data.fixed[n][rows] + mechanism.sign * y.reshape(len(rows), n)
    return t, cache


def loss_and_grad(mechanism: LearnedMechanism, data: PreparedData, groups: dict[int, np.ndarray],
                  lambda_b: float, lambda_r: float, with_grad: bool = True):
    """Mean penalized budget over the batch and its parameter gradients.

    ``groups`` maps n to group-local rows (see ``PreparedData.locate``).
    Allocations and VCG terms are constants; only the network carries gradient.
    """
    total = sum(len(r) for r in groups.values())
    if total == 0:
        raise ValueError("empty batch")
    value = 0.0
    grads = None
    for n, rows in groups.items():
        t, cache = _payments(mechanism, data, n, rows)
        budget = t.sum(axis=1)
        deficit = np.minimum(budget, 0.0)
        ir_gap = np.minimum(data.realized[n][rows] - t, 0.0)
        value += float(np.sum(budget + lambda_b * deficit**2 + lambda_r * np.sum(ir_gap**2, axis=1)))
        if not with_grad:
            continue
        dt = (1.0 + 2.0 * lambda_b * deficit)[:, None] - 2.0 * lambda_r * ir_gap
        dy = (mechanism.sign * dt / total).ravel()
        g = mechanism.net.backward(cache, dy)
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] = grads[k] + g[k]
    return value / total, grads


def loss(mechanism: LearnedMechanism, instances, lambda_b: float = 100.0, lambda_r: float = 100.0):
    """Loss and gradients on a batch of raw instances."""
    data = prepare(mechanism, instances)
    groups = {n: np.arange(len(idx)) for n, idx in data.index.items()}
    return loss_and_grad(mechanism, data, groups, lambda_b, lambda_r)


def new_mechanism(kind: str, backbone: str, language: BiddingLanguage, seed: int,
                  num_players: tuple[int, ...] = (), trained_on: str = "") -> LearnedMechanism:
    width = language.width
    if backbone == CNN:
        net = init_network(width, num_channels(width), seed)
    elif backbone == MLP:
        if len(set(num_players)) != 1:
            raise ValueError("the MLP backbone needs a single fixed number of players")
        n = num_players[0]
        net = init_flat(width * (n - 1), n, seed)
    else:
        raise ValueError(f"unknown backbone {backbone!r}")
    return LearnedMechanism(kind, net, language, trained_on, num_players)


def _metrics(mechanism, data: PreparedData, lambda_b, lambda_r) -> dict:
    from .evaluation import summarize_budgets

    groups = {n: np.arange(len(idx)) for n, idx in data.index.items()}
    value, _ = loss_and_grad(mechanism, data, groups, lambda_b, lambda_r, with_grad=False)
    budgets, vcg, min_u = [], [], []
    for n, rows in groups.items():
        t, _ = _payments(mechanism, data, n, rows)
        budgets.append(t.sum(axis=1))
        vcg.append(data.vcg_budget[n])
        min_u.append((data.realized[n] - t).min(axis=1))
    s = summarize_budgets(np.concatenate(budgets), np.concatenate(vcg), np.concatenate(min_u))
    return {"loss": value, "budget_reduction": s["mean_budget_reduction_pct"],
            "deficit_fraction": s["deficit_fraction"],
            "ir_violation_fraction": s["ir_violation_fraction"]}


METRIC_FIELDS = ["iteration", "loss", "budget_reduction", "deficit_fraction", "ir_violation_fraction"]


def train(config: TrainConfig, train_set, kind: str = GROVES, backbone: str = CNN,
          out_dir: str | Path | None = None, mechanism: LearnedMechanism | None = None,
          progress=None) -> tuple[LearnedMechanism, list[dict]]:
    """Minimize the penalized budget with Adam on mini-batches drawn with replacement.

    The last ``config.holdout`` auctions are kept out of the batches and used
    for the periodic metrics. Returns the trained mechanism and metric rows;
    with ``out_dir`` a checkpoint and ``metrics.csv`` are also written.
    """
    spec = train_set.spec
    instances = list(train_set.instances)
    holdout = min(config.holdout, max(len(instances) - 1, 0))
    fit, held = instances[: len(instances) - holdout], instances[len(instances) - holdout:]
    if not fit:
        raise ValueError("training set is empty")
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    init_seed = int(seeds[0].generate_state(1)[0])
    if mechanism is None:
        mechanism = new_mechanism(kind, backbone, spec.language, init_seed,
                                  spec.num_players, spec.fingerprint())
    state = AdamState(mechanism.net.params)
    rng = np.random.Generator(np.random.PCG64(seeds[1]))
    out = Path(out_dir) if out_dir is not None else None
    history: list[dict] = []
    if config.iterations == 0:
        if out is not None:
            save_mechanism(mechanism, out / "checkpoint.json", state, 0, config)
            _write_metrics(out / "metrics.csv", history)
        return mechanism, history

    data = prepare(mechanism, fit)
    held_data = prepare(mechanism, held) if held else None
    for it in range(1, config.iterations + 1):
        positions = rng.integers(0, data.size, config.batch_size)
        groups = data.locate(positions)
        value, grads = loss_and_grad(mechanism, data, groups, config.lambda_b, config.lambda_r)
        if not math.isfinite(value):
            raise _abort(mechanism, out, state, it, config, f"non-finite loss at iteration {it}")
        try:
            adam_step(mechanism.net.params, grads, state, _lr_at(config, it))
        except NonFiniteError as exc:
            raise _abort(mechanism, out, state, it, config, str(exc)) from exc
        if it % config.eval_every == 0 or it == config.iterations:
            row = {"iteration": it}
            if held_data is not None:
                row.update(_metrics(mechanism, held_data, config.lambda_b, config.lambda_r))
            else:
                row.update({"loss": value, "budget_reduction": float("nan"),
                            "deficit_fraction": float("nan"), "ir_violation_fraction": float("nan")})
            row["train_loss"] = value
            history.append(row)
            log.info("iter %d loss %.5f reduction %.2f%% deficits %.4f", it, row["loss"],
                     row["budget_reduction"], row["deficit_fraction"])
            if progress is not None:
                progress(row)
        if out is not None and it % config.checkpoint_every == 0:
            save_mechanism(mechanism, out / "checkpoint.json", state, it, config)
    if out is not None:
        save_mechanism(mechanism, out / "checkpoint.json", state, config.iterations, config)
        _write_metrics(out / "metrics.csv", history)
    return mechanism, history


def _lr_at(config: TrainConfig, it: int) -> float:
    if config.lr_schedule == "linear":
        # decays to lr / iterations on the last step
        return config.lr * (config.iterations - it + 1) / config.iterations
    return config.lr


def _abort(mechanism, out, state, it, config, message):
    path = None
    if out is not None:
        path = out / "checkpoint_abort.json"
        try:
            save_mechanism(mechanism, path, state, it, config)
        except NonFiniteError:
            path = out / "checkpoint.json" if (out / "checkpoint.json").exists() else None
    return TrainingAborted(message, path)


def _write_metrics(path: Path, history: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: format(row[k], ".17g") if isinstance(row[k], float) else row[k]
                        for k in METRIC_FIELDS})


def fit_linear_redistribution(train_set, n: int | None = None, iterations: int = 3000,
                              lr: float = 1e-2, lambda_b: float = 100.0,
                              lambda_r: float = 100.0) -> LinearRedistribution:
    """Fit linear rebate coefficients on the penalized-budget loss.

    Full-batch Adam on the unclamped linear rebate; the rebate is clamped at
    zero when the fitted mechanism is used.
    """
    instances = list(train_set)
    sizes = {x.n for x in instances}
    if len(sizes) != 1:
        raise ValueError(f"linear redistribution needs a fixed n, dataset has {sorted(sizes)}")
    n_data = sizes.pop()
    if n is not None and n != n_data:
        raise ValueError(f"requested n={n} but dataset has n={n_data}")
    n = n_data
    stats, t_vcg, realized = [], [], []
    for inst in instances:
        alloc, t, _ = vcg_terms(inst)
        stats.append(_sorted_other_totals(inst.values))
        t_vcg.append(t)
        realized.append(alloc.realized)
    s = np.stack(stats)                                  # (L, n, n-1)
    feats = np.concatenate([np.ones(s.shape[:2] + (1,)), s], axis=2)
    t_vcg, realized = np.array(t_vcg), np.array(realized)
    params = {"c": np.zeros(n)}
    state = AdamState(params)
    count = len(instances)
    for _ in range(iterations):
        r = feats @ params["c"]
        t = t_vcg - r
        budget = t.sum(axis=1)
        deficit = np.minimum(budget, 0.0)
        ir_gap = np.minimum(realized - t, 0.0)
        dt = (1.0 + 2.0 * lambda_b * deficit)[:, None] - 2.0 * lambda_r * ir_gap
        grad = -np.einsum("li,lik->k", dt, feats) / count
        adam_step(params, {"c": grad}, state, lr)
    language = instances[0].language
    return LinearRedistribution(params["c"], n, language)


def save_mechanism(mechanism, path, adam: AdamState | None = None, iteration: int = 0,
                   config: TrainConfig | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(mechanism, LinearRedistribution):
        body = {"kind": "linear", "num_players": mechanism.num_players,
                "coefficients": mechanism.coefficients}
        if mechanism.language is not None:
            body["language"] = mechanism.language.to_dict()
    else:
        body = {
            "kind": mechanism.kind,
            "backbone": mechanism.backbone,
            "language": mechanism.language.to_dict(),
            "trained_on": mechanism.trained_on,
            "num_players": list(mechanism.num_players),
            "network": mechanism.net.to_dict(),
        }
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "iteration": iteration,
           "mechanism": body}
    if config is not None:
        doc["train_config"] = asdict(config)
    if adam is not None:
        doc["adam"] = adam.to_dict()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(dump_json(doc) + "\n")
    tmp.replace(path)


def load_mechanism(path):
    import json

    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    body = doc["mechanism"]
    if body["kind"] == "linear":
        c = np.asarray(body["coefficients"]["data"], dtype=np.float64)
        lang = language_from_dict(body["language"]) if "language" in body else None
        return LinearRedistribution(c, int(body["num_players"]), lang)
    net = network_from_dict(body["network"])
    return LearnedMechanism(body["kind"], net, language_from_dict(body["language"]),
                            body.get("trained_on", ""), tuple(body.get("num_players", ())))


def load_adam(path) -> AdamState | None:
    import json

    doc = json.loads(Path(path).read_text())
    return AdamState.from_dict(doc["adam"]) if "adam" in doc else None
