"""Valuation samplers and the JSON-lines dataset format.

Every instance draws from its own PCG64 stream derived from
``SeedSequence(seed, spawn_key=(index,))``, so a dataset depends only on
(spec, count) and can be generated in any order or on any number of workers.
"""
from __future__ import annotations

import gzip
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .auction import (
    AuctionInstance,
    BiddingLanguage,
    HierarchicalBundles,
    InvalidInstance,
    MultiUnitDMU,
    language_from_dict,
)

__all__ = [
    "ClippedGaussian",
    "HierarchicalGaussian",
    "Uniform",
    "ValueDistribution",
    "DatasetSpec",
    "AuctionDataset",
    "DatasetError",
    "instance_rng",
    "sample_profiles",
    "sample_auction",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "dumps_dataset",
    "distribution_from_dict",
]

BUNDLE_BONUS_PROB = 0.2
BUNDLE_BONUS_MEAN = 0.1
BUNDLE_BONUS_STD = 0.01
MIN_SIGMA = 1e-3


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ClippedGaussian:
    mean: float
    stddev: float

    name = "gaussian"

    def __post_init__(self):
        if self.stddev <= 0:
            raise ValueError("stddev must be positive")

    def params(self, rng) -> tuple[float, float]:
        return self.mean, self.stddev

    def draw(self, rng, size, params) -> np.ndarray:
        mu, sigma = params
        return np.maximum(rng.normal(mu, sigma, size), 0.0)

    def to_dict(self):
        return {"name": self.name, "mean": self.mean, "stddev": self.stddev}


@dataclass(frozen=True)
class HierarchicalGaussian:
    """N(N(mean_of_mean, stddev_of_mean), N(mean_of_stddev, stddev_of_stddev)).

    The mean and stddev are drawn once per auction and shared by every
    player and object in it.
    """

    mean_of_mean: float
    stddev_of_mean: float
    mean_of_stddev: float
    stddev_of_stddev: float

    name = "hierarchical_gaussian"

    def __post_init__(self):
        if self.stddev_of_mean <= 0 or self.stddev_of_stddev <= 0 or self.mean_of_stddev <= 0:
            raise ValueError("stddev parameters must be positive")

    def params(self, rng) -> tuple[float, float]:
        mu = rng.normal(self.mean_of_mean, self.stddev_of_mean)
        sigma = max(rng.normal(self.mean_of_stddev, self.stddev_of_stddev), MIN_SIGMA)
        return mu, sigma

    def draw(self, rng, size, params) -> np.ndarray:
        mu, sigma = params
        return np.maximum(rng.normal(mu, sigma, size), 0.0)

    def to_dict(self):
        return {
            "name": self.name,
            "mean_of_mean": self.mean_of_mean,
            "stddev_of_mean": self.stddev_of_mean,
            "mean_of_stddev": self.mean_of_stddev,
            "stddev_of_stddev": self.stddev_of_stddev,
        }


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    name = "uniform"

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError("low must be below high")

    def params(self, rng):
        return None

    def draw(self, rng, size, params) -> np.ndarray:
        return np.maximum(rng.uniform(self.low, self.high, size), 0.0)

    def to_dict(self):
        return {"name": self.name, "low": self.low, "high": self.high}


ValueDistribution = Union[ClippedGaussian, HierarchicalGaussian, Uniform]


def distribution_from_dict(d: dict) -> ValueDistribution:
    kind = d["name"]
    if kind == ClippedGaussian.name:
        return ClippedGaussian(float(d["mean"]), float(d["stddev"]))
    if kind == HierarchicalGaussian.name:
        return HierarchicalGaussian(
            float(d["mean_of_mean"]),
            float(d["stddev_of_mean"]),
            float(d["mean_of_stddev"]),
            float(d["stddev_of_stddev"]),
        )
    if kind == Uniform.name:
        return Uniform(float(d["low"]), float(d["high"]))
    raise ValueError(f"unknown distribution {kind!r}")


@dataclass(frozen=True)
class DatasetSpec:
    language: BiddingLanguage
    distribution: ValueDistribution
    num_players: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        players = tuple(int(n) for n in self.num_players)
        if not players or any(n < 2 for n in players):
            raise ValueError("num_players must be non-empty with every n >= 2")
        object.__setattr__(self, "num_players", players)
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {
            "language": self.language.to_dict(),
            "distribution": self.distribution.to_dict(),
            "num_players": list(self.num_players),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(
            language_from_dict(d["language"]),
            distribution_from_dict(d["distribution"]),
            tuple(d["num_players"]),
            int(d["seed"]),
        )

    def fingerprint(self) -> str:
        """Short digest of the sampling setup (seed excluded)."""
        d = self.to_dict()
        del d["seed"]
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AuctionDataset:
    spec: DatasetSpec
    instances: list[AuctionInstance] = field(default_factory=list)

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, idx):
        return self.instances[idx]

    def __eq__(self, other):
        if not isinstance(other, AuctionDataset):
            return NotImplemented
        return self.spec == other.spec and self.instances == other.instances


def instance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def _hierarchical_values(lang: HierarchicalBundles, leaves: np.ndarray, rng) -> np.ndarray:
    n = leaves.shape[0]
    out = np.zeros((n, lang.width))
    out[:, : lang.num_leaves] = leaves
    children = lang.children()
    covers = lang.leaves_under()
    for node in range(lang.num_leaves, lang.width):
        bonus = rng.random(n) < BUNDLE_BONUS_PROB
        eps = np.maximum(rng.normal(BUNDLE_BONUS_MEAN, BUNDLE_BONUS_STD, n), 0.0)
        base = leaves[:, list(covers[node])].sum(axis=1)
        a, b = children[node]
        # a boosted child can outgrow an un-boosted parent; keep superadditivity
        out[:, node] = np.maximum(base * (1.0 + bonus * eps), out[:, a] + out[:, b])
    return out


def sample_profiles(language: BiddingLanguage, distribution: ValueDistribution,
                    n: int, rng, params=None) -> np.ndarray:
    """``n`` valid valuation rows for ``language``.

    ``params`` fixes the per-auction distribution parameters; when omitted
    they are drawn from ``rng``.
    """
    if params is None:
        params = distribution.params(rng)
    if isinstance(language, HierarchicalBundles):
        leaves = distribution.draw(rng, (n, language.num_leaves), params)
        return _hierarchical_values(language, leaves, rng)
    base = distribution.draw(rng, (n, language.width), params)
    if isinstance(language, MultiUnitDMU):
        base = -np.sort(-base, axis=1)
    return base


def sample_auction(spec: DatasetSpec, rng) -> AuctionInstance:
    n = spec.num_players[int(rng.integers(len(spec.num_players)))]
    values = sample_profiles(spec.language, spec.distribution, n, rng)
    return AuctionInstance(spec.language, values, validate=False)


def generate_dataset(spec: DatasetSpec, count: int, threads: int = 1,
                     offset: int = 0) -> AuctionDataset:
    """``count`` auctions; instance ``k`` uses stream ``offset + k`` of ``spec.seed``."""
    if count < 1:
        raise ValueError("count must be at least 1")

    def one(k):
        return sample_auction(spec, instance_rng(spec.seed, offset + k))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            instances = list(pool.map(one, range(count), chunksize=256))
    else:
        instances = [one(k) for k in range(count)]
    return AuctionDataset(spec, instances)


def _num(x: float) -> str:
    return format(float(x), ".17g")




def dumps_dataset(dataset: AuctionDataset) -> str:
    lines = [json.dumps({"spec": dataset.spec.to_dict(), "count": len(dataset)}, sort_keys=True)]
    name = dataset.spec.language.name
    for inst in dataset.instances:
        rows = ",".join("[" + ",".join(_num(x) for x in row) + "]" for row in inst.values)
        lines.append(f'{{"n": {inst.n}, "language": "{name}", "profiles": [{rows}]}}')
    return "\n".join(lines) + "\n"


def save_dataset(dataset: AuctionDataset, path) -> None:
    path = Path(path)
    blob = dumps_dataset(dataset).encode()
    if path.suffix == ".gz":
        # no embedded name and mtime=0 keep the bytes reproducible
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def load_dataset(path) -> AuctionDataset:
    path = Path(path)
    blob = path.read_bytes()
    if path.suffix == ".gz":
        blob = gzip.decompress(blob)
    text = blob.decode()
    lines = text.splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
        spec = DatasetSpec.from_dict(header["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"{path}:1: bad header: {exc}") from exc
    instances = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if rec["language"] != spec.language.name:
                raise DatasetError("language does not match header")
            profiles = rec["profiles"]
            if len(profiles) != rec["n"]:
                raise DatasetError("n does not match number of profiles")
            if rec["n"] not in spec.num_players:
                raise DatasetError(f"n={rec['n']} not allowed by the dataset header")
            instances.append(AuctionInstance(spec.language, profiles))
        except (ValueError, KeyError, TypeError, InvalidInstance) as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    if "count" in header and header["count"] != len(instances):
        raise DatasetError(f"{path}: header promises {header['count']} auctions, found {len(instances)}")
    return AuctionDataset(spec, instances)
