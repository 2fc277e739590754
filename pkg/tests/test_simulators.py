import gzip

import numpy as np
import pytest

from groves_forge.auction import HierarchicalBundles, MultiUnitDMU, UnitDemand
from groves_forge.simulators import (
    AuctionDataset,
    ClippedGaussian,
    DatasetError,
    DatasetSpec,
    HierarchicalGaussian,
    Uniform,
    dumps_dataset,
    generate_dataset,
    instance_rng,
    load_dataset,
    sample_auction,
    save_dataset,
)

NESTED_RHO = HierarchicalGaussian(10.0, 1.0, 2.0, 0.5)


def test_multi_unit_profiles_non_increasing():
    spec = DatasetSpec(MultiUnitDMU(15), NESTED_RHO, (10,), seed=3)
    for k in range(50):
        inst = sample_auction(spec, instance_rng(3, k))
        assert inst.values.shape == (10, 15)
        assert np.all(np.diff(inst.values, axis=1) <= 0)


def test_uniform_support():
    spec = DatasetSpec(UnitDemand(8), Uniform(0.0, 1.0), (4,), seed=0)
    data = generate_dataset(spec, 200)
    vals = np.concatenate([x.values.ravel() for x in data])
    assert vals.min() >= 0.0 and vals.max() <= 1.0


def test_hierarchical_superadditive():
    lang = HierarchicalBundles(8)
    spec = DatasetSpec(lang, NESTED_RHO, (3,), seed=9)
    data = generate_dataset(spec, 3400)
    covers = lang.leaves_under()
    children = lang.children()
    for inst in data:
        v = inst.values
        assert np.all(v[:, -1] >= v[:, :8].sum(axis=1))
        for node in range(8, 15):
            a, b = children[node]
            assert np.all(v[:, node] >= v[:, a] + v[:, b])
            assert np.all(v[:, node] >= v[:, list(covers[node])].sum(axis=1))


def test_bundle_bonus_rate():
    # about 20% of internal nodes carry the ~10% bonus
    lang = HierarchicalBundles(2)
    data = generate_dataset(DatasetSpec(lang, ClippedGaussian(10, 2), (2,), seed=4), 5000)
    ratio = np.concatenate([x.values[:, 2] / x.values[:, :2].sum(axis=1) for x in data])
    boosted = ratio > 1.0
    assert boosted.mean() == pytest.approx(0.2, abs=0.02)
    assert ratio[boosted].mean() == pytest.approx(1.1, abs=0.01)


def test_clipped_gaussian_mean():
    rng = np.random.default_rng(0)
    dist = ClippedGaussian(10.0, 2.0)
    draws = dist.draw(rng, 100_000, dist.params(rng))
    assert abs(draws.mean() - 10.0) < 3 * 2.0 / np.sqrt(draws.size)
    assert draws.min() >= 0.0


def test_invalid_distributions():
    with pytest.raises(ValueError):
        ClippedGaussian(1.0, 0.0)
    with pytest.raises(ValueError):
        Uniform(1.0, 1.0)
    with pytest.raises(ValueError):
        DatasetSpec(UnitDemand(2), Uniform(0, 1), (1,))


def test_num_players_drawn_from_spec():
    data = generate_dataset(DatasetSpec(UnitDemand(2), Uniform(0, 1), (3, 5), seed=1), 400)
    sizes = {x.n for x in data}
    assert sizes == {3, 5}


def test_determinism_and_threads():
    spec = DatasetSpec(HierarchicalBundles(4), NESTED_RHO, (2, 3), seed=123)
    a = generate_dataset(spec, 100)
    b = generate_dataset(spec, 100, threads=4)
    assert dumps_dataset(a) == dumps_dataset(b)
    assert len(generate_dataset(spec, 1)) == 1
    with pytest.raises(ValueError):
        generate_dataset(spec, 0)


@pytest.mark.parametrize("suffix", [".jsonl", ".jsonl.gz"])
def test_round_trip(tmp_path, suffix):
    spec = DatasetSpec(MultiUnitDMU(4), NESTED_RHO, (3, 4), seed=5)
    data = generate_dataset(spec, 50)
    path = tmp_path / ("d" + suffix)
    save_dataset(data, path)
    back = load_dataset(path)
    assert back == data
    save_dataset(back, tmp_path / ("e" + suffix))
    assert (tmp_path / ("e" + suffix)).read_bytes() == path.read_bytes()


def test_burrito_fixture_file(tmp_path):
    path = tmp_path / "burrito.jsonl"
    path.write_text(
        '{"spec": {"language": {"name": "unit_demand", "num_objects": 1}, '
        '"distribution": {"name": "uniform", "low": 0, "high": 20}, "num_players": [2], "seed": 0}}\n'
        '{"n": 2, "language": "unit_demand", "profiles": [[12], [6]]}\n'
    )
    data = load_dataset(path)
    assert len(data) == 1
    assert data[0].values.tolist() == [[12.0], [6.0]]
    assert data.spec.language == UnitDemand(1)


@pytest.mark.parametrize(
    "line, message",
    [
        ("not json", ":3:"),
        ('{"n": 2, "language": "multi_unit", "profiles": [[1, 2], [1, 0]]}', "non-increasing"),
        ('{"n": 3, "language": "multi_unit", "profiles": [[2, 1], [1, 0]]}', ":3:"),
        ('{"n": 2, "language": "unit_demand", "profiles": [[2, 1], [1, 0]]}', ":3:"),
    ],
)
def test_malformed_line_names_line(tmp_path, line, message):
    spec = DatasetSpec(MultiUnitDMU(2), Uniform(0, 1), (2,), seed=0)
    text = dumps_dataset(generate_dataset(spec, 1)).splitlines()
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(text[:2] + [line]) + "\n")
    with pytest.raises(DatasetError, match=message):
        load_dataset(path)


def test_seventeen_digit_serialization():
    spec = DatasetSpec(UnitDemand(1), Uniform(0, 1), (2,), seed=0)
    data = AuctionDataset(spec, generate_dataset(spec, 1).instances)
    line = dumps_dataset(data).splitlines()[1]
    assert format(data[0].values[0, 0], ".17g") in line


def test_gzip_is_reproducible(tmp_path):
    spec = DatasetSpec(UnitDemand(3), Uniform(0, 1), (2,), seed=0)
    data = generate_dataset(spec, 10)
    save_dataset(data, tmp_path / "a.jsonl.gz")
    save_dataset(data, tmp_path / "b.jsonl.gz")
    assert (tmp_path / "a.jsonl.gz").read_bytes() == (tmp_path / "b.jsonl.gz").read_bytes()
    assert gzip.decompress((tmp_path / "a.jsonl.gz").read_bytes()).decode() == dumps_dataset(data)
