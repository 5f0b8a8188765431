import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from bevcomm.grid import FeatureTensor, GridShape, GroundTruth, validate_frame
from bevcomm.layers import sigmoid
from bevcomm.selective import StConfig, apply_st
from bevcomm.sim import (
    GenerationError,
    ScenarioConfig,
    bandwidth_loss,
    gen_frame,
    line_of_sight_points,
    proxy_recall,
    visibility_map,
)

SMALL = GridShape(8, 24, 40)


def test_frames_are_reproducible():
    cfg = ScenarioConfig(seed=3, grid=SMALL, objects=6)
    a, b = gen_frame(cfg, 5), gen_frame(cfg, 5)
    for va, vb in zip(a.vehicles, b.vehicles):
        assert va.features.values.tobytes() == vb.features.values.tobytes()
        assert va.confidence.logits.tobytes() == vb.confidence.logits.tobytes()
        assert va.position == vb.position
    assert a.truth.objects == b.truth.objects
    c = gen_frame(cfg, 6)
    assert c.vehicles[0].features != a.vehicles[0].features


def test_frame_structure():
    frame = gen_frame(ScenarioConfig(grid=SMALL, objects=5, vehicles=4), 0)
    assert validate_frame(frame, SMALL) == []
    assert [v.vehicle_id for v in frame.vehicles] == [0, 1, 2, 3]
    assert frame.ego.vehicle_id == 0
    occupied = frame.truth.occupied(SMALL.height, SMALL.width)
    for v in frame.vehicles:
        assert not occupied[v.position]
    for cells in frame.truth.objects:
        assert all(0 <= r < SMALL.height and 0 <= c < SMALL.width for r, c in cells)


def test_zero_objects_sit_at_floor():
    cfg = ScenarioConfig(grid=SMALL, objects=0)
    frame = gen_frame(cfg, 0)
    for v in frame.vehicles:
        logits = v.confidence.logits
        assert abs(logits.mean() - cfg.floor_logit) < 0.05
        res = apply_st(v, StConfig())
        expected = sigmoid(logits.max(axis=0)) > 0.01
        if not v.is_ego:
            assert np.array_equal(res.mask.bits, expected)
            assert res.rate < 0.01


def test_st_retention_regime():
    frame = gen_frame(ScenarioConfig(), 0)
    rates = [apply_st(v, StConfig()).rate for v in frame.remotes]
    assert all(0.05 < r < 0.6 for r in rates)


def test_placement_failure_raises():
    with pytest.raises(GenerationError):
        gen_frame(ScenarioConfig(grid=GridShape(2, 4, 4), objects=5, object_height=(3, 3), object_width=(3, 3)), 0)


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(vehicles=0)
    with pytest.raises(ValueError):
        ScenarioConfig(vehicles=17)
    with pytest.raises(ValueError):
        ScenarioConfig(grid=GridShape(2, 4, 4))  # default object sizes do not fit


@pytest.mark.parametrize("seed", range(6))
def test_visibility_matches_ray_walk(seed):
    rng = np.random.default_rng(seed)
    labels = np.full((14, 20), -1)
    for k in range(5):
        r, c = rng.integers(0, 12), rng.integers(0, 17)
        labels[r : r + 2, c : c + 3] = k
    free = np.argwhere(labels < 0)
    origin = tuple(int(x) for x in free[rng.integers(len(free))])
    radius = float(rng.uniform(5, 25))
    got = visibility_map(labels, origin, radius, occlusion=True)
    assert got.tolist() == oracles.visible(labels, origin, radius)
    assert visibility_map(labels, origin, radius, occlusion=False).tolist() == oracles.visible(labels, origin, radius, False)


def test_cell_behind_object_is_hidden():
    labels = np.full((5, 11), -1)
    labels[2, 4] = 0
    vis = visibility_map(labels, (2, 0), 100.0)
    assert vis[2, 3] and vis[2, 4]
    assert not vis[2, 5] and not vis[2, 10]
    assert vis[0, 10]


@given(st.integers(-300, 300), st.integers(-300, 300))
def test_line_of_sight_integer_rule(dr, dc):
    origin = (400, 400)
    target = (origin[0] + dr, origin[1] + dc)
    rows, cols = line_of_sight_points(origin, np.array([target[0]]), np.array([target[1]]))
    n = max(abs(dr), abs(dc))
    walk = list(zip(rows[0, : max(n - 1, 0)].tolist(), cols[0, : max(n - 1, 0)].tolist()))
    assert walk == oracles.line_of_sight(origin, target)


def test_long_walks_use_the_same_rule():
    origin = (0, 0)
    target = (1500, 2999)
    rows, cols = line_of_sight_points(origin, np.array([target[0]]), np.array([target[1]]))
    assert list(zip(rows[0].tolist(), cols[0].tolist())) == oracles.line_of_sight(origin, target)


def test_proxy_recall_examples(rng):
    truth = GroundTruth((frozenset({(0, 0), (0, 1)}), frozenset({(2, 2)})))
    assert proxy_recall(FeatureTensor(np.zeros((2, 3, 3))), truth, 0.5) == 0.0
    assert proxy_recall(FeatureTensor(np.ones((2, 3, 3))), truth, 0.5) == 1.0
    assert proxy_recall(FeatureTensor(np.zeros((2, 3, 3))), GroundTruth(), 0.5) == 1.0
    values = rng.standard_normal((3, 6, 7))
    cells = {(int(r), int(c)) for r, c in zip(rng.integers(0, 6, 10), rng.integers(0, 7, 10))}
    truth = GroundTruth((frozenset(cells),))
    hits = sum(np.sqrt(sum(values[ch, r, c] ** 2 for ch in range(3))) > 0.8 for r, c in cells)
    assert proxy_recall(FeatureTensor(values), truth, 0.8) == hits / len(cells)


def test_bandwidth_loss_examples(rng):
    shape = (2, 3, 4)
    assert bandwidth_loss([FeatureTensor(np.zeros(shape))] * 2) == 0.0
    assert bandwidth_loss([FeatureTensor(np.ones(shape))] * 2) == 1.0
    assert bandwidth_loss([]) == 0.0
    maps = [FeatureTensor(rng.standard_normal(shape) * (rng.random(shape) < 0.4)) for _ in range(3)]
    count = sum(1 for m in maps for x in m.values.ravel() if x != 0.0)
    assert bandwidth_loss(maps) == count / 72
