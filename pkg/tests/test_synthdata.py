import hashlib
import json

import numpy as np
import pytest

from crossview.geometry import shift_panorama
from crossview.synthdata import (
    KIND_ROAD,
    CameraPose,
    RenderConfig,
    SceneSpec,
    build_dataset,
    generate_scene,
    load_dataset,
    raster_for,
    read_index,
    render_ground,
    render_pair,
    sample_camera,
    scene_seeds,
)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(11)


def test_scene_deterministic_and_seed_dependent(scene):
    assert generate_scene(11).to_json() == scene.to_json()
    assert generate_scene(12).digest() != scene.digest()


def test_scene_contents(scene):
    assert len({lm[4] for lm in scene.landmarks}) >= 3
    for x0, y0, x1, y1, h, _ in scene.buildings:
        assert 0 <= x0 < x1 <= scene.world_m and 0 <= y0 < y1 <= scene.world_m
        assert h > 0
    axes = {r[0] for r in scene.roads}
    # at least one road per axis, and every road spans the world, so the grid is connected
    assert axes == {"h", "v"}


def test_road_grid_connected(scene):
    r = raster_for(scene)
    road = r.kind == KIND_ROAD
    # flood fill from one road cell reaches every road cell
    start = tuple(np.argwhere(road)[0])
    seen = np.zeros_like(road)
    stack = [start]
    seen[start] = True
    while stack:
        i, j = stack.pop()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = i + di, j + dj
            if 0 <= a < r.n and 0 <= b < r.n and road[a, b] and not seen[a, b]:
                seen[a, b] = True
                stack.append((a, b))
    assert seen.sum() == road.sum()


def test_render_pair_contract(scene):
    rng = np.random.default_rng(0)
    for k in range(10):
        cam = sample_camera(scene, rng)
        p = render_pair(scene, cam, k)
        assert p.ground.shape == (16, 64, 3) and p.aerial.shape == (64, 64, 3)
        assert 16 <= p.gt.u < 48 and 16 <= p.gt.v < 48
        assert p.gt.heading == pytest.approx(cam.heading)
        assert p.scale.scale == pytest.approx(70 / 64)
        assert np.all((p.ground >= 0) & (p.ground <= 1))


def test_off_road_pose_rejected(scene):
    r = raster_for(scene)
    i, j = np.argwhere(r.kind != KIND_ROAD)[0]
    with pytest.raises(ValueError):
        render_pair(scene, CameraPose((j + 0.5) * r.res, (i + 0.5) * r.res, 0.0), 0)


def test_object_due_north_lands_on_center_column():
    scene = SceneSpec(seed=0, world_m=100.0, roads=[("h", 50.0, 8.0)],
                      landmarks=[(50.0, 30.0, 1.5, 6.0, (1.0, 0.0, 0.0))])
    g = render_ground(raster_for(scene), 50.0, 50.0, 0.0, RenderConfig())
    red = (g[..., 0] > 0.5) & (g[..., 1] < 0.1) & (g[..., 2] < 0.1)
    cols = np.flatnonzero(red.any(axis=0))
    assert 32 in cols and np.all(np.abs(cols - 32) <= 2)
    # facing East, the same pillar sits a quarter turn to the left
    g90 = render_ground(raster_for(scene), 50.0, 50.0, 90.0, RenderConfig())
    red90 = (g90[..., 0] > 0.5) & (g90[..., 1] < 0.1) & (g90[..., 2] < 0.1)
    assert 16 in np.flatnonzero(red90.any(axis=0))


def test_render_shift_commutation_exact(scene):
    cfg = RenderConfig()
    r = raster_for(scene)
    rng = np.random.default_rng(1)
    for _ in range(5):
        cam = sample_camera(scene, rng)
        g0 = render_ground(r, cam.x, cam.y, 0.0, cfg)
        for m in (1, 7, 32, 63):
            theta = m * 360.0 / 64
            np.testing.assert_array_equal(render_ground(r, cam.x, cam.y, theta, cfg), shift_panorama(g0, theta))


def test_split_scene_pools():
    assert scene_seeds(3, "train", 5) == scene_seeds(3, "same", 5)
    assert not set(scene_seeds(3, "train", 50)) & set(scene_seeds(3, "cross", 50))
    with pytest.raises(ValueError):
        scene_seeds(0, "bogus", 3)


def _tree_hash(d):
    h = hashlib.sha256()
    for p in sorted(d.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def test_build_dataset_layout_and_determinism(tmp_path):
    a = build_dataset(tmp_path / "a", 12, seed=5, split="train", n_scenes=3)
    recs = read_index(a)
    assert len(recs) == 12
    assert set(recs[0]) == {"id", "u", "v", "heading", "scale", "split", "scene_seed"}
    for r in recs:
        assert (a / f"ground_{r['id']}.cvt").exists() and (a / f"aerial_{r['id']}.cvt").exists()
    assert len({r["scale"] for r in recs}) == 1
    b = build_dataset(tmp_path / "b", 12, seed=5, split="train", n_scenes=3)
    assert _tree_hash(a) == _tree_hash(b)
    ds = load_dataset(a)
    assert ds.ground.shape == (12, 16, 64, 3) and ds.aerial.shape == (12, 64, 64, 3)


def test_cross_split_disjoint_in_index(tmp_path):
    tr = read_index(build_dataset(tmp_path / "tr", 6, seed=1, split="train", n_scenes=3))
    cr = read_index(build_dataset(tmp_path / "cr", 6, seed=1, split="cross", n_scenes=3))
    sa = read_index(build_dataset(tmp_path / "sa", 6, seed=1, split="same", n_scenes=3))
    assert not {r["scene_seed"] for r in tr} & {r["scene_seed"] for r in cr}
    assert {r["scene_seed"] for r in sa} <= {r["scene_seed"] for r in tr}
    # same-area test poses are new
    assert {(r["u"], r["v"]) for r in sa}.isdisjoint({(r["u"], r["v"]) for r in tr})


def test_build_dataset_refuses_non_empty(tmp_path):
    d = tmp_path / "d"
    build_dataset(d, 2, seed=0, n_scenes=1)
    with pytest.raises(FileExistsError):
        build_dataset(d, 2, seed=0, n_scenes=1)
    build_dataset(d, 3, seed=0, n_scenes=1, overwrite=True)
    assert len(read_index(d)) == 3
    with pytest.raises(ValueError):
        build_dataset(tmp_path / "e", 0, seed=0)


def test_index_is_json_lines(tmp_path):
    d = build_dataset(tmp_path / "j", 3, seed=2, n_scenes=1)
    for line in (d / "index.jsonl").read_text().splitlines():
        json.loads(line)
