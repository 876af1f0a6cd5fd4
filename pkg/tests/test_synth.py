import numpy as np
import pytest

from fuselet.errors import DataError
from fuselet.raster import load_polygons, load_raster, rasterize_polygons
from fuselet.sampling import assign, kmeans_fit
from fuselet.synth import SceneSpec, generate_scene, write_scene


@pytest.fixture(scope="module")
def scenes():
    return {seed: generate_scene(SceneSpec(seed=seed)) for seed in (0, 1, 2, 3, 100, 101, 102)}


def test_determinism():
    a, b = generate_scene(SceneSpec(seed=5)), generate_scene(SceneSpec(seed=5))
    assert a.raster.equals(b.raster)
    assert np.array_equal(a.truth_fire, b.truth_fire) and np.array_equal(a.truth_smoke, b.truth_smoke)
    for la, lb in zip(a.labels, b.labels):
        assert la.class_name == lb.class_name and all(np.array_equal(p, q) for p, q in zip(la.polygons, lb.polygons))


def test_no_fires():
    s = generate_scene(SceneSpec(n_fires=0, n_plumes=0, seed=1))
    assert not s.truth_fire.any() and not s.truth_smoke.any()
    fire = next(z for z in s.labels if z.class_name == "fire")
    assert fire.polygons == []


def test_shape_and_channels(scenes):
    s = scenes[0]
    assert s.raster.values.shape == (6, 128, 128) and s.raster.valid.all()
    assert s.truth_fire.any() and s.truth_smoke.any()


def test_invalid_specs():
    with pytest.raises(DataError):
        SceneSpec(n_rows=16)
    with pytest.raises(DataError):
        SceneSpec(n_fires=0, n_plumes=1)


def test_label_containment(scenes):
    for s in scenes.values():
        grid = s.raster.grid
        zones = {z.class_name: rasterize_polygons(z, grid) for z in s.labels}
        for cls, truth in (("fire", s.truth_fire), ("smoke", s.truth_smoke)):
            assert zones[cls].any()
            # every labelled pixel lies in the truth mask
            assert not (zones[cls] & ~truth).any()
            assert not (zones[cls] & zones[cls + "_background"]).any()
            assert not (zones[cls + "_background"] & truth).any()


def test_fire_hotter_than_background(scenes):
    for s in scenes.values():
        for band in s.raster.values[4:]:
            assert band[s.truth_fire].min() > np.percentile(band[~s.truth_fire], 99)


def test_two_blob_kmeans_gate(scenes):
    # lowest-inertia solution over several seeded starts; single starts can stall on the smoke split
    for s in scenes.values():
        v = s.raster.values.astype(float)
        x = np.column_stack([v[4:].mean(0).ravel(), v[:4].mean(0).ravel()])
        best = min((kmeans_fit(x, 2, seed=k) for k in range(8)), key=lambda m: m.inertia_history[-1])
        lab = assign(x, best.centroids)
        t = s.truth_fire.ravel()
        assert max((lab == t).mean(), (lab != t).mean()) >= 0.99


def test_write_scene(tmp_path, scenes):
    s = scenes[1]
    paths = write_scene(s, tmp_path, "scene")
    back = load_raster(paths["raster"])
    assert back.equals(s.raster)
    assert np.array_equal(load_raster(paths["truth_fire"]).mask(), s.truth_fire)
    names = [z.class_name for z in load_polygons(paths["labels"])]
    assert sorted(names) == ["fire", "fire_background", "smoke", "smoke_background"]
