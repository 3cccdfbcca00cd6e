"""Background masking, online patch clustering, and object-id embedding."""
import numpy as np
import pytest

from wakesleep.pipeline import Pipeline
from wakesleep.stam import (
    CentroidMemory,
    STAMConfig,
    STAMPreprocessor,
    background_mask,
    dump_ltm,
    grid_config,
    image_patches,
)


def _brute_force_mask(plane, eps, patch, stride):
    h, w = plane.shape
    eroded, dilated = np.empty_like(plane, dtype=float), np.empty_like(plane, dtype=float)
    for r in range(h):
        for c in range(w):
            win = plane[max(0, r - 1) : r + 2, max(0, c - 1) : c + 2]
            eroded[r, c], dilated[r, c] = win.min(), win.max()
    gap = dilated - eroded
    rows = range(0, h - patch + 1, stride)
    cols = range(0, w - patch + 1, stride)
    return np.array(
        [[gap[r : r + patch, c : c + patch].max() <= eps for c in cols] for r in rows]
    )


def test_constant_image_is_all_background():
    for value in (0.0, 3.7):
        mask = background_mask(np.full((16, 16), value), eps=0.05, patch=4, stride=2)
        assert mask.all()
        assert mask.shape == (7, 7)


def test_single_object_marks_only_overlapping_patches():
    plane = np.zeros((16, 16))
    plane[7:9, 7:9] = 1.0
    mask = background_mask(plane, eps=0.05, patch=4, stride=2)
    foreground = {tuple(rc) for rc in np.argwhere(~mask)}
    # dilation spreads the object to pixel rows/cols 6..9; patches starting at
    # 4, 6, 8 overlap that span, i.e. grid cells 2, 3, 4 on both axes
    assert foreground == {(r, c) for r in (2, 3, 4) for c in (2, 3, 4)}


def test_mask_matches_brute_force_min_max_oracle():
    rng = np.random.default_rng(0)
    plane = rng.integers(0, 6, size=(16, 16)).astype(float)
    for eps in (0.5, 2.0):
        for patch, stride in ((4, 2), (16, 4), (3, 3)):
            np.testing.assert_array_equal(
                background_mask(plane, eps, patch, stride),
                _brute_force_mask(plane, eps, patch, stride),
            )


def test_empty_memory_creates_first_centroid():
    mem = CentroidMemory(STAMConfig())
    uid, novel = mem.cluster_patch(np.ones(16))
    assert (uid, novel) == (0, True)
    assert len(mem.stm) == 1 and mem.ltm == []


def test_matching_centroid_exactly_is_a_fixed_point():
    mem = CentroidMemory(STAMConfig())
    patch = np.array([0.3, 0.7, 0.1, 0.9])
    mem.cluster_patch(patch)
    uid, novel = mem.cluster_patch(patch)
    assert (uid, novel) == (0, False)
    np.testing.assert_allclose(mem.stm[0].vector, patch, rtol=0, atol=1e-15)
    assert mem.distance_history[-1] == 0.0


def test_alpha_one_jumps_centroid_to_the_patch():
    mem = CentroidMemory(STAMConfig(alpha=1.0))
    mem.cluster_patch(np.zeros(3))
    mem.cluster_patch(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(mem.stm[0].vector, [1.0, 2.0, 3.0])


def test_novelty_needs_fifty_distances_then_fires():
    mem = CentroidMemory(STAMConfig())
    base = np.zeros(9)
    mem.cluster_patch(base)  # creation records no distance
    for _ in range(49):
        assert mem.cluster_patch(base) == (0, False)
    assert len(mem.distance_history) == 49
    # far patch with only 49 distances: not novel, merged into the centroid
    uid, novel = mem.cluster_patch(np.full(9, 5.0))
    assert (uid, novel) == (0, False)
    # fiftieth distance recorded; the next far patch clears the percentile
    uid, novel = mem.cluster_patch(np.full(9, 10.0))
    assert novel and uid == 1
    assert len(mem.stm) == 2


def test_promotion_copies_a_frozen_centroid_to_ltm():
    mem = CentroidMemory(STAMConfig(theta=3))
    patch = np.array([1.0, 0.0, 1.0])
    for _ in range(5):
        mem.cluster_patch(patch)
    assert len(mem.ltm) == 1 and mem.ltm[0].uid == 0
    np.testing.assert_array_equal(mem.ltm[0].vector, patch)
    for _ in range(10):  # keep dragging the live twin elsewhere
        mem.cluster_patch(np.array([2.0, 1.0, 0.0]))
    assert not np.array_equal(mem.stm[0].vector, mem.ltm[0].vector)
    np.testing.assert_array_equal(mem.ltm[0].vector, patch)  # frozen
    assert len(mem.ltm) == 1  # no re-promotion


def test_stm_eviction_skips_promoted_centroids():
    mem = CentroidMemory(STAMConfig(theta=1, delta=3))
    anchor = np.zeros(4)
    for _ in range(55):  # promote the anchor and fill the distance history
        mem.cluster_patch(anchor)
    assert mem.stm[0].promoted
    for fill in (10.0, 20.0, 30.0):  # three novel creations overflow delta=3
        _, novel = mem.cluster_patch(np.full(4, fill))
        assert novel
    assert len(mem.stm) == 3
    assert [c.uid for c in mem.stm] == [0, 2, 3]  # uid 1 evicted, anchor kept


def test_novelty_threshold_matches_sorted_rank():
    mem = CentroidMemory(STAMConfig())
    rng = np.random.default_rng(1)
    values = rng.exponential(size=137)
    mem.distance_history.extend(values)
    threshold = mem.novelty_threshold()
    ordered = np.sort(values)
    rank = 0.95 * (len(values) - 1)
    lo, hi = int(np.floor(rank)) - 1, int(np.ceil(rank)) + 1
    assert ordered[max(lo, 0)] <= threshold <= ordered[min(hi, len(values) - 1)]


def test_convex_updates_stay_in_the_hull_of_inputs():
    mem = CentroidMemory(STAMConfig(alpha=0.3))
    rng = np.random.default_rng(2)
    first = rng.uniform(0, 1, 3)
    mem.cluster_patch(first)
    seen = [first]
    for _ in range(40):
        patch = rng.uniform(0, 1, 3)
        mem.cluster_patch(patch)
        seen.append(patch)
        stacked = np.stack(seen)
        assert np.all(mem.stm[0].vector >= stacked.min(axis=0) - 1e-12)
        assert np.all(mem.stm[0].vector <= stacked.max(axis=0) + 1e-12)


def test_three_planted_prototypes_yield_exactly_three_object_ids():
    wins = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        while True:
            prototypes = rng.uniform(0, 1, size=(3, 16))
            gaps = [
                np.linalg.norm(prototypes[i] - prototypes[j])
                for i in range(3)
                for j in range(i + 1, 3)
            ]
            if min(gaps) >= 1.0:
                break
        mem = CentroidMemory(STAMConfig())
        for k in (0,) * 167 + (1,) * 167 + (2,) * 166:  # blockwise stream
            mem.cluster_patch(prototypes[k] + 0.01 * rng.standard_normal(16))
        if len(set(mem.object_ids().values())) == 3:
            wins += 1
    assert wins >= 9


def _train_on(mem, plane, repeats=25):
    for _ in range(repeats):
        mem.learn_image(plane)


def test_embed_empty_image_gives_empty_grid_and_zero_vector():
    mem = CentroidMemory(grid_config())
    plane = np.zeros((16, 16))
    grid, bag = mem.embed(plane)  # untrained: no long-term ids at all
    assert grid == {} and not bag.any()

    object_plane = np.zeros((16, 16))
    object_plane[7:9, 7:9] = 1.0
    _train_on(mem, object_plane)
    grid, bag = mem.embed(plane)  # trained, but the image is all background
    assert grid == {} and not bag.any()
    assert bag.shape == (mem.config.ltm_capacity,)


def test_embed_reduces_one_object_to_one_grid_entry():
    mem = CentroidMemory(grid_config())
    plane = np.zeros((16, 16))
    plane[7:9, 7:9] = 1.0
    _train_on(mem, plane)
    assert len(mem.ltm) >= 1
    grid, bag = mem.embed(plane)
    assert len(grid) == 1
    assert bag.sum() == 1


def test_two_identical_objects_share_an_object_id():
    mem = CentroidMemory(grid_config())
    plane = np.zeros((16, 16))
    plane[7:9, 3:5] = 1.0
    plane[7:9, 11:13] = 1.0  # same shape, 8 columns to the right
    _train_on(mem, plane)
    grid, bag = mem.embed(plane)
    assert len(grid) == 2
    ids = set(grid.values())
    assert len(ids) == 1
    assert bag[ids.pop()] == 2


def test_preprocessor_learns_only_during_training():
    pipeline = Pipeline()
    plugin = STAMPreprocessor()
    pipeline.register_preprocessor(plugin)
    planes = np.zeros((3, 16, 16))
    planes[0, 7:9, 7:9] = 4.0  # a unit-type code; plugin rescales to [0, 1]

    aug = pipeline.augment(planes, "collect_nofog", 0, training=False)
    assert aug.features["stam"].shape == (plugin.memory.config.ltm_capacity,)
    assert not aug.features["stam"].any()
    assert len(plugin.memory.stm) == 0  # evaluation never writes

    for _ in range(30):
        pipeline.augment(planes, "collect_nofog", 0, training=True)
    assert len(plugin.memory.stm) > 0
    aug = pipeline.augment(planes, "collect_nofog", 0, training=False)
    assert aug.features["stam"].sum() == 1  # one object embedded
    assert plugin.last_grid


def test_ltm_dump_roundtrip(tmp_path):
    mem = CentroidMemory(STAMConfig(theta=2))
    for patch in (np.zeros(4), np.ones(4) * 9):
        for _ in range(60):
            mem.cluster_patch(patch)
    path = tmp_path / "ltm.npz"
    summary = dump_ltm(mem, path)
    stored = np.load(path)
    assert stored["centroids"].shape[0] == len(mem.ltm) == summary["centroids"]
    ids = mem.object_ids()
    for row, centroid in zip(stored["id_table"], mem.ltm):
        assert row[1] == centroid.uid and row[2] == ids[centroid.uid]


def test_config_validation():
    with pytest.raises(ValueError):
        STAMConfig(alpha=0.0)
    with pytest.raises(ValueError):
        STAMConfig(beta=1.0)
    with pytest.raises(ValueError):
        STAMConfig(delta=0)
    with pytest.raises(ValueError):
        STAMConfig(eps=-1.0)
    with pytest.raises(ValueError):
        image_patches(np.zeros((8, 8)), patch=9, stride=2)
