"""Trigger construction, placement geometry, stamping, and poisoning plans."""
import numpy as np
import pytest

from mimbd import (PlacementSpec, PoisonPlan, export_trigger, generate_shapes,
                   load_trigger, make_trigger, place_trigger, poison_labeled,
                   poison_unlabeled_target_class, stamp_all, trigger_positions)
from mimbd.errors import ConfigError, PlacementError


def test_make_trigger_white_and_seeded():
    w = make_trigger("white", 7)
    assert w.pixels.shape == (7, 7, 3) and float(w.pixels.min()) == 1.0
    r1 = make_trigger("seeded_random", 7, seed=11)
    r2 = make_trigger("seeded_random", 7, seed=11)
    r3 = make_trigger("seeded_random", 7, seed=12)
    assert np.array_equal(r1.pixels, r2.pixels)
    assert not np.array_equal(r1.pixels, r3.pixels)
    assert r1.pixels.min() >= 0.0 and r1.pixels.max() <= 1.0
    # at the native 4x4 cell size the seeded pattern is the raw random draw
    r4 = make_trigger("seeded_random", 4, seed=11)
    want = np.random.default_rng(11).random((4, 4, 3)).astype(np.float32)
    assert np.allclose(r4.pixels, want, atol=1e-6)
    with pytest.raises(ConfigError):
        make_trigger("sparkly", 7)


def test_fixed_and_center_positions():
    rng = np.random.default_rng(0)
    pl = PlacementSpec(strategy="fixed", coords=(25, 25))
    assert trigger_positions(pl, 7, (32, 32), rng) == [(25, 25)]
    pl = PlacementSpec(strategy="center")
    assert trigger_positions(pl, 7, (32, 32), rng) == [(12, 12)]
    with pytest.raises(PlacementError):
        trigger_positions(PlacementSpec(strategy="fixed", coords=(26, 26)),
                          7, (32, 32), rng)


def test_random_positions_in_bounds_and_seeded():
    pl = PlacementSpec(strategy="random", count=1)
    seen = set()
    for i in range(50):
        rng = np.random.default_rng(i)
        (x, y), = trigger_positions(pl, 7, (32, 32), rng)
        assert 0 <= x <= 25 and 0 <= y <= 25
        seen.add((x, y))
    assert len(seen) > 10  # actually random across seeds
    a = trigger_positions(pl, 7, (32, 32), np.random.default_rng(3))
    b = trigger_positions(pl, 7, (32, 32), np.random.default_rng(3))
    assert a == b


def test_grid_positions_non_overlapping():
    rng = np.random.default_rng(0)
    pl = PlacementSpec(strategy="multiple_grid", count=9)
    pos = trigger_positions(pl, 7, (32, 32), rng)
    assert len(pos) == 9
    boxes = [(x, y, x + 7, y + 7) for x, y in pos]
    for i in range(9):
        for j in range(i + 1, 9):
            ax0, ay0, ax1, ay1 = boxes[i]
            bx0, by0, bx1, by1 = boxes[j]
            assert ax1 <= bx0 or bx1 <= ax0 or ay1 <= by0 or by1 <= ay0, \
                f"triggers {i} and {j} overlap"
    for x, y in pos:
        assert 0 <= x <= 25 and 0 <= y <= 25


def test_grid_too_large_raises():
    rng = np.random.default_rng(0)
    pl = PlacementSpec(strategy="multiple_grid", count=25)
    with pytest.raises(PlacementError):
        trigger_positions(pl, 7, (32, 32), rng)  # five 7px columns > 32px


def test_localization_uses_bbox():
    rng = np.random.default_rng(0)
    pl = PlacementSpec(strategy="localization")
    pos = trigger_positions(pl, 7, (32, 32), rng, bbox=(4, 4, 14, 14))
    (x, y), = pos
    assert abs(x - 5) <= 1 and abs(y - 5) <= 1  # centered on the bbox


def test_stamping_writes_exact_pixels_and_is_idempotent():
    ds = generate_shapes(3, 4, 32, seed=0, name="t")
    trig = make_trigger("white", 7)
    pl = PlacementSpec(strategy="fixed", coords=(25, 25))
    s1 = stamp_all(ds, trig, pl, seed=0)
    assert np.allclose(s1.images[:, 25:32, 25:32, :], 1.0)
    # untouched pixels identical
    assert np.array_equal(s1.images[:, :25, :, :], ds.images[:, :25, :, :])
    s2 = stamp_all(s1, trig, pl, seed=0)
    assert np.array_equal(s1.images, s2.images)
    # source dataset never mutated
    assert not np.allclose(ds.images[:, 25:32, 25:32, :], 1.0)


def test_place_trigger_single_sample():
    ds = generate_shapes(2, 2, 32, seed=1, name="t")
    trig = make_trigger("white", 5)
    pl = PlacementSpec(strategy="center")
    out, positions = place_trigger(ds[0], trig, pl, np.random.default_rng(0))
    assert positions == [(13, 13)]
    assert np.allclose(out.image[13:18, 13:18], 1.0)
    assert out.label == ds[0].label


def test_poison_labeled_counts_and_flips():
    ds = generate_shapes(10, 50, 32, seed=2, name="t")  # 500 samples
    trig = make_trigger("white", 7)
    pl = PlacementSpec(strategy="fixed", coords=(25, 25))
    plan = PoisonPlan(rate=0.1, target_class=0, trigger=trig, placement=pl)
    poisoned, mask = poison_labeled(ds, plan, seed=0)
    assert mask.sum() == round(0.1 * 500) == 50
    assert (poisoned.labels[mask] == 0).all()
    # only non-target samples get chosen, original labels were not 0
    assert (ds.labels[mask] != 0).all()
    # unpoisoned rows untouched
    assert np.array_equal(poisoned.images[~mask], ds.images[~mask])
    assert np.array_equal(poisoned.labels[~mask], ds.labels[~mask])
    # deterministic in seed
    _, mask2 = poison_labeled(ds, plan, seed=0)
    assert np.array_equal(mask, mask2)
    _, mask3 = poison_labeled(ds, plan, seed=1)
    assert not np.array_equal(mask, mask3)


def test_poison_labeled_rate_cap_and_errors():
    ds = generate_shapes(10, 10, 32, seed=3, name="t")
    trig = make_trigger("white", 7)
    pl = PlacementSpec(strategy="fixed", coords=(25, 25))
    # rate 1.0 -> capped at the 90 non-target samples
    plan = PoisonPlan(rate=1.0, target_class=0, trigger=trig, placement=pl)
    _, mask = poison_labeled(ds, plan, seed=0)
    assert mask.sum() == 90
    with pytest.raises(ConfigError):
        PoisonPlan(rate=0.0, target_class=0, trigger=trig, placement=pl)
    tiny = PoisonPlan(rate=0.001, target_class=0, trigger=trig, placement=pl)
    with pytest.raises(ConfigError):
        poison_labeled(ds, tiny, seed=0)  # rounds to zero samples
    flipless = PoisonPlan(rate=0.5, target_class=0, trigger=trig,
                          placement=pl, flip_label=False)
    with pytest.raises(ConfigError):
        poison_labeled(ds, flipless, seed=0)


def test_poison_unlabeled_target_class_semantics():
    ds = generate_shapes(10, 50, 32, seed=4, name="t")
    trig = make_trigger("white", 7)
    pl = PlacementSpec(strategy="random", count=1)
    plan = PoisonPlan(rate=0.9, target_class=0, trigger=trig, placement=pl,
                      flip_label=False)
    poisoned, mask = poison_unlabeled_target_class(ds, plan, seed=0)
    # 90% of the 50 target-class images, labels unchanged
    assert mask.sum() == 45
    assert (ds.labels[mask] == 0).all()
    assert np.array_equal(poisoned.labels, ds.labels)
    assert np.array_equal(poisoned.images[~mask], ds.images[~mask])
    assert not np.array_equal(poisoned.images[mask], ds.images[mask])
    flipping = PoisonPlan(rate=0.9, target_class=0, trigger=trig, placement=pl)
    with pytest.raises(ConfigError):
        poison_unlabeled_target_class(ds, flipping, seed=0)


def test_trigger_export_roundtrip(tmp_path):
    trig = make_trigger("seeded_random", 7, seed=5)
    export_trigger(trig, tmp_path / "t")
    back = load_trigger(tmp_path / "t")
    assert back.kind == trig.kind and back.size == 7
    assert np.array_equal(back.pixels, trig.pixels)


def test_placement_spec_validation():
    with pytest.raises(ConfigError):
        PlacementSpec(strategy="sideways")
    with pytest.raises(ConfigError):
        PlacementSpec(strategy="fixed")  # fixed needs coords
    with pytest.raises(ConfigError):
        PlacementSpec(strategy="multiple_grid", count=0)
