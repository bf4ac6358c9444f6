"""Procedural scene generators: label-space contracts and reproducibility."""

import numpy as np
import pytest

from segdistill.errors import ConfigError
from segdistill.scenes import (VOID, flying_cars_composite,
                               generate_dense_scene, generate_sparse_scene,
                               generate_unlabeled_scene, get_palette,
                               render_object)


@pytest.fixture
def pal():
    return get_palette(8)


def test_palettes_available():
    for n in (8, 11):
        p = get_palette(n)
        assert p.num_classes == n
        assert len(p.colors) == n
        assert set(p.structural) | set(p.objects) == set(range(n))
    with pytest.raises(ConfigError):
        get_palette(5)


def test_palette_lookup(pal):
    assert pal.id_of("car") == 5
    assert pal.object_names() == ("car", "pedestrian", "sign")
    with pytest.raises(ValueError):
        pal.id_of("boat")


def test_dense_scene_fully_labeled(pal):
    for seed in range(5):
        img, lab = generate_dense_scene(np.random.default_rng(seed), pal, 64, 48)
        assert img.shape == (48, 64, 3) and img.dtype == np.uint8
        assert lab.shape == (48, 64) and lab.dtype == np.uint8
        present = set(np.unique(lab))
        assert VOID not in present                  # dense means no void
        assert present <= set(range(pal.num_classes))
        assert set(pal.structural) & present        # some background structure


def test_dense_scene_object_count_bounds(pal):
    seen = set()
    for seed in range(12):
        _, lab = generate_dense_scene(np.random.default_rng(seed), pal, 64, 64,
                                      objects=(0, 2))
        seen |= set(np.unique(lab)) & set(pal.objects)
    # with a dozen scenes at up to 2 objects each, something must appear
    assert seen


def test_sparse_scene_objects_only(pal):
    for seed in range(5):
        img, lab = generate_sparse_scene(np.random.default_rng(seed), pal,
                                         64, 48, objects=(1, 6))
        assert img.shape == (48, 64, 3)
        present = set(np.unique(lab))
        assert VOID in present                      # background is unlabeled
        labeled = present - {VOID}
        assert labeled                              # at least one object
        assert labeled <= set(pal.objects)          # never structural classes


def test_unlabeled_scene_is_image_only(pal):
    img = generate_unlabeled_scene(np.random.default_rng(3), pal, 64, 48)
    assert img.shape == (48, 64, 3) and img.dtype == np.uint8


def test_scenes_reproducible(pal):
    a = generate_dense_scene(np.random.default_rng(42), pal, 64, 64)
    b = generate_dense_scene(np.random.default_rng(42), pal, 64, 64)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    c = generate_dense_scene(np.random.default_rng(43), pal, 64, 64)
    assert not np.array_equal(a[0], c[0])


def test_composite_pastes_objects_over_dense(pal):
    img, lab = generate_dense_scene(np.random.default_rng(7), pal, 64, 64,
                                    objects=(0, 0))
    ci, cl = flying_cars_composite(np.random.default_rng(8), pal, img, lab,
                                   objects=(1, 3))
    changed = cl != lab
    assert changed.any()
    assert set(np.unique(cl[changed])) <= set(pal.objects)
    # untouched pixels keep both label and appearance
    np.testing.assert_array_equal(cl[~changed], lab[~changed])
    np.testing.assert_array_equal(ci[~changed], img[~changed])
    # originals are not mutated in place
    assert img is not ci and lab is not cl


def test_render_object_shapes(pal):
    for name in pal.object_names():
        patch, mask = render_object(np.random.default_rng(1), name, 16)
        assert patch.ndim == 3 and patch.shape[2] == 3
        assert patch.shape[0] == 16
        assert mask.shape == patch.shape[:2] and mask.dtype == np.bool_
        assert mask.any()
