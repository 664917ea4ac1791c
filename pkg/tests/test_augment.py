import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semiseg.augment import (Geometry, Photometric, apply_photometric, arp_composite, pair_batch,
                             sample_photometric, strong_view, transform_labels, transform_scene, union_mask,
                             weak_view)
from semiseg.synthdata import InstanceLabel, SceneConfig, generate_scene


def _labels(rng, shape, n):
    out = []
    for _ in range(n):
        m = np.zeros(shape, dtype=bool)
        r, c = rng.integers(0, shape[0] - 3), rng.integers(0, shape[1] - 3)
        h, w = rng.integers(1, 6, size=2)
        m[r : r + h, c : c + w] = True
        out.append(InstanceLabel(int(rng.integers(1, 5)), m, float(rng.uniform(0.7, 1))))
    return out


def test_identity_views_leave_the_image_unchanged():
    img = np.random.default_rng(0).uniform(size=(8, 8, 3)).astype(np.float32)
    assert np.array_equal(Geometry().apply(img), img)
    assert np.array_equal(apply_photometric(img, Photometric()), img)


def test_double_flip_is_identity():
    img = np.random.default_rng(1).uniform(size=(9, 7, 3)).astype(np.float32)
    g = Geometry(flip=True)
    assert np.array_equal(g.apply(g.apply(img)), img)


def test_geometry_moves_labels_with_pixels():
    s = generate_scene(SceneConfig(), 3)
    g = Geometry(flip=True, scale=1.08)
    out = transform_scene(s, g)
    for lab in out.instances:
        assert lab.mask.any()
    src = s.instance_map()
    moved = g.apply(src, 0)
    for k, lab in enumerate(transform_labels(s.instances, g)):
        assert np.array_equal(lab.mask, g.apply(s.instances[k].mask, False))
    assert np.array_equal(out.image, g.apply(s.image, 0.0))
    assert moved.shape == src.shape


def test_strong_view_stays_in_range():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        img = rng.uniform(size=(8, 8, 3)).astype(np.float32)
        out, _ = strong_view(img, rng)
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_weak_view_reports_its_geometry():
    img = np.random.default_rng(3).uniform(size=(16, 16, 3)).astype(np.float32)
    out, g = weak_view(img, np.random.default_rng(4))
    assert np.array_equal(out, g.apply(img, 0.0))


def test_photometric_sampling_ranges():
    rng = np.random.default_rng(5)
    ps = [sample_photometric(rng) for _ in range(500)]
    assert all(0.6 <= p.brightness <= 1.4 and 0.6 <= p.contrast <= 1.4 and 0.6 <= p.saturation <= 1.4 for p in ps)
    assert all(p.blur_sigma == 0 or 0.1 <= p.blur_sigma <= 1.0 for p in ps)
    assert 0.1 < np.mean([p.grayscale for p in ps]) < 0.3
    assert 0.4 < np.mean([p.blur_sigma > 0 for p in ps]) < 0.6


def test_grayscale_equalizes_channels():
    img = np.random.default_rng(6).uniform(size=(4, 4, 3)).astype(np.float32)
    out = apply_photometric(img, Photometric(grayscale=True))
    assert np.allclose(out[..., 0], out[..., 1]) and np.allclose(out[..., 1], out[..., 2])


# ---------------------------------------------------------------------------
# pasting


def test_arp_hand_case():
    x_a = np.zeros((2, 2, 3), np.float32)
    x_b = np.ones((2, 2, 3), np.float32)
    m = np.array([[1, 0], [0, 0]], dtype=bool)
    pair = arp_composite(x_a, [], x_b, [InstanceLabel(1, m)], min_size=1)
    assert np.array_equal(pair.x_ab[..., 0], [[1, 0], [0, 0]])
    assert np.array_equal(pair.x_ba, x_b)


def test_arp_empty_and_full_masks():
    rng = np.random.default_rng(7)
    x_a, x_b = rng.uniform(size=(2, 8, 8, 3)).astype(np.float32)
    z_a = _labels(rng, (8, 8), 2)
    pair = arp_composite(x_a, z_a, x_b, [], min_size=1)
    assert np.array_equal(pair.x_ab, x_a)
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(pair.z_ab, z_a)) and len(pair.z_ab) == len(z_a)
    full = [InstanceLabel(2, np.ones((8, 8), dtype=bool))]
    pair = arp_composite(x_a, z_a, x_b, full, min_size=1)
    assert np.array_equal(pair.x_ab, x_b)
    with pytest.raises(ValueError):
        arp_composite(x_a, z_a, x_b[:4], full)


@pytest.mark.parametrize("seed", range(4))
def test_arp_partition_and_label_consistency(seed):
    rng = np.random.default_rng(seed)
    for _ in range(250):
        x_a, x_b = rng.uniform(size=(2, 12, 12, 3)).astype(np.float32)
        z_a, z_b = _labels(rng, (12, 12), rng.integers(0, 4)), _labels(rng, (12, 12), rng.integers(0, 4))
        pair = arp_composite(x_a, z_a, x_b, z_b, min_size=2)
        m_a, m_b = union_mask(z_a, (12, 12)), union_mask(z_b, (12, 12))
        assert np.array_equal(pair.x_ab, np.where(m_b[..., None], x_b, x_a))
        assert np.array_equal(pair.x_ba, np.where(m_a[..., None], x_a, x_b))
        for labels, top in ((pair.z_ab, m_b), (pair.z_ba, m_a)):
            for lab in labels:
                assert lab.mask.any()
                assert not (lab.mask & top).any() or not (lab.mask & ~top).any()
        swapped = arp_composite(x_b, z_b, x_a, z_a, min_size=2)
        assert np.array_equal(swapped.x_ab, pair.x_ba) and np.array_equal(swapped.x_ba, pair.x_ab)


def test_arp_drops_small_remnants():
    x = np.zeros((6, 6, 3), np.float32)
    below = np.zeros((6, 6), bool)
    below[0, :4] = True
    top = np.zeros((6, 6), bool)
    top[0, :3] = True
    pair = arp_composite(x, [InstanceLabel(1, below)], x, [InstanceLabel(2, top)], min_size=2)
    assert [l.class_id for l in pair.z_ab] == [2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 40), st.integers(0, 2**31 - 1))
def test_pairs_are_disjoint_and_cover_the_batch(n, seed):
    pairs = pair_batch(n, np.random.default_rng(seed))
    flat = [i for p in pairs for i in p]
    assert sorted(flat) == list(range(n))
    assert sum(len(p) == 1 for p in pairs) == n % 2
