import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semiseg.formats import (FormatError, decode_labels, encode_labels, read_checkpoint, read_dataset,
                             read_ppm, read_split, rle_decode, rle_encode, write_checkpoint, write_dataset,
                             write_ppm, write_split)
from semiseg.rng import derive_seed, stream
from semiseg.synthdata import (Dataset, InstanceLabel, SceneConfig, generate_dataset, generate_scene,
                               make_split)

CFG = SceneConfig()


def assert_scenes_equal(a, b):
    assert np.array_equal(a.image, b.image)
    assert a.seed == b.seed and a.scene_id == b.scene_id
    assert len(a.instances) == len(b.instances)
    for x, y in zip(a.instances, b.instances):
        assert x.class_id == y.class_id and x.confidence == y.confidence
        assert np.array_equal(x.mask, y.mask)
    for x, y in zip(a.full_masks, b.full_masks):
        assert np.array_equal(x, y)
    for x, y in zip(a.part_maps, b.part_maps):
        assert np.array_equal(x, y)


# ---------------------------------------------------------------------------
# random streams


def test_streams_are_named_and_order_free():
    a = stream(3, "teacher", 7, "view").uniform(size=4)
    b = stream(3, "teacher", 7, "view").uniform(size=4)
    c = stream(3, "teacher", 8, "view").uniform(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert derive_seed(1, 2) != derive_seed(2, 1)


# ---------------------------------------------------------------------------
# scenes


def test_generation_is_deterministic():
    assert_scenes_equal(generate_scene(CFG, 11), generate_scene(CFG, 11))
    assert not np.array_equal(generate_scene(CFG, 11).image, generate_scene(CFG, 12).image)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_scene_invariants(seed):
    s = generate_scene(CFG, seed)
    assert CFG.min_instances <= len(s.instances) <= CFG.max_instances
    assert s.image.shape == (64, 64, 3)
    assert s.image.min() >= 0 and s.image.max() <= 1
    coverage = np.zeros((64, 64), dtype=np.int32)
    for lab, full, parts in zip(s.instances, s.full_masks, s.part_maps):
        assert lab.area >= 1
        assert 1 <= lab.class_id <= CFG.num_classes
        assert not np.any(lab.mask & ~full), "visible mask must lie inside the full mask"
        assert np.array_equal(parts > 0, full)
        assert CFG.min_parts <= parts.max() <= CFG.max_parts
        coverage += lab.mask
    # visible masks and background partition the canvas
    assert coverage.max() <= 1
    assert np.array_equal(coverage == 0, s.instance_map() == 0)


def test_fixed_instance_count():
    cfg = SceneConfig(min_instances=3, max_instances=3, allow_occlusion=False)
    for seed in range(10):
        s = generate_scene(cfg, seed)
        assert len(s.instances) == 3
        total = sum(l.mask.astype(int) for l in s.instances)
        assert total.max() == 1


@pytest.mark.parametrize("bad", [dict(height=16), dict(min_instances=0), dict(max_instances=1, min_instances=2),
                                 dict(min_parts=0), dict(num_classes=9), dict(max_radius=40.0)])
def test_degenerate_configs_rejected(bad):
    with pytest.raises(ValueError):
        generate_scene(SceneConfig(**bad), 0)


def test_dataset_parallel_generation_matches_serial():
    a = generate_dataset(CFG, 6, base_seed=5, workers=1)
    b = generate_dataset(CFG, 6, base_seed=5, workers=4)
    for x, y in zip(a.scenes, b.scenes):
        assert_scenes_equal(x, y)


# ---------------------------------------------------------------------------
# splits


def test_split_sizes_and_determinism():
    full = make_split(100, 1.0, 0)
    assert len(full.labeled_ids) == 100 and not full.unlabeled_ids
    s = make_split(100, 0.05, 0)
    assert len(s.labeled_ids) == 5 and len(s.unlabeled_ids) == 95
    a, b = make_split(100, 0.1, 1), make_split(100, 0.1, 2)
    assert a != b
    for sp in (a, b):
        assert not set(sp.labeled_ids) & set(sp.unlabeled_ids)
        assert len(sp.labeled_ids) + len(sp.unlabeled_ids) == 100
    assert make_split(100, 0.1, 1) == a
    with pytest.raises(ValueError):
        make_split(5, 0.05, 0)
    with pytest.raises(ValueError):
        make_split(5, 0.0, 0)


def test_split_file_round_trip(tmp_path):
    sp = make_split([f"s{i}" for i in range(20)], 0.2, 3)
    write_split(tmp_path / "split.txt", sp)
    assert read_split(tmp_path / "split.txt") == sp


# ---------------------------------------------------------------------------
# on-disk formats


def test_rle_round_trips_random_masks():
    rng = np.random.default_rng(0)
    for k in range(1000):
        h, w = rng.integers(1, 20, size=2)
        mask = rng.uniform(size=(h, w)) < rng.uniform()
        runs = rle_encode(mask)
        assert runs.dtype == np.uint32
        assert np.array_equal(rle_decode(runs, (h, w)), mask)


def test_rle_layout():
    assert rle_encode(np.array([1, 1, 0, 1])).tolist() == [0, 2, 1, 1]
    assert rle_encode(np.array([0, 0, 1])).tolist() == [2, 1]
    with pytest.raises(FormatError):
        rle_decode([2, 5], (2, 2))


def test_ppm_round_trip(tmp_path):
    img = generate_scene(CFG, 1).image
    write_ppm(tmp_path / "a.ppm", img)
    data = (tmp_path / "a.ppm").read_bytes()
    assert data.startswith(b"P6\n64 64\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "a.ppm").astype(np.float32) / np.float32(255), img)


def test_label_file_layout_and_errors():
    mask = np.zeros((2, 3), dtype=bool)
    mask[0, 1] = True
    data = encode_labels([InstanceLabel(2, mask, 0.5)])
    expect = (b"S4ML" + struct.pack("<HI", 1, 1) + struct.pack("<Hf", 2, 0.5)
              + struct.pack("<I", 3) + struct.pack("<3I", 1, 1, 4))
    assert data == expect
    back = decode_labels(data, (2, 3))
    assert back[0].class_id == 2 and back[0].confidence == 0.5 and np.array_equal(back[0].mask, mask)
    with pytest.raises(FormatError, match="offset 0"):
        decode_labels(b"XXXX" + data[4:], (2, 3))
    with pytest.raises(FormatError, match="offset"):
        decode_labels(data[:-3], (2, 3))
    overrun = data[:-4] + struct.pack("<I", 9)
    with pytest.raises(FormatError):
        decode_labels(overrun, (2, 3))


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(CFG, 3, base_seed=9)
    write_dataset(tmp_path / "d", ds)
    back = read_dataset(tmp_path / "d")
    assert back.config == ds.config and back.base_seed == ds.base_seed
    for a, b in zip(ds.scenes, back.scenes):
        assert_scenes_equal(a, b)
    empty = Dataset(CFG, [], 0)
    write_dataset(tmp_path / "e", empty)
    assert read_dataset(tmp_path / "e").scenes == []


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"w": rng.normal(size=(3, 4)).astype(np.float32), "b": np.zeros(2, np.float32)}
    write_checkpoint(tmp_path / "c.s4mc", tensors, 17, {"seed": 3}, {"stage": "teacher"})
    back, it, rng_state, meta = read_checkpoint(tmp_path / "c.s4mc")
    assert it == 17 and rng_state == {"seed": 3} and meta == {"stage": "teacher"}
    assert list(back) == ["w", "b"]
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])
    data = (tmp_path / "c.s4mc").read_bytes()
    (tmp_path / "t.s4mc").write_bytes(data[:20])
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "t.s4mc")
