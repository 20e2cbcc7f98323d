import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grounding import scenes
from grounding.scenes import PlacementError, SceneSpec
from grounding.trees import NOUN_TAGS, build_grounding_tree, parse_sexpr


def assert_same_sample(a, b):
    assert a.id == b.id and a.caption == b.caption and a.parse == b.parse and a.relation == b.relation
    assert a.image.tobytes() == b.image.tobytes()
    for oa, ob in zip(a.objects, b.objects, strict=True):
        assert (oa.shape, oa.color, tuple(oa.box)) == (ob.shape, ob.color, tuple(ob.box))
        assert np.array_equal(oa.mask, ob.mask)


def test_same_seed_same_sample():
    assert_same_sample(scenes.generate_scene(1), scenes.generate_scene(1))


def test_different_seeds_differ():
    assert scenes.generate_scene(1).image.tobytes() != scenes.generate_scene(2).image.tobytes()


def test_caption_template_and_parse():
    s = scenes.generate_scene(3)
    a, b = s.objects
    assert s.caption_text == f"a {a.color} {a.shape} {s.relation} a {b.color} {b.shape}"
    tree = parse_sexpr(s.parse)
    assert [leaf.token for leaf in tree.leaves()] == s.caption


def test_parse_template_literal():
    caption, parse = scenes.caption_and_parse([("red", "circle"), ("blue", "square")], "above")
    assert " ".join(caption) == "a red circle above a blue square"
    assert parse == "(S (NP (DT a) (JJ red) (NN circle)) (PP (IN above) (NP (DT a) (JJ blue) (NN square))))"


def test_two_objects_root_pair_and_one_sibling_set():
    s = scenes.generate_scene(4)
    gt = build_grounding_tree(parse_sexpr(s.parse), include_leaves=False, single_child_pairs=False)
    assert len(gt.pc_pairs) == 1
    assert gt.pc_pairs[0].parent == gt.source.root
    assert len(gt.sibling_sets) == 1 and len(gt.sibling_sets[0].members) == 2


def test_red_pixels_without_noise():
    spec = SceneSpec(noise=0.0)
    for seed in range(40):
        s = scenes.generate_scene(seed, spec)
        for obj in s.objects:
            if obj.color == "red":
                np.testing.assert_array_equal(s.image[obj.mask], np.tile([1.0, 0.0, 0.0], (obj.mask.sum(), 1)))
                return
    pytest.fail("no red object in 40 scenes")


def test_image_range_and_shape():
    s = scenes.generate_scene(5, SceneSpec(noise=0.2))
    assert s.image.shape == (80, 80, 3)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_boxes_cover_masks():
    s = scenes.generate_scene(6)
    for obj in s.objects:
        top, left, bottom, right = obj.box
        rows, cols = np.nonzero(obj.mask)
        assert rows.min() == top and rows.max() == bottom - 1
        assert cols.min() == left and cols.max() == right - 1


@pytest.mark.parametrize("count", [1, 2, 3])
def test_object_counts(count):
    s = scenes.generate_scene(7, SceneSpec(object_count=count))
    assert len(s.objects) == count
    gt = build_grounding_tree(parse_sexpr(s.parse))
    nouns = [leaf for leaf in gt.source.leaves() if leaf.label in NOUN_TAGS]
    assert len(nouns) == count
    assert all(n.id in gt.valid for n in nouns)


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(image_size=16)
    with pytest.raises(ValueError):
        SceneSpec(noise=0.5)
    with pytest.raises(ValueError):
        SceneSpec(object_count=4)


def test_crowded_spec_fails_placement():
    spec = SceneSpec(image_size=32, object_count=3, min_size=30, max_size=32)
    with pytest.raises(PlacementError):
        scenes.generate_scene(0, spec)


def test_dataset_uses_xor_seeds():
    data = scenes.generate_dataset(7, 3, start=5)
    assert [s.id for s in data] == ["000005", "000006", "000007"]
    assert data[1].image.tobytes() == scenes.generate_scene(7 ^ 6).image.tobytes()


def test_coarse_masks_disjoint_for_generated_scenes():
    data = scenes.generate_dataset(11, 100)
    ok = 0
    for s in data:
        coarse = np.stack([scenes.downsample_max(o.mask, 4) for o in s.objects])
        ok += coarse.sum(axis=0).max() <= 1
        assert not np.logical_and(s.objects[0].mask, s.objects[1].mask).any()
    assert ok >= 95


def test_relations_hold():
    for s in scenes.generate_dataset(12, 50):
        assert scenes._relation_holds(s.relation, s.objects[0].box, s.objects[1].box)


def test_write_read_round_trip(tmp_path):
    data = scenes.generate_dataset(13, 10)
    manifest = scenes.write_dataset(data, tmp_path)
    lines = (tmp_path / "scenes.jsonl").read_text().splitlines()
    assert len(lines) == 10 == len(manifest)
    entry = json.loads(lines[0])
    assert set(entry) >= {"id", "caption", "parse", "objects"}
    assert set(entry["objects"][0]) == {"shape", "color", "box", "mask-file"}
    for e in manifest:
        assert (tmp_path / e["image-file"]).is_file()
        for o in e["objects"]:
            assert (tmp_path / o["mask-file"]).is_file()
    back = scenes.read_dataset(tmp_path)
    for a, b in zip(data, back, strict=True):
        assert_same_sample(a, b)


def test_mask_pgm_is_p5_255(tmp_path):
    s = scenes.generate_scene(14)
    scenes.write_dataset([s], tmp_path)
    raw = (tmp_path / f"masks/{s.id}_0.pgm").read_bytes()
    assert raw.startswith(b"P5\n80 80\n255\n")
    assert set(raw[len(b"P5\n80 80\n255\n"):]) <= {0, 255}


def test_empty_dataset(tmp_path):
    assert scenes.write_dataset([], tmp_path) == []
    assert (tmp_path / "scenes.jsonl").read_text() == ""
    assert scenes.read_dataset(tmp_path) == []


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        scenes.read_dataset(tmp_path)


def test_box_outside_image_rejected(tmp_path):
    s = scenes.generate_scene(15)
    scenes.write_dataset([s], tmp_path)
    path = tmp_path / "scenes.jsonl"
    entry = json.loads(path.read_text())
    entry["objects"][0]["box"] = [0, 0, 90, 10]
    path.write_text(json.dumps(entry) + "\n")
    with pytest.raises(ValueError, match="outside"):
        scenes.read_dataset(tmp_path)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pgm_round_trip(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    pix = rng.integers(0, 256, size=(int(rng.integers(1, 20)), int(rng.integers(1, 20))), dtype=np.uint8)
    path = tmp_path_factory.mktemp("pgm") / "x.pgm"
    scenes.write_pgm(path, pix)
    assert np.array_equal(scenes.read_pgm(path), pix)
