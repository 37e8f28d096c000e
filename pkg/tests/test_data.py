import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from zsc.data import (AnnotationError, BoundingBox, DataError, ImageRecord, SyntheticSpec,
                      _overlap_matrix, generate_synthetic_dataset, load_annotations, load_dataset,
                      preprocess_image, records_equal, render_density_target, resize_density,
                      save_dataset)


def brute_density(dots, h, w, sigma):
    """Per-pixel, per-dot Gaussian with the 4-sigma cut applied pixel by pixel."""
    out = np.zeros((h, w))
    for x, y in dots:
        k = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                dx, dy = j + 0.5 - x, i + 0.5 - y
                if abs(dx) <= 4 * sigma and abs(dy) <= 4 * sigma:
                    k[i, j] = math.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
        out += k / k.sum()
    return out


def brute_area_resize(d, h, w):
    """Split each input pixel into an lcm grid of subcells and re-bin them."""
    H, W = d.shape
    fy, fx = np.lcm(H, h), np.lcm(W, w)
    fine = np.kron(d, np.ones((fy // H, fx // W))) / ((fy // H) * (fx // W))
    return fine.reshape(h, fy // h, w, fx // w).sum(axis=(1, 3))


def test_box_rejects_degenerate():
    with pytest.raises(DataError):
        BoundingBox(3, 1, 3, 5)
    with pytest.raises(DataError):
        BoundingBox(0, 5, 4, 2)
    b = BoundingBox(1, 2, 5, 4)
    assert (b.width, b.height, b.center) == (4, 2, (3.0, 3.0))
    assert b.contains(1, 2) and not b.contains(5, 3)


def test_five_objects_three_boxes():
    spec = SyntheticSpec(num_classes=14, class_split=(8, 3, 3), images_per_split=(1, 0, 0),
                         objects_per_image=(5, 5), seed=1)
    (r,) = generate_synthetic_dataset(spec).split("train")
    assert len(r.dots) == 5 and len(r.gt_boxes) == 3
    assert len(r.instance_boxes) == 5
    for b in r.gt_boxes:
        assert b in r.instance_boxes


def test_generation_deterministic(tiny_spec, tiny_bundle):
    again = generate_synthetic_dataset(tiny_spec)
    for s in ("train", "val", "test"):
        for a, b in zip(tiny_bundle.split(s), again.split(s)):
            assert records_equal(a, b)
            assert a.pixels.tobytes() == b.pixels.tobytes()


def test_split_classes_disjoint(tiny_bundle):
    c = tiny_bundle.classes
    assert len(c["train"]) == 8 and len(c["val"]) == 3 and len(c["test"]) == 3
    assert not set(c["train"]) & set(c["val"])
    assert not set(c["train"]) & set(c["test"])
    assert not set(c["val"]) & set(c["test"])
    for s, rs in tiny_bundle.records.items():
        for r in rs:
            assert r.class_name in c[s]
            assert all(d in c[s] for d, _ in r.distractors)


def test_heldout_classes_reuse_training_attributes(tiny_bundle):
    parts = [set(n.split("-")[i] for n in tiny_bundle.classes["train"]) for i in range(3)]
    for name in tiny_bundle.classes["val"] + tiny_bundle.classes["test"]:
        assert all(p in parts[i] for i, p in enumerate(name.split("-")))


def test_generated_records_valid(tiny_bundle):
    for rs in tiny_bundle.records.values():
        for r in rs:
            r.validate()
            assert 0.0 <= r.pixels.min() and r.pixels.max() <= 1.0
            # each dot sits inside its own instance box
            for (x, y), b in zip(r.dots, r.instance_boxes):
                assert b.contains(x, y)


@pytest.mark.parametrize("bad", [
    dict(objects_per_image=(5, 3)),
    dict(class_split=(12, 1, 1)),
    dict(num_classes=200, class_split=(194, 3, 3)),
    dict(object_scale=(0.0, 10.0)),
    dict(distractor_classes_per_image=(1, 3)),
    dict(illumination=(0.0, 1.0)),
])
def test_invalid_spec(bad):
    spec = SyntheticSpec(**{**dict(num_classes=14, class_split=(8, 3, 3)), **bad})
    with pytest.raises(DataError):
        generate_synthetic_dataset(spec)


def test_density_empty():
    d = render_density_target([], 10, 12, 2.0)
    assert d.shape == (10, 12) and d.sum() == 0


def test_density_single_center():
    d = render_density_target([(16, 16)], 32, 32, 2.0)
    assert abs(d.sum() - 1.0) < 1e-6
    assert d.min() >= 0


def test_density_outside_raises():
    with pytest.raises(DataError):
        render_density_target([(32, 3)], 32, 32, 2.0)
    with pytest.raises(DataError):
        render_density_target([(3, 3)], 32, 32, 0.0)


@given(st.lists(st.tuples(st.floats(0, 23.99), st.floats(0, 17.99)), min_size=7, max_size=7),
       st.floats(0.4, 5.0))
def test_density_matches_brute_force(dots, sigma):
    d = render_density_target(dots, 18, 24, sigma)
    assert abs(d.sum() - 7.0) < 1e-6
    np.testing.assert_allclose(d, brute_density(dots, 18, 24, sigma), atol=1e-12)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12), st.integers(1, 12),
       st.integers(0, 2**31))
def test_area_resize_oracle(H, W, h, w, seed):
    d = np.random.default_rng(seed).random((H, W))
    out = resize_density(d, h, w)
    np.testing.assert_allclose(out, brute_area_resize(d, h, w), rtol=1e-10, atol=1e-12)
    assert abs(out.sum() - d.sum()) < 1e-9


def test_overlap_rows_sum_to_scale():
    a = _overlap_matrix(3, 7)
    np.testing.assert_allclose(a.sum(axis=1), 7 / 3)
    np.testing.assert_allclose(a.sum(axis=0), 1.0)


def _record(h, w, rng, n=4):
    dots = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
    boxes = [BoundingBox(int(x) - 1 if x >= 1 else 0, int(y) - 1 if y >= 1 else 0,
                         min(int(x) + 2, w), min(int(y) + 2, h)) for x, y in dots]
    r = ImageRecord(rng.random((h, w, 3)), "c", dots, boxes, image_id="x.png",
                    instance_boxes=list(boxes))
    r.density = r.density_target(1.5)
    return r


def test_preprocess_identity(rng):
    r = _record(32, 40, rng)
    assert preprocess_image(r, 32) is r


def test_preprocess_aspect(rng):
    r = preprocess_image(_record(64, 128, rng), 32)
    assert r.pixels.shape == (32, 64, 3)
    assert r.density.shape == (32, 64)


@given(st.integers(8, 60), st.integers(8, 60), st.integers(4, 90), st.integers(0, 2**31))
def test_preprocess_consistency(h, w, target, seed):
    r = _record(h, w, np.random.default_rng(seed))
    out = preprocess_image(r, target)
    out.validate()
    assert abs(out.density.sum() - r.density.sum()) < 1e-4
    assert len(out.dots) == len(r.dots)
    # a dot inside a box stays inside the rescaled box
    for (x, y), b, (x2, y2), b2 in zip(r.dots, r.gt_boxes, out.dots, out.gt_boxes):
        if b.contains(x, y):
            assert b2.contains(x2, y2)


def test_roundtrip(tmp_path, tiny_bundle):
    save_dataset(tiny_bundle, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert loaded.classes == tiny_bundle.classes
    assert not loaded.rejected
    for s in ("train", "val", "test"):
        assert len(loaded.split(s)) == len(tiny_bundle.split(s))
        for a, b in zip(tiny_bundle.split(s), loaded.split(s)):
            assert records_equal(a, b)


def test_load_two_images_and_reject(tmp_path, tiny_bundle):
    root = save_dataset(tiny_bundle, tmp_path / "ds")
    ann = json.loads((root / "annotations" / "annotations.json").read_text())
    ids = sorted(ann)[:3]
    good = {i: ann[i] for i in ids[:2]}
    (tmp_path / "two.json").write_text(json.dumps(good))
    bundle = load_annotations(tmp_path / "two.json", root / "images")
    assert sum(len(v) for v in bundle.records.values()) == 2

    bad = dict(good)
    entry = dict(ann[ids[2]])
    x1, y1, x2, y2 = entry["boxes"][0]
    entry["boxes"] = [[x1, y1, x1, y2]] + entry["boxes"][1:]
    bad[ids[2]] = entry
    bad["missing.png"] = dict(ann[ids[0]])
    bad["junk.png"] = ["not", "a", "dict"]
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    bundle = load_annotations(tmp_path / "bad.json", root / "images")
    assert sum(len(v) for v in bundle.records.values()) == 2
    names = [i for i, _ in bundle.rejected]
    assert sorted(names) == sorted([ids[2], "missing.png", "junk.png"])
    with pytest.raises(AnnotationError) as err:
        load_annotations(tmp_path / "bad.json", root / "images", strict=True)
    assert ids[2] in str(err.value)


def test_out_of_bounds_dot_rejected(tmp_path, tiny_bundle):
    root = save_dataset(tiny_bundle, tmp_path / "ds")
    ann = json.loads((root / "annotations" / "annotations.json").read_text())
    i = sorted(ann)[0]
    ann[i]["points"][0] = [1e4, 2.0]
    (tmp_path / "a.json").write_text(json.dumps({i: ann[i]}))
    bundle = load_annotations(tmp_path / "a.json", root / "images")
    assert bundle.rejected and bundle.rejected[0][0] == i
