"""Scene generation, manifests, augmentation, COCO ingestion."""

import json

import numpy as np
import pytest

from owdet import dataset as ds
from owdet.geometry import cxcywh_to_xyxy, iou_matrix


def test_manifest_deterministic():
    m1, s1 = ds.generate_synthetic(4, 2, seed=7)
    m2, s2 = ds.generate_synthetic(4, 2, seed=7)
    assert m1.to_json() == m2.to_json()
    for sid in s1:
        assert np.array_equal(s1[sid].raster, s2[sid].raster)
        assert [t.label for t in s1[sid].annotations] == \
               [t.label for t in s2[sid].annotations]


def test_manifest_roundtrip():
    m, _ = ds.generate_synthetic(2, 1, seed=3)
    back = ds.SplitManifest.from_json(m.to_json())
    assert back.to_json() == m.to_json()


def test_task1_training_annotations_only_group1():
    m, scenes = ds.generate_synthetic(10, 2, seed=11)
    group1 = set(m.groups[0])
    for sid in m.train_ids[0]:
        labels = {t.label for t in scenes[sid].annotations}
        assert labels and labels <= group1


def test_task2_training_annotations_only_group2():
    m, scenes = ds.generate_synthetic(10, 2, seed=11)
    group2 = set(m.groups[1])
    for sid in m.train_ids[1]:
        labels = {t.label for t in scenes[sid].annotations}
        assert labels and labels <= group2


def test_eval_scenes_keep_all_labels():
    m, scenes = ds.generate_synthetic(3, 20, seed=13)
    seen = set()
    for ids in m.eval_ids:
        for sid in ids:
            seen |= {t.label for t in scenes[sid].annotations}
            assert len(scenes[sid].annotations) == len(scenes[sid].all_objects)
    assert seen == set(range(1, 9))  # with 40 eval scenes every class shows up


def test_ids_disjoint():
    m, _ = ds.generate_synthetic(5, 3, seed=17)
    pools = [set(ids) for ids in m.train_ids + m.eval_ids]
    for i in range(len(pools)):
        for j in range(i + 1, len(pools)):
            assert not pools[i] & pools[j]


def test_overlapping_groups_rejected():
    with pytest.raises(ValueError):
        ds.generate_synthetic(2, 2, seed=1, groups=[[1, 2], [2, 3]])


def test_boxes_valid_and_nonoverlapping():
    _, scenes = ds.generate_synthetic(15, 0, seed=19)
    for scene in scenes.values():
        assert scene.annotations
        boxes = np.stack([t.box for t in scene.all_objects])
        assert boxes.min() >= 0 and boxes.max() <= 1
        xy = cxcywh_to_xyxy(boxes)
        m = iou_matrix(xy, xy)
        np.fill_diagonal(m, 0)
        assert m.max(initial=0) < 0.1


def test_annotation_box_matches_rendered_extent():
    # single object: the exact archetype color appears nowhere else
    for image_id in range(8):
        scene = ds.render_scene(23, image_id, list(range(1, 9)),
                                list(range(1, 9)), n_objects=1)
        (target,) = scene.all_objects
        color = np.array(ds.ARCHETYPES[target.label][1], dtype=np.uint8)
        mask = np.all(scene.raster == color, axis=-1)
        ys, xs = np.nonzero(mask)
        extent = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1]) / 64.0
        ann = cxcywh_to_xyxy(target.box)
        assert iou_matrix(ann[None], extent[None])[0, 0] >= 0.9


def test_scene_container_roundtrip(tmp_path):
    _, scenes = ds.generate_synthetic(2, 1, seed=29)
    path = tmp_path / "scenes.bin"
    ds.save_scenes(path, scenes)
    back = ds.load_scenes(path)
    assert set(back) == set(scenes)
    for sid in scenes:
        assert np.array_equal(back[sid].raster, scenes[sid].raster)
        for a, b in zip(back[sid].all_objects, scenes[sid].all_objects):
            assert a.label == b.label and a.track_id == b.track_id
            assert np.allclose(a.box, b.box)


# -- augmentation -------------------------------------------------------

def _any_scene():
    return ds.render_scene(31, 0, list(range(1, 9)), list(range(1, 9)), n_objects=2)


def test_full_crop_is_identity():
    scene = _any_scene()
    aug, t = ds.augment_view(scene, seed=1, min_side=1.0)
    assert np.array_equal(aug.raster, scene.raster)
    assert (t.ax, t.bx, t.ay, t.by) == (1.0, 0.0, 1.0, 0.0)
    assert len(aug.annotations) == len(scene.annotations)
    for a, b in zip(aug.annotations, scene.annotations):
        assert np.allclose(a.box, b.box)


def test_left_half_crop_drops_right_objects():
    t = ds.AffineCrop(ax=2.0, bx=0.0, ay=1.0, by=0.0)  # window x in [0, 0.5]
    inside = ds.transfer_box(np.array([0.25, 0.5, 0.2, 0.2]), t)
    outside = ds.transfer_box(np.array([0.8, 0.5, 0.2, 0.2]), t)
    assert outside is None
    assert np.allclose(inside, [0.5, 0.5, 0.4, 0.2])


def test_boundary_straddler_with_low_retention_dropped():
    # box half-extends past the window with only 10% inside
    t = ds.AffineCrop(ax=2.0, bx=0.0, ay=1.0, by=0.0)
    # box x range [0.48, 0.68]: 0.02/0.2 = 10% of width inside the window
    out = ds.transfer_box(np.array([0.58, 0.5, 0.2, 0.2]), t)
    assert out is None


def test_transform_inverse_recovers_clipped_boxes():
    rng = np.random.default_rng(37)
    for trial in range(10):
        scene = ds.render_scene(41, trial, list(range(1, 9)), list(range(1, 9)))
        aug, t = ds.augment_view(scene, seed=trial)
        inv = t.invert()
        window = inv.apply_box(np.array([0.5, 0.5, 1.0, 1.0]))
        wx = cxcywh_to_xyxy(window)
        by_track = {a.track_id: a for a in scene.all_objects}
        for moved in aug.all_objects:
            orig = by_track[moved.track_id]
            ox = cxcywh_to_xyxy(orig.box)
            clipped = np.array([max(ox[0], wx[0]), max(ox[1], wx[1]),
                                min(ox[2], wx[2]), min(ox[3], wx[3])])
            restored = cxcywh_to_xyxy(inv.apply_box(moved.box))
            assert np.abs(restored - clipped).max() < 1e-6


def test_augment_deterministic():
    scene = _any_scene()
    a1, t1 = ds.augment_view(scene, seed=5)
    a2, t2 = ds.augment_view(scene, seed=5)
    assert np.array_equal(a1.raster, a2.raster)
    assert (t1.ax, t1.bx, t1.ay, t1.by) == (t2.ax, t2.bx, t2.ay, t2.by)


# -- COCO ingest ---------------------------------------------------------

def _coco_doc():
    return {
        "images": [{"id": 1, "width": 100, "height": 200, "file_name": "a.png"},
                   {"id": 2, "width": 50, "height": 50, "file_name": "b.png"}],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 7, "bbox": [10, 20, 30, 40]},
        ],
        "categories": [{"id": 7, "name": "thing"}],
    }


def test_coco_hand_conversion():
    _, images = ds.load_coco_subset(_coco_doc())
    (t,) = images[1]["annotations"]
    assert t.label == 1  # remapped to contiguous ids
    assert np.allclose(t.box, [0.25, 0.2, 0.3, 0.2])


def test_coco_empty_image_excluded_with_warning():
    with pytest.warns(UserWarning, match="no annotations"):
        _, images = ds.load_coco_subset(_coco_doc())
    assert 2 not in images


def test_coco_out_of_bounds_clipped():
    doc = _coco_doc()
    doc["annotations"].append({"id": 2, "image_id": 1, "category_id": 7,
                               "bbox": [90, 180, 30, 40]})
    with pytest.warns(UserWarning, match="clipping"):
        _, images = ds.load_coco_subset(doc)
    for t in images[1]["annotations"]:
        xy = cxcywh_to_xyxy(t.box)
        assert xy.min() >= 0 and xy.max() <= 1


def test_coco_malformed_rejected_with_position():
    with pytest.raises(ValueError, match="annotations\\[0\\]"):
        ds.load_coco_subset({"images": [{"id": 1, "width": 10, "height": 10}],
                             "annotations": [{"id": 1}], "categories": []})
    with pytest.raises(ValueError, match="missing 'images'"):
        ds.load_coco_subset({"annotations": [], "categories": []})


def test_coco_malformed_json_line_diagnostics(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"images": [,]}')
    with pytest.raises(ValueError, match="line 1"):
        ds.load_coco_subset(str(p))


def test_coco_roundtrip(tmp_path):
    _, images = ds.load_coco_subset(_coco_doc())
    doc = ds.export_coco_subset(images)
    _, back = ds.load_coco_subset(doc)
    for iid in images:
        for a, b in zip(images[iid]["annotations"], back[iid]["annotations"]):
            assert a.label == b.label
            assert np.abs(a.box - b.box).max() < 1e-6
