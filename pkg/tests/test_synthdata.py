import dataclasses

import numpy as np
import pytest

from consdet.geometry import iou
from consdet.synthdata import (
    PAIR_IOU,
    SceneSpec,
    dataset,
    dump_split,
    flip_horizontal,
    generate,
    read_annotations,
    read_pgm,
    write_pgm,
)

SPEC = SceneSpec()


def test_deterministic():
    a, b = generate(SPEC, 17, "val"), generate(SPEC, 17, "val")
    assert a.image.tobytes() == b.image.tobytes() and a.gts == b.gts


def test_splits_and_seeds_differ():
    base = generate(SPEC, 3, "train")
    assert generate(SPEC, 3, "test").gts != base.gts
    assert generate(dataclasses.replace(SPEC, seed=1), 3, "train").gts != base.gts


def test_dataset_matches_generate():
    scenes = list(dataset(SPEC, 5, "val"))
    for i in (0, 2, 4):
        assert scenes[i].image.tobytes() == generate(SPEC, i, "val").image.tobytes()


def test_boxes_valid_and_counts_in_range():
    for scene in dataset(SPEC, 200):
        assert scene.image.shape == (1, 1, 64, 64)
        assert SPEC.min_objects <= len(scene.gts) <= SPEC.max_objects
        for box, cls in scene.gts:
            assert 0 <= box.x1 < box.x2 <= 64 and 0 <= box.y1 < box.y2 <= 64
            assert 1 <= cls <= SPEC.num_classes


def has_occluding_pair(gts):
    return any(
        PAIR_IOU[0] <= iou(a[0], b[0]) <= PAIR_IOU[1] for i, a in enumerate(gts) for b in gts[i + 1 :]
    )


def test_full_occlusion_rate():
    spec = dataclasses.replace(SPEC, occlusion_rate=1.0)
    assert all(has_occluding_pair(s.gts) for s in dataset(spec, 200))


def test_no_occlusion_single_object():
    spec = dataclasses.replace(SPEC, occlusion_rate=0.0, max_objects=1)
    assert all(len(s.gts) == 1 for s in dataset(spec, 50))


def test_no_occlusion_multi_object_disjoint():
    spec = dataclasses.replace(SPEC, occlusion_rate=0.0)
    for s in dataset(spec, 200):
        for i, a in enumerate(s.gts):
            for b in s.gts[i + 1 :]:
                assert iou(a[0], b[0]) == 0.0


def test_occlusion_rate_roughly_honoured():
    frac = np.mean([has_occluding_pair(s.gts) for s in dataset(SPEC, 500)])
    assert 0.6 < frac < 0.8


def test_class_balance_chi_square():
    counts = np.zeros(SPEC.num_classes)
    for s in dataset(SPEC, 1000):
        for _, c in s.gts:
            counts[c - 1] += 1
    expected = counts.sum() / len(counts)
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    # 10.83 is the 0.999 quantile of chi-square with one degree of freedom
    assert chi2 < 10.83


def test_occluder_paints_over():
    spec = dataclasses.replace(SPEC, occlusion_rate=1.0, noise_std=0.0)
    s = generate(spec, 0)
    (b1, c1), (b2, c2) = s.gts[:2]
    if c2 == 1:  # rectangle: the overlap region carries the later object's intensity band
        x = int((max(b1.x1, b2.x1) + min(b1.x2, b2.x2)) / 2)
        y = int((max(b1.y1, b2.y1) + min(b1.y2, b2.y2)) / 2)
        assert abs(s.image[0, 0, y, x] - 0.9) <= 0.05 + 1e-12


def test_flip():
    s = generate(SPEC, 1)
    f = flip_horizontal(flip_horizontal(s))
    assert f.image.tobytes() == s.image.tobytes()
    assert all(abs(a[0].x1 - b[0].x1) < 1e-12 for a, b in zip(f.gts, s.gts))


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).random((1, 1, 8, 12))
    write_pgm(tmp_path / "x.pgm", img)
    back = read_pgm(tmp_path / "x.pgm")
    assert back.shape == (8, 12)
    np.testing.assert_allclose(back, np.rint(img[0, 0] * 255) / 255)


def test_dump_split(tmp_path):
    assert dump_split(SPEC, 4, "val", tmp_path) == 4
    ann = read_annotations(tmp_path / "val" / "annotations.csv")
    assert sorted(ann) == [0, 1, 2, 3]
    for i, gts in ann.items():
        ref = generate(SPEC, i, "val").gts
        assert [c for _, c in gts] == [c for _, c in ref]
        assert all(abs(a - b) < 1e-6 for (ba, _), (bb, _) in zip(gts, ref) for a, b in zip(ba, bb))
    assert (tmp_path / "val" / "images" / "000003.pgm").exists()


def test_invalid_spec():
    with pytest.raises(ValueError):
        SceneSpec(occlusion_rate=1.5)
    with pytest.raises(ValueError):
        SceneSpec(min_objects=3, max_objects=2)
