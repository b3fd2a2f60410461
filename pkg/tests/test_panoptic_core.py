import numpy as np
import pytest

from conftest import make_map
from futcr_lab.panoptic_core import (
    LabelSpace, MeanIoUAccumulator, MetricReport, PanopticMapError,
    PanopticQualityAccumulator, Segment, decode_panoptic_map, encode_panoptic_map,
    evaluate_maps, iou, load_panoptic_map, match_segments, mean_iou,
    paint_segments, panoptic_quality, save_panoptic_map, segments_from_map)


def _segment(class_id, pixels, shape=(4, 4), instance_id=1):
    mask = np.zeros(shape, dtype=bool)
    for r, c in pixels:
        mask[r, c] = True
    return Segment(class_id=class_id, instance_id=instance_id, mask=mask)


def test_label_space():
    ls = LabelSpace(is_thing=(True, False), names=('car', 'road'))
    assert ls.total_classes == 2
    assert ls.class_ids == (1, 2)
    assert ls.thing_classes == (1,)
    assert ls.stuff_classes == (2,)
    assert LabelSpace.from_dict(ls.to_dict()) == ls
    with pytest.raises(PanopticMapError):
        ls.thing(0)
    with pytest.raises(PanopticMapError):
        LabelSpace(is_thing=(), names=())


def test_segments_from_map_all_void():
    assert segments_from_map(make_map(np.zeros((4, 4)))) == []


def test_segments_from_map_single_stuff(label_space):
    segs = segments_from_map(make_map(np.full((3, 3), 3), label_space=label_space))
    assert len(segs) == 1
    assert segs[0].class_id == 3
    assert segs[0].instance_id == 0
    assert segs[0].area == 9


def test_segments_from_map_brute_force_grouping():
    ls = LabelSpace(is_thing=(True, True, True, False, False),
                    names=('a', 'b', 'c', 'd', 'e'))
    sem = np.array([[3, 3, 5, 5],
                    [3, 3, 5, 5],
                    [5, 5, 3, 3],
                    [5, 5, 3, 3]])
    inst = np.array([[1, 1, 0, 0],
                     [1, 1, 0, 0],
                     [0, 0, 2, 2],
                     [0, 0, 2, 2]])
    segs = segments_from_map(make_map(sem, inst, ls))
    groups = {}
    for r in range(4):
        for c in range(4):
            groups.setdefault((int(sem[r, c]), int(inst[r, c])), set()).add((r, c))
    assert len(segs) == 3
    assert {(s.class_id, s.instance_id): s.pixels for s in segs} == groups


def test_segments_from_map_rejects_stuff_with_instance(label_space):
    bad = make_map(np.full((2, 2), 3), np.ones((2, 2)), label_space)
    with pytest.raises(PanopticMapError):
        segments_from_map(bad)


def test_segments_from_map_rejects_void_with_instance():
    with pytest.raises(PanopticMapError):
        segments_from_map(make_map(np.zeros((2, 2)), np.ones((2, 2))))


def test_paint_segments_reconstructs_map(label_space):
    sem = np.array([[1, 1, 3], [2, 0, 3], [2, 1, 3]])
    inst = np.array([[1, 1, 0], [1, 0, 0], [1, 2, 0]])
    m = make_map(sem, inst, label_space)
    assert paint_segments(segments_from_map(m), m.shape, label_space).equals(m)


def test_iou():
    a = {(0, 0), (0, 1)}
    assert iou(a, a) == 1.0
    assert iou(a, {(5, 5)}) == 0.0
    assert iou(a, {(0, 1), (1, 1)}) == pytest.approx(1 / 3)
    assert iou(set(), set()) == 0.0


def test_match_identical():
    segs = [_segment(1, [(0, 0), (0, 1)]), _segment(2, [(3, 3)])]
    m = match_segments(segs, segs)
    assert sorted((p, g) for p, g, _ in m.pairs) == [(0, 0), (1, 1)]
    assert all(v == 1.0 for _, _, v in m.pairs)
    assert m.unmatched_pred == [] and m.unmatched_gt == []


def test_match_iou_exactly_half_is_not_a_match():
    gt = [_segment(1, [(0, 0), (0, 1)])]
    pred = [_segment(1, [(0, 0)])]
    m = match_segments(pred, gt)
    assert m.pairs == []
    assert m.unmatched_pred == [0]
    assert m.unmatched_gt == [0]


def test_match_requires_same_class():
    gt = [_segment(1, [(0, 0), (0, 1)])]
    pred = [_segment(2, [(0, 0), (0, 1)])]
    assert match_segments(pred, gt).pairs == []


def _random_map(rng, size=32, max_segments=6):
    sem = np.zeros((size, size), dtype=np.int64)
    inst = np.zeros((size, size), dtype=np.int64)
    rects = []
    for k in range(int(rng.integers(1, max_segments + 1))):
        r0, c0 = rng.integers(0, size - 4, size=2)
        h, w = rng.integers(4, 16, size=2)
        c = int(rng.integers(1, 4))
        sem[r0:r0 + h, c0:c0 + w] = c
        inst[r0:r0 + h, c0:c0 + w] = k + 1
        rects.append((c, k + 1, r0, c0, h, w))
    return sem, inst, rects


def _shifted(rng, rects, size=32):
    sem = np.zeros((size, size), dtype=np.int64)
    inst = np.zeros((size, size), dtype=np.int64)
    for c, k, r0, c0, h, w in rects:
        if rng.random() < 0.2:
            c = int(rng.integers(1, 4))
        dr, dc = rng.integers(-3, 4, size=2)
        r0 = int(np.clip(r0 + dr, 0, size - 1))
        c0 = int(np.clip(c0 + dc, 0, size - 1))
        sem[r0:r0 + h, c0:c0 + w] = c
        inst[r0:r0 + h, c0:c0 + w] = k
    return sem, inst


def _oracle_pairs(pred, gt):
    """Largest class-consistent assignment with every pair above 0.5 IoU,
    found by exhaustive search over all injective assignments."""
    candidates = {}
    for pi, p in enumerate(pred):
        for gi, g in enumerate(gt):
            if p.class_id == g.class_id and iou(p.pixels, g.pixels) > 0.5:
                candidates[(pi, gi)] = True

    best = []

    def search(gi, used, chosen):
        nonlocal best
        if gi == len(gt):
            if len(chosen) > len(best):
                best = list(chosen)
            return
        search(gi + 1, used, chosen)
        for pi in range(len(pred)):
            if pi not in used and (pi, gi) in candidates:
                search(gi + 1, used | {pi}, chosen + [(pi, gi)])

    search(0, frozenset(), [])
    return sorted(best)


def test_match_equals_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        sem, inst, rects = _random_map(rng)
        psem, pinst = _shifted(rng, rects)
        gt = segments_from_map(make_map(sem, inst))
        pred = segments_from_map(make_map(psem, pinst))
        m = match_segments(pred, gt)
        assert sorted((p, g) for p, g, _ in m.pairs) == _oracle_pairs(pred, gt)
        for p, g, v in m.pairs:
            assert v == pytest.approx(iou(pred[p].pixels, gt[g].pixels))


def test_match_swap_is_consistent():
    rng = np.random.default_rng(1)
    for _ in range(20):
        sem, inst, rects = _random_map(rng)
        psem, pinst = _shifted(rng, rects)
        a = segments_from_map(make_map(sem, inst))
        b = segments_from_map(make_map(psem, pinst))
        ab = match_segments(a, b)
        ba = match_segments(b, a)
        assert len(ab.unmatched_pred) == len(ba.unmatched_gt)
        assert len(ab.unmatched_gt) == len(ba.unmatched_pred)
        assert sorted((p, g, round(v, 12)) for p, g, v in ab.pairs) == \
            sorted((p, g, round(v, 12)) for g, p, v in ba.pairs)


def test_pq_identical(label_space):
    m = make_map([[1, 1], [3, 3]], [[1, 1], [0, 0]], label_space)
    r = panoptic_quality(m, m, [1, 3])
    assert r.pq == 1.0
    assert r.per_class_pq == {1: 1.0, 3: 1.0}


def test_pq_one_match_one_fn(label_space):
    # gt: a 5-pixel instance and a 1-pixel instance of class 1
    gt_sem = np.zeros((4, 4), dtype=np.int64)
    gt_inst = np.zeros((4, 4), dtype=np.int64)
    gt_sem[0, :] = 1
    gt_sem[1, 0] = 1
    gt_inst[0, :] = 1
    gt_inst[1, 0] = 1
    gt_sem[3, 3] = 1
    gt_inst[3, 3] = 2
    # pred covers 3 of the 5 pixels of instance 1 -> IoU 0.6
    pred_sem = np.zeros((4, 4), dtype=np.int64)
    pred_inst = np.zeros((4, 4), dtype=np.int64)
    pred_sem[0, :3] = 1
    pred_inst[0, :3] = 1
    r = panoptic_quality(make_map(pred_sem, pred_inst, label_space),
                         make_map(gt_sem, gt_inst, label_space), [1])
    assert r.tp[1] == 1 and r.fn[1] == 1 and r.fp[1] == 0
    assert r.pq == pytest.approx(0.6 / 1.5)


def test_pq_all_void_prediction(label_space):
    gt = make_map([[3, 3], [3, 3]], label_space=label_space)
    pred = make_map(np.zeros((2, 2)), label_space=label_space)
    assert panoptic_quality(pred, gt, [3]).pq == 0.0


def test_pq_skips_absent_classes(label_space):
    m = make_map([[3, 3]], label_space=label_space)
    r = panoptic_quality(m, m, [3, 4])
    assert r.per_class_pq == {3: 1.0}
    assert r.pq == 1.0
    assert panoptic_quality(m, m, [4]).pq is None


def test_pq_mostly_void_prediction_is_not_false_positive(label_space):
    gt = make_map([[0, 0, 0, 3]], label_space=label_space)
    pred = make_map([[4, 4, 4, 3]], label_space=label_space)
    r = panoptic_quality(pred, gt, [3, 4])
    assert r.fp[4] == 0
    assert r.per_class_pq == {3: 1.0}


def test_pq_void_pixels_leave_the_union(label_space):
    # the prediction spills onto gt void; IoU ignores those pixels
    gt = make_map([[3, 3, 0, 0]], label_space=label_space)
    pred = make_map([[3, 3, 3, 0]], label_space=label_space)
    assert panoptic_quality(pred, gt, [3]).pq == 1.0


def test_empty_class_subset_is_an_error(label_space):
    m = make_map([[3]], label_space=label_space)
    with pytest.raises(PanopticMapError):
        panoptic_quality(m, m, [])
    with pytest.raises(PanopticMapError):
        mean_iou(m, m, [])


def test_canvas_mismatch(label_space):
    with pytest.raises(PanopticMapError):
        panoptic_quality(make_map([[3]]), make_map([[3, 3]]), [3])


def test_mean_iou():
    gt = make_map([[3, 3, 0]])
    assert mean_iou(gt, gt, [3]) == 1.0
    assert mean_iou(make_map([[0, 3, 3]]), gt, [3]) == pytest.approx(1 / 3)
    assert mean_iou(make_map(np.full((2, 2), 3)), make_map(np.full((2, 2), 4)),
                    [3, 4]) == 0.0
    assert MeanIoUAccumulator([3, 5]).update(gt, gt).per_class() == {3: 1.0}


def test_accumulator_sums_over_images(label_space):
    a = make_map([[3, 3]], label_space=label_space)
    b = make_map([[0, 0]], label_space=label_space)
    acc = PanopticQualityAccumulator([3])
    acc.update(a, a).update(b, a)
    r = acc.result()
    assert (r.tp[3], r.fp[3], r.fn[3]) == (1, 0, 1)
    assert r.pq == pytest.approx(1 / 1.5)


def test_evaluate_maps_subsets(label_space):
    gt = make_map([[1, 1, 3, 3]], [[1, 1, 0, 0]], label_space)
    pred = make_map([[1, 1, 0, 0]], [[1, 1, 0, 0]], label_space)
    rep = evaluate_maps([pred], [gt], base_classes=[1], new_classes=[3])
    assert rep.pq_base == 1.0
    assert rep.pq_new == 0.0
    assert rep.pq_all == pytest.approx(0.5)
    assert rep.miou_base == 1.0
    assert rep.miou_new == 0.0
    flat = rep.to_flat_dict()
    assert flat['pq_class_1'] == 1.0
    assert set(MetricReport.AGGREGATE_KEYS) <= set(flat)
    assert MetricReport.from_dict(rep.to_dict()) == rep


def test_map_serialization(tmp_path, label_space):
    m = make_map([[1, 0], [3, 3]], [[2, 0], [0, 0]], label_space)
    back, extra = decode_panoptic_map(
        encode_panoptic_map(m, image=np.ones((2, 2, 3), dtype=np.float32)))
    assert back.equals(m)
    assert back.label_space == label_space
    assert extra['image'].shape == (2, 2, 3)

    uri = str(tmp_path / 'map.npz')
    save_panoptic_map(uri, m)
    back, extra = load_panoptic_map(uri)
    assert back.equals(m)
    assert extra == {}


def test_decode_rejects_foreign_container():
    import io
    buf = io.BytesIO()
    np.savez(buf, header=np.array('{"magic": "other"}'),
             semantic=np.zeros((1, 1)), instance=np.zeros((1, 1)))
    with pytest.raises(PanopticMapError):
        decode_panoptic_map(buf.getvalue())
