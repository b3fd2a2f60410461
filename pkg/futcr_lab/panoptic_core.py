#!/usr/bin/env python3
"""Panoptic annotations and the PQ / mIoU metrics.

A PanopticMap is a pair of integer grids (semantic class id, instance id)
over an H x W canvas with (row, col) coordinates and top-left origin.
Class id 0 is void/background and never part of a LabelSpace.
"""

import io
import json
import logging
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
from autouri import AutoURI


logger = logging.getLogger(__name__)

VOID = 0
PQ_IOU_THRESHOLD = 0.5
MAP_FORMAT_MAGIC = 'futcr-lab-panoptic-map'
MAP_FORMAT_VERSION = 1


class PanopticMapError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSpace:
    """Fixed label space {1..K}. is_thing[c - 1] tells whether class c is a thing.
    """
    is_thing: tuple
    names: tuple

    def __post_init__(self):
        if len(self.is_thing) == 0:
            raise PanopticMapError('LabelSpace needs at least one class.')
        if len(self.is_thing) != len(self.names):
            raise PanopticMapError(
                'LabelSpace has {} thing flags but {} names.'.format(
                    len(self.is_thing), len(self.names)))

    @property
    def total_classes(self):
        return len(self.is_thing)

    @property
    def class_ids(self):
        return tuple(range(1, self.total_classes + 1))

    @property
    def thing_classes(self):
        return tuple(c for c in self.class_ids if self.is_thing[c - 1])

    @property
    def stuff_classes(self):
        return tuple(c for c in self.class_ids if not self.is_thing[c - 1])

    def thing(self, class_id):
        if not 1 <= class_id <= self.total_classes:
            raise PanopticMapError(
                'Class id {} is outside the label space 1..{}.'.format(
                    class_id, self.total_classes))
        return bool(self.is_thing[class_id - 1])

    def name(self, class_id):
        return self.names[class_id - 1]

    def to_dict(self):
        return {
            'total_classes': self.total_classes,
            'is_thing': [bool(t) for t in self.is_thing],
            'names': list(self.names),
        }

    @classmethod
    def from_dict(cls, d):
        ls = cls(is_thing=tuple(bool(t) for t in d['is_thing']),
                 names=tuple(d['names']))
        if ls.total_classes != d.get('total_classes', ls.total_classes):
            raise PanopticMapError('LabelSpace header has inconsistent K.')
        return ls


@dataclass(frozen=True, eq=False)
class PanopticMap:
    semantic: np.ndarray
    instance: np.ndarray
    label_space: LabelSpace = None

    def __post_init__(self):
        semantic = np.asarray(self.semantic, dtype=np.int64)
        instance = np.asarray(self.instance, dtype=np.int64)
        if semantic.ndim != 2 or semantic.shape != instance.shape:
            raise PanopticMapError(
                'semantic {} and instance {} grids must be 2-D and of equal '
                'shape.'.format(semantic.shape, instance.shape))
        semantic.setflags(write=False)
        instance.setflags(write=False)
        object.__setattr__(self, 'semantic', semantic)
        object.__setattr__(self, 'instance', instance)

    @property
    def height(self):
        return self.semantic.shape[0]

    @property
    def width(self):
        return self.semantic.shape[1]

    @property
    def shape(self):
        return self.semantic.shape

    def classes(self):
        """Set of non-void class ids present in the map.
        """
        return frozenset(int(c) for c in np.unique(self.semantic) if c != VOID)

    def void_mask(self):
        return self.semantic == VOID

    def validate(self):
        """Raise PanopticMapError unless the map satisfies its invariants.
        """
        if (self.semantic < 0).any() or (self.instance < 0).any():
            raise PanopticMapError('Negative class or instance id in map.')
        if (self.instance[self.semantic == VOID] != 0).any():
            raise PanopticMapError('Void pixel carries a non-zero instance id.')
        if self.label_space is None:
            return self
        k = self.label_space.total_classes
        if (self.semantic > k).any():
            raise PanopticMapError(
                'Class id {} outside label space 1..{}.'.format(
                    int(self.semantic.max()), k))
        for c in self.classes():
            inst = self.instance[self.semantic == c]
            if self.label_space.thing(c):
                if (inst < 1).any():
                    raise PanopticMapError(
                        'Thing class {} has pixels with instance id 0.'.format(c))
            elif (inst != 0).any():
                raise PanopticMapError(
                    'Stuff class {} has pixels with instance id > 0.'.format(c))
        return self

    def equals(self, other):
        return np.array_equal(self.semantic, other.semantic) and \
            np.array_equal(self.instance, other.instance)


@dataclass(frozen=True, eq=False)
class Segment:
    """Pixels sharing one (class_id, instance_id) pair, stored as a boolean mask.
    """
    class_id: int
    instance_id: int
    mask: np.ndarray

    @property
    def area(self):
        return int(np.count_nonzero(self.mask))

    @property
    def pixels(self):
        rows, cols = np.nonzero(self.mask)
        return frozenset(zip(rows.tolist(), cols.tolist()))


SegmentMatching = namedtuple(
    'SegmentMatching', ('pairs', 'unmatched_pred', 'unmatched_gt'))


def segments_from_map(panoptic_map):
    """Split a map into one Segment per distinct (class_id, instance_id).
    Void pixels are excluded. Segments come out sorted by (class_id, instance_id).
    """
    panoptic_map.validate()
    sem = panoptic_map.semantic
    inst = panoptic_map.instance
    non_void = sem != VOID
    if not non_void.any():
        return []
    pairs = np.unique(np.stack([sem[non_void], inst[non_void]], axis=1), axis=0)
    segments = []
    for class_id, instance_id in pairs.tolist():
        mask = (sem == class_id) & (inst == instance_id)
        mask.setflags(write=False)
        segments.append(Segment(class_id=int(class_id),
                                instance_id=int(instance_id),
                                mask=mask))
    return segments


def paint_segments(segments, shape, label_space=None):
    """Inverse of segments_from_map.
    """
    sem = np.zeros(shape, dtype=np.int64)
    inst = np.zeros(shape, dtype=np.int64)
    for s in segments:
        sem[s.mask] = s.class_id
        inst[s.mask] = s.instance_id
    return PanopticMap(sem, inst, label_space)


def iou(a, b):
    """|a & b| / |a | b| for pixel sets; 0 for an empty union.
    """
    a = set(a)
    b = set(b)
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def _pair_iou(pred_seg, gt_seg, void):
    inter = np.count_nonzero(pred_seg.mask & gt_seg.mask)
    if inter == 0:
        return 0.0
    # predicted pixels on ground-truth void do not count towards the union
    pred_area = pred_seg.area
    if void is not None:
        pred_area -= np.count_nonzero(pred_seg.mask & void)
    union = gt_seg.area + pred_area - inter
    return inter / union


def match_segments(pred, gt, void=None):
    """Match predicted and ground-truth segments for PQ.

    A pair matches iff it has the same class and IoU > 0.5. Since segments
    of one map are disjoint, each segment has at most one such partner and
    the matching is unique.

    Args:
        pred, gt:
            sequences of Segment over the same canvas
        void:
            optional boolean grid of ground-truth void pixels, removed from
            the union of each pair

    Returns:
        SegmentMatching(pairs=[(pred_idx, gt_idx, iou)], unmatched_pred,
        unmatched_gt) with indices into the input sequences.
    """
    pairs = []
    matched_pred = set()
    matched_gt = set()
    for gi, g in enumerate(gt):
        for pi, p in enumerate(pred):
            if p.class_id != g.class_id or pi in matched_pred:
                continue
            v = _pair_iou(p, g, void)
            if v > PQ_IOU_THRESHOLD:
                pairs.append((pi, gi, v))
                matched_pred.add(pi)
                matched_gt.add(gi)
                break
    return SegmentMatching(
        pairs=pairs,
        unmatched_pred=[i for i in range(len(pred)) if i not in matched_pred],
        unmatched_gt=[i for i in range(len(gt)) if i not in matched_gt])


def _check_same_canvas(pred, gt):
    if pred.shape != gt.shape:
        raise PanopticMapError(
            'Prediction canvas {} differs from ground truth {}.'.format(
                pred.shape, gt.shape))


def _check_classes(classes):
    classes = tuple(sorted(set(int(c) for c in classes)))
    if not classes:
        raise PanopticMapError('Empty class subset.')
    if VOID in classes:
        raise PanopticMapError('Class id 0 (void) cannot be evaluated.')
    return classes


PanopticQualityResult = namedtuple(
    'PanopticQualityResult', ('per_class_pq', 'tp', 'fp', 'fn', 'iou_sum', 'pq'))


class PanopticQualityAccumulator(object):
    """Accumulates per-class TP/FP/FN counts and matched IoU sums over images.
    """
    def __init__(self, classes):
        self._classes = _check_classes(classes)
        self._tp = dict.fromkeys(self._classes, 0)
        self._fp = dict.fromkeys(self._classes, 0)
        self._fn = dict.fromkeys(self._classes, 0)
        self._iou = dict.fromkeys(self._classes, 0.0)

    @property
    def classes(self):
        return self._classes

    def update(self, pred, gt):
        _check_same_canvas(pred, gt)
        wanted = set(self._classes)
        pred_segs = [s for s in segments_from_map(pred) if s.class_id in wanted]
        gt_segs = [s for s in segments_from_map(gt) if s.class_id in wanted]
        void = gt.void_mask()
        m = match_segments(pred_segs, gt_segs, void=void)
        for pi, gi, v in m.pairs:
            c = gt_segs[gi].class_id
            self._tp[c] += 1
            self._iou[c] += v
        for gi in m.unmatched_gt:
            self._fn[gt_segs[gi].class_id] += 1
        for pi in m.unmatched_pred:
            p = pred_segs[pi]
            # mostly-void predictions are not false positives
            if np.count_nonzero(p.mask & void) / p.area > PQ_IOU_THRESHOLD:
                continue
            self._fp[p.class_id] += 1
        return self

    def result(self):
        per_class = {}
        for c in self._classes:
            denom = self._tp[c] + 0.5 * self._fp[c] + 0.5 * self._fn[c]
            if denom == 0:
                continue
            per_class[c] = self._iou[c] / denom
        return PanopticQualityResult(
            per_class_pq=per_class,
            tp=dict(self._tp), fp=dict(self._fp), fn=dict(self._fn),
            iou_sum=dict(self._iou),
            pq=_mean_or_none(per_class.values()))


class MeanIoUAccumulator(object):
    """Accumulates per-class semantic intersections and unions over all pixels.
    """
    def __init__(self, classes):
        self._classes = _check_classes(classes)
        self._inter = dict.fromkeys(self._classes, 0)
        self._union = dict.fromkeys(self._classes, 0)

    def update(self, pred, gt):
        _check_same_canvas(pred, gt)
        for c in self._classes:
            p = pred.semantic == c
            g = gt.semantic == c
            self._inter[c] += int(np.count_nonzero(p & g))
            self._union[c] += int(np.count_nonzero(p | g))
        return self

    def per_class(self):
        return {c: self._inter[c] / self._union[c]
                for c in self._classes if self._union[c] > 0}

    def result(self):
        return _mean_or_none(self.per_class().values())


def _mean_or_none(values):
    values = list(values)
    if not values:
        return None
    return float(np.mean(values))


def panoptic_quality(pred, gt, classes):
    """PQ of a single prediction against ground truth on a class subset.
    Classes without gt and pred segments are left out of the mean.
    """
    return PanopticQualityAccumulator(classes).update(pred, gt).result()


def mean_iou(pred, gt, classes):
    return MeanIoUAccumulator(classes).update(pred, gt).result()


@dataclass
class MetricReport:
    per_class_pq: dict = field(default_factory=dict)
    per_class_iou: dict = field(default_factory=dict)
    tp: dict = field(default_factory=dict)
    fp: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)
    pq_base: float = None
    pq_new: float = None
    pq_all: float = None
    miou_base: float = None
    miou_new: float = None
    miou_all: float = None

    AGGREGATE_KEYS = ('pq_base', 'pq_new', 'pq_all',
                      'miou_base', 'miou_new', 'miou_all')

    def to_flat_dict(self):
        d = {k: getattr(self, k) for k in MetricReport.AGGREGATE_KEYS}
        for c in sorted(self.per_class_pq):
            d['pq_class_{}'.format(c)] = self.per_class_pq[c]
        for c in sorted(self.per_class_iou):
            d['miou_class_{}'.format(c)] = self.per_class_iou[c]
        for name, counts in (('tp', self.tp), ('fp', self.fp), ('fn', self.fn)):
            for c in sorted(counts):
                d['{}_class_{}'.format(name, c)] = counts[c]
        return d

    def to_dict(self):
        d = {k: getattr(self, k) for k in MetricReport.AGGREGATE_KEYS}
        for name in ('per_class_pq', 'per_class_iou', 'tp', 'fp', 'fn'):
            d[name] = {str(c): v for c, v in sorted(getattr(self, name).items())}
        return d

    @classmethod
    def from_dict(cls, d):
        kwargs = {k: d.get(k) for k in MetricReport.AGGREGATE_KEYS}
        for name in ('per_class_pq', 'per_class_iou', 'tp', 'fp', 'fn'):
            kwargs[name] = {int(c): v for c, v in d.get(name, {}).items()}
        return cls(**kwargs)


def build_metric_report(pq_result, per_class_iou, base_classes, new_classes):
    """Average per-class values over base, new and base+new subsets.
    """
    base = set(base_classes)
    new = set(new_classes)

    def subset_mean(per_class, subset):
        return _mean_or_none(v for c, v in per_class.items() if c in subset)

    return MetricReport(
        per_class_pq=dict(pq_result.per_class_pq),
        per_class_iou=dict(per_class_iou),
        tp=dict(pq_result.tp), fp=dict(pq_result.fp), fn=dict(pq_result.fn),
        pq_base=subset_mean(pq_result.per_class_pq, base),
        pq_new=subset_mean(pq_result.per_class_pq, new),
        pq_all=subset_mean(pq_result.per_class_pq, base | new),
        miou_base=subset_mean(per_class_iou, base),
        miou_new=subset_mean(per_class_iou, new),
        miou_all=subset_mean(per_class_iou, base | new))


def evaluate_maps(preds, gts, base_classes, new_classes):
    """MetricReport over paired prediction / ground-truth maps.
    """
    classes = tuple(base_classes) + tuple(new_classes)
    pq_acc = PanopticQualityAccumulator(classes)
    miou_acc = MeanIoUAccumulator(classes)
    for pred, gt in zip(preds, gts):
        pq_acc.update(pred, gt)
        miou_acc.update(pred, gt)
    return build_metric_report(pq_acc.result(), miou_acc.per_class(),
                               base_classes, new_classes)


def encode_panoptic_map(panoptic_map, **extra_arrays):
    """Serialize a map (and optional extra arrays) to .npz bytes.
    The LabelSpace travels as a JSON header record.
    """
    header = {
        'magic': MAP_FORMAT_MAGIC,
        'version': MAP_FORMAT_VERSION,
        'label_space': None if panoptic_map.label_space is None
        else panoptic_map.label_space.to_dict(),
    }
    buf = io.BytesIO()
    np.savez_compressed(
        buf,
        header=np.array(json.dumps(header, sort_keys=True)),
        semantic=panoptic_map.semantic,
        instance=panoptic_map.instance,
        **extra_arrays)
    return buf.getvalue()


def decode_panoptic_map(data):
    """Returns (PanopticMap, dict of extra arrays).
    """
    with np.load(io.BytesIO(data), allow_pickle=False) as npz:
        header = json.loads(str(npz['header']))
        if header.get('magic') != MAP_FORMAT_MAGIC:
            raise PanopticMapError('Not a panoptic map container.')
        if header.get('version') != MAP_FORMAT_VERSION:
            raise PanopticMapError(
                'Unsupported panoptic map format version {}.'.format(
                    header.get('version')))
        ls = header.get('label_space')
        panoptic_map = PanopticMap(
            npz['semantic'], npz['instance'],
            None if ls is None else LabelSpace.from_dict(ls))
        extra = {k: npz[k] for k in npz.files
                 if k not in ('header', 'semantic', 'instance')}
    return panoptic_map, extra


def save_panoptic_map(uri, panoptic_map, **extra_arrays):
    AutoURI(uri).write(encode_panoptic_map(panoptic_map, **extra_arrays))


def load_panoptic_map(uri):
    return decode_panoptic_map(AutoURI(uri).read(byte=True))
