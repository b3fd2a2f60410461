#!/usr/bin/env python3
"""Future-aware diagnostics: future-confusion profiles, prototype congruence
across steps and the stability-plasticity trajectory.

All functions are read-only over a frozen model and dataset.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .segmenter import downsample_labels, images_to_tensor, predict_maps


logger = logging.getLogger(__name__)


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionProfile:
    step: int
    fraction_to_old: float
    fraction_to_background: float
    fraction_to_future: float
    num_pixels: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class CongruenceRecord:
    step: int
    per_class: dict = field(default_factory=dict)
    mean: float = None
    flagged: tuple = ()

    def to_dict(self):
        return {
            'step': self.step,
            'per_class': {str(c): v for c, v in sorted(self.per_class.items())},
            'mean': self.mean,
            'flagged': list(self.flagged),
        }


@dataclass(frozen=True)
class TrajectoryPoint:
    step: int
    retention: float
    pq_new: float = None

    def to_dict(self):
        return asdict(self)


def confusion_profile_from_maps(preds, gts, known, all_classes, step=0):
    """Where pixels of not-yet-known classes go: to an old class, to void or
    to a future class. gts must be unmasked ground truth.
    """
    known = np.asarray(sorted(known), dtype=np.int64)
    future = np.asarray(sorted(set(all_classes) - set(known.tolist())), dtype=np.int64)
    n = to_old = to_bg = to_future = 0
    for pred, gt in zip(preds, gts):
        fut = np.isin(gt.semantic, future)
        p = pred.semantic[fut]
        n += int(fut.sum())
        to_old += int(np.isin(p, known).sum())
        to_bg += int((p == 0).sum())
        to_future += int(np.isin(p, future).sum())
    if n == 0:
        raise AnalysisError(
            'No future-class pixels at step {}; the profile is undefined.'.format(step))
    return ConfusionProfile(step=step, fraction_to_old=to_old / n,
                            fraction_to_background=to_bg / n,
                            fraction_to_future=to_future / n, num_pixels=n)


def future_confusion_profile(model, images, annotations, known, all_classes,
                             label_space, step=0):
    preds = predict_maps(model, images, label_space)
    return confusion_profile_from_maps(preds, annotations, known, all_classes, step)


def class_prototypes(features, labels, classes):
    """Pixel-count-weighted mean feature per class.

    Args:
        features: sequence of C x H' x W' arrays.
        labels: sequence of H' x W' label grids aligned with features.

    Returns ({class: mean vector}, missing classes).
    """
    sums = {}
    counts = {}
    for f, lab in zip(features, labels):
        f = np.asarray(f, dtype=np.float64)
        for c in classes:
            sel = lab == c
            k = int(sel.sum())
            if not k:
                continue
            sums[c] = sums.get(c, 0.0) + f[:, sel].sum(axis=1)
            counts[c] = counts.get(c, 0) + k
    protos = {c: sums[c] / counts[c] for c in classes if c in counts}
    missing = tuple(c for c in classes if c not in counts)
    if missing:
        logger.debug('Classes %s have no pixels; left out of prototypes.', missing)
    return protos, missing


def class_prototypes_from_data(model, images, annotations, classes, batch_size=16):
    """Data-side class centroids of F over ground-truth pixels."""
    stride = model.config.stride
    feats = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out = model(images_to_tensor(images[start:start + batch_size]))
            feats.extend(out.features.double().numpy())
    model.train(was_training)
    labels = [downsample_labels(a.semantic, stride) for a in annotations]
    return class_prototypes(feats, labels, classes)


def _cosine(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def prototype_congruence(protos_t, protos_1, step=0):
    """Cosine between step-t and step-1 prototypes of each shared class.
    Zero-norm prototypes are flagged and left out of the mean.
    """
    shared = sorted(set(protos_t) & set(protos_1))
    if not shared:
        raise AnalysisError('No shared classes between the prototype sets.')
    per_class = {}
    flagged = []
    for c in shared:
        a = np.asarray(protos_t[c], dtype=np.float64)
        b = np.asarray(protos_1[c], dtype=np.float64)
        if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
            flagged.append(c)
            continue
        per_class[c] = _cosine(a, b)
    if flagged:
        logger.warning('Zero-norm prototypes for classes %s at step %d.', flagged, step)
    mean = float(np.mean(list(per_class.values()))) if per_class else None
    return CongruenceRecord(step=step, per_class=per_class, mean=mean,
                            flagged=tuple(flagged))


def classifier_congruence(weight_t, weight_1, classes, step=0):
    """prototype_congruence over classifier rows (class c is row c - 1)."""
    wt = np.asarray(weight_t, dtype=np.float64)
    w1 = np.asarray(weight_1, dtype=np.float64)
    return prototype_congruence({c: wt[c - 1] for c in classes},
                                {c: w1[c - 1] for c in classes}, step)


def stability_plasticity(history):
    """Trajectory points for steps 2..T from {step: MetricReport}.

    retention = PQ_base(t) / PQ_base(1), or 0 when PQ_base(1) is 0.
    """
    steps = sorted(history)
    if not steps or steps != list(range(1, steps[-1] + 1)):
        raise AnalysisError('History must hold steps 1..T, got {}.'.format(steps))
    base1 = history[1].pq_base or 0.0
    points = []
    for t in steps[1:]:
        base_t = history[t].pq_base or 0.0
        retention = base_t / base1 if base1 > 0 else 0.0
        points.append(TrajectoryPoint(step=t, retention=retention,
                                      pq_new=history[t].pq_new))
    return points
