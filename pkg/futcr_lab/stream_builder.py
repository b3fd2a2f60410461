#!/usr/bin/env python3
"""Class-incremental schedules and per-step image streams.

Steps are 1-based: step 1 is the base step (C^1), step t > 1 introduces
increments[t - 2].
"""

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from autouri import AutoURI

from .panoptic_core import VOID, PanopticMap


logger = logging.getLogger(__name__)

MODES = ('overlap', 'disjoint')


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSchedule:
    base_classes: tuple
    increments: tuple = ()

    @property
    def num_steps(self):
        return 1 + len(self.increments)

    @property
    def all_classes(self):
        return tuple(self.base_classes) + tuple(
            c for group in self.increments for c in group)

    def classes_at(self, step):
        """C^t"""
        self._check_step(step)
        if step == 1:
            return tuple(self.base_classes)
        return tuple(self.increments[step - 2])

    def known_at(self, step):
        """C^{<=t}"""
        self._check_step(step)
        known = list(self.base_classes)
        for group in self.increments[:step - 1]:
            known.extend(group)
        return tuple(known)

    def new_classes_at(self, step):
        """C^{<=t} minus the base classes."""
        return self.known_at(step)[len(self.base_classes):]

    def future_at(self, step):
        known = set(self.known_at(step))
        return tuple(c for c in self.all_classes if c not in known)

    def _check_step(self, step):
        if not 1 <= step <= self.num_steps:
            raise StreamError('Step {} outside 1..{}.'.format(step, self.num_steps))

    def to_dict(self):
        return {'base_classes': list(self.base_classes),
                'increments': [list(g) for g in self.increments]}

    @classmethod
    def from_dict(cls, d):
        return cls(base_classes=tuple(d['base_classes']),
                   increments=tuple(tuple(g) for g in d['increments']))


@dataclass(frozen=True)
class StreamConfig:
    mode: str = 'overlap'
    images_per_increment: int = None
    subsample_fraction: float = 1.0
    disjoint_base_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise StreamError('Unknown stream mode {}.'.format(self.mode))
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise StreamError(
                'subsample_fraction must be in (0, 1], got {}.'.format(
                    self.subsample_fraction))
        if not 0.0 < self.disjoint_base_fraction < 1.0:
            raise StreamError('disjoint_base_fraction must be in (0, 1).')
        if self.images_per_increment is not None and self.images_per_increment < 1:
            raise StreamError('images_per_increment must be >= 1.')


@dataclass(frozen=True, eq=False)
class StepSample:
    sample_id: int
    image: np.ndarray
    training_annotation: PanopticMap
    original_annotation: PanopticMap


@dataclass(frozen=True, eq=False)
class StepDataset:
    step: int
    samples: tuple
    current_classes: tuple
    known_classes: tuple

    @property
    def sample_ids(self):
        return tuple(s.sample_id for s in self.samples)

    def __len__(self):
        return len(self.samples)


def build_schedule(K, base_count, increment_size, class_order_seed=None):
    """Partition {1..K} into a base group and ordered increments.

    The class order is a seeded permutation, or the identity order when
    class_order_seed is None. The last group may be short when K forces it.
    base_count == K gives a single-step schedule.
    """
    if K < 1:
        raise StreamError('K must be >= 1.')
    if not 0 < base_count <= K:
        raise StreamError(
            'base_count must be in 1..K, got {} for K={}.'.format(base_count, K))
    if increment_size < 1:
        raise StreamError('increment_size must be >= 1.')
    if class_order_seed is None:
        order = list(range(1, K + 1))
    else:
        rng = np.random.default_rng(np.random.SeedSequence([int(class_order_seed), K]))
        order = (rng.permutation(K) + 1).tolist()
    rest = order[base_count:]
    increments = tuple(tuple(rest[i:i + increment_size])
                       for i in range(0, len(rest), increment_size))
    return ClassSchedule(base_classes=tuple(order[:base_count]),
                         increments=increments)


def mask_labels(annotation, current):
    """Send every pixel whose class is not in `current` to (0, 0).
    """
    keep = np.isin(annotation.semantic, np.array(sorted(current), dtype=np.int64))
    sem = np.where(keep, annotation.semantic, VOID)
    inst = np.where(keep, annotation.instance, 0)
    return PanopticMap(sem, inst, annotation.label_space)


def _rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in keys]))


def _eligible(dataset, classes):
    classes = set(classes)
    return [i for i, s in enumerate(dataset) if s.present_classes & classes]


def _make_step(dataset, indices, schedule, step):
    current = schedule.classes_at(step)
    samples = tuple(
        StepSample(sample_id=dataset[i].sample_id,
                   image=dataset[i].image,
                   training_annotation=mask_labels(dataset[i].annotation, current),
                   original_annotation=dataset[i].annotation)
        for i in sorted(indices))
    return StepDataset(step=step, samples=samples,
                       current_classes=current,
                       known_classes=schedule.known_at(step))


def assign_images(dataset, schedule, config):
    """Distribute images to steps under the overlap or disjoint policy.

    An image is eligible for step t iff it holds >= 1 class of C^t. In
    overlap mode every step draws from the whole dataset; in disjoint mode
    a seeded base pool (disjoint_base_fraction of the step-1-eligible
    images) is reserved for step 1 and increments draw from the rest.
    """
    present = set()
    for s in dataset:
        present |= s.present_classes
    missing = [c for c in schedule.all_classes if c not in present]
    if missing:
        raise StreamError('Classes {} appear in no image.'.format(missing))

    base_eligible = _eligible(dataset, schedule.classes_at(1))
    if config.mode == 'overlap':
        base_pool = base_eligible
        remainder = set(range(len(dataset)))
    else:
        size = max(1, int(round(config.disjoint_base_fraction * len(base_eligible))))
        rng = _rng(config.seed, 1)
        base_pool = sorted(rng.choice(base_eligible, size=size, replace=False).tolist())
        reserved = set(base_pool)
        remainder = set(range(len(dataset))) - reserved

    steps = [_make_step(dataset, base_pool, schedule, 1)]
    for t in range(2, schedule.num_steps + 1):
        current = schedule.classes_at(t)
        indices = [i for i in _eligible(dataset, current) if i in remainder]
        covered = set()
        for i in indices:
            covered |= dataset[i].present_classes
        for c in current:
            if c not in covered:
                raise StreamError(
                    'Class {} of step {} only appears in base-pool images.'.format(c, t))
        steps.append(_make_step(dataset, indices, schedule, t))
        logger.debug('Step %d: %d eligible images (%s mode).', t, len(indices),
                     config.mode)
    if config.images_per_increment is not None and len(steps) > 1:
        mean_size = np.mean([len(s) for s in steps[1:]])
        fraction = min(1.0, config.images_per_increment / mean_size)
        steps = subsample_steps(steps, fraction, config.seed)
    elif config.subsample_fraction < 1.0:
        steps = subsample_steps(steps, config.subsample_fraction, config.seed)
    return steps


def subsample_count(n, fraction):
    """round(fraction * n), halves rounded up."""
    return int(math.floor(fraction * n + 0.5))


def subsample_steps(streams, fraction, seed):
    """Keep a uniform seeded draw of subsample_count(|D_t|, fraction) images
    of every incremental step; the base step is left as is. A draw that
    misses some class of C^t is rebalanced by swapping in an image of that
    class.
    """
    if not 0.0 < fraction <= 1.0:
        raise StreamError('fraction must be in (0, 1], got {}.'.format(fraction))
    if fraction == 1.0:
        return list(streams)
    out = []
    for sd in streams:
        if sd.step == 1:
            out.append(sd)
            continue
        n = len(sd.samples)
        k = subsample_count(n, fraction)
        if k == 0:
            raise StreamError(
                'Fraction {} leaves step {} ({} images) empty.'.format(
                    fraction, sd.step, n))
        rng = _rng(seed, sd.step, 7)
        order = rng.permutation(n).tolist()
        chosen = order[:k]
        pool = order[k:]
        chosen = _rebalance(sd, chosen, pool)
        samples = tuple(sd.samples[i] for i in sorted(chosen))
        out.append(StepDataset(step=sd.step, samples=samples,
                               current_classes=sd.current_classes,
                               known_classes=sd.known_classes))
    return out


def _classes_of(sample, current):
    return sample.original_annotation.classes() & set(current)


def _rebalance(sd, chosen, pool):
    chosen = list(chosen)
    for c in sd.current_classes:
        if any(c in _classes_of(sd.samples[i], sd.current_classes) for i in chosen):
            continue
        donor = next((i for i in pool
                      if c in _classes_of(sd.samples[i], sd.current_classes)), None)
        if donor is None:
            raise StreamError('Class {} has no image in step {}.'.format(c, sd.step))
        # drop the latest-drawn image whose classes stay covered without it
        for pos in range(len(chosen) - 1, -1, -1):
            rest = chosen[:pos] + chosen[pos + 1:]
            covered = set()
            for i in rest:
                covered |= _classes_of(sd.samples[i], sd.current_classes)
            if _classes_of(sd.samples[chosen[pos]], sd.current_classes) <= covered:
                pool.remove(donor)
                pool.append(chosen[pos])
                chosen = rest + [donor]
                break
        else:
            raise StreamError(
                'Cannot keep every class of step {} with {} images.'.format(
                    sd.step, len(chosen)))
    return chosen


def split_holdout(dataset, val_fraction, test_fraction, seed):
    """Seeded split into (train, val, test) lists; the rule is recorded in
    the run manifest.
    """
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1:
        raise StreamError('Holdout fractions must be >= 0 and sum below 1.')
    n = len(dataset)
    order = _rng(seed, 99).permutation(n).tolist()
    n_val = int(round(val_fraction * n))
    n_test = int(round(test_fraction * n))
    val = sorted(order[:n_val])
    test = sorted(order[n_val:n_val + n_test])
    train = sorted(order[n_val + n_test:])
    return ([dataset[i] for i in train], [dataset[i] for i in val],
            [dataset[i] for i in test])


def holdout_rule(val_fraction, test_fraction, seed):
    return {
        'rule': 'seeded uniform permutation; first val_fraction go to val, '
                'next test_fraction to test, rest to train',
        'val_fraction': val_fraction,
        'test_fraction': test_fraction,
        'seed': seed,
    }


def stream_manifest(streams, schedule, config, holdout=None):
    return {
        'mode': config.mode,
        'seed': config.seed,
        'subsample_fraction': config.subsample_fraction,
        'images_per_increment': config.images_per_increment,
        'disjoint_base_fraction': config.disjoint_base_fraction,
        'schedule': schedule.to_dict(),
        'holdout': holdout,
        'steps': [
            {
                'step': sd.step,
                'sample_ids': list(sd.sample_ids),
                'current_classes': list(sd.current_classes),
                'known_classes': list(sd.known_classes),
            }
            for sd in streams
        ],
    }


def write_stream_manifest(uri, manifest):
    AutoURI(uri).write(json.dumps(manifest, indent=2, sort_keys=True))


def read_stream_manifest(uri):
    return json.loads(AutoURI(uri).read())
