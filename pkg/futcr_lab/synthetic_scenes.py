#!/usr/bin/env python3
"""Deterministic toy panoptic scenes: colored shapes (things) over
horizontal bands of textured background (stuff).

Every sample draws its randomness from np.random.SeedSequence([seed, index])
so serial and parallel generation agree.
"""

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from autouri import AutoURI

from .panoptic_core import (
    LabelSpace, PanopticMap, decode_panoptic_map, encode_panoptic_map)


logger = logging.getLogger(__name__)

SHAPES = ('disk', 'rectangle', 'triangle')
DATASET_MANIFEST = 'manifest.json'
SAMPLE_FILE = 'sample_{sample_id:05d}.npz'


class SceneGenerationError(ValueError):
    pass


@dataclass(frozen=True)
class ClassAppearance:
    color: tuple
    jitter: float = 0.04
    shape: str = None
    size_range: tuple = (10, 22)
    weight: float = 1.0


@dataclass(frozen=True)
class SceneSpec:
    label_space: LabelSpace
    appearances: tuple
    height: int = 64
    width: int = 64
    min_things: int = 1
    max_things: int = 6
    max_stuff_regions: int = 2
    min_visible_pixels: int = 20
    texture_noise: float = 0.02
    color_margin: float = 0.15
    max_retries: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self):
        ls = self.label_space
        if len(self.appearances) != ls.total_classes:
            raise SceneGenerationError(
                'Need one appearance per class ({} != {}).'.format(
                    len(self.appearances), ls.total_classes))
        if not ls.stuff_classes:
            raise SceneGenerationError(
                'A scene needs at least one stuff class to fill the canvas.')
        if not 0 <= self.min_things <= self.max_things:
            raise SceneGenerationError('Need 0 <= min_things <= max_things.')
        if self.max_things > 0 and not ls.thing_classes:
            raise SceneGenerationError('max_things > 0 without thing classes.')
        if self.max_stuff_regions < 1:
            raise SceneGenerationError('max_stuff_regions must be >= 1.')
        limit = min(self.height, self.width)
        for c in ls.thing_classes:
            a = self.appearances[c - 1]
            lo, hi = a.size_range
            if a.shape not in SHAPES:
                raise SceneGenerationError(
                    'Class {} has unknown shape {}.'.format(c, a.shape))
            if not 0 < lo <= hi <= limit:
                raise SceneGenerationError(
                    'Class {} size range {} must be positive and <= {}.'.format(
                        c, a.size_range, limit))
        colors = np.array([a.color for a in self.appearances], dtype=np.float64)
        for i in range(len(colors)):
            for j in range(i + 1, len(colors)):
                if np.linalg.norm(colors[i] - colors[j]) < self.color_margin:
                    raise SceneGenerationError(
                        'Colors of classes {} and {} closer than margin {}.'.format(
                            i + 1, j + 1, self.color_margin))
        return self


@dataclass(frozen=True, eq=False)
class SceneSample:
    image: np.ndarray
    annotation: PanopticMap
    present_classes: frozenset = field(default_factory=frozenset)
    sample_id: int = 0
    seed: int = 0


def make_scene_spec(n_thing_classes=5, n_stuff_classes=3, height=64, width=64,
                    max_things=6, min_things=1, max_stuff_regions=2,
                    min_visible_pixels=20, size_range=(10, 22), jitter=0.04,
                    texture_noise=0.02, color_margin=0.15, seed=0):
    """Build a SceneSpec whose class colors are pairwise separated by
    color_margin. Classes 1..n_thing_classes are things, the rest stuff.
    """
    k = n_thing_classes + n_stuff_classes
    rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
    colors = []
    for _ in range(10000):
        if len(colors) == k:
            break
        cand = rng.uniform(0.15, 0.85, size=3)
        if all(np.linalg.norm(cand - c) >= color_margin + 2 * jitter
               for c in colors):
            colors.append(cand)
    else:
        raise SceneGenerationError(
            'Cannot place {} colors {} apart.'.format(k, color_margin))
    appearances = []
    names = []
    for c in range(1, k + 1):
        color = tuple(round(float(v), 4) for v in colors[c - 1])
        if c <= n_thing_classes:
            names.append('thing_{}'.format(c))
            appearances.append(ClassAppearance(
                color=color, jitter=jitter, shape=SHAPES[(c - 1) % len(SHAPES)],
                size_range=tuple(size_range)))
        else:
            names.append('stuff_{}'.format(c))
            appearances.append(ClassAppearance(color=color, jitter=jitter))
    label_space = LabelSpace(
        is_thing=tuple(c <= n_thing_classes for c in range(1, k + 1)),
        names=tuple(names))
    return SceneSpec(
        label_space=label_space, appearances=tuple(appearances),
        height=height, width=width, min_things=min_things,
        max_things=max_things, max_stuff_regions=max_stuff_regions,
        min_visible_pixels=min_visible_pixels, texture_noise=texture_noise,
        color_margin=color_margin)


def _shape_mask(shape, size, center, height, width):
    rows, cols = np.mgrid[0:height, 0:width]
    cy, cx = center
    half = size / 2.0
    if shape == 'disk':
        return (rows - cy) ** 2 + (cols - cx) ** 2 <= half ** 2
    if shape == 'rectangle':
        return (np.abs(rows - cy) <= half) & (np.abs(cols - cx) <= half * 0.7)
    # isosceles triangle, apex up
    top = cy - half
    frac = (rows - top) / max(size, 1)
    return (rows >= top) & (rows <= cy + half) & \
        (np.abs(cols - cx) <= frac * half)


def _weighted_choice(rng, classes, spec):
    w = np.array([spec.appearances[c - 1].weight for c in classes], dtype=np.float64)
    return int(classes[rng.choice(len(classes), p=w / w.sum())])


def _paint_stuff(rng, spec, required_stuff):
    ls = spec.label_space
    n_regions = int(rng.integers(1, spec.max_stuff_regions + 1))
    n_regions = max(n_regions, len(required_stuff))
    n_regions = min(n_regions, len(ls.stuff_classes), spec.height)
    chosen = list(required_stuff)
    while len(chosen) < n_regions:
        c = _weighted_choice(
            rng, [s for s in ls.stuff_classes if s not in chosen], spec)
        chosen.append(c)
    rng.shuffle(chosen)
    cuts = sorted(rng.choice(np.arange(1, spec.height), size=n_regions - 1,
                             replace=False).tolist()) if n_regions > 1 else []
    bounds = [0] + cuts + [spec.height]
    sem = np.zeros((spec.height, spec.width), dtype=np.int64)
    for c, lo, hi in zip(chosen, bounds[:-1], bounds[1:]):
        sem[lo:hi, :] = c
    return sem


def _place_things(rng, spec, sem, inst, thing_classes):
    """Draw things back to front. A placement that would push any earlier
    instance under min_visible_pixels is rejected and redrawn.
    """
    h, w = spec.height, spec.width
    owners = []
    next_instance = Counter()
    for c in thing_classes:
        a = spec.appearances[c - 1]
        for _ in range(spec.max_retries):
            size = int(rng.integers(a.size_range[0], a.size_range[1] + 1))
            center = (int(rng.integers(0, h)), int(rng.integers(0, w)))
            mask = _shape_mask(a.shape, size, center, h, w)
            if np.count_nonzero(mask) < spec.min_visible_pixels:
                continue
            visible_after = [np.count_nonzero(m & ~mask) for _, _, m in owners]
            if any(v < spec.min_visible_pixels for v in visible_after):
                continue
            break
        else:
            raise SceneGenerationError(
                'Cannot place an instance of class {} after {} retries.'.format(
                    c, spec.max_retries))
        owners = [(oc, oi, m & ~mask) for oc, oi, m in owners]
        next_instance[c] += 1
        owners.append((c, next_instance[c], mask))
    for c, i, m in owners:
        sem[m] = c
        inst[m] = i
    return owners


def _render_image(rng, spec, sem):
    img = np.zeros((spec.height, spec.width, 3), dtype=np.float64)
    for c in np.unique(sem).tolist():
        a = spec.appearances[c - 1]
        offset = rng.uniform(-a.jitter, a.jitter, size=3)
        img[sem == c] = np.asarray(a.color) + offset
    img += rng.normal(0.0, spec.texture_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_scene(spec, seed, required_classes=(), sample_id=0):
    """Generate one scene, deterministic in (spec, seed, required_classes).

    Instance colors are jittered per instance, so thing colors of a class
    stay within jitter of the class mean.
    """
    ls = spec.label_space
    required = sorted(set(int(c) for c in required_classes))
    req_things = [c for c in required if ls.thing(c)]
    req_stuff = [c for c in required if not ls.thing(c)]
    if len(req_things) > spec.max_things:
        raise SceneGenerationError(
            'Cannot force {} thing classes into <= {} things.'.format(
                len(req_things), spec.max_things))
    if len(req_stuff) > min(spec.max_stuff_regions, spec.height):
        raise SceneGenerationError(
            'Cannot force {} stuff classes into <= {} regions.'.format(
                len(req_stuff), spec.max_stuff_regions))
    rng = np.random.default_rng(np.random.SeedSequence(
        [int(seed)] + [int(c) for c in required]))

    sem = _paint_stuff(rng, spec, req_stuff)
    inst = np.zeros_like(sem)
    n_things = int(rng.integers(spec.min_things, spec.max_things + 1)) \
        if ls.thing_classes else 0
    n_things = max(n_things, len(req_things))
    things = list(req_things)
    while len(things) < n_things:
        things.append(_weighted_choice(rng, list(ls.thing_classes), spec))
    # random occlusion order
    things = [things[i] for i in rng.permutation(len(things))]
    _place_things(rng, spec, sem, inst, things)

    annotation = PanopticMap(sem, inst, ls).validate()
    image = _render_image(rng, spec, sem)
    return SceneSample(image=image, annotation=annotation,
                       present_classes=annotation.classes(),
                       sample_id=sample_id, seed=int(seed))


def sample_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def generate_dataset(spec, n_images, seed, class_presence_plan=None):
    """Generate n_images scenes; image i uses sample_seed(seed, i).

    Args:
        class_presence_plan:
            optional {class_id: minimum number of images containing it}.
            Shortfalls are fixed by regenerating images with the class
            forced in, lowest image index first.
    """
    if n_images < 1:
        raise SceneGenerationError('n_images must be >= 1.')
    seeds = [sample_seed(seed, i) for i in range(n_images)]
    forced = [set() for _ in range(n_images)]
    samples = [generate_scene(spec, s, sample_id=i) for i, s in enumerate(seeds)]
    if not class_presence_plan:
        return samples

    ls = spec.label_space
    done = set()
    for c in sorted(class_presence_plan):
        need = int(class_presence_plan[c])
        ls.thing(c)  # raises for ids outside the label space
        if need > n_images:
            raise SceneGenerationError(
                'Presence plan asks class {} in {} images but only {} '
                'exist.'.format(c, need, n_images))
        have = sum(1 for s in samples if c in s.present_classes)
        for i in range(n_images):
            if have >= need:
                break
            if c in samples[i].present_classes:
                continue
            # keep the planned classes this image already holds
            req = forced[i] | {c} | (samples[i].present_classes & done)
            n_req_things = sum(1 for x in req if ls.thing(x))
            if n_req_things > spec.max_things or \
                    len(req) - n_req_things > spec.max_stuff_regions:
                continue
            cand = generate_scene(spec, seeds[i], required_classes=req, sample_id=i)
            if not req <= cand.present_classes:
                continue
            forced[i] = req
            samples[i] = cand
            have += 1
        done.add(c)
        if have < need:
            raise SceneGenerationError(
                'Presence plan infeasible for class {}: {} of {} images.'.format(
                    c, have, need))
    for c, need in class_presence_plan.items():
        have = sum(1 for s in samples if c in s.present_classes)
        if have < need:
            raise SceneGenerationError(
                'Presence plan infeasible for class {}: {} of {} images.'.format(
                    c, have, need))
    return samples


def save_dataset(out_dir, samples, extra=None):
    """One .npz per sample plus manifest.json listing ids, seeds and classes.
    """
    entries = []
    for s in samples:
        fname = SAMPLE_FILE.format(sample_id=s.sample_id)
        AutoURI(os.path.join(out_dir, fname)).write(
            encode_panoptic_map(s.annotation, image=s.image))
        entries.append({
            'sample_id': s.sample_id,
            'seed': s.seed,
            'file': fname,
            'present_classes': sorted(s.present_classes),
        })
    manifest = {'samples': entries}
    if extra:
        manifest.update(extra)
    AutoURI(os.path.join(out_dir, DATASET_MANIFEST)).write(
        json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(out_dir):
    manifest = json.loads(
        AutoURI(os.path.join(out_dir, DATASET_MANIFEST)).read())
    samples = []
    for e in manifest['samples']:
        annotation, extra = decode_panoptic_map(
            AutoURI(os.path.join(out_dir, e['file'])).read(byte=True))
        samples.append(SceneSample(
            image=extra['image'], annotation=annotation,
            present_classes=frozenset(e['present_classes']),
            sample_id=e['sample_id'], seed=e['seed']))
    return samples
