#!/usr/bin/env python3
"""Future-aware training: future-like region discovery, pixel-to-region
contrast (L_reg), known-class repulsion (L_rep) and the optional auxiliary
clustering branch (L_aux).

Everything runs at feature resolution: query masks are area-pooled to the
H' x W' grid of F and labels are plurality-downsampled to the same grid.
"""

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .segmenter import downsample_labels, panoptic_loss, sgd_step


logger = logging.getLogger(__name__)

PROTOTYPE_SOURCES = ('classifier', 'centroid')
APPLY_AT = ('every_step', 'base_only')


class FutcrError(ValueError):
    pass


@dataclass(frozen=True)
class AuxConfig:
    enabled: bool = False
    k_aux: int = 8
    buffer_capacity: int = 512
    lambda_bal: float = 1.0
    refresh_period: int = 50
    weight: float = 0.1
    hidden: int = 32
    max_iter: int = 50

    def __post_init__(self):
        if self.k_aux < 1 or self.buffer_capacity < self.k_aux:
            raise FutcrError('aux needs 1 <= k_aux <= buffer_capacity.')
        if self.refresh_period < 1 or self.hidden < 1 or self.max_iter < 1:
            raise FutcrError('aux refresh_period, hidden and max_iter must be >= 1.')
        if self.lambda_bal < 0 or self.weight < 0:
            raise FutcrError('aux weights must be >= 0.')


@dataclass(frozen=True)
class FutcrConfig:
    tau_mask: float = 0.5
    tau: float = 0.07
    gamma: float = 0.0
    lambda_reg: float = 0.5
    lambda_rep: float = 0.5
    pixels_per_region: int = 70
    min_region_pixels: int = 10
    confidence_min: float = 0.7
    majority_fraction: float = 0.5
    unlabeled_sample_count: int = 256
    future_aware_weight: float = 1.0
    logit_criterion: bool = False
    logit_min_score: float = 0.1
    known_prototype_source: str = 'classifier'
    centroid_momentum: float = 0.9
    apply_at: str = 'every_step'
    aux: AuxConfig = field(default_factory=AuxConfig)

    def __post_init__(self):
        if self.tau <= 0:
            raise FutcrError('tau must be > 0, got {}.'.format(self.tau))
        if not 0.0 < self.tau_mask < 1.0:
            raise FutcrError('tau_mask must be in (0, 1), got {}.'.format(self.tau_mask))
        if not 0.5 <= self.majority_fraction <= 1.0:
            raise FutcrError('majority_fraction must be in [0.5, 1].')
        if not -1.0 <= self.gamma <= 1.0:
            raise FutcrError('gamma must be in [-1, 1].')
        for name in ('pixels_per_region', 'min_region_pixels',
                     'unlabeled_sample_count'):
            if getattr(self, name) < 1:
                raise FutcrError('{} must be >= 1.'.format(name))
        for name in ('lambda_reg', 'lambda_rep', 'future_aware_weight'):
            if getattr(self, name) < 0:
                raise FutcrError('{} must be >= 0.'.format(name))
        if self.known_prototype_source not in PROTOTYPE_SOURCES:
            raise FutcrError('known_prototype_source must be one of {}.'.format(
                PROTOTYPE_SOURCES))
        if self.apply_at not in APPLY_AT:
            raise FutcrError('apply_at must be one of {}.'.format(APPLY_AT))
        if not 0.0 <= self.centroid_momentum < 1.0:
            raise FutcrError('centroid_momentum must be in [0, 1).')

    def active_at(self, step):
        return self.apply_at == 'every_step' or step == 1


@dataclass(eq=False)
class FutureRegion:
    image: int
    query: int
    support: np.ndarray
    prototype: torch.Tensor = None
    anchors: torch.Tensor = None

    @property
    def size(self):
        return int(self.support.sum())


@dataclass
class StepRecord:
    step: int
    iteration: int
    l_pan: float
    l_reg: float = 0.0
    l_rep: float = 0.0
    l_aux: float = 0.0
    l_total: float = 0.0
    num_regions: int = 0
    num_unlabeled: int = 0

    def to_dict(self):
        return asdict(self)


def _generator(seed):
    if isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


def unlabeled_mask(annotation, known, stride):
    """Feature-resolution grid of pixels outside C^{<=t}."""
    low = downsample_labels(annotation.semantic, stride)
    return (low == 0) | ~np.isin(low, np.asarray(sorted(known), dtype=np.int64))


def select_future_queries(masks, unlabeled, cfg, scores=None):
    """Indices of queries that pass the three discovery predicates.

    Args:
        masks: Q x H' x W' soft masks at feature resolution.
        unlabeled: H' x W' bool.
        scores: optional per-query max class probability; used only with
            cfg.logit_criterion.
    """
    masks = np.asarray(masks, dtype=np.float64)
    unlabeled = np.asarray(unlabeled, dtype=bool)
    selected = []
    for q in range(masks.shape[0]):
        support = masks[q] > cfg.tau_mask
        n = int(support.sum())
        if n < cfg.min_region_pixels:
            continue
        if masks[q][support].mean() < cfg.confidence_min:
            continue
        if int(unlabeled[support].sum()) <= cfg.majority_fraction * n:
            continue
        if cfg.logit_criterion and scores is not None and \
                scores[q] < cfg.logit_min_score:
            continue
        selected.append(q)
    return selected


def discover_future_regions(feature_masks, unlabeled, cfg, logits=None):
    """R^fut for a batch, in (image, query) order.

    Args:
        feature_masks: B x Q x H' x W' tensor.
        unlabeled: B x H' x W' bool array.
        logits: optional B x Q x (K + 1) logits for the logit criterion.
    """
    masks = feature_masks.detach().cpu().double().numpy()
    scores = None
    if logits is not None:
        scores = logits.detach().softmax(-1)[..., :-1].max(-1).values.cpu().numpy()
    regions = []
    for b in range(masks.shape[0]):
        picked = select_future_queries(
            masks[b], unlabeled[b], cfg, None if scores is None else scores[b])
        for q in picked:
            regions.append(FutureRegion(image=b, query=q,
                                        support=masks[b, q] > cfg.tau_mask))
    return regions


def region_prototype(features, mask, tau_mask):
    """(Omega_r, p_r): strict threshold of the mask and the unweighted mean
    of features (C x H' x W') over it.
    """
    support = mask > tau_mask
    if not bool(support.any()):
        raise FutcrError('Empty region support at tau_mask={}.'.format(tau_mask))
    return support, features[:, support].mean(dim=1)


def sample_anchors(support, features, n, seed):
    """n anchor features from a support; without replacement when the
    support holds at least n pixels, with replacement otherwise.

    Returns (anchors n x C, flat pixel indices).
    """
    support = torch.as_tensor(support, dtype=torch.bool)
    idx = torch.nonzero(support.flatten()).flatten()
    if idx.numel() == 0:
        raise FutcrError('Cannot sample anchors from an empty support.')
    g = _generator(seed)
    if idx.numel() >= n:
        pick = torch.randperm(idx.numel(), generator=g)[:n]
    else:
        pick = torch.randint(idx.numel(), (n,), generator=g)
    chosen = idx[pick]
    return features.flatten(1)[:, chosen].T, chosen


def _check_nonzero(x, what):
    if x.numel() and bool((x.detach().norm(dim=-1) == 0).any()):
        raise FutcrError('Zero-norm {} has no cosine similarity.'.format(what))


def region_contrast_loss(anchors, targets, prototypes, tau):
    """InfoNCE over region prototypes with cosine similarity / tau.

    Args:
        anchors: N x C anchor features.
        targets: N region indices into prototypes.
        prototypes: R x C.
    """
    if prototypes.shape[0] < 1:
        raise FutcrError('region_contrast_loss needs at least one prototype.')
    _check_nonzero(anchors, 'anchor')
    _check_nonzero(prototypes, 'prototype')
    targets = torch.as_tensor(targets, dtype=torch.long)
    sim = F.normalize(anchors, dim=-1) @ F.normalize(prototypes, dim=-1).T
    return F.cross_entropy(sim / tau, targets)


def known_class_prototypes(weight, known):
    """Unit-normalized classifier rows for the known classes, sorted by id.

    Returns (classes, prototypes |known| x d).
    """
    classes = tuple(sorted(known))
    if not classes:
        raise FutcrError('known_class_prototypes needs at least one class.')
    rows = weight[[c - 1 for c in classes]]
    norms = rows.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise FutcrError('Zero-norm classifier row among classes {}.'.format(classes))
    return classes, rows / norms


def sample_unlabeled_pixels(features, unlabeled, n, seed):
    """Uniform draw of up to n distinct unlabeled pixels across the batch.

    Args:
        features: B x C x H' x W'.
        unlabeled: B x H' x W' bool.

    Returns (z m x C, coords m x 3 as (b, i, j)), m = min(n, #unlabeled).
    """
    unlabeled = torch.as_tensor(np.asarray(unlabeled), dtype=torch.bool)
    b, c, h, w = features.shape
    coords = torch.nonzero(unlabeled)
    if coords.shape[0] == 0:
        return features.new_zeros((0, c)), coords
    g = _generator(seed)
    pick = torch.randperm(coords.shape[0], generator=g)[:n]
    coords = coords[pick]
    z = features[coords[:, 0], :, coords[:, 1], coords[:, 2]]
    return z, coords


def nearest_known_class(z, prototypes, classes):
    """c*(u): argmax cosine, ties to the lowest class id."""
    s = F.normalize(z, dim=-1) @ F.normalize(prototypes, dim=-1).T
    return [classes[i] for i in torch.argmax(s, dim=1).tolist()]


def repulsion_loss(z, prototypes, gamma):
    """mean_u max(0, max_c cos(z_u, w_c) - gamma); w_c are held constant.
    """
    if prototypes.shape[0] < 1:
        raise FutcrError('repulsion_loss needs at least one known prototype.')
    if z.shape[0] == 0:
        return z.new_zeros(())
    _check_nonzero(z, 'unlabeled feature')
    s = F.normalize(z, dim=-1) @ F.normalize(prototypes.detach(), dim=-1).T
    return torch.clamp(s.max(dim=1).values - gamma, min=0).mean()


def _is_finite(x):
    return bool(torch.isfinite(torch.as_tensor(x)).all())


def total_loss(l_pan, l_reg, l_rep, cfg):
    """L_pan + w * (lambda_reg * L_reg + lambda_rep * L_rep), w the
    future-aware weight. Zero-weighted terms are left out of the sum.
    """
    for name, x in (('L_pan', l_pan), ('L_reg', l_reg), ('L_rep', l_rep)):
        if not _is_finite(x):
            raise FutcrError('{} is not finite.'.format(name))
    total = l_pan
    w = cfg.future_aware_weight
    if w and cfg.lambda_reg:
        total = total + w * cfg.lambda_reg * l_reg
    if w and cfg.lambda_rep:
        total = total + w * cfg.lambda_rep * l_rep
    return total


class AuxClusterHead(nn.Module):
    """Maps a region prototype to K_aux cluster logits."""
    def __init__(self, in_dim, hidden, k_aux):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(),
                                 nn.Linear(hidden, k_aux))

    def forward(self, x):
        return self.net(x)


def _normalize_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise FutcrError('Zero-norm prototype in the cluster buffer.')
    return x / norms


def aux_cluster_refresh(buffer, k_aux, seed, max_iter=50):
    """Spherical k-means over the prototype buffer.

    Farthest-first initialization from a seeded first center; an empty
    cluster is re-seeded from the point farthest from its own center.

    Returns (centers k x d unit rows, labels), labels by max cosine with
    ties to the lowest k.
    """
    x = _normalize_rows(np.asarray(buffer, dtype=np.float64))
    n = x.shape[0]
    if n < k_aux:
        raise FutcrError('Buffer of {} prototypes is smaller than K_aux={}.'.format(
            n, k_aux))
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(n)]]
    while len(centers) < k_aux:
        closest = (x @ np.stack(centers).T).max(axis=1)
        centers.append(x[int(np.argmin(closest))])
    centers = np.stack(centers)
    for _ in range(max_iter):
        corr = x @ centers.T
        labels = np.argmax(corr, axis=1)
        own = corr[np.arange(n), labels]
        new = centers.copy()
        for k in range(k_aux):
            members = x[labels == k]
            if len(members) == 0:
                far = int(np.argmin(own))
                new[k] = x[far]
                own[far] = np.inf
                continue
            total = members.sum(axis=0)
            norm = np.linalg.norm(total)
            if norm > 0:
                new[k] = total / norm
        converged = np.allclose(new, centers, atol=1e-12)
        centers = new
        if converged:
            break
    labels = np.argmax(x @ centers.T, axis=1)
    return centers, labels


def assign_clusters(prototypes, centers):
    """l_r = argmax_k cos(p_r, c_k), ties to the lowest k."""
    p = _normalize_rows(np.asarray(prototypes, dtype=np.float64))
    return np.argmax(p @ np.asarray(centers).T, axis=1)


def balance_term(logits):
    """KL(p_bar || uniform) of the batch-mean softmax."""
    k = logits.shape[-1]
    p_bar = logits.softmax(dim=-1).mean(dim=0)
    return (torch.xlogy(p_bar, p_bar) + p_bar * math.log(k)).sum()


def aux_loss(logits, labels, lambda_bal):
    """mean CE(g_r, l_r) + lambda_bal * KL(p_bar || uniform)."""
    if logits.shape[-1] < 2:
        raise FutcrError('aux_loss needs K_aux >= 2, got {}.'.format(logits.shape[-1]))
    labels = torch.as_tensor(labels, dtype=torch.long)
    return F.cross_entropy(logits, labels) + lambda_bal * balance_term(logits)


class FutcrState(object):
    """Mutable state carried across iterations and continual steps: the
    running class centroids of F and the auxiliary prototype buffer.
    """
    def __init__(self, aux_cfg=None):
        self.aux_cfg = aux_cfg or AuxConfig()
        self.centroids = {}
        self.buffer = deque(maxlen=self.aux_cfg.buffer_capacity)
        self.centers = None
        self.updates = 0

    def update_centroids(self, features, labels, classes, momentum):
        """EMA of per-class mean features over labeled feature-resolution
        pixels.
        """
        feats = features.detach().permute(0, 2, 3, 1).cpu().double().numpy()
        for c in classes:
            sel = labels == c
            if not sel.any():
                continue
            mean = feats[sel].mean(axis=0)
            if c in self.centroids:
                mean = momentum * self.centroids[c] + (1 - momentum) * mean
            self.centroids[c] = mean

    def centroid_prototypes(self, known, weight):
        """Unit rows for every known class: the running centroid when the
        class has one, its classifier row (detached) otherwise.

        Returns (classes, prototypes |known| x d).
        """
        classes = tuple(sorted(known))
        if not classes:
            raise FutcrError('centroid_prototypes needs at least one class.')
        w = weight.detach()
        rows = []
        for c in classes:
            if c in self.centroids:
                rows.append(torch.as_tensor(self.centroids[c], dtype=w.dtype,
                                            device=w.device))
            else:
                rows.append(w[c - 1])
        rows = torch.stack(rows)
        if bool((rows.norm(dim=1) == 0).any()):
            raise FutcrError('Zero-norm prototype among classes {}.'.format(classes))
        return classes, F.normalize(rows, dim=-1)

    def push_prototypes(self, prototypes, seed):
        for p in prototypes.detach().cpu().double().numpy():
            self.buffer.append(p)
        self.updates += 1
        due = self.centers is None or self.updates % self.aux_cfg.refresh_period == 0
        if due and len(self.buffer) >= self.aux_cfg.k_aux:
            self.centers, _ = aux_cluster_refresh(
                np.stack(self.buffer), self.aux_cfg.k_aux, seed,
                self.aux_cfg.max_iter)
            logger.debug('Refreshed %d aux centers from %d prototypes.',
                         self.aux_cfg.k_aux, len(self.buffer))

    def state_dict(self):
        return {
            'centroids': {int(c): v.tolist() for c, v in self.centroids.items()},
            'buffer': [p.tolist() for p in self.buffer],
            'centers': None if self.centers is None else self.centers.tolist(),
            'updates': self.updates,
        }

    def load_state_dict(self, d):
        self.centroids = {int(c): np.asarray(v) for c, v in d['centroids'].items()}
        self.buffer = deque((np.asarray(p) for p in d['buffer']),
                            maxlen=self.aux_cfg.buffer_capacity)
        self.centers = None if d['centers'] is None else np.asarray(d['centers'])
        self.updates = d['updates']


def _known_prototypes(model, known, cfg, state):
    if cfg.known_prototype_source == 'centroid' and state is not None:
        return state.centroid_prototypes(known, model.classifier_weight)
    return known_class_prototypes(model.classifier_weight, known)


def futcr_train_step(model, optimizer, images, annotations, known, current, cfg,
                     seed, step=1, iteration=0, state=None, aux_head=None):
    """One iteration of future-aware training at continual step `step`.

    forward -> L_pan -> region discovery -> prototypes and anchors -> L_reg
    -> unlabeled sampling and known prototypes -> L_rep -> L_total -> update.
    The losses are always computed for the record; only terms with non-zero
    weight enter L_total, so zero weights give the plain L_pan update.
    """
    mcfg = model.config
    g = _generator(seed)
    optimizer.zero_grad(set_to_none=True)
    output = model(images)
    l_pan = panoptic_loss(output, annotations, current, mcfg)
    record = StepRecord(step=step, iteration=iteration, l_pan=float(l_pan.detach()))
    if not cfg.active_at(step):
        l_pan.backward()
        sgd_step(optimizer)
        record.l_total = record.l_pan
        return record

    feats = output.features
    fmasks = output.feature_masks(mcfg.stride, mcfg.prototype_resolution)
    unlabeled = np.stack([unlabeled_mask(a, known, mcfg.stride) for a in annotations])
    regions = discover_future_regions(
        fmasks, unlabeled, cfg, output.logits if cfg.logit_criterion else None)

    l_reg = feats.new_zeros(())
    if regions:
        anchors, targets, protos = [], [], []
        for r, region in enumerate(regions):
            support, region.prototype = region_prototype(
                feats[region.image], fmasks[region.image, region.query].detach(),
                cfg.tau_mask)
            region.anchors, _ = sample_anchors(
                support, feats[region.image], cfg.pixels_per_region, g)
            anchors.append(region.anchors)
            targets.extend([r] * cfg.pixels_per_region)
            protos.append(region.prototype)
        l_reg = region_contrast_loss(torch.cat(anchors), targets,
                                     torch.stack(protos), cfg.tau)

    z, _ = sample_unlabeled_pixels(feats, unlabeled, cfg.unlabeled_sample_count, g)
    _, w = _known_prototypes(model, known, cfg, state)
    l_rep = repulsion_loss(z, w, cfg.gamma)

    total = total_loss(l_pan, l_reg, l_rep, cfg)
    l_aux = None
    if cfg.aux.enabled and aux_head is not None and state is not None and regions:
        protos = torch.stack([r.prototype for r in regions])
        state.push_prototypes(protos, int(torch.randint(2 ** 31 - 1, (1,), generator=g)))
        if state.centers is not None and cfg.aux.k_aux >= 2:
            labels = assign_clusters(protos.detach().cpu().numpy(), state.centers)
            l_aux = aux_loss(aux_head(protos), labels, cfg.aux.lambda_bal)
            if cfg.aux.weight:
                total = total + cfg.aux.weight * l_aux

    total.backward()
    sgd_step(optimizer)

    if state is not None and cfg.known_prototype_source == 'centroid':
        low = np.stack([downsample_labels(a.semantic, mcfg.stride) for a in annotations])
        state.update_centroids(feats, low, current, cfg.centroid_momentum)

    record.l_reg = float(l_reg.detach())
    record.l_rep = float(l_rep.detach())
    record.l_aux = 0.0 if l_aux is None else float(l_aux.detach())
    record.l_total = float(total.detach())
    record.num_regions = len(regions)
    record.num_unlabeled = int(z.shape[0])
    return record
