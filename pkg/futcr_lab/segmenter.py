#!/usr/bin/env python3
"""A tiny query-based panoptic segmenter.

Backbone (3 conv stages, stride 4) -> mask features F; Q learned queries
read F through cross-attention; each query gets a mask
sigmoid(mask_embed(h_q) . F) and class logits over the full label space
plus a no-object column. Class c lives in logit column c - 1, no-object in
column K.
"""

import io
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from autouri import AutoURI
from scipy.optimize import linear_sum_assignment

from .panoptic_core import VOID, PanopticMap, segments_from_map


logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = 'FUTCR-LAB-CKPT'
CHECKPOINT_VERSION = 1
PROTOTYPE_RESOLUTIONS = ('area', 'lowres')


class SegmenterError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 8
    height: int = 64
    width: int = 64
    num_queries: int = 16
    query_dim: int = 32
    feature_channels: int = 32
    decoder_layers: int = 2
    num_heads: int = 4
    stride: int = 4
    score_threshold: float = 0.5
    mask_threshold: float = 0.5
    cost_class: float = 2.0
    cost_mask: float = 5.0
    cost_dice: float = 5.0
    loss_class: float = 2.0
    loss_mask: float = 5.0
    loss_dice: float = 5.0
    no_object_weight: float = 0.1
    prototype_resolution: str = 'area'

    def __post_init__(self):
        if self.height % self.stride or self.width % self.stride:
            raise SegmenterError(
                'Canvas {}x{} must be divisible by the stride {}.'.format(
                    self.height, self.width, self.stride))
        if self.stride != 4:
            raise SegmenterError('The backbone has a fixed total stride of 4.')
        if self.query_dim % self.num_heads:
            raise SegmenterError('query_dim must be divisible by num_heads.')
        if self.prototype_resolution not in PROTOTYPE_RESOLUTIONS:
            raise SegmenterError(
                'prototype_resolution must be one of {}.'.format(PROTOTYPE_RESOLUTIONS))


@dataclass(eq=False)
class ModelOutput:
    """Batched model output. mask_logits are at annotation resolution.

    features:        B x C_f x H' x W'  (F)
    query_features:  B x Q x d          (h)
    mask_logits:     B x Q x H x W
    logits:          B x Q x (K + 1)
    """
    logits: torch.Tensor
    mask_logits: torch.Tensor
    features: torch.Tensor = None
    query_features: torch.Tensor = None
    mask_logits_lowres: torch.Tensor = None

    @property
    def masks(self):
        return self.mask_logits.sigmoid()

    @property
    def num_classes(self):
        return self.logits.shape[-1] - 1

    def feature_masks(self, stride=4, resolution='area'):
        """Soft masks at feature resolution: area average of the full-resolution
        masks, or the sigmoid of the low-resolution logits.
        """
        if resolution == 'lowres' and self.mask_logits_lowres is not None:
            return self.mask_logits_lowres.sigmoid()
        return F.avg_pool2d(self.masks, kernel_size=stride, stride=stride)


class DecoderLayer(nn.Module):
    def __init__(self, query_dim, feature_channels, num_heads):
        super().__init__()
        self.cross_attn = nn.MultiheadAttention(
            query_dim, num_heads, kdim=feature_channels, vdim=feature_channels,
            batch_first=True)
        self.norm1 = nn.LayerNorm(query_dim)
        self.self_attn = nn.MultiheadAttention(query_dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(query_dim)
        self.ffn = nn.Sequential(
            nn.Linear(query_dim, 2 * query_dim), nn.ReLU(),
            nn.Linear(2 * query_dim, query_dim))
        self.norm3 = nn.LayerNorm(query_dim)

    def forward(self, h, memory):
        h = self.norm1(h + self.cross_attn(h, memory, memory, need_weights=False)[0])
        h = self.norm2(h + self.self_attn(h, h, h, need_weights=False)[0])
        return self.norm3(h + self.ffn(h))


class QueryModel(nn.Module):
    """Query-based panoptic model whose classifier always spans all K classes.
    """
    def __init__(self, config):
        super().__init__()
        self.config = config
        c = config.feature_channels
        d = config.query_dim
        # two fixed coordinate channels let queries tell instances apart
        rows = torch.linspace(-1.0, 1.0, config.height)
        cols = torch.linspace(-1.0, 1.0, config.width)
        grid = torch.stack(torch.meshgrid(rows, cols, indexing='ij'))
        self.register_buffer('coords', grid.unsqueeze(0), persistent=False)
        self.backbone = nn.Sequential(
            nn.Conv2d(5, c // 2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c // 2, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU())
        self.mask_features = nn.Conv2d(c, c, 1)
        self.query_embed = nn.Embedding(config.num_queries, d)
        self.decoder = nn.ModuleList(
            DecoderLayer(d, c, config.num_heads) for _ in range(config.decoder_layers))
        self.mask_embed = nn.Linear(d, c)
        self.class_embed = nn.Linear(d, config.num_classes + 1)

    @property
    def classifier_weight(self):
        """W, (K + 1) x d; row K is no-object."""
        return self.class_embed.weight

    def forward(self, images):
        cfg = self.config
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, cfg.height, cfg.width):
            raise SegmenterError(
                'Expected images of shape (B, 3, {}, {}), got {}.'.format(
                    cfg.height, cfg.width, tuple(images.shape)))
        b = images.shape[0]
        x = torch.cat([images, self.coords.expand(b, -1, -1, -1)], dim=1)
        feats = self.mask_features(self.backbone(x))
        memory = feats.flatten(2).transpose(1, 2)
        h = self.query_embed.weight.unsqueeze(0).expand(b, -1, -1)
        for layer in self.decoder:
            h = layer(h, memory)
        logits = self.class_embed(h)
        low = torch.einsum('bqc,bchw->bqhw', self.mask_embed(h), feats)
        mask_logits = F.interpolate(low, size=(cfg.height, cfg.width),
                                    mode='bilinear', align_corners=False)
        return ModelOutput(logits=logits, mask_logits=mask_logits,
                           features=feats, query_features=h,
                           mask_logits_lowres=low)


def build_model(config, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return QueryModel(config)


def images_to_tensor(images):
    """H x W x 3 float arrays -> B x 3 x H x W float32 tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def downsample_labels(semantic, factor):
    """Plurality class id per factor x factor block; ties go to the lowest id.
    """
    semantic = np.asarray(semantic, dtype=np.int64)
    hh, ww = semantic.shape
    if hh % factor or ww % factor:
        raise SegmenterError(
            'Label grid {} not divisible by {}.'.format(semantic.shape, factor))
    h, w = hh // factor, ww // factor
    blocks = semantic.reshape(h, factor, w, factor).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h, w, factor * factor)
    counts = (blocks[..., None] == np.arange(int(semantic.max()) + 1)).sum(axis=2)
    return counts.argmax(axis=-1)


def assign_min_cost(cost):
    """Minimum-cost one-to-one assignment of rows (queries) to columns (segments).
    """
    rows, cols = linear_sum_assignment(np.asarray(cost, dtype=np.float64))
    return rows.astype(np.int64), cols.astype(np.int64)


def _mask_costs(out_mask_logits, tgt_masks):
    """Pairwise sigmoid BCE and dice costs, Q x N."""
    hw = out_mask_logits.shape[1]
    pos = F.binary_cross_entropy_with_logits(
        out_mask_logits, torch.ones_like(out_mask_logits), reduction='none')
    neg = F.binary_cross_entropy_with_logits(
        out_mask_logits, torch.zeros_like(out_mask_logits), reduction='none')
    cost_bce = (pos @ tgt_masks.T + neg @ (1 - tgt_masks).T) / hw
    prob = out_mask_logits.sigmoid()
    numerator = 2 * prob @ tgt_masks.T
    denominator = prob.sum(-1)[:, None] + tgt_masks.sum(-1)[None, :]
    cost_dice = 1 - (numerator + 1) / (denominator + 1)
    return cost_bce, cost_dice


def hungarian_match(output, index, gt_segments, current, config):
    """Match the queries of image `index` to its ground-truth segments.

    Returns (query_indices, segment_indices); queries left out map to
    no-object.
    """
    current = set(current)
    n = len(gt_segments)
    q = output.logits.shape[1]
    if n > q:
        raise SegmenterError(
            '{} ground-truth segments but only {} queries.'.format(n, q))
    for s in gt_segments:
        if s.class_id not in current:
            raise SegmenterError(
                'Segment of class {} outside current classes {}.'.format(
                    s.class_id, sorted(current)))
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    return assign_min_cost(matching_cost(output, index, gt_segments, config))


def matching_cost(output, index, gt_segments, config):
    """Q x N matching cost of image `index`: weighted class, BCE and dice costs.
    """
    n = len(gt_segments)
    with torch.no_grad():
        prob = output.logits[index].softmax(-1)
        tgt_ids = torch.tensor([s.class_id - 1 for s in gt_segments], dtype=torch.long)
        cost_class = -prob[:, tgt_ids]
        out_masks = output.mask_logits[index].flatten(1)
        tgt_masks = torch.from_numpy(
            np.stack([s.mask for s in gt_segments]).reshape(n, -1)).to(out_masks.dtype)
        cost_bce, cost_dice = _mask_costs(out_masks, tgt_masks)
        cost = config.cost_class * cost_class + config.cost_mask * cost_bce + \
            config.cost_dice * cost_dice
    return cost.cpu().numpy()


def _dice_loss(mask_logits, targets, num_masks):
    prob = mask_logits.sigmoid().flatten(1)
    targets = targets.flatten(1)
    numerator = 2 * (prob * targets).sum(-1)
    denominator = prob.sum(-1) + targets.sum(-1)
    return (1 - (numerator + 1) / (denominator + 1)).sum() / num_masks


def check_finite(output):
    for name in ('logits', 'mask_logits'):
        t = getattr(output, name)
        if not torch.isfinite(t).all():
            raise SegmenterError('Non-finite values in model {}.'.format(name))


def panoptic_loss(output, annotations, current, config):
    """L_pan = l_cls * CE + l_mask * BCE + l_dice * Dice (Mask2Former weights).

    CE runs over every query against its matched class or no-object (class
    weight no_object_weight); BCE and Dice run over matched queries and are
    normalized by the number of ground-truth segments in the batch.
    """
    check_finite(output)
    logits = output.logits
    mask_logits = output.mask_logits
    b, q, k1 = logits.shape
    k = k1 - 1
    target_classes = torch.full((b, q), k, dtype=torch.long)
    src_masks = []
    tgt_masks = []
    for i, ann in enumerate(annotations):
        segs = segments_from_map(ann)
        qi, si = hungarian_match(output, i, segs, current, config)
        for qq, ss in zip(qi.tolist(), si.tolist()):
            target_classes[i, qq] = segs[ss].class_id - 1
            src_masks.append(mask_logits[i, qq])
            tgt_masks.append(torch.from_numpy(segs[ss].mask.astype(np.float64)))
    weight = torch.ones(k1, dtype=logits.dtype)
    weight[k] = config.no_object_weight
    loss = config.loss_class * F.cross_entropy(
        logits.transpose(1, 2), target_classes, weight=weight)
    if src_masks:
        src = torch.stack(src_masks)
        tgt = torch.stack(tgt_masks).to(src.dtype)
        num_masks = float(len(src_masks))
        loss_mask = F.binary_cross_entropy_with_logits(
            src.flatten(1), tgt.flatten(1), reduction='none').mean(1).sum() / num_masks
        loss = loss + config.loss_mask * loss_mask + \
            config.loss_dice * _dice_loss(src, tgt, num_masks)
    return loss


def panoptic_inference(output, index, label_space, score_threshold=0.5,
                       mask_threshold=0.5):
    """Turn the queries of image `index` into a PanopticMap.

    Queries with max class probability (no-object excluded) >= score_threshold
    are kept. A pixel goes to the kept query maximizing score x mask among
    those whose mask is >= mask_threshold there, and stays void otherwise.
    Thing queries get distinct instance ids; stuff queries of a class merge.
    """
    with torch.no_grad():
        prob = output.logits[index].softmax(-1)[:, :-1]
        scores, labels = prob.max(-1)
        masks = output.masks[index]
        keep = torch.nonzero(scores >= score_threshold).flatten()
        h, w = masks.shape[-2:]
        sem = np.zeros((h, w), dtype=np.int64)
        inst = np.zeros((h, w), dtype=np.int64)
        if keep.numel() == 0:
            return PanopticMap(sem, inst, label_space)
        m = masks[keep]
        weighted = scores[keep][:, None, None] * m
        weighted = torch.where(m >= mask_threshold, weighted,
                               torch.full_like(weighted, -math.inf))
        best, owner = weighted.max(0)
        valid = torch.isfinite(best).numpy()
        owner = owner.numpy()
    next_instance = {}
    for i, query in enumerate(keep.tolist()):
        pix = valid & (owner == i)
        if not pix.any():
            continue
        c = int(labels[query]) + 1
        sem[pix] = c
        if label_space.thing(c):
            next_instance[c] = next_instance.get(c, 0) + 1
            inst[pix] = next_instance[c]
    return PanopticMap(sem, inst, label_space)


def predict_maps(model, images, label_space, batch_size=16):
    """Panoptic inference over a list of H x W x 3 images."""
    cfg = model.config
    maps = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            out = model(images_to_tensor(images[start:start + batch_size]))
            for i in range(out.logits.shape[0]):
                maps.append(panoptic_inference(
                    out, i, label_space, cfg.score_threshold, cfg.mask_threshold))
    model.train(was_training)
    return maps


def make_optimizer(parameters, lr, weight_decay):
    """AdamW: adaptive moments with decoupled weight decay."""
    return torch.optim.AdamW(parameters, lr=lr, weight_decay=weight_decay)


def optimizer_state(optimizer):
    """Per-parameter moments, step counts, lr and weight decay."""
    return optimizer.state_dict()


def sgd_step(optimizer):
    """One optimizer update; fails loudly on a non-finite gradient.
    """
    for group in optimizer.param_groups:
        for p in group['params']:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise SegmenterError(
                    'Non-finite gradient in parameter of shape {}.'.format(
                        tuple(p.shape)))
    optimizer.step()


def train_step(model, optimizer, images, annotations, current):
    """Plain supervised step on L_pan. Returns the loss value.
    """
    optimizer.zero_grad(set_to_none=True)
    output = model(images)
    loss = panoptic_loss(output, annotations, current, model.config)
    loss.backward()
    sgd_step(optimizer)
    return float(loss.detach())


def save_checkpoint(uri, model, optimizer=None, step=0, schedule_position=0,
                    extra=None):
    """Versioned checkpoint: parameters, optimizer state, step index and
    schedule position.
    """
    payload = {
        'magic': CHECKPOINT_MAGIC,
        'version': CHECKPOINT_VERSION,
        'model_config': asdict(model.config),
        'model': model.state_dict(),
        'optimizer': None if optimizer is None else optimizer.state_dict(),
        'step': int(step),
        'schedule_position': int(schedule_position),
        'extra': extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    AutoURI(uri).write(buf.getvalue())


def load_checkpoint(uri):
    buf = io.BytesIO(AutoURI(uri).read(byte=True))
    payload = torch.load(buf, map_location='cpu', weights_only=True)
    if payload.get('magic') != CHECKPOINT_MAGIC:
        raise SegmenterError('{} is not a futcr-lab checkpoint.'.format(uri))
    if payload.get('version') != CHECKPOINT_VERSION:
        raise SegmenterError(
            'Unsupported checkpoint version {} in {}.'.format(
                payload.get('version'), uri))
    return payload


def model_from_checkpoint(payload):
    model = QueryModel(ModelConfig(**payload['model_config']))
    model.load_state_dict(payload['model'])
    return model


def void_fraction(panoptic_map):
    return float(np.mean(panoptic_map.semantic == VOID))
