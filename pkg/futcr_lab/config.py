#!/usr/bin/env python3
"""Experiment configuration.

A YAML file holds either nested sections or flat dotted keys
(`futcr.tau_mask: 0.5`); both load into the same ExperimentConfig tree.
Unknown keys are errors.
"""

import copy
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field

import yaml
from autouri import AutoURI

from .futcr import AuxConfig, FutcrConfig, FutcrError
from .segmenter import ModelConfig, SegmenterError
from .stream_builder import StreamConfig, StreamError


logger = logging.getLogger(__name__)

VARIANTS = ('baseline', 'rc', 'kfr', 'full', 'full_aux')
ABLATION_VARIANTS = ('baseline', 'rc', 'kfr', 'full')


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    n_thing_classes: int = 5
    n_stuff_classes: int = 3
    height: int = 64
    width: int = 64
    n_images: int = 240
    min_things: int = 1
    max_things: int = 6
    max_stuff_regions: int = 2
    min_visible_pixels: int = 20
    size_range: tuple = (10, 22)
    texture_noise: float = 0.02
    color_margin: float = 0.15
    min_images_per_class: int = 8
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    seed: int = 0

    @property
    def num_classes(self):
        return self.n_thing_classes + self.n_stuff_classes


@dataclass(frozen=True)
class ScheduleConfig:
    base_count: int = 6
    increment_size: int = 1
    class_order_seed: int = None


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 5e-5
    weight_decay: float = 0.05
    batch_size: int = 8
    base_iterations: int = 500
    increment_iterations: int = 200
    log_every: int = 50
    seed: int = 0


@dataclass(frozen=True)
class VariantConfig:
    region_contrast: bool = True
    known_repulsion: bool = True
    aux_clustering: bool = False


@dataclass(frozen=True)
class EvalConfig:
    diagnostics_split: str = 'val'
    batch_size: int = 16


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = 'futcr'
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    futcr: FutcrConfig = field(default_factory=FutcrConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def effective_futcr(self):
        """FutcrConfig with the variant switches applied."""
        v = self.variant
        aux = dataclasses.replace(self.futcr.aux, enabled=v.aux_clustering)
        return dataclasses.replace(
            self.futcr,
            lambda_reg=self.futcr.lambda_reg if v.region_contrast else 0.0,
            lambda_rep=self.futcr.lambda_rep if v.known_repulsion else 0.0,
            aux=aux)


_SECTIONS = {
    'dataset': DatasetConfig,
    'schedule': ScheduleConfig,
    'stream': StreamConfig,
    'model': ModelConfig,
    'optimizer': OptimizerConfig,
    'futcr': FutcrConfig,
    'variant': VariantConfig,
    'eval': EvalConfig,
}
_CANVAS_KEYS = ('num_classes', 'height', 'width')


def variant_switches(variant):
    """VariantConfig for a named variant."""
    table = {
        'baseline': VariantConfig(False, False, False),
        'rc': VariantConfig(True, False, False),
        'kfr': VariantConfig(False, True, False),
        'full': VariantConfig(True, True, False),
        'full_aux': VariantConfig(True, True, True),
    }
    if variant not in table:
        raise ConfigError('Unknown variant {}. Choose from {}.'.format(variant, VARIANTS))
    return table[variant]


def _unflatten(d):
    """Expand dotted keys into nested dicts; nested input passes through."""
    out = {}
    for key, value in d.items():
        parts = str(key).split('.')
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError('Key {} clashes with a scalar value.'.format(key))
        if isinstance(value, dict):
            value = _unflatten(value)
            existing = node.get(parts[-1], {})
            if not isinstance(existing, dict):
                raise ConfigError('Key {} clashes with a scalar value.'.format(key))
            existing.update(value)
            value = existing
        node[parts[-1]] = value
    return out


def _build(cls, d, where):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError('Section {} must be a mapping.'.format(where))
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise ConfigError('Unknown keys in {}: {}.'.format(where, unknown))
    kwargs = {}
    for key, value in d.items():
        if cls is FutcrConfig and key == 'aux':
            value = _build(AuxConfig, value, where + '.aux')
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (FutcrError, SegmenterError, StreamError) as e:
        raise ConfigError('Invalid {}: {}'.format(where, e))
    except TypeError as e:
        raise ConfigError('Invalid {}: {}'.format(where, e))


def config_from_dict(d):
    d = _unflatten(copy.deepcopy(d or {}))
    unknown = sorted(set(d) - set(_SECTIONS) - {'name'})
    if unknown:
        raise ConfigError('Unknown top-level keys: {}.'.format(unknown))
    dataset = _build(DatasetConfig, d.get('dataset'), 'dataset')
    model_d = dict(d.get('model') or {})
    # the model canvas follows the dataset unless given explicitly
    model_d.setdefault('num_classes', dataset.num_classes)
    model_d.setdefault('height', dataset.height)
    model_d.setdefault('width', dataset.width)
    sections = {'dataset': dataset, 'model': _build(ModelConfig, model_d, 'model')}
    for name, cls in _SECTIONS.items():
        if name not in sections:
            sections[name] = _build(cls, d.get(name), name)
    cfg = ExperimentConfig(name=str(d.get('name', 'futcr')), **sections)
    validate_config(cfg)
    return cfg


def config_to_dict(cfg):
    d = dataclasses.asdict(cfg)

    def lists(x):
        if isinstance(x, dict):
            return {k: lists(v) for k, v in x.items()}
        if isinstance(x, tuple):
            return [lists(v) for v in x]
        return x
    return lists(d)


def load_config(uri):
    text = AutoURI(uri).read()
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError('Cannot parse config {}: {}'.format(uri, e))
    if d is not None and not isinstance(d, dict):
        raise ConfigError('Config {} must be a mapping.'.format(uri))
    return config_from_dict(d)


def dump_config(cfg):
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True,
                          default_flow_style=False)


def save_config(uri, cfg):
    AutoURI(uri).write(dump_config(cfg))


def apply_overrides(cfg, overrides):
    """New config with {'section.key': value} overrides applied."""
    d = config_to_dict(cfg)
    for key, value in overrides.items():
        parts = key.split('.')
        node = d
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError('Unknown config key {}.'.format(key))
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError('Unknown config key {}.'.format(key))
        node[parts[-1]] = value
    return config_from_dict(d)


def config_hash(cfg):
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def validate_config(cfg):
    """Cross-section checks; section-local checks run in each dataclass."""
    ds = cfg.dataset
    if ds.n_thing_classes < 0 or ds.n_stuff_classes < 1:
        raise ConfigError('dataset needs >= 1 stuff class and >= 0 thing classes.')
    if ds.n_images < 1:
        raise ConfigError('dataset.n_images must be >= 1.')
    if ds.val_fraction < 0 or ds.test_fraction < 0 or \
            ds.val_fraction + ds.test_fraction >= 1:
        raise ConfigError('dataset val/test fractions must be >= 0 and sum below 1.')
    m = cfg.model
    for key in _CANVAS_KEYS:
        want = ds.num_classes if key == 'num_classes' else getattr(ds, key)
        if getattr(m, key) != want:
            raise ConfigError('model.{} = {} does not match the dataset ({}).'.format(
                key, getattr(m, key), want))
    if m.query_dim != m.feature_channels:
        raise ConfigError('model.query_dim must equal model.feature_channels '
                          '(classifier rows are compared with F features).')
    if m.num_queries < ds.max_things + ds.max_stuff_regions:
        raise ConfigError('model.num_queries={} is below the maximum segments per '
                          'image ({}).'.format(m.num_queries,
                                              ds.max_things + ds.max_stuff_regions))
    sc = cfg.schedule
    if not 0 < sc.base_count <= ds.num_classes:
        raise ConfigError('schedule.base_count must be in 1..{}.'.format(
            ds.num_classes))
    if sc.increment_size < 1:
        raise ConfigError('schedule.increment_size must be >= 1.')
    o = cfg.optimizer
    if o.lr <= 0 or o.weight_decay < 0:
        raise ConfigError('optimizer.lr must be > 0 and weight_decay >= 0.')
    if o.batch_size < 1 or o.base_iterations < 1 or o.increment_iterations < 1:
        raise ConfigError('optimizer batch size and iterations must be >= 1.')
    if o.log_every < 1:
        raise ConfigError('optimizer.log_every must be >= 1.')
    if cfg.eval.diagnostics_split not in ('val', 'test', 'train'):
        raise ConfigError('eval.diagnostics_split must be val, test or train.')
    if cfg.eval.batch_size < 1:
        raise ConfigError('eval.batch_size must be >= 1.')
    if cfg.variant.aux_clustering and cfg.futcr.aux.k_aux < 2:
        raise ConfigError('futcr.aux.k_aux must be >= 2 when aux clustering is on.')
    return cfg
