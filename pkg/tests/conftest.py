import os

import numpy as np
import pytest
import torch

from futcr_lab.config import config_from_dict
from futcr_lab.panoptic_core import LabelSpace, PanopticMap


def pytest_collection_modifyitems(config, items):
    if os.environ.get('FUTCR_LAB_SLOW') == '1':
        return
    skip = pytest.mark.skip(reason='set FUTCR_LAB_SLOW=1 to run slow tests')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def label_space():
    """Classes 1, 2 are things; 3, 4, 5 are stuff."""
    return LabelSpace(is_thing=(True, True, False, False, False),
                      names=('t1', 't2', 's3', 's4', 's5'))


def make_map(semantic, instance=None, label_space=None):
    semantic = np.asarray(semantic, dtype=np.int64)
    if instance is None:
        instance = np.zeros_like(semantic)
    return PanopticMap(semantic, np.asarray(instance, dtype=np.int64), label_space)


TINY_CONFIG = {
    'name': 'tiny',
    'dataset': {
        'n_thing_classes': 2, 'n_stuff_classes': 2, 'height': 16, 'width': 16,
        'n_images': 40, 'min_things': 1, 'max_things': 2, 'max_stuff_regions': 2,
        'min_visible_pixels': 6, 'size_range': [5, 8], 'min_images_per_class': 6,
        'seed': 3,
    },
    'schedule': {'base_count': 2, 'increment_size': 1},
    'model': {'num_queries': 8, 'query_dim': 16, 'feature_channels': 16,
              'decoder_layers': 1, 'num_heads': 2},
    'optimizer': {'lr': 1e-3, 'batch_size': 4, 'base_iterations': 3,
                  'increment_iterations': 2, 'log_every': 1, 'seed': 5},
    'futcr.pixels_per_region': 8,
    'futcr.min_region_pixels': 2,
    'futcr.unlabeled_sample_count': 16,
    'eval': {'batch_size': 8},
}


@pytest.fixture
def tiny_config():
    return config_from_dict(TINY_CONFIG)


def finite_difference_agreement(fn, inputs, h=1e-4, rtol=1e-4, atol=1e-8):
    """Fraction of input coordinates whose autograd gradient agrees with a
    central difference of fn in float64.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    grads = torch.autograd.grad(fn(*inputs), inputs, allow_unused=True)
    total = 0
    good = 0
    for k, (x, g) in enumerate(zip(inputs, grads)):
        g = torch.zeros_like(x) if g is None else g.detach()
        for i in range(x.numel()):
            plus = [y.detach().clone() for y in inputs]
            minus = [y.detach().clone() for y in inputs]
            plus[k].view(-1)[i] += h
            minus[k].view(-1)[i] -= h
            with torch.no_grad():
                num = (float(fn(*plus)) - float(fn(*minus))) / (2 * h)
            ana = float(g.reshape(-1)[i])
            total += 1
            if abs(num - ana) <= rtol * max(abs(num), abs(ana)) + atol:
                good += 1
    return good / total
