import itertools

import numpy as np
import pytest
import torch

from conftest import finite_difference_agreement, make_map
from futcr_lab.panoptic_core import LabelSpace, segments_from_map
from futcr_lab.segmenter import (
    ModelConfig, ModelOutput, SegmenterError, assign_min_cost, build_model,
    downsample_labels, hungarian_match, images_to_tensor, load_checkpoint,
    make_optimizer, matching_cost, model_from_checkpoint, panoptic_inference, panoptic_loss,
    predict_maps, save_checkpoint, sgd_step, train_step, void_fraction)


LS3 = LabelSpace(is_thing=(True, False, False), names=('obj', 'sky', 'grass'))


def small_config(**kwargs):
    args = dict(num_classes=3, height=8, width=8, num_queries=4, query_dim=8,
                feature_channels=8, decoder_layers=1, num_heads=2)
    args.update(kwargs)
    return ModelConfig(**args)


def scene_map(size=8):
    half = size // 2
    sem = np.zeros((size, size), dtype=np.int64)
    inst = np.zeros((size, size), dtype=np.int64)
    sem[:half] = 2
    sem[half:, :half] = 1
    inst[half:, :half] = 1
    sem[half:, half:] = 3
    return make_map(sem, inst, LS3)


def scene_image(size=8):
    sem = scene_map(size).semantic
    colors = {1: (0.9, 0.1, 0.1), 2: (0.1, 0.1, 0.9), 3: (0.1, 0.8, 0.1)}
    img = np.zeros((size, size, 3), dtype=np.float32)
    for c, rgb in colors.items():
        img[sem == c] = rgb
    return img


def test_model_config_validation():
    with pytest.raises(SegmenterError):
        small_config(height=10)
    with pytest.raises(SegmenterError):
        small_config(query_dim=9)
    with pytest.raises(SegmenterError):
        small_config(prototype_resolution='full')


def test_forward_shapes():
    cfg = small_config()
    model = build_model(cfg, seed=0)
    out = model(images_to_tensor([scene_image(), scene_image()]))
    assert out.logits.shape == (2, 4, 4)
    assert out.mask_logits.shape == (2, 4, 8, 8)
    assert out.features.shape == (2, 8, 2, 2)
    assert out.query_features.shape == (2, 4, 8)
    assert out.feature_masks(4).shape == (2, 4, 2, 2)
    assert out.feature_masks(4, 'lowres').shape == (2, 4, 2, 2)
    assert out.num_classes == 3
    assert model.classifier_weight.shape == (4, 8)
    with pytest.raises(SegmenterError):
        model(torch.zeros(1, 3, 4, 4))


def test_build_model_is_seeded():
    cfg = small_config()
    a = build_model(cfg, seed=3)
    b = build_model(cfg, seed=3)
    c = build_model(cfg, seed=4)
    for (_, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb)
    assert not torch.equal(a.class_embed.weight, c.class_embed.weight)


def test_downsample_labels_plurality():
    sem = np.array([[1, 1, 2, 2],
                    [1, 0, 2, 0],
                    [3, 3, 1, 2],
                    [3, 0, 2, 1]])
    assert downsample_labels(sem, 2).tolist() == [[1, 2], [3, 1]]
    with pytest.raises(SegmenterError):
        downsample_labels(sem, 3)


def _brute_force_cost(cost):
    q, n = cost.shape
    return min(sum(cost[p[j], j] for j in range(n))
               for p in itertools.permutations(range(q), n))


def test_assignment_equals_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 6))
        q = int(rng.integers(n, 7))
        cost = rng.normal(size=(q, n))
        rows, cols = assign_min_cost(cost)
        assert len(set(rows.tolist())) == n
        assert sorted(cols.tolist()) == list(range(n))
        assert cost[rows, cols].sum() == pytest.approx(_brute_force_cost(cost))


def _perfect_output(segments, q=4, k=3, size=8, magnitude=8.0):
    logits = torch.full((1, q, k + 1), -magnitude)
    logits[0, :, k] = magnitude
    mask_logits = torch.full((1, q, size, size), -magnitude)
    for i, s in enumerate(segments):
        slot = q - 1 - i
        logits[0, slot, s.class_id - 1] = magnitude
        logits[0, slot, k] = -magnitude
        mask_logits[0, slot][torch.from_numpy(s.mask)] = magnitude
    return ModelOutput(logits=logits, mask_logits=mask_logits)


def test_hungarian_match_finds_perfect_queries():
    segs = segments_from_map(scene_map())
    out = _perfect_output(segs)
    qi, si = hungarian_match(out, 0, segs, {1, 2, 3}, small_config())
    assert dict(zip(si.tolist(), qi.tolist())) == {0: 3, 1: 2, 2: 1}


def test_hungarian_match_errors():
    segs = segments_from_map(scene_map())
    out = _perfect_output(segs)
    with pytest.raises(SegmenterError):
        hungarian_match(out, 0, segs, {1, 2}, small_config())
    narrow = ModelOutput(logits=out.logits[:, :2], mask_logits=out.mask_logits[:, :2])
    with pytest.raises(SegmenterError):
        hungarian_match(narrow, 0, segs, {1, 2, 3}, small_config())
    qi, si = hungarian_match(out, 0, [], {1, 2, 3}, small_config())
    assert len(qi) == 0 and len(si) == 0


def _reference_cost(output, index, segments, config):
    """Matching cost written out pixel by pixel in numpy."""
    logits = output.logits[index].detach().double().numpy()
    prob = np.exp(logits - logits.max(axis=1, keepdims=True))
    prob /= prob.sum(axis=1, keepdims=True)
    x = output.mask_logits[index].detach().double().numpy().reshape(len(logits), -1)
    p = 1 / (1 + np.exp(-x))
    cost = np.zeros((len(logits), len(segments)))
    for j, s in enumerate(segments):
        t = s.mask.reshape(-1).astype(np.float64)
        bce = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean(axis=1)
        dice = 1 - (2 * (p * t).sum(axis=1) + 1) / (p.sum(axis=1) + t.sum() + 1)
        cost[:, j] = (-config.cost_class * prob[:, s.class_id - 1] +
                      config.cost_mask * bce + config.cost_dice * dice)
    return cost


@pytest.mark.parametrize('seed', range(20))
def test_hungarian_match_on_model_output_is_optimal(seed):
    cfg = small_config()
    model = build_model(cfg, seed=seed)
    images = [scene_image(), np.ascontiguousarray(scene_image()[:, ::-1])]
    with torch.no_grad():
        out = model(images_to_tensor(images))
    m = scene_map()
    annotations = [m, make_map(np.ascontiguousarray(m.semantic[:, ::-1]),
                               np.ascontiguousarray(m.instance[:, ::-1]), LS3)]
    for index, ann in enumerate(annotations):
        segs = segments_from_map(ann)
        qi, si = hungarian_match(out, index, segs, {1, 2, 3}, cfg)
        assert sorted(si.tolist()) == list(range(len(segs)))
        assert len(set(qi.tolist())) == len(segs)
        cost = _reference_cost(out, index, segs, cfg)
        assert matching_cost(out, index, segs, cfg) == pytest.approx(cost, rel=1e-4,
                                                                     abs=1e-5)
        assert cost[qi, si].sum() == pytest.approx(_brute_force_cost(cost), abs=1e-5)


@pytest.mark.parametrize('seed', range(20))
def test_panoptic_loss_gradient_matches_finite_differences(seed):
    cfg = small_config(height=4, width=4)
    ann = scene_map(4)
    gen = torch.Generator().manual_seed(seed)
    scale = 0.5 + seed % 4
    logits = scale * torch.randn(1, 4, 4, generator=gen, dtype=torch.float64)
    mask_logits = scale * torch.randn(1, 4, 4, 4, generator=gen, dtype=torch.float64)

    def loss(lg, ml):
        return panoptic_loss(ModelOutput(logits=lg, mask_logits=ml), [ann],
                             {1, 2, 3}, cfg)

    assert finite_difference_agreement(loss, [logits, mask_logits]) >= 0.95


def test_panoptic_loss_is_small_for_perfect_output():
    segs = segments_from_map(scene_map())
    perfect = panoptic_loss(_perfect_output(segs), [scene_map()], {1, 2, 3},
                            small_config())
    gen = torch.Generator().manual_seed(1)
    noisy = ModelOutput(logits=torch.randn(1, 4, 4, generator=gen),
                        mask_logits=torch.randn(1, 4, 8, 8, generator=gen))
    assert float(perfect) < 0.1
    assert float(perfect) < float(panoptic_loss(noisy, [scene_map()], {1, 2, 3},
                                                small_config()))


def test_panoptic_loss_vanishes_for_saturated_output():
    segs = segments_from_map(scene_map())
    out = _perfect_output(segs, magnitude=30.0)
    assert float(panoptic_loss(out, [scene_map()], {1, 2, 3}, small_config())) < 1e-3


def test_panoptic_loss_all_void_annotation():
    empty = make_map(np.zeros((8, 8)), label_space=LS3)
    out = _perfect_output([])
    # only the no-object CE term remains, and every query predicts no-object
    assert float(panoptic_loss(out, [empty], {1, 2, 3}, small_config())) < 1e-3


def test_panoptic_loss_rejects_non_finite():
    out = _perfect_output([])
    out.logits[0, 0, 0] = float('nan')
    with pytest.raises(SegmenterError):
        panoptic_loss(out, [make_map(np.zeros((8, 8)), label_space=LS3)],
                      {1, 2, 3}, small_config())


def test_inference_thing_and_stuff():
    segs = segments_from_map(scene_map())
    m = panoptic_inference(_perfect_output(segs), 0, LS3)
    assert m.equals(scene_map())
    m.validate()


def test_inference_nothing_kept_is_void():
    m = panoptic_inference(_perfect_output([]), 0, LS3)
    assert void_fraction(m) == 1.0


def test_inference_two_instances_of_one_class():
    sem = np.zeros((8, 8), dtype=np.int64)
    inst = np.zeros((8, 8), dtype=np.int64)
    sem[:, :3] = 1
    inst[:, :3] = 1
    sem[:, 5:] = 1
    inst[:, 5:] = 2
    gt = make_map(sem, inst, LS3)
    m = panoptic_inference(_perfect_output(segments_from_map(gt)), 0, LS3)
    assert sorted(np.unique(m.instance).tolist()) == [0, 1, 2]
    assert np.array_equal(m.semantic, sem)


def test_inference_below_mask_threshold_stays_void():
    segs = segments_from_map(scene_map())
    out = _perfect_output(segs)
    m = panoptic_inference(out, 0, LS3, mask_threshold=0.99999)
    assert void_fraction(m) == 1.0


def test_predict_maps():
    cfg = small_config()
    model = build_model(cfg, seed=0)
    maps = predict_maps(model, [scene_image()] * 3, LS3, batch_size=2)
    assert len(maps) == 3
    for m in maps:
        assert m.shape == (8, 8)
        m.validate()
    assert model.training


def test_sgd_step_adamw_first_update():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    opt = make_optimizer([p], lr=0.1, weight_decay=0.0)
    p.grad = torch.tensor([0.5, -0.25])
    sgd_step(opt)
    assert p.detach().tolist() == pytest.approx([0.9, -1.9], abs=1e-5)


def test_sgd_step_weight_decay():
    p = torch.nn.Parameter(torch.tensor([2.0]))
    opt = make_optimizer([p], lr=0.1, weight_decay=0.5)
    p.grad = torch.tensor([1.0])
    sgd_step(opt)
    # decoupled decay: 2 * (1 - 0.05) - 0.1
    assert p.item() == pytest.approx(1.8, abs=1e-5)


def test_sgd_step_rejects_non_finite_gradient():
    p = torch.nn.Parameter(torch.tensor([1.0]))
    opt = make_optimizer([p], lr=0.1, weight_decay=0.0)
    p.grad = torch.tensor([float('inf')])
    with pytest.raises(SegmenterError):
        sgd_step(opt)
    assert p.item() == 1.0


def test_sgd_step_zero_gradient_keeps_parameters():
    p = torch.nn.Parameter(torch.tensor([1.5, -0.5, 0.0], dtype=torch.float64))
    opt = make_optimizer([p], lr=0.1, weight_decay=0.0)
    for _ in range(5):
        p.grad = torch.zeros_like(p)
        sgd_step(opt)
    assert p.detach().tolist() == [1.5, -0.5, 0.0]


def test_sgd_step_constant_gradient_moves_by_learning_rate():
    p = torch.nn.Parameter(torch.tensor([0.0, 0.0], dtype=torch.float64))
    opt = make_optimizer([p], lr=0.01, weight_decay=0.0)
    g = torch.tensor([0.3, -4.0], dtype=torch.float64)
    for _ in range(200):
        before = p.detach().clone()
        p.grad = g.clone()
        sgd_step(opt)
    step = (p.detach() - before).tolist()
    assert step == [pytest.approx(-0.01, rel=1e-4), pytest.approx(0.01, rel=1e-4)]


def test_sgd_step_converges_on_quadratic():
    p = torch.nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
    opt = make_optimizer([p], lr=1e-2, weight_decay=0.0)
    for _ in range(2000):
        opt.zero_grad()
        ((p - 3.0) ** 2).sum().backward()
        sgd_step(opt)
    assert p.item() == pytest.approx(3.0, abs=1e-3)


def test_train_step_reduces_loss():
    cfg = small_config()
    model = build_model(cfg, seed=0)
    opt = make_optimizer(model.parameters(), lr=5e-3, weight_decay=0.0)
    images = images_to_tensor([scene_image()])
    losses = [train_step(model, opt, images, [scene_map()], {1, 2, 3})
              for _ in range(40)]
    assert all(np.isfinite(losses))
    assert losses[-1] < losses[0]


def _toy_set(size=16):
    """Ten block-aligned layouts of the three-region scene."""
    colors = {1: (0.9, 0.1, 0.1), 2: (0.1, 0.1, 0.9), 3: (0.1, 0.8, 0.1)}
    base = scene_map(size)
    images, maps = [], []
    for k in range(10):
        sem = np.rot90(base.semantic, k % 4)
        inst = np.rot90(base.instance, k % 4)
        if k >= 4:
            sem, inst = sem[:, ::-1], inst[:, ::-1]
        if k >= 8:
            sem = np.where(sem == 2, 3, np.where(sem == 3, 2, sem))
        sem, inst = np.ascontiguousarray(sem), np.ascontiguousarray(inst)
        img = np.zeros((size, size, 3), dtype=np.float32)
        for c, rgb in colors.items():
            img[sem == c] = rgb
        images.append(img)
        maps.append(make_map(sem, inst, LS3))
    return images_to_tensor(images), maps


@pytest.mark.slow
def test_train_step_fits_fixed_toy_set():
    cfg = small_config(height=16, width=16, query_dim=16, feature_channels=16)
    model = build_model(cfg, seed=0)
    opt = make_optimizer(model.parameters(), lr=5e-3, weight_decay=0.0)
    images, maps = _toy_set()
    losses = [train_step(model, opt, images, maps, {1, 2, 3}) for _ in range(500)]
    assert all(np.isfinite(losses))
    assert losses[-1] <= 0.2 * losses[0]


def test_checkpoint_roundtrip(tmp_path):
    cfg = small_config()
    model = build_model(cfg, seed=0)
    opt = make_optimizer(model.parameters(), lr=1e-3, weight_decay=0.05)
    train_step(model, opt, images_to_tensor([scene_image()]), [scene_map()], {1, 2, 3})
    uri = str(tmp_path / 'ckpt.pt')
    save_checkpoint(uri, model, opt, step=2, schedule_position=2,
                    extra={'config_hash': 'abc'})
    payload = load_checkpoint(uri)
    assert payload['step'] == 2
    assert payload['schedule_position'] == 2
    assert payload['extra'] == {'config_hash': 'abc'}
    restored = model_from_checkpoint(payload)
    assert restored.config == cfg
    images = images_to_tensor([scene_image()])
    model.eval()
    restored.eval()
    with torch.no_grad():
        assert torch.equal(model(images).mask_logits, restored(images).mask_logits)
    opt2 = make_optimizer(restored.parameters(), lr=1e-3, weight_decay=0.05)
    opt2.load_state_dict(payload['optimizer'])
    assert opt2.state_dict()['state'][0]['step'] == opt.state_dict()['state'][0]['step']


def test_load_checkpoint_rejects_foreign_file(tmp_path):
    uri = tmp_path / 'other.pt'
    torch.save({'magic': 'something else'}, str(uri))
    with pytest.raises(SegmenterError):
        load_checkpoint(str(uri))
