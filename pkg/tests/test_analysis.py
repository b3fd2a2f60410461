import numpy as np
import pytest
import torch

from conftest import make_map
from futcr_lab.analysis import (
    AnalysisError, class_prototypes, class_prototypes_from_data,
    classifier_congruence, confusion_profile_from_maps, future_confusion_profile,
    prototype_congruence, stability_plasticity)
from futcr_lab.panoptic_core import LabelSpace, MetricReport
from futcr_lab.segmenter import ModelConfig, build_model


LS4 = LabelSpace(is_thing=(False,) * 4, names=('a', 'b', 'c', 'd'))


def test_confusion_profile_counts():
    # classes 3 and 4 are future; 6 future pixels in total
    gt = make_map([[3, 3, 3, 4, 4, 4, 1]], label_space=LS4)
    pred = make_map([[1, 1, 0, 3, 2, 0, 1]], label_space=LS4)
    p = confusion_profile_from_maps([pred], [gt], known={1, 2},
                                    all_classes=(1, 2, 3, 4), step=1)
    assert p.num_pixels == 6
    assert p.fraction_to_old == pytest.approx(3 / 6)
    assert p.fraction_to_background == pytest.approx(2 / 6)
    assert p.fraction_to_future == pytest.approx(1 / 6)
    total = p.fraction_to_old + p.fraction_to_background + p.fraction_to_future
    assert total == pytest.approx(1.0)
    assert p.to_dict()['step'] == 1


def test_confusion_profile_without_future_pixels():
    gt = make_map([[1, 2]], label_space=LS4)
    with pytest.raises(AnalysisError):
        confusion_profile_from_maps([gt], [gt], {1, 2}, (1, 2, 3, 4))


def test_future_confusion_profile_runs_the_model():
    cfg = ModelConfig(num_classes=4, height=8, width=8, num_queries=4, query_dim=8,
                      feature_channels=8, decoder_layers=1, num_heads=2)
    model = build_model(cfg, seed=0)
    gt = make_map(np.tile([1, 1, 2, 2, 3, 3, 4, 4], (8, 1)), label_space=LS4)
    img = np.random.default_rng(0).uniform(size=(8, 8, 3)).astype(np.float32)
    p = future_confusion_profile(model, [img], [gt], {1, 2}, (1, 2, 3, 4), LS4, step=1)
    assert p.num_pixels == 32
    total = p.fraction_to_old + p.fraction_to_background + p.fraction_to_future
    assert total == pytest.approx(1.0)


def test_class_prototypes():
    f = np.zeros((2, 2, 2))
    f[:, 0, 0] = (1.0, 0.0)
    f[:, 0, 1] = (3.0, 2.0)
    f[:, 1, 0] = (0.0, 5.0)
    labels = np.array([[1, 1], [2, 0]])
    protos, missing = class_prototypes([f, f], [labels, labels], (1, 2, 3))
    assert protos[1].tolist() == pytest.approx([2.0, 1.0])
    assert protos[2].tolist() == pytest.approx([0.0, 5.0])
    assert missing == (3,)


def test_class_prototypes_from_data():
    cfg = ModelConfig(num_classes=4, height=8, width=8, num_queries=4, query_dim=8,
                      feature_channels=8, decoder_layers=1, num_heads=2)
    model = build_model(cfg, seed=0)
    gt = make_map(np.tile([1, 1, 1, 1, 2, 2, 2, 2], (8, 1)), label_space=LS4)
    img = np.zeros((8, 8, 3), dtype=np.float32)
    protos, missing = class_prototypes_from_data(model, [img, img], [gt, gt], (1, 2, 3))
    assert set(protos) == {1, 2}
    assert missing == (3,)
    assert protos[1].shape == (8,)
    assert model.training


def test_prototype_congruence():
    p1 = {1: np.array([1.0, 0.0]), 2: np.array([0.0, 1.0]), 3: np.array([1.0, 1.0])}
    pt = {1: np.array([2.0, 0.0]), 2: np.array([1.0, 0.0]), 4: np.array([1.0, 1.0])}
    rec = prototype_congruence(pt, p1, step=2)
    assert rec.per_class == {1: pytest.approx(1.0), 2: pytest.approx(0.0)}
    assert rec.mean == pytest.approx(0.5)
    assert rec.flagged == ()
    assert rec.to_dict()['per_class'] == {'1': pytest.approx(1.0), '2': pytest.approx(0.0)}


def test_prototype_congruence_is_one_for_identical_sets():
    rng = np.random.default_rng(0)
    p = {c: rng.normal(size=4) for c in range(1, 6)}
    assert prototype_congruence(p, p).mean == pytest.approx(1.0)


def test_prototype_congruence_flags_zero_norm():
    p1 = {1: np.array([1.0, 0.0]), 2: np.array([0.0, 1.0])}
    pt = {1: np.array([0.0, 0.0]), 2: np.array([0.0, 3.0])}
    rec = prototype_congruence(pt, p1)
    assert rec.flagged == (1,)
    assert rec.per_class == {2: pytest.approx(1.0)}
    with pytest.raises(AnalysisError):
        prototype_congruence({1: np.ones(2)}, {2: np.ones(2)})


def test_classifier_congruence():
    w1 = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    wt = torch.tensor([[1.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
    rec = classifier_congruence(wt, w1, classes=(1, 2))
    assert rec.per_class[1] == pytest.approx(1.0)
    assert rec.per_class[2] == pytest.approx(0.0)


def test_stability_plasticity():
    history = {1: MetricReport(pq_base=0.8, pq_new=None),
               2: MetricReport(pq_base=0.6, pq_new=0.3),
               3: MetricReport(pq_base=0.4, pq_new=0.2)}
    points = stability_plasticity(history)
    assert [p.step for p in points] == [2, 3]
    assert points[0].retention == pytest.approx(0.75)
    assert points[1].retention == pytest.approx(0.5)
    assert points[1].pq_new == 0.2


def test_stability_plasticity_zero_base():
    history = {1: MetricReport(pq_base=0.0), 2: MetricReport(pq_base=0.3)}
    assert stability_plasticity(history)[0].retention == 0.0
    with pytest.raises(AnalysisError):
        stability_plasticity({1: MetricReport(), 3: MetricReport()})
