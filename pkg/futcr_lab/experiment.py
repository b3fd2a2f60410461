#!/usr/bin/env python3
"""ContinualExperiment: runs the class-incremental protocol end to end.

Step 1 trains on D_1 with C^1; every later step starts from the previous
step's weights and trains on D_t with supervision masked to C^t. After each
step the model is evaluated on C^{<=t} and diagnostics are recorded. A step
is complete once steps/step_XX.json exists, so a killed run resumes from
the last completed step.
"""

import dataclasses
import json
import logging
import os
import time
from collections import namedtuple

import numpy as np
import torch
from autouri import AutoURI

from .analysis import (
    AnalysisError, class_prototypes_from_data, classifier_congruence,
    confusion_profile_from_maps, prototype_congruence)
from .config import (
    ABLATION_VARIANTS, config_hash, config_to_dict, save_config,
    validate_config, variant_switches)
from .futcr import AuxClusterHead, FutcrState, futcr_train_step
from .panoptic_core import evaluate_maps
from .report import (
    RunRecord, ablation_columns, ablation_rows, sweep_rows, trajectory_of,
    write_json, write_run_outputs, SWEEP_COLUMNS, write_csv)
from .segmenter import (
    build_model, images_to_tensor, load_checkpoint, make_optimizer,
    predict_maps, save_checkpoint)
from .stream_builder import (
    assign_images, build_schedule, holdout_rule, mask_labels, split_holdout,
    stream_manifest)
from .synthetic_scenes import generate_dataset, make_scene_spec


logger = logging.getLogger(__name__)

ExperimentData = namedtuple(
    'ExperimentData', ('spec', 'schedule', 'train', 'val', 'test', 'streams'))


class ExperimentError(ValueError):
    pass


def _seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def build_data(cfg):
    """Scenes, holdout split, class schedule and per-step streams."""
    ds = cfg.dataset
    spec = make_scene_spec(
        n_thing_classes=ds.n_thing_classes, n_stuff_classes=ds.n_stuff_classes,
        height=ds.height, width=ds.width, max_things=ds.max_things,
        min_things=ds.min_things, max_stuff_regions=ds.max_stuff_regions,
        min_visible_pixels=ds.min_visible_pixels, size_range=ds.size_range,
        texture_noise=ds.texture_noise, color_margin=ds.color_margin, seed=ds.seed)
    plan = {c: ds.min_images_per_class for c in spec.label_space.class_ids}
    samples = generate_dataset(spec, ds.n_images, ds.seed, plan)
    train, val, test = split_holdout(samples, ds.val_fraction, ds.test_fraction,
                                     ds.seed)
    sc = cfg.schedule
    schedule = build_schedule(ds.num_classes, sc.base_count, sc.increment_size,
                              sc.class_order_seed)
    streams = assign_images(train, schedule, cfg.stream)
    return ExperimentData(spec, schedule, train, val, test, streams)


class ContinualExperiment(object):
    """One continual run writing into out_dir.

    Layout:
        config.yaml, manifest.json
        checkpoints/step_XX.pt
        steps/step_XX.json          evaluation and diagnostics of a step
        steps/step_XX.log.jsonl     per-iteration StepRecords of a step
        train_log.jsonl, metrics.csv, metrics.json, diagnostics.csv,
        run_record.json
    """
    CONFIG_YAML = 'config.yaml'
    MANIFEST_JSON = 'manifest.json'
    CHECKPOINT = 'checkpoints/step_{step:02d}.pt'
    STEP_JSON = RunRecord.STEP_JSON
    STEP_LOG = 'steps/step_{step:02d}.log.jsonl'
    TRAIN_LOG = 'train_log.jsonl'

    def __init__(self, config, out_dir, resume=False, variant_name=None):
        self._cfg = validate_config(config)
        self._out_dir = out_dir
        self._resume = resume
        self._hash = config_hash(config)
        self._futcr_cfg = config.effective_futcr()
        self._variant_name = variant_name or self.__infer_variant_name()
        self._data = None

    @property
    def config_hash(self):
        return self._hash

    def _uri(self, name, **kwargs):
        return os.path.join(self._out_dir, name.format(**kwargs))

    def __infer_variant_name(self):
        v = self._cfg.variant
        for name in ('baseline', 'rc', 'kfr', 'full', 'full_aux'):
            if variant_switches(name) == v:
                return name
        return 'custom'

    def run(self):
        start = time.time()
        cfg = self._cfg
        self._data = build_data(cfg)
        done = self.__prepare_out_dir()
        schedule = self._data.schedule

        model = build_model(cfg.model, cfg.optimizer.seed)
        aux_head = None
        if self._futcr_cfg.aux.enabled:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(_seed(cfg.optimizer.seed, 17))
                aux_head = AuxClusterHead(cfg.model.feature_channels,
                                          self._futcr_cfg.aux.hidden,
                                          self._futcr_cfg.aux.k_aux)
        state = FutcrState(self._futcr_cfg.aux)
        if done:
            self.__restore(done, model, aux_head, state)

        for t in range(done + 1, schedule.num_steps + 1):
            sd = self._data.streams[t - 1]
            logger.info('Step %d/%d: %d images, current classes %s, known %s.',
                        t, schedule.num_steps, len(sd), list(sd.current_classes),
                        list(sd.known_classes))
            optimizer, records = self.__train(t, sd, model, aux_head, state)
            AutoURI(self._uri(self.STEP_LOG, step=t)).write(
                ''.join(json.dumps(r.to_dict(), sort_keys=True) + '\n' for r in records))
            save_checkpoint(
                self._uri(self.CHECKPOINT, step=t), model, optimizer, step=t,
                schedule_position=t,
                extra={'config_hash': self._hash,
                       'futcr_state': state.state_dict(),
                       'aux_head': None if aux_head is None else aux_head.state_dict()})
            step = self.__evaluate(t, sd, model)
            step['train_summary'] = summarize(records)
            write_json(self._uri(self.STEP_JSON, step=t), step)
            logger.info('Step %d done: val PQ_all=%s PQ_base=%s PQ_new=%s.', t,
                        step['val']['pq_all'], step['val']['pq_base'],
                        step['val']['pq_new'])

        record = self.__collect()
        record.wall_clock = time.time() - start
        write_run_outputs(self._out_dir, record)
        return record

    def __prepare_out_dir(self):
        """Writes config and manifest; returns the last completed step to
        resume after (0 for a fresh run).
        """
        manifest_uri = self._uri(self.MANIFEST_JSON)
        done = 0
        if AutoURI(manifest_uri).exists:
            stored = json.loads(AutoURI(manifest_uri).read())
            if self._resume:
                if stored.get('config_hash') != self._hash:
                    raise ExperimentError(
                        'Refusing to resume {}: config hash {} differs from the '
                        'stored {}.'.format(self._out_dir, self._hash,
                                            stored.get('config_hash')))
                done = self.__completed_steps()
                logger.warning('Resuming %s after step %d.', self._out_dir, done)
            else:
                logger.warning('Starting over in existing run directory %s.',
                               self._out_dir)
        save_config(self._uri(self.CONFIG_YAML), self._cfg)
        write_json(manifest_uri, self.__manifest())
        return done

    def __completed_steps(self):
        done = 0
        for t in range(1, self._data.schedule.num_steps + 1):
            if AutoURI(self._uri(self.STEP_JSON, step=t)).exists and \
                    AutoURI(self._uri(self.CHECKPOINT, step=t)).exists:
                done = t
            else:
                break
        return done

    def __manifest(self):
        d = self._data
        ds = self._cfg.dataset
        m = stream_manifest(d.streams, d.schedule, self._cfg.stream,
                            holdout_rule(ds.val_fraction, ds.test_fraction, ds.seed))
        m.update({
            'name': self._cfg.name,
            'config_hash': self._hash,
            'variant': dict(dataclasses.asdict(self._cfg.variant),
                            name=self._variant_name),
            'label_space': d.spec.label_space.to_dict(),
            'val_sample_ids': [s.sample_id for s in d.val],
            'test_sample_ids': [s.sample_id for s in d.test],
        })
        return m

    def __restore(self, done, model, aux_head, state):
        payload = load_checkpoint(self._uri(self.CHECKPOINT, step=done))
        extra = payload['extra']
        if extra.get('config_hash') != self._hash:
            raise ExperimentError('Checkpoint of step {} belongs to another config.'
                                  .format(done))
        model.load_state_dict(payload['model'])
        state.load_state_dict(extra['futcr_state'])
        if aux_head is not None and extra.get('aux_head') is not None:
            aux_head.load_state_dict(extra['aux_head'])

    def __train(self, t, sd, model, aux_head, state):
        """A fresh AdamW per step; batches from a seeded reshuffle per epoch."""
        o = self._cfg.optimizer
        params = list(model.parameters())
        if aux_head is not None:
            params += list(aux_head.parameters())
        optimizer = make_optimizer(params, o.lr, o.weight_decay)
        n_iter = o.base_iterations if t == 1 else o.increment_iterations
        if len(sd) == 0:
            raise ExperimentError('Step {} has no training images.'.format(t))
        images = images_to_tensor([s.image for s in sd.samples])
        annotations = [s.training_annotation for s in sd.samples]
        batch = min(o.batch_size, len(sd))
        rng = np.random.default_rng(np.random.SeedSequence([o.seed, t, 1]))
        order = []
        records = []
        model.train()
        for it in range(n_iter):
            if len(order) < batch:
                order.extend(rng.permutation(len(sd)).tolist())
            idx = order[:batch]
            del order[:batch]
            rec = futcr_train_step(
                model, optimizer, images[idx], [annotations[i] for i in idx],
                sd.known_classes, sd.current_classes, self._futcr_cfg,
                seed=_seed(o.seed, t, it, 2), step=t, iteration=it,
                state=state, aux_head=aux_head)
            records.append(rec)
            if (it + 1) % o.log_every == 0:
                logger.debug('step %d iter %d: L_total=%.4f L_pan=%.4f L_reg=%.4f '
                             'L_rep=%.4f |R_fut|=%d', t, it + 1, rec.l_total,
                             rec.l_pan, rec.l_reg, rec.l_rep, rec.num_regions)
        if self._futcr_cfg.active_at(t) and not any(r.num_regions for r in records):
            logger.warning('No future-like region was found during step %d.', t)
        return optimizer, records

    def __split(self, name):
        return {'train': self._data.train, 'val': self._data.val,
                'test': self._data.test}[name]

    def __evaluate(self, t, sd, model):
        d = self._data
        ev = self._cfg.eval
        ls = d.spec.label_space
        known = sd.known_classes
        base = d.schedule.base_classes
        step = {
            'step': t,
            'current_classes': list(sd.current_classes),
            'known_classes': list(known),
            'new_classes': list(d.schedule.new_classes_at(t)),
            'num_train_images': len(sd),
        }
        preds = {}
        for split in ('val', 'test'):
            samples = self.__split(split)
            preds[split] = predict_maps(model, [s.image for s in samples], ls,
                                        ev.batch_size)
            gts = [mask_labels(s.annotation, known) for s in samples]
            step[split] = evaluate_maps(preds[split], gts, base,
                                        d.schedule.new_classes_at(t)).to_dict()

        diag = self.__split(ev.diagnostics_split)
        diag_preds = preds.get(ev.diagnostics_split)
        if diag_preds is None:
            diag_preds = predict_maps(model, [s.image for s in diag], ls, ev.batch_size)
        originals = [s.annotation for s in diag]
        step['confusion'] = None
        if t < d.schedule.num_steps:
            try:
                step['confusion'] = confusion_profile_from_maps(
                    diag_preds, originals, known, d.schedule.all_classes, t).to_dict()
            except AnalysisError as e:
                logger.warning('No confusion profile at step %d: %s', t, e)

        protos, missing = class_prototypes_from_data(
            model, [s.image for s in diag], originals, base, ev.batch_size)
        weight = model.classifier_weight.detach().double().numpy()
        step['prototypes'] = {str(c): v.tolist() for c, v in sorted(protos.items())}
        step['missing_prototypes'] = list(missing)
        step['classifier_weight'] = weight.tolist()
        if t == 1:
            protos_1, weight_1 = protos, weight
        else:
            first = json.loads(AutoURI(self._uri(self.STEP_JSON, step=1)).read())
            protos_1 = {int(c): np.asarray(v) for c, v in first['prototypes'].items()}
            weight_1 = np.asarray(first['classifier_weight'])
        step['congruence'] = None
        if set(protos) & set(protos_1):
            step['congruence'] = prototype_congruence(protos, protos_1, t).to_dict()
        else:
            logger.warning('No shared base-class prototypes at step %d.', t)
        step['classifier_congruence'] = classifier_congruence(
            weight, weight_1, base, t).to_dict()
        return step

    def __collect(self):
        T = self._data.schedule.num_steps
        steps = [json.loads(AutoURI(self._uri(self.STEP_JSON, step=t)).read())
                 for t in range(1, T + 1)]
        logs = []
        for t in range(1, T + 1):
            logs.append(AutoURI(self._uri(self.STEP_LOG, step=t)).read())
        AutoURI(self._uri(self.TRAIN_LOG)).write(''.join(logs))
        record = RunRecord(
            config_hash=self._hash, name=self._cfg.name,
            variant=dict(dataclasses.asdict(self._cfg.variant), name=self._variant_name),
            stream_mode=self._cfg.stream.mode, num_steps=T, steps=steps)
        record.trajectory = trajectory_of(record)
        return record


def summarize(records):
    """Per-step means of the iteration records."""
    if not records:
        return {}
    arr = {k: np.array([getattr(r, k) for r in records], dtype=np.float64)
           for k in ('l_pan', 'l_reg', 'l_rep', 'l_aux', 'l_total', 'num_regions',
                     'num_unlabeled')}
    return {
        'iterations': len(records),
        'mean_l_pan': float(arr['l_pan'].mean()),
        'mean_l_reg': float(arr['l_reg'].mean()),
        'mean_l_rep': float(arr['l_rep'].mean()),
        'mean_l_aux': float(arr['l_aux'].mean()),
        'mean_l_total': float(arr['l_total'].mean()),
        'mean_num_regions': float(arr['num_regions'].mean()),
        'mean_num_unlabeled': float(arr['num_unlabeled'].mean()),
        'regions_positive_fraction': float((arr['num_regions'] > 0).mean()),
        'rep_positive_fraction': float((arr['l_rep'] > 0).mean()),
        'first_l_pan': float(arr['l_pan'][0]),
        'last_l_pan': float(arr['l_pan'][-1]),
    }


def run_experiment(config, out_dir, resume=False, variant_name=None):
    return ContinualExperiment(config, out_dir, resume, variant_name).run()


def with_variant(config, variant):
    return dataclasses.replace(config, variant=variant_switches(variant))


def with_stream(config, mode=None, fraction=None):
    changes = {}
    if mode is not None:
        changes['mode'] = mode
    if fraction is not None:
        changes['subsample_fraction'] = fraction
        changes['images_per_increment'] = None
    return dataclasses.replace(config, stream=dataclasses.replace(config.stream, **changes))


ABLATION_JSON = 'ablation.json'
SWEEP_JSON = 'sweep.json'


def run_ablation_suite(config, out_dir, streams=('overlap', 'disjoint'),
                       variants=ABLATION_VARIANTS, resume=False):
    """Every variant on every stream, sharing all seeds.

    Returns (rows, columns, {(variant, stream): RunRecord}).
    """
    records = {}
    runs = {}
    for stream in streams:
        for v in variants:
            run_dir = os.path.join(out_dir, '{}_{}'.format(stream, v))
            logger.info('Ablation run: variant=%s stream=%s -> %s', v, stream, run_dir)
            cfg = with_stream(with_variant(config, v), mode=stream)
            records[(v, stream)] = run_experiment(cfg, run_dir, resume, v)
            runs['{}_{}'.format(stream, v)] = {'variant': v, 'stream': stream,
                                               'dir': run_dir}
    rows = ablation_rows(records, variants, streams)
    columns = ablation_columns(streams)
    write_csv(os.path.join(out_dir, 'ablation_table.csv'), rows, columns)
    write_json(os.path.join(out_dir, ABLATION_JSON),
               {'variants': list(variants), 'streams': list(streams), 'runs': runs})
    return rows, columns, records


def run_reduced_supervision_sweep(config, out_dir, fractions,
                                  streams=('overlap', 'disjoint'), resume=False):
    """One run per (fraction, stream); everything else identical.

    Returns (rows, {(fraction, stream): RunRecord}).
    """
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ExperimentError('Sweep fraction {} outside (0, 1].'.format(f))
    records = {}
    runs = {}
    for stream in streams:
        for f in fractions:
            name = 'frac_{:g}_{}'.format(f, stream)
            run_dir = os.path.join(out_dir, name)
            logger.info('Sweep run: fraction=%g stream=%s -> %s', f, stream, run_dir)
            cfg = with_stream(config, mode=stream, fraction=f)
            records[(f, stream)] = run_experiment(cfg, run_dir, resume)
            runs[name] = {'fraction': f, 'stream': stream, 'dir': run_dir}
    rows = sweep_rows(records)
    write_csv(os.path.join(out_dir, 'sweep_table.csv'), rows, SWEEP_COLUMNS)
    write_json(os.path.join(out_dir, SWEEP_JSON),
               {'fractions': list(fractions), 'streams': list(streams), 'runs': runs})
    return rows, records


def load_records(path):
    """RunRecords under a run, ablation or sweep directory.

    Returns ({label: RunRecord}, ablation (rows, columns) or None, sweep rows
    or None).
    """
    abl_uri = os.path.join(path, ABLATION_JSON)
    sweep_uri = os.path.join(path, SWEEP_JSON)
    if AutoURI(abl_uri).exists:
        meta = json.loads(AutoURI(abl_uri).read())
        by_key = {}
        records = {}
        for label, r in sorted(meta['runs'].items()):
            rec = RunRecord.from_dir(r['dir'])
            records[label] = rec
            by_key[(r['variant'], r['stream'])] = rec
        rows = ablation_rows(by_key, meta['variants'], meta['streams'])
        return records, (rows, ablation_columns(meta['streams'])), None
    if AutoURI(sweep_uri).exists:
        meta = json.loads(AutoURI(sweep_uri).read())
        by_key = {}
        records = {}
        for label, r in sorted(meta['runs'].items()):
            rec = RunRecord.from_dir(r['dir'])
            records[label] = rec
            by_key[(r['fraction'], r['stream'])] = rec
        return records, None, sweep_rows(by_key)
    return {os.path.basename(os.path.normpath(path)): RunRecord.from_dir(path)}, None, None


def describe_config(cfg):
    """Short summary used by validate-config."""
    d = config_to_dict(cfg)
    return {
        'config_hash': config_hash(cfg),
        'num_classes': cfg.dataset.num_classes,
        'schedule': d['schedule'],
        'stream': d['stream'],
        'effective_futcr': dataclasses.asdict(cfg.effective_futcr()),
    }
