#!/usr/bin/env python3
"""Run records and the tables/series rendered from them.

RunRecord is what a continual run leaves behind; render_report turns one or
more records into plain CSV/JSON data files plus an HTML summary page.
"""

import csv
import html
import io
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from autouri import AutoURI

from .analysis import stability_plasticity
from .panoptic_core import MetricReport


logger = logging.getLogger(__name__)

MAIN_COLUMNS = ('run', 'variant', 'stream', 'step',
                'pq_base', 'miou_base', 'pq_new', 'miou_new', 'pq_all', 'miou_all')
DIAGNOSTIC_COLUMNS = ('step', 'conf_to_old', 'conf_to_bg', 'conf_to_future',
                      'proto_congruence_mean', 'classifier_congruence_mean',
                      'retention', 'pq_new', 'regions_positive_fraction',
                      'rep_positive_fraction', 'mean_num_regions', 'mean_l_pan',
                      'mean_l_reg', 'mean_l_rep')


@dataclass
class RunRecord:
    config_hash: str
    name: str = ''
    variant: dict = field(default_factory=dict)
    stream_mode: str = ''
    num_steps: int = 0
    steps: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)
    wall_clock: float = None

    RUN_RECORD_JSON = 'run_record.json'
    MANIFEST_JSON = 'manifest.json'
    STEP_JSON = 'steps/step_{step:02d}.json'

    @property
    def complete(self):
        return len(self.steps) == self.num_steps

    @property
    def variant_name(self):
        return self.variant.get('name', '')

    def report(self, split, step=None):
        """MetricReport for a split at a step (default: last completed)."""
        if not self.steps:
            return None
        s = self.steps[-1] if step is None else self.steps[step - 1]
        return MetricReport.from_dict(s[split])

    def to_metrics_dict(self):
        """Everything but wall-clock time."""
        return {
            'config_hash': self.config_hash,
            'name': self.name,
            'variant': self.variant,
            'stream_mode': self.stream_mode,
            'num_steps': self.num_steps,
            'steps': self.steps,
            'trajectory': self.trajectory,
        }

    def to_dict(self):
        d = self.to_metrics_dict()
        d['wall_clock'] = self.wall_clock
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(config_hash=d['config_hash'], name=d.get('name', ''),
                   variant=d.get('variant', {}), stream_mode=d.get('stream_mode', ''),
                   num_steps=d.get('num_steps', len(d.get('steps', []))),
                   steps=d.get('steps', []), trajectory=d.get('trajectory', []),
                   wall_clock=d.get('wall_clock'))

    @classmethod
    def from_dir(cls, run_dir):
        """Load a run directory; an unfinished run gives the completed steps.
        """
        uri = os.path.join(run_dir, RunRecord.RUN_RECORD_JSON)
        if AutoURI(uri).exists:
            return cls.from_dict(json.loads(AutoURI(uri).read()))
        manifest = json.loads(
            AutoURI(os.path.join(run_dir, RunRecord.MANIFEST_JSON)).read())
        num_steps = 1 + len(manifest['schedule']['increments'])
        steps = []
        for t in range(1, num_steps + 1):
            step_uri = os.path.join(run_dir, RunRecord.STEP_JSON.format(step=t))
            if not AutoURI(step_uri).exists:
                break
            steps.append(json.loads(AutoURI(step_uri).read()))
        logger.warning('Run in %s is incomplete: %d of %d steps.',
                       run_dir, len(steps), num_steps)
        rec = cls(config_hash=manifest['config_hash'], name=manifest.get('name', ''),
                  variant=manifest.get('variant', {}), stream_mode=manifest['mode'],
                  num_steps=num_steps, steps=steps)
        rec.trajectory = trajectory_of(rec)
        return rec


def trajectory_of(record, split='val'):
    if len(record.steps) < 2:
        return []
    history = {s['step']: MetricReport.from_dict(s[split]) for s in record.steps}
    return [p.to_dict() for p in stability_plasticity(history)]


def _cell(v):
    if v is None:
        return ''
    if isinstance(v, float):
        return repr(v)
    return v


def to_csv(rows, columns=None):
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(uri, rows, columns=None):
    AutoURI(uri).write(to_csv(rows, columns))


def write_json(uri, obj):
    AutoURI(uri).write(json.dumps(obj, indent=2, sort_keys=True) + '\n')


def metric_rows(record):
    """One row per (step, split) with every flat metric column."""
    rows = []
    for s in record.steps:
        for split in ('val', 'test'):
            row = {'step': s['step'], 'split': split}
            row.update(MetricReport.from_dict(s[split]).to_flat_dict())
            rows.append(row)
    return rows


def metric_columns(rows):
    lead = ['step', 'split'] + list(MetricReport.AGGREGATE_KEYS)
    rest = sorted({k for r in rows for k in r} - set(lead),
                  key=lambda k: (k.rsplit('_', 1)[0], int(k.rsplit('_', 1)[1])))
    return lead + rest


def diagnostic_rows(record):
    retention = {p['step']: p['retention'] for p in record.trajectory}
    rows = []
    for s in record.steps:
        conf = s.get('confusion') or {}
        cong = s.get('congruence') or {}
        ccong = s.get('classifier_congruence') or {}
        summary = s.get('train_summary') or {}
        rows.append({
            'step': s['step'],
            'conf_to_old': conf.get('fraction_to_old'),
            'conf_to_bg': conf.get('fraction_to_background'),
            'conf_to_future': conf.get('fraction_to_future'),
            'proto_congruence_mean': cong.get('mean'),
            'classifier_congruence_mean': ccong.get('mean'),
            'retention': 1.0 if s['step'] == 1 else retention.get(s['step']),
            'pq_new': s['val'].get('pq_new'),
            'regions_positive_fraction': summary.get('regions_positive_fraction'),
            'rep_positive_fraction': summary.get('rep_positive_fraction'),
            'mean_num_regions': summary.get('mean_num_regions'),
            'mean_l_pan': summary.get('mean_l_pan'),
            'mean_l_reg': summary.get('mean_l_reg'),
            'mean_l_rep': summary.get('mean_l_rep'),
        })
    return rows


def main_rows(records, split='test'):
    rows = []
    for label in sorted(records):
        rec = records[label]
        rep = rec.report(split)
        row = {'run': label, 'variant': rec.variant_name, 'stream': rec.stream_mode,
               'step': len(rec.steps)}
        for k in MetricReport.AGGREGATE_KEYS:
            row[k] = None if rep is None else getattr(rep, k)
        rows.append(row)
    return rows


def ablation_rows(records, variants, streams, split='val'):
    """Rows per variant, PQ_base/new/all per stream and the PQ_all average.

    Args:
        records: {(variant, stream): RunRecord}
    """
    rows = []
    for v in variants:
        row = {'variant': v}
        alls = []
        for stream in streams:
            rec = records.get((v, stream))
            rep = None if rec is None else rec.report(split)
            for k in ('pq_base', 'pq_new', 'pq_all'):
                row['{}_{}'.format(stream, k)] = None if rep is None else getattr(rep, k)
            if rep is not None and rep.pq_all is not None:
                alls.append(rep.pq_all)
        row['pq_avg'] = float(np.mean(alls)) if alls else None
        rows.append(row)
    return rows


def ablation_columns(streams):
    cols = ['variant']
    for stream in streams:
        cols.extend('{}_{}'.format(stream, k) for k in ('pq_base', 'pq_new', 'pq_all'))
    return cols + ['pq_avg']


def sweep_rows(records, split='test'):
    """Rows per (fraction, stream).

    Args:
        records: {(fraction, stream): RunRecord}
    """
    rows = []
    for fraction, stream in sorted(records):
        rec = records[(fraction, stream)]
        rep = rec.report(split)
        sizes = [s['num_train_images'] for s in rec.steps if s['step'] > 1]
        rows.append({
            'fraction': fraction, 'stream': stream,
            'pq_base': None if rep is None else rep.pq_base,
            'pq_new': None if rep is None else rep.pq_new,
            'pq_all': None if rep is None else rep.pq_all,
            'mean_images_per_increment': float(np.mean(sizes)) if sizes else None,
        })
    return rows


SWEEP_COLUMNS = ('fraction', 'stream', 'pq_base', 'pq_new', 'pq_all',
                 'mean_images_per_increment')


def write_run_outputs(run_dir, record):
    """metrics.csv, metrics.json, diagnostics.csv and run_record.json."""
    rows = metric_rows(record)
    write_csv(os.path.join(run_dir, 'metrics.csv'), rows, metric_columns(rows))
    write_json(os.path.join(run_dir, 'metrics.json'), record.to_metrics_dict())
    write_csv(os.path.join(run_dir, 'diagnostics.csv'), diagnostic_rows(record),
              DIAGNOSTIC_COLUMNS)
    write_json(os.path.join(run_dir, RunRecord.RUN_RECORD_JSON), record.to_dict())


class HtmlReport(object):
    HEAD = '@HEAD_CONTENTS'
    BODY = '@BODY_CONTENTS'
    HTML = """<!DOCTYPE html>
<html lang="en">
  <head>
    <meta charset="utf-8">
    <title>futcr-lab report</title>
    {head_contents}
  </head>
  <body>{body_contents}</body>
</html>
""".format(head_contents=HEAD, body_contents=BODY)
    STYLE = """
    <style>
      table { border-collapse: collapse; margin-bottom: 1.5em; }
      th, td { border: 1px solid #bbb; padding: 2px 6px; font-family: monospace; }
    </style>
    """
    REPORT_HTML = 'report.html'

    def __init__(self, out_dir):
        self._out_dir = out_dir
        self._tables = []
        self._files = []

    def add_table(self, title, rows, columns):
        self._tables.append((title, rows, list(columns)))

    def add_file(self, name):
        self._files.append(name)

    def __table_html(self, title, rows, columns):
        head = ''.join('<th>{}</th>'.format(html.escape(str(c))) for c in columns)
        body = ''
        for r in rows:
            cells = []
            for c in columns:
                v = r.get(c)
                if isinstance(v, float):
                    v = '{:.4f}'.format(v)
                cells.append('<td>{}</td>'.format(html.escape('' if v is None else str(v))))
            body += '<tr>{}</tr>\n'.format(''.join(cells))
        return '<div><b>{}</b>\n<table><thead><tr>{}</tr></thead>\n<tbody>\n{}</tbody>' \
               '</table></div>\n'.format(html.escape(title), head, body)

    def save_to_file(self):
        body = ''
        for title, rows, columns in self._tables:
            body += self.__table_html(title, rows, columns)
        body += self.__table_html(
            'File table', [{'file': f} for f in self._files], ['file'])
        text = HtmlReport.HTML.replace(HtmlReport.HEAD, HtmlReport.STYLE)
        text = text.replace(HtmlReport.BODY, body)
        AutoURI(os.path.join(self._out_dir, HtmlReport.REPORT_HTML)).write(text)
        return text


def render_report(records, out_dir, ablation=None, sweep=None):
    """Write tables and plot-data series for a set of runs.

    Args:
        records: {label: RunRecord}
        ablation: optional (rows, columns) of an ablation suite
        sweep: optional rows of a reduced-supervision sweep
    Returns:
        list of written file names (relative to out_dir)
    """
    if not records and not ablation and not sweep:
        raise ValueError('Nothing to report.')
    written = []
    page = HtmlReport(out_dir)

    def emit(name, rows, columns, title):
        write_csv(os.path.join(out_dir, name), rows, columns)
        page.add_table(title, rows, columns)
        written.append(name)

    incomplete = sorted(k for k, r in records.items() if not r.complete)
    if incomplete:
        logger.warning('Partial report: runs %s are incomplete.', incomplete)

    emit('main_table.csv', main_rows(records), MAIN_COLUMNS,
         'Final-step test metrics')
    confusion, congruence, trajectory = [], [], []
    for label in sorted(records):
        for r in diagnostic_rows(records[label]):
            confusion.append({'run': label, 'step': r['step'],
                              'conf_to_old': r['conf_to_old'],
                              'conf_to_bg': r['conf_to_bg'],
                              'conf_to_future': r['conf_to_future']})
            congruence.append({'run': label, 'step': r['step'],
                               'proto_congruence_mean': r['proto_congruence_mean'],
                               'classifier_congruence_mean':
                                   r['classifier_congruence_mean']})
        for p in records[label].trajectory:
            trajectory.append({'run': label, 'step': p['step'],
                               'retention': p['retention'], 'pq_new': p['pq_new']})
    emit('confusion_series.csv', confusion,
         ('run', 'step', 'conf_to_old', 'conf_to_bg', 'conf_to_future'),
         'Future confusion profile')
    emit('congruence_series.csv', congruence,
         ('run', 'step', 'proto_congruence_mean', 'classifier_congruence_mean'),
         'Prototype congruence with step 1')
    emit('trajectory.csv', trajectory, ('run', 'step', 'retention', 'pq_new'),
         'Stability-plasticity trajectory')
    if ablation:
        rows, columns = ablation
        emit('ablation_table.csv', rows, columns, 'Component ablation (val)')
    if sweep:
        emit('sweep_table.csv', sweep, SWEEP_COLUMNS, 'Reduced supervision (test)')

    summary = {
        'runs': {label: {'config_hash': r.config_hash, 'complete': r.complete,
                         'steps_completed': len(r.steps), 'num_steps': r.num_steps}
                 for label, r in records.items()},
        'files': sorted(written),
    }
    write_json(os.path.join(out_dir, 'report.json'), summary)
    written.append('report.json')
    for name in sorted(written):
        page.add_file(name)
    page.save_to_file()
    written.append(HtmlReport.REPORT_HTML)
    return written
