import argparse
import json
import logging
import os
import sys

import yaml

from . import __version__ as version
from .config import VARIANTS, ExperimentConfig, apply_overrides, load_config
from .experiment import (
    describe_config, load_records, run_ablation_suite, run_experiment,
    run_reduced_supervision_sweep, with_variant)
from .report import render_report


logger = logging.getLogger(__name__)

STREAMS = ('overlap', 'disjoint')


def parse_futcr_arguments(argv=None):
    """Argument parser for futcr-lab

    Returns:
        dict of cmd line arguments
    """
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument(
        '--config',
        help='Experiment config YAML (local path, URL, gs:// or s3://). '
             'Nested sections or flat dotted keys. Defaults apply when omitted.')
    parent.add_argument(
        '--set', dest='define', action='append', default=[], metavar='KEY=VALUE',
        help='Override a config key, e.g. --set futcr.tau_mask=0.6. '
             'Values are parsed as YAML scalars. Repeatable.')
    parent.add_argument(
        '--seed', type=int,
        help='Override dataset, stream and optimizer seeds at once.')
    parent.add_argument('-D', '--debug', action='store_true',
                        help='Prints all logs >= DEBUG level')

    p = argparse.ArgumentParser(
        prog='futcr-lab',
        description='Continual panoptic segmentation with future-aware '
                    'region contrast on synthetic scenes.')
    p.add_argument('-v', '--version', action='store_true', help='Show version')
    sub = p.add_subparsers(dest='action')

    run = sub.add_parser('run', parents=[parent], help='Run one continual experiment.')
    run.add_argument('--out', required=True,
                     help='Run directory (LOCAL OR REMOTE).')
    run.add_argument('--resume', action='store_true',
                     help='Resume after the last completed step. Refuses to '
                          'resume a run made with another config.')
    run.add_argument('--variant', choices=VARIANTS,
                     help='Component switches; overrides the variant section.')

    ablate = sub.add_parser('ablate', parents=[parent],
                            help='Run baseline/rc/kfr/full on each stream.')
    ablate.add_argument('--out', required=True)
    ablate.add_argument('--resume', action='store_true')
    ablate.add_argument('--streams', nargs='+', choices=STREAMS, default=list(STREAMS))

    sweep = sub.add_parser('sweep', parents=[parent],
                           help='Reduced-supervision sweep over subsample fractions.')
    sweep.add_argument('--out', required=True)
    sweep.add_argument('--resume', action='store_true')
    sweep.add_argument('--fractions', nargs='+', type=float, required=True)
    sweep.add_argument('--streams', nargs='+', choices=STREAMS, default=list(STREAMS))
    sweep.add_argument('--variant', choices=VARIANTS)

    report = sub.add_parser('report', help='Render tables from finished runs.')
    report.add_argument('runs', nargs='+',
                        help='Run, ablation or sweep directories.')
    report.add_argument('--out', required=True, help='Report directory.')
    report.add_argument('-D', '--debug', action='store_true')

    validate = sub.add_parser('validate-config', parents=[parent],
                              help='Load, validate and summarize a config.')
    validate.add_argument('--variant', choices=VARIANTS)

    if argv is None:
        argv = sys.argv[1:]
    if len(argv) == 0:
        p.print_help()
        p.exit()
    if '-v' in argv or '--version' in argv:
        print(version)
        p.exit()

    args = p.parse_args(argv)
    if args.action is None:
        p.print_help()
        p.exit(2)
    return vars(args)


def check_args(args):
    """Check cmd line arguments are valid

    Args:
        args:
            dict of cmd line arguments
    """
    out = args.get('out')
    if out is not None and out.startswith(('http://', 'https://')):
        raise ValueError('URL is not allowed for --out')
    for item in args.get('define') or []:
        if '=' not in item:
            raise ValueError('--set expects KEY=VALUE, got {}'.format(item))
    for f in args.get('fractions') or []:
        if not 0.0 < f <= 1.0:
            raise ValueError('--fractions must lie in (0, 1], got {}'.format(f))


def init_dirs(args):
    out = args.get('out')
    if out is None or out.startswith(('gs://', 's3://')):
        return
    args['out'] = os.path.abspath(os.path.expanduser(out))
    os.makedirs(args['out'], exist_ok=True)


def init_logging(args):
    if args.get('debug'):
        log_level = 'DEBUG'
    else:
        log_level = 'INFO'
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s|%(name)s|%(levelname)s| %(message)s')
    # suppress filelock/autouri logging
    logging.getLogger('filelock').setLevel('CRITICAL')
    logging.getLogger('autouri').setLevel('WARNING')


def build_config(args):
    """Config file, then --set overrides, then --seed and --variant."""
    cfg = load_config(args['config']) if args.get('config') else ExperimentConfig()
    overrides = {}
    for item in args.get('define') or []:
        key, value = item.split('=', 1)
        overrides[key.strip()] = yaml.safe_load(value)
    if args.get('seed') is not None:
        for key in ('dataset.seed', 'stream.seed', 'optimizer.seed'):
            overrides[key] = args['seed']
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    if args.get('variant'):
        cfg = with_variant(cfg, args['variant'])
    return cfg


def main(argv=None):
    args = parse_futcr_arguments(argv)

    check_args(args)
    init_dirs(args)
    init_logging(args)

    action = args['action']
    if action == 'report':
        records = {}
        ablation = None
        sweep = None
        for path in args['runs']:
            recs, abl, swp = load_records(path)
            records.update(recs)
            ablation = abl or ablation
            sweep = swp or sweep
        written = render_report(records, args['out'], ablation, sweep)
        logger.info('Wrote %d report files to %s.', len(written), args['out'])
        return 0

    cfg = build_config(args)
    if action == 'validate-config':
        print(json.dumps(describe_config(cfg), indent=2, sort_keys=True))
        return 0
    if action == 'run':
        record = run_experiment(cfg, args['out'], resume=args['resume'],
                                variant_name=args.get('variant'))
        logger.info('Run finished in %.1fs: %d steps, config hash %s.',
                    record.wall_clock, len(record.steps), record.config_hash)
    elif action == 'ablate':
        rows, _, _ = run_ablation_suite(cfg, args['out'], streams=tuple(args['streams']),
                                        resume=args['resume'])
        logger.info('Ablation finished: %d variants.', len(rows))
    elif action == 'sweep':
        rows, _ = run_reduced_supervision_sweep(
            cfg, args['out'], args['fractions'], streams=tuple(args['streams']),
            resume=args['resume'])
        logger.info('Sweep finished: %d runs.', len(rows))
    return 0


if __name__ == '__main__':
    main()
