#!/usr/bin/env python3
# Copyright 2024, specdrop contributors
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at https://mozilla.org/MPL/2.0/.


"""The specdrop command: simulate datasets, train models, run ablations
and write reports.
"""
import sys
import os
import logging
import pathlib

from .ablation import AblationRunner, ablate
from .basis import load_basis_set
from .commons import ConfigError, DivergenceError, SpecdropError
from .dataset import generate_dataset, write_dataset
from .report import Reporter
from .settings import Settings, ablation_matrix, parse_args, run_config
from .trainer import reevaluate, train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_DIVERGED = 2
EXIT_CONFIG = 3
REPORT_DIR = 'reports'


def setup_logging(debug=False):
    """Setup logging."""
    logger = logging.getLogger('specdrop')
    logger.setLevel(logging.DEBUG if debug else logging.INFO)
    if not logger.handlers:
        handler = logging.StreamHandler()
        formatter = logging.Formatter('[%(levelname)s:%(asctime)s] %(message)s')
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    return logger


def simulate(args, settings, logger):
    """Simulate a dataset and write it to args.output."""
    basis = None
    if args.basis:
        basis = load_basis_set(args.basis, settings['variant'])
    dataset = generate_dataset(settings['variant'], settings['n'], settings['seed'], settings['split'],
                               basis=basis, logger=logger)
    path = write_dataset(dataset, args.output)
    logger.info('Dataset written to %s', path)
    return EXIT_OK


def train_run(args, settings, logger):
    """Train one configuration and report it."""
    config = run_config(settings, logger)
    train(config, logger)
    Reporter(pathlib.Path(config.output_dir) / REPORT_DIR, logger).report_run(config.run_dir)
    return EXIT_OK


def ablate_matrix(args, settings, logger):
    """Run (one shard of) an ablation matrix and write its table."""
    base = run_config(settings, logger)
    cells, site_defaults, shard = ablation_matrix(settings, args.matrix)
    if args.shard is not None:
        shard = args.shard
    if args.collect:
        table = AblationRunner(base, logger, site_defaults).collect(cells)
    else:
        table = ablate(base, cells, logger, shard=shard, site_defaults=site_defaults)
    reporter = Reporter(pathlib.Path(base.output_dir) / REPORT_DIR, logger)
    if shard is None or args.collect:
        reporter.report_table(table, name='ablation')
        table = table.best_per_technique()
        reporter.report_table(table, name='ablation_best')
    else:
        reporter.report_table(table, name='ablation_shard{}of{}'.format(*shard))
    logger.info('Ablation table:\n%s', table.to_text())
    return EXIT_OK


def report(args, logger):
    """Write the reports of finished runs or of an ablation table."""
    reporter = Reporter(args.output_dir or REPORT_DIR, logger)
    code = EXIT_OK
    if args.run_dir:
        reporter.report_run(args.run_dir)
        if args.reevaluate:
            _, matches = reevaluate(args.run_dir, logger)
            if not matches:
                logger.error('The best checkpoint of %s does not reproduce its recorded report.', args.run_dir)
                code = EXIT_FAILURE
    if args.runs_root:
        reporter.report_all(args.runs_root)
    if args.table:
        reporter.report_table(args.table, name=pathlib.Path(args.table).stem)
    return code


def main(argv=None):
    """Where the magic begins."""
    args = parse_args(argv)
    logger = setup_logging(bool(args.debug))
    logger.debug('Current directory: %s', os.getcwd())
    try:
        if args.command == 'report':
            return report(args, logger)
        settings = Settings(args, required=args.command != 'simulate')
        if settings.settings_file is not None:
            logger.info('Settings file: %s', settings.settings_file)
        if settings['debug']:
            logger.setLevel(logging.DEBUG)
        commands = {'simulate': simulate, 'train': train_run, 'ablate': ablate_matrix}
        return commands[args.command](args, settings, logger)
    except DivergenceError as err:
        logger.error('Training diverged: %s (last good checkpoint: %s)', err, err.checkpoint)
        return EXIT_DIVERGED
    except (ConfigError, FileNotFoundError) as err:
        logger.error('Configuration error: %s', err)
        return EXIT_CONFIG
    except SpecdropError as err:
        logger.error('%s: %s', type(err).__name__, err)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
