#!/usr/bin/env python3

import os
import sys
import argparse
import asyncio
import logging
import logging.handlers

from commands.gen_data import cmd_gen_data
from commands.report import cmd_report
from commands.simulate import cmd_simulate
from commands.sweep import cmd_sweep
from commands.train import cmd_train
from utils.config import Config
from utils.errors import ConfigError, TrainingDiverged
from utils.files import OutputRepo


CONFIG_FILE = os.path.join(os.path.dirname(os.path.realpath(__file__)), 'config.json')

EXIT_USAGE = 2
EXIT_DIVERGED = 3


def build_parser():
    parser = argparse.ArgumentParser(description='Expert routing locality: train, simulate and sweep a toy MoE.')
    parser.add_argument('--config', default=CONFIG_FILE, help='JSON experiment config')
    parser.add_argument('--seed', type=int, default=None, help='overrides the config seed')
    parser.add_argument('--workers', type=int, default=None, help='parallel sweep points')
    parser.add_argument('--out', default=None, help='output directory')

    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('gen-data', help='Write the synthetic topic dataset')
    train = sub.add_parser('train', help='Pretrain the base model and fine-tune it for locality')
    train.add_argument('--resume', action='store_true', help='continue from checkpoint.json')
    train.add_argument('--until-epoch', type=int, default=None, help='stop after this epoch')
    sub.add_parser('simulate', help='Fit the prefetch predictor and simulate offloaded decoding')
    sub.add_parser('sweep', help='Run the loss-weight and cache-policy grid')
    sub.add_parser('report', help='Render the run outputs as tables')
    return parser


def setup_logging(out_dir):
    logger = logging.getLogger('locality')
    logger.setLevel(logging.INFO)
    for stale in list(logger.handlers):
        logger.removeHandler(stale)
        stale.close()

    handler = logging.handlers.RotatingFileHandler(
        filename=os.path.join(out_dir, 'locality.log'),
        encoding='utf-8',
        maxBytes=32 * 1024 * 1024,  # 32 MiB
        backupCount=5,  # Rotate through 5 files
    )
    dt_fmt = '%Y-%m-%d %H:%M:%S'
    formatter = logging.Formatter('[{asctime}] [{levelname:<8}] {name}: {message}', dt_fmt, style='{')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    return logger


async def main(argv=None):
    args = build_parser().parse_args(argv)

    try:
        config = Config.load(args.config, out_dir=args.out, seed=args.seed, workers=args.workers)
        repo = OutputRepo(base_path=config.out_dir)
    except (ConfigError, OSError) as e:
        print(f'usage error: {e}', file=sys.stderr)
        return EXIT_USAGE

    logger = setup_logging(config.out_dir)
    logger.info(f'Running {args.command} with seed={config.seed} workers={config.workers} out={config.out_dir}')

    try:
        if args.command == 'gen-data':
            cmd_gen_data(config, repo)
        elif args.command == 'train':
            cmd_train(config, repo, resume=args.resume, until=args.until_epoch)
        elif args.command == 'simulate':
            cmd_simulate(config, repo)
        elif args.command == 'sweep':
            await cmd_sweep(config, repo)
        elif args.command == 'report':
            cmd_report(repo)
    except ConfigError as e:
        logger.error(str(e))
        print(f'usage error: {e}', file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        logger.error(str(e))
        return EXIT_DIVERGED

    return 0


if __name__ == '__main__':
    sys.exit(asyncio.run(main()))
