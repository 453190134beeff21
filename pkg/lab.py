import argparse
import sys
from dataclasses import replace

from fusionlab.config.settings import Config
from fusionlab.core.errors import ConfigError
from fusionlab.ui.session import BatchSession
from fusionlab.ui.summary_view import SummaryView


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='LiDAR-camera fusion lab on synthetic scenes')
    parser.add_argument('command', choices=['gen', 'pilot', 'train', 'eval', 'mask', 'ablate'],
                        help='Command to execute')
    parser.add_argument('--config', required=True, help='Experiment config (JSON)')
    parser.add_argument('--seed', type=int, help='Override the config seed')
    parser.add_argument('--out', help='Output directory (default: paths.out)')
    parser.add_argument('--splits', help='Comma-separated split names (default: all)')
    parser.add_argument('--ablate', help="Toggles to ablate, e.g. QDL,LGDP,CCM, or 'masks'")
    parser.add_argument('--epochs', type=int, help='Override train.epochs')
    parser.add_argument('--debug', action='store_true', help='Print the debug log at exit')
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = Config.from_file(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.epochs is not None:
            if args.epochs < 0:
                raise ConfigError("--epochs", f"must be >= 0, got {args.epochs}")
            config.train = replace(config.train, epochs=args.epochs)
        splits = [s.strip() for s in args.splits.split(',') if s.strip()] if args.splits else None
        if splits:
            config.select_splits(splits)
    except ConfigError as e:
        SummaryView().show_error(str(e))
        return 1
    config.debug = config.debug or args.debug
    session = BatchSession(config, out=args.out, splits=splits, ablate=args.ablate)
    return session.run(args.command)


if __name__ == "__main__":
    sys.exit(main())
