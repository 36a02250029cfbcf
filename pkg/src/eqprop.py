"""Command-line entry point: train, gdu, gradcheck and speed subcommands."""

import argparse
import sys

from config import (ALGORITHMS, EXIT_CONFIG_ERROR, EXIT_NUMERICAL_ABORT, EXIT_OK,
                    EXIT_THRESHOLD_FAILED, apply_overrides, load_config_from_file,
                    parse_override)
from errors import (ConfigError, FileFormatError, IntegrityError, InvalidInputError,
                    NumericalAbort, ShapeError, UnsupportedModelError)
from experiment_runner import (run_gdu_pipeline, run_gradcheck_pipeline, run_speed_pipeline,
                               run_train_pipeline)


def _float_list(text):
    try:
        return [float(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


class _Override(argparse.Action):
    """Collect config overrides in command-line order so the last one wins."""

    def __init__(self, option_strings, dest, key=None, **kwargs):
        self.key = key
        super().__init__(option_strings, dest, **kwargs)

    def __call__(self, parser, namespace, values, option_string=None):
        overrides = list(getattr(namespace, 'overrides', None) or [])
        if self.key is None:
            try:
                overrides.append(parse_override(values))
            except ConfigError as e:
                parser.error(str(e))
        else:
            overrides.append((self.key, values))
        namespace.overrides = overrides


def _add_common(parser):
    parser.add_argument('--config', required=True, help='JSON config file (flat dotted keys)')
    parser.add_argument('--set', action=_Override, metavar='KEY=VALUE', dest='overrides',
                        help='Override one config key (repeatable; value parsed as JSON)')
    parser.add_argument('--seed', type=int, action=_Override, key='seed', dest='overrides',
                        help='Random seed')
    parser.add_argument('--output', action=_Override, key='output.root', dest='overrides',
                        help='Root folder for run directories')


def build_parser():
    parser = argparse.ArgumentParser(prog='eqprop', description='Equilibrium propagation experiments')
    sub = parser.add_subparsers(dest='command', required=True)

    train = sub.add_parser('train', help='Train a model and write metrics, checkpoints, manifest')
    _add_common(train)
    train.add_argument('--algo', required=True, choices=ALGORITHMS, help='Learning algorithm')
    train.add_argument('--angle', type=_float_list, default=None,
                       help='Initial weight angle(s) in degrees for cvf, comma-separated')
    train.add_argument('--beta', type=float, action=_Override, key='phase.beta', dest='overrides',
                       help='Nudging strength')
    train.add_argument('--eta', type=float, action=_Override, key='train.eta', dest='overrides',
                       help='Base continual learning rate')

    gdu = sub.add_parser('gdu', help='Compare EP update processes with BPTT gradients')
    _add_common(gdu)
    gdu.add_argument('--beta', type=_float_list, action=_Override, key='gdu.betas', dest='overrides',
                     help='Nudging strength(s), comma-separated')
    gdu.add_argument('--eta', type=_float_list, action=_Override, key='gdu.etas', dest='overrides',
                     help='Continual learning rate(s), comma-separated')

    gradcheck = sub.add_parser('gradcheck', help='Validate the BPTT oracle by finite differences')
    _add_common(gradcheck)

    speed = sub.add_parser('speed', help='Compare discrete and epsilon-relaxation dynamics')
    _add_common(speed)
    speed.add_argument('--epsilon', type=float, action=_Override, key='speed.epsilon', dest='overrides',
                       help='Relaxation step size')
    return parser


def _resolve(args):
    config = load_config_from_file(args.config)
    return apply_overrides(config, args.overrides or [])


def cmd_train(args):
    config = _resolve(args)
    angles = args.angle
    if angles:
        config = apply_overrides(config, [('cvf.angle', angles[0])])
        for angle in angles:
            if not 0.0 <= angle <= 90.0:
                raise ConfigError(f"weight angle must be within [0, 90] degrees, got {angle}")
    summary = run_train_pipeline(config, args.algo, angles=angles)
    print(f"Result: {summary}")
    return EXIT_OK


def cmd_gdu(args):
    summary = run_gdu_pipeline(_resolve(args))
    print(f"Result: {summary}")
    return EXIT_OK if summary['passes'] else EXIT_THRESHOLD_FAILED


def cmd_gradcheck(args):
    summary = run_gradcheck_pipeline(_resolve(args))
    print(f"Result: {summary}")
    return EXIT_OK if summary['passes'] else EXIT_THRESHOLD_FAILED


def cmd_speed(args):
    summary = run_speed_pipeline(_resolve(args))
    print(f"Result: {summary}")
    return EXIT_OK


COMMANDS = {'train': cmd_train, 'gdu': cmd_gdu, 'gradcheck': cmd_gradcheck, 'speed': cmd_speed}


def main(argv=None):
    """Parse argv, run the subcommand and map failures to exit codes.

    Returns:
        int: 0 success, 2 configuration or input error, 3 numerical abort,
            4 a checked threshold failed.
    """
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UnsupportedModelError, FileNotFoundError, FileFormatError,
            IntegrityError, InvalidInputError, ShapeError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except NumericalAbort as e:
        print(f"Aborted: {e}", file=sys.stderr)
        return EXIT_NUMERICAL_ABORT


if __name__ == "__main__":
    sys.exit(main())
