import argparse
import logging
import sys
from typing import List, Optional

from camabench.bench import runner
from camabench.bench.config import ExperimentConfig, load_config
from camabench.bench.report import report
from camabench.datagen import generate_measurement, save_measurement_csv
from camabench.errors import CamaError
from camabench.stochastics import RngStream
from camabench.utils import DEFAULT_CONFIG_PATH

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def _config(args, overrides: List[str] = ()) -> ExperimentConfig:
    return load_config(args.config, [*args.set, *overrides], seeds=args.seed)


def gen_data(args) -> int:
    dataset, mechanism = generate_measurement(
            args.seed, n=args.n, n_train=args.n_train, n_val=args.n_val, sigma_y=args.sigma_y, sigma_x=args.sigma_x,
    )
    save_measurement_csv(dataset, args.out)
    print(f'Wrote {len(dataset)} rows (mechanism seed {mechanism.seed}) to {args.out}')
    return 0


def train(args) -> int:
    config = _config(args)
    for seed in config.seeds:
        data = runner.prepare_data(config, seed)
        for arm in runner.train_arms(config, data, seed):
            print(f'{arm.label}/{arm.regime} seed {seed}: {config.checkpoint_path(arm.model_kind, arm.regime, arm.role, seed)}')
    return 0


def evaluate(args) -> int:
    config = _config(args, ['output.require_checkpoints=true'])
    weights = runner.objective_weights(config)
    for seed in config.seeds:
        data = runner.prepare_data(config, seed)
        for index, arm in enumerate(runner.train_arms(config, data, seed)):
            acc = runner.arm_accuracy(arm, data.batch('test', arm.role), weights, RngStream(seed).spawn(index))
            print(f'{arm.label}/{arm.regime} seed {seed}: clean test accuracy {acc:.4f}')
    return 0


def _sweep(config: ExperimentConfig) -> int:
    result = runner.run(config)
    print(f'{len(result.rows)} rows written to {result.csv_path}')
    for failure in result.failures:
        print(f'FAILED {failure}', file=sys.stderr)
    return 0 if result.complete else 1


def finetune(args) -> int:
    overrides = ['output.require_checkpoints=true', 'output.save_finetuned=true', 'finetune.enabled=true',
                 f'grid.magnitudes=[{args.magnitude}]']
    if args.fraction is not None:
        overrides.append(f'finetune.fraction={args.fraction}')
    return _sweep(_config(args, overrides))


def attack(args) -> int:
    overrides = ['experiment.kind="attack-sweep"', f'grid.manipulation="{args.method}"']
    if args.epsilon:
        overrides.append(f'grid.magnitudes={list(args.epsilon)}')
    return _sweep(_config(args, overrides))


def sweep(args) -> int:
    return _sweep(_config(args))


def make_report(args) -> int:
    for path in report(args.csv, args.out):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='camabench', description='Manipulation-robust generative classifier benchmark')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    commands = parser.add_subparsers(dest='command', required=True)

    def experiment_command(name: str, handler, help_text: str, seed_required: bool = False):
        command = commands.add_parser(name, help=help_text)
        command.add_argument('--config', default=DEFAULT_CONFIG_PATH)
        command.add_argument('--seed', type=int, action='append', required=seed_required,
                             help='repeat for several seeds; overrides the config seeds')
        command.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE')
        command.set_defaults(handler=handler)
        return command

    command = commands.add_parser('gen-data', help='write a synthetic measurement dataset as CSV')
    command.add_argument('--seed', type=int, required=True)
    command.add_argument('--out', required=True)
    command.add_argument('--n', type=int, default=1000)
    command.add_argument('--n-train', type=int, default=450)
    command.add_argument('--n-val', type=int, default=50)
    command.add_argument('--sigma-y', type=float, default=0.1)
    command.add_argument('--sigma-x', type=float, default=0.1)
    command.set_defaults(handler=gen_data)

    experiment_command('train', train, 'train every configured arm and save checkpoints')
    experiment_command('eval', evaluate, 'clean test accuracy of saved checkpoints')
    command = experiment_command('finetune', finetune, 'fine-tune saved CAMA checkpoints on a manipulated test set')
    command.add_argument('--magnitude', type=float, required=True)
    command.add_argument('--fraction', type=float)
    command = experiment_command('attack', attack, 'FGSM/PGD sweep over epsilons')
    command.add_argument('--method', choices=['fgsm', 'pgd'], default='fgsm')
    command.add_argument('--epsilon', type=float, action='append')
    experiment_command('sweep', sweep, 'run the configured experiment grid', seed_required=True)

    command = commands.add_parser('report', help='aggregate result CSVs into plot-data files')
    command.add_argument('csv', nargs='+')
    command.add_argument('--out', default='plot_data')
    command.set_defaults(handler=make_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    try:
        return args.handler(args)
    except CamaError as e:
        logger.error('%s', e)
        return 2


if __name__ == '__main__':
    sys.exit(main())
