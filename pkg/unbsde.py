import argparse
import json
import logging
import os
import sys

from src.biaslab import run_suite, suites
from src.problems import describe, make_problem
from src.surrogate import load_checkpoint, save_checkpoint
from src.training import Trainer, generate_reference_trajectories, relative_error_by_time, rl2
from src.stochastics import uniform_grid
from src.utils.configio import build_run, read_config, resolve_config
from src.utils.exceptions import (ConfigError, ProblemError, SchemeMismatchError, TrainingAborted,
                                  UnbsdeError)
from src.utils.reporting import (RunManifest, plot_history, plot_time_errors, write_frame_csv,
                                 write_history_csv, write_records)
from src.utils.schemas import benchmark_names

logger = logging.getLogger('cli')

EXIT_OK, EXIT_INVALID, EXIT_ABORTED, EXIT_VERIFICATION = 0, 1, 2, 3


def run_command(config_path, out_dir, seed=None, preset='paper', repeat=1):
    """
    Train on the configured problem and write the log, checkpoint, history CSV and
    RL2 plot. With ``repeat > 1`` run ``k`` uses seed ``seed + k`` in its own
    sub-directory.
    """
    raw = read_config(config_path)
    seeds = [seed]
    if repeat > 1:
        base_seed = seed if seed is not None else resolve_config(raw, preset)['train']['seed']
        seeds = [base_seed + k for k in range(repeat)]
    manifests = []
    for run_seed in seeds:
        target = out_dir if repeat == 1 else os.path.join(out_dir, f'seed_{run_seed}')
        os.makedirs(target, exist_ok=True)
        resolved = resolve_config(raw, preset, run_seed)
        problem, config, _ = build_run(resolved)
        manifest = RunManifest('run', target, config_path, resolved_config=resolved)
        log_path = os.path.join(target, 'run_log.jsonl')
        manifest.add('log', log_path)
        try:
            trainer = Trainer(problem, config)
            field, record = trainer.train()
        except TrainingAborted as err:
            if err.record is not None:
                err.record.to_jsonl(log_path)
            manifest.write('failed', err.diagnostic)
            raise
        except UnbsdeError as err:
            manifest.write('failed', f'{type(err).__name__}: {err}')
            raise

        checkpoint = os.path.join(target, 'checkpoint.pt')
        save_checkpoint(field, checkpoint, {'problem': problem.name, 'seed': config.seed})
        record.checkpoint = checkpoint
        record.to_jsonl(log_path)
        manifest.add('checkpoint', checkpoint)
        history = record.history()
        manifest.add('history', write_history_csv(history, os.path.join(target, 'history.csv')))
        plot = plot_history(history, os.path.join(target, 'rl2.svg'), f'{problem.name} {config.loss.method}')
        if plot is not None:
            manifest.add('plot', plot)
        manifest.write('completed')
        manifests.append(manifest)
    return manifests


def eval_command(config_path, checkpoint, out_dir, seed=None, preset='paper'):
    """RL2 and per-time relative error of a checkpoint against freshly generated references."""
    os.makedirs(out_dir, exist_ok=True)
    resolved = resolve_config(read_config(config_path), preset, seed)
    problem, config, _ = build_run(resolved)
    field, _ = load_checkpoint(checkpoint, problem)
    eval_set = generate_reference_trajectories(problem, max(config.n_eval_trajectories, 1),
                                               uniform_grid(config.n_steps, problem.t_end),
                                               config.eval_seed, config.hjb_reference_samples)
    manifest = RunManifest('eval', out_dir, config_path, resolved_config=resolved)
    value = rl2(field, eval_set)
    frame = relative_error_by_time(field, eval_set)
    manifest.add('time_errors', write_frame_csv(frame, os.path.join(out_dir, 'time_errors.csv')))
    manifest.add('time_plot', plot_time_errors(frame, os.path.join(out_dir, 'time_errors.svg'), problem.name))
    summary = os.path.join(out_dir, 'eval.json')
    with open(summary, 'w') as con:
        json.dump({'checkpoint': checkpoint, 'rl2': value, 'eval_seed': config.eval_seed,
                   'trajectories': len(eval_set), 'source': eval_set.source}, con, indent=2)
    manifest.add('summary', summary)
    manifest.write('completed')
    logger.info('RL2 of %s: %.6g', checkpoint, value)
    return value, manifest


def biaslab_command(suite, out_dir, preset='desk', seed=None):
    """Run a verification suite; returns whether every check passed."""
    os.makedirs(out_dir, exist_ok=True)
    records = run_suite(suite, preset, seed)
    manifest = RunManifest('biaslab', out_dir)
    manifest.add('report', write_records(records, os.path.join(out_dir, f'biaslab_{suite}.jsonl')))
    passed = all(record.get('passed', False) for record in records)
    failed = [record for record in records if not record.get('passed', False)]
    manifest.write('completed' if passed else 'failed',
                   None if passed else f'{len(failed)} of {len(records)} checks failed')
    return passed


def list_problems_command():
    for name in benchmark_names:
        print(json.dumps(describe(make_problem(name))))


def build_parser():
    parser = argparse.ArgumentParser(description='BSDE-loss surrogates for high-dimensional PDEs')
    parser.add_argument('--verbose', action='store_true')
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run')
    run.add_argument('--config', type=str, required=True)
    run.add_argument('--out', type=str, default='./runs')
    run.add_argument('--seed', type=int, default=None)
    run.add_argument('--preset', choices=['desk', 'paper'], default='paper')
    run.add_argument('--repeat', type=int, default=1)

    evaluate = commands.add_parser('eval')
    evaluate.add_argument('--config', type=str, required=True)
    evaluate.add_argument('--checkpoint', type=str, required=True)
    evaluate.add_argument('--out', type=str, default='./eval')
    evaluate.add_argument('--seed', type=int, default=None)
    evaluate.add_argument('--preset', choices=['desk', 'paper'], default='paper')

    lab = commands.add_parser('biaslab')
    lab.add_argument('--suite', choices=list(suites), default='all')
    lab.add_argument('--out', type=str, default='./biaslab')
    lab.add_argument('--seed', type=int, default=None)
    lab.add_argument('--preset', choices=['desk', 'paper'], default='desk')

    commands.add_parser('list-problems')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    try:
        if args.command == 'run':
            if args.repeat < 1:
                raise ConfigError('--repeat must be at least 1')
            run_command(args.config, args.out, args.seed, args.preset, args.repeat)
        elif args.command == 'eval':
            eval_command(args.config, args.checkpoint, args.out, args.seed, args.preset)
        elif args.command == 'biaslab':
            if not biaslab_command(args.suite, args.out, args.preset, args.seed):
                logger.warning('bias laboratory reported failed checks')
                return EXIT_VERIFICATION
        else:
            list_problems_command()
    except (ConfigError, ProblemError, SchemeMismatchError) as err:
        logger.error('invalid configuration: %s', err)
        return EXIT_INVALID
    except UnbsdeError as err:
        logger.error('%s', err)
        return EXIT_ABORTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
