import json
import os

import pandas as pd
import pytest

import unbsde
from src.training import Trainer
from src.utils.configio import build_run, load_config, resolve_config, validate_raw
from src.utils.exceptions import ConfigError, NonFiniteError
from src.utils.seeding import derive_seed

TINY = """
[problem]
name = "BSB"
d = 2

[network]
hidden_layers = 2
width = 8

[loss]
method = "{method}"

[train]
iterations = 3
batch_size = 4
n_steps = 4
eval_every = 1
n_eval_trajectories = 2
"""


@pytest.fixture
def write_config(tmp_path):
    def write(text=TINY.format(method='em'), name='run.toml'):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return write


def run(config, out, *extra):
    return unbsde.main(['run', '--config', config, '--out', str(out), '--preset', 'desk', *extra])


def test_run_writes_every_artifact(tmp_path, write_config):
    out = tmp_path / 'run'
    assert run(write_config(), out) == unbsde.EXIT_OK
    for name in ('run_log.jsonl', 'checkpoint.pt', 'history.csv', 'rl2.svg', 'manifest.json'):
        assert (out / name).exists()
    with open(out / 'history.csv') as con:
        assert con.readline().strip() == 'iteration,loss,lr,rl2,wall_seconds'
    manifest = json.loads((out / 'manifest.json').read_text())
    assert manifest['status'] == 'completed'
    assert set(manifest['artifacts']) == {'log', 'checkpoint', 'history', 'plot'}
    assert len(manifest['config_hash']) == 64


def test_rerun_reproduces_the_history(tmp_path, write_config):
    config = write_config()
    run(config, tmp_path / 'a')
    run(config, tmp_path / 'b')
    first = pd.read_csv(tmp_path / 'a' / 'history.csv').drop(columns='wall_seconds')
    second = pd.read_csv(tmp_path / 'b' / 'history.csv').drop(columns='wall_seconds')
    pd.testing.assert_frame_equal(first, second)


def test_seed_override(tmp_path, write_config):
    out = tmp_path / 'seeded'
    assert run(write_config(), out, '--seed', '11') == unbsde.EXIT_OK
    resolved = json.loads((out / 'manifest.json').read_text())['resolved_config']
    assert resolved['train']['seed'] == 11 and resolved['network']['init_seed'] == 11
    assert resolved['train']['eval_seed'] == derive_seed(11, 'eval', 1) % 2 ** 31


def test_repeat_uses_consecutive_seeds(tmp_path, write_config):
    out = tmp_path / 'repeat'
    assert run(write_config(), out, '--seed', '4', '--repeat', '2') == unbsde.EXIT_OK
    assert (out / 'seed_4' / 'manifest.json').exists() and (out / 'seed_5' / 'manifest.json').exists()
    assert run(write_config(), out, '--repeat', '0') == unbsde.EXIT_INVALID


def test_eval_command(tmp_path, write_config):
    config = write_config()
    run(config, tmp_path / 'run')
    out = tmp_path / 'eval'
    code = unbsde.main(['eval', '--config', config, '--checkpoint', str(tmp_path / 'run' / 'checkpoint.pt'),
                        '--out', str(out), '--preset', 'desk'])
    assert code == unbsde.EXIT_OK
    summary = json.loads((out / 'eval.json').read_text())
    assert summary['rl2'] > 0 and summary['source'] == 'exact'
    frame = pd.read_csv(out / 'time_errors.csv')
    assert list(frame.columns) == ['step', 't', 'relative_error'] and len(frame) == 5


def test_minimal_config_takes_preset_and_method_defaults():
    resolved = resolve_config({'problem': {'name': 'BSB'}, 'loss': {'method': 'shotgun'}}, 'paper')
    assert resolved['network']['width'] == 512 and resolved['network']['precision'] == 'float32'
    assert resolved['train']['iterations'] == 100_000 and resolved['train']['n_steps'] == 10
    assert resolved['loss']['M'] == 50 and resolved['loss']['tau'] == 4.0 ** -5
    pide = resolve_config({'problem': {'name': 'PIDE'}, 'loss': {'method': 'em'}}, 'paper')
    assert pide['network']['activation'] == 'leaky_relu' and pide['train']['schedule'] == 'piecewise'
    problem, config, loss = build_run(resolve_config({'problem': {'name': 'HJB', 'd': 3},
                                                      'loss': {'method': 'heun'}}, 'desk'))
    assert problem.d == 3 and config.network.width == 64 and loss.method == 'heun'


def test_shot_budget_is_split():
    resolved = resolve_config({'problem': {'name': 'BSB'}, 'loss': {'method': 'unem', 'shots': 7}}, 'desk')
    assert (resolved['loss']['M1'], resolved['loss']['M2']) == (4, 3)
    assert resolve_config({'problem': {'name': 'BSB'}, 'loss': {'method': 'multishot_em', 'shots': 3}},
                          'desk')['loss']['M'] == 3
    with pytest.raises(ConfigError):
        resolve_config({'problem': {'name': 'BSB'}, 'loss': {'method': 'unem', 'shots': 6, 'M1': 2}}, 'desk')


@pytest.mark.parametrize('raw', [{}, {'problem': {'name': 'BSB'}},
                                 {'problem': {'name': 'BSB', 'width': 3}, 'loss': {'method': 'em'}},
                                 {'problem': {'name': 'BSB'}, 'loss': {'method': 'em', 'M': 2.5}},
                                 {'problem': {'name': 'BSB'}, 'loss': {'method': 'em'}, 'optimizer': {}},
                                 {'problem': {'name': 'BSB', 'd': True}, 'loss': {'method': 'em'}}])
def test_validation_rejects(raw):
    with pytest.raises(ConfigError):
        validate_raw(raw)


@pytest.mark.parametrize('text', ['', TINY.format(method='unem').replace('[loss]', '[loss]\nM1 = 0'),
                                  TINY.format(method='em') + '\nlearning_rate = "fast"\n',
                                  '[problem\nname = "BSB"',
                                  TINY.format(method='heun').replace('"BSB"', '"PIDE"'),
                                  TINY.format(method='em').replace('"BSB"', '"AC"'),
                                  TINY.format(method='em').replace('"BSB"', '"KdV"')])
def test_invalid_configs_exit_with_one(tmp_path, write_config, text):
    assert run(write_config(text), tmp_path / 'bad') == unbsde.EXIT_INVALID


def test_missing_config_file(tmp_path):
    assert run(str(tmp_path / 'absent.toml'), tmp_path / 'out') == unbsde.EXIT_INVALID


def test_aborted_training_exits_with_two(tmp_path, write_config, monkeypatch):
    def explode(self, iteration):
        raise NonFiniteError('non-finite objective value nan')

    monkeypatch.setattr(Trainer, 'step', explode)
    out = tmp_path / 'aborted'
    assert run(write_config(), out) == unbsde.EXIT_ABORTED
    manifest = json.loads((out / 'manifest.json').read_text())
    assert manifest['status'] == 'failed' and 'non-finite' in manifest['diagnostic']
    assert os.path.exists(out / 'run_log.jsonl')


@pytest.mark.parametrize('error, code', [(ConfigError('bad constraint'), unbsde.EXIT_INVALID),
                                         (NonFiniteError('non-finite surrogate input'), unbsde.EXIT_ABORTED)])
def test_failed_setup_still_writes_the_manifest(tmp_path, write_config, monkeypatch, error, code):
    def refuse(self, problem, config, eval_set=None):
        raise error

    monkeypatch.setattr(Trainer, '__init__', refuse)
    out = tmp_path / 'refused'
    assert run(write_config(), out) == code
    manifest = json.loads((out / 'manifest.json').read_text())
    assert manifest['status'] == 'failed'
    assert manifest['diagnostic'] == f'{type(error).__name__}: {error}'


def test_biaslab_exit_codes(tmp_path, monkeypatch):
    monkeypatch.setattr(unbsde, 'run_suite', lambda suite, preset, seed: [{'check': 'bias', 'passed': True}])
    assert unbsde.main(['biaslab', '--suite', 'bias', '--out', str(tmp_path / 'ok')]) == unbsde.EXIT_OK
    assert (tmp_path / 'ok' / 'biaslab_bias.jsonl').exists()
    monkeypatch.setattr(unbsde, 'run_suite', lambda suite, preset, seed: [{'check': 'bias', 'passed': False},
                                                                          {'check': 'moment', 'passed': True}])
    assert unbsde.main(['biaslab', '--suite', 'bias', '--out', str(tmp_path / 'bad')]) == unbsde.EXIT_VERIFICATION
    manifest = json.loads((tmp_path / 'bad' / 'manifest.json').read_text())
    assert manifest['diagnostic'] == '1 of 2 checks failed'


def test_list_problems(capsys):
    assert unbsde.main(['list-problems']) == unbsde.EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert [json.loads(line)['name'] for line in lines] == ['HJB', 'BSB', 'AC', 'BZ', 'PIDE']


@pytest.mark.parametrize('name', sorted(os.listdir(os.path.join(os.path.dirname(__file__), '..', 'configs'))))
def test_shipped_configs_resolve(name):
    path = os.path.join(os.path.dirname(__file__), '..', 'configs', name)
    problem, config, loss = load_config(path, 'desk')
    assert loss == config.loss and problem.name in ('BSB', 'PIDE', 'HJB')
