import dataclasses
import math
import time

import pytest
import torch

from src.losses import LossSpec
from src.problems import make_problem
from src.stochastics import uniform_grid
from src.surrogate import ClosedFormField, flat_parameters
from src.training import (EvaluationSet, RunRecord, TrainConfig, Trainer, adam_init, adam_step,
                          generate_reference_trajectories, lr_schedule, relative_error_by_time, rl2, train)
from src.utils.configio import build_run, resolve_config
from src.utils.exceptions import ConfigError, NonFiniteError, ReferenceUnavailable, TrainingAborted
from src.utils.schemas import time_error_columns


@pytest.fixture
def tiny(small_config):
    return TrainConfig(network=small_config, loss=LossSpec('em'), iterations=3, batch_size=8, n_steps=4,
                       eval_every=1, n_eval_trajectories=4, seed=5, eval_seed=9)


def test_cosine_schedule():
    assert lr_schedule('cosine', 0, 100, 1e-3) == pytest.approx(1e-3)
    assert lr_schedule('cosine', 50, 100, 1e-3) == pytest.approx(5e-4)
    assert lr_schedule('cosine', 100, 100, 1e-3) == pytest.approx(0.0, abs=1e-18)
    assert lr_schedule('cosine', 0, 0, 1e-3) == 1e-3


def test_piecewise_schedule():
    rates = [lr_schedule('piecewise', k, 100, 1.0) for k in (0, 49, 50, 74, 75, 100)]
    assert rates == pytest.approx([1.0, 1.0, 0.1, 0.1, 0.01, 0.01])
    with pytest.raises(ValueError):
        lr_schedule('piecewise', 101, 100, 1.0)
    with pytest.raises(ValueError):
        lr_schedule('linear', 1, 100, 1.0)


@pytest.mark.parametrize('kwargs', [{'iterations': -1}, {'schedule': 'step'}, {'learning_rate': 0.0},
                                    {'factors': (1.0, 0.1)}, {'boundaries': (0.8, 0.2)},
                                    {'beta1': 1.0}, {'grad_clip': -1.0}, {'n_eval_trajectories': -1}])
def test_train_config_rejects(small_config, kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(network=small_config, loss=LossSpec('em'), **kwargs)


def test_first_adam_step_moves_by_the_learning_rate():
    state = adam_init(torch.tensor([1.0, -2.0], dtype=torch.float64))
    grads = torch.tensor([0.5, -4.0], dtype=torch.float64)
    adam_step(state, grads, 0.1)
    assert torch.allclose(state.params.detach(), torch.tensor([0.9, -1.9], dtype=torch.float64), atol=1e-7)
    assert state.step == 1
    first, second = state.moments()
    assert torch.allclose(first, 0.1 * grads)
    assert torch.allclose(second, 0.001 * grads ** 2)


def test_zero_gradient_leaves_parameters():
    state = adam_init(torch.tensor([1.0, -2.0], dtype=torch.float64))
    adam_step(state, torch.zeros(2, dtype=torch.float64), 0.1)
    assert torch.equal(state.params.detach(), torch.tensor([1.0, -2.0], dtype=torch.float64))


def test_adam_rejects_bad_gradients():
    state = adam_init(torch.zeros(2, dtype=torch.float64))
    with pytest.raises(NonFiniteError):
        adam_step(state, torch.tensor([float('nan'), 0.0], dtype=torch.float64), 0.1)
    with pytest.raises(ValueError):
        adam_step(state, torch.zeros(3, dtype=torch.float64), 0.1)


def test_adam_minimizes_a_convex_quadratic():
    state = adam_init(torch.tensor([3.0, -1.5, 0.5], dtype=torch.float64))
    start = float(state.params.norm())
    for _ in range(300):
        adam_step(state, 2.0 * state.params.detach(), 0.05)
    assert float(state.params.norm()) < 0.1 * start


def test_reference_trajectories_from_closed_form(bsb2):
    eval_set = generate_reference_trajectories(bsb2, 3, uniform_grid(4, 1.0), seed=2)
    assert eval_set.source == 'exact' and len(eval_set) == 3
    assert eval_set.x.shape == (3, 5, 2) and eval_set.u.shape == (3, 5)
    assert torch.equal(eval_set.x[:, 0], bsb2.x0_tensor().expand(3, 2))
    assert torch.allclose(eval_set.u[:, -1], bsb2.g(eval_set.x[:, -1]))
    again = generate_reference_trajectories(bsb2, 3, uniform_grid(4, 1.0), seed=2)
    assert torch.equal(again.x, eval_set.x)


def test_reference_trajectories_special_cases(hjb2):
    assert len(generate_reference_trajectories(make_problem('BSB', d_override=2), 0, uniform_grid(2, 1.0), 1)) == 0
    ac = generate_reference_trajectories(make_problem('AC'), 8, uniform_grid(2, 0.3), 1)
    assert ac.source == 'point' and float(ac.u) == pytest.approx(0.30879)
    with pytest.raises(ReferenceUnavailable):
        generate_reference_trajectories(make_problem('AC', d_override=5), 8, uniform_grid(2, 0.3), 1)
    hjb = generate_reference_trajectories(hjb2, 1, uniform_grid(2, 1.0), 1, hjb_samples=200)
    assert hjb.source == 'monte_carlo'
    x_end = hjb.x[0, -1]
    assert float(hjb.u[0, -1]) == pytest.approx(math.log(0.5 * (1.0 + float(x_end @ x_end))))


def test_rl2_of_exact_and_scaled_fields(bsb2, bsb_exact):
    eval_set = generate_reference_trajectories(bsb2, 4, uniform_grid(5, 1.0), seed=0)
    assert rl2(bsb_exact, eval_set) == pytest.approx(0.0, abs=1e-14)
    scaled = ClosedFormField(lambda t, x: 1.1 * bsb2.exact(t, x), 1.0)
    assert rl2(scaled, eval_set) == pytest.approx(0.1, rel=1e-10)
    frame = relative_error_by_time(scaled, eval_set)
    assert list(frame.columns) == time_error_columns and len(frame) == 6
    assert frame['relative_error'].to_numpy() == pytest.approx([0.1] * 6, rel=1e-10)


def test_rl2_without_reference(bsb_exact):
    empty = EvaluationSet(torch.zeros(0, 0), torch.zeros(0, 0, 2), torch.zeros(0, 0), 0, 'empty')
    with pytest.raises(ReferenceUnavailable):
        rl2(bsb_exact, empty)
    zero = EvaluationSet(torch.zeros(1, 2, dtype=torch.float64), torch.ones(1, 2, 2, dtype=torch.float64),
                         torch.zeros(1, 2, dtype=torch.float64), 0, 'exact')
    with pytest.raises(ReferenceUnavailable):
        rl2(bsb_exact, zero)


def test_zero_iterations_returns_initial_field(bsb2, small_config):
    config = TrainConfig(network=small_config, loss=LossSpec('em'), iterations=0, n_steps=4, n_eval_trajectories=2)
    trainer = Trainer(bsb2, config)
    before = flat_parameters(trainer.field)
    field, record = trainer.train()
    assert torch.equal(flat_parameters(field), before)
    assert len(record.entries) == 1 and record.entries[0]['iteration'] == 0
    assert record.entries[0]['loss'] is None and record.entries[0]['rl2'] is not None
    assert record.status == 'completed'


def test_training_is_deterministic(bsb2, tiny):
    first_field, first = train(bsb2, tiny)
    second_field, second = train(bsb2, tiny)
    assert torch.equal(flat_parameters(first_field), flat_parameters(second_field))
    assert [e['loss'] for e in first.entries] == [e['loss'] for e in second.entries]
    assert [e['iteration'] for e in first.entries] == [0, 1, 2, 3]
    assert all(e['eval_seed'] == 9 for e in first.entries)


def test_seed_changes_the_run(bsb2, tiny):
    first_field, _ = train(bsb2, tiny)
    other_field, _ = train(bsb2, dataclasses.replace(tiny, seed=6))
    assert not torch.equal(flat_parameters(first_field), flat_parameters(other_field))


def test_nonfinite_loss_aborts(bsb2, tiny):
    broken = dataclasses.replace(bsb2, phi=lambda t, x, y, z: y * float('nan'))
    with pytest.raises(TrainingAborted) as info:
        train(broken, dataclasses.replace(tiny, n_eval_trajectories=0))
    assert info.value.iteration == 0
    assert info.value.record.status == 'failed'
    assert len(info.value.record.entries) == 1


def test_run_record_round_trip(tmp_path, bsb2, tiny):
    _, record = train(bsb2, tiny)
    path = str(tmp_path / 'run_log.jsonl')
    record.to_jsonl(path)
    loaded = RunRecord.from_jsonl(path)
    assert loaded.entries == record.entries
    assert loaded.status == 'completed' and loaded.seeds == record.seeds
    assert list(loaded.history().columns) == ['iteration', 'loss', 'lr', 'rl2', 'wall_seconds']
    with pytest.raises(ValueError):
        loaded.log(2, 0.1, 1e-3, None, 0.0)


def desk_run(method, d=10, seed=None, **train):
    raw = {'problem': {'name': 'BSB', 'd': d}, 'loss': {'method': method}, 'train': train}
    if method == 'unem':
        raw['loss'].update(M1=5, M2=5)
    problem, config, _ = build_run(resolve_config(raw, 'desk', seed))
    return problem, config


def seconds_per_iteration(method, repeats=10):
    problem, config = desk_run(method, n_eval_trajectories=0)
    trainer = Trainer(problem, config)
    trainer.step(0)
    start = time.perf_counter()
    for k in range(1, repeats + 1):
        trainer.step(k)
    return (time.perf_counter() - start) / repeats


@pytest.mark.slow
def test_unem_training_on_bsb2_reduces_the_error():
    problem, config = desk_run('unem', d=2, iterations=2000)
    assert config.loss.constraint == 'hard' and config.network.d == 2
    _, record = train(problem, config)
    assert record.entries[0]['iteration'] == 0 and record.entries[-1]['iteration'] == 2000
    assert record.entries[-1]['rl2'] < record.entries[0]['rl2']


@pytest.mark.slow
def test_unem_beats_em_on_bsb10_at_matched_budget():
    finals = {}
    for method in ('em', 'unem'):
        runs = []
        for seed in (0, 1, 2):
            problem, config = desk_run(method, seed=seed)
            assert (config.iterations, config.n_steps, config.loss.constraint) == (3000, 50, 'hard')
            runs.append(train(problem, config)[1].entries[-1]['rl2'])
        finals[method] = sum(runs) / len(runs)
    assert finals['unem'] < finals['em']


@pytest.mark.slow
def test_heun_iterations_cost_at_least_three_unem_iterations():
    assert seconds_per_iteration('heun') >= 3.0 * seconds_per_iteration('unem')
