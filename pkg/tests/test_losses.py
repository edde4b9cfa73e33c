import dataclasses

import pytest
import torch

from src.losses import (LossSpec, em_step_errors, err_em, err_shotgun, loss_em, loss_fs_pinns, loss_heun,
                        loss_multishot_em, loss_shotgun, loss_terminal, loss_unem, loss_unshotgun, shot_average,
                        step_errors, total_loss)
from src.problems import make_problem
from src.stochastics import Scheme, em_forward_step, rollout, uniform_grid
from src.surrogate import ClosedFormField, build_field
from src.utils.configio import resolve_config
from src.utils.exceptions import ConfigError, SchemeMismatchError


@pytest.fixture
def driftless():
    """Unit diffusion, no drift and no driver."""
    problem = make_problem('AC', d_override=2)
    return dataclasses.replace(problem, phi=lambda t, x, y, z: torch.zeros_like(y))


def linear_field(d, t_end=1.0):
    weights = torch.linspace(-1.0, 1.0, d, dtype=torch.float64)
    return ClosedFormField(lambda t, x: x @ weights, t_end)


def quadratic_field(t_end=1.0):
    return ClosedFormField(lambda t, x: 0.5 * (x * x).sum(-1), t_end)


def test_shot_average():
    assert shot_average([1.0, 2.0, 6.0]) == 3.0
    assert torch.equal(shot_average(torch.tensor([[1.0, 3.0], [2.0, 2.0]])), torch.tensor([2.0, 2.0]))
    with pytest.raises(ValueError):
        shot_average([])
    with pytest.raises(ValueError):
        shot_average(torch.zeros(2, 0))


def test_em_error_of_time_independent_affine_field_vanishes(driftless):
    x = torch.randn(5, 2, dtype=torch.float64)
    dW = 0.3 * torch.randn(5, 2, dtype=torch.float64)
    x_next = em_forward_step(driftless, 0.0, x, 0.09, dW)
    err = err_em(linear_field(2), driftless, 0.0, x, x_next, 0.09, dW)
    assert err.abs().max() < 1e-14


def test_em_error_of_quadratic_is_half_squared_increment(driftless):
    x = torch.randn(5, 2, dtype=torch.float64)
    dW = 0.3 * torch.randn(5, 2, dtype=torch.float64)
    x_next = em_forward_step(driftless, 0.1, x, 0.09, dW)
    err = err_em(quadratic_field(), driftless, 0.1, x, x_next, 0.09, dW)
    assert torch.allclose(err, 0.5 * (dW * dW).sum(-1))
    normalized = err_em(quadratic_field(), driftless, 0.1, x, x_next, 0.09, dW, normalization='dt')
    assert torch.allclose(normalized, err / 0.09)


def test_em_error_checks_the_step(driftless):
    x = torch.zeros(2, 2, dtype=torch.float64)
    dW = torch.ones(2, 2, dtype=torch.float64)
    with pytest.raises(SchemeMismatchError):
        err_em(quadratic_field(), driftless, 0.0, x, x + 2.0 * dW, 0.1, dW)


def test_shotgun_error_of_quadratic(driftless):
    x = torch.randn(4, 2, dtype=torch.float64)
    spread = 0.01 * torch.randn(4, 2, dtype=torch.float64)
    err = err_shotgun(quadratic_field(), driftless, 0.0, x, x + spread, x - spread, 1e-4)
    assert torch.allclose(err, (spread * spread).sum(-1) / 2e-4)


def test_single_shot_multishot_equals_em(bsb2, bsb_exact):
    bundle = rollout(bsb2, uniform_grid(5, 1.0), Scheme('multishot', 3), seed=4, batch_size=8)
    assert torch.equal(loss_em(bsb_exact, bsb2, bundle), loss_multishot_em(bsb_exact, bsb2, bundle, 1))


def test_multishot_averages_before_squaring(bsb2, bsb_exact):
    bundle = rollout(bsb2, uniform_grid(3, 1.0), Scheme('multishot', 4), seed=1, batch_size=5)
    err = em_step_errors(bsb_exact, bsb2, bundle)
    assert err.shape == (5, 3, 4)
    expected = err.mean(-1).pow(2).sum(-1).mean()
    assert torch.allclose(loss_multishot_em(bsb_exact, bsb2, bundle, 4), expected)
    with pytest.raises(SchemeMismatchError):
        loss_multishot_em(bsb_exact, bsb2, bundle, 5)


def test_unem_is_product_of_group_means(bsb2, bsb_exact):
    bundle = rollout(bsb2, uniform_grid(3, 1.0), Scheme('multishot', 5), seed=6, batch_size=7)
    err = em_step_errors(bsb_exact, bsb2, bundle)
    expected = (err[..., :2].mean(-1) * err[..., 2:5].mean(-1)).sum(-1).mean()
    assert torch.allclose(loss_unem(bsb_exact, bsb2, bundle, 2, 3), expected)
    groups = step_errors(bsb_exact, bsb2, bundle, (2, 3))
    assert torch.equal(groups.group1, err[..., :2].mean(-1))
    with pytest.raises(SchemeMismatchError):
        step_errors(bsb_exact, bsb2, bundle, (3, 3))


def test_linear_field_on_bsb_has_zero_em_and_heun_errors(bsb2):
    field = linear_field(2)
    em = rollout(bsb2, uniform_grid(4, 1.0), Scheme('multishot', 2), seed=0, batch_size=4)
    assert em_step_errors(field, bsb2, em).abs().max() < 1e-14
    heun = rollout(bsb2, uniform_grid(4, 1.0), Scheme('heun'), seed=0, batch_size=4)
    assert float(loss_heun(field, bsb2, heun)) < 1e-24


def test_heun_evaluates_laplacians_at_both_stages(bsb2, bsb_exact):
    bundle = rollout(bsb2, uniform_grid(3, 1.0), Scheme('heun'), seed=0, batch_size=4)
    loss_heun(bsb_exact, bsb2, bundle)
    assert bsb_exact.laplacian_calls == 2 * 4 * 3


def test_fs_pinns_vanishes_on_exact_solution(bsb2, bsb_exact):
    bundle = rollout(bsb2, uniform_grid(4, 1.0), Scheme('em'), seed=0, batch_size=4)
    assert float(loss_fs_pinns(bsb_exact, bsb2, bundle)) < 1e-20


def test_terminal_penalty(bsb2, small_config):
    offset = ClosedFormField(lambda t, x: bsb2.exact(t, x) + 0.25, 1.0)
    bundle = rollout(bsb2, uniform_grid(2, 1.0), Scheme('em'), seed=0, batch_size=3)
    assert float(loss_terminal(offset, bsb2, bundle)) == pytest.approx(0.0625, rel=1e-12)
    with pytest.raises(ConfigError):
        loss_terminal(build_field(small_config, bsb2, 'hard'), bsb2, bundle)


def test_total_loss_adds_weighted_terminal_penalty(bsb2, small_config):
    field = build_field(small_config, bsb2, 'soft')
    bundle = rollout(bsb2, uniform_grid(3, 1.0), Scheme('em'), seed=0, batch_size=4)
    bare = total_loss(LossSpec('em', constraint='soft', terminal_weight=0.0), field, bsb2, bundle)
    weighted = total_loss(LossSpec('em', constraint='soft', terminal_weight=1.0), field, bsb2, bundle)
    assert torch.allclose(weighted - bare, loss_terminal(field, bsb2, bundle))
    assert torch.equal(bare, loss_em(field, bsb2, bundle))


def test_total_loss_checks_its_inputs(bsb2, small_config):
    hard = build_field(small_config, bsb2, 'hard')
    bundle = rollout(bsb2, uniform_grid(3, 1.0), Scheme('em'), seed=0, batch_size=2)
    with pytest.raises(ConfigError):
        total_loss(LossSpec('em', constraint='soft'), hard, bsb2, bundle)
    with pytest.raises(SchemeMismatchError):
        total_loss(LossSpec('multishot_em', M=3), hard, bsb2, bundle)
    with pytest.raises(SchemeMismatchError):
        total_loss(LossSpec('heun'), hard, bsb2, bundle)


@pytest.mark.parametrize('kwargs', [{'method': 'sgd'}, {'method': 'unem', 'M1': 0},
                                    {'method': 'shotgun', 'M': 5}, {'method': 'em', 'normalization': 'dx'},
                                    {'method': 'em', 'constraint': 'free'},
                                    {'method': 'em', 'terminal_weight': -1.0}])
def test_loss_spec_rejects(kwargs):
    with pytest.raises(ConfigError):
        LossSpec(**kwargs)


def test_loss_spec_schemes(bsb2):
    pide = make_problem('PIDE', d_override=2)
    assert LossSpec('em').scheme(bsb2) == Scheme('em')
    assert LossSpec('multishot_em', M=7).scheme(bsb2) == Scheme('multishot', 7)
    assert LossSpec('unem', M1=2, M2=3).scheme(pide) == Scheme('pide', 5)
    assert LossSpec('unshotgun', M1=4, M2=4, tau=1e-3).scheme(bsb2) == Scheme('shotgun', 8, 1e-3)
    assert LossSpec('heun').scheme(bsb2) == Scheme('heun')
    with pytest.raises(SchemeMismatchError):
        LossSpec('heun').scheme(pide)


@pytest.mark.parametrize('method', ['shotgun', 'unshotgun', 'heun'])
def test_jump_problem_refuses_methods_without_a_jump_step(method):
    pide = make_problem('PIDE', d_override=2)
    with pytest.raises(SchemeMismatchError):
        LossSpec(method, tau=1e-3).scheme(pide)
    with pytest.raises(ConfigError, match='not available on PIDE'):
        resolve_config({'problem': {'name': 'PIDE'}, 'loss': {'method': method}}, 'desk')
    with pytest.raises(SchemeMismatchError):
        rollout(pide, uniform_grid(4, 1.0), Scheme('shotgun', 2, 1e-3), batch_size=2)


def test_em_loss_of_exact_solution_shrinks_with_the_step(bsb2, bsb_exact):
    coarse = rollout(bsb2, uniform_grid(4, 1.0), Scheme('em'), seed=3, batch_size=256)
    fine = rollout(bsb2, uniform_grid(64, 1.0), Scheme('em'), seed=3, batch_size=256)
    assert float(loss_em(bsb_exact, bsb2, fine)) < 0.25 * float(loss_em(bsb_exact, bsb2, coarse))


def test_shotgun_losses_on_the_antithetic_bundle(bsb2, bsb_exact):
    bundle = rollout(bsb2, uniform_grid(3, 1.0), Scheme('shotgun', 4, tau=1e-3), seed=5, batch_size=6)
    err = step_errors(bsb_exact, bsb2, bundle).err
    assert err.shape == (6, 3, 4)
    expected = err[..., :2].mean(-1).pow(2).sum(-1).mean()
    assert torch.allclose(loss_shotgun(bsb_exact, bsb2, bundle, 2, 1e-3), expected)
    product = (err[..., :2].mean(-1) * err[..., 2:].mean(-1)).sum(-1).mean()
    assert torch.allclose(loss_unshotgun(bsb_exact, bsb2, bundle, 2, 2, 1e-3), product)
    with pytest.raises(SchemeMismatchError):
        loss_shotgun(bsb_exact, bsb2, bundle, 2, 1e-2)
    with pytest.raises(SchemeMismatchError):
        loss_unshotgun(bsb_exact, bsb2, bundle, 3, 2, 1e-3)
