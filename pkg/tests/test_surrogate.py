import pytest
import torch

from src.losses import LossSpec, total_loss
from src.stochastics import rollout, uniform_grid
from src.surrogate import (ClosedFormField, HardConstrained, MLPField, NetworkConfig, apply_hard_constraint,
                           assign_parameters, build_field, eval_gradient, eval_value, eval_weighted_laplacian,
                           flat_parameters, load_checkpoint, param_gradient, save_checkpoint)
from src.utils.exceptions import ConfigError, NonFiniteError, ProblemError


def points(d, n=6, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(n, generator=gen, dtype=torch.float64), torch.randn(n, d, generator=gen, dtype=torch.float64)


@pytest.mark.parametrize('kwargs', [{'width': 0}, {'hidden_layers': 0}, {'activation': 'relu'},
                                    {'precision': 'float16'}])
def test_network_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        NetworkConfig(d=2, **kwargs)


def test_initialization_is_seeded(small_config):
    first = flat_parameters(MLPField(small_config, 1.0))
    again = flat_parameters(MLPField(small_config, 1.0))
    other = NetworkConfig(d=2, hidden_layers=2, width=8, init_seed=4)
    assert torch.equal(first, again)
    assert not torch.equal(first, flat_parameters(MLPField(other, 1.0)))
    assert first.numel() == 3 * 8 + 8 + 8 * 8 + 8 + 8 + 1


def test_hard_constraint_is_exact_at_terminal_time(small_config, bsb2):
    field = build_field(small_config, bsb2, 'hard')
    _, x = points(2)
    y, z = field.value_and_gradient(1.0, x)
    assert torch.equal(y, bsb2.g(x))
    assert torch.equal(z, bsb2.grad_g(x))
    with pytest.raises(ConfigError):
        apply_hard_constraint(field, bsb2)
    with pytest.raises(ConfigError):
        build_field(small_config, bsb2, 'loose')
    assert isinstance(build_field(small_config, bsb2, 'soft'), MLPField)


def test_gradient_matches_finite_differences(net):
    t, x = points(2)
    _, z = net.value_and_gradient(t, x)
    h = 1e-6
    for k in range(2):
        step = torch.zeros(2, dtype=torch.float64)
        step[k] = h
        fd = (net.value(t, x + step) - net.value(t, x - step)) / (2 * h)
        assert torch.allclose(z[:, k], fd, atol=1e-5)


def test_value_and_gradient_helpers_agree_with_the_field(net):
    t, x = points(2)
    value, grad = net.value_and_gradient(t, x)
    assert torch.allclose(eval_value(net, t, x), value)
    assert torch.allclose(eval_gradient(net, t, x), grad)
    quadratic = ClosedFormField(lambda t, x: 0.5 * (x * x).sum(-1), 1.0)
    assert torch.allclose(eval_gradient(quadratic, t, x), x)


def test_weighted_laplacian_of_quadratic():
    a = torch.tensor([[2.0, 0.5], [0.5, -1.0]], dtype=torch.float64)
    field = ClosedFormField(lambda t, x: 0.5 * torch.einsum('...i,ij,...j->...', x, a, x), 1.0)
    sigma = torch.tensor([[1.0, 0.3], [0.0, 2.0]], dtype=torch.float64)
    t, x = points(2, n=3)
    lap = eval_weighted_laplacian(field, t, x, sigma.expand(3, 2, 2))
    assert torch.allclose(lap, torch.full((3,), float(torch.trace(sigma.T @ a @ sigma)), dtype=torch.float64))
    from_diffuse = eval_weighted_laplacian(field, t, x, lambda v: v @ sigma.T)
    assert torch.allclose(from_diffuse, lap)
    assert field.laplacian_calls == 6
    with pytest.raises(ProblemError):
        eval_weighted_laplacian(field, t, x, torch.eye(3, dtype=torch.float64))


def test_network_laplacian_matches_finite_differences(net):
    t, x = points(2, n=4)
    lap = net.evaluate(t, x, diffuse=lambda v: v).laplacian
    h = 1e-4
    fd = torch.zeros(4, dtype=torch.float64)
    for k in range(2):
        step = torch.zeros(2, dtype=torch.float64)
        step[k] = h
        fd += (net.value(t, x + step) - 2 * net.value(t, x) + net.value(t, x - step)) / h ** 2
    assert torch.allclose(lap, fd, atol=1e-4)


def test_time_derivative(net):
    t, x = points(2, n=4)
    dudt = net.evaluate(t, x, time_derivative=True).time_derivative
    h = 1e-6
    fd = (net.value(t + h, x) - net.value(t - h, x)) / (2 * h)
    assert torch.allclose(dudt, fd, atol=1e-5)


def test_nonfinite_input_is_rejected(net):
    x = torch.tensor([[float('nan'), 0.0]], dtype=torch.float64)
    with pytest.raises(NonFiniteError):
        net.value(0.0, x)


@pytest.mark.parametrize('t', [float('nan'), float('inf'), torch.tensor([0.1, float('nan')], dtype=torch.float64)])
def test_nonfinite_time_is_rejected(net, t):
    x = torch.zeros(2, 2, dtype=torch.float64)
    with pytest.raises(NonFiniteError):
        net.value(t, x)
    with pytest.raises(NonFiniteError):
        net.value_and_gradient(t, x)
    with pytest.raises(NonFiniteError):
        net.evaluate(t, x, sigma=torch.eye(2, dtype=torch.float64))


def directional_fd(objective, field, direction, h):
    base = flat_parameters(field)
    assign_parameters(field, base + h * direction)
    up = float(objective())
    assign_parameters(field, base - h * direction)
    down = float(objective())
    assign_parameters(field, base)
    return (up - down) / (2 * h)


@pytest.mark.parametrize('method, tolerance', [('em', 1e-4), ('heun', 1e-3)])
def test_param_gradient_matches_finite_differences(small_config, bsb2, method, tolerance):
    field = build_field(small_config, bsb2)
    spec = LossSpec(method=method)
    bundle = rollout(bsb2, uniform_grid(4, 1.0), spec.scheme(bsb2), field, seed=2, batch_size=3)

    def objective():
        return total_loss(spec, field, bsb2, bundle)

    grad = param_gradient(objective, field)
    direction = torch.randn(grad.numel(), generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    direction /= direction.norm()
    fd = directional_fd(objective, field, direction, 1e-5)
    assert float(grad @ direction) == pytest.approx(fd, rel=tolerance, abs=tolerance)


def test_param_gradient_is_linear(net):
    t, x = points(2)

    def first():
        return net.value(t, x).sum()

    def second():
        return (net.value(t, x) ** 2).sum()

    combined = param_gradient(lambda: 2.0 * first() + 3.0 * second(), net)
    assert torch.allclose(combined, 2.0 * param_gradient(first, net) + 3.0 * param_gradient(second, net))


def test_param_gradient_rejects_nonfinite(net):
    with pytest.raises(NonFiniteError):
        param_gradient(lambda: net.value(0.0, torch.zeros(1, 2, dtype=torch.float64)).sum() * float('inf'), net)


def test_checkpoint_round_trip(tmp_path, small_config, bsb2):
    field = build_field(small_config, bsb2)
    path = str(tmp_path / 'field.pt')
    save_checkpoint(field, path, {'seed': 3})
    loaded, payload = load_checkpoint(path, bsb2)
    assert isinstance(loaded, HardConstrained)
    assert payload['extra'] == {'seed': 3}
    t, x = points(2)
    assert torch.equal(loaded.value(t, x), field.value(t, x))
    with pytest.raises(ConfigError):
        load_checkpoint(path)


def test_checkpoint_errors(tmp_path, bsb_exact):
    with pytest.raises(ConfigError):
        save_checkpoint(bsb_exact, str(tmp_path / 'exact.pt'))
    path = tmp_path / 'old.pt'
    torch.save({'format_version': 0}, path)
    with pytest.raises(ConfigError):
        load_checkpoint(str(path))
