"""
Solution fields u(t, x) with exact derivatives.

Every field is a ``torch.nn.Module`` mapping times ``(...,)`` and states ``(..., d)`` to
values ``(...,)``. Spatial gradients, weighted Laplacians ``Tr[sigma^T (grad^2 u) sigma]``
and time derivatives come from reverse-mode automatic differentiation with
``create_graph=True``, so every quantity stays differentiable with respect to the
network parameters.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, NamedTuple, Optional, Tuple, Union

import torch
from torch import nn

from .problems import PDEProblem
from .utils.exceptions import ConfigError, NonFiniteError, ProblemError
from .utils.schemas import checkpoint_format_version, leaky_relu_slope

logger = logging.getLogger('surrogate')

precisions = {'float32': torch.float32, 'float64': torch.float64}
activations = {'mish': nn.Mish, 'leaky_relu': lambda: nn.LeakyReLU(leaky_relu_slope)}


@dataclass(frozen=True)
class NetworkConfig:
    """
    Shape and numerics of the multilayer perceptron.

    Parameters
    ----------
    d : int
        Spatial dimension; the network reads ``d + 1`` inputs ``[t, x]``.
    hidden_layers : int
        Number of hidden layers.
    width : int
        Neurons per hidden layer.
    activation : str
        ``mish`` or ``leaky_relu``.
    init_seed : int
        Seed of the weight initialization.
    precision : str
        ``float32`` or ``float64``.
    """
    d: int
    hidden_layers: int = 4
    width: int = 512
    activation: str = 'mish'
    init_seed: int = 0
    precision: str = 'float64'

    def __post_init__(self) -> None:
        if self.d < 1 or self.width < 1 or self.hidden_layers < 1:
            raise ConfigError(f'network sizes must be positive: {self}')
        if self.activation not in activations:
            raise ConfigError(f'unknown activation {self.activation!r}')
        if self.precision not in precisions:
            raise ConfigError(f'unknown precision {self.precision!r}')

    @property
    def input_dim(self) -> int:
        return self.d + 1

    @property
    def dtype(self) -> torch.dtype:
        return precisions[self.precision]


class FieldEval(NamedTuple):
    value: torch.Tensor
    gradient: torch.Tensor
    laplacian: Optional[torch.Tensor] = None
    time_derivative: Optional[torch.Tensor] = None


def _check_finite(*tensors: torch.Tensor) -> None:
    for tensor in tensors:
        if not bool(torch.isfinite(tensor).all()):
            raise NonFiniteError('non-finite surrogate input')


def _time_like(t, x: torch.Tensor) -> torch.Tensor:
    return torch.broadcast_to(torch.as_tensor(t, dtype=x.dtype), x.shape[:-1])


def _grad_or_zero(output: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
    if not output.requires_grad:
        return torch.zeros_like(inputs)
    (grad,) = torch.autograd.grad(output, inputs, create_graph=True, allow_unused=True)
    return torch.zeros_like(inputs) if grad is None else grad


class FieldBase(nn.Module):
    """
    Common derivative machinery for solution fields.

    Subclasses implement ``forward(t, x)``. ``laplacian_calls`` counts the points at
    which a weighted Laplacian was evaluated.
    """

    def __init__(self, t_end: float) -> None:
        super().__init__()
        self.t_end = float(t_end)
        self.laplacian_calls = 0

    def _value_and_gradient_graph(self, t: torch.Tensor, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        u = self(t, x)
        return u, _grad_or_zero(u.sum(), x)

    def value(self, t, x: torch.Tensor) -> torch.Tensor:
        _check_finite(x, _time_like(t, x))
        return self(_time_like(t, x), x)

    def value_and_gradient(self, t, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        _check_finite(x, _time_like(t, x))
        t = _time_like(t, x)
        with torch.enable_grad():
            x = x.detach().requires_grad_(True)
            return self._value_and_gradient_graph(t, x)

    def gradient(self, t, x: torch.Tensor) -> torch.Tensor:
        return self.value_and_gradient(t, x)[1]

    def evaluate(self, t, x: torch.Tensor,
                 diffuse: Optional[Callable] = None,
                 sigma: Optional[torch.Tensor] = None,
                 time_derivative: bool = False) -> FieldEval:
        """
        Value, gradient and optionally the weighted Laplacian and time derivative.

        Parameters
        ----------
        t : tensor or float
            Times broadcastable to ``x.shape[:-1]``.
        x : torch.Tensor
            States of shape ``(..., d)``.
        diffuse : callable, optional
            ``v -> sigma @ v`` at these points. Enables the weighted Laplacian.
        sigma : torch.Tensor, optional
            Full diffusion matrices ``(..., d, d)``, an alternative to ``diffuse``.
        time_derivative : bool
            Also return ``du/dt``.
        """
        _check_finite(x, _time_like(t, x))
        with torch.enable_grad():
            t_leaf = _time_like(t, x).detach().clone().requires_grad_(time_derivative)
            x_leaf = x.detach().requires_grad_(True)
            u, z = self._value_and_gradient_graph(t_leaf, x_leaf)
            laplacian = None
            if sigma is not None:
                laplacian = self._weighted_trace(x_leaf, z, lambda v, j: sigma[..., :, j])
            elif diffuse is not None:
                laplacian = self._weighted_trace(x_leaf, z, lambda v, j: diffuse(v))
            dudt = _grad_or_zero(u.sum(), t_leaf) if time_derivative else None
        return FieldEval(u, z, laplacian, dudt)

    def _weighted_trace(self, x: torch.Tensor, z: torch.Tensor, column: Callable) -> torch.Tensor:
        d = x.shape[-1]
        eye = torch.eye(d, dtype=x.dtype)
        total = torch.zeros_like(z[..., 0])
        for j in range(d):
            v = column(eye[j].expand_as(x), j).detach()
            hv = _grad_or_zero((z * v).sum(), x)
            total = total + (hv * v).sum(-1)
        self.laplacian_calls += total.numel()
        return total


class MLPField(FieldBase):
    """
    Fully connected network on the concatenated input ``[t, x]``.

    Weights use the default variance-scaled uniform initialization of ``nn.Linear``,
    drawn under a forked torch generator seeded with ``config.init_seed``.
    """

    def __init__(self, config: NetworkConfig, t_end: float) -> None:
        super().__init__(t_end)
        self.config = config
        layers = []
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.init_seed)
            fan_in = config.input_dim
            for _ in range(config.hidden_layers):
                layers += [nn.Linear(fan_in, config.width, dtype=config.dtype), activations[config.activation]()]
                fan_in = config.width
            layers.append(nn.Linear(fan_in, 1, dtype=config.dtype))
        self.net = nn.Sequential(*layers)

    def forward(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        inputs = torch.cat([t.unsqueeze(-1).to(x.dtype), x], dim=-1)
        return self.net(inputs).squeeze(-1)


class HardConstrained(FieldBase):
    """
    Trial field ``g(x) + (t_end - t) net(t, x)``.

    The gradient is assembled from the analytic ``grad_g`` so that value and gradient
    coincide with the terminal data at ``t = t_end`` bit for bit.
    """

    def __init__(self, net: FieldBase, problem: PDEProblem) -> None:
        super().__init__(problem.t_end)
        self.net = net
        self.problem = problem

    def forward(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return self.problem.g(x) + (self.t_end - t) * self.net(t, x)

    def _value_and_gradient_graph(self, t, x):
        inner, inner_grad = self.net._value_and_gradient_graph(t, x)
        remaining = self.t_end - t
        value = self.problem.g(x) + remaining * inner
        gradient = self.problem.grad_g(x) + remaining.unsqueeze(-1) * inner_grad
        return value, gradient


class ClosedFormField(FieldBase):
    """Field given by a torch expression ``fn(t, x)``, e.g. an exact solution."""

    def __init__(self, fn: Callable, t_end: float) -> None:
        super().__init__(t_end)
        self.fn = fn

    @classmethod
    def from_problem(cls, problem: PDEProblem) -> 'ClosedFormField':
        if problem.exact is None:
            raise ProblemError(f'{problem.name} has no analytic solution')
        return cls(problem.exact, problem.t_end)

    def forward(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return self.fn(t, x)


def build_field(config: NetworkConfig, problem: PDEProblem, constraint: str = 'hard') -> FieldBase:
    """Network for ``problem``, wrapped in the hard constraint when requested."""
    net = MLPField(config, problem.t_end)
    if constraint == 'hard':
        return apply_hard_constraint(net, problem)
    if constraint != 'soft':
        raise ConfigError(f'unknown constraint {constraint!r}')
    return net


def eval_value(field: FieldBase, t, x: torch.Tensor) -> torch.Tensor:
    return field.value(t, x)


def eval_gradient(field: FieldBase, t, x: torch.Tensor) -> torch.Tensor:
    return field.gradient(t, x)


def eval_weighted_laplacian(field: FieldBase, t, x: torch.Tensor,
                            sigma: Union[torch.Tensor, Callable]) -> torch.Tensor:
    """``Tr[sigma^T (grad^2 u) sigma]`` as a sum of second directional derivatives along the columns of sigma."""
    if torch.is_tensor(sigma):
        d = x.shape[-1]
        if sigma.shape[-2:] != (d, d):
            raise ProblemError(f'sigma of shape {tuple(sigma.shape)} does not match d={d}')
        return field.evaluate(t, x, sigma=sigma).laplacian
    return field.evaluate(t, x, diffuse=sigma).laplacian


def apply_hard_constraint(raw: FieldBase, problem: PDEProblem) -> HardConstrained:
    if isinstance(raw, HardConstrained):
        raise ConfigError('field already carries the hard constraint')
    return HardConstrained(raw, problem)


def trainable_parameters(field: FieldBase):
    return [p for p in field.parameters() if p.requires_grad]


def param_gradient(objective: Callable[[], torch.Tensor], field: FieldBase) -> torch.Tensor:
    """
    Exact gradient of ``objective()`` with respect to the field parameters, flattened.

    Raises
    ------
    NonFiniteError
        The objective or its gradient is not finite.
    """
    params = trainable_parameters(field)
    loss = objective()
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError(f'non-finite objective value {float(loss)}')
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])
    if not bool(torch.isfinite(flat).all()):
        raise NonFiniteError('non-finite parameter gradient')
    return flat


def flat_parameters(field: FieldBase) -> torch.Tensor:
    return nn.utils.parameters_to_vector(trainable_parameters(field)).detach().clone()


def assign_parameters(field: FieldBase, flat: torch.Tensor) -> None:
    with torch.no_grad():
        nn.utils.vector_to_parameters(flat, trainable_parameters(field))


def _network_of(field: FieldBase) -> MLPField:
    base = field.net if isinstance(field, HardConstrained) else field
    if not isinstance(base, MLPField):
        raise ConfigError(f'cannot checkpoint a {type(base).__name__}')
    return base


def save_checkpoint(field: FieldBase, path: str, extra: Optional[Dict] = None) -> None:
    """Versioned checkpoint: format version, network config, constraint and state dict."""
    network = _network_of(field)
    payload = {'format_version': checkpoint_format_version,
               'network': asdict(network.config),
               'constraint': 'hard' if isinstance(field, HardConstrained) else 'soft',
               't_end': field.t_end,
               'extra': dict(extra or {}),
               'state_dict': network.state_dict()}
    torch.save(payload, path)
    logger.info('checkpoint written to %s', path)


def load_checkpoint(path: str, problem: Optional[PDEProblem] = None) -> Tuple[FieldBase, Dict]:
    """
    Rebuild the field stored at ``path``.

    A hard constrained checkpoint needs the problem that supplies ``g``.
    """
    payload = torch.load(path, weights_only=True)
    if payload.get('format_version') != checkpoint_format_version:
        raise ConfigError(f'unsupported checkpoint format {payload.get("format_version")}')
    network = MLPField(NetworkConfig(**payload['network']), payload['t_end'])
    network.load_state_dict(payload['state_dict'])
    if payload['constraint'] == 'hard':
        if problem is None:
            raise ConfigError('a hard constrained checkpoint needs its problem')
        return HardConstrained(network, problem), payload
    return network, payload
