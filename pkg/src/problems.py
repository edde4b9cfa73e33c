"""
Problem definitions for terminal-value PDEs and their forward-backward SDE form.

A problem bundles the coefficients mu, sigma, phi and the terminal data g as torch
callables acting on batched inputs: times of shape ``(...,)``, states of shape
``(..., d)``. The catalog holds the five benchmarks HJB, BSB, AC, BZ and PIDE with
their exact or reference solutions.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np
import torch
from numpy.polynomial.hermite_e import hermegauss

from .utils.exceptions import ProblemError
from .utils.seeding import rng_stream
from .utils.schemas import (ac_reference, benchmark_names, benchmark_parameters,
                            gauss_hermite_nodes, nonnegative_parameters, two_pi_sqrt)

logger = logging.getLogger('problems')


@dataclass(frozen=True)
class JumpSpec:
    """
    Compound Poisson jump description of the PIDE benchmark.

    Parameters
    ----------
    lam : float
        Poisson intensity per unit time.
    mu_phi : float
        Mean of the Gaussian jump sizes.
    sigma_phi : float
        Standard deviation of the Gaussian jump sizes.
    tau_diff : float
        Diffusion scale of the Brownian part.
    epsilon : float
        Drift scale.
    """
    lam: float
    mu_phi: float
    sigma_phi: float
    tau_diff: float
    epsilon: float

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ProblemError(f'jump intensity must be non-negative, got {self.lam}')
        if self.sigma_phi < 0:
            raise ProblemError(f'jump size deviation must be non-negative, got {self.sigma_phi}')

    @property
    def second_moment(self) -> float:
        return self.mu_phi ** 2 + self.sigma_phi ** 2


@dataclass(frozen=True, eq=False)
class PDEProblem:
    """
    Coefficients and terminal data of a PDE in forward-backward form.

    All callables take torch tensors. ``sigma`` returns the full ``(..., d, d)``
    matrix; ``diffuse(t, x, y, v)`` returns the product ``sigma @ v`` without
    materializing the matrix and is what the solvers use in high dimension.
    ``y`` carries the current solution value for fully coupled problems and is
    ignored otherwise.
    """
    name: str
    d: int
    t_end: float
    x0: np.ndarray
    mu: Callable
    sigma: Callable
    diffuse: Callable
    phi: Callable
    g: Callable
    grad_g: Callable
    exact: Optional[Callable] = None
    reference_u0: Optional[float] = None
    jump_spec: Optional[JumpSpec] = None
    sigma_jacobian: Optional[Callable] = None
    ito_drift: Optional[Callable] = None
    coupled: bool = False
    params: Mapping[str, float] = field(default_factory=dict)

    def x0_tensor(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.x0, dtype=dtype)

    def ito_correction(self, t, x, y=None, z=None) -> torch.Tensor:
        """
        Vector ``c = 1/2 sum_k (d_k sigma) sigma[k, :]`` turning Ito into Stratonovich drift.

        Uses the analytic ``ito_drift`` when the benchmark supplies one and falls back to
        contracting ``sigma_jacobian`` with ``sigma`` otherwise.
        """
        if self.ito_drift is not None:
            return self.ito_drift(t, x, y, z)
        if self.sigma_jacobian is None:
            raise ProblemError(f'{self.name} defines no sigma jacobian')
        jac = self.sigma_jacobian(t, x, y, z)
        sig = self.sigma(t, x, y)
        return 0.5 * torch.einsum('...kjl,...kl->...j', jac, sig)


def _time_like(t, x: torch.Tensor) -> torch.Tensor:
    return torch.broadcast_to(torch.as_tensor(t, dtype=x.dtype), x.shape[:-1])


def _sq_norm(x: torch.Tensor) -> torch.Tensor:
    return (x * x).sum(-1)


def _scalar_diffusion(scale: Callable) -> Tuple[Callable, Callable]:
    """Build ``sigma`` and ``diffuse`` for a diffusion of the form ``scale(t, x, y) * I``."""
    def sigma(t, x, y=None):
        s = scale(t, x, y)
        eye = torch.eye(x.shape[-1], dtype=x.dtype)
        return s[..., None, None] * eye

    def diffuse(t, x, y, v):
        return scale(t, x, y)[..., None] * v

    return sigma, diffuse


def _zero_jacobian(t, x, y=None, z=None):
    d = x.shape[-1]
    return x.new_zeros(x.shape[:-1] + (d, d, d))


def _zero_drift(t, x, y=None, z=None):
    return torch.zeros_like(x)


def _hjb(d: int, p: Dict[str, float]) -> PDEProblem:
    root2 = math.sqrt(2.0)
    sigma, diffuse = _scalar_diffusion(lambda t, x, y: torch.full(x.shape[:-1], root2, dtype=x.dtype))

    return PDEProblem(
        name='HJB', d=d, t_end=p['t_end'], x0=np.zeros(d),
        mu=lambda t, x: torch.zeros_like(x),
        sigma=sigma, diffuse=diffuse,
        phi=lambda t, x, y, z: _sq_norm(z),
        g=lambda x: torch.log(0.5 * (1.0 + _sq_norm(x))),
        grad_g=lambda x: 2.0 * x / (1.0 + _sq_norm(x))[..., None],
        sigma_jacobian=_zero_jacobian, ito_drift=_zero_drift, params=p)


def _bsb(d: int, p: Dict[str, float]) -> PDEProblem:
    r, alpha, t_end = p['r'], p['alpha'], p['t_end']

    def sigma(t, x, y=None):
        return torch.diag_embed(alpha * x)

    def diffuse(t, x, y, v):
        return alpha * x * v

    def jacobian(t, x, y=None, z=None):
        eye = torch.eye(d, dtype=x.dtype)
        # d_k sigma = alpha e_k e_k^T
        jac = alpha * eye[:, :, None] * eye[:, None, :]
        return torch.broadcast_to(jac, x.shape[:-1] + (d, d, d))

    x0 = np.where(np.arange(d) % 2 == 0, 1.0, 0.5)
    return PDEProblem(
        name='BSB', d=d, t_end=t_end, x0=x0,
        mu=lambda t, x: torch.zeros_like(x),
        sigma=sigma, diffuse=diffuse,
        phi=lambda t, x, y, z: r * (y - (z * x).sum(-1)),
        g=_sq_norm,
        grad_g=lambda x: 2.0 * x,
        exact=lambda t, x: torch.exp((r + alpha ** 2) * (t_end - _time_like(t, x))) * _sq_norm(x),
        sigma_jacobian=jacobian,
        ito_drift=lambda t, x, y=None, z=None: 0.5 * alpha ** 2 * x,
        params=p)


def _ac(d: int, p: Dict[str, float]) -> PDEProblem:
    sigma, diffuse = _scalar_diffusion(lambda t, x, y: torch.ones(x.shape[:-1], dtype=x.dtype))
    on_reference = d == ac_reference['d'] and math.isclose(p['t_end'], ac_reference['t_end'])
    if not on_reference:
        logger.info('AC at d=%d, t_end=%g has no reference value', d, p['t_end'])

    return PDEProblem(
        name='AC', d=d, t_end=p['t_end'], x0=np.zeros(d),
        mu=lambda t, x: torch.zeros_like(x),
        sigma=sigma, diffuse=diffuse,
        phi=lambda t, x, y, z: y ** 3 - y,
        g=lambda x: 1.0 / (2.0 + 0.4 * _sq_norm(x)),
        grad_g=lambda x: -0.8 * x / ((2.0 + 0.4 * _sq_norm(x)) ** 2)[..., None],
        reference_u0=ac_reference['u0'] if on_reference else None,
        sigma_jacobian=_zero_jacobian, ito_drift=_zero_drift, params=p)


def _bz(d: int, p: Dict[str, float]) -> PDEProblem:
    r, alpha, big_d, t_end = p['r'], p['alpha'], p['D'], p['t_end']

    def scale(t, x, y):
        if y is None:
            raise ProblemError('BZ diffusion depends on the solution value, none was given')
        return alpha * torch.broadcast_to(torch.as_tensor(y, dtype=x.dtype), x.shape[:-1])

    sigma, diffuse = _scalar_diffusion(scale)

    def phi(t, x, y, z):
        s = big_d * torch.sin(x).sum(-1)
        return r * y - 0.5 * torch.exp(-3.0 * r * (t_end - _time_like(t, x))) * alpha ** 2 * s ** 3

    def jacobian(t, x, y=None, z=None):
        if z is None:
            raise ProblemError('BZ sigma jacobian needs the solution gradient')
        eye = torch.eye(d, dtype=x.dtype)
        # d_k sigma = alpha z_k I
        return alpha * z[..., :, None, None] * eye

    def ito_drift(t, x, y=None, z=None):
        if y is None or z is None:
            raise ProblemError('BZ Ito correction needs the solution value and gradient')
        return 0.5 * alpha ** 2 * torch.as_tensor(y, dtype=x.dtype)[..., None] * z

    return PDEProblem(
        name='BZ', d=d, t_end=t_end, x0=np.full(d, math.pi / 2.0),
        mu=lambda t, x: torch.zeros_like(x),
        sigma=sigma, diffuse=diffuse, phi=phi,
        g=lambda x: big_d * torch.sin(x).sum(-1),
        grad_g=lambda x: big_d * torch.cos(x),
        exact=lambda t, x: torch.exp(-r * (t_end - _time_like(t, x))) * big_d * torch.sin(x).sum(-1),
        sigma_jacobian=jacobian, ito_drift=ito_drift, coupled=True, params=p)


def _pide(d: int, p: Dict[str, float]) -> PDEProblem:
    jumps = JumpSpec(lam=p['lambda'], mu_phi=p['mu_phi'], sigma_phi=p['sigma_phi'],
                     tau_diff=p['tau'], epsilon=p['epsilon'])
    tau, eps = p['tau'], p['epsilon']
    sigma, diffuse = _scalar_diffusion(lambda t, x, y: torch.full(x.shape[:-1], tau, dtype=x.dtype))
    source = jumps.lam * jumps.second_moment + tau ** 2

    return PDEProblem(
        name='PIDE', d=d, t_end=p['t_end'], x0=np.ones(d),
        mu=lambda t, x: 0.5 * eps * x,
        sigma=sigma, diffuse=diffuse,
        phi=lambda t, x, y, z: source + eps / d * _sq_norm(x),
        g=lambda x: _sq_norm(x) / d,
        grad_g=lambda x: 2.0 * x / d,
        exact=lambda t, x: _sq_norm(x) / d + 0.0 * _time_like(t, x),
        jump_spec=jumps, sigma_jacobian=_zero_jacobian, ito_drift=_zero_drift, params=p)


_builders = {'HJB': _hjb, 'BSB': _bsb, 'AC': _ac, 'BZ': _bz, 'PIDE': _pide}


def make_problem(name: str,
                 d_override: Optional[int] = None,
                 param_overrides: Optional[Mapping[str, float]] = None) -> PDEProblem:
    """
    Build a benchmark problem from the catalog.

    Parameters
    ----------
    name : str
        One of ``HJB``, ``BSB``, ``AC``, ``BZ``, ``PIDE``.
    d_override : int, optional
        Spatial dimension replacing the benchmark default.
    param_overrides : mapping, optional
        Benchmark parameters by name, e.g. ``{'alpha': 0.3}`` or ``{'t_end': 0.5}``.

    Returns
    -------
    PDEProblem

    Raises
    ------
    ProblemError
        Unknown benchmark, unknown parameter or a parameter outside its range.
    """
    if name not in _builders:
        raise ProblemError(f'unknown benchmark {name!r}, expected one of {benchmark_names}')
    params = dict(benchmark_parameters[name])
    for key, value in dict(param_overrides or {}).items():
        if key not in params or key == 'd':
            raise ProblemError(f'{name} defines no parameter {key!r}')
        value = float(value)
        if value < 0 or (value == 0 and key not in nonnegative_parameters):
            raise ProblemError(f'{name} parameter {key} must be positive, got {value}')
        params[key] = value
    d = params.pop('d') if d_override is None else int(d_override)
    if d < 1:
        raise ProblemError(f'dimension must be positive, got {d}')
    problem = _builders[name](d, params)
    logger.debug('built %s with d=%d and %s', name, d, params)
    return problem


def describe(problem: PDEProblem) -> Dict[str, object]:
    """Plain dictionary summary used by ``list-problems`` and run manifests."""
    return {'name': problem.name, 'd': problem.d, 't_end': problem.t_end,
            'params': dict(problem.params), 'has_exact': problem.exact is not None,
            'reference_u0': problem.reference_u0, 'coupled': problem.coupled,
            'jumps': problem.jump_spec is not None}


def exact_solution(problem: PDEProblem, t, x) -> torch.Tensor:
    """
    Closed-form solution ``u(t, x)``.

    Raises
    ------
    ProblemError
        The benchmark has no analytic solution or ``t`` lies outside ``[0, t_end]``.
    """
    if problem.exact is None:
        raise ProblemError(f'{problem.name} has no analytic solution')
    x = torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x
    t_tensor = torch.as_tensor(t, dtype=x.dtype)
    if bool((t_tensor < 0).any()) or bool((t_tensor > problem.t_end).any()):
        raise ProblemError(f'time outside [0, {problem.t_end}]')
    return problem.exact(t_tensor, x)


def hjb_reference_mc(problem: PDEProblem, x, t: float, n_samples: int, seed: int) -> Tuple[float, float]:
    """
    Monte Carlo value of ``-ln E[exp(-g(x + sqrt(2) W_{T-t}))]`` for the HJB benchmark.

    The terminal function only sees ``|x + sqrt(2) W|^2``. Splitting ``W`` along ``x`` and
    its orthogonal complement reduces each draw to one normal and one chi-square variate,
    so the cost does not grow with ``d``.

    Returns
    -------
    tuple of float
        The estimate and its delta-method standard error.
    """
    if problem.name != 'HJB':
        raise ProblemError(f'reference estimator is defined for HJB only, got {problem.name}')
    if n_samples < 1:
        raise ProblemError('n_samples must be at least 1')
    x = np.asarray(x, dtype=np.float64)
    horizon = problem.t_end - float(t)
    if horizon < 0:
        raise ProblemError(f'time outside [0, {problem.t_end}]')
    norm_sq = float(x @ x)
    if horizon == 0.0:
        return math.log(0.5 * (1.0 + norm_sq)), 0.0

    gen = rng_stream(seed, 'reference', 0)
    along = gen.standard_normal(n_samples) * math.sqrt(horizon)
    if problem.d > 1:
        across = gen.chisquare(problem.d - 1, size=n_samples) * horizon
    else:
        across = np.zeros(n_samples)
    radius_sq = (math.sqrt(norm_sq) + math.sqrt(2.0) * along) ** 2 + 2.0 * across
    weights = 2.0 / (1.0 + radius_sq)
    mean = weights.mean()
    stderr = weights.std(ddof=1) / math.sqrt(n_samples) if n_samples > 1 else float('nan')
    return float(-math.log(mean)), float(stderr / mean)


def jump_generator_term(problem: PDEProblem, field, t, x: torch.Tensor,
                        value: Optional[torch.Tensor] = None,
                        gradient: Optional[torch.Tensor] = None,
                        n_nodes: int = gauss_hermite_nodes) -> torch.Tensor:
    """
    Non-local PIDE term ``lam * E[u(t, x + z 1) - u(t, x) - z 1 . grad u(t, x)]``.

    The expectation over ``z ~ N(mu_phi, sigma_phi^2)`` uses Gauss-Hermite quadrature.
    """
    spec = problem.jump_spec
    if spec is None:
        raise ProblemError(f'{problem.name} has no jump specification')
    if value is None or gradient is None:
        value, gradient = field.value_and_gradient(t, x)
    nodes, weights = hermegauss(n_nodes)
    sizes = torch.as_tensor(spec.mu_phi + spec.sigma_phi * nodes, dtype=x.dtype)
    weights = torch.as_tensor(weights / two_pi_sqrt, dtype=x.dtype)
    shifted = x.unsqueeze(-2) + sizes[:, None]
    t_rep = _time_like(t, x).unsqueeze(-1).expand(shifted.shape[:-1])
    jumped = field.value(t_rep, shifted)
    slope = gradient.sum(-1, keepdim=True) * sizes
    expectation = ((jumped - value.unsqueeze(-1) - slope) * weights).sum(-1)
    return spec.lam * expectation


def pde_residual(problem: PDEProblem, field, t, x: torch.Tensor) -> torch.Tensor:
    """
    Residual ``L[u] - phi_u`` of a field at the given points, jump term included.
    """
    t = _time_like(t, x)
    y_detached = None
    if problem.coupled:
        with torch.no_grad():
            y_detached = field.value(t, x)
    ev = field.evaluate(t, x, diffuse=lambda v: problem.diffuse(t, x, y_detached, v),
                        time_derivative=True)
    generator = ev.time_derivative + (problem.mu(t, x) * ev.gradient).sum(-1) + 0.5 * ev.laplacian
    if problem.jump_spec is not None:
        generator = generator + jump_generator_term(problem, field, t, x, ev.value, ev.gradient)
    return generator - problem.phi(t, x, ev.value, ev.gradient)
