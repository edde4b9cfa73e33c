"""
One-step self-consistency errors and the training objectives built from them.

Batch objectives follow the executable convention: raw one-step differences, squared or
multiplied per ``(b, n)``, summed over the steps and averaged over the batch. The
optional ``dt`` normalization divides the EM-type and Heun errors by their step.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .problems import PDEProblem, pde_residual
from .stochastics import RolloutBundle, Scheme, em_forward_step
from .surrogate import FieldBase, HardConstrained
from .utils.exceptions import ConfigError, SchemeMismatchError
from .utils.schemas import compatible_methods, loss_methods

logger = logging.getLogger('losses')

normalizations = ('raw', 'dt')
constraints = ('hard', 'soft')


@dataclass(frozen=True)
class LossSpec:
    """
    Training objective and its hyperparameters.

    Parameters
    ----------
    method : str
        One of ``em``, ``multishot_em``, ``shotgun``, ``heun``, ``unem``, ``unshotgun``,
        ``fspinns``.
    M : int
        Shots of ``multishot_em`` and ``shotgun``.
    M1, M2 : int
        Group sizes of ``unem`` and ``unshotgun``.
    tau : float, optional
        Fine step of the shotgun variants.
    constraint : str
        ``hard`` or ``soft``.
    terminal_weight : float
        Weight of the terminal penalty under the soft constraint.
    normalization : str
        ``raw`` or ``dt``.
    """
    method: str
    M: int = 1
    M1: int = 5
    M2: int = 5
    tau: Optional[float] = None
    constraint: str = 'hard'
    terminal_weight: float = 1.0
    normalization: str = 'raw'

    def __post_init__(self) -> None:
        if self.method not in loss_methods:
            raise ConfigError(f'unknown loss method {self.method!r}, expected one of {loss_methods}')
        if min(self.M, self.M1, self.M2) < 1:
            raise ConfigError(f'shot counts must be at least 1, got M={self.M}, M1={self.M1}, M2={self.M2}')
        if self.method in ('shotgun', 'unshotgun') and (self.tau is None or self.tau <= 0):
            raise ConfigError(f'{self.method} needs a positive tau')
        if self.constraint not in constraints:
            raise ConfigError(f'unknown constraint {self.constraint!r}')
        if self.normalization not in normalizations:
            raise ConfigError(f'unknown normalization {self.normalization!r}')
        if self.terminal_weight < 0:
            raise ConfigError('terminal_weight must be non-negative')

    def scheme(self, problem: PDEProblem) -> Scheme:
        """Rollout scheme producing the states this objective consumes."""
        if self.method not in compatible_methods.get(problem.name, loss_methods):
            raise SchemeMismatchError(f'{self.method} is not available on {problem.name}')
        jumps = problem.jump_spec is not None
        if self.method in ('em', 'fspinns'):
            return Scheme('pide' if jumps else 'em', 1)
        if self.method == 'multishot_em':
            return Scheme('pide' if jumps else 'multishot', self.M)
        if self.method == 'unem':
            return Scheme('pide' if jumps else 'multishot', self.M1 + self.M2)
        if self.method == 'shotgun':
            return Scheme('shotgun', self.M, self.tau)
        if self.method == 'unshotgun':
            return Scheme('shotgun', self.M1 + self.M2, self.tau)
        return Scheme('heun')


@dataclass
class StepErrors:
    """
    Per-sample one-step errors ``err[b, n, i]`` and, for the product objectives, the
    group means over shots ``[0, M1)`` and ``[M1, M1 + M2)``.
    """
    err: torch.Tensor
    group1: Optional[torch.Tensor] = None
    group2: Optional[torch.Tensor] = None


def _coupling_slice(bundle: RolloutBundle, end: int, start: int = 0):
    return None if bundle.y_main is None else bundle.y_main[:, start:end]


def _unsqueeze(y, dims: int = 1):
    if y is None:
        return None
    for _ in range(dims):
        y = y.unsqueeze(-1)
    return y


def err_em(field: FieldBase, problem: PDEProblem, t_n, x: torch.Tensor, x_next: torch.Tensor,
           dt, dW: torch.Tensor, y: Optional[torch.Tensor] = None,
           normalization: str = 'raw', check: bool = True) -> torch.Tensor:
    """
    ``u(t + dt, x_next) - [u(t, x) + phi dt + grad u(t, x)^T sigma dW]``, per point.

    ``y`` is the solution value entering the diffusion of fully coupled problems.

    Raises
    ------
    SchemeMismatchError
        ``x_next`` is not the EM step of ``x`` driven by ``dW``.
    """
    dt = torch.as_tensor(dt, dtype=x.dtype)
    t_n = torch.as_tensor(t_n, dtype=x.dtype)
    if check and not torch.allclose(x_next, em_forward_step(problem, t_n, x, dt, dW, y), rtol=1e-12, atol=1e-12):
        raise SchemeMismatchError('x_next is not the Euler-Maruyama step of x')
    value, grad = field.value_and_gradient(t_n, x)
    following = field.value(t_n + dt, x_next)
    predicted = value + problem.phi(t_n, x, value, grad) * dt + (grad * problem.diffuse(t_n, x, y, dW)).sum(-1)
    err = following - predicted
    return err / dt if normalization == 'dt' else err


def err_shotgun(field: FieldBase, problem: PDEProblem, t_n, x: torch.Tensor,
                x_plus: torch.Tensor, x_minus: torch.Tensor, tau: float) -> torch.Tensor:
    """``(u(t + tau, x+) + u(t + tau, x-) - 2 u(t, x)) / (2 tau) - phi(t, x)``, per point."""
    t_n = torch.as_tensor(t_n, dtype=x.dtype)
    value, grad = field.value_and_gradient(t_n, x)
    up = field.value(t_n + tau, x_plus)
    down = field.value(t_n + tau, x_minus)
    return (up + down - 2.0 * value) / (2.0 * tau) - problem.phi(t_n, x, value, grad)


def shot_average(errors: Union[Sequence[float], torch.Tensor]):
    """Arithmetic mean over the last axis (tensor) or over the sequence."""
    if torch.is_tensor(errors):
        if errors.shape[-1] == 0:
            raise ValueError('cannot average zero shots')
        return errors.mean(-1)
    if len(errors) == 0:
        raise ValueError('cannot average zero shots')
    return float(np.mean(np.asarray(errors, dtype=np.float64)))


def em_step_errors(field: FieldBase, problem: PDEProblem, bundle: RolloutBundle,
                   normalization: str = 'raw') -> torch.Tensor:
    """
    EM errors of every candidate shot, shape ``(B, N, M)``.

    Candidate ``i`` of step ``n`` is compared with the prediction from the main state
    ``x_main[n]`` driven by its own increment ``dW[b, n, i]``. Jump problems add the
    jump increments of the candidate and subtract the compensator ``lam mu_phi Z.1 dt``.
    """
    if bundle.x_candidates is None:
        raise SchemeMismatchError(f'bundle of scheme {bundle.scheme.kind} has no candidate states')
    n = bundle.n_steps
    t, dt = bundle.t, bundle.dt
    x_now = bundle.x_main[:, :n]
    following = bundle.x_candidates[:, 1:]
    t_now = t[:, :n]

    value, grad = field.value_and_gradient(t_now, x_now)
    y_next = field.value(t[:, 1:, None].expand(following.shape[:-1]), following)
    y_couple = _unsqueeze(_coupling_slice(bundle, n))
    diffused = problem.diffuse(t_now[..., None], x_now[:, :, None], y_couple, bundle.dW)
    drift = problem.phi(t_now, x_now, value, grad) * dt
    predicted = (value + drift).unsqueeze(-1) + (grad.unsqueeze(2) * diffused).sum(-1)

    if problem.jump_spec is not None:
        spec = problem.jump_spec
        sizes, mask = bundle.jumps.sizes, bundle.jumps.mask
        shifted = x_now[:, :, None, None, :] + sizes.unsqueeze(-1)
        jumped = field.value(t_now[:, :, None, None].expand(sizes.shape), shifted)
        jump_sum = ((jumped - value[:, :, None, None]) * mask).sum(-1)
        compensator = spec.lam * spec.mu_phi * grad.sum(-1) * dt
        predicted = predicted + jump_sum - compensator.unsqueeze(-1)

    err = y_next - predicted
    return err / dt.unsqueeze(-1) if normalization == 'dt' else err


def shotgun_step_errors(field: FieldBase, problem: PDEProblem, bundle: RolloutBundle) -> torch.Tensor:
    """Antithetic errors of every fine shot, shape ``(B, N, M)``."""
    if bundle.x_plus is None:
        raise SchemeMismatchError(f'bundle of scheme {bundle.scheme.kind} has no antithetic states')
    n, tau = bundle.n_steps, bundle.scheme.tau
    t_now = bundle.t[:, :n]
    x_now = bundle.x_main[:, :n]
    value, grad = field.value_and_gradient(t_now, x_now)
    t_fine = (t_now + tau).unsqueeze(-1).expand(bundle.x_plus.shape[:-1])
    up = field.value(t_fine, bundle.x_plus)
    down = field.value(t_fine, bundle.x_minus)
    return (up + down - 2.0 * value.unsqueeze(-1)) / (2.0 * tau) - problem.phi(t_now, x_now, value, grad).unsqueeze(-1)


def step_errors(field: FieldBase, problem: PDEProblem, bundle: RolloutBundle,
                groups: Optional[tuple] = None, normalization: str = 'raw') -> StepErrors:
    """Per-sample errors of the bundle's scheme, with group means when ``groups=(M1, M2)``."""
    if bundle.scheme.kind == 'shotgun':
        err = shotgun_step_errors(field, problem, bundle)
    else:
        err = em_step_errors(field, problem, bundle, normalization)
    result = StepErrors(err)
    if groups is not None:
        m1, m2 = groups
        if err.shape[-1] < m1 + m2:
            raise SchemeMismatchError(f'bundle carries {err.shape[-1]} shots, {m1 + m2} are needed')
        result.group1 = shot_average(err[..., :m1])
        result.group2 = shot_average(err[..., m1:m1 + m2])
    return result


def _squared_shot_mean(err: torch.Tensor) -> torch.Tensor:
    return shot_average(err).pow(2).sum(-1).mean()


def _require(bundle: RolloutBundle, kinds: tuple, shots: int = 1) -> None:
    if bundle.scheme.kind not in kinds:
        raise SchemeMismatchError(f'expected a bundle of scheme {kinds}, got {bundle.scheme.kind}')
    if bundle.scheme.shots < shots:
        raise SchemeMismatchError(f'bundle carries {bundle.scheme.shots} shots, {shots} are needed')


def loss_em(field: FieldBase, problem: PDEProblem, bundle: RolloutBundle,
            normalization: str = 'raw') -> torch.Tensor:
    _require(bundle, ('em', 'multishot', 'pide'))
    err = em_step_errors(field, problem, bundle, normalization)
    return _squared_shot_mean(err[..., :1])


def loss_multishot_em(field: FieldBase, problem: PDEProblem, bundle: RolloutBundle, M: int,
                      normalization: str = 'raw') -> torch.Tensor:
    """Squared mean of ``M`` candidate errors per step."""
    _require(bundle, ('em', 'multishot', 'pide'), M)
    err = em_step_errors(field, problem, bundle, normalization)
    return _squared_shot_mean(err[..., :M])


def loss_shotgun(field: FieldBase, problem: PDEProblem, bundle: RolloutBundle, M: int,
                 tau: float) -> torch.Tensor:
    _require(bundle, ('shotgun',), M)
    if bundle.scheme.tau != tau:
        raise SchemeMismatchError(f'bundle was built with tau={bundle.scheme.tau}, loss asks for {tau}')
    return _squared_shot_mean(shotgun_step_errors(field, problem, bundle)[..., :M])


def _product_loss(errors: StepErrors) -> torch.Tensor:
    return (errors.group1 * errors.group2).sum(-1).mean()


def loss_unem(field: FieldBase, problem: PDEProblem, bundle: RolloutBundle, M1: int, M2: int,
              normalization: str = 'raw') -> torch.Tensor:
    """
    Product of two independent shot means per step.

    The value of a single batch can be negative; it is returned as is.
    """
    _require(bundle, ('multishot', 'pide'), M1 + M2)
    return _product_loss(step_errors(field, problem, bundle, (M1, M2), normalization))


def loss_unshotgun(field: FieldBase, problem: PDEProblem, bundle: RolloutBundle, M1: int, M2: int,
                   tau: float) -> torch.Tensor:
    """Product form of the shotgun objective on two disjoint groups of fine shots."""
    _require(bundle, ('shotgun',), M1 + M2)
    if bundle.scheme.tau != tau:
        raise SchemeMismatchError(f'bundle was built with tau={bundle.scheme.tau}, loss asks for {tau}')
    return _product_loss(step_errors(field, problem, bundle, (M1, M2)))


def loss_heun(field: FieldBase, problem: PDEProblem, bundle: RolloutBundle,
              normalization: str = 'raw') -> torch.Tensor:
    """
    Predictor-corrector objective.

    Uses the Stratonovich corrections ``phi - Tr[sigma^T H sigma] / 2 - Z . c`` at the
    current state and at the predictor, so weighted Laplacians are evaluated at
    ``2 B N`` points per call.
    """
    _require(bundle, ('heun',))
    if problem.sigma_jacobian is None and problem.ito_drift is None:
        raise SchemeMismatchError(f'{problem.name} has no sigma jacobian')
    n = bundle.n_steps
    t, dt, dW = bundle.t, bundle.dt, bundle.dW[:, :, 0]
    x_now, x_bar, x_next = bundle.x_main[:, :n], bundle.x_heun_bar[:, 1:], bundle.x_main[:, 1:]
    t_now, t_next = t[:, :n], t[:, 1:]
    y_now = _coupling_slice(bundle, n)
    y_pred = None if bundle.y_bar is None else bundle.y_bar[:, 1:]

    def increment(t_, x_, y_):
        ev = field.evaluate(t_, x_, diffuse=lambda v: problem.diffuse(t_, x_, y_, v))
        correction = (ev.gradient * problem.ito_correction(t_, x_, y_, ev.gradient)).sum(-1)
        phi_h = problem.phi(t_, x_, ev.value, ev.gradient) - 0.5 * ev.laplacian - correction
        return ev.value, phi_h * dt + (ev.gradient * problem.diffuse(t_, x_, y_, dW)).sum(-1)

    value, step = increment(t_now, x_now, y_now)
    _, step_bar = increment(t_next, x_bar, y_pred)
    err = field.value(t_next, x_next) - (value + 0.5 * (step + step_bar))
    if normalization == 'dt':
        err = err / dt
    return err.pow(2).sum(-1).mean()


def loss_fs_pinns(field: FieldBase, problem: PDEProblem, bundle: RolloutBundle) -> torch.Tensor:
    """Mean squared PDE residual at the main-path states ``x_main[:, :N]``."""
    _require(bundle, ('em', 'multishot', 'pide'))
    n = bundle.n_steps
    residual = pde_residual(problem, field, bundle.t[:, :n], bundle.x_main[:, :n])
    return residual.pow(2).mean()


def loss_terminal(field: FieldBase, problem: PDEProblem, bundle: RolloutBundle) -> torch.Tensor:
    """
    Soft terminal penalty ``(Y_N - g)^2 + |Z_N - grad g|^2`` averaged over the batch.

    Raises
    ------
    ConfigError
        The field already satisfies the terminal condition by construction.
    """
    if isinstance(field, HardConstrained):
        raise ConfigError('the terminal penalty is undefined for a hard constrained field')
    x_end = bundle.x_main[:, -1]
    value, grad = field.value_and_gradient(bundle.t[:, -1], x_end)
    return ((value - problem.g(x_end)).pow(2) + (grad - problem.grad_g(x_end)).pow(2).sum(-1)).mean()


def total_loss(spec: LossSpec, field: FieldBase, problem: PDEProblem, bundle: RolloutBundle) -> torch.Tensor:
    """Objective of ``spec`` plus the weighted terminal penalty under the soft constraint."""
    expected = spec.scheme(problem)
    if bundle.scheme.kind != expected.kind or bundle.scheme.shots < expected.shots:
        raise SchemeMismatchError(f'{spec.method} needs a {expected.kind} bundle with {expected.shots} shots')
    if (spec.constraint == 'hard') != isinstance(field, HardConstrained):
        raise ConfigError(f'field does not match the {spec.constraint} constraint')

    if spec.method == 'em':
        loss = loss_em(field, problem, bundle, spec.normalization)
    elif spec.method == 'multishot_em':
        loss = loss_multishot_em(field, problem, bundle, spec.M, spec.normalization)
    elif spec.method == 'shotgun':
        loss = loss_shotgun(field, problem, bundle, spec.M, spec.tau)
    elif spec.method == 'heun':
        loss = loss_heun(field, problem, bundle, spec.normalization)
    elif spec.method == 'unem':
        loss = loss_unem(field, problem, bundle, spec.M1, spec.M2, spec.normalization)
    elif spec.method == 'unshotgun':
        loss = loss_unshotgun(field, problem, bundle, spec.M1, spec.M2, spec.tau)
    else:
        loss = loss_fs_pinns(field, problem, bundle)

    if spec.constraint == 'soft':
        loss = loss + spec.terminal_weight * loss_terminal(field, problem, bundle)
    return loss
