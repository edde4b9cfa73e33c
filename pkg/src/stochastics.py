"""
Time grids, seeded Brownian and Poisson draws, forward one-step maps and batch rollouts.

All randomness of a rollout is drawn up front into a :class:`NoiseBundle` from counter
based Philox streams keyed by ``(seed, purpose, batch row)``; the forward maps themselves
are deterministic torch functions of their inputs.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .problems import PDEProblem
from .utils.exceptions import ProblemError, SchemeMismatchError
from .utils.schemas import shotgun_floor
from .utils.seeding import derive_seed, rng_stream

logger = logging.getLogger('stochastics')

scheme_kinds = ('em', 'multishot', 'heun', 'shotgun', 'pide')


@dataclass(frozen=True)
class TimeGrid:
    """
    Time nodes ``t[0] = 0 < ... < t[N] = t_end`` and their steps ``dt[n] = t[n+1] - t[n]``.
    """
    t: np.ndarray
    dt: np.ndarray
    kind: str = 'uniform'

    @property
    def n_steps(self) -> int:
        return len(self.dt)

    @property
    def t_end(self) -> float:
        return float(self.t[-1])


def uniform_grid(n_steps: int, t_end: float) -> TimeGrid:
    if n_steps < 1 or t_end <= 0:
        raise ValueError(f'need n_steps >= 1 and t_end > 0, got {n_steps}, {t_end}')
    step = t_end / n_steps
    t = np.arange(n_steps + 1, dtype=np.float64) * step
    t[-1] = t_end
    return TimeGrid(t=t, dt=np.full(n_steps, step), kind='uniform')


def shotgun_grid(n_steps: int, t_end: float, seed: int) -> TimeGrid:
    """
    Grid with a random first step: ``t1 ~ U(0, dt)`` with ``dt = t_end / (N - 1)`` and
    ``t_n = t1 + (n - 1) dt`` up to ``t_{N-1}``, then ``t_N = t_end``.

    The first node is floored at ``1e-8 dt`` so no step has zero length.
    """
    if n_steps < 2:
        raise ValueError(f'the randomized grid needs at least 2 steps, got {n_steps}')
    step = t_end / (n_steps - 1)
    first = max(rng_stream(seed, 'grid', 0).uniform(0.0, step), shotgun_floor * step)
    t = np.empty(n_steps + 1)
    t[0] = 0.0
    t[1:n_steps] = first + np.arange(n_steps - 1) * step
    t[n_steps] = t_end
    return TimeGrid(t=t, dt=np.diff(t), kind='shotgun')


@dataclass
class NoiseBundle:
    """
    Pre-drawn randomness of one batch.

    ``dW`` has layout ``(B, N, M, d)`` with per-step variance ``dt[b, n]``. Fine increments
    (variance ``tau``) and jump draws are present only when requested. Jump sizes are
    padded to the largest count with ``jump_mask`` marking real entries.
    """
    dW: np.ndarray
    seed: int
    fine_dw: Optional[np.ndarray] = None
    jump_counts: Optional[np.ndarray] = None
    jump_sizes: Optional[np.ndarray] = None
    jump_mask: Optional[np.ndarray] = None

    @property
    def layout(self) -> Tuple[int, int, int, int]:
        return tuple(self.dW.shape)


def _step_table(grid: Union[TimeGrid, Sequence[TimeGrid]], batch: int) -> np.ndarray:
    if isinstance(grid, TimeGrid):
        return np.broadcast_to(grid.dt, (batch, grid.n_steps))
    if len(grid) != batch:
        raise SchemeMismatchError(f'{len(grid)} grids for a batch of {batch}')
    return np.stack([g.dt for g in grid])


def sample_noise(layout: Tuple[int, int, int, int],
                 grid: Union[TimeGrid, Sequence[TimeGrid]],
                 fine_tau: Optional[float] = None,
                 jump_spec=None,
                 seed: int = 0,
                 fine_shots: Optional[int] = None) -> NoiseBundle:
    """
    Draw Brownian increments, optional fine increments and optional jumps.

    Parameters
    ----------
    layout : tuple of int
        ``(B, N, M, d)``.
    grid : TimeGrid or sequence of TimeGrid
        A shared grid or one grid per batch row.
    fine_tau : float, optional
        Variance of the fine increments; draws ``fine_dw`` of layout ``(B, N, fine_shots, d)``.
    jump_spec : JumpSpec, optional
        Draw Poisson counts with mean ``lam dt`` and Gaussian sizes per ``(b, n, i)``.
    seed : int
        Stream seed; row ``b`` uses the streams ``(seed, tag, b)``.
    fine_shots : int, optional
        Number of fine shots, defaults to ``M``.
    """
    batch, n_steps, shots, d = layout
    if min(layout) < 1:
        raise ValueError(f'layout entries must be positive, got {layout}')
    steps = _step_table(grid, batch)
    if steps.shape[1] != n_steps:
        raise SchemeMismatchError(f'grid has {steps.shape[1]} steps, layout asks for {n_steps}')

    dW = np.empty(layout)
    for b in range(batch):
        draws = rng_stream(seed, 'brownian', b).standard_normal((n_steps, shots, d))
        dW[b] = draws * np.sqrt(steps[b])[:, None, None]
    bundle = NoiseBundle(dW=dW, seed=seed)

    if fine_tau is not None:
        fine_shots = shots if fine_shots is None else fine_shots
        bundle.fine_dw = np.stack([rng_stream(seed, 'fine', b).standard_normal((n_steps, fine_shots, d))
                                   for b in range(batch)]) * math.sqrt(fine_tau)

    if jump_spec is not None:
        counts = np.empty((batch, n_steps, shots), dtype=np.int64)
        sizes = []
        for b in range(batch):
            gen = rng_stream(seed, 'jump', b)
            counts[b] = gen.poisson(jump_spec.lam * steps[b][:, None], size=(n_steps, shots))
            sizes.append(gen.normal(jump_spec.mu_phi, jump_spec.sigma_phi, size=int(counts[b].sum())))
        width = int(counts.max()) if counts.size else 0
        padded = np.zeros((batch, n_steps * shots, width))
        mask = np.zeros((batch, n_steps * shots, width), dtype=bool)
        for b in range(batch):
            flat = counts[b].ravel()
            slot = np.repeat(np.arange(flat.size), flat)
            offset = np.arange(flat.sum()) - np.repeat(np.cumsum(flat) - flat, flat)
            padded[b, slot, offset] = sizes[b]
            mask[b, slot, offset] = True
        bundle.jump_counts = counts
        bundle.jump_sizes = padded.reshape(batch, n_steps, shots, width)
        bundle.jump_mask = mask.reshape(batch, n_steps, shots, width)
    return bundle


@dataclass
class JumpRecord:
    """Jump sizes ``(..., K)`` of one step with the mask of real entries."""
    sizes: torch.Tensor
    mask: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return (self.sizes * self.mask).sum(-1)


def _column(dt, x: torch.Tensor) -> torch.Tensor:
    dt = torch.as_tensor(dt, dtype=x.dtype)
    return dt.unsqueeze(-1) if dt.ndim > 0 else dt


def em_forward_step(problem: PDEProblem, t, x: torch.Tensor, dt, dW: torch.Tensor,
                    y: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``x + mu(t, x) dt + sigma(t, x, y) dW``."""
    return x + problem.mu(t, x) * _column(dt, x) + problem.diffuse(t, x, y, dW)


def _coupling(problem: PDEProblem, field_, t, x: torch.Tensor, with_gradient: bool = False):
    if not problem.coupled:
        return None, None
    if field_ is None:
        raise SchemeMismatchError(f'{problem.name} is fully coupled and needs a surrogate in the rollout')
    if with_gradient:
        y, z = field_.value_and_gradient(t, x)
        return y.detach(), z.detach()
    with torch.no_grad():
        return field_.value(t, x).detach(), None


def _heun_drift(problem: PDEProblem, t, x, y, z) -> torch.Tensor:
    return problem.mu(t, x) - problem.ito_correction(t, x, y, z)


def _heun_step(problem: PDEProblem, t, x, dt, dW, field_=None):
    if problem.sigma_jacobian is None and problem.ito_drift is None:
        raise SchemeMismatchError(f'{problem.name} has no sigma jacobian for the Heun scheme')
    dt_col = _column(dt, x)
    y, z = _coupling(problem, field_, t, x, with_gradient=True)
    increment = _heun_drift(problem, t, x, y, z) * dt_col + problem.diffuse(t, x, y, dW)
    x_bar = x + increment
    t_next = t + torch.as_tensor(dt, dtype=x.dtype)
    y_bar, z_bar = _coupling(problem, field_, t_next, x_bar, with_gradient=True)
    increment_bar = _heun_drift(problem, t_next, x_bar, y_bar, z_bar) * dt_col + problem.diffuse(t_next, x_bar, y_bar, dW)
    return x_bar, x + 0.5 * (increment + increment_bar), y, y_bar


def heun_forward_step(problem: PDEProblem, t, x: torch.Tensor, dt, dW: torch.Tensor,
                      field_=None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Stochastic Heun step with Stratonovich-corrected drift.

    Returns the predictor ``x_bar`` and the averaged state ``x_next``. Fully coupled
    problems evaluate ``field_`` at both stages.
    """
    x_bar, x_next, _, _ = _heun_step(problem, t, x, dt, dW, field_)
    return x_bar, x_next


def jump_forward_step(problem: PDEProblem, t, x: torch.Tensor, dt, dW: torch.Tensor,
                      jumps: JumpRecord) -> Tuple[torch.Tensor, JumpRecord]:
    """
    Forward map of the jump diffusion: EM step plus the summed jump sizes on every
    coordinate minus the compensator ``lam mu_phi dt``.
    """
    spec = problem.jump_spec
    if spec is None:
        raise ProblemError(f'{problem.name} has no jump specification')
    x_next = em_forward_step(problem, t, x, dt, dW)
    x_next = x_next + jumps.total.unsqueeze(-1) - spec.lam * spec.mu_phi * _column(dt, x)
    return x_next, jumps


@dataclass(frozen=True)
class Scheme:
    """
    Rollout scheme: ``em``, ``multishot``, ``heun``, ``shotgun`` or ``pide`` (EM with jumps).

    ``shots`` is the number of candidate next states per step (fine antithetic pairs for
    ``shotgun``); ``tau`` the fine step of ``shotgun``.
    """
    kind: str
    shots: int = 1
    tau: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind not in scheme_kinds:
            raise SchemeMismatchError(f'unknown scheme {self.kind!r}')
        if self.shots < 1:
            raise SchemeMismatchError(f'shots must be positive, got {self.shots}')
        if self.kind == 'shotgun' and (self.tau is None or self.tau <= 0):
            raise SchemeMismatchError('the shotgun scheme needs a positive tau')


@dataclass
class RolloutBundle:
    """
    Forward states of one training batch.

    Shapes: ``t`` ``(B, N+1)``, ``dt`` ``(B, N)``, ``x_main`` ``(B, N+1, d)``,
    ``x_candidates`` ``(B, N+1, M, d)`` with shot 0 equal to the main path,
    ``x_plus``/``x_minus`` ``(B, N, M, d)``, ``x_heun_bar`` ``(B, N+1, d)`` whose slice
    ``n+1`` is the predictor of step ``n``. ``y_main``/``y_bar`` hold the detached surrogate
    values used inside the diffusion of fully coupled problems.
    """
    grid: TimeGrid
    scheme: Scheme
    t: torch.Tensor
    dt: torch.Tensor
    x_main: torch.Tensor
    dW: torch.Tensor
    noise: NoiseBundle
    x_candidates: Optional[torch.Tensor] = None
    x_plus: Optional[torch.Tensor] = None
    x_minus: Optional[torch.Tensor] = None
    fine_dw: Optional[torch.Tensor] = None
    x_heun_bar: Optional[torch.Tensor] = None
    jumps: Optional[JumpRecord] = None
    y_main: Optional[torch.Tensor] = None
    y_bar: Optional[torch.Tensor] = None
    extras: dict = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.x_main.shape[0]

    @property
    def n_steps(self) -> int:
        return self.x_main.shape[1] - 1


def _check_scheme(problem: PDEProblem, scheme: Scheme) -> None:
    if problem.jump_spec is not None and scheme.kind != 'pide':
        raise SchemeMismatchError(f'{problem.name} has jumps and needs the pide scheme, got {scheme.kind}')
    if scheme.kind == 'pide' and problem.jump_spec is None:
        raise SchemeMismatchError(f'{problem.name} has no jumps for the pide scheme')
    if scheme.kind == 'heun' and problem.sigma_jacobian is None and problem.ito_drift is None:
        raise SchemeMismatchError(f'{problem.name} has no sigma jacobian for the Heun scheme')


def rollout(problem: PDEProblem,
            grid: TimeGrid,
            scheme: Scheme,
            field_=None,
            seed: int = 0,
            batch_size: int = 64,
            dtype: torch.dtype = torch.float64,
            noise: Optional[NoiseBundle] = None) -> RolloutBundle:
    """
    Simulate a batch of forward paths and the extra states the scheme needs.

    Parameters
    ----------
    problem : PDEProblem
    grid : TimeGrid
        Uniform grid; for ``shotgun`` only its step count is used and every batch row
        draws its own randomized grid.
    scheme : Scheme
    field_ : FieldBase, optional
        Surrogate evaluated inside the diffusion of fully coupled problems.
    seed : int
        Noise seed.
    batch_size : int
    dtype : torch.dtype
    noise : NoiseBundle, optional
        Replay previously drawn noise instead of sampling.

    Returns
    -------
    RolloutBundle
    """
    _check_scheme(problem, scheme)
    n_steps, d = grid.n_steps, problem.d

    if scheme.kind == 'shotgun':
        grids: Union[TimeGrid, List[TimeGrid]] = [shotgun_grid(n_steps, grid.t_end, derive_seed(seed, 'grid', b))
                                                  for b in range(batch_size)]
        times = np.stack([g.t for g in grids])
        shots = 1
    else:
        grids = grid
        times = np.broadcast_to(grid.t, (batch_size, n_steps + 1))
        shots = scheme.shots if scheme.kind in ('multishot', 'em', 'pide') else 1

    if noise is None:
        noise = sample_noise((batch_size, n_steps, shots, d), grids,
                             fine_tau=scheme.tau if scheme.kind == 'shotgun' else None,
                             jump_spec=problem.jump_spec, seed=seed,
                             fine_shots=scheme.shots)

    t = torch.as_tensor(np.ascontiguousarray(times), dtype=dtype)
    dt = t[:, 1:] - t[:, :-1]
    if grid.kind == 'uniform' and scheme.kind != 'shotgun':
        dt = torch.as_tensor(np.broadcast_to(grid.dt, (batch_size, n_steps)).copy(), dtype=dtype)
    dW = torch.as_tensor(noise.dW, dtype=dtype)
    jumps = None
    if noise.jump_sizes is not None:
        jumps = JumpRecord(torch.as_tensor(noise.jump_sizes, dtype=dtype), torch.as_tensor(noise.jump_mask))

    x = problem.x0_tensor(dtype).expand(batch_size, d)
    main, candidates, plus, minus, bars, y_main, y_bar = [x], [], [], [], [x], [], [x.new_zeros(batch_size)]
    fine = torch.as_tensor(noise.fine_dw, dtype=dtype) if noise.fine_dw is not None else None

    for n in range(n_steps):
        t_n, dt_n = t[:, n], dt[:, n]
        if scheme.kind == 'heun':
            x_bar, x_next, y_n, y_b = _heun_step(problem, t_n, x, dt_n, dW[:, n, 0], field_)
            bars.append(x_bar)
            if problem.coupled:
                y_main.append(y_n)
                y_bar.append(y_b)
        else:
            y_n, _ = _coupling(problem, field_, t_n, x)
            if problem.coupled:
                y_main.append(y_n)
            if scheme.kind == 'shotgun':
                base = x + problem.mu(t_n, x) * scheme.tau
                spread = problem.diffuse(t_n[:, None], x[:, None], None if y_n is None else y_n[:, None], fine[:, n])
                plus.append(base[:, None] + spread)
                minus.append(base[:, None] - spread)
                x_next = em_forward_step(problem, t_n, x, dt_n, dW[:, n, 0], y_n)
            else:
                m = dW.shape[2]
                x_rep = x[:, None].expand(batch_size, m, d)
                t_rep = t_n[:, None].expand(batch_size, m)
                y_rep = None if y_n is None else y_n[:, None].expand(batch_size, m)
                if scheme.kind == 'pide':
                    cand, _ = jump_forward_step(problem, t_rep, x_rep, dt_n[:, None], dW[:, n],
                                                JumpRecord(jumps.sizes[:, n], jumps.mask[:, n]))
                else:
                    cand = em_forward_step(problem, t_rep, x_rep, dt_n[:, None], dW[:, n], y_rep)
                candidates.append(cand)
                x_next = cand[:, 0]
        main.append(x_next)
        x = x_next

    if problem.coupled:
        y_last, _ = _coupling(problem, field_, t[:, n_steps], x)
        y_main.append(y_last)

    bundle = RolloutBundle(grid=grid, scheme=scheme, t=t, dt=dt, x_main=torch.stack(main, dim=1),
                           dW=dW, noise=noise, jumps=jumps, fine_dw=fine)
    if candidates:
        bundle.x_candidates = torch.stack([main[0][:, None].expand_as(candidates[0])] + candidates, dim=1)
    if plus:
        bundle.x_plus, bundle.x_minus = torch.stack(plus, dim=1), torch.stack(minus, dim=1)
    if scheme.kind == 'heun':
        bundle.x_heun_bar = torch.stack(bars, dim=1)
    if problem.coupled:
        bundle.y_main = torch.stack(y_main, dim=1)
        if scheme.kind == 'heun':
            bundle.y_bar = torch.stack(y_bar, dim=1)
    if scheme.kind == 'shotgun':
        bundle.extras['grids'] = grids
    logger.debug('rollout %s: B=%d N=%d d=%d', scheme.kind, batch_size, n_steps, d)
    return bundle
