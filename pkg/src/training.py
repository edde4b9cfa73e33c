"""
Training loop, learning-rate schedules, evaluation sets and the run record.
"""
import bisect
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from .losses import LossSpec, total_loss
from .problems import PDEProblem, exact_solution, hjb_reference_mc
from .stochastics import Scheme, TimeGrid, rollout, uniform_grid
from .surrogate import (ClosedFormField, FieldBase, NetworkConfig, assign_parameters, build_field,
                        flat_parameters, param_gradient)
from .utils.exceptions import ConfigError, NonFiniteError, ReferenceUnavailable, TrainingAborted
from .utils.schemas import ac_reference, history_columns, time_error_columns
from .utils.seeding import derive_seed

logger = logging.getLogger('training')

schedules = ('cosine', 'piecewise')


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings of a run.

    Parameters
    ----------
    network : NetworkConfig
    loss : LossSpec
    iterations : int
        Optimizer steps; 0 returns the initial field.
    batch_size : int
        Trajectories per iteration.
    learning_rate : float
        Base rate of the schedule.
    schedule : str
        ``cosine`` or ``piecewise``.
    boundaries, factors : sequence of float
        Piecewise schedule: fractions of the run at which the rate factor changes.
    beta1, beta2, eps : float
        Adam constants.
    seed : int
        Noise seed; iteration ``k`` draws from ``derive_seed(seed, 'train', k)``.
    eval_every : int
        Iterations between logged evaluations.
    n_eval_trajectories : int
        Size of the evaluation set; 0 disables evaluation.
    n_steps : int
        Time steps of the uniform grid.
    eval_seed : int
    hjb_reference_samples : int
        Monte-Carlo samples per node of the HJB reference.
    grad_clip : float
        Gradient norm cap; 0 disables clipping.
    """
    network: NetworkConfig
    loss: LossSpec
    iterations: int = 100_000
    batch_size: int = 64
    learning_rate: float = 1e-3
    schedule: str = 'cosine'
    boundaries: Tuple[float, ...] = (0.5, 0.75)
    factors: Tuple[float, ...] = (1.0, 0.1, 0.01)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1000
    n_eval_trajectories: int = 256
    n_steps: int = 100
    eval_seed: int = 1234
    hjb_reference_samples: int = 100_000
    grad_clip: float = 0.0

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ConfigError(f'iterations must be non-negative, got {self.iterations}')
        if self.batch_size < 1 or self.eval_every < 1 or self.n_steps < 1:
            raise ConfigError('batch_size, eval_every and n_steps must be at least 1')
        if self.n_eval_trajectories < 0 or self.hjb_reference_samples < 1:
            raise ConfigError('n_eval_trajectories must be >= 0 and hjb_reference_samples >= 1')
        if self.learning_rate <= 0:
            raise ConfigError(f'learning_rate must be positive, got {self.learning_rate}')
        if self.schedule not in schedules:
            raise ConfigError(f'unknown schedule {self.schedule!r}')
        if len(self.factors) != len(self.boundaries) + 1:
            raise ConfigError('piecewise schedule needs one more factor than boundaries')
        if list(self.boundaries) != sorted(self.boundaries):
            raise ConfigError('piecewise boundaries must be increasing')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError('Adam constants out of range')
        if self.grad_clip < 0:
            raise ConfigError('grad_clip must be non-negative')

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def lr_schedule(kind: str, step: int, total: int, base: float,
                boundaries: Sequence[float] = (0.5, 0.75),
                factors: Sequence[float] = (1.0, 0.1, 0.01)) -> float:
    """
    Learning rate at ``step`` of ``total``.

    ``cosine``: ``base (1 + cos(pi step / total)) / 2``. ``piecewise``: ``base`` times the
    factor of the interval of ``step / total`` delimited by ``boundaries``.
    """
    if step > total:
        raise ValueError(f'step {step} exceeds the schedule length {total}')
    if total == 0:
        return base
    fraction = step / total
    if kind == 'cosine':
        return base * 0.5 * (1.0 + math.cos(math.pi * fraction))
    if kind == 'piecewise':
        return base * factors[bisect.bisect_right(list(boundaries), fraction)]
    raise ValueError(f'unknown schedule {kind!r}')


@dataclass
class AdamState:
    """Flat parameter vector and the ``torch.optim.Adam`` instance holding its moments."""
    params: torch.Tensor
    optimizer: torch.optim.Adam

    @property
    def step(self) -> int:
        state = self.optimizer.state.get(self.params, {})
        return int(state['step']) if 'step' in state else 0

    def moments(self) -> Tuple[torch.Tensor, torch.Tensor]:
        state = self.optimizer.state.get(self.params, {})
        zeros = torch.zeros_like(self.params)
        return state.get('exp_avg', zeros).clone(), state.get('exp_avg_sq', zeros).clone()


def adam_init(params: torch.Tensor, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    flat = params.detach().clone().requires_grad_(True)
    return AdamState(flat, torch.optim.Adam([flat], lr=1.0, betas=(beta1, beta2), eps=eps))


def adam_step(state: AdamState, grads: torch.Tensor, lr: float) -> AdamState:
    """
    One bias-corrected Adam update of ``state.params`` in place.

    Raises
    ------
    NonFiniteError
        ``grads`` contains NaN or infinity.
    """
    if grads.shape != state.params.shape:
        raise ValueError(f'gradient shape {tuple(grads.shape)} does not match {tuple(state.params.shape)}')
    if not bool(torch.isfinite(grads).all()):
        raise NonFiniteError('non-finite gradient passed to the optimizer')
    for group in state.optimizer.param_groups:
        group['lr'] = lr
    state.params.grad = grads.detach().to(state.params.dtype).clone()
    state.optimizer.step()
    state.params.grad = None
    return state


@dataclass
class EvaluationSet:
    """
    Reference trajectories: times ``t (C, K)``, states ``x (C, K, d)`` and reference
    values ``u (C, K)``. ``source`` is ``exact``, ``monte_carlo`` or ``point``.
    """
    t: torch.Tensor
    x: torch.Tensor
    u: torch.Tensor
    seed: int
    source: str

    def __len__(self) -> int:
        return self.t.shape[0]


def _empty_set(problem: PDEProblem, seed: int) -> EvaluationSet:
    t = torch.zeros((0, 0), dtype=torch.float64)
    return EvaluationSet(t, torch.zeros((0, 0, problem.d), dtype=torch.float64), t.clone(), seed, 'empty')


def generate_reference_trajectories(problem: PDEProblem, count: int, grid: TimeGrid, seed: int,
                                    hjb_samples: int = 100_000) -> EvaluationSet:
    """
    Forward EM paths on independent evaluation noise, with reference values from the
    closed form, from the HJB Monte-Carlo estimator, or (AC) the single point
    ``(0, x0)`` against the published reference value.

    Raises
    ------
    ReferenceUnavailable
        AC away from its reference configuration, or a benchmark without any reference.
    """
    if count == 0:
        return _empty_set(problem, seed)
    if problem.name == 'AC':
        if problem.d != ac_reference['d'] or problem.t_end != ac_reference['t_end']:
            raise ReferenceUnavailable(f'AC has a reference value only at d={ac_reference["d"]}, '
                                       f'T={ac_reference["t_end"]}')
        x0 = problem.x0_tensor().reshape(1, 1, -1)
        return EvaluationSet(torch.zeros((1, 1), dtype=torch.float64), x0,
                             torch.full((1, 1), problem.reference_u0, dtype=torch.float64), seed, 'point')
    if problem.exact is None and problem.name != 'HJB':
        raise ReferenceUnavailable(f'{problem.name} has no reference solution')

    scheme = Scheme('pide' if problem.jump_spec is not None else 'em')
    coupling = ClosedFormField.from_problem(problem) if problem.coupled else None
    with torch.no_grad():
        bundle = rollout(problem, grid, scheme, coupling, seed=derive_seed(seed, 'eval', 0),
                         batch_size=count, dtype=torch.float64)
    t, x = bundle.t, bundle.x_main.detach()
    if problem.exact is not None:
        return EvaluationSet(t, x, exact_solution(problem, t, x).detach(), seed, 'exact')

    values = np.empty(tuple(t.shape))
    for c in range(t.shape[0]):
        for n in range(t.shape[1]):
            values[c, n], _ = hjb_reference_mc(problem, x[c, n].numpy(), float(t[c, n]), hjb_samples,
                                               derive_seed(seed, 'reference', c, n))
    logger.info('HJB reference computed at %d nodes with %d samples each', values.size, hjb_samples)
    return EvaluationSet(t, x, torch.as_tensor(values), seed, 'monte_carlo')


def _field_dtype(field_: FieldBase) -> torch.dtype:
    param = next(iter(field_.parameters()), None)
    return torch.float64 if param is None else param.dtype


def _predict(field_: FieldBase, eval_set: EvaluationSet) -> torch.Tensor:
    dtype = _field_dtype(field_)
    with torch.no_grad():
        return field_.value(eval_set.t.to(dtype), eval_set.x.to(dtype)).to(torch.float64)


def rl2(field_: FieldBase, eval_set: EvaluationSet) -> float:
    """
    Trajectory-wise relative L2 error averaged over the set.

    Raises
    ------
    ReferenceUnavailable
        Empty set, or a trajectory whose reference values are all zero.
    """
    if len(eval_set) == 0:
        raise ReferenceUnavailable('empty evaluation set')
    denominator = eval_set.u.pow(2).sum(-1)
    if bool((denominator == 0).any()):
        raise ReferenceUnavailable('reference values vanish on a whole trajectory')
    numerator = (eval_set.u - _predict(field_, eval_set)).pow(2).sum(-1)
    return float(torch.sqrt(numerator / denominator).mean())


def relative_error_by_time(field_: FieldBase, eval_set: EvaluationSet) -> pd.DataFrame:
    """Relative L2 error across trajectories at every grid step."""
    if len(eval_set) == 0:
        raise ReferenceUnavailable('empty evaluation set')
    error = (eval_set.u - _predict(field_, eval_set)).pow(2).sum(0)
    scale = eval_set.u.pow(2).sum(0)
    relative = torch.where(scale > 0, torch.sqrt(error / scale), torch.full_like(scale, float('nan')))
    return pd.DataFrame({time_error_columns[0]: np.arange(eval_set.t.shape[1]),
                         time_error_columns[1]: eval_set.t.mean(0).numpy(),
                         time_error_columns[2]: relative.numpy()}, columns=time_error_columns)


@dataclass
class RunRecord:
    """
    Resolved configuration, seeds and the logged history of one run.

    Every history entry carries the evaluation seed its RL2 was measured with.
    """
    config: Dict[str, object]
    seeds: Dict[str, int]
    entries: List[Dict[str, object]] = field(default_factory=list)
    checkpoint: Optional[str] = None
    status: str = 'running'
    diagnostic: Optional[str] = None

    def log(self, iteration: int, loss: Optional[float], lr: float, rl2_value: Optional[float],
            wall_seconds: float) -> None:
        if self.entries and iteration <= self.entries[-1]['iteration']:
            raise ValueError(f'iteration {iteration} is not after {self.entries[-1]["iteration"]}')
        self.entries.append({'iteration': iteration, 'loss': loss, 'lr': lr, 'rl2': rl2_value,
                             'wall_seconds': wall_seconds, 'eval_seed': self.seeds['eval_seed']})

    def history(self) -> pd.DataFrame:
        return pd.DataFrame(self.entries, columns=history_columns)

    def to_jsonl(self, path: str) -> None:
        """One JSON object per line: the header, every entry, then the closing status."""
        with open(path, 'w') as con:
            con.write(json.dumps({'record': 'header', 'config': self.config, 'seeds': self.seeds}) + '\n')
            for entry in self.entries:
                con.write(json.dumps(dict(entry, record='entry')) + '\n')
            con.write(json.dumps({'record': 'end', 'status': self.status, 'diagnostic': self.diagnostic,
                                  'checkpoint': self.checkpoint}) + '\n')

    @classmethod
    def from_jsonl(cls, path: str) -> 'RunRecord':
        with open(path) as con:
            lines = [json.loads(line) for line in con if line.strip()]
        record = cls(lines[0]['config'], lines[0]['seeds'])
        for line in lines[1:]:
            if line.pop('record') == 'entry':
                record.entries.append(line)
            else:
                record.status, record.diagnostic = line['status'], line['diagnostic']
                record.checkpoint = line['checkpoint']
        return record


class Trainer:
    """
    Runs the optimization of one field on one problem.

    Parameters
    ----------
    problem : PDEProblem
        Benchmark to solve.
    config : TrainConfig
        Resolved run settings.
    eval_set : EvaluationSet, optional
        Reference trajectories; generated from ``config`` when omitted.

    Attributes
    ----------
    field : FieldBase
        The surrogate being trained.
    scheme : Scheme
        Rollout scheme required by the loss.
    grid : TimeGrid
    state : AdamState
    record : RunRecord
    logger : logging.Logger
    """

    def __init__(self, problem: PDEProblem, config: TrainConfig,
                 eval_set: Optional[EvaluationSet] = None) -> None:
        self.logger = logging.getLogger('training')
        self.problem = problem
        self.config = config
        self.field = build_field(config.network, problem, config.loss.constraint)
        self.scheme = config.loss.scheme(problem)
        self.grid = uniform_grid(config.n_steps, problem.t_end)
        self.dtype = config.network.dtype
        if eval_set is None:
            eval_set = generate_reference_trajectories(problem, config.n_eval_trajectories, self.grid,
                                                       config.eval_seed, config.hjb_reference_samples)
        self.eval_set = eval_set
        self.state = adam_init(flat_parameters(self.field), config.beta1, config.beta2, config.eps)
        self.record = RunRecord(config.to_dict(), {'seed': config.seed, 'init_seed': config.network.init_seed,
                                                   'eval_seed': config.eval_seed})
        self.logger.info('evaluation seed %d, %d reference trajectories', config.eval_seed, len(eval_set))

    def evaluate(self) -> Optional[float]:
        if len(self.eval_set) == 0:
            return None
        return rl2(self.field, self.eval_set)

    def learning_rate(self, iteration: int) -> float:
        c = self.config
        return lr_schedule(c.schedule, iteration, c.iterations, c.learning_rate, c.boundaries, c.factors)

    def step(self, iteration: int) -> float:
        """One optimizer iteration; returns the loss value before the update."""
        c = self.config
        bundle = rollout(self.problem, self.grid, self.scheme, self.field,
                         seed=derive_seed(c.seed, 'train', iteration), batch_size=c.batch_size,
                         dtype=self.dtype)
        holder = {}

        def objective():
            holder['loss'] = total_loss(c.loss, self.field, self.problem, bundle)
            return holder['loss']

        grads = param_gradient(objective, self.field)
        if c.grad_clip > 0:
            norm = float(grads.norm())
            if norm > c.grad_clip:
                grads = grads * (c.grad_clip / norm)
        adam_step(self.state, grads, self.learning_rate(iteration))
        assign_parameters(self.field, self.state.params.detach())
        return float(holder['loss'].detach())

    def train(self) -> Tuple[FieldBase, RunRecord]:
        """
        Run all iterations, logging every ``eval_every`` iterations and at the end.

        Raises
        ------
        TrainingAborted
            A loss, gradient or surrogate input became non-finite.
        """
        c = self.config
        start = time.perf_counter()
        self.record.log(0, None, self.learning_rate(0), self.evaluate(), 0.0)
        for k in range(c.iterations):
            try:
                loss = self.step(k)
            except NonFiniteError as err:
                self.record.status, self.record.diagnostic = 'failed', str(err)
                self.logger.error('training aborted at iteration %d: %s', k, err)
                raise TrainingAborted(k, str(err), self.record) from err
            done = k + 1
            if done % c.eval_every == 0 or done == c.iterations:
                value = self.evaluate()
                self.record.log(done, loss, self.learning_rate(k), value, time.perf_counter() - start)
                self.logger.info('iteration %d: loss %.6g, lr %.3g, rl2 %s', done, loss,
                                 self.learning_rate(k), 'n/a' if value is None else f'{value:.6g}')
        self.record.status = 'completed'
        return self.field, self.record


def train(problem: PDEProblem, config: TrainConfig,
          eval_set: Optional[EvaluationSet] = None) -> Tuple[FieldBase, RunRecord]:
    return Trainer(problem, config, eval_set).train()
