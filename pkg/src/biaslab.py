"""
Training-free checks of the one-step losses against their bias expansions.

Everything here is plain 64-bit numpy on closed-form surrogates, apart from
``consistency_gap`` which runs the torch loss machinery on a real problem. Monte-Carlo
estimates are chunked; chunk ``c`` draws from the stream ``(seed, 'lab', c)`` and the
chunk sums are reduced in chunk order, so every estimate is reproducible per seed.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from numpy.polynomial.hermite_e import hermegauss
from scipy import stats

from .utils.exceptions import VerificationError
from .utils.schemas import (bias_slack_calibration, bias_slope_tolerance, biaslab_defaults, biaslab_settings,
                            default_moment_matrices, remainder_slope_window, two_pi_sqrt)
from .utils.seeding import rng_stream

logger = logging.getLogger('biaslab')

lab_kinds = ('em', 'multishot_em', 'shotgun', 'heun', 'unem', 'unshotgun', 'fspinns')
suites = ('bias', 'moments', 'variance', 'all')


class AnalyticSurrogate:
    """
    Closed-form field with exact derivative evaluators.

    ``quadratic``: ``u = a t + x^T H x / 2 + b^T x + c``.
    ``trigonometric``: ``u = a t + sum_j w_j sin(x_j) + c``.

    All evaluators take a scalar time and states of shape ``(..., d)``.
    """

    def __init__(self, family: str, d: int, a: float = 0.0, c: float = 0.0,
                 H: Optional[np.ndarray] = None, b: Optional[np.ndarray] = None,
                 w: Optional[np.ndarray] = None) -> None:
        if family not in ('quadratic', 'trigonometric'):
            raise VerificationError(f'unknown surrogate family {family!r}')
        self.family = family
        self.d = d
        self.a = float(a)
        self.c = float(c)
        self.H = np.zeros((d, d)) if H is None else np.asarray(H, dtype=np.float64)
        self.b = np.zeros(d) if b is None else np.asarray(b, dtype=np.float64)
        self.w = np.ones(d) if w is None else np.asarray(w, dtype=np.float64)
        if family == 'quadratic' and not np.allclose(self.H, self.H.T):
            raise VerificationError('quadratic surrogate needs a symmetric H')

    @classmethod
    def quadratic(cls, H, a: float = 0.0, b=None, c: float = 0.0) -> 'AnalyticSurrogate':
        H = np.atleast_2d(np.asarray(H, dtype=np.float64))
        return cls('quadratic', H.shape[0], a=a, c=c, H=H, b=b)

    @classmethod
    def trigonometric(cls, w, a: float = 0.0, c: float = 0.0) -> 'AnalyticSurrogate':
        w = np.atleast_1d(np.asarray(w, dtype=np.float64))
        return cls('trigonometric', w.shape[0], a=a, c=c, w=w)

    def value(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.family == 'quadratic':
            return self.a * t + 0.5 * np.einsum('...i,ij,...j->...', x, self.H, x) + x @ self.b + self.c
        return self.a * t + np.sin(x) @ self.w + self.c

    def time_derivative(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.full(x.shape[:-1], self.a)

    def gradient(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.family == 'quadratic':
            return x @ self.H + self.b
        return self.w * np.cos(x)

    def hessian(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.family == 'quadratic':
            return np.broadcast_to(self.H, x.shape[:-1] + (self.d, self.d)).copy()
        hess = np.zeros(x.shape + (self.d,))
        diag = np.arange(self.d)
        hess[..., diag, diag] = -self.w * np.sin(x)
        return hess


@dataclass(frozen=True)
class LabProblem:
    """
    Constant-coefficient setting of the laboratory: drift ``mu``, diffusion matrix
    ``sigma`` and a constant generator ``phi0``.
    """
    drift: np.ndarray
    sigma: np.ndarray
    phi0: float = 0.0

    @property
    def d(self) -> int:
        return self.sigma.shape[0]

    def weighted_trace(self, hess: np.ndarray) -> np.ndarray:
        """``Tr[sigma^T hess sigma]`` over the leading axes of ``hess``."""
        return np.einsum('ij,...ik,kj->...', self.sigma, hess, self.sigma)

    def weighted_hessian(self, hess: np.ndarray) -> np.ndarray:
        return self.sigma.T @ hess @ self.sigma

    def residual(self, surrogate: AnalyticSurrogate, t: float, x: np.ndarray) -> float:
        """``[L u - phi](t, x)`` of the surrogate."""
        x = np.asarray(x, dtype=np.float64)
        generator = (surrogate.time_derivative(t, x) + surrogate.gradient(t, x) @ self.drift
                     + 0.5 * self.weighted_trace(surrogate.hessian(t, x)))
        return float(generator - self.phi0)

    def with_residual(self, surrogate: AnalyticSurrogate, t: float, x: np.ndarray,
                      residual: float) -> 'LabProblem':
        """Same coefficients with ``phi0`` chosen so that the residual at ``(t, x)`` is ``residual``."""
        shift = self.residual(surrogate, t, x) - residual
        return LabProblem(self.drift, self.sigma, self.phi0 + shift)


@dataclass
class LabSetup:
    surrogate: AnalyticSurrogate
    problem: LabProblem
    t: float
    x: np.ndarray

    @property
    def point(self) -> Tuple:
        return self.surrogate, self.problem, self.t, self.x


def standard_setup(family: str = 'quadratic', residual: float = 0.0,
                   drift: Optional[Sequence[float]] = None, H=None) -> LabSetup:
    """
    Two-dimensional reference setup with ``sigma = I``.

    The quadratic family defaults to ``H = I``, for which the EM bias term
    ``Tr[(sigma^T H sigma)^2] / 2`` equals one.
    """
    t, x = 0.2, np.array([0.3, -0.1])
    if family == 'quadratic':
        H = np.eye(2) if H is None else np.atleast_2d(np.asarray(H, dtype=np.float64))
        surrogate = AnalyticSurrogate.quadratic(H, a=0.5, b=np.resize([0.1, -0.2], H.shape[0]), c=1.0)
    else:
        surrogate = AnalyticSurrogate.trigonometric(np.array([1.0, 0.5]), a=0.5, c=1.0)
    d = surrogate.d
    x = np.resize(x, d)
    mu = np.zeros(d) if drift is None else np.asarray(drift, dtype=np.float64)
    problem = LabProblem(mu, np.eye(d)).with_residual(surrogate, t, x, residual)
    return LabSetup(surrogate, problem, t, x)


def _shots_needed(kind: str, M_params: Dict[str, int]) -> int:
    if kind in ('em', 'heun'):
        return 1
    if kind in ('multishot_em', 'shotgun'):
        return M_params.get('M', 1)
    if kind in ('unem', 'unshotgun'):
        return M_params.get('M1', 1) + M_params.get('M2', 1)
    return 0


def _check_kind(kind: str) -> None:
    if kind not in lab_kinds:
        raise VerificationError(f'unknown loss kind {kind!r}, expected one of {lab_kinds}')


def one_step_errors(kind: str, surrogate: AnalyticSurrogate, problem: LabProblem, t: float,
                    x: np.ndarray, step: float, xi: np.ndarray) -> np.ndarray:
    """
    Step-normalized one-step errors driven by standard normals ``xi`` of shape ``(..., d)``.

    EM-type kinds use ``dW = sqrt(step) xi``; the shotgun kinds use ``xi`` as the fine
    increment of the antithetic pair at ``tau = step``.
    """
    u0 = surrogate.value(t, x)
    grad0 = surrogate.gradient(t, x)
    noise = math.sqrt(step) * xi @ problem.sigma.T
    moved = x + problem.drift * step

    if kind in ('shotgun', 'unshotgun'):
        up = surrogate.value(t + step, moved + noise)
        down = surrogate.value(t + step, moved - noise)
        return (up + down - 2.0 * u0) / (2.0 * step) - problem.phi0

    following = moved + noise
    if kind == 'heun':
        hess0 = surrogate.hessian(t, x[None])[0]
        phi_now = problem.phi0 - 0.5 * problem.weighted_trace(hess0)
        phi_bar = problem.phi0 - 0.5 * problem.weighted_trace(surrogate.hessian(t + step, following))
        grad_bar = surrogate.gradient(t + step, following)
        martingale = 0.5 * ((grad0 + grad_bar) * noise).sum(-1)
        predicted = u0 + 0.5 * (phi_now + phi_bar) * step + martingale
    else:
        predicted = u0 + problem.phi0 * step + noise @ grad0
    return (surrogate.value(t + step, following) - predicted) / step


def combine_shots(kind: str, errors: np.ndarray, M_params: Dict[str, int]) -> np.ndarray:
    """Per-sample loss from the shot axis (last) of ``errors``."""
    if kind in ('unem', 'unshotgun'):
        m1 = M_params.get('M1', 1)
        return errors[..., :m1].mean(-1) * errors[..., m1:m1 + M_params.get('M2', 1)].mean(-1)
    return errors.mean(-1) ** 2


def predicted_loss(kind: str, surrogate: AnalyticSurrogate, problem: LabProblem, t: float,
                   x: np.ndarray, M_params: Optional[Dict[str, int]] = None) -> float:
    """
    Leading-order expectation of the step-normalized one-step loss.

    ``r^2 + Tr[H_w^2] / 2`` for EM, the same bias term divided by ``M`` for Multi-Shot
    EM and Shotgun, and ``r^2`` for Heun, the product losses and FS-PINNs, with
    ``H_w = sigma^T (grad^2 u) sigma``.
    """
    _check_kind(kind)
    return _leading_order(kind, surrogate, problem, t, x, M_params or {})


def _leading_order(kind: str, surrogate: AnalyticSurrogate, problem: LabProblem, t: float,
                   x: np.ndarray, M_params: Dict[str, int]) -> float:
    r = problem.residual(surrogate, t, x)
    hw = problem.weighted_hessian(surrogate.hessian(t, np.asarray(x, dtype=np.float64)[None])[0])
    bias = 0.5 * np.trace(hw @ hw)
    if kind == 'em':
        return float(r ** 2 + bias)
    if kind in ('multishot_em', 'shotgun'):
        return float(r ** 2 + bias / M_params.get('M', 1))
    return r ** 2


@dataclass(frozen=True)
class SlackCalibration:
    """
    Slack constant of one loss kind with the setup it was measured on.

    ``constant = safety * worst_ratio`` where ``worst_ratio`` is the largest
    ``|E[loss] - leading order| / sqrt(h)`` over ``steps`` and the shot settings, attained
    at ``worst_step`` and ``worst_params``.
    """
    kind: str
    constant: float
    safety: float
    worst_ratio: float
    worst_step: Optional[float]
    worst_params: Dict[str, int]
    drift: Tuple[float, ...]
    residual: float
    steps: Tuple[float, ...]
    source: str = 'gauss-hermite quadrature, quadratic family'


@lru_cache(maxsize=None)
def slack_constant(kind: str) -> SlackCalibration:
    """
    Calibrate the slack constant ``C`` of ``kind`` from the exact quadrature remainder
    on the quadratic setup with drift. FS-PINNs have no step and get ``C = 0``.
    """
    _check_kind(kind)
    settings = bias_slack_calibration
    setup = standard_setup(residual=settings['residual'], drift=settings['drift'])
    worst, worst_step, worst_params = 0.0, None, {}
    for params in settings['params'][kind]:
        leading = _leading_order(kind, *setup.point, params)
        for h in settings['steps']:
            ratio = abs(expected_loss_quadrature(kind, *setup.point, h, params) - leading) / math.sqrt(h)
            if ratio > worst:
                worst, worst_step, worst_params = ratio, h, dict(params)
    calibration = SlackCalibration(kind, settings['safety'] * worst, settings['safety'], worst, worst_step,
                                   worst_params, tuple(settings['drift']), settings['residual'],
                                   tuple(settings['steps']))
    logger.debug('slack constant of %s: %.4g (worst at h=%s, %s)', kind, calibration.constant,
                 worst_step, worst_params)
    return calibration


@dataclass
class BiasReport:
    kind: str
    t: float
    x: Tuple[float, ...]
    step: float
    M_params: Dict[str, int]
    mc_mean: float
    mc_stderr: float
    predicted: float
    n_samples: int
    slack: float = 0.0
    passed: bool = False
    calibration: Optional[SlackCalibration] = None

    @property
    def z_score(self) -> float:
        if self.mc_stderr == 0:
            return 0.0 if self.mc_mean == self.predicted else math.inf
        return abs(self.mc_mean - self.predicted) / self.mc_stderr

    def to_record(self) -> Dict[str, object]:
        record = asdict(self)
        record['check'] = 'bias'
        record['slack_constant'] = None if self.calibration is None else self.calibration.constant
        record['p_value'] = float(2.0 * stats.norm.sf(self.z_score))
        return record


def _chunks(n_samples: int, chunk: int):
    start, index = 0, 0
    while start < n_samples:
        size = min(chunk, n_samples - start)
        yield index, size
        start += size
        index += 1


def mc_loss_estimate(kind: str, surrogate: AnalyticSurrogate, problem: LabProblem, t: float,
                     x: np.ndarray, step: float, M_params: Optional[Dict[str, int]] = None,
                     n_samples: int = 100_000, seed: int = 0,
                     chunk: int = 100_000) -> Tuple[float, float]:
    """
    Monte-Carlo mean and standard error of the step-normalized one-step loss.

    Raises
    ------
    VerificationError
        ``n_samples`` below 100 or an unknown kind.
    """
    _check_kind(kind)
    if n_samples < 100:
        raise VerificationError(f'n_samples must be at least 100, got {n_samples}')
    M_params = M_params or {}
    x = np.asarray(x, dtype=np.float64)
    if kind == 'fspinns':
        return problem.residual(surrogate, t, x) ** 2, 0.0

    shots = _shots_needed(kind, M_params)
    total, total_sq = 0.0, 0.0
    for index, size in _chunks(n_samples, chunk):
        xi = rng_stream(seed, 'lab', index).standard_normal((size, shots, surrogate.d))
        losses = combine_shots(kind, one_step_errors(kind, surrogate, problem, t, x, step, xi), M_params)
        total += losses.sum()
        total_sq += (losses ** 2).sum()
    mean = total / n_samples
    variance = max(total_sq / n_samples - mean ** 2, 0.0) * n_samples / (n_samples - 1)
    return float(mean), math.sqrt(variance / n_samples)


def check_bias(kind: str, setup: LabSetup, step: float, M_params: Optional[Dict[str, int]] = None,
               n_samples: int = 100_000, seed: int = 0, chunk: int = 100_000) -> BiasReport:
    """
    MC estimate against the prediction, passing within ``max(3 stderr, C sqrt(step))``
    with ``C`` from :func:`slack_constant`.
    """
    M_params = dict(M_params or {})
    mean, stderr = mc_loss_estimate(kind, *setup.point, step, M_params, n_samples, seed, chunk)
    predicted = predicted_loss(kind, *setup.point, M_params)
    calibration = slack_constant(kind)
    slack = max(3.0 * stderr, calibration.constant * math.sqrt(step))
    report = BiasReport(kind, setup.t, tuple(float(v) for v in setup.x), step, M_params, mean, stderr,
                        predicted, n_samples, slack, bool(abs(mean - predicted) <= slack), calibration)
    logger.info('%s %s: mc %.6g +- %.2g, predicted %.6g', kind, M_params, mean, stderr, predicted)
    if not report.passed:
        logger.warning('bias check failed for %s %s: |%.6g - %.6g| > %.3g',
                       kind, M_params, mean, predicted, slack)
    return report


@dataclass
class SweepReport:
    kind: str
    reports: List[BiasReport]
    slope: Optional[float]
    passed: bool

    def to_record(self) -> Dict[str, object]:
        return {'check': 'bias_scaling', 'kind': self.kind, 'slope': self.slope, 'passed': self.passed,
                'M_list': [r.M_params.get('M') for r in self.reports],
                'mc_means': [r.mc_mean for r in self.reports]}


def _loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    ys = np.asarray(ys, dtype=np.float64)
    if np.any(ys <= 0):
        return None
    return float(np.polyfit(np.log(np.asarray(xs, dtype=np.float64)), np.log(ys), 1)[0])


def bias_scaling_sweep(kind: str, M_list: Sequence[int], setup: LabSetup, step: float,
                       n_samples: int = 100_000, seed: int = 0, chunk: int = 100_000) -> SweepReport:
    """
    Bias ``mc_mean - r^2`` against ``M`` with a log-log slope fit (expected -1).

    A setup without bias (zero weighted Hessian) has no slope; it passes when every
    estimate matches its prediction.
    """
    if kind not in ('multishot_em', 'shotgun'):
        raise VerificationError(f'the 1/M sweep applies to multishot_em and shotgun, got {kind!r}')
    if len(M_list) < 3:
        raise VerificationError(f'at least 3 values of M are needed, got {list(M_list)}')
    reports = [check_bias(kind, setup, step, {'M': int(m)}, n_samples, seed, chunk) for m in M_list]
    r2 = setup.problem.residual(setup.surrogate, setup.t, setup.x) ** 2
    if all(r.predicted == r2 for r in reports):
        return SweepReport(kind, reports, None, all(r.passed for r in reports))
    slope = _loglog_slope(M_list, [r.mc_mean - r2 for r in reports])
    passed = slope is not None and abs(slope + 1.0) <= bias_slope_tolerance
    logger.info('%s bias slope over M=%s: %s', kind, list(M_list), slope)
    return SweepReport(kind, reports, slope, passed)


@dataclass
class MomentReport:
    k: int
    empirical: float
    stderr: float
    analytic: float
    passed: bool

    def to_record(self) -> Dict[str, object]:
        return dict(asdict(self), check='moment')


def analytic_moments(H: np.ndarray) -> List[float]:
    """Moments 1..4 of ``xi^T H xi - Tr[H]`` from the power traces of ``H``."""
    eig = np.linalg.eigvalsh(H)
    t2, t3, t4 = (float(np.sum(eig ** k)) for k in (2, 3, 4))
    return [0.0, 2.0 * t2, 8.0 * t3, 48.0 * t4 + 12.0 * t2 ** 2]


def moment_matrix(name: str) -> np.ndarray:
    if name == 'identity1':
        return np.eye(1)
    if name.startswith('random3_'):
        A = rng_stream(0, 'lab', 10_000 + ord(name[-1])).standard_normal((3, 3))
        return 0.5 * (A + A.T)
    raise VerificationError(f'unknown moment matrix {name!r}')


def moment_check(H, n_samples: int = 1_000_000, seed: int = 0,
                 chunk: int = 250_000) -> List[MomentReport]:
    """
    Empirical moments ``k = 1..4`` of ``X = xi^T H xi - Tr[H]`` for standard Gaussian ``xi``.

    Raises
    ------
    VerificationError
        ``H`` is not symmetric.
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    if H.shape[0] != H.shape[1] or not np.allclose(H, H.T):
        raise VerificationError('moment check needs a symmetric matrix')
    if n_samples < 100:
        raise VerificationError(f'n_samples must be at least 100, got {n_samples}')
    d = H.shape[0]
    sums = np.zeros(8)
    for index, size in _chunks(n_samples, chunk):
        xi = rng_stream(seed, 'lab', index).standard_normal((size, d))
        X = np.einsum('ni,ij,nj->n', xi, H, xi) - np.trace(H)
        sums += np.stack([(X ** k).sum() for k in range(1, 9)])
    raw = sums / n_samples
    reports = []
    for k, analytic in zip(range(1, 5), analytic_moments(H)):
        empirical = raw[k - 1]
        stderr = math.sqrt(max(raw[2 * k - 1] - empirical ** 2, 0.0) / n_samples)
        passed = bool(abs(empirical - analytic) <= max(3.0 * stderr, 1e-12))
        reports.append(MomentReport(k, float(empirical), stderr, analytic, passed))
    return reports


@dataclass
class VarianceCondition:
    M: int
    M1: int
    M2: int
    alpha: float
    beta: float
    admissible: bool


def variance_condition(M: int, M1: int, M2: int) -> VarianceCondition:
    """``alpha = 2/M - 1/(2 M1) - 1/(2 M2)``, ``beta = 1/(2 M^2) - 1/(4 M1 M2)``; admissible
    when ``beta > 0`` and ``alpha >= 4 / (3 M + beta M^4)``."""
    if min(M, M1, M2) < 1:
        raise VerificationError(f'shot counts must be at least 1, got {(M, M1, M2)}')
    alpha = 2.0 / M - 1.0 / (2 * M1) - 1.0 / (2 * M2)
    beta = 1.0 / (2 * M ** 2) - 1.0 / (4 * M1 * M2)
    admissible = beta > 0 and alpha >= 4.0 / (3 * M + beta * M ** 4)
    return VarianceCondition(M, M1, M2, alpha, beta, admissible)


@dataclass
class VarianceReport:
    condition: VarianceCondition
    variances: Dict[str, float]
    stderrs: Dict[str, float]
    n_outer: int
    comparisons: Dict[str, bool] = field(default_factory=dict)

    @property
    def ordering_holds(self) -> bool:
        return all(self.comparisons.values())

    def to_record(self) -> Dict[str, object]:
        return {'check': 'variance', 'M': self.condition.M, 'M1': self.condition.M1,
                'M2': self.condition.M2, 'alpha': self.condition.alpha, 'beta': self.condition.beta,
                'admissible': self.condition.admissible, 'variances': self.variances,
                'stderrs': self.stderrs, 'n_outer': self.n_outer, 'comparisons': self.comparisons,
                'passed': self.ordering_holds}


def variance_ordering_estimate(setup: LabSetup, M: int, M1: int, M2: int, dt: float, tau: float,
                               n_outer: int = 100_000, seed: int = 0,
                               chunk: int = 100_000) -> VarianceReport:
    """
    Sample variances of the single-point per-step estimators of Un-EM, Shotgun,
    Multi-Shot EM and EM over ``n_outer`` independent realizations.

    The comparisons ``unem < shotgun`` and ``multishot_em < em`` must hold beyond three
    combined standard errors (the latter only for ``M > 1``, where the two estimators
    differ); ``shotgun = multishot_em`` must hold within them. Inadmissible triples are
    estimated and reported all the same.
    """
    condition = variance_condition(M, M1, M2)
    if not condition.admissible:
        logger.warning('triple (M=%d, M1=%d, M2=%d) is not admissible: alpha=%.4g beta=%.4g',
                       M, M1, M2, condition.alpha, condition.beta)
    estimators = {'unem': ({'M1': M1, 'M2': M2}, dt), 'shotgun': ({'M': M}, tau),
                  'multishot_em': ({'M': M}, dt), 'em': ({}, dt)}
    variances, stderrs = {}, {}
    for key, (kind, (params, step)) in enumerate(estimators.items()):
        shots = _shots_needed(kind, params)
        sums = np.zeros(4)
        for index, size in _chunks(n_outer, chunk):
            xi = rng_stream(seed, 'lab', key, index).standard_normal((size, shots, setup.surrogate.d))
            losses = combine_shots(kind, one_step_errors(kind, *setup.point, step, xi), params)
            sums += np.stack([(losses ** k).sum() for k in range(1, 5)])
        m1, m2, m3, m4 = sums / n_outer
        variance = m2 - m1 ** 2
        central4 = m4 - 4 * m3 * m1 + 6 * m2 * m1 ** 2 - 3 * m1 ** 4
        variances[kind] = float(variance)
        stderrs[kind] = math.sqrt(max(central4 - variance ** 2, 0.0) / n_outer)

    def combined(a, b):
        return 3.0 * math.hypot(stderrs[a], stderrs[b])

    comparisons = {'unem<shotgun': variances['unem'] + combined('unem', 'shotgun') < variances['shotgun'],
                   'shotgun=multishot_em': abs(variances['shotgun'] - variances['multishot_em'])
                   <= combined('shotgun', 'multishot_em')}
    if M > 1:
        comparisons['multishot_em<em'] = variances['multishot_em'] + combined('multishot_em', 'em') < variances['em']
    else:
        comparisons['multishot_em<=em'] = variances['multishot_em'] <= variances['em'] + combined('multishot_em', 'em')
    report = VarianceReport(condition, variances, stderrs, n_outer, comparisons)
    logger.info('variances %s, ordering %s', variances, 'holds' if report.ordering_holds else 'violated')
    return report


def expected_loss_quadrature(kind: str, surrogate: AnalyticSurrogate, problem: LabProblem, t: float,
                             x: np.ndarray, step: float, M_params: Optional[Dict[str, int]] = None,
                             n_nodes: int = 20) -> float:
    """
    Exact expectation of the step-normalized one-step loss by tensor-product
    Gauss-Hermite quadrature over the noise of one shot.

    Shots are independent, so with ``m1 = E[e]`` and ``m2 = E[e^2]`` the squared
    ``M``-shot mean has expectation ``m1^2 + (m2 - m1^2) / M`` and the product losses
    have expectation ``m1^2``.
    """
    _check_kind(kind)
    M_params = M_params or {}
    x = np.asarray(x, dtype=np.float64)
    if kind == 'fspinns':
        return problem.residual(surrogate, t, x) ** 2
    d = surrogate.d
    if d > 3:
        raise VerificationError(f'quadrature is limited to d <= 3, got d={d}')
    nodes, weights = hermegauss(n_nodes)
    weights = weights / two_pi_sqrt
    grid = np.stack(np.meshgrid(*([nodes] * d), indexing='ij'), axis=-1).reshape(-1, d)
    w = np.prod(np.stack(np.meshgrid(*([weights] * d), indexing='ij'), axis=-1).reshape(-1, d), axis=-1)
    errors = one_step_errors(kind, surrogate, problem, t, x, step, grid)
    m1, m2 = float(w @ errors), float(w @ errors ** 2)
    if kind in ('unem', 'unshotgun'):
        return m1 ** 2
    return m1 ** 2 + (m2 - m1 ** 2) / _shots_needed(kind, M_params)


@dataclass
class RemainderReport:
    kind: str
    steps: List[float]
    expected: List[float]
    predicted: float
    slope: Optional[float]
    regime: str
    passed: bool

    def to_record(self) -> Dict[str, object]:
        return dict(asdict(self), check='remainder')


def remainder_sweep(kind: str, setup: LabSetup, steps: Sequence[float],
                    M_params: Optional[Dict[str, int]] = None, n_nodes: int = 20) -> RemainderReport:
    """
    Log-log slope of ``|E[loss] - predicted|`` against the step.

    The regime is ``sqrt`` below a slope of 0.75 and ``linear`` above; a setup whose
    remainder vanishes identically is reported as ``exact``.
    """
    predicted = predicted_loss(kind, *setup.point, M_params)
    expected = [expected_loss_quadrature(kind, *setup.point, h, M_params, n_nodes) for h in steps]
    gaps = [abs(e - predicted) for e in expected]
    if max(gaps) <= 1e-12 * max(1.0, abs(predicted)):
        return RemainderReport(kind, list(steps), expected, predicted, None, 'exact', True)
    slope = _loglog_slope(steps, gaps)
    low, high = remainder_slope_window[kind]
    regime = 'unknown' if slope is None else ('sqrt' if slope < 0.75 else 'linear')
    passed = slope is not None and low <= slope <= high
    logger.info('%s remainder slope %s (%s)', kind, slope, regime)
    return RemainderReport(kind, list(steps), expected, predicted, slope, regime, passed)


@dataclass
class ConsistencyReport:
    discrete: float
    continuous: float

    @property
    def gap(self) -> float:
        return self.discrete - self.continuous


def consistency_gap(problem, field_, n_steps: int, n_paths: int, seed: int = 0,
                    M1: int = 5, M2: int = 5) -> ConsistencyReport:
    """
    The ``dt^2``-normalized Un-EM objective averaged over the grid next to the path
    average of the squared PDE residual, on the same forward paths.
    """
    from .losses import LossSpec, step_errors
    from .problems import pde_residual
    from .stochastics import rollout, uniform_grid

    scheme = LossSpec('unem', M1=M1, M2=M2).scheme(problem)
    bundle = rollout(problem, uniform_grid(n_steps, problem.t_end), scheme, field_, seed=seed,
                     batch_size=n_paths, dtype=torch.float64)
    errors = step_errors(field_, problem, bundle, (M1, M2))
    discrete = (errors.group1 * errors.group2 / bundle.dt ** 2).mean()
    residual = pde_residual(problem, field_, bundle.t[:, :n_steps], bundle.x_main[:, :n_steps])
    return ConsistencyReport(float(discrete.detach()), float(residual.detach().pow(2).mean()))


def unem_variance_split(budget: int) -> Tuple[int, int]:
    """Balanced split ``(ceil(K/2), floor(K/2))`` of a total shot budget ``K``."""
    if budget < 2:
        raise ValueError(f'a shot budget of at least 2 is needed, got {budget}')
    return (budget + 1) // 2, budget // 2


def _bias_suite(settings: Dict[str, int], seed: int) -> List[Dict[str, object]]:
    n, chunk = settings['bias_samples'], settings['chunk']
    dt, tau = biaslab_defaults['dt'], biaslab_defaults['tau']
    m1, m2 = biaslab_defaults['unem_groups']
    flat = standard_setup()
    offset = standard_setup(residual=biaslab_defaults['residual'])
    checks = [('em', flat, dt, {}), ('multishot_em', flat, dt, {'M': 10}), ('heun', flat, dt, {}),
              ('unem', flat, dt, {'M1': m1, 'M2': m2}), ('unem', offset, dt, {'M1': m1, 'M2': m2}),
              ('shotgun', flat, tau, {'M': 10}), ('unshotgun', flat, tau, {'M1': m1, 'M2': m2}),
              ('unshotgun', offset, tau, {'M1': m1, 'M2': m2})]
    records = [check_bias(kind, setup, step, params, n, seed, chunk).to_record()
               for kind, setup, step, params in checks]
    for kind, step in (('multishot_em', dt), ('shotgun', tau)):
        records.append(bias_scaling_sweep(kind, biaslab_defaults['M_list'], flat, step,
                                          settings['sweep_samples'], seed, chunk).to_record())
    drifting = standard_setup(residual=biaslab_defaults['residual'], drift=[0.5, -0.3])
    for kind, params in (('em', {}), ('multishot_em', {'M': 2}), ('heun', {}), ('shotgun', {'M': 2})):
        records.append(remainder_sweep(kind, drifting, biaslab_defaults['sweep_steps'], params).to_record())
    return records


def _moment_suite(settings: Dict[str, int], seed: int) -> List[Dict[str, object]]:
    records = []
    for name in default_moment_matrices:
        for report in moment_check(moment_matrix(name), settings['moment_samples'], seed, settings['chunk']):
            records.append(dict(report.to_record(), matrix=name))
    return records


def _variance_suite(settings: Dict[str, int], seed: int) -> List[Dict[str, object]]:
    M, M1, M2 = biaslab_defaults['variance_triple']
    step = biaslab_defaults['variance_dt']
    report = variance_ordering_estimate(standard_setup(), M, M1, M2, step, step,
                                        settings['variance_outer'], seed, settings['chunk'])
    return [report.to_record()]


suite_runners: Dict[str, Callable] = {'bias': _bias_suite, 'moments': _moment_suite,
                                      'variance': _variance_suite}


def run_suite(name: str, preset: str = 'desk', seed: Optional[int] = None) -> List[Dict[str, object]]:
    """
    Run a verification suite and return one record per check, each with a ``passed``
    field.
    """
    if name not in suites:
        raise VerificationError(f'unknown suite {name!r}, expected one of {suites}')
    settings = biaslab_settings[preset]
    seed = biaslab_defaults['seed'] if seed is None else seed
    names = list(suite_runners) if name == 'all' else [name]
    records = []
    for suite in names:
        logger.info('running %s suite (%s preset)', suite, preset)
        records.extend(dict(record, suite=suite) for record in suite_runners[suite](settings, seed))
    return records
