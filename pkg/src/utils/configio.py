"""
Module that reads run configuration files and resolves them against the preset tables.

A configuration is a TOML file with the sections ``[problem]``, ``[network]``, ``[loss]``
and ``[train]``. Values missing from the file come, in increasing priority, from the
preset, the benchmark overrides of that preset and the defaults of the chosen method.
"""
import copy
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from typing import Dict, Optional, Tuple

from .exceptions import ConfigError
from .schemas import (benchmark_names, benchmark_overrides, compatible_methods, config_schema,
                      desk_benchmark_overrides, method_defaults, presets, required_keys)
from .seeding import derive_seed

logger = logging.getLogger('cli')


def _merge(base: Dict[str, Dict], update: Dict[str, Dict]) -> Dict[str, Dict]:
    merged = copy.deepcopy(base)
    for section, values in update.items():
        merged.setdefault(section, {}).update(copy.deepcopy(values))
    return merged


def _type_ok(value, expected) -> bool:
    if expected is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if expected is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if expected is list:
        return isinstance(value, list) and all(_type_ok(v, float) for v in value)
    return isinstance(value, expected)


def validate_raw(raw: Dict[str, Dict]) -> None:
    """
    Reject unknown sections and keys, type mismatches and missing required keys.

    Raises
    ------
    ConfigError
    """
    for section, values in raw.items():
        if section not in config_schema:
            raise ConfigError(f'unknown section [{section}], expected one of {list(config_schema)}')
        if not isinstance(values, dict):
            raise ConfigError(f'[{section}] must be a table')
        for key, value in values.items():
            if key not in config_schema[section]:
                raise ConfigError(f'unknown key {section}.{key}')
            expected = config_schema[section][key]
            if not _type_ok(value, expected):
                raise ConfigError(f'{section}.{key} must be of type {expected.__name__}, '
                                  f'got {type(value).__name__}')
    missing = [key for key in required_keys
               if key.split('.')[1] not in raw.get(key.split('.')[0], {})]
    if missing:
        raise ConfigError(f'missing required keys {missing} (required: {required_keys})')


def resolve_config(raw: Dict[str, Dict], preset: str = 'paper',
                   seed: Optional[int] = None) -> Dict[str, Dict]:
    """
    Fill every setting of a validated raw configuration.

    ``seed`` replaces ``train.seed`` and ``network.init_seed`` and derives
    ``train.eval_seed``; nothing else changes.
    """
    from ..biaslab import unem_variance_split

    if preset not in presets:
        raise ConfigError(f'unknown preset {preset!r}, expected one of {list(presets)}')
    validate_raw(raw)
    name, method = raw['problem']['name'], raw['loss']['method']
    if name not in benchmark_names:
        raise ConfigError(f'unknown benchmark {name!r}, expected one of {benchmark_names}')
    if method not in compatible_methods[name]:
        raise ConfigError(f'method {method!r} is not available on {name}, '
                          f'expected one of {compatible_methods[name]}')

    resolved = _merge(presets[preset], benchmark_overrides.get(name, {}))
    if preset == 'desk':
        resolved = _merge(resolved, desk_benchmark_overrides.get(name, {}))
    defaults = dict(method_defaults[method])
    if 'n_steps' in defaults:
        resolved['train']['n_steps'] = defaults.pop('n_steps')
    resolved['loss'].update(defaults)

    user = copy.deepcopy(raw)
    shots = user['loss'].pop('shots', None)
    if shots is not None:
        if method in ('unem', 'unshotgun'):
            if 'M1' in user['loss'] or 'M2' in user['loss']:
                raise ConfigError('loss.shots cannot be combined with loss.M1 or loss.M2')
            try:
                user['loss']['M1'], user['loss']['M2'] = unem_variance_split(shots)
            except ValueError as err:
                raise ConfigError(str(err)) from err
        else:
            user['loss']['M'] = shots
    resolved = _merge(resolved, user)

    if seed is not None:
        resolved['train']['seed'] = int(seed)
        resolved['network']['init_seed'] = int(seed)
        resolved['train']['eval_seed'] = derive_seed(seed, 'eval', 1) % 2 ** 31
    logger.info('resolved %s/%s with the %s preset', name, method, preset)
    return resolved


def read_config(path: str) -> Dict[str, Dict]:
    """Parse a TOML file; parse errors carry the line number reported by the parser."""
    try:
        with open(path, 'rb') as con:
            return tomllib.load(con)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f'{path}: {err}') from err
    except OSError as err:
        raise ConfigError(f'cannot read {path}: {err}') from err


def build_run(resolved: Dict[str, Dict]):
    """Turn a resolved configuration into ``(PDEProblem, TrainConfig, LossSpec)``."""
    from ..losses import LossSpec
    from ..problems import make_problem
    from ..surrogate import NetworkConfig
    from ..training import TrainConfig

    problem_section = dict(resolved['problem'])
    name = problem_section.pop('name')
    d = problem_section.pop('d', None)
    problem = make_problem(name, d_override=d, param_overrides=problem_section)

    train = dict(resolved['train'])
    if problem.name == 'AC' and problem.reference_u0 is None and train['n_eval_trajectories'] > 0:
        raise ConfigError('AC has no reference away from d=20, T=0.3; set train.n_eval_trajectories = 0')
    try:
        network = NetworkConfig(d=problem.d, **resolved['network'])
        loss = LossSpec(**resolved['loss'])
        train['boundaries'] = tuple(float(v) for v in train['boundaries'])
        train['factors'] = tuple(float(v) for v in train['factors'])
        config = TrainConfig(network=network, loss=loss, **train)
    except TypeError as err:
        raise ConfigError(str(err)) from err
    loss.scheme(problem)
    return problem, config, loss


def load_config(path: str, preset: str = 'paper',
                seed: Optional[int] = None) -> Tuple[object, object, object]:
    """
    Load, validate and resolve a run configuration.

    Returns
    -------
    tuple
        ``(PDEProblem, TrainConfig, LossSpec)``.

    Raises
    ------
    ConfigError
        Parse error, unknown key, type mismatch, failed validation or an incompatible
        method and problem.
    ProblemError
        Invalid benchmark parameters.
    """
    raw = read_config(path)
    return build_run(resolve_config(raw, preset, seed))
