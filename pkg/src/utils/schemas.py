"""
Module that contains the static tables used to resolve configurations: benchmark
parameters, run presets, per-method defaults and the fixed output schemas.
"""
import math

benchmark_names = ['HJB', 'BSB', 'AC', 'BZ', 'PIDE']

# parameters each benchmark defines, with their default values
benchmark_parameters = {'HJB': {'d': 100, 't_end': 1.0},
                        'BSB': {'d': 100, 't_end': 1.0, 'r': 0.05, 'alpha': 0.4},
                        'AC': {'d': 20, 't_end': 0.3},
                        'BZ': {'d': 100, 't_end': 1.0, 'r': 0.1, 'alpha': 0.3, 'D': 0.1},
                        'PIDE': {'d': 100, 't_end': 1.0, 'epsilon': 0.1, 'tau': 0.1,
                                 'lambda': 0.01, 'mu_phi': 0.01, 'sigma_phi': 0.01}}

# parameters that may legitimately be zero
nonnegative_parameters = {'lambda', 'mu_phi', 'sigma_phi', 'epsilon'}

ac_reference = {'d': 20, 't_end': 0.3, 'u0': 0.30879}

loss_methods = ['em', 'multishot_em', 'shotgun', 'heun', 'unem', 'unshotgun', 'fspinns']

compatible_methods = {'HJB': loss_methods,
                      'BSB': loss_methods,
                      'AC': loss_methods,
                      'BZ': loss_methods,
                      'PIDE': ['em', 'multishot_em', 'unem', 'fspinns']}

method_defaults = {'em': {},
                   'multishot_em': {'M': 10},
                   'shotgun': {'M': 50, 'tau': 4.0 ** -5, 'n_steps': 10},
                   'heun': {},
                   'unem': {'M1': 5, 'M2': 5},
                   'unshotgun': {'M1': 50, 'M2': 50, 'tau': 4.0 ** -5, 'n_steps': 10},
                   'fspinns': {}}

presets = {
    'paper': {
        'network': {'hidden_layers': 4, 'width': 512, 'activation': 'mish',
                    'precision': 'float32', 'init_seed': 0},
        'loss': {'constraint': 'hard', 'terminal_weight': 1.0, 'normalization': 'raw'},
        'train': {'iterations': 100_000, 'batch_size': 64, 'learning_rate': 1e-3,
                  'schedule': 'cosine', 'boundaries': [0.5, 0.75], 'factors': [1.0, 0.1, 0.01],
                  'beta1': 0.9, 'beta2': 0.999, 'eps': 1e-8, 'seed': 0, 'eval_every': 1000,
                  'n_eval_trajectories': 256, 'n_steps': 100, 'eval_seed': 1234,
                  'hjb_reference_samples': 100_000, 'grad_clip': 0.0},
        'problem': {},
    },
    'desk': {
        'network': {'hidden_layers': 2, 'width': 64, 'activation': 'mish',
                    'precision': 'float64', 'init_seed': 0},
        'loss': {'constraint': 'hard', 'terminal_weight': 1.0, 'normalization': 'raw'},
        'train': {'iterations': 3000, 'batch_size': 64, 'learning_rate': 1e-3,
                  'schedule': 'cosine', 'boundaries': [0.5, 0.75], 'factors': [1.0, 0.1, 0.01],
                  'beta1': 0.9, 'beta2': 0.999, 'eps': 1e-8, 'seed': 0, 'eval_every': 100,
                  'n_eval_trajectories': 32, 'n_steps': 50, 'eval_seed': 1234,
                  'hjb_reference_samples': 100_000, 'grad_clip': 0.0},
        'problem': {'d': 10},
    },
}

# benchmark specific deviations from the preset tables
benchmark_overrides = {
    'PIDE': {'network': {'hidden_layers': 2, 'width': 256, 'activation': 'leaky_relu'},
             'train': {'iterations': 10_000, 'schedule': 'piecewise'}},
    'AC': {'problem': {'d': 20}},
}
desk_benchmark_overrides = {
    'PIDE': {'network': {'width': 64}, 'train': {'iterations': 3000}},
}

# accepted keys and their TOML types, per section
config_schema = {
    'problem': {'name': str, 'd': int, 't_end': float, 'r': float, 'alpha': float, 'D': float,
                'epsilon': float, 'tau': float, 'lambda': float, 'mu_phi': float,
                'sigma_phi': float},
    'network': {'hidden_layers': int, 'width': int, 'activation': str, 'precision': str,
                'init_seed': int},
    'loss': {'method': str, 'constraint': str, 'terminal_weight': float, 'M': int, 'M1': int,
             'M2': int, 'shots': int, 'tau': float, 'normalization': str},
    'train': {'iterations': int, 'batch_size': int, 'learning_rate': float, 'schedule': str,
              'boundaries': list, 'factors': list, 'beta1': float, 'beta2': float, 'eps': float,
              'seed': int, 'eval_every': int, 'n_eval_trajectories': int, 'n_steps': int,
              'eval_seed': int, 'hjb_reference_samples': int, 'grad_clip': float},
}
required_keys = ['problem.name', 'loss.method']

history_columns = ['iteration', 'loss', 'lr', 'rl2', 'wall_seconds']
time_error_columns = ['step', 't', 'relative_error']

checkpoint_format_version = 1
leaky_relu_slope = 0.01
shotgun_floor = 1e-8
gauss_hermite_nodes = 16
grad_clip_default = 1e3

# bias laboratory: the slack constant C in max(3 stderr, C sqrt(dt)) is calibrated per loss kind as
# safety * max |E[loss] - leading order| / sqrt(h) on the quadratic setup with drift
bias_slack_calibration = {'drift': [0.5, -0.3], 'residual': 0.3, 'safety': 2.0,
                          'steps': [0.2, 0.1, 0.05, 0.025, 0.0125],
                          'params': {'em': [{}], 'multishot_em': [{'M': 1}, {'M': 10}], 'heun': [{}],
                                     'unem': [{'M1': 5, 'M2': 5}], 'shotgun': [{'M': 1}, {'M': 10}],
                                     'unshotgun': [{'M1': 5, 'M2': 5}], 'fspinns': []}}
remainder_slope_window = {'em': (0.5, 1.1), 'multishot_em': (0.5, 1.1), 'unem': (0.5, 1.1),
                          'heun': (0.5, 1.1), 'shotgun': (0.8, 1.2), 'unshotgun': (0.8, 1.2)}
bias_slope_tolerance = 0.1

biaslab_settings = {
    'paper': {'bias_samples': 1_000_000, 'moment_samples': 10_000_000,
              'variance_outer': 1_000_000, 'sweep_samples': 1_000_000, 'chunk': 250_000},
    'desk': {'bias_samples': 200_000, 'moment_samples': 2_000_000,
             'variance_outer': 200_000, 'sweep_samples': 200_000, 'chunk': 100_000},
}
biaslab_defaults = {'dt': 1e-3, 'tau': 1e-3, 'variance_dt': 1e-4, 'M_list': [1, 2, 5, 10],
                    'variance_triple': (1, 1, 2), 'unem_groups': (5, 5), 'residual': 0.3,
                    'sweep_steps': [0.2, 0.1, 0.05, 0.025, 0.0125], 'seed': 7}
default_moment_matrices = ['identity1', 'random3_a', 'random3_b', 'random3_c']

tag_codes = {'brownian': 1, 'fine': 2, 'jump': 3, 'grid': 4, 'train': 5, 'eval': 6,
             'reference': 7, 'lab': 8}

two_pi_sqrt = math.sqrt(2.0 * math.pi)
