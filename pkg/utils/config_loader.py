import copy
import hashlib
import json
import os
import yaml
from typing import Dict, Any, Iterable

from errors import ConfigError

FEC_KINDS = ('repetition-3', 'hamming-7-4')
RESET_MODES = ('hard', 'soft')


def load_config(config_dir: str = None) -> Dict[str, Any]:
    """
    Load the YAML configuration file.

    Args:
        config_dir: Optional directory path where config.yaml is located.
                   If None, will look in ../config relative to this file.
                   When config.yaml is missing the shipped example_config.yaml
                   is used instead.

    Returns:
        Dict containing the configuration
    """
    if config_dir is None:
        config_dir = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'config')

    config_path = os.path.join(config_dir, 'config.yaml')
    if not os.path.exists(config_path):
        config_path = os.path.join(config_dir, 'example_config.yaml')
    if not os.path.exists(config_path):
        raise ConfigError('config_dir', f"no config.yaml or example_config.yaml in {config_dir}")

    with open(config_path, 'r') as f:
        config = yaml.safe_load(f)

    if not isinstance(config, dict):
        raise ConfigError('config_dir', f"{config_path} does not contain a mapping")
    return config


def get_config_value(config: Dict[str, Any], *keys: str, default: Any = None) -> Any:
    """
    Safely get a value from the config dictionary using dot notation.

    Args:
        config: The configuration dictionary
        *keys: The keys to traverse
        default: Default value if key doesn't exist

    Returns:
        The value if found, otherwise the default
    """
    current = config
    for key in keys:
        if isinstance(current, dict) and key in current:
            current = current[key]
        else:
            return default
    return current


def apply_overrides(config: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """
    Return a copy of config with `section.key=value` overrides applied.

    Values go through yaml.safe_load so `codec.t0=3` stays an int and
    `sweep.bers=[0.0,0.1]` becomes a list.
    """
    result = copy.deepcopy(config)
    for item in overrides or []:
        if '=' not in item:
            raise ConfigError(item, "override must look like section.key=value")
        dotted, raw = item.split('=', 1)
        keys = [k for k in dotted.strip().split('.') if k]
        if not keys:
            raise ConfigError(item, "empty key")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(dotted, f"unparseable value {raw!r}: {e}")
        current = result
        for key in keys[:-1]:
            if not isinstance(current.get(key), dict):
                current[key] = {}
            current = current[key]
        current[keys[-1]] = value
    return result


def _require(condition, key, reason):
    if not condition:
        raise ConfigError(key, reason)


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _positive_int(config, *keys):
    value = get_config_value(config, *keys)
    key = '.'.join(keys)
    _require(isinstance(value, int) and not isinstance(value, bool) and value > 0, key,
             f"expected a positive integer, got {value!r}")
    return value


def _shape(config, *keys):
    value = get_config_value(config, *keys)
    key = '.'.join(keys)
    _require(isinstance(value, list) and len(value) == 3
             and all(isinstance(v, int) and v > 0 for v in value),
             key, f"expected [channels, height, width] of positive ints, got {value!r}")
    return tuple(value)


def _ber_list(config, *keys):
    value = get_config_value(config, *keys)
    key = '.'.join(keys)
    _require(isinstance(value, list), key, f"expected a list, got {value!r}")
    _require(value, key, "must not be empty")
    for p in value:
        _require(_is_number(p) and 0.0 <= p <= 0.5, key, f"BER {p!r} outside [0, 0.5]")
    return value


def validate_config(config: Dict[str, Any]) -> Dict[str, Any]:
    """Check types, ranges and cross-section invariants; raise ConfigError on the first problem."""
    seed = get_config_value(config, 'experiment', 'seed')
    _require(isinstance(seed, int) and seed >= 0, 'experiment.seed', f"expected a non-negative integer, got {seed!r}")

    for key in ('num_classes', 'image_size', 'train_size', 'test_size'):
        _positive_int(config, 'dataset', key)
    _require(get_config_value(config, 'dataset', 'image_size') % 2 == 0, 'dataset.image_size', "must be even")
    noise = get_config_value(config, 'dataset', 'noise_std')
    _require(_is_number(noise) and noise >= 0, 'dataset.noise_std', f"expected a non-negative number, got {noise!r}")

    lr = get_config_value(config, 'optimizer', 'lr')
    _require(_is_number(lr) and lr >= 0, 'optimizer.lr', f"expected a non-negative number, got {lr!r}")
    for key in ('beta1', 'beta2'):
        beta = get_config_value(config, 'optimizer', key)
        _require(_is_number(beta) and 0 <= beta < 1, f"optimizer.{key}", f"expected a value in [0, 1), got {beta!r}")
    eps = get_config_value(config, 'optimizer', 'eps')
    _require(_is_number(eps) and eps > 0, 'optimizer.eps', f"expected a positive number, got {eps!r}")
    _positive_int(config, 'optimizer', 'batch_size')

    split_shape = _shape(config, 'backbone', 'split_shape')
    _require(split_shape[1] * 2 == get_config_value(config, 'dataset', 'image_size'), 'backbone.split_shape',
             "spatial size must be half of dataset.image_size")
    _positive_int(config, 'backbone', 'hidden_channels')
    _positive_int(config, 'backbone', 'epochs')

    t0 = _positive_int(config, 'codec', 't0')
    t_max = _positive_int(config, 'codec', 'T')
    _require(t0 < t_max, 'codec.t0', f"need 1 <= t0 < T, got t0={t0}, T={t_max}")
    payload = _shape(config, 'codec', 'payload_shape')
    _require(payload[1:] == split_shape[1:], 'codec.payload_shape',
             f"spatial size {payload[1:]} must match backbone.split_shape {split_shape[1:]}")
    for key in ('hidden_channels', 'reconstructor_channels', 'epochs', 'finetune_epochs'):
        _positive_int(config, 'codec', key)
    k = get_config_value(config, 'codec', 'surrogate_k')
    _require(_is_number(k) and k > 0, 'codec.surrogate_k', f"expected a positive number, got {k!r}")
    v_th = get_config_value(config, 'codec', 'v_th')
    _require(_is_number(v_th) and v_th > 0, 'codec.v_th', f"expected a positive threshold, got {v_th!r}")
    _require(_is_number(get_config_value(config, 'codec', 'v_reset')), 'codec.v_reset', "expected a number")
    for key in ('encoder_reset', 'reconstructor_reset', 'ihf_reset'):
        mode = get_config_value(config, 'codec', key)
        _require(mode in RESET_MODES, f"codec.{key}", f"expected one of {RESET_MODES}, got {mode!r}")
    ber_range = _ber_list(config, 'codec', 'ber_range')
    _require(len(ber_range) == 2 and ber_range[0] <= ber_range[1], 'codec.ber_range', "expected [low, high] with low <= high")
    finetune_lr = get_config_value(config, 'codec', 'finetune_lr')
    _require(_is_number(finetune_lr) and finetune_lr >= 0, 'codec.finetune_lr', "expected a non-negative number")
    entropy_weight = get_config_value(config, 'codec', 'entropy_weight', default=1.0)
    _require(_is_number(entropy_weight) and entropy_weight >= 0, 'codec.entropy_weight',
             f"expected a non-negative number, got {entropy_weight!r}")

    prior_shape = _shape(config, 'simnet', 'prior_shape')
    _require(prior_shape[1:] == (1, 1), 'simnet.prior_shape', "prior is globally pooled, spatial size must be (1, 1)")
    for key in ('hidden_channels', 'hidden_units', 'epochs'):
        _positive_int(config, 'simnet', key)

    quantiles = get_config_value(config, 'harq', 'theta_quantiles')
    _require(isinstance(quantiles, list) and quantiles and all(_is_number(q) and 0 < q < 1 for q in quantiles),
             'harq.theta_quantiles', f"expected quantiles in (0, 1), got {quantiles!r}")
    thetas = get_config_value(config, 'harq', 'thetas', default=[]) or []
    _require(isinstance(thetas, list) and all(_is_number(t) and -1 <= t <= 1 for t in thetas),
             'harq.thetas', f"thresholds must lie in [-1, 1], got {thetas!r}")
    _ber_list(config, 'harq', 'gap_bers')
    _positive_int(config, 'harq', 'samples')

    _ber_list(config, 'sweep', 'bers')
    seeds = get_config_value(config, 'sweep', 'seeds')
    _require(isinstance(seeds, list) and seeds and all(isinstance(s, int) and s >= 0 for s in seeds),
             'sweep.seeds', f"expected a non-empty list of non-negative ints, got {seeds!r}")
    _positive_int(config, 'sweep', 'samples_per_cell')

    _positive_int(config, 'baseline', 'fixed_steps')
    fec = get_config_value(config, 'baseline', 'fec')
    _require(fec in FEC_KINDS, 'baseline.fec', f"expected one of {FEC_KINDS}, got {fec!r}")
    _positive_int(config, 'baseline', 'num_chunks')
    factor = get_config_value(config, 'baseline', 'budget_factor')
    _require(_is_number(factor) and factor >= 1, 'baseline.budget_factor', f"expected a number >= 1, got {factor!r}")
    _positive_int(config, 'baseline', 'epochs')
    _positive_int(config, 'baseline', 'samples')
    _ber_list(config, 'baseline', 'bers')

    return config


def config_hash(config: Dict[str, Any]) -> bytes:
    """SHA-256 over the canonical JSON form of the model-defining sections."""
    relevant = {section: config.get(section) for section in ('experiment', 'dataset', 'backbone', 'codec', 'simnet', 'baseline')}
    canonical = json.dumps(relevant, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).digest()


def dump_effective_config(config: Dict[str, Any]) -> str:
    return yaml.safe_dump(config, sort_keys=True, default_flow_style=None)
