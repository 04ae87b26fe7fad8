"""
Experiment configuration.

A run is described by a plain-text ``key=value`` file (``#`` comments and blank
lines allowed) whose keys are the TrainConfig field names. Resolution order,
later wins: field defaults, config file, the ``--seed``/``--method``/``--steps``
flags, then every ``--override key=value`` in the order given.
"""
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from decouple import Csv
from django.conf import settings
from dotenv import dotenv_values

from alignment.token_align import AlignConfig
from cord_lab.artifacts import write_text
from cord_lab.exceptions import ConfigError
from policy.model import ModelConfig
from tasks.encoding import NoiseSpec

logger = logging.getLogger(__name__)

METHODS = ('cord', 'opd', 'grpo', 'sft', 'fkl')
REFERENCE_MODES = ('greedy', 'sample')
TEACHER_REFRESH = ('epoch', 'once')
PRECISIONS = ('f32', 'f64')

TRUE_VALUES = {'1', 'true', 'yes', 'on'}
FALSE_VALUES = {'0', 'false', 'no', 'off'}


@dataclass(frozen=True)
class TrainConfig:
    method: str = 'cord'
    seed: int = 0
    lr: float = 3e-5
    batch_size: int = 8
    max_steps: int = 3000
    eval_steps: tuple = (500, 1000, 3000)
    eval_size: int = 200

    # alignment
    top_k: int = 20
    alpha: float = 2.0
    beta: float = 2.0
    weighting_enabled: bool = True
    group_size: int = 4
    token_temperature: float = 1.0
    grpo_temperature: float = 1.5
    seq_weight: float = 1.0
    length_normalized: bool = False
    reference_mode: str = 'greedy'
    teacher_refresh: str = 'epoch'
    max_len: int = 200

    # optimizer
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01

    # model
    precision: str = ''  # empty means CORD_DEFAULT_PRECISION
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_size: int = 256
    init_std: float = 0.02

    # data
    n_examples: int = 20000
    split_ratios: tuple = (0.8, 0.1, 0.1)
    max_program_length: int = 4
    modulus_min: int = 5
    modulus_max: int = 13
    audio_p_sub: float = 0.1
    audio_p_dup: float = 0.1
    aux_examples: int = 3000

    # pretraining
    pretrain_steps: int = 3000
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 32
    audio_fraction: float = 0.1
    aux_weight: float = 1.0

    # paths; empty means a location under CORD_OUTPUT_ROOT
    data_dir: str = ''
    base_checkpoint: str = ''

    def __post_init__(self):
        if not self.precision:
            object.__setattr__(self, 'precision', settings.CORD_DEFAULT_PRECISION)
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got '{self.precision}'")
        if self.method not in METHODS:
            raise ConfigError(f"Unknown method '{self.method}', expected one of {', '.join(METHODS)}")
        if self.reference_mode not in REFERENCE_MODES:
            raise ConfigError(f"reference_mode must be one of {REFERENCE_MODES}, got '{self.reference_mode}'")
        if self.teacher_refresh not in TEACHER_REFRESH:
            raise ConfigError(f"teacher_refresh must be one of {TEACHER_REFRESH}, got '{self.teacher_refresh}'")
        for name in ('batch_size', 'max_steps', 'eval_size', 'max_len', 'n_examples',
                     'pretrain_steps', 'pretrain_batch_size', 'aux_examples'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.group_size < 2:
            raise ConfigError(f"group_size must be at least 2, got {self.group_size}")
        if any(step < 1 for step in self.eval_steps):
            raise ConfigError(f"eval_steps must be positive, got {self.eval_steps}")
        if min(self.token_temperature, self.grpo_temperature) <= 0:
            raise ConfigError("Sampling temperatures must be positive")
        if self.lr < 0 or self.pretrain_lr < 0 or self.weight_decay < 0:
            raise ConfigError("Learning rates and weight decay must be non-negative")
        if not 0 < self.audio_fraction <= 1:
            raise ConfigError(f"audio_fraction must lie in (0, 1], got {self.audio_fraction}")
        self.align_config()
        self.noise_spec()

    def align_config(self):
        """Token-level settings; the opd arm always runs unweighted"""
        return AlignConfig(
            top_k=self.top_k,
            alpha=self.alpha,
            beta=self.beta,
            weighting_enabled=self.weighting_enabled and self.method != 'opd',
        )

    def model_config(self):
        return ModelConfig(
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            context_size=self.context_size,
            max_output_len=self.max_len,
            precision=self.precision,
            init_std=self.init_std,
        )

    def noise_spec(self):
        try:
            return NoiseSpec(p_sub=self.audio_p_sub, p_dup=self.audio_p_dup, seed=self.seed)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @property
    def modulus_range(self):
        return (self.modulus_min, self.modulus_max)

    @property
    def data_path(self):
        return Path(self.data_dir) if self.data_dir else Path(settings.CORD_OUTPUT_ROOT) / 'data'

    @property
    def base_checkpoint_path(self):
        if self.base_checkpoint:
            return Path(self.base_checkpoint)
        return Path(settings.CORD_OUTPUT_ROOT) / 'base' / 'base.ckpt'

    @property
    def arm(self):
        """Report label; cord without weighting is the GRPO + OPD ablation"""
        if self.method == 'cord' and not self.weighting_enabled:
            return 'grpo+opd'
        return self.method


FIELDS = {field.name: field for field in fields(TrainConfig)}


def parse_bool(name, raw):
    value = str(raw).strip().lower()
    if value in TRUE_VALUES:
        return True
    if value in FALSE_VALUES:
        return False
    raise ConfigError(f"{name}: expected a boolean, got '{raw}'")


def parse_value(name, raw):
    """Cast a raw string to the type of the named field"""
    if name not in FIELDS:
        raise ConfigError(f"Unknown config key '{name}'")
    default = FIELDS[name].default
    if raw is None:
        raise ConfigError(f"{name}: missing value")
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            return parse_bool(name, raw)
        if isinstance(default, tuple):
            cast = int if all(isinstance(item, int) for item in default) else float
            return Csv(cast=cast, post_process=tuple)(str(raw))
        return type(default)(str(raw).strip())
    except ValueError as e:
        raise ConfigError(f"{name}: cannot parse '{raw}' ({e})") from e


def format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ','.join(format_value(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path):
    """Raw key/value pairs from a config file; unknown keys are rejected"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    values = dotenv_values(path)
    for name in values:
        if name not in FIELDS:
            raise ConfigError(f"{path}: unknown config key '{name}'")
    return dict(values)


def parse_override(text):
    name, sep, raw = str(text).partition('=')
    if not sep or not name.strip():
        raise ConfigError(f"Override '{text}' is not of the form key=value")
    return name.strip(), raw.strip()


def resolve_config(path=None, flags=None, overrides=()):
    """
    Build a TrainConfig from a file, CLI flags and overrides.

    ``flags`` maps field names to values already typed by the CLI (None
    entries are ignored). Overrides are ``key=value`` strings.
    """
    values = {}
    if path:
        values.update({name: parse_value(name, raw) for name, raw in read_config_file(path).items()})
    for name, value in (flags or {}).items():
        if value is not None:
            values[name] = parse_value(name, value)
    for text in overrides or ():
        name, raw = parse_override(text)
        values[name] = parse_value(name, raw)
    config = TrainConfig(**values)
    logger.debug(f"Resolved config: {values}")
    return config


def with_values(config, **values):
    """Copy of ``config`` with some fields replaced, re-validated"""
    return replace(config, **values)


def resolved_text(config):
    return ''.join(f"{name}={format_value(value)}\n" for name, value in sorted(asdict(config).items()))


def write_resolved(config, out_dir):
    """Snapshot the effective configuration next to the run's outputs"""
    return write_text(Path(out_dir) / 'config.resolved', resolved_text(config))
