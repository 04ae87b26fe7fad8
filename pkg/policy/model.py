"""
Decoder-only policy shared by both input modalities.

One sequence is laid out as::

    [modality tag] [condition tokens ...] [SEP] [y_1 ... y_T]

Condition tokens are embedded with the table of their own alphabet, output
tokens with the shared output table. The hidden state at SEP predicts y_1 and
the state at y_t predicts y_{t+1}, so a prefix of length T yields T + 1
next-token distributions. The text-conditioned and audio-conditioned
distributions come from the same parameters; there is no separate teacher.
"""
import logging
from dataclasses import asdict, dataclass

import numpy as np

from autodiff import ops
from autodiff.tensor import Tensor, no_grad, resolve_dtype
from cord_lab.exceptions import ConfigError, ShapeError, VocabularyError
from tasks.vocab import AUDIO_VOCAB_SIZE, AUX_LABELS, OUTPUT_VOCAB_SIZE, TEXT_VOCAB_SIZE

logger = logging.getLogger(__name__)

TEXT = 'text'
AUDIO = 'audio'
MODALITIES = (TEXT, AUDIO)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_size: int = 256
    max_output_len: int = 200
    text_vocab: int = TEXT_VOCAB_SIZE
    audio_vocab: int = AUDIO_VOCAB_SIZE
    output_vocab: int = OUTPUT_VOCAB_SIZE
    aux_classes: int = len(AUX_LABELS)
    precision: str = 'f32'
    init_std: float = 0.02

    def __post_init__(self):
        sizes = {
            'd_model': self.d_model,
            'n_layers': self.n_layers,
            'n_heads': self.n_heads,
            'context_size': self.context_size,
            'max_output_len': self.max_output_len,
            'text_vocab': self.text_vocab,
            'audio_vocab': self.audio_vocab,
            'output_vocab': self.output_vocab,
            'aux_classes': self.aux_classes,
        }
        for name, value in sizes.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.context_size < self.max_output_len:
            raise ConfigError(
                f"context_size={self.context_size} is smaller than max_output_len={self.max_output_len}"
            )
        if self.init_std <= 0:
            raise ConfigError(f"init_std must be positive, got {self.init_std}")
        resolve_dtype(self.precision)

    @property
    def d_ff(self):
        return 4 * self.d_model

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    @property
    def dtype(self):
        return resolve_dtype(self.precision)

    def input_vocab(self, modality):
        return self.text_vocab if modality == TEXT else self.audio_vocab

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


@dataclass(frozen=True)
class Condition:
    """An input sequence tagged with its modality"""
    modality: str
    tokens: tuple

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise VocabularyError(f"Unknown modality '{self.modality}'")
        object.__setattr__(self, 'tokens', tuple(int(t) for t in self.tokens))

    @classmethod
    def text(cls, pair):
        return cls(TEXT, pair.x_text)

    @classmethod
    def audio(cls, pair):
        return cls(AUDIO, pair.x_audio)

    def __len__(self):
        return len(self.tokens)


def parameter_shapes(config):
    """Ordered (name, shape) for every learnable tensor"""
    d, ff = config.d_model, config.d_ff
    shapes = [
        ('tok_emb', (config.output_vocab, d)),
        ('text_emb', (config.text_vocab, d)),
        ('audio_emb', (config.audio_vocab, d)),
        ('modality_emb', (len(MODALITIES), d)),
        ('sep_emb', (1, d)),
        ('pos_emb', (config.context_size, d)),
    ]
    for index in range(config.n_layers):
        prefix = f'block{index}.'
        shapes += [
            (prefix + 'ln1.gamma', (d,)),
            (prefix + 'ln1.beta', (d,)),
            (prefix + 'attn.w_q', (d, d)),
            (prefix + 'attn.w_k', (d, d)),
            (prefix + 'attn.w_v', (d, d)),
            (prefix + 'attn.w_o', (d, d)),
            (prefix + 'attn.b_o', (d,)),
            (prefix + 'ln2.gamma', (d,)),
            (prefix + 'ln2.beta', (d,)),
            (prefix + 'mlp.w_in', (d, ff)),
            (prefix + 'mlp.b_in', (ff,)),
            (prefix + 'mlp.w_out', (ff, d)),
            (prefix + 'mlp.b_out', (d,)),
        ]
    shapes += [
        ('ln_f.gamma', (d,)),
        ('ln_f.beta', (d,)),
        ('head.w', (d, config.output_vocab)),
        ('head.b', (config.output_vocab,)),
        ('aux.w', (d, config.aux_classes)),
        ('aux.b', (config.aux_classes,)),
    ]
    return shapes


class ModelParams:
    """All learnable tensors of one policy, keyed by name in a fixed order"""

    def __init__(self, config, tensors):
        expected = parameter_shapes(config)
        names = [name for name, _ in expected]
        if list(tensors) != names:
            raise ShapeError(f"Parameter names do not match the layout for {config}")
        for name, shape in expected:
            if tensors[name].shape != shape:
                raise ShapeError(f"Parameter '{name}' has shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def parameter_count(self):
        return int(sum(tensor.data.size for tensor in self.tensors.values()))

    def zero_grad(self):
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def gradients(self):
        """name -> accumulated gradient (zeros where none flowed)"""
        return {
            name: tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            for name, tensor in self.tensors.items()
        }

    def clone(self):
        """Independent copy with fresh leaves"""
        tensors = {
            name: Tensor(tensor.data.copy(), requires_grad=True, name=name)
            for name, tensor in self.tensors.items()
        }
        return ModelParams(self.config, tensors)

    def with_precision(self, precision):
        """Copy of the same values in another precision, with fresh leaves"""
        config = ModelConfig(**{**self.config.to_dict(), 'precision': precision})
        tensors = {
            name: Tensor(tensor.data.astype(config.dtype), requires_grad=True, name=name)
            for name, tensor in self.tensors.items()
        }
        return ModelParams(config, tensors)

    def equals(self, other):
        """Bit-level equality of every tensor"""
        return list(self.tensors) == list(other.tensors) and all(
            np.array_equal(self.tensors[name].data, other.tensors[name].data) for name in self.tensors
        )

    def __repr__(self):
        return f"ModelParams({len(self.tensors)} tensors, {self.parameter_count()} scalars, {self.config.precision})"


def init_params(config, seed):
    """Scaled Gaussian weights, unit layer-norm gains, zero biases"""
    rng = np.random.default_rng(seed)
    dtype = config.dtype
    residual_std = config.init_std / np.sqrt(2.0 * config.n_layers)
    tensors = {}
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit('.', 1)[-1]
        if leaf == 'gamma':
            values = np.ones(shape)
        elif leaf in ('beta', 'b', 'b_o', 'b_in', 'b_out'):
            values = np.zeros(shape)
        elif leaf in ('w_o', 'w_out'):
            values = rng.normal(0.0, residual_std, size=shape)
        else:
            values = rng.normal(0.0, config.init_std, size=shape)
        tensors[name] = Tensor(values.astype(dtype), requires_grad=True, name=name)
    params = ModelParams(config, tensors)
    logger.debug(f"Initialised {params!r} from seed {seed}")
    return params


def _check_inputs(config, condition, prefix):
    vocab = config.input_vocab(condition.modality)
    for token in condition.tokens:
        if not 0 <= token < vocab:
            raise VocabularyError(f"{condition.modality} token {token} outside [0, {vocab})")
    for token in prefix:
        if not 0 <= token < config.output_vocab:
            raise VocabularyError(f"Output token {token} outside [0, {config.output_vocab})")
    length = len(condition.tokens) + 2 + len(prefix)
    if length > config.context_size:
        raise ShapeError(f"Sequence of length {length} exceeds the context size {config.context_size}")
    return length


def _embed(params, condition, prefix, length):
    input_table = params['text_emb'] if condition.modality == TEXT else params['audio_emb']
    parts = [ops.gather_rows(params['modality_emb'], [MODALITIES.index(condition.modality)])]
    if condition.tokens:
        parts.append(ops.gather_rows(input_table, condition.tokens))
    parts.append(params['sep_emb'])
    if prefix:
        parts.append(ops.gather_rows(params['tok_emb'], prefix))
    config = params.config
    if length < config.context_size:
        parts.append(Tensor(np.zeros((config.context_size - length, config.d_model), dtype=config.dtype)))
    return ops.add(ops.concat_rows(parts), params['pos_emb'])


def _attention(params, prefix, x, config):
    query = ops.matmul(x, params[prefix + 'w_q'])
    key = ops.matmul(x, params[prefix + 'w_k'])
    value = ops.matmul(x, params[prefix + 'w_v'])
    scale = 1.0 / np.sqrt(config.head_dim)
    heads = []
    for head in range(config.n_heads):
        lo, hi = head * config.head_dim, (head + 1) * config.head_dim
        q, k, v = ops.columns(query, lo, hi), ops.columns(key, lo, hi), ops.columns(value, lo, hi)
        weights = ops.causal_softmax(ops.scale(ops.matmul(q, ops.transpose(k)), scale))
        heads.append(ops.matmul(weights, v))
    mixed = heads[0] if len(heads) == 1 else ops.concat_columns(heads)
    return ops.add_bias(ops.matmul(mixed, params[prefix + 'w_o']), params[prefix + 'b_o'])


def _mlp(params, prefix, x):
    hidden = ops.gelu(ops.add_bias(ops.matmul(x, params[prefix + 'w_in']), params[prefix + 'b_in']))
    return ops.add_bias(ops.matmul(hidden, params[prefix + 'w_out']), params[prefix + 'b_out'])


def hidden_states(params, condition, prefix=()):
    """
    Final-layer-normed hidden states, shape [context_size, d_model].

    The trunk always runs on a zero-padded full-context matrix so every matmul
    has the same shape whatever the sequence length; rows past the sequence
    are padding. Under the causal mask this keeps each row bit-identical when
    later tokens are appended.
    """
    config = params.config
    prefix = [int(token) for token in prefix]
    length = _check_inputs(config, condition, prefix)
    x = _embed(params, condition, prefix, length)
    for index in range(config.n_layers):
        block = f'block{index}.'
        normed = ops.layer_norm(x, params[block + 'ln1.gamma'], params[block + 'ln1.beta'])
        x = ops.add(x, _attention(params, block + 'attn.', normed, config))
        normed = ops.layer_norm(x, params[block + 'ln2.gamma'], params[block + 'ln2.beta'])
        x = ops.add(x, _mlp(params, block + 'mlp.', normed))
    return ops.layer_norm(x, params['ln_f.gamma'], params['ln_f.beta'])


def forward(params, condition, prefix=()):
    """
    Next-token log-distributions for every step of ``prefix``.

    Returns a Tensor of shape [len(prefix) + 1, output_vocab]; row t is the
    distribution of y_{t+1} given the condition and y_1..y_t.
    """
    hidden = hidden_states(params, condition, prefix)
    separator = len(condition.tokens) + 1
    logits = ops.add_bias(ops.matmul(hidden, params['head.w']), params['head.b'])
    return ops.rows(ops.log_softmax(logits), separator, separator + 1 + len(prefix))


def step_distributions(params, condition, prefix=()):
    """forward() as a plain array, without recording a graph"""
    with no_grad():
        return forward(params, condition, prefix).data


def sequence_logprob(params, condition, y):
    """Differentiable sum over t of log p(y_t | y_<t, condition)"""
    y = [int(token) for token in y]
    if not y:
        raise ShapeError("sequence_logprob needs a non-empty output sequence")
    log_probs = forward(params, condition, y[:-1])
    return ops.total(ops.pick(log_probs, y))


def aux_log_probs(params, condition):
    """Auxiliary-class log-distribution read from the separator state, shape [1, aux_classes]"""
    hidden = hidden_states(params, condition, ())
    separator = len(condition.tokens) + 1
    state = ops.rows(hidden, separator, separator + 1)
    logits = ops.add_bias(ops.matmul(state, params['aux.w']), params['aux.b'])
    return ops.log_softmax(logits)
