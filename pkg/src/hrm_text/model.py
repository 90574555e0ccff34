"""
HRM-Text architecture and its diagnostic baselines

An HRM forward pass interleaves a fast L module and a slow H module. Each
module is `layers_per_module` PreNorm blocks (sigmoid-gated attention with
RoPE, then SwiGLU) capped by a parameterless RMSNorm at the module exit:

```
z_n = Norm(z_{n-1} + injection + sum_l Sublayer_l(Norm(.)))
```

The standard variant is one plain block stack; the looped variant applies one
weight-shared module `loop_count` times.
"""


import contextlib
import functools
import logging
import math
import threading
from collections.abc import Mapping
from dataclasses import dataclass
from dataclasses import field
from enum import StrEnum

import numpy as np

from hrm_text import tensor as T
from hrm_text.errors import ConfigError
from hrm_text.errors import ContractError
from hrm_text.errors import SequenceLengthError
from hrm_text.objective import build_prefixlm_mask


logger = logging.getLogger(__name__)


class Variant(StrEnum):
    HRM = 'hrm'
    STANDARD = 'standard'
    LOOPED = 'looped'


class NormStyle(StrEnum):
    MAGIC = 'magic'
    PRENORM = 'prenorm'
    POSTNORM = 'postnorm'


class ModuleTag(StrEnum):
    H = 'H'
    L = 'L'
    LOOP = 'loop'
    STACK = 'stack'


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.HRM
    d_model: int = 1536
    layers_per_module: int = 16
    head_dim: int = 128
    vocab_size: int = 4096
    context_len: int = 4096
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6
    h_cycles: int = 2
    l_steps_per_cycle: int = 3
    loop_count: int = 4
    mlp_multiple: int = 64
    norm_style: NormStyle = NormStyle.MAGIC
    train_z_l0: bool = True

    @classmethod
    def full_scale(cls, **overrides) -> 'ModelConfig':
        values = dict(vocab_size=65536)
        values.update(overrides)
        return cls(**values)

    @property
    def n_heads(self) -> int:
        return self.d_model // self.head_dim

    @property
    def total_steps(self) -> int:
        """
        Module applications per forward pass
        """
        if self.variant is Variant.HRM:
            return self.h_cycles * (self.l_steps_per_cycle + 1)
        if self.variant is Variant.LOOPED:
            return self.loop_count
        return 1

    @property
    def mlp_hidden(self) -> int:
        multiple = self.mlp_multiple
        return max(multiple, int(round(8 * self.d_model / 3 / multiple)) * multiple)

    def validate(self) -> None:
        positive = (
            'd_model', 'layers_per_module', 'head_dim', 'vocab_size', 'context_len',
            'h_cycles', 'l_steps_per_cycle', 'loop_count', 'mlp_multiple'
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f'model.{name}', 'must be a positive integer')
        if self.rope_theta <= 0:
            raise ConfigError('model.rope_theta', 'must be positive')
        if self.norm_eps <= 0:
            raise ConfigError('model.norm_eps', 'must be positive')
        if self.d_model % self.head_dim != 0:
            raise ConfigError('model.head_dim', f'must divide d_model={self.d_model}')
        if self.head_dim % 2 != 0:
            raise ConfigError('model.head_dim', 'must be even for RoPE')


class Parameters(dict):
    """
    Named leaf tensors of one model
    """

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self.items()}

    def trainable(self) -> dict[str, T.Tensor]:
        return {name: tensor for name, tensor in self.items() if tensor.requires_grad}

    def copy(self) -> 'Parameters':
        return Parameters({
            name: T.Tensor(tensor.data, requires_grad=tensor.requires_grad, name=name, dtype=tensor.dtype)
            for name, tensor in self.items()
        })

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], frozen: tuple[str, ...] = ()) -> 'Parameters':
        return cls({
            name: T.Tensor(array, requires_grad=name not in frozen, name=name, dtype=array.dtype)
            for name, array in arrays.items()
        })


def module_prefixes(config: ModelConfig) -> tuple[str, ...]:
    if config.variant is Variant.HRM:
        return ('h', 'l')
    return ('core',)


def component_of(name: str) -> str:
    """
    Gradient-statistics component tag of a parameter name
    """
    if name.startswith('h.'):
        return 'H-module'
    if name.startswith('l.'):
        return 'L-module'
    return 'other'


def init_parameters(config: ModelConfig, seed: int = 0, precision: int | None = None) -> Parameters:
    """
    LeCun-normal initialization: zero mean, variance 1/fan_in; gate biases start at zero
    """
    config.validate()
    dtype = T.Precision(precision).dtype if precision else T.default_precision().dtype
    rng = np.random.default_rng(seed)
    d, f, vocab = config.d_model, config.mlp_hidden, config.vocab_size

    def lecun(shape, fan_in):
        return rng.normal(0.0, math.sqrt(1.0 / fan_in), size=shape).astype(dtype)

    arrays = {'embed': lecun((vocab, d), d)}
    if config.variant is Variant.HRM:
        arrays['z_l0'] = lecun((d,), d)

    for prefix in module_prefixes(config):
        for layer in range(config.layers_per_module):
            scope = f'{prefix}.layers.{layer}'
            for name in ('wq', 'wk', 'wv', 'wo', 'wg'):
                arrays[f'{scope}.attn.{name}'] = lecun((d, d), d)
            arrays[f'{scope}.attn.bg'] = np.zeros((d,), dtype=dtype)
            arrays[f'{scope}.mlp.wa'] = lecun((d, f), d)
            arrays[f'{scope}.mlp.wb'] = lecun((d, f), d)
            arrays[f'{scope}.mlp.wc'] = lecun((f, d), f)

    arrays['head'] = lecun((d, vocab), d)

    frozen = () if config.train_z_l0 else ('z_l0',)
    return Parameters.from_arrays(arrays, frozen)


def layer_params(params: Mapping[str, T.Tensor], prefix: str, layer: int) -> dict[str, T.Tensor]:
    scope = f'{prefix}.layers.{layer}.'
    return {name[len(scope):]: tensor for name, tensor in params.items() if name.startswith(scope)}


def module_params(params: Mapping[str, T.Tensor], config: ModelConfig, prefix: str) -> list[dict[str, T.Tensor]]:
    return [layer_params(params, prefix, layer) for layer in range(config.layers_per_module)]


def rms_norm(x: T.Tensor, eps: float = 1e-6) -> T.Tensor:
    """
    x / sqrt(mean(x^2) + eps) over the last axis, no learned scale
    """
    mean_square = T.reduce_mean(x * x, axis=-1, keepdims=True)
    return x * T.rsqrt(mean_square + eps)


@functools.lru_cache(maxsize=16)
def _pair_rotation(d: int, dtype_name: str) -> np.ndarray:
    # (x @ R)[2i] = -x[2i+1], (x @ R)[2i+1] = x[2i]
    rotation = np.zeros((d, d), dtype=dtype_name)
    for i in range(0, d, 2):
        rotation[i + 1, i] = -1.0
        rotation[i, i + 1] = 1.0
    rotation.setflags(write=False)
    return rotation


def rope_tables(positions: np.ndarray, head_dim: int, n_heads: int, theta: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    """
    cos/sin tables of shape positions.shape + (n_heads * head_dim,)
    """
    inverse = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[..., None] * inverse
    angles = np.tile(np.repeat(angles, 2, axis=-1), n_heads)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_apply(q: T.Tensor, k: T.Tensor, positions, head_dim: int, theta: float = 10000.0) -> tuple[T.Tensor, T.Tensor]:
    """
    Rotates each (2i, 2i+1) coordinate pair of every head by pos * theta^(-2i/head_dim)
    """
    if head_dim % 2 != 0:
        raise ConfigError('model.head_dim', 'must be even for RoPE')
    d = q.shape[-1]
    cos, sin = rope_tables(positions, head_dim, d // head_dim, theta, q.dtype)
    rotation = T.Tensor(_pair_rotation(d, q.dtype.name), dtype=q.dtype)
    cos_t, sin_t = T.Tensor(cos, dtype=q.dtype), T.Tensor(sin, dtype=q.dtype)

    def rotate(x):
        return x * cos_t + (x @ rotation) * sin_t

    return rotate(q), rotate(k)


def _split_heads(x: T.Tensor, n_heads: int, head_dim: int) -> T.Tensor:
    return T.swapaxes(T.reshape(x, x.shape[:-1] + (n_heads, head_dim)), -3, -2)


def _merge_heads(x: T.Tensor) -> T.Tensor:
    merged = T.swapaxes(x, -3, -2)
    return T.reshape(merged, merged.shape[:-2] + (merged.shape[-2] * merged.shape[-1],))


def gated_attention(
    x: T.Tensor,
    mask: np.ndarray,
    params: Mapping[str, T.Tensor],
    config: ModelConfig,
    positions: np.ndarray | None = None
) -> tuple[T.Tensor, np.ndarray]:
    """
    Multi-head attention whose per-head output is gated by sigmoid(x W_gate + b)
    before the output projection; returns the output and attention probabilities
    """
    seq_len = x.shape[-2]
    if positions is None:
        positions = np.arange(seq_len)
    n_heads, head_dim = config.n_heads, config.head_dim

    q = x @ params['attn.wq']
    k = x @ params['attn.wk']
    v = x @ params['attn.wv']
    q, k = rope_apply(q, k, positions, head_dim, config.rope_theta)

    qh = _split_heads(q, n_heads, head_dim)
    kh = _split_heads(k, n_heads, head_dim)
    vh = _split_heads(v, n_heads, head_dim)

    scores = T.scale(qh @ T.swapaxes(kh, -1, -2), 1.0 / math.sqrt(head_dim))
    probs = T.masked_softmax(scores, np.asarray(mask, dtype=bool)[..., None, :, :])
    attended = _merge_heads(probs @ vh)

    gate = T.sigmoid(x @ params['attn.wg'] + params['attn.bg'])
    return (attended * gate) @ params['attn.wo'], probs.data


def swiglu_mlp(x: T.Tensor, params: Mapping[str, T.Tensor]) -> T.Tensor:
    return (T.silu(x @ params['mlp.wa']) * (x @ params['mlp.wb'])) @ params['mlp.wc']


def prenorm_block(x, mask, params, config: ModelConfig, positions=None) -> tuple[T.Tensor, np.ndarray]:
    """
    h + Attn(Norm(h)), then h + MLP(Norm(h))
    """
    attended, probs = gated_attention(rms_norm(x, config.norm_eps), mask, params, config, positions)
    x = x + attended
    x = x + swiglu_mlp(rms_norm(x, config.norm_eps), params)
    return x, probs


def postnorm_block(x, mask, params, config: ModelConfig, positions=None) -> tuple[T.Tensor, np.ndarray]:
    """
    Norm(h + Attn(h)), then Norm(h + MLP(h))
    """
    attended, probs = gated_attention(x, mask, params, config, positions)
    x = rms_norm(x + attended, config.norm_eps)
    x = rms_norm(x + swiglu_mlp(x, params), config.norm_eps)
    return x, probs


def block(x, mask, params, config: ModelConfig, positions=None) -> tuple[T.Tensor, np.ndarray]:
    if config.norm_style is NormStyle.POSTNORM:
        return postnorm_block(x, mask, params, config, positions)
    return prenorm_block(x, mask, params, config, positions)


class _Recorder:
    def __init__(self, trace: 'RecurrentTrace', head: np.ndarray | None, attention: bool, layers: bool):
        self.trace = trace
        self.head = head
        self.attention = attention
        self.layers = layers

    def on_block(self, step: int, module: 'ModuleTag', layer: int, state: T.Tensor, probs: np.ndarray) -> None:
        if self.layers:
            self.trace.block_states.append(state.data.copy())
        if self.attention:
            self.trace.attention.append(AttentionRecord(step, module, layer, probs))

    def on_step(self, step: int, module: 'ModuleTag', state: T.Tensor, probe: bool) -> None:
        logits = None
        if probe and self.head is not None:
            logits = np.matmul(state.data, self.head)
        self.trace.steps.append(StepRecord(step, module, state.data.copy(), logits))


def magicnorm_module(
    z: T.Tensor,
    injection: T.Tensor,
    mask: np.ndarray,
    layers: list[Mapping[str, T.Tensor]],
    config: ModelConfig,
    positions: np.ndarray | None = None,
    recorder: _Recorder | None = None,
    step: int = 0,
    module: 'ModuleTag' = None
) -> T.Tensor:
    """
    Applies the module's blocks to z + injection and normalizes the exit

    The exit norm is skipped for the pure-PreNorm ablation; PostNorm blocks
    already end normalized.
    """
    if z.shape != injection.shape:
        raise ContractError(f'state {z.shape} and injection {injection.shape} differ')
    hidden = z + injection
    for index, params in enumerate(layers):
        hidden, probs = block(hidden, mask, params, config, positions)
        if recorder is not None:
            recorder.on_block(step, module, index, hidden, probs)
    if config.norm_style is NormStyle.MAGIC:
        hidden = rms_norm(hidden, config.norm_eps)
    return hidden


@dataclass
class StepRecord:
    index: int
    module: ModuleTag
    state: np.ndarray
    logits: np.ndarray | None = None


@dataclass
class AttentionRecord:
    step: int
    module: ModuleTag
    layer: int
    probs: np.ndarray


@dataclass
class RecurrentTrace:
    variant: Variant
    steps: list[StepRecord] = field(default_factory=list)
    block_states: list[np.ndarray] = field(default_factory=list)
    attention: list[AttentionRecord] = field(default_factory=list)

    def tags(self) -> list[ModuleTag]:
        return [record.module for record in self.steps]

    def h_exits(self) -> list[StepRecord]:
        return [record for record in self.steps if record.module is ModuleTag.H]

    def states(self) -> list[np.ndarray]:
        return [record.state for record in self.steps]

    def attention_by_layer(self) -> dict[str, list[np.ndarray]]:
        """
        Attention snapshots grouped by module and layer, in first-seen order
        """
        grouped: dict[str, list[np.ndarray]] = {}
        for record in self.attention:
            label = f'{record.module.value}.{record.layer}'
            grouped.setdefault(label, []).append(record.probs)
        return grouped


class PassCounter:
    """
    Counts forward passes across threads
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def increment(self) -> None:
        with self._lock:
            self.value += 1


forward_passes = PassCounter()


def module_schedule(config: ModelConfig) -> list[ModuleTag]:
    if config.variant is Variant.HRM:
        cycle = [ModuleTag.L] * config.l_steps_per_cycle + [ModuleTag.H]
        return cycle * config.h_cycles
    if config.variant is Variant.LOOPED:
        return [ModuleTag.LOOP] * config.loop_count
    return [ModuleTag.STACK]


def _prepare(tokens, prefix_len, config: ModelConfig, mask, positions):
    tokens = np.asarray(tokens, dtype=np.int64)
    seq_len = tokens.shape[-1]
    if seq_len < 1:
        raise SequenceLengthError('empty token sequence')
    if seq_len > config.context_len:
        raise SequenceLengthError(f'sequence of {seq_len} tokens exceeds context_len={config.context_len}')
    if mask is None:
        mask = build_prefixlm_mask(prefix_len, seq_len)
    if positions is None:
        positions = np.arange(seq_len)
    return tokens, mask, positions


def _resolve_horizon(grad_horizon: int | None, total: int) -> int:
    if grad_horizon is None:
        return total
    if not 2 <= grad_horizon <= total:
        raise ConfigError('grad_horizon', f'K={grad_horizon} outside [2, {total}]')
    return grad_horizon


def hrm_forward(
    tokens,
    prefix_len: int,
    config: ModelConfig,
    params: Mapping[str, T.Tensor],
    grad_horizon: int | None = None,
    *,
    mask: np.ndarray | None = None,
    positions: np.ndarray | None = None,
    record_attention: bool = False,
    record_layers: bool = False,
    record_logits: bool = False
) -> tuple[T.Tensor, RecurrentTrace]:
    """
    Runs the [L x l_steps, H] x h_cycles schedule and decodes the final H state

    Gradients flow only through the last `grad_horizon` module steps; both
    states entering that window are detached. `mask` overrides the PrefixLM
    mask built from `prefix_len`.
    """
    if config.variant is not Variant.HRM:
        raise ContractError(f'hrm_forward called with variant "{config.variant}"')
    tokens, mask, positions = _prepare(tokens, prefix_len, config, mask, positions)
    schedule = module_schedule(config)
    total = len(schedule)
    boundary = total - _resolve_horizon(grad_horizon, total)

    trace = RecurrentTrace(Variant.HRM)
    head = params['head']
    recorder = _Recorder(trace, head.data if record_logits else None, record_attention, record_layers)
    h_layers = module_params(params, config, 'h')
    l_layers = module_params(params, config, 'l')

    embedded = T.embedding(params['embed'], tokens)
    z_h = rms_norm(embedded, config.norm_eps)
    z_l = T.broadcast_to(params['z_l0'], embedded.shape)

    for step, tag in enumerate(schedule):
        if step == boundary and boundary > 0:
            z_l, z_h = T.detach(z_l), T.detach(z_h)
        scope = T.no_grad() if step < boundary else contextlib.nullcontext()
        with scope:
            if tag is ModuleTag.L:
                z_l = magicnorm_module(z_l, z_h + embedded, mask, l_layers, config, positions, recorder, step, tag)
                recorder.on_step(step, tag, z_l, probe=False)
            else:
                z_h = magicnorm_module(z_h, z_l, mask, h_layers, config, positions, recorder, step, tag)
                recorder.on_step(step, tag, z_h, probe=True)

    logits = z_h @ head
    if record_logits:
        trace.steps[-1].logits = logits.data
    forward_passes.increment()
    return logits, trace


def variant_forward(
    tokens,
    prefix_len: int,
    config: ModelConfig,
    params: Mapping[str, T.Tensor],
    grad_horizon: int | None = None,
    *,
    mask: np.ndarray | None = None,
    positions: np.ndarray | None = None,
    record_attention: bool = False,
    record_layers: bool = False,
    record_logits: bool = False
) -> tuple[T.Tensor, RecurrentTrace]:
    """
    Standard stack (blocks, final norm, head) or weight-shared looped module
    """
    if config.variant is Variant.HRM:
        raise ContractError('variant_forward does not run the hrm variant; use hrm_forward')
    tokens, mask, positions = _prepare(tokens, prefix_len, config, mask, positions)

    trace = RecurrentTrace(config.variant)
    head = params['head']
    recorder = _Recorder(trace, head.data if record_logits else None, record_attention, record_layers)
    layers = module_params(params, config, 'core')
    embedded = T.embedding(params['embed'], tokens)

    if config.variant is Variant.STANDARD:
        hidden = embedded
        for index, layer in enumerate(layers):
            hidden, probs = block(hidden, mask, layer, config, positions)
            recorder.on_block(0, ModuleTag.STACK, index, hidden, probs)
        hidden = rms_norm(hidden, config.norm_eps)
        recorder.on_step(0, ModuleTag.STACK, hidden, probe=True)
    else:
        total = config.loop_count
        boundary = total - _resolve_horizon(grad_horizon, total) if total >= 2 else 0
        hidden = T.Tensor(np.zeros(embedded.shape), dtype=embedded.dtype)
        for step in range(total):
            if step == boundary and boundary > 0:
                hidden = T.detach(hidden)
            scope = T.no_grad() if step < boundary else contextlib.nullcontext()
            with scope:
                hidden = magicnorm_module(hidden, embedded, mask, layers, config, positions, recorder, step, ModuleTag.LOOP)
                recorder.on_step(step, ModuleTag.LOOP, hidden, probe=True)

    logits = hidden @ head
    if record_logits:
        trace.steps[-1].logits = logits.data
    forward_passes.increment()
    return logits, trace


def forward(tokens, prefix_len, config: ModelConfig, params, grad_horizon=None, **kwargs) -> tuple[T.Tensor, RecurrentTrace]:
    """
    Dispatches to the forward pass of the configured variant
    """
    if config.variant is Variant.HRM:
        return hrm_forward(tokens, prefix_len, config, params, grad_horizon, **kwargs)
    return variant_forward(tokens, prefix_len, config, params, grad_horizon, **kwargs)
