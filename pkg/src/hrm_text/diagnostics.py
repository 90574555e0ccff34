"""
Gradient-stability statistics, Jacobian growth, effective-depth probes and FLOPs
"""


import csv
import logging
from collections.abc import Callable
from collections.abc import Iterable
from collections.abc import Mapping
from dataclasses import dataclass
from dataclasses import field
from enum import StrEnum

import numpy as np

from hrm_text import tensor as T
from hrm_text.errors import ContractError
from hrm_text.model import ModelConfig
from hrm_text.model import ModuleTag
from hrm_text.model import RecurrentTrace
from hrm_text.model import Variant
from hrm_text.model import component_of
from hrm_text.model import forward
from hrm_text.model import magicnorm_module
from hrm_text.model import module_params
from hrm_text.model import rms_norm
from hrm_text.objective import attention_entropy
from hrm_text.objective import response_nll


logger = logging.getLogger(__name__)

GRAD_EPS = 1e-12
TAIL_QUANTILE = 99.9


@dataclass
class GradStats:
    mean_abs: float
    log_dispersion: float
    tail_to_median: float
    median_abs: float
    step: int = 0
    component: str = 'all'
    all_zero: bool = False
    count: int = 0


def _magnitudes(grads) -> np.ndarray:
    if isinstance(grads, Mapping):
        arrays = [np.abs(np.asarray(g, dtype=np.float64)).reshape(-1) for g in grads.values()]
        return np.concatenate(arrays) if arrays else np.zeros(0)
    return np.abs(np.asarray(grads, dtype=np.float64)).reshape(-1)


def grad_magnitude_stats(
    grads,
    eps: float = GRAD_EPS,
    tail_quantile: float = TAIL_QUANTILE,
    step: int = 0,
    component: str = 'all'
) -> GradStats:
    """
    Statistics over the pooled |g| of every entry

    log_dispersion is Std(log(|g| + eps)); tail_to_median is
    (p_tail + eps) / (p50 + eps), which stays finite when the median is zero.
    """
    magnitudes = _magnitudes(grads)
    if magnitudes.size == 0:
        raise ContractError('gradient statistics need at least one entry')

    all_zero = not magnitudes.any()
    if all_zero:
        logger.warning('All-zero gradients for component %s at step %d', component, step)

    median = float(np.percentile(magnitudes, 50.0))
    tail = float(np.percentile(magnitudes, tail_quantile))
    return GradStats(
        mean_abs=float(magnitudes.mean()),
        log_dispersion=float(np.log(magnitudes + eps).std()),
        tail_to_median=(tail + eps) / (median + eps),
        median_abs=median,
        step=step,
        component=component,
        all_zero=all_zero,
        count=int(magnitudes.size),
    )


def grad_stats_by_component(grads: Mapping[str, np.ndarray], step: int = 0, **kwargs) -> dict[str, GradStats]:
    """
    Splits a named gradient map into H-module, L-module and other, plus the pooled total
    """
    groups: dict[str, dict[str, np.ndarray]] = {}
    for name, grad in grads.items():
        groups.setdefault(component_of(name), {})[name] = grad
    stats = {
        component: grad_magnitude_stats(group, step=step, component=component, **kwargs)
        for component, group in sorted(groups.items())
    }
    stats['all'] = grad_magnitude_stats(grads, step=step, component='all', **kwargs)
    return stats


def normalize_within_checkpoint(series: Mapping[int, float], reference: int) -> dict[int, float]:
    """
    Divides every entry by the entry at the reference key
    """
    if reference not in series:
        raise ContractError(f'reference {reference} missing from series')
    base = series[reference]
    if base == 0:
        raise ContractError(f'reference value at {reference} is zero')
    return {key: value / base for key, value in series.items()}


def paired_gradient_comparison(
    tokens,
    prefix_len: int,
    config: ModelConfig,
    params,
    horizon: int,
    *,
    mask: np.ndarray | None = None,
    positions: np.ndarray | None = None,
    loss_mask: np.ndarray | None = None,
    segment_ids: np.ndarray | None = None,
    step: int = 0
) -> dict[str, dict[str, GradStats]]:
    """
    Gradient statistics of one batch under the truncated horizon and under full BPTT
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if loss_mask is None:
        loss_mask = np.arange(tokens.shape[-1]) >= prefix_len
        loss_mask = np.broadcast_to(loss_mask, tokens.shape)
    trainable = params.trainable()

    def gradients(k):
        with T.Tape() as tape:
            logits, _ = forward(tokens, prefix_len, config, params, k, mask=mask, positions=positions)
            loss = response_nll(logits, tokens, loss_mask, segment_ids)
        return tape.backward(loss).named(trainable)

    full = config.total_steps if config.variant is not Variant.STANDARD else None
    return {
        'truncated': grad_stats_by_component(gradients(horizon), step=step),
        'full': grad_stats_by_component(gradients(full), step=step),
    }


@dataclass
class GrowthEstimate:
    depth: int
    estimate: float
    converged: bool
    probes: list[float] = field(default_factory=list)


def _compose(step_fn: Callable[[T.Tensor], T.Tensor], depth: int) -> Callable[[T.Tensor], T.Tensor]:
    def composed(x):
        for _ in range(depth):
            x = step_fn(x)
        return x
    return composed


def _jvp(fn, x: np.ndarray, v: np.ndarray, h: float) -> np.ndarray:
    with T.no_grad():
        plus = fn(T.Tensor(x + h * v, dtype=np.float64)).data
        minus = fn(T.Tensor(x - h * v, dtype=np.float64)).data
    return (plus - minus) / (2.0 * h)


def _vjp(fn, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    point = T.Tensor(x, requires_grad=True, dtype=np.float64)
    with T.Tape() as tape:
        out = fn(point)
        loss = (out * T.Tensor(u, dtype=np.float64)).sum()
    return tape.backward(loss).of(point)


def jacobian_growth(
    step_fn: Callable[[T.Tensor], T.Tensor],
    state: np.ndarray,
    depths: Iterable[int],
    probes: int = 3,
    max_iters: int = 100,
    tol: float = 1e-7,
    fd_step: float = 1e-5,
    seed: int = 0
) -> list[GrowthEstimate]:
    """
    Spectral norm of the d-fold composed step Jacobian at `state`

    Power iteration on J^T J. The tape is reverse-mode only, so the forward
    product J v is a float64 central difference with step `fd_step` (error of
    order fd_step**2) and the reverse product J^T w is exact from the tape.
    Each depth reports the median over random unit probes.
    """
    state = np.asarray(state, dtype=np.float64)
    rng = np.random.default_rng(seed)
    results = []
    with T.precision(T.Precision.DOUBLE):
        for depth in depths:
            fn = _compose(step_fn, depth)
            estimates, all_converged = [], True
            for _ in range(probes):
                v = rng.normal(size=state.shape)
                v /= np.linalg.norm(v)
                sigma, converged = 0.0, False
                for _ in range(max_iters):
                    w = _jvp(fn, state, v, fd_step)
                    new_sigma = float(np.linalg.norm(w))
                    z = _vjp(fn, state, w)
                    z_norm = float(np.linalg.norm(z))
                    if new_sigma == 0.0 or z_norm == 0.0:
                        sigma, converged = new_sigma, True
                        break
                    v = z / z_norm
                    if abs(new_sigma - sigma) <= tol * max(new_sigma, 1.0):
                        sigma, converged = new_sigma, True
                        break
                    sigma = new_sigma
                if not converged:
                    logger.warning('Power iteration at depth %d did not converge in %d iterations', depth, max_iters)
                all_converged &= converged
                estimates.append(sigma)
            results.append(GrowthEstimate(depth, float(np.median(estimates)), all_converged, estimates))
    return results


def module_step_fn(config: ModelConfig, params, injection: np.ndarray, mask: np.ndarray, prefix: str = 'l') -> Callable[[T.Tensor], T.Tensor]:
    """
    One module application z -> Module(z + injection) with frozen weights
    """
    layers = module_params(params, config, prefix)
    injection = T.Tensor(injection, dtype=np.float64)

    def step(z):
        return magicnorm_module(z, injection, mask, layers, config)
    return step


class Granularity(StrEnum):
    MODULE = 'module'
    BLOCK = 'block'


def trace_states(trace: RecurrentTrace, granularity: Granularity = Granularity.MODULE) -> list[np.ndarray]:
    """
    Module-step states, or every block output when the trace recorded layers
    """
    if Granularity(granularity) is Granularity.BLOCK:
        if not trace.block_states:
            raise ContractError('trace has no block states; run the forward with record_layers=True')
        return list(trace.block_states)
    return trace.states()


def _as_states(states) -> list[np.ndarray]:
    if isinstance(states, RecurrentTrace):
        states = states.states()
    states = [np.asarray(state, dtype=np.float64) for state in states]
    if len(states) < 2:
        raise ContractError('need at least two states')
    return states


def block_diff_norms(states) -> np.ndarray:
    """
    Position-averaged ||z_n - z_(n-1)|| for every adjacent pair
    """
    states = _as_states(states)
    return np.asarray([
        float(np.linalg.norm(current - previous, axis=-1).mean())
        for previous, current in zip(states, states[1:])
    ])


def block_cosine(states) -> np.ndarray:
    """
    Position-averaged cosine between adjacent states; zero-norm positions are skipped
    """
    states = _as_states(states)
    values = []
    for index, (previous, current) in enumerate(zip(states, states[1:])):
        norms = np.linalg.norm(previous, axis=-1) * np.linalg.norm(current, axis=-1)
        valid = norms > 0
        if not valid.all():
            logger.warning('Skipping %d zero-norm positions at step %d', int((~valid).sum()), index + 1)
        if not valid.any():
            values.append(float('nan'))
            continue
        cosine = (previous * current).sum(axis=-1)[valid] / norms[valid]
        values.append(float(np.clip(cosine, -1.0, 1.0).mean()))
    return np.asarray(values)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray) -> np.ndarray:
    """
    KL(softmax(p) || softmax(q)) per leading position
    """
    log_p, log_q = _log_softmax(p_logits), _log_softmax(q_logits)
    return np.maximum((np.exp(log_p) * (log_p - log_q)).sum(axis=-1), 0.0)


def kl_probs(p: np.ndarray, q: np.ndarray) -> float:
    """
    KL(p || q) for explicit distributions, with 0 log 0 = 0
    """
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    support = p > 0
    return float((p[support] * np.log(p[support] / q[support])).sum())


def _probe_logits(trace: RecurrentTrace, head: np.ndarray, granularity: Granularity, eps: float) -> list[np.ndarray]:
    if Granularity(granularity) is Granularity.BLOCK:
        probes = []
        for state in trace.block_states:
            with T.no_grad():
                normed = rms_norm(T.Tensor(state, dtype=state.dtype), eps).data
            probes.append(np.matmul(normed, head))
        return probes
    exits = [record for record in trace.steps if record.module is not ModuleTag.L]
    return [record.logits if record.logits is not None else np.matmul(record.state, head) for record in exits]


def logit_lens_kl(
    trace: RecurrentTrace,
    head,
    final_logits: np.ndarray,
    granularity: Granularity = Granularity.MODULE,
    reverse: bool = False,
    eps: float = 1e-6
) -> np.ndarray:
    """
    Position-averaged KL(probe || final) at every probe point, final point last

    Module probes are the H exits (every loop / the stack output for the
    baselines); block probes normalize each block output before the head.
    `reverse` computes KL(final || probe) instead.
    """
    head = getattr(head, 'data', head)
    final_logits = np.asarray(final_logits)
    probes = _probe_logits(trace, head, granularity, eps)
    if Granularity(granularity) is Granularity.BLOCK:
        probes.append(final_logits)
    else:
        probes[-1] = final_logits

    values = []
    for probe in probes:
        kl = kl_divergence(final_logits, probe) if reverse else kl_divergence(probe, final_logits)
        values.append(float(kl.mean()))
    return np.asarray(values)


@dataclass
class DepthProbe:
    diff_norms: np.ndarray
    cosines: np.ndarray
    kl: np.ndarray
    entropies: np.ndarray
    samples: int = 1

    def rows(self) -> list[tuple[int, str, float]]:
        rows = []
        for name in ('diff_norms', 'cosines', 'kl', 'entropies'):
            rows.extend((index, name, float(value)) for index, value in enumerate(getattr(self, name)))
        return rows


def depth_probe(
    tokens,
    prefix_len: int,
    config: ModelConfig,
    params,
    granularity: Granularity = Granularity.BLOCK,
    reverse_kl: bool = False
) -> DepthProbe:
    """
    One recorded forward reduced to the effective-depth metrics
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    with T.no_grad():
        logits, trace = forward(
            tokens, prefix_len, config, params,
            record_attention=True, record_layers=True, record_logits=True
        )
    states = trace_states(trace, granularity)
    return DepthProbe(
        diff_norms=block_diff_norms(states),
        cosines=block_cosine(states),
        kl=logit_lens_kl(trace, params['head'], logits.data, granularity, reverse_kl, config.norm_eps),
        entropies=attention_entropy(trace.attention_by_layer()),
        samples=1 if tokens.ndim == 1 else tokens.shape[0],
    )


def count_parameters(config: ModelConfig, core_only: bool = True) -> int:
    """
    Recurrent-core parameters (attention incl. gate and gate bias, SwiGLU);
    with core_only=False also the embedding, head and z_L^0
    """
    d, f = config.d_model, config.mlp_hidden
    per_layer = 5 * d * d + d + 3 * d * f
    modules = 2 if config.variant is Variant.HRM else 1
    core = per_layer * config.layers_per_module * modules
    if core_only:
        return core
    extra = 2 * config.vocab_size * d
    if config.variant is Variant.HRM:
        extra += d
    return core + extra


def module_share(config: ModelConfig) -> float:
    return 0.5 if config.variant is Variant.HRM else 1.0


def recursion_count(config: ModelConfig) -> float:
    """
    Module steps weighted by each module's share of the core (8 x 0.5 = 4 for H2L3)
    """
    return config.total_steps * module_share(config)


def step_equivalents(config: ModelConfig, mean_k: float) -> tuple[float, float]:
    """
    Forward and backward full-core pass equivalents per token
    """
    if config.variant is Variant.STANDARD:
        return 1.0, 1.0
    return recursion_count(config), mean_k * module_share(config)


def flops_dense(n_params: float, n_tokens: float) -> float:
    return 6.0 * n_params * n_tokens


def flops_recurrent(n_params: float, n_tokens: float, fwd_step_equiv: float, bwd_step_equiv: float) -> float:
    """
    2ND per forward pass equivalent plus 4ND per backward pass equivalent
    """
    if fwd_step_equiv < 0 or bwd_step_equiv < 0:
        raise ContractError('step equivalents must be >= 0')
    return (2.0 * fwd_step_equiv + 4.0 * bwd_step_equiv) * n_params * n_tokens


def write_report(path, rows: Iterable[tuple]) -> None:
    """
    Tab-separated step, metric, value with a header row
    """
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle, delimiter='\t', lineterminator='\n')
        writer.writerow(('step', 'metric', 'value'))
        for row in rows:
            writer.writerow(row)
