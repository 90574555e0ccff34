"""
Training loop: warmup deep credit assignment, Adam-atan2, LR warmup, weight EMA

Examples are greedily packed into rows without cross-example attention; a
batch closes once it holds `batch_tokens` example tokens.
"""


import json
import logging
import math
import queue
import threading
from collections.abc import Callable
from collections.abc import Iterable
from collections.abc import Iterator
from dataclasses import dataclass
from dataclasses import field
from enum import StrEnum
from pathlib import Path

import numpy as np

from hrm_text import tensor as T
from hrm_text.checkpoint import save_checkpoint
from hrm_text.diagnostics import grad_magnitude_stats
from hrm_text.errors import ConfigError
from hrm_text.errors import ContractError
from hrm_text.model import ModelConfig
from hrm_text.model import Parameters
from hrm_text.model import Variant
from hrm_text.model import forward
from hrm_text.model import init_parameters
from hrm_text.objective import PackedExample
from hrm_text.objective import build_causal_mask
from hrm_text.objective import build_prefixlm_mask
from hrm_text.objective import response_nll
from hrm_text.objective import target_weights
from hrm_text.objective import token_nll
from hrm_text.optim import AdamAtan2
from hrm_text.optim import EmaState
from hrm_text.optim import OptimizerState
from hrm_text.optim import adam_atan2_step
from hrm_text.optim import ema_update


logger = logging.getLogger(__name__)

METRIC_KEYS = (
    'step', 'loss', 'response_loss', 'lr', 'K', 'tokens',
    'grad_mean_abs', 'grad_log_dispersion', 'grad_tail_to_median'
)


class Objective(StrEnum):
    RESPONSE = 'response'
    FULL = 'full'


class AttentionMode(StrEnum):
    PREFIXLM = 'prefixlm'
    CAUSAL = 'causal'


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 2.2e-4
    lr_warmup_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    ema_decay: float = 0.9999
    batch_tokens: int = 196_608
    k_start: int = 2
    k_end: int = 5
    k_warmup_steps: int | None = None
    total_steps: int = 1000
    seed: int = 0
    row_len: int | None = None
    objective: Objective = Objective.RESPONSE
    attention: AttentionMode = AttentionMode.PREFIXLM
    atan2_a: float = 1.0
    atan2_b: float = 1.0
    no_decay: tuple[str, ...] = ('z_l0', 'embed')
    prefetch: int = 0

    @classmethod
    def full_scale(cls, **overrides) -> 'TrainConfig':
        # 60B tokens at 196,608 tokens per step
        values = dict(total_steps=305_176, prefetch=2)
        values.update(overrides)
        return cls(**values)

    @property
    def resolved_k_warmup_steps(self) -> int:
        if self.k_warmup_steps is not None:
            return self.k_warmup_steps
        return max(1, round(0.1 * self.total_steps))

    def validate(self, model: ModelConfig | None = None) -> None:
        if self.peak_lr <= 0:
            raise ConfigError('train.peak_lr', 'must be positive')
        for name in ('beta1', 'beta2'):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f'train.{name}', 'must lie in [0, 1)')
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError('train.ema_decay', 'must lie in [0, 1]')
        if self.weight_decay < 0:
            raise ConfigError('train.weight_decay', 'must be >= 0')
        if self.lr_warmup_steps < 0:
            raise ConfigError('train.lr_warmup_steps', 'must be >= 0')
        for name in ('batch_tokens', 'total_steps'):
            if getattr(self, name) < 1:
                raise ConfigError(f'train.{name}', 'must be a positive integer')
        if self.k_warmup_steps is not None and self.k_warmup_steps < 1:
            raise ConfigError('train.k_warmup_steps', 'must be a positive integer')
        if self.row_len is not None and self.row_len < 2:
            raise ConfigError('train.row_len', 'must be >= 2')
        if self.prefetch < 0:
            raise ConfigError('train.prefetch', 'must be >= 0')
        if self.atan2_a <= 0 or self.atan2_b <= 0:
            raise ConfigError('train.atan2_a', 'atan2 constants must be positive')
        if self.k_start < 2:
            raise ConfigError('train.k_start', 'must be >= 2')
        if self.k_end < self.k_start:
            raise ConfigError('train.k_end', f'must be >= k_start={self.k_start}')
        if model is not None and model.variant is Variant.HRM and self.k_end > model.total_steps:
            raise ConfigError('train.k_end', f'exceeds the {model.total_steps} module steps of the model')
        if model is not None and self.row_len is not None and self.row_len > model.context_len:
            raise ConfigError('train.row_len', f'exceeds context_len={model.context_len}')

    def optimizer(self) -> AdamAtan2:
        return AdamAtan2(self.beta1, self.beta2, self.weight_decay, self.atan2_a, self.atan2_b, self.no_decay)


def _round_half_away(value: float) -> int:
    return int(math.copysign(math.floor(abs(value) + 0.5), value))


def tbptt_horizon(step: int, cfg: TrainConfig) -> int:
    """
    K grows linearly from k_start to k_end over the K warmup, then holds
    """
    progress = min(1.0, step / cfg.resolved_k_warmup_steps)
    return _round_half_away(cfg.k_start + (cfg.k_end - cfg.k_start) * progress)


def mean_horizon(cfg: TrainConfig) -> float:
    """
    Average K over all training steps
    """
    warmup = cfg.resolved_k_warmup_steps
    steps = np.arange(min(warmup, cfg.total_steps))
    ramp = sum(tbptt_horizon(int(step), cfg) for step in steps)
    held = max(0, cfg.total_steps - len(steps)) * cfg.k_end
    return (ramp + held) / cfg.total_steps


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """
    Linear warmup to peak_lr, then constant
    """
    if cfg.lr_warmup_steps == 0:
        return cfg.peak_lr
    return cfg.peak_lr * min(1.0, step / cfg.lr_warmup_steps)


@dataclass
class Batch:
    tokens: np.ndarray
    mask: np.ndarray
    positions: np.ndarray
    loss_mask: np.ndarray
    response_mask: np.ndarray
    segment_ids: np.ndarray
    n_tokens: int
    n_examples: int


def pack_batch(
    rows: list[list[PackedExample]],
    pad_id: int,
    objective: Objective = Objective.RESPONSE,
    attention: AttentionMode = AttentionMode.PREFIXLM
) -> Batch:
    """
    Lays out rows of examples with block-diagonal masks

    Positions restart at every example. Padding columns attend only to
    themselves and are never scored; trailing all-padding columns are trimmed.
    """
    width = max(sum(len(example) for example in row) for row in rows)
    shape = (len(rows), width)
    tokens = np.full(shape, pad_id, dtype=np.int64)
    positions = np.zeros(shape, dtype=np.int64)
    segment_ids = np.zeros(shape, dtype=np.int64)
    loss_mask = np.zeros(shape, dtype=bool)
    response_mask = np.zeros(shape, dtype=bool)
    mask = np.zeros((len(rows), width, width), dtype=bool)
    mask[:, np.arange(width), np.arange(width)] = True

    count = 0
    for r, row in enumerate(rows):
        cursor = 0
        for segment, example in enumerate(row, start=1):
            n = len(example)
            span = slice(cursor, cursor + n)
            tokens[r, span] = example.token_ids
            positions[r, span] = np.arange(n)
            segment_ids[r, span] = segment
            response_mask[r, span] = example.loss_mask
            loss_mask[r, span] = example.loss_mask if objective is Objective.RESPONSE else True
            if attention is AttentionMode.PREFIXLM:
                mask[r, span, span] = build_prefixlm_mask(example.prefix_len, n)
            else:
                mask[r, span, span] = build_causal_mask(n)
            cursor += n
            count += 1

    n_tokens = int((segment_ids > 0).sum())
    return Batch(tokens, mask, positions, loss_mask, response_mask, segment_ids, n_tokens, count)


def assemble_batches(
    examples: Iterable[PackedExample],
    batch_tokens: int,
    row_len: int,
    pad_id: int,
    objective: Objective = Objective.RESPONSE,
    attention: AttentionMode = AttentionMode.PREFIXLM
) -> Iterator[Batch]:
    """
    Greedy first-fit packing in stream order; the final partial batch is yielded
    """
    rows: list[list[PackedExample]] = []
    fill: list[int] = []
    total = 0
    for example in examples:
        if len(example) > row_len:
            raise ContractError(f'example of {len(example)} tokens exceeds row_len={row_len}')
        if rows and total + len(example) > batch_tokens:
            yield pack_batch(rows, pad_id, objective, attention)
            rows, fill, total = [], [], 0
        for index, used in enumerate(fill):
            if used + len(example) <= row_len:
                rows[index].append(example)
                fill[index] += len(example)
                break
        else:
            rows.append([example])
            fill.append(len(example))
        total += len(example)
    if rows:
        yield pack_batch(rows, pad_id, objective, attention)


_END = object()
PREFETCH_THREAD = 'batch-prefetch'
PREFETCH_POLL_SECONDS = 0.05


def prefetch(batches: Iterator[Batch], depth: int) -> Iterator[Batch]:
    """
    Prepares up to `depth` batches ahead on a worker thread, preserving order
    """
    if depth < 1:
        yield from batches
        return

    handoff: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def offer(item) -> bool:
        while not stop.is_set():
            try:
                handoff.put(item, timeout=PREFETCH_POLL_SECONDS)
                return True
            except queue.Full:
                continue
        return False

    def produce():
        try:
            for batch in batches:
                if not offer(batch):
                    return
        except BaseException as error:
            offer(error)
            return
        offer(_END)

    worker = threading.Thread(target=produce, name=PREFETCH_THREAD, daemon=True)
    worker.start()
    try:
        while True:
            item = handoff.get()
            if item is _END:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while True:
            try:
                handoff.get_nowait()
            except queue.Empty:
                break
        worker.join(timeout=1.0)
        if worker.is_alive():
            logger.warning('Prefetch worker still busy after shutdown')


def _horizon_for(model: ModelConfig, k: int) -> int | None:
    if model.variant is Variant.HRM:
        return k
    if model.variant is Variant.LOOPED and model.loop_count >= 2:
        return min(k, model.loop_count)
    return None


@dataclass
class TrainResult:
    params: Parameters
    ema: EmaState
    metrics: list[dict] = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False
    checkpoint: Path | None = None


def train_step(
    batch: Batch,
    model: ModelConfig,
    params: Parameters,
    k: int | None
) -> tuple[float, float, dict[str, np.ndarray]]:
    """
    Forward, loss and backward for one batch; returns loss, response loss, gradients
    """
    trainable = params.trainable()
    with T.Tape() as tape:
        logits, _ = forward(batch.tokens, 0, model, params, k, mask=batch.mask, positions=batch.positions)
        loss = response_nll(logits, batch.tokens, batch.loss_mask, batch.segment_ids)
    grads = tape.backward(loss).named(trainable)

    total, count = token_nll(logits.data, batch.tokens, target_weights(batch.response_mask, batch.segment_ids))
    response_loss = total / count if count else float('nan')
    return loss.item(), response_loss, grads


def train_loop(
    model: ModelConfig,
    cfg: TrainConfig,
    examples: Iterable[PackedExample],
    pad_id: int,
    run_dir=None,
    params: Parameters | None = None,
    on_step: Callable[[dict], None] | None = None
) -> TrainResult:
    """
    Runs up to cfg.total_steps optimizer steps over the example stream

    With `run_dir`, metrics go to metrics.jsonl and the raw and EMA weights to
    final.ckpt. Exhausting the stream early stops cleanly with a warning.
    """
    model.validate()
    cfg.validate(model)
    row_len = cfg.row_len or model.context_len
    logger.info('Resolved k_warmup_steps=%d (K %d -> %d)', cfg.resolved_k_warmup_steps, cfg.k_start, cfg.k_end)

    if params is None:
        params = init_parameters(model, cfg.seed)
    hyper = cfg.optimizer()
    state = OptimizerState.zeros_like(params.arrays())
    ema = EmaState.of(params.arrays())

    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(run_dir / 'metrics.jsonl', 'w', encoding='utf-8')

    result = TrainResult(params, ema)
    batches = prefetch(
        assemble_batches(examples, cfg.batch_tokens, row_len, pad_id, cfg.objective, cfg.attention),
        cfg.prefetch
    )
    try:
        for step in range(cfg.total_steps):
            batch = next(batches, None)
            if batch is None:
                result.stopped_early = True
                logger.warning('Data exhausted after %d of %d steps', step, cfg.total_steps)
                break

            k = tbptt_horizon(step, cfg)
            lr = lr_schedule(step, cfg)
            loss, response_loss, grads = train_step(batch, model, params, _horizon_for(model, k))
            stats = grad_magnitude_stats(grads, step=step)

            arrays, state = adam_atan2_step(params.arrays(), grads, state, lr, hyper)
            for name, array in arrays.items():
                params[name].data = array
            ema = ema_update(ema, arrays, cfg.ema_decay)

            record = {
                'step': step,
                'loss': loss,
                'response_loss': response_loss,
                'lr': lr,
                'K': k,
                'tokens': batch.n_tokens,
                'grad_mean_abs': stats.mean_abs,
                'grad_log_dispersion': stats.log_dispersion,
                'grad_tail_to_median': stats.tail_to_median,
            }
            result.metrics.append(record)
            result.steps = step + 1
            logger.info('step=%d loss=%.4f response_loss=%.4f lr=%.3g K=%d', step, loss, response_loss, lr, k)
            if metrics_file is not None:
                metrics_file.write(json.dumps(record) + '\n')
            if on_step is not None:
                on_step(record)
    finally:
        batches.close()
        if metrics_file is not None:
            metrics_file.close()

    result.ema = ema
    if run_dir is not None:
        result.checkpoint = run_dir / 'final.ckpt'
        metadata = {
            'steps': result.steps,
            'stopped_early': result.stopped_early,
            'k_warmup_steps': cfg.resolved_k_warmup_steps,
            'seed': cfg.seed,
        }
        save_checkpoint(result.checkpoint, model, params, ema.arrays(params.arrays()), metadata)
    if result.stopped_early:
        logger.warning('Early stop report: %d steps completed, %d requested', result.steps, cfg.total_steps)
    return result
