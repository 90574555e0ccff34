"""
PrefixLM / causal attention masks, the response-only loss, and attention entropy
"""


from collections.abc import Iterable
from collections.abc import Mapping
from dataclasses import dataclass
from enum import StrEnum

import numpy as np

from hrm_text import tensor as T
from hrm_text.errors import ContractError
from hrm_text.errors import EmptyResponseError
from hrm_text.errors import ValidationError


class Condition(StrEnum):
    DIRECT = 'direct'
    COT = 'cot'
    SYNTH = 'synth'
    NOISY = 'noisy'

    @property
    def tag(self) -> str:
        return f'<|{self.value}|>'


@dataclass(frozen=True)
class PackedExample:
    token_ids: tuple[int, ...]
    prefix_len: int
    loss_mask: tuple[bool, ...]
    condition: Condition

    def __post_init__(self):
        length = len(self.token_ids)
        if not 0 <= self.prefix_len <= length:
            raise ValidationError(f'prefix_len {self.prefix_len} outside [0, {length}]')
        if len(self.loss_mask) != length:
            raise ValidationError(f'loss_mask has {len(self.loss_mask)} entries for {length} tokens')
        expected = tuple(position >= self.prefix_len for position in range(length))
        if tuple(self.loss_mask) != expected:
            raise ValidationError('loss_mask must be false on the prefix and true on the response')

    def __len__(self):
        return len(self.token_ids)


def build_prefixlm_mask(prefix_len: int, seq_len: int) -> np.ndarray:
    """
    Position i may attend to j iff j < prefix_len or j <= i
    """
    if seq_len < 1:
        raise ContractError(f'seq_len must be >= 1, got {seq_len}')
    if not 0 <= prefix_len <= seq_len:
        raise ContractError(f'prefix_len {prefix_len} outside [0, {seq_len}]')
    rows = np.arange(seq_len)[:, None]
    cols = np.arange(seq_len)[None, :]
    return (cols < prefix_len) | (cols <= rows)


def build_causal_mask(seq_len: int) -> np.ndarray:
    return build_prefixlm_mask(0, seq_len)


def target_weights(loss_mask: np.ndarray, segment_ids: np.ndarray | None = None) -> np.ndarray:
    """
    Per-position weights for next-token scoring

    Position i scores token i+1 and is weighted by loss_mask[i+1]; the last
    position and any position whose successor belongs to another segment
    get zero weight.
    """
    loss_mask = np.asarray(loss_mask, dtype=bool)
    weights = np.zeros(loss_mask.shape, dtype=bool)
    weights[..., :-1] = loss_mask[..., 1:]
    if segment_ids is not None:
        segment_ids = np.asarray(segment_ids)
        same = np.zeros(loss_mask.shape, dtype=bool)
        same[..., :-1] = segment_ids[..., 1:] == segment_ids[..., :-1]
        weights &= same
    return weights


def shifted_targets(targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    shifted = np.zeros_like(targets)
    shifted[..., :-1] = targets[..., 1:]
    return shifted


def response_nll(
    logits: T.Tensor,
    targets: np.ndarray,
    loss_mask: np.ndarray,
    segment_ids: np.ndarray | None = None
) -> T.Tensor:
    """
    Mean NLL over masked target positions (token mean across the batch)

    Logits at position i score targets[i+1]; positions whose target is not in
    `loss_mask` contribute exactly zero to the value and the gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f'logits {logits.shape} do not match targets {targets.shape}')

    weights = target_weights(loss_mask, segment_ids)
    count = int(weights.sum())
    if count == 0:
        raise EmptyResponseError('no response positions to score')

    log_probs = T.log_softmax(logits)
    picked = T.take_last(log_probs, shifted_targets(targets))
    scaled = T.mul(picked, T.Tensor(weights / count, dtype=logits.dtype))
    return T.scale(scaled.sum(), -1.0)


def token_nll(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> tuple[float, int]:
    """
    Summed NLL and count over weighted positions, outside any tape
    """
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(log_probs, shifted_targets(targets)[..., None], axis=-1)[..., 0]
    weights = np.asarray(weights, dtype=bool)
    return float(-(picked * weights).sum()), int(weights.sum())


def row_entropy(probs: np.ndarray) -> np.ndarray:
    """
    Entropy of each probability row with 0 log 0 taken as 0
    """
    probs = np.asarray(probs, dtype=np.float64)
    safe = np.where(probs > 0, probs, 1.0)
    return -(probs * np.log(safe)).sum(axis=-1)


def attention_entropy(attention: Mapping[str, Iterable[np.ndarray]] | Iterable[np.ndarray]) -> np.ndarray:
    """
    Mean attention entropy per layer, averaged over heads and query positions

    Accepts one probability array per layer, or a mapping from layer label to
    every snapshot of that layer (recurrent models revisit each layer).
    """
    if isinstance(attention, Mapping):
        layers = list(attention.values())
    else:
        layers = [[probs] for probs in attention]

    means = []
    for snapshots in layers:
        entropies = [row_entropy(probs).reshape(-1) for probs in snapshots]
        means.append(float(np.concatenate(entropies).mean()))
    return np.asarray(means)
