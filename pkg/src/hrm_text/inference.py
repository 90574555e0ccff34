"""
Greedy decoding with PrefixLM prefill and auto-guidance across H exits

Guidance mixes the final and a shallower H-exit prediction of the same pass:

```
logits_w = (1 + w) * logits(h) - w * logits(h')
```
"""


import json
import logging
from collections import defaultdict
from collections.abc import Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import field

import numpy as np

from hrm_text import tensor as T
from hrm_text.data import Document
from hrm_text.data import read_corpus
from hrm_text.errors import ConfigError
from hrm_text.errors import ContextOverflowError
from hrm_text.errors import ContractError
from hrm_text.model import ModelConfig
from hrm_text.model import ModuleTag
from hrm_text.model import forward
from hrm_text.objective import PackedExample
from hrm_text.objective import build_causal_mask
from hrm_text.objective import target_weights
from hrm_text.objective import token_nll
from hrm_text.tokenizer import TokenizerModel


logger = logging.getLogger(__name__)

GUIDANCE_GRID = (-0.5, -0.1, 0.0, 0.1, 0.5)


@dataclass(frozen=True)
class DecodeConfig:
    max_new_tokens: int = 256
    guidance_scale: float = 0.0
    shallow_exit: int = 0
    temperature: float = 0.0
    context_cap: int = 3072
    grid: tuple[float, ...] = GUIDANCE_GRID

    def validate(self) -> None:
        if self.max_new_tokens < 1:
            raise ConfigError('decode.max_new_tokens', 'must be >= 1')
        if self.temperature != 0.0:
            raise ConfigError('decode.temperature', 'only greedy decoding (0) is supported')
        if self.context_cap < 1:
            raise ConfigError('decode.context_cap', 'must be >= 1')
        if self.shallow_exit < 0:
            raise ConfigError('decode.shallow_exit', 'must be >= 0')
        if not self.grid:
            raise ConfigError('decode.grid', 'must list at least one guidance scale')


def guided_logits(final: np.ndarray, shallow: np.ndarray, w: float) -> np.ndarray:
    if np.shape(final) != np.shape(shallow):
        raise ContractError(f'logit shapes differ: {np.shape(final)} vs {np.shape(shallow)}')
    if w == 0:
        return final
    return (1.0 + w) * final - w * shallow


def _exit_logits(trace, shallow_exit: int) -> np.ndarray:
    exits = [record for record in trace.steps if record.module is not ModuleTag.L and record.logits is not None]
    if shallow_exit >= len(exits):
        raise ConfigError('decode.shallow_exit', f'model has only {len(exits)} exits')
    return exits[shallow_exit].logits


def next_token(
    tokens: list[int],
    prefix_len: int,
    config: ModelConfig,
    params,
    cfg: DecodeConfig,
    allowed: np.ndarray | None = None
) -> int:
    """
    One forward pass; argmax of the guided last-position logits, lowest id on ties

    Ids outside `allowed` are never chosen.
    """
    with T.no_grad():
        logits, trace = forward(np.asarray(tokens), prefix_len, config, params, record_logits=cfg.guidance_scale != 0)
    final = logits.data[-1]
    if cfg.guidance_scale != 0:
        final = guided_logits(final, _exit_logits(trace, cfg.shallow_exit)[-1], cfg.guidance_scale)
    if allowed is not None:
        final = np.where(allowed, final, -np.inf)
    return int(np.argmax(final))


def greedy_decode(
    prompt: list[int],
    prefix_len: int,
    config: ModelConfig,
    params,
    cfg: DecodeConfig,
    eot_id: int | None = None,
    allowed: np.ndarray | None = None
) -> list[int]:
    """
    Emits up to max_new_tokens, recomputing the full sequence for each token

    The PrefixLM mask stays fixed at the prompt's prefix_len. Generation stops
    at end-of-text (not returned) or when the context cap is reached.
    """
    cfg.validate()
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape != (config.vocab_size,) or not allowed.any():
            raise ContractError(f'allowed mask of shape {allowed.shape} does not cover a vocab of {config.vocab_size}')
    cap = min(cfg.context_cap, config.context_len)
    if len(prompt) > cap:
        raise ContextOverflowError(f'prompt of {len(prompt)} tokens exceeds the context cap of {cap}')
    if not 0 <= prefix_len <= len(prompt):
        raise ContractError(f'prefix_len {prefix_len} outside [0, {len(prompt)}]')

    tokens = list(prompt)
    generated = []
    for _ in range(cfg.max_new_tokens):
        if len(tokens) >= cap:
            logger.warning('Decoding truncated at the context cap of %d tokens', cap)
            break
        token = next_token(tokens, prefix_len, config, params, cfg, allowed)
        if token == eot_id:
            break
        generated.append(token)
        tokens.append(token)
    return generated


def prompt_tokens(document: Document, tokenizer: TokenizerModel) -> list[int]:
    return [tokenizer.condition_id(document.condition)] + tokenizer.encode(document.instruction)


def decode_document(document: Document, tokenizer: TokenizerModel, config: ModelConfig, params, cfg: DecodeConfig) -> str:
    prompt = prompt_tokens(document, tokenizer)
    generated = greedy_decode(prompt, len(prompt), config, params, cfg, tokenizer.eot_id, tokenizer.generation_mask())
    return tokenizer.decode(generated)


def decode_documents(
    documents: list[Document],
    tokenizer: TokenizerModel,
    config: ModelConfig,
    params,
    cfg: DecodeConfig,
    workers: int = 1
) -> list[str]:
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        return list(executor.map(lambda document: decode_document(document, tokenizer, config, params, cfg), documents))


def decode_file(in_path, out_path, tokenizer: TokenizerModel, config: ModelConfig, params, cfg: DecodeConfig, workers: int = 1) -> int:
    """
    Corpus-format prompts in, the same records plus `generated` and `w` out
    """
    documents = read_corpus([in_path])
    outputs = decode_documents(documents, tokenizer, config, params, cfg, workers)
    with open(out_path, 'w', encoding='utf-8') as handle:
        for document, text in zip(documents, outputs):
            record = document.to_record()
            record['generated'] = text
            record['w'] = cfg.guidance_scale
            handle.write(json.dumps(record, ensure_ascii=False) + '\n')
    logger.info('Decoded %d prompts with w=%g', len(documents), cfg.guidance_scale)
    return len(documents)


def exact_match(generated: str, reference: str) -> bool:
    return generated.strip() == reference.strip()


def evaluate_exact_match(
    documents: list[Document],
    tokenizer: TokenizerModel,
    config: ModelConfig,
    params,
    cfg: DecodeConfig,
    workers: int = 1
) -> float:
    if not documents:
        raise ContractError('exact match over zero documents')
    outputs = decode_documents(documents, tokenizer, config, params, cfg, workers)
    hits = sum(exact_match(text, document.response) for text, document in zip(outputs, documents))
    return hits / len(documents)


def evaluate_nll(examples: Iterable[PackedExample], config: ModelConfig, params, causal: bool = False) -> float:
    """
    Token-mean response NLL over held-out examples

    With `causal` the prefix is scored under a causal mask, matching models
    trained with causal attention.
    """
    total, count = 0.0, 0
    for example in examples:
        mask = build_causal_mask(len(example.token_ids)) if causal else None
        with T.no_grad():
            logits, _ = forward(np.asarray(example.token_ids), example.prefix_len, config, params, mask=mask)
        weights = target_weights(np.asarray(example.loss_mask))
        nll, scored = token_nll(logits.data, np.asarray(example.token_ids), weights)
        total += nll
        count += scored
    if count == 0:
        raise ContractError('no response tokens to score')
    return total / count


@dataclass
class GuidanceSweep:
    scores: dict[str, dict[float, float]] = field(default_factory=dict)
    best: dict[str, float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, float]]:
        rows = []
        for task, by_scale in self.scores.items():
            rows.extend((task, f'exact_match@w={w:g}', score) for w, score in by_scale.items())
            rows.append((task, 'best_w', self.best[task]))
        return rows


def guidance_sweep(
    documents: list[Document],
    tokenizer: TokenizerModel,
    config: ModelConfig,
    params,
    cfg: DecodeConfig,
    workers: int = 1
) -> GuidanceSweep:
    """
    Exact match per task at every grid scale; ties go to the scale nearest 0
    """
    by_task: dict[str, list[Document]] = defaultdict(list)
    for document in documents:
        by_task[document.task].append(document)

    sweep = GuidanceSweep()
    for task in sorted(by_task):
        scores = {}
        for w in cfg.grid:
            scaled = DecodeConfig(cfg.max_new_tokens, w, cfg.shallow_exit, cfg.temperature, cfg.context_cap, cfg.grid)
            scores[w] = evaluate_exact_match(by_task[task], tokenizer, config, params, scaled, workers)
        sweep.scores[task] = scores
        sweep.best[task] = max(scores, key=lambda w: (scores[w], -abs(w), -w))
        logger.info('Task %s: best w=%g (exact match %.3f)', task, sweep.best[task], scores[sweep.best[task]])
    return sweep
