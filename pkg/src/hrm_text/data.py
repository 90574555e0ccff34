"""
Corpus ingestion, mixture construction and example packing
"""


import json
import logging
import zlib
from collections.abc import Callable
from collections.abc import Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import numpy as np

from hrm_text.errors import ConfigError
from hrm_text.errors import PackingError
from hrm_text.errors import ValidationError
from hrm_text.objective import Condition
from hrm_text.objective import PackedExample
from hrm_text.tokenizer import TokenizerModel


logger = logging.getLogger(__name__)

THINK_OPEN = '<think>'
THINK_CLOSE = '</think>'

CORPUS_KEYS = ('instruction', 'response', 'dataset', 'task', 'condition')


@dataclass(frozen=True)
class Document:
    instruction: str
    response: str
    dataset: str
    task: str
    condition: Condition

    def __post_init__(self):
        if not self.response:
            raise ValidationError('document has an empty response')
        if not self.dataset or not self.task:
            raise ValidationError('document is missing its dataset/task labels')
        try:
            object.__setattr__(self, 'condition', Condition(self.condition))
        except ValueError:
            raise ValidationError(f'unknown condition "{self.condition}"') from None

    @property
    def stratum(self) -> tuple[str, str]:
        return self.dataset, self.task

    def to_record(self) -> dict:
        record = asdict(self)
        record['condition'] = self.condition.value
        return record

    @classmethod
    def from_record(cls, record: dict) -> 'Document':
        if not isinstance(record, dict):
            raise ValidationError('corpus record is not an object')
        missing = [key for key in CORPUS_KEYS if key not in record]
        if missing:
            raise ValidationError(f'corpus record is missing {", ".join(missing)}')
        return cls(*(record[key] for key in CORPUS_KEYS))


def _read_file(path) -> list[Document]:
    documents = []
    with open(path, encoding='utf-8') as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                documents.append(Document.from_record(json.loads(line)))
            except json.JSONDecodeError as error:
                raise ValidationError(f'{path}:{line_number}: {error.msg}') from None
            except ValidationError as error:
                raise ValidationError(f'{path}:{line_number}: {error}') from None
    return documents


def read_corpus(paths: Iterable, workers: int = 1) -> list[Document]:
    """
    Reads corpus JSON-lines files in parallel, keeping file order
    """
    paths = list(paths)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        chunks = list(executor.map(_read_file, paths))
    documents = [document for chunk in chunks for document in chunk]
    logger.info('Read %d documents from %d files', len(documents), len(paths))
    return documents


def write_corpus(path, documents: Iterable[Document]) -> None:
    with open(path, 'w', encoding='utf-8') as handle:
        for document in documents:
            handle.write(json.dumps(document.to_record(), ensure_ascii=False) + '\n')


def strip_think(text: str) -> str:
    """
    Removes every <think>...</think> span left to right

    An opening tag with no closing tag strips to the end of the text.
    """
    out = []
    cursor = 0
    while True:
        start = text.find(THINK_OPEN, cursor)
        if start < 0:
            out.append(text[cursor:])
            break
        out.append(text[cursor:start])
        end = text.find(THINK_CLOSE, start + len(THINK_OPEN))
        if end < 0:
            logger.warning('Unclosed %s at offset %d; stripped to end of text', THINK_OPEN, start)
            break
        cursor = end + len(THINK_CLOSE)
    return ''.join(out)


def prepend_condition(document: Document) -> str:
    return Condition(document.condition).tag + document.instruction


@dataclass(frozen=True)
class MixtureSpec:
    dataset_caps: dict[str, int] = field(default_factory=dict)
    task_caps: dict[str, int] = field(default_factory=dict)
    upsample: dict[str, int] = field(default_factory=dict)
    small_threshold: int = 50_000
    small_multiplier: int = 10
    seed: int = 0

    @classmethod
    def full_scale(cls, **overrides) -> 'MixtureSpec':
        values = dict(
            task_caps={'flan': 5_000, 'tasksource': 10_000, 'dm_math': 100_000},
            dataset_caps={
                'synth': 10_000_000,
                'acereason': 2_000_000,
                'openthoughts2': 500_000,
                'sudoku': 1_000_000,
            },
        )
        values.update(overrides)
        return cls(**values)

    def validate(self) -> None:
        for section in ('dataset_caps', 'task_caps'):
            for name, cap in getattr(self, section).items():
                if cap < 0:
                    raise ConfigError(f'mixture.{section}.{name}', 'caps must be >= 0')
        for name, multiplier in self.upsample.items():
            if multiplier < 1:
                raise ConfigError(f'mixture.upsample.{name}', 'multipliers must be >= 1')
        if self.small_threshold < 0:
            raise ConfigError('mixture.small_threshold', 'must be >= 0')
        if self.small_multiplier < 1:
            raise ConfigError('mixture.small_multiplier', 'must be >= 1')

    def multiplier(self, dataset: str, size: int) -> int:
        if dataset in self.upsample:
            return self.upsample[dataset]
        if size <= self.small_threshold:
            return self.small_multiplier
        return 1


@dataclass
class StratumReport:
    dataset: str
    task: str
    input_docs: int
    capped_docs: int
    emitted_docs: int


@dataclass
class SamplingReport:
    strata: list[StratumReport] = field(default_factory=list)
    unique_docs: int = 0
    total_docs: int = 0
    unique_tokens: int | None = None
    total_tokens: int | None = None

    def rows(self) -> list[tuple[str, str, float]]:
        rows = []
        for stratum in self.strata:
            label = f'{stratum.dataset}/{stratum.task}'
            rows.append((label, 'input_docs', stratum.input_docs))
            rows.append((label, 'capped_docs', stratum.capped_docs))
            rows.append((label, 'emitted_docs', stratum.emitted_docs))
        for name in ('unique_docs', 'total_docs', 'unique_tokens', 'total_tokens'):
            value = getattr(self, name)
            if value is not None:
                rows.append(('all', name, value))
        return rows


def _rng(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode('utf-8'))])


def _take(items: list, cap: int | None, rng: np.random.Generator) -> list:
    if cap is None or len(items) <= cap:
        return list(items)
    chosen = np.sort(rng.choice(len(items), size=cap, replace=False))
    return [items[index] for index in chosen]


def stratified_sample(
    documents: Iterable[Document],
    spec: MixtureSpec,
    token_count: Callable[[Document], int] | None = None
) -> tuple[list[Document], SamplingReport]:
    """
    Caps each (dataset, task) stratum and each dataset, upsamples small datasets, shuffles

    Per-task caps apply to every task of a dataset; a dataset cap then bounds
    the pooled capped tasks. A dataset no larger than `small_threshold` is
    repeated `small_multiplier` times unless `upsample` names it.
    """
    strata: dict[tuple[str, str], list[Document]] = {}
    for document in documents:
        strata.setdefault(document.stratum, []).append(document)

    datasets: dict[str, list[tuple[str, str]]] = {}
    for key in sorted(strata):
        datasets.setdefault(key[0], []).append(key)

    report = SamplingReport()
    emitted: list[Document] = []
    for dataset, keys in datasets.items():
        dataset_size = sum(len(strata[key]) for key in keys)
        capped = {
            key: _take(strata[key], spec.task_caps.get(dataset), _rng(spec.seed, '/'.join(key)))
            for key in keys
        }
        cap = spec.dataset_caps.get(dataset)
        pooled = [(key, index) for key in keys for index in range(len(capped[key]))]
        if cap is not None and len(pooled) > cap:
            kept = _take(pooled, cap, _rng(spec.seed, dataset))
            capped = {key: [capped[key][index] for (owner, index) in kept if owner == key] for key in keys}

        multiplier = spec.multiplier(dataset, dataset_size)
        for key in keys:
            stratum_docs = capped[key]
            emitted.extend(stratum_docs * multiplier)
            report.strata.append(StratumReport(key[0], key[1], len(strata[key]), len(stratum_docs), len(stratum_docs) * multiplier))
            report.unique_docs += len(stratum_docs)
            if token_count is not None:
                tokens = sum(token_count(document) for document in stratum_docs)
                report.unique_tokens = (report.unique_tokens or 0) + tokens
                report.total_tokens = (report.total_tokens or 0) + tokens * multiplier

    order = np.random.default_rng(spec.seed).permutation(len(emitted))
    stream = [emitted[index] for index in order]
    report.total_docs = len(stream)
    logger.info('Sampled %d documents (%d unique) from %d strata', report.total_docs, report.unique_docs, len(report.strata))
    return stream, report


def pack_example(document: Document, tokenizer: TokenizerModel, max_len: int) -> PackedExample:
    """
    Tagged instruction as prefix, response plus end-of-text as the scored tail
    """
    prefix = [tokenizer.condition_id(document.condition)] + tokenizer.encode(document.instruction)
    response = tokenizer.encode(document.response) + [tokenizer.eot_id]

    if len(prefix) >= max_len:
        record = {
            'dataset': document.dataset,
            'task': document.task,
            'prefix_len': len(prefix),
            'max_len': max_len,
            'reason': 'instruction exceeds max_len',
        }
        raise PackingError(f'instruction of {len(prefix)} tokens leaves no room for a response in {max_len}', record)

    total = len(prefix) + len(response)
    if total > max_len:
        logger.warning(
            'Truncating response of %s/%s from %d to %d tokens',
            document.dataset, document.task, len(response), max_len - len(prefix)
        )
        response = response[:max_len - len(prefix)]

    token_ids = tuple(prefix + response)
    loss_mask = tuple(position >= len(prefix) for position in range(len(token_ids)))
    return PackedExample(token_ids, len(prefix), loss_mask, Condition(document.condition))


def pack_corpus(documents: Iterable[Document], tokenizer: TokenizerModel, max_len: int) -> tuple[list[PackedExample], list[dict]]:
    """
    Packs every document, collecting rejection records instead of raising
    """
    examples, rejected = [], []
    for document in documents:
        try:
            examples.append(pack_example(document, tokenizer, max_len))
        except PackingError as error:
            logger.warning('Rejected document: %s', error)
            rejected.append(error.record)
    return examples, rejected


def corpus_paths(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        return sorted(path.glob('*.jsonl'))
    return [path]
