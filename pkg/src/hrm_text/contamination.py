"""
n-gram contamination measurement and the four-subset Z significance test

A sample is split into Clean (< 20% of its tokens covered by corpus n-grams),
Not Clean (>= 20%), Not Dirty (< 80%) and Dirty (>= 80%). Each subset mean
score is compared with the mean of a random subset of the same size:

```
Z_k = (X_k - mu) / (sigma / sqrt(k))
```
"""


import logging
import math
from collections.abc import Iterable
from collections.abc import Mapping
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import field
from enum import StrEnum

import numpy as np

from hrm_text.errors import ContractError
from hrm_text.errors import UndefinedSubsetError


logger = logging.getLogger(__name__)

CLEAN_THRESHOLD = 20.0
DIRTY_THRESHOLD = 80.0
Z_THRESHOLD = 2.0


class Subset(StrEnum):
    CLEAN = 'Clean'
    NOT_CLEAN = 'NotClean'
    NOT_DIRTY = 'NotDirty'
    DIRTY = 'Dirty'


# Clean and NotDirty must score below average, NotClean and Dirty above
EXPECTED_SIGN = {
    Subset.CLEAN: -1,
    Subset.NOT_CLEAN: 1,
    Subset.NOT_DIRTY: -1,
    Subset.DIRTY: 1,
}


def normalize_text(text: str) -> str:
    return ' '.join(text.lower().split())


def word_tokens(text: str) -> list[str]:
    return normalize_text(text).split()


def _ngrams(tokens: Sequence, n: int) -> set[tuple]:
    return {tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)}


class NgramIndex:
    """
    Exact-membership set of every corpus n-gram

    Documents are indexed separately, so no n-gram spans a document boundary.
    """

    def __init__(self, n: int, grams: set[tuple] | None = None):
        if n < 1:
            raise ContractError(f'n must be >= 1, got {n}')
        self.n = n
        self.grams = grams or set()

    @classmethod
    def build(cls, documents: Iterable[Sequence], n: int, workers: int = 1, shards: int | None = None) -> 'NgramIndex':
        """
        Indexes shards in parallel and merges them by set union
        """
        if n < 1:
            raise ContractError(f'n must be >= 1, got {n}')
        documents = [list(document) for document in documents]
        shards = shards or max(1, workers)
        parts = [documents[i::shards] for i in range(shards)]

        def index_shard(part):
            grams = set()
            for document in part:
                grams |= _ngrams(document, n)
            return grams

        with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
            shard_sets = list(executor.map(index_shard, parts))

        grams = set().union(*shard_sets)
        logger.info('Indexed %d distinct %d-grams from %d documents', len(grams), n, len(documents))
        return cls(n, grams)

    def __contains__(self, gram) -> bool:
        return tuple(gram) in self.grams

    def __len__(self):
        return len(self.grams)


def contamination_pct(sample: Sequence, index: NgramIndex) -> float:
    """
    Percent of sample tokens covered by at least one matched n-gram window
    """
    n = index.n
    if len(sample) < n or len(sample) == 0:
        return 0.0
    covered = np.zeros(len(sample), dtype=bool)
    for start in range(len(sample) - n + 1):
        if tuple(sample[start:start + n]) in index.grams:
            covered[start:start + n] = True
    return 100.0 * float(covered.sum()) / len(sample)


def partition_subsets(
    percents: Sequence[float],
    clean_threshold: float = CLEAN_THRESHOLD,
    dirty_threshold: float = DIRTY_THRESHOLD
) -> dict[Subset, np.ndarray]:
    percents = np.asarray(percents, dtype=np.float64)
    return {
        Subset.CLEAN: np.flatnonzero(percents < clean_threshold),
        Subset.NOT_CLEAN: np.flatnonzero(percents >= clean_threshold),
        Subset.NOT_DIRTY: np.flatnonzero(percents < dirty_threshold),
        Subset.DIRTY: np.flatnonzero(percents >= dirty_threshold),
    }


@dataclass
class SubsetStat:
    size: int
    mean_score: float
    mu: float
    sigma: float
    z: float
    flagged: bool = False


def z_statistic(scores: Sequence[float], indices: Sequence[int]) -> SubsetStat:
    """
    Subset mean against the sampling distribution of a size-k mean

    sigma is the population standard deviation over sqrt(k); a zero sigma is
    flagged and reported as Z = 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64)
    k = len(indices)
    if k == 0:
        raise UndefinedSubsetError('Z statistic of an empty subset is undefined')

    mean_score = float(scores[indices].mean())
    mu = float(scores.mean())
    sigma = float(scores.std()) / math.sqrt(k)
    if sigma == 0.0:
        logger.warning('Zero sampling deviation for subset of size %d; Z reported as 0', k)
        return SubsetStat(k, mean_score, mu, 0.0, 0.0, flagged=True)
    return SubsetStat(k, mean_score, mu, sigma, (mean_score - mu) / sigma)


def bootstrap_sigma(scores: Sequence[float], k: int, draws: int = 2000, seed: int = 0) -> float:
    """
    Resampled standard deviation of size-k subset means, drawn with replacement
    """
    if k < 1:
        raise UndefinedSubsetError('bootstrap over an empty subset is undefined')
    scores = np.asarray(scores, dtype=np.float64)
    rng = np.random.default_rng(seed)
    means = scores[rng.integers(0, len(scores), size=(draws, k))].mean(axis=1)
    return float(means.std())


def significance_verdict(z_values: Mapping[Subset | str, float], threshold: float = Z_THRESHOLD) -> bool:
    """
    True iff every |Z| exceeds the threshold with the expected sign pattern
    """
    values = {Subset(name): z for name, z in z_values.items()}
    missing = [subset.value for subset in Subset if subset not in values]
    if missing:
        raise ContractError(f'missing Z values for {", ".join(missing)}')
    return all(
        abs(values[subset]) > threshold and math.copysign(1, values[subset]) == sign
        for subset, sign in EXPECTED_SIGN.items()
    )


@dataclass
class SubsetRecord:
    name: Subset
    avg_contamination: float
    stat: SubsetStat | None


@dataclass
class ContaminationReport:
    n: int
    percents: np.ndarray
    subsets: list[SubsetRecord] = field(default_factory=list)
    significant: bool = False

    def table(self) -> str:
        lines = ['subset\tavg_contamination_pct\tk\tmean_score\tmu\tz']
        for record in self.subsets:
            if record.stat is None:
                lines.append(f'{record.name.value}\t-\t0\t-\t-\t-')
                continue
            stat = record.stat
            lines.append(
                f'{record.name.value}\t{record.avg_contamination:.1f}\t{stat.size}\t'
                f'{stat.mean_score:.4f}\t{stat.mu:.4f}\t{stat.z:.2f}'
            )
        lines.append(f'significant\t{str(self.significant).lower()}')
        return '\n'.join(lines) + '\n'


def score_subsets(percents: Sequence[float], scores: Sequence[float], n: int = 0) -> ContaminationReport:
    """
    Z statistics of all four subsets and the verdict for given contamination percents

    An empty subset is reported without statistics and makes the verdict false.
    """
    percents = np.asarray(percents, dtype=np.float64)
    if len(percents) != len(scores):
        raise ContractError(f'{len(percents)} samples but {len(scores)} scores')

    report = ContaminationReport(n, percents)
    z_values = {}
    for subset, indices in partition_subsets(percents).items():
        if len(indices) == 0:
            logger.warning('Subset %s is empty', subset.value)
            report.subsets.append(SubsetRecord(subset, float('nan'), None))
            continue
        stat = z_statistic(scores, indices)
        z_values[subset] = stat.z
        report.subsets.append(SubsetRecord(subset, float(percents[indices].mean()), stat))

    report.significant = len(z_values) == len(Subset) and significance_verdict(z_values)
    return report


def contamination_report(
    corpus: Iterable[Sequence],
    samples: Sequence[Sequence],
    scores: Sequence[float],
    n: int,
    workers: int = 1
) -> ContaminationReport:
    """
    Scores every sample against the corpus index and tests all four subsets
    """
    if len(samples) != len(scores):
        raise ContractError(f'{len(samples)} samples but {len(scores)} scores')
    index = NgramIndex.build(corpus, n, workers)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        percents = list(executor.map(lambda sample: contamination_pct(sample, index), samples))
    return score_subsets(percents, scores, n)
