"""
Synthetic copy / reverse instruction tasks for desk-scale training runs
"""


from enum import StrEnum

import numpy as np

from hrm_text.data import Document
from hrm_text.objective import Condition


ALPHABET = tuple('abcdefghij')


class SyntheticTask(StrEnum):
    COPY = 'copy'
    REVERSE = 'reverse'


def make_document(task: SyntheticTask, symbols: list[str]) -> Document:
    """
    Instruction "copy: a b c" with response "a b c" (reversed for the reverse task)
    """
    task = SyntheticTask(task)
    answer = symbols if task is SyntheticTask.COPY else list(reversed(symbols))
    return Document(
        instruction=f'{task.value}: {" ".join(symbols)}',
        response=' '.join(answer),
        dataset='synthetic',
        task=task.value,
        condition=Condition.DIRECT,
    )


def synthetic_corpus(
    count: int,
    seed: int = 0,
    min_len: int = 2,
    max_len: int = 5,
    tasks: tuple[SyntheticTask, ...] = (SyntheticTask.COPY, SyntheticTask.REVERSE),
    alphabet: tuple[str, ...] = ALPHABET
) -> list[Document]:
    rng = np.random.default_rng(seed)
    documents = []
    for index in range(count):
        length = int(rng.integers(min_len, max_len + 1))
        symbols = [alphabet[i] for i in rng.integers(0, len(alphabet), size=length)]
        documents.append(make_document(tasks[index % len(tasks)], symbols))
    return documents
