"""
Byte-level BPE tokenizer

Ids 0-255 are raw bytes, merges follow in training order, and the reserved
special tokens occupy the top of the vocabulary.
"""


import collections
import logging
import re
from collections.abc import Iterable

import numpy as np

from hrm_text.bytebuffer import ByteBuffer
from hrm_text.errors import ConfigError
from hrm_text.errors import DecodeError
from hrm_text.errors import ValidationError
from hrm_text.objective import Condition
from hrm_text.packet import Packet
from hrm_text.packet import PacketType
from hrm_text.packet import read_packets
from hrm_text.packet import struct_from_payload
from hrm_text.packet import struct_payload
from hrm_text.packet import write_packets


logger = logging.getLogger(__name__)

PAD = '<|pad|>'
END_OF_TEXT = '<|endoftext|>'
SPECIAL_TOKENS = (PAD, END_OF_TEXT) + tuple(condition.tag for condition in Condition)

PRE_SPLIT = re.compile(rb'\s?[^\s]+|\s+')


class TokenizerModel:
    """
    Ordered merge rules plus reserved specials

    Example usage:
    tokenizer = bpe_train(['some text'], 512)
    ids = tokenizer.encode('<|direct|>some text')
    tokenizer.decode(ids)
    """

    def __init__(self, merges: list[tuple[int, int]], vocab_size: int, specials: tuple[str, ...] = SPECIAL_TOKENS):
        minimum = 256 + len(merges) + len(specials)
        if vocab_size < minimum:
            raise ConfigError('tokenizer.vocab_size', f'{vocab_size} below the {minimum} ids in use')

        self.merges = list(merges)
        self.vocab_size = vocab_size
        self.specials = tuple(specials)
        self.ranks = {pair: rank for rank, pair in enumerate(self.merges)}

        self.pieces: list[bytes] = [bytes([byte]) for byte in range(256)]
        for left, right in self.merges:
            self.pieces.append(self.pieces[left] + self.pieces[right])

        first_special = vocab_size - len(self.specials)
        self.special_ids = {token: first_special + index for index, token in enumerate(self.specials)}
        self.special_tokens = {index: token for token, index in self.special_ids.items()}
        self._special_split = re.compile('(' + '|'.join(re.escape(token) for token in self.specials) + ')')

    @property
    def pad_id(self) -> int:
        return self.special_ids[PAD]

    @property
    def eot_id(self) -> int:
        return self.special_ids[END_OF_TEXT]

    def condition_id(self, condition: Condition | str) -> int:
        try:
            return self.special_ids[Condition(condition).tag]
        except ValueError:
            raise ValidationError(f'unknown condition "{condition}"') from None

    def _encode_chunk(self, chunk: bytes) -> list[int]:
        ids = list(chunk)
        while len(ids) > 1:
            candidates = [(self.ranks.get(pair), index) for index, pair in enumerate(zip(ids, ids[1:]))]
            candidates = [(rank, index) for rank, index in candidates if rank is not None]
            if not candidates:
                break
            rank, _ = min(candidates)
            merged_id = 256 + rank
            pair = self.merges[rank]
            out, index = [], 0
            while index < len(ids):
                if index + 1 < len(ids) and (ids[index], ids[index + 1]) == pair:
                    out.append(merged_id)
                    index += 2
                else:
                    out.append(ids[index])
                    index += 1
            ids = out
        return ids

    def encode_bytes(self, data: bytes) -> list[int]:
        """
        Encodes raw bytes; special-token text is not recognized
        """
        ids = []
        for match in PRE_SPLIT.finditer(data):
            ids.extend(self._encode_chunk(match.group(0)))
        return ids

    def encode(self, text: str) -> list[int]:
        ids = []
        for part in self._special_split.split(text):
            if not part:
                continue
            if part in self.special_ids:
                ids.append(self.special_ids[part])
            else:
                ids.extend(self.encode_bytes(part.encode('utf-8')))
        return ids

    def generation_mask(self) -> np.ndarray:
        """
        Ids a decoder may emit: assigned byte and merge pieces plus end-of-text
        """
        allowed = np.zeros(self.vocab_size, dtype=bool)
        allowed[:len(self.pieces)] = True
        allowed[self.eot_id] = True
        return allowed

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        out = bytearray()
        for token in ids:
            token = int(token)
            if token in self.special_tokens:
                out.extend(self.special_tokens[token].encode('utf-8'))
            elif 0 <= token < len(self.pieces):
                out.extend(self.pieces[token])
            else:
                raise ValidationError(f'token id {token} is not assigned')
        return bytes(out)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode('utf-8', errors='replace')

    def save(self, path) -> None:
        header = {'vocab_size': self.vocab_size, 'specials': list(self.specials), 'merge_count': len(self.merges)}
        buffer = ByteBuffer()
        for left, right in self.merges:
            buffer.put_u32(left)
            buffer.put_u32(right)
        write_packets(path, [
            Packet(PacketType.TOKENIZER, struct_payload(header)),
            Packet(PacketType.MERGES, buffer.getvalue()),
        ])

    @classmethod
    def load(cls, path) -> 'TokenizerModel':
        header, merges = None, None
        for packet in read_packets(path):
            if packet.type is PacketType.TOKENIZER:
                header = struct_from_payload(packet.payload)
            elif packet.type is PacketType.MERGES:
                buffer = ByteBuffer.wrap(packet.payload)
                merges = [(buffer.get_u32(), buffer.get_u32()) for _ in range(len(packet.payload) // 8)]
            else:
                raise DecodeError(f'Unexpected {packet.type.name} packet in tokenizer file')
        if header is None or merges is None:
            raise DecodeError(f'Tokenizer file {path} is incomplete')
        if int(header['merge_count']) != len(merges):
            raise DecodeError(f'Expecting {int(header["merge_count"])} merges, got {len(merges)}')
        return cls(merges, int(header['vocab_size']), tuple(header['specials']))


def bpe_train(corpus: Iterable[str], target_vocab: int, specials: tuple[str, ...] = SPECIAL_TOKENS) -> TokenizerModel:
    """
    Greedy highest-count pair merging from the byte alphabet

    Ties go to the lexicographically smallest pair of byte strings. When the
    corpus runs out of pairs early the unused ids stay unassigned so the
    vocabulary size still equals `target_vocab`.
    """
    floor = 256 + len(specials)
    if target_vocab < floor:
        raise ConfigError('tokenizer.vocab_size', f'{target_vocab} below {floor} (bytes + specials)')

    words = collections.Counter()
    for text in corpus:
        for match in PRE_SPLIT.finditer(text.encode('utf-8')):
            words[tuple(match.group(0))] += 1
    if not words:
        raise ValidationError('tokenizer corpus is empty')

    pieces = [bytes([byte]) for byte in range(256)]
    merges = []
    budget = target_vocab - floor

    while len(merges) < budget:
        pairs = collections.Counter()
        for word, count in words.items():
            for pair in zip(word, word[1:]):
                pairs[pair] += count
        if not pairs:
            logger.warning('Corpus exhausted after %d merges; %d ids left unassigned', len(merges), budget - len(merges))
            break

        best = min(pairs, key=lambda pair: (-pairs[pair], pieces[pair[0]], pieces[pair[1]]))
        new_id = len(pieces)
        merges.append(best)
        pieces.append(pieces[best[0]] + pieces[best[1]])

        merged = collections.Counter()
        for word, count in words.items():
            out, index = [], 0
            while index < len(word):
                if index + 1 < len(word) and (word[index], word[index + 1]) == best:
                    out.append(new_id)
                    index += 2
                else:
                    out.append(word[index])
                    index += 1
            merged[tuple(out)] += count
        words = merged

    logger.info('Trained BPE with %d merges (vocab %d)', len(merges), target_vocab)
    return TokenizerModel(merges, target_vocab, specials)
