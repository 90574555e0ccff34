"""
Checkpoint container: config record, raw and EMA parameters, free-form metadata
"""


import logging
from dataclasses import dataclass
from dataclasses import field

import numpy as np

from hrm_text import records
from hrm_text.bytebuffer import ByteBuffer
from hrm_text.errors import DecodeError
from hrm_text.model import ModelConfig
from hrm_text.model import Parameters
from hrm_text.packet import Packet
from hrm_text.packet import PacketType
from hrm_text.packet import read_packets
from hrm_text.packet import struct_from_payload
from hrm_text.packet import struct_payload
from hrm_text.packet import write_packets


logger = logging.getLogger(__name__)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def parameters(self, use_ema: bool = True) -> Parameters:
        """
        Tensors for inference; the EMA weights when present
        """
        arrays = self.ema if use_ema and self.ema else self.params
        frozen = () if self.config.train_z_l0 else ('z_l0',)
        return Parameters.from_arrays(arrays, frozen)


def encode_tensor(name: str, array: np.ndarray) -> bytes:
    buffer = ByteBuffer()
    buffer.put_str(name)
    buffer.put_array(np.asarray(array))
    return buffer.getvalue()


def decode_tensor(payload: bytes) -> tuple[str, np.ndarray]:
    buffer = ByteBuffer.wrap(payload)
    try:
        name = buffer.get_str()
        array = buffer.get_array()
    except (EOFError, ValueError) as error:
        raise DecodeError(f'Malformed tensor payload: {error}') from None
    if buffer.remaining():
        raise DecodeError(f'Tensor "{name}" has {buffer.remaining()} trailing bytes')
    return name, array


def save_checkpoint(path, config: ModelConfig, params, ema=None, metadata: dict | None = None) -> None:
    """
    Writes one CONFIG packet, the parameters, the EMA shadow and one METADATA packet
    """
    params = _as_arrays(params)
    packets = [Packet(PacketType.CONFIG, struct_payload(records.to_record(config)))]
    for name in sorted(params):
        packets.append(Packet(PacketType.PARAMETER, encode_tensor(name, params[name])))
    for name, array in sorted(_as_arrays(ema or {}).items()):
        packets.append(Packet(PacketType.EMA_PARAMETER, encode_tensor(name, array)))
    packets.append(Packet(PacketType.METADATA, struct_payload(metadata or {})))
    write_packets(path, packets)
    logger.info('Saved checkpoint %s (%d tensors)', path, len(params))


def load_checkpoint(path) -> Checkpoint:
    config = None
    params, ema, metadata = {}, {}, {}

    for packet in read_packets(path):
        if packet.type is PacketType.CONFIG:
            config = records.from_record(ModelConfig, struct_from_payload(packet.payload), 'model')
        elif packet.type is PacketType.PARAMETER:
            name, array = decode_tensor(packet.payload)
            params[name] = array
        elif packet.type is PacketType.EMA_PARAMETER:
            name, array = decode_tensor(packet.payload)
            ema[name] = array
        elif packet.type is PacketType.METADATA:
            metadata = struct_from_payload(packet.payload)
        else:
            raise DecodeError(f'Unexpected {packet.type.name} packet in checkpoint')

    if config is None:
        raise DecodeError(f'Checkpoint {path} has no config packet')
    if ema and set(ema) != set(params):
        raise DecodeError('EMA parameter names do not match the raw parameters')
    return Checkpoint(config, params, ema, metadata)


def _as_arrays(values) -> dict[str, np.ndarray]:
    if isinstance(values, Parameters):
        return values.arrays()
    return {name: getattr(value, 'data', value) for name, value in values.items()}
