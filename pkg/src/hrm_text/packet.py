import struct
import zlib
from enum import IntEnum

from google.protobuf import json_format
from google.protobuf import struct_pb2

from hrm_text.bytebuffer import ByteBuffer
from hrm_text.errors import DecodeError


class PacketType(IntEnum):
    CONFIG = 1
    PARAMETER = 2
    EMA_PARAMETER = 3
    METADATA = 4
    TOKENIZER = 16
    MERGES = 17


class Packet:
    """
    One framed record of a container file

    Example usage:
    pckt = Packet(PacketType.METADATA, b'...')
    serialized_data = pckt.serialize()
    """

    PREAMBLE = b'HRMT'
    HEADER_SIZE = 24
    CRC_OFFSET = 4

    def __init__(self, packet_type: PacketType, payload: bytes = b'', sequence_number: int = 0):
        self.sequence_number = sequence_number
        self.type = PacketType(packet_type)
        self.payload = bytes(payload)
        self.size = len(self.payload)
        self.checksum = 0

    def _frame(self, checksum: int) -> ByteBuffer:
        buffer = ByteBuffer()
        buffer.put_bytes(Packet.PREAMBLE)
        buffer.put_u32(checksum)
        buffer.put_u32(self.sequence_number)
        buffer.put_u16(self.type.value)
        buffer.put_u16(0)
        buffer.put_u64(self.size)
        buffer.put_bytes(self.payload)
        return buffer

    def serialize(self) -> bytes:
        # CRC covers the whole packet with the checksum field zeroed
        buffer = self._frame(0)
        self.checksum = zlib.crc32(buffer.getvalue())
        buffer.put_u32_at(Packet.CRC_OFFSET, self.checksum)
        return buffer.getvalue()

    def checksum_valid(self) -> bool:
        return zlib.crc32(self._frame(0).getvalue()) == self.checksum


class ContainerProtocol:
    """
    Container file decoder
    """

    def decode(self, data: bytes) -> list[Packet]:
        """
        Decodes the raw data into a list of packets
        """
        packets = []

        to_decode = data

        while len(to_decode) > 0:
            packet, remainder = self.decode_one(to_decode)
            packets.append(packet)

            to_decode = remainder

        return packets

    def decode_one(self, data: bytes) -> tuple[Packet, bytes]:
        """
        Decodes the first packet of the data and returns any undecoded data
        """
        if len(data) < Packet.HEADER_SIZE:
            raise DecodeError(f'Expecting at least {Packet.HEADER_SIZE} bytes, got {len(data)}')

        if data[0:4] != Packet.PREAMBLE:
            raise DecodeError('Data does not start with correct preamble')

        checksum, sequence_number, packet_type, _, length = struct.unpack('<IIHHQ', data[4:Packet.HEADER_SIZE])

        end = Packet.HEADER_SIZE + length
        if len(data) < end:
            raise DecodeError(f'Truncated packet: expecting {length} payload bytes, got {len(data) - Packet.HEADER_SIZE}')

        try:
            packet_type = PacketType(packet_type)
        except ValueError:
            raise DecodeError(f'Unknown packet type {packet_type}') from None

        packet = Packet(packet_type, data[Packet.HEADER_SIZE:end], sequence_number)
        packet.checksum = checksum

        if not packet.checksum_valid():
            raise DecodeError(f'Checksum mismatch in packet {sequence_number} ({packet_type.name})')

        return packet, data[end:]


def write_packets(path, packets: list[Packet]) -> None:
    """
    Serializes packets in order, numbering them from zero
    """
    with open(path, 'wb') as handle:
        for sequence_number, packet in enumerate(packets):
            packet.sequence_number = sequence_number
            handle.write(packet.serialize())


def read_packets(path) -> list[Packet]:
    with open(path, 'rb') as handle:
        data = handle.read()
    packets = ContainerProtocol().decode(data)
    for expected, packet in enumerate(packets):
        if packet.sequence_number != expected:
            raise DecodeError(f'Out of order packet {packet.sequence_number}, expected {expected}')
    return packets


def struct_payload(values: dict) -> bytes:
    """
    Encodes a plain dict as a protobuf Struct payload
    """
    message = struct_pb2.Struct()
    json_format.ParseDict(values, message)
    return message.SerializeToString(deterministic=True)


def struct_from_payload(payload: bytes) -> dict:
    message = struct_pb2.Struct()
    message.ParseFromString(payload)
    return json_format.MessageToDict(message)
