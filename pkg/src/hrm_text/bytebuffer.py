import io
import struct

import numpy as np


class ByteBuffer:
    """
    Little-endian read/write buffer used by the container format

    Example usage:
    buffer = ByteBuffer()
    buffer.put_u32(10)
    buffer.put_u32_at(0, 42)  # Overwrite the first 4 bytes with a new int
    print(ByteBuffer.wrap(buffer.getvalue()).get_u32())  # Output should be 42
    """

    def __init__(self, data: bytes = b''):
        self.stream = io.BytesIO(data)

    @staticmethod
    def wrap(data: bytes):
        return ByteBuffer(data)

    def remaining(self) -> int:
        return len(self.stream.getbuffer()) - self.stream.tell()

    def _read(self, length: int) -> bytes:
        data = self.stream.read(length)
        if len(data) != length:
            raise EOFError(f'Expecting {length} bytes, got {len(data)}')
        return data

    def put_u8(self, value):
        self.stream.write(struct.pack('<B', value))

    def put_u16(self, value):
        self.stream.write(struct.pack('<H', value))

    def put_u32(self, value):
        self.stream.write(struct.pack('<I', value))

    def put_u64(self, value):
        self.stream.write(struct.pack('<Q', value))

    def put_bytes(self, value):
        self.stream.write(value)

    def put_str(self, value: str):
        encoded = value.encode('utf-8')
        self.put_u16(len(encoded))
        self.put_bytes(encoded)

    def put_array(self, array: np.ndarray):
        """
        Writes precision, rank, extents and raw little-endian data
        """
        if array.dtype == np.float64:
            bits, little = 64, '<f8'
        elif array.dtype == np.float32:
            bits, little = 32, '<f4'
        else:
            raise TypeError(f'Unsupported array dtype "{array.dtype}"')
        self.put_u8(bits)
        self.put_u8(array.ndim)
        for extent in array.shape:
            self.put_u64(extent)
        self.put_bytes(np.ascontiguousarray(array, dtype=little).tobytes())

    def get_u8(self):
        return struct.unpack('<B', self._read(1))[0]

    def get_u16(self):
        return struct.unpack('<H', self._read(2))[0]

    def get_u32(self):
        return struct.unpack('<I', self._read(4))[0]

    def get_u64(self):
        return struct.unpack('<Q', self._read(8))[0]

    def get_bytes(self, length):
        return self._read(length)

    def get_str(self) -> str:
        return self._read(self.get_u16()).decode('utf-8')

    def get_array(self) -> np.ndarray:
        bits = self.get_u8()
        if bits not in (32, 64):
            raise ValueError(f'Unsupported precision {bits}')
        rank = self.get_u8()
        shape = tuple(self.get_u64() for _ in range(rank))
        little = '<f8' if bits == 64 else '<f4'
        count = int(np.prod(shape, dtype=np.int64))
        raw = self._read(count * (bits // 8))
        native = np.float64 if bits == 64 else np.float32
        return np.frombuffer(raw, dtype=little).astype(native).reshape(shape)

    def put_u32_at(self, index, value):
        # Save current position
        current_position = self.stream.tell()
        self.stream.seek(index)
        self.stream.write(struct.pack('<I', value))
        self.stream.seek(current_position)

    def getvalue(self) -> bytes:
        return self.stream.getvalue()
