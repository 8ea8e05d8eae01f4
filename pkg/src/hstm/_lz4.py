"""LZ4 block (not frame) codec: python-lz4 when present, else pyarrow's lz4_raw."""
from __future__ import annotations


class LZ4BlockError(ValueError):
    pass


try:
    import lz4.block as _block

    BACKEND = "lz4"

    def compress(data: bytes) -> bytes:
        return _block.compress(data, mode="default", store_size=False)

    def decompress(data: bytes, size: int) -> bytes:
        try:
            return _block.decompress(data, uncompressed_size=size)
        except _block.LZ4BlockError as exc:
            raise LZ4BlockError(str(exc)) from None

except ImportError:
    import pyarrow as _pa

    BACKEND = "pyarrow"
    _codec = _pa.Codec("lz4_raw")

    def compress(data: bytes) -> bytes:
        return _codec.compress(data, asbytes=True)

    def decompress(data: bytes, size: int) -> bytes:
        try:
            return _codec.decompress(data, decompressed_size=size, asbytes=True)
        except (OSError, _pa.ArrowException) as exc:
            raise LZ4BlockError(str(exc)) from None
