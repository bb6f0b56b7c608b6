"""
Binary model format ("FQNT").

All integers are little-endian. A file is a header followed by one record
per layer::

    header  : magic "FQNT" | u16 version | u32 layer_count
    record  : u32 payload_length | payload | u32 crc32(payload)
    payload : u16 name_length | name (utf-8)
              | frame_out | frame_in          (u32 k, u32 rho, u32 d,
                                               u8 rotated, u64 seed)
              | u8 bits | f32 clip_mu | f32 clip_sigma
              | u32 rows | u32 cols
              | f32 row_scale[rows] | f32 row_zero[rows]
              | codes packed at ``bits`` per entry, row by row, each row
                padded to a whole byte

Codes are packed least significant bits first: with 2 bits, byte ``b``
holds codes ``4b .. 4b+3`` at bit offsets 0, 2, 4 and 6.
"""

import logging
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from tffquant.__version__ import FORMAT_VERSION
from tffquant.errors import ChecksumError, ConfigError, ConstructionError, FormatError
from tffquant.quantizer import QuantizedLayer, nominal_bits
from tffquant.sysdeps import parallel_map
from tffquant.tff import FrameParams

LOG = logging.getLogger(__name__)

MAGIC = b"FQNT"
PACKED_BITS = (2, 4, 8)

_HEADER = struct.Struct("<4sHI")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_FRAME = struct.Struct("<IIIBQ")
_LAYER_META = struct.Struct("<BffII")


def _check_bits(bits):
    if bits not in PACKED_BITS:
        raise ConfigError(f"only {PACKED_BITS} bit codes can be packed, got {bits}")


def packed_row_bytes(cols, bits):
    """Bytes needed for one packed row of ``cols`` codes."""
    return math.ceil(cols * bits / 8)


def pack_codes(codes, bits):
    """
    Pack a matrix (or vector) of codes into bytes, row by row.

    :param numpy.ndarray codes: Integers in ``[0, 2**bits - 1]``.
    :param int bits: 2, 4 or 8.
    :rtype: bytes
    """
    _check_bits(bits)
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[None, :]
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << bits)):
        raise ConfigError(f"codes do not fit in {bits} bits")
    rows, cols = codes.shape
    per_byte = 8 // bits
    row_bytes = packed_row_bytes(cols, bits)
    padded = np.zeros((rows, row_bytes * per_byte), dtype=np.uint8)
    padded[:, :cols] = codes
    shifts = (np.arange(per_byte) * bits).astype(np.uint8)
    grouped = padded.reshape(rows, row_bytes, per_byte) << shifts
    return np.bitwise_or.reduce(grouped, axis=2).astype(np.uint8).tobytes()


def unpack_codes(data, rows, cols, bits):
    """
    Inverse of :func:`pack_codes`.

    :rtype: numpy.ndarray
    :returns: ``rows x cols`` uint8 codes.
    """
    _check_bits(bits)
    per_byte = 8 // bits
    row_bytes = packed_row_bytes(cols, bits)
    if len(data) != rows * row_bytes:
        raise FormatError(
            f"{len(data)} packed bytes for {rows}x{cols} codes at {bits} bits"
        )
    packed = np.frombuffer(data, dtype=np.uint8).reshape(rows, row_bytes)
    shifts = (np.arange(per_byte) * bits).astype(np.uint8)
    mask = np.uint8((1 << bits) - 1)
    expanded = (packed[:, :, None] >> shifts) & mask
    return expanded.reshape(rows, row_bytes * per_byte)[:, :cols].copy()


def _pack_frame(params):
    return _FRAME.pack(params.k, params.rho, params.d, int(params.rotated), params.seed)


def serialize_layer(layer):
    """
    One length-prefixed, CRC-protected layer record.

    :param QuantizedLayer layer: The layer.
    :rtype: bytes
    """
    _check_bits(layer.bits)
    name = layer.name.encode("utf-8")
    if len(name) > 0xFFFF:
        raise ConfigError(f"layer name too long: {len(name)} bytes")
    rows, cols = layer.codes.shape
    payload = b"".join(
        [
            _U16.pack(len(name)),
            name,
            _pack_frame(layer.frame_out),
            _pack_frame(layer.frame_in),
            _LAYER_META.pack(
                layer.bits, layer.clip_mu, layer.clip_sigma, rows, cols
            ),
            layer.row_scale.astype("<f4").tobytes(),
            layer.row_zero.astype("<f4").tobytes(),
            pack_codes(layer.codes, layer.bits),
        ]
    )
    return _U32.pack(len(payload)) + payload + _U32.pack(zlib.crc32(payload))


class _Cursor:
    """
    Bounds-checked reader over a payload; errors carry absolute offsets.
    """

    def __init__(self, data, base):
        self.data = data
        self.pos = 0
        self.base = base

    def take(self, count, what):
        if self.pos + count > len(self.data):
            raise FormatError(f"truncated {what}", self.base + self.pos)
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, layout, what):
        return layout.unpack(self.take(layout.size, what))


def _peek_name(payload):
    if len(payload) < _U16.size:
        return "?"
    (length,) = _U16.unpack_from(payload)
    return payload[_U16.size : _U16.size + length].decode("utf-8", "replace") or "?"


def _split_record(data, offset):
    """
    Locate the record starting at ``offset``.

    :returns: ``(payload, next_offset, crc_ok)``
    """
    if offset + _U32.size > len(data):
        raise FormatError("truncated record length", offset)
    (length,) = _U32.unpack_from(data, offset)
    start = offset + _U32.size
    end = start + length
    if end + _U32.size > len(data):
        raise FormatError(f"record of {length} bytes runs past end of file", offset)
    payload = bytes(data[start:end])
    (crc,) = _U32.unpack_from(data, end)
    return payload, end + _U32.size, zlib.crc32(payload) == crc


def _parse_payload(payload, base):
    cursor = _Cursor(payload, base)
    (name_length,) = cursor.unpack(_U16, "name length")
    try:
        name = cursor.take(name_length, "layer name").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("layer name is not UTF-8", base) from exc
    frames = []
    for side in ("frame_out", "frame_in"):
        start = base + cursor.pos
        k, rho, d, rotated, seed = cursor.unpack(_FRAME, side)
        try:
            frames.append(FrameParams(k, rho, d, seed, bool(rotated)))
        except ConstructionError as exc:
            raise FormatError(f"invalid {side}: {exc}", start) from exc
    bits, clip_mu, clip_sigma, rows, cols = cursor.unpack(_LAYER_META, "layer meta")
    if bits not in PACKED_BITS:
        raise FormatError(f"unsupported code width {bits}", base + cursor.pos)
    scale = np.frombuffer(cursor.take(4 * rows, "row scales"), dtype="<f4")
    zero = np.frombuffer(cursor.take(4 * rows, "zero points"), dtype="<f4")
    codes = unpack_codes(
        cursor.take(rows * packed_row_bytes(cols, bits), "codes"), rows, cols, bits
    )
    if cursor.pos != len(payload):
        raise FormatError("trailing bytes in layer record", base + cursor.pos)
    return QuantizedLayer(
        name=name,
        codes=codes,
        row_scale=scale.astype(np.float32),
        row_zero=zero.astype(np.float32),
        clip_mu=clip_mu,
        clip_sigma=clip_sigma,
        frame_out=frames[0],
        frame_in=frames[1],
        bits=bits,
    )


def deserialize_layer(data, offset=0):
    """
    Parse one record produced by :func:`serialize_layer`.

    :param bytes data: Buffer holding the record.
    :param int offset: Offset of the record in the enclosing file, used in
        error messages.
    :rtype: QuantizedLayer
    """
    payload, end, crc_ok = _split_record(data, 0)
    if not crc_ok:
        raise ChecksumError(_peek_name(payload), offset)
    if end != len(data):
        raise FormatError("trailing bytes after layer record", offset + end)
    return _parse_payload(payload, offset + _U32.size)


def _parse_header(data):
    if len(data) < _HEADER.size:
        raise FormatError("file too short for FQNT header", 0)
    magic, version, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    return version, count


@dataclass
class RecordStatus:
    """
    Result of scanning one record with :func:`scan_model`.
    """

    index: int
    offset: int
    length: int
    name: str
    crc_ok: bool
    layer: Optional[QuantizedLayer] = None
    error: Optional[str] = None


def scan_model(data):
    """
    Walk every record of a model file without stopping at the first CRC
    failure.

    :param bytes data: Whole file.
    :rtype: tuple
    :returns: ``(version, layer_count, statuses)``; a truncated file yields
        a final status with ``error`` set.
    """
    version, count = _parse_header(data)
    statuses = []
    offset = _HEADER.size
    for index in range(count):
        try:
            payload, end, crc_ok = _split_record(data, offset)
        except FormatError as exc:
            statuses.append(RecordStatus(index, offset, 0, "?", False, error=str(exc)))
            return version, count, statuses
        status = RecordStatus(index, offset, end - offset, _peek_name(payload), crc_ok)
        if crc_ok:
            try:
                status.layer = _parse_payload(payload, offset + _U32.size)
            except ValueError as exc:
                status.error = str(exc)
        statuses.append(status)
        offset = end
    if offset != len(data):
        statuses.append(
            RecordStatus(
                count,
                offset,
                len(data) - offset,
                "?",
                False,
                error=f"{len(data) - offset} trailing bytes after last record",
            )
        )
    return version, count, statuses


@dataclass
class PackedModel:
    """
    In-memory image of a model file: an ordered list of quantized layers.
    """

    layers: List[QuantizedLayer] = field(default_factory=list)
    version: int = FORMAT_VERSION

    def to_bytes(self):
        records = parallel_map(serialize_layer, self.layers)
        header = _HEADER.pack(MAGIC, self.version, len(self.layers))
        return header + b"".join(records)

    @classmethod
    def from_bytes(cls, data):
        """
        Parse a whole file, raising on the first damaged record.
        """
        version, count = _parse_header(data)
        layers = []
        offset = _HEADER.size
        for _ in range(count):
            payload, end, crc_ok = _split_record(data, offset)
            if not crc_ok:
                raise ChecksumError(_peek_name(payload), offset)
            layers.append(_parse_payload(payload, offset + _U32.size))
            offset = end
        if offset != len(data):
            raise FormatError("trailing bytes after last record", offset)
        return cls(layers, version)


def _file_mode():
    """Permissions a plain ``open(path, "w")`` would give under the umask."""
    umask = os.umask(0)
    os.umask(umask)
    return 0o666 & ~umask


def atomic_write(path, data):
    """
    Write ``data`` to a temporary file next to ``path`` and rename it into
    place, so readers never see a partial file. The file gets the usual
    umask-derived permissions rather than the private mode of the
    temporary file.
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    handle, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tffquant-")
    try:
        with os.fdopen(handle, "wb") as stream:
            stream.write(data)
        os.chmod(tmp_path, _file_mode())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def write_model(path, layers):
    """
    Serialize quantized layers to ``path`` atomically.

    :rtype: PackedModel
    """
    model = PackedModel(list(layers))
    data = model.to_bytes()
    atomic_write(path, data)
    LOG.info("wrote %d layers (%d bytes) to %s", len(model.layers), len(data), path)
    return model


def read_model(path):
    """
    :rtype: PackedModel
    """
    with open(path, "rb") as stream:
        return PackedModel.from_bytes(stream.read())


@dataclass
class LayerStorage:
    """
    Byte accounting for one layer record.
    """

    name: str
    code_bytes: int
    grid_bytes: int
    metadata_bytes: int
    fp32_equivalent_bytes: int
    nominal_bits: float
    exact_bits: float

    @property
    def total_bytes(self):
        return self.code_bytes + self.grid_bytes + self.metadata_bytes

    @property
    def compression_ratio(self):
        return self.fp32_equivalent_bytes / self.total_bytes

    @property
    def effective_bits(self):
        """Stored bits per original weight, all overhead included."""
        return 8.0 * self.total_bytes / (self.fp32_equivalent_bytes / 4)


@dataclass
class StorageReport:
    """
    Byte accounting for a whole model file.
    """

    layers: List[LayerStorage]
    header_bytes: int = _HEADER.size

    @property
    def total_bytes(self):
        return self.header_bytes + sum(layer.total_bytes for layer in self.layers)

    @property
    def fp32_equivalent_bytes(self):
        return sum(layer.fp32_equivalent_bytes for layer in self.layers)

    @property
    def compression_ratio(self):
        return self.fp32_equivalent_bytes / self.total_bytes

    def lines(self):
        out = []
        for layer in self.layers:
            out.append(
                f"{layer.name}: codes={layer.code_bytes}B grid={layer.grid_bytes}B "
                f"meta={layer.metadata_bytes}B fp32={layer.fp32_equivalent_bytes}B "
                f"ratio={layer.compression_ratio:.2f}x "
                f"nominal_bits={layer.nominal_bits:.3f} "
                f"exact_bits={layer.exact_bits:.3f}"
            )
        out.append(
            f"total: {self.total_bytes}B vs fp32 {self.fp32_equivalent_bytes}B "
            f"({self.compression_ratio:.2f}x)"
        )
        return out


def layer_storage(layer):
    """
    :param QuantizedLayer layer: The layer.
    :rtype: LayerStorage
    """
    rows, cols = layer.codes.shape
    code_bytes = rows * packed_row_bytes(cols, layer.bits)
    grid_bytes = 8 * rows
    record_bytes = len(serialize_layer(layer))
    d_out, d_in = layer.theta_shape
    r_out, r_in = (float(layer.frame_out.redundancy), float(layer.frame_in.redundancy))
    return LayerStorage(
        name=layer.name,
        code_bytes=code_bytes,
        grid_bytes=grid_bytes,
        metadata_bytes=record_bytes - code_bytes - grid_bytes,
        fp32_equivalent_bytes=4 * d_out * d_in,
        nominal_bits=nominal_bits(layer),
        exact_bits=layer.bits * r_out * r_in,
    )


def storage_report(model):
    """
    :param model: :class:`PackedModel` or a list of quantized layers.
    :rtype: StorageReport
    """
    layers = model.layers if isinstance(model, PackedModel) else list(model)
    return StorageReport([layer_storage(layer) for layer in layers])


def inspect_lines(data):
    """
    Human readable listing of a model file. Damaged records are reported
    with their byte offsets instead of aborting the listing.

    :param bytes data: Whole file.
    :rtype: tuple
    :returns: ``(lines, ok)``
    """
    version, count, statuses = scan_model(data)
    lines = [f"FQNT v{version} layers={count} bytes={len(data)}"]
    ok = True
    for status in statuses:
        if status.crc_ok and status.layer is not None:
            layer = status.layer
            rows, cols = layer.codes.shape
            d_out, d_in = layer.theta_shape
            fo, fi = layer.frame_out, layer.frame_in
            lines.append(
                f"layer {status.index} {layer.name} offset={status.offset} "
                f"bytes={status.length} bits={layer.bits} "
                f"D_hat={rows}x{cols} theta={d_out}x{d_in} "
                f"out=({fo.k},{fo.rho},{fo.d}) seed={fo.seed} "
                f"in=({fi.k},{fi.rho},{fi.d}) seed={fi.seed} CRC OK"
            )
            continue
        ok = False
        if status.crc_ok:
            lines.append(
                f"layer {status.index} {status.name} offset={status.offset} "
                f"ERROR {status.error}"
            )
        elif status.error is not None:
            lines.append(f"error at offset {status.offset}: {status.error}")
        else:
            lines.append(
                f"layer {status.index} {status.name} offset={status.offset} "
                f"bytes={status.length} CRC FAIL"
            )
    return lines, ok
