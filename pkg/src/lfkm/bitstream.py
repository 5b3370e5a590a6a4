"""The ``.lfkm`` model file: bit-exact serialization and rate accounting.

Layout (all integers little-endian)::

    header, 29 bytes   magic "LFKM", version u8, X u16, Y u16, U u8, V u8,
                       c_m u16, c_d u16, r u8, n u16, activation u8, flags u8,
                       prng u8, seed u64
    5 x layer block    n x f32 centroids, n x u8 code lengths,
                       u32 bit count, coded index stream (padded to a byte)
    bases block        f64 min, f64 max, 9*r x u16 codes   (decomposed only)
    decoder block      f64 min, f64 max, (kd*kd*c*3 + 3) x u16 codes
    trailer            u32 CRC-32 of every preceding byte

With the raw flag the layer/bases/decoder blocks are replaced by every
parameter as f32 in canonical order. Within a layer the index stream follows
the canonical parameter order of :func:`lfkm.model.layer_param_names`, each
parameter flattened row-major.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .huffman import HuffmanError, HuffmanTable, huffman_build
from .model import NUM_LAYERS, PRNG_PCG64, NetworkConfig, layer_param_names, param_shapes
from .quantizer import AffineQuant16, Codebook, QuantizedModel, RawModel

__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER_SIZE",
    "FormatError",
    "serialize",
    "deserialize",
    "read_header",
    "compute_bpp",
]

MAGIC = b"LFKM"
VERSION = 1
_HEADER = struct.Struct("<4sBHHBBHHBHBBBQ")
HEADER_SIZE = _HEADER.size
_AFFINE = struct.Struct("<dd")

FLAG_ALLOCATE = 1
FLAG_DECOMPOSE = 2
FLAG_RAW = 4
FLAG_DECODER3 = 8
_ACTIVATION_IDS = {"sigmoid": 0, "softmax": 1}


class FormatError(ValueError):
    """The byte sequence is not a valid model file."""


def _flags(cfg: NetworkConfig, raw: bool) -> int:
    flags = 0
    flags |= FLAG_ALLOCATE if cfg.allocate_modulators else 0
    flags |= FLAG_DECOMPOSE if cfg.decompose_kernels else 0
    flags |= FLAG_RAW if raw else 0
    flags |= FLAG_DECODER3 if cfg.decoder_kernel == 3 else 0
    return flags


def _header(cfg: NetworkConfig, raw: bool) -> bytes:
    if max(cfg.X, cfg.Y) > 0xFFFF or max(cfg.c_m, cfg.c_d) > 0xFFFF:
        raise ValueError("extents do not fit the header fields")
    return _HEADER.pack(
        MAGIC, VERSION, cfg.X, cfg.Y, cfg.U, cfg.V, cfg.c_m, cfg.c_d, cfg.r, cfg.n,
        _ACTIVATION_IDS[cfg.output_activation], _flags(cfg, raw), PRNG_PCG64, cfg.seed,
    )


def _layer_sizes(cfg: NetworkConfig, layer: int) -> int:
    shapes = param_shapes(cfg)
    return sum(int(np.prod(shapes[name])) for name in layer_param_names(cfg, layer))


def serialize(model: QuantizedModel | RawModel) -> bytes:
    cfg = model.config
    if cfg.dtype != "float64":
        raise ValueError("only float64 models can be serialized; the decoder computes in float64")
    raw = isinstance(model, RawModel)
    parts = [_header(cfg, raw)]
    if raw:
        for name, shape in param_shapes(cfg).items():
            arr = np.asarray(model.params[name], dtype="<f4")
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            parts.append(arr.tobytes())
    else:
        if len(model.layers) != NUM_LAYERS:
            raise ValueError(f"expected {NUM_LAYERS} codebooks")
        for i, book in enumerate(model.layers, start=1):
            if book.n != cfg.n:
                raise ValueError(f"layer {i} codebook has {book.n} centroids, header says {cfg.n}")
            if book.assignments.size != _layer_sizes(cfg, i):
                raise ValueError(f"layer {i} has {book.assignments.size} indices, expected {_layer_sizes(cfg, i)}")
            table = huffman_build(np.bincount(book.assignments, minlength=cfg.n))
            payload, nbits = table.encode(book.assignments)
            parts.append(np.asarray(book.centroids, dtype="<f4").tobytes())
            parts.append(table.lengths.astype(np.uint8).tobytes())
            parts.append(struct.pack("<I", nbits))
            parts.append(payload)
        blocks = [model.bases] if cfg.decompose_kernels else []
        blocks.append(model.decoder)
        for block in blocks:
            parts.append(_AFFINE.pack(block.min, block.max))
            parts.append(np.asarray(block.codes, dtype="<u2").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if size < 0 or self.pos + size > len(self.data):
            raise FormatError(f"truncated file: {what} needs {size} bytes at offset {self.pos}, "
                              f"{len(self.data) - self.pos} left")
        out = self.data[self.pos : self.pos + size]
        self.pos += size
        return out


def read_header(data: bytes) -> tuple[NetworkConfig, bool]:
    """Decode the header into a configuration and the raw flag."""
    if len(data) < HEADER_SIZE:
        raise FormatError(f"truncated file: header needs {HEADER_SIZE} bytes, got {len(data)}")
    (magic, version, X, Y, U, V, c_m, c_d, r, n, act, flags, prng, seed) = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, this decoder reads {VERSION}")
    if prng != PRNG_PCG64:
        raise FormatError(f"unknown noise generator id {prng}")
    names = {v: k for k, v in _ACTIVATION_IDS.items()}
    if act not in names:
        raise FormatError(f"unknown output activation id {act}")
    if flags & ~(FLAG_ALLOCATE | FLAG_DECOMPOSE | FLAG_RAW | FLAG_DECODER3):
        raise FormatError(f"unknown flag bits in {flags:#04x}")
    try:
        cfg = NetworkConfig(
            X=X, Y=Y, U=U, V=V, c_m=c_m, c_d=c_d, r=r, n=n,
            output_activation=names[act],
            allocate_modulators=bool(flags & FLAG_ALLOCATE),
            decompose_kernels=bool(flags & FLAG_DECOMPOSE),
            decoder_kernel=3 if flags & FLAG_DECODER3 else 1,
            seed=seed,
        )
    except ValueError as exc:
        raise FormatError(f"invalid header: {exc}") from exc
    return cfg, bool(flags & FLAG_RAW)


def deserialize(data: bytes) -> QuantizedModel | RawModel:
    """Inverse of :func:`serialize`; raises :class:`FormatError` on any defect."""
    data = bytes(data)
    cfg, raw = read_header(data)
    if len(data) < HEADER_SIZE + 4:
        raise FormatError("truncated file: missing checksum")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    reader = _Reader(body)
    reader.pos = HEADER_SIZE
    shapes = param_shapes(cfg)

    if raw:
        params = {}
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            arr = np.frombuffer(reader.take(4 * size, name), dtype="<f4").reshape(shape)
            params[name] = arr.astype(np.float32)
        model: QuantizedModel | RawModel = RawModel(cfg, params)
    else:
        books = []
        for i in range(1, NUM_LAYERS + 1):
            centroids = np.frombuffer(reader.take(4 * cfg.n, f"layer {i} codebook"), dtype="<f4").astype(np.float32)
            lengths = np.frombuffer(reader.take(cfg.n, f"layer {i} code lengths"), dtype=np.uint8)
            (nbits,) = struct.unpack("<I", reader.take(4, f"layer {i} bit count"))
            payload = reader.take((nbits + 7) // 8, f"layer {i} index stream")
            try:
                table = HuffmanTable(lengths)
                indices = table.decode(payload, nbits, _layer_sizes(cfg, i))
            except HuffmanError as exc:
                raise FormatError(f"layer {i}: {exc}") from exc
            if indices.size and indices.max() >= cfg.n:
                raise FormatError(f"layer {i}: index {indices.max()} >= n={cfg.n}")
            books.append(Codebook(centroids, indices))
        bases = None
        if cfg.decompose_kernels:
            bases = _read_affine(reader, int(np.prod(shapes["bases"])), "bases")
        dec_size = int(np.prod(shapes["dec.kernel"])) + int(np.prod(shapes["dec.bias"]))
        decoder = _read_affine(reader, dec_size, "decoder")
        model = QuantizedModel(cfg, books, bases, decoder)

    if reader.pos != len(body):
        raise FormatError(f"{len(body) - reader.pos} unexpected trailing bytes")
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch: file is corrupted")
    return model


def _read_affine(reader: _Reader, count: int, what: str) -> AffineQuant16:
    lo, hi = _AFFINE.unpack(reader.take(_AFFINE.size, f"{what} range"))
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
        raise FormatError(f"{what}: invalid range [{lo}, {hi}]")
    codes = np.frombuffer(reader.take(2 * count, f"{what} codes"), dtype="<u2").astype(np.uint16)
    return AffineQuant16(lo, hi, codes)


def compute_bpp(data, X: int, Y: int, U: int, V: int) -> float:
    """Bits per pixel of a file: every byte counts, header and tables included."""
    size = data if isinstance(data, int) else len(data)
    return 8.0 * size / (X * Y * U * V)
