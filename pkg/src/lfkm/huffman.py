"""Canonical Huffman coding of integer symbol streams."""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

__all__ = ["HuffmanError", "HuffmanTable", "huffman_build"]

# decode through a lookup table up to this code length, bit by bit beyond it
TABLE_BITS = 20
_CHUNK = 1 << 16


class HuffmanError(ValueError):
    """Malformed code table or coded stream."""


def huffman_build(frequencies) -> "HuffmanTable":
    """Optimal prefix code lengths for the given symbol frequencies.

    Equal weights merge in order of the smallest symbol index in each
    subtree, which makes the lengths deterministic. A lone used symbol gets
    length 1. Unused symbols get length 0.
    """
    freqs = np.asarray(frequencies, dtype=np.int64).ravel()
    if freqs.size == 0 or np.any(freqs < 0):
        raise HuffmanError("frequencies must be a non-empty list of non-negative counts")
    used = np.flatnonzero(freqs)
    if used.size == 0:
        raise HuffmanError("empty alphabet: every frequency is zero")
    lengths = np.zeros(freqs.size, dtype=np.int64)
    if used.size == 1:
        lengths[used[0]] = 1
        return HuffmanTable(lengths)

    parent: list[int] = [-1] * used.size
    heap = [(int(freqs[s]), int(s), node) for node, s in enumerate(used)]
    heapq.heapify(heap)
    while len(heap) > 1:
        w1, key1, a = heapq.heappop(heap)
        w2, key2, b = heapq.heappop(heap)
        node = len(parent)
        parent.append(-1)
        parent[a] = node
        parent[b] = node
        heapq.heappush(heap, (w1 + w2, min(key1, key2), node))

    depth = [0] * len(parent)
    for node in range(len(parent) - 2, -1, -1):
        depth[node] = depth[parent[node]] + 1
    for node, s in enumerate(used):
        lengths[s] = depth[node]
    return HuffmanTable(lengths)


@dataclass
class HuffmanTable:
    """Per-symbol code lengths; codes are rebuilt canonically.

    Codes are assigned in order of (length, symbol index), each one the
    previous code plus one, shifted left whenever the length grows.
    """

    lengths: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64).ravel()
        if self.lengths.size == 0 or np.any(self.lengths < 0):
            raise HuffmanError("code lengths must be non-negative")
        if not np.any(self.lengths):
            raise HuffmanError("code table has no symbols")
        if self.lengths.max() > 63:
            raise HuffmanError("code lengths above 63 bits are not supported")
        if self.kraft() > 1.0:
            raise HuffmanError(f"code lengths violate the Kraft inequality (sum {self.kraft():.6f})")
        self.codes = self._canonical_codes()

    @property
    def n(self) -> int:
        return self.lengths.size

    @property
    def max_length(self) -> int:
        return int(self.lengths.max())

    def kraft(self) -> float:
        used = self.lengths[self.lengths > 0]
        return float(np.sum(np.ldexp(1.0, -used)))

    def _canonical_codes(self) -> np.ndarray:
        codes = np.zeros(self.n, dtype=np.uint64)
        order = sorted((int(L), s) for s, L in enumerate(self.lengths) if L > 0)
        code, prev = 0, order[0][0]
        for length, s in order:
            code <<= length - prev
            codes[s] = code
            code += 1
            prev = length
        return codes

    def coded_bits(self, symbols) -> int:
        return int(self.lengths[np.asarray(symbols, dtype=np.int64)].sum())

    def encode(self, symbols) -> tuple[bytes, int]:
        """Pack ``symbols`` MSB-first; returns the bytes and the exact bit count."""
        syms = np.asarray(symbols, dtype=np.int64).ravel()
        if syms.size == 0:
            return b"", 0
        if syms.min() < 0 or syms.max() >= self.n or np.any(self.lengths[syms] == 0):
            raise HuffmanError("stream contains symbols without a code")
        width = self.max_length
        cols = np.arange(width)
        pieces = []
        for start in range(0, syms.size, _CHUNK):
            chunk = syms[start : start + _CHUNK]
            lens = self.lengths[chunk]
            shift = lens[:, None] - 1 - cols[None, :]
            valid = shift >= 0
            bits = (self.codes[chunk][:, None] >> np.where(valid, shift, 0).astype(np.uint64)) & np.uint64(1)
            pieces.append(bits[valid].astype(np.uint8))
        flat = np.concatenate(pieces)
        return np.packbits(flat).tobytes(), int(flat.size)

    def decode(self, data: bytes, nbits: int, count: int) -> np.ndarray:
        """Decode exactly ``count`` symbols that must use exactly ``nbits`` bits."""
        if nbits < 0 or nbits > 8 * len(data):
            raise HuffmanError(f"stream claims {nbits} bits but holds {8 * len(data)}")
        if count == 0:
            if nbits:
                raise HuffmanError("non-empty bit stream for an empty symbol stream")
            return np.zeros(0, dtype=np.int64)
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:nbits]
        if self.max_length <= TABLE_BITS:
            return self._decode_table(bits, count)
        return self._decode_slow(bits, count)

    def _lookup(self) -> tuple[np.ndarray, np.ndarray]:
        width = self.max_length
        sym_of = np.zeros(1 << width, dtype=np.int64)
        len_of = np.zeros(1 << width, dtype=np.uint8)
        for s in np.flatnonzero(self.lengths):
            L = int(self.lengths[s])
            lo = int(self.codes[s]) << (width - L)
            hi = (int(self.codes[s]) + 1) << (width - L)
            sym_of[lo:hi] = s
            len_of[lo:hi] = L
        return sym_of, len_of

    def _decode_table(self, bits: np.ndarray, count: int) -> np.ndarray:
        width = self.max_length
        nbits = bits.size
        padded = np.concatenate([bits, np.zeros(width, dtype=np.uint8)]).astype(np.int64)
        window = np.zeros(nbits, dtype=np.int64)
        for j in range(width):
            window = (window << 1) | padded[j : j + nbits]
        sym_of, len_of = self._lookup()
        step = len_of[window].tobytes()
        positions = [0] * count
        pos = 0
        for k in range(count):
            if pos >= nbits:
                raise HuffmanError(f"stream ended after {k} of {count} symbols")
            L = step[pos]
            if L == 0:
                raise HuffmanError(f"invalid code at bit {pos}")
            positions[k] = pos
            pos += L
        if pos != nbits:
            raise HuffmanError(f"decoded {count} symbols using {pos} bits, stream has {nbits}")
        return sym_of[window[np.asarray(positions)]]

    def _decode_slow(self, bits: np.ndarray, count: int) -> np.ndarray:
        lookup = {(int(self.lengths[s]), int(self.codes[s])): int(s) for s in np.flatnonzero(self.lengths)}
        out = np.empty(count, dtype=np.int64)
        pos, nbits = 0, bits.size
        for k in range(count):
            code, L = 0, 0
            while True:
                if pos >= nbits or L >= self.max_length:
                    raise HuffmanError(f"invalid or truncated code for symbol {k}")
                code = (code << 1) | int(bits[pos])
                pos += 1
                L += 1
                s = lookup.get((L, code))
                if s is not None:
                    out[k] = s
                    break
        if pos != nbits:
            raise HuffmanError(f"decoded {count} symbols using {pos} bits, stream has {nbits}")
        return out
