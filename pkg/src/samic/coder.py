"""Range coder, frequency tables and the bitstream container.

The coder is a 64-bit carry-less range coder: a byte is shifted out
only once the top byte of low and low+range agree, and when the range
drops below the renormalisation floor while the top byte is still
unsettled, the range is clipped to the next byte boundary. Cumulative
frequencies live on a fixed 16-bit total so encoder and decoder tables
match exactly. Each section ends with a 16-bit sentinel coded through
the bypass path; a decoder that drifted off the encoder's tables will
miss it, which is the corruption/table-mismatch detector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special as _sp

TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS
MASK64 = (1 << 64) - 1
TOP = 1 << 56
BOT = 1 << 48
SENTINEL = 0x5A3C
SENTINEL_BITS = 16
ESCAPE_RAW_BITS = 32
DEFAULT_CLIP = 64

MAGIC = b"SAMC"
HEADER_FMT = "<4sBHHBBB"          # magic, version, width, height, lambda, K, J
VERSION = 1


class CoderError(Exception):
    pass


class CorruptStreamError(CoderError):
    pass


class FrequencyTable:
    """Cumulative counts over the clipped alphabet [-B, B] plus an escape slot.

    Counts are strictly positive and sum to exactly 2**16. Symbol index
    i maps to value i - B; the final slot is the escape used for
    out-of-range values, which are then sent as raw 32-bit zigzag bits.
    """

    __slots__ = ("clip", "counts", "cum")

    def __init__(self, counts: np.ndarray, clip: int):
        counts = np.asarray(counts, dtype=np.int64)
        if clip < 1:
            raise CoderError("alphabet clip must be >= 1")
        if counts.shape[0] != 2 * clip + 2:
            raise CoderError("count vector does not match the alphabet")
        if counts.min() < 1 or counts.sum() != TOTAL:
            raise CoderError("counts must be >= 1 and sum to the 16-bit total")
        self.clip = clip
        self.counts = counts
        self.cum = np.concatenate([[0], np.cumsum(counts)])

    @property
    def num_symbols(self) -> int:
        return self.counts.shape[0]

    @property
    def escape_index(self) -> int:
        return self.counts.shape[0] - 1

    def index_of(self, value: int) -> int:
        if -self.clip <= value <= self.clip:
            return value + self.clip
        return self.escape_index

    def value_of(self, index: int) -> int:
        return index - self.clip

    def bits(self, index: int) -> float:
        return float(TOTAL_BITS - np.log2(self.counts[index]))

    @staticmethod
    def from_pmf(pmf: np.ndarray, clip: int) -> "FrequencyTable":
        """Quantise a pmf over [-B..B]+escape to integer counts.

        Largest-remainder apportionment on top of a guaranteed count of
        one per slot keeps every symbol codable.
        """
        return FrequencyTable.batch_from_pmf(np.asarray(pmf)[None, :], clip)[0]

    @staticmethod
    def from_gaussian(mu: float, sigma: float, clip: int = DEFAULT_CLIP
                      ) -> "FrequencyTable":
        """Discretised Gaussian: CDF differences on integer bins."""
        return gaussian_tables(np.array([mu]), np.array([sigma]), clip)[0]

    @staticmethod
    def batch_from_pmf(pmfs: np.ndarray, clip: int) -> list["FrequencyTable"]:
        """Row-wise pmf quantisation; one table per row, all exact-total."""
        pmfs = np.maximum(np.asarray(pmfs, dtype=np.float64), 0.0)
        m, slots = pmfs.shape
        if slots != 2 * clip + 2:
            raise CoderError("pmf width does not match the alphabet")
        sums = pmfs.sum(axis=1, keepdims=True)
        flat = sums[:, 0] <= 0
        pmfs = np.where(flat[:, None], 1.0 / slots, pmfs / np.where(sums > 0, sums, 1.0))
        budget = TOTAL - slots
        raw = pmfs * budget
        counts = np.floor(raw).astype(np.int64) + 1
        short = TOTAL - counts.sum(axis=1)
        order = np.argsort(-(raw - np.floor(raw)), axis=1)
        for row in range(m):
            k = int(short[row])
            if k > 0:
                counts[row, order[row, :k]] += 1
        return [FrequencyTable(counts[row], clip) for row in range(m)]


def gaussian_tables(mu: np.ndarray, sigma: np.ndarray,
                    clip: int = DEFAULT_CLIP) -> list[FrequencyTable]:
    """Vectorised table construction for many (mu, sigma) pairs at once."""
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if np.any(sigma <= 0):
        raise CoderError("sigma must be positive")
    ks = np.arange(-clip, clip + 1, dtype=np.float64)
    upper = _norm_cdf((ks[None, :] + 0.5 - mu[:, None]) / sigma[:, None])
    lower = _norm_cdf((ks[None, :] - 0.5 - mu[:, None]) / sigma[:, None])
    pmf = np.empty((mu.size, 2 * clip + 2))
    pmf[:, :-1] = upper - lower
    pmf[:, -1] = np.maximum(1.0 - (upper[:, -1] - lower[:, 0]), 0.0)
    return FrequencyTable.batch_from_pmf(pmf, clip)


def _norm_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + _sp.erf(x / np.sqrt(2.0)))


def zigzag(value: int) -> int:
    return 2 * value if value >= 0 else -2 * value - 1


def unzigzag(code: int) -> int:
    return code // 2 if code % 2 == 0 else -(code + 1) // 2


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range_ = MASK64
        self.out = bytearray()
        self.finished = False

    def _renorm(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range_)) < TOP:
                pass                                   # top byte settled
            elif self.range_ < BOT:
                self.range_ = (-self.low) & (BOT - 1)  # clip to byte boundary
            else:
                break
            self.out.append((self.low >> 56) & 0xFF)
            self.low = (self.low << 8) & MASK64
            self.range_ <<= 8

    def encode_index(self, table: FrequencyTable, index: int) -> None:
        r = self.range_ >> TOTAL_BITS
        self.low = (self.low + int(table.cum[index]) * r) & MASK64
        self.range_ = int(table.counts[index]) * r
        self._renorm()

    def encode_bits(self, value: int, nbits: int) -> None:
        for shift in range(nbits - 1, -1, -1):
            self.range_ >>= 1
            if (value >> shift) & 1:
                self.low = (self.low + self.range_) & MASK64
            self._renorm()

    def encode_value(self, table: FrequencyTable, value: int) -> None:
        index = table.index_of(value)
        self.encode_index(table, index)
        if index == table.escape_index:
            self.encode_bits(zigzag(value), ESCAPE_RAW_BITS)

    def finish(self) -> bytes:
        """Seal with the sentinel, then emit the fewest bytes that pin a
        code value inside [low, low+range); trailing zero bytes are
        implied and never written."""
        if self.finished:
            raise CoderError("encoder already finished")
        self.finished = True
        self.encode_bits(SENTINEL, SENTINEL_BITS)
        for nbytes in range(9):
            shift = 64 - 8 * nbytes
            if nbytes == 0:
                v = 0
            else:
                step = 1 << shift if shift < 64 else None
                if step is None:
                    v = self.low
                else:
                    v = ((self.low + step - 1) >> shift) << shift
            if self.low <= v < self.low + self.range_ and v <= MASK64:
                for k in range(nbytes):
                    self.out.append((v >> (56 - 8 * k)) & 0xFF)
                return bytes(self.out)
        raise CoderError("flush failed")            # unreachable: range >= BOT


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range_ = MASK64
        self.code = 0
        for _ in range(8):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
            self.pos += 1
            return b
        return 0                                    # implied trailing zeros

    def _renorm(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range_)) < TOP:
                pass
            elif self.range_ < BOT:
                self.range_ = (-self.low) & (BOT - 1)
            else:
                break
            self.low = (self.low << 8) & MASK64
            self.range_ <<= 8
            self.code = ((self.code << 8) | self._next_byte()) & MASK64

    def decode_index(self, table: FrequencyTable) -> int:
        r = self.range_ >> TOTAL_BITS
        dv = (self.code - self.low) // r
        if dv >= TOTAL:
            raise CorruptStreamError("decoded frequency outside the table total")
        index = int(np.searchsorted(table.cum, dv, side="right")) - 1
        self.low = (self.low + int(table.cum[index]) * r) & MASK64
        self.range_ = int(table.counts[index]) * r
        self._renorm()
        return index

    def decode_bits(self, nbits: int) -> int:
        value = 0
        for _ in range(nbits):
            self.range_ >>= 1
            bit = 1 if (self.code - self.low) >= self.range_ else 0
            if bit:
                self.low = (self.low + self.range_) & MASK64
            self._renorm()
            value = (value << 1) | bit
        return value

    def decode_value(self, table: FrequencyTable) -> int:
        index = self.decode_index(table)
        if index == table.escape_index:
            return unzigzag(self.decode_bits(ESCAPE_RAW_BITS))
        return table.value_of(index)

    def verify_sentinel(self) -> None:
        if self.decode_bits(SENTINEL_BITS) != SENTINEL:
            raise CorruptStreamError("end-of-stream sentinel mismatch")


def rc_encode(symbols: Sequence[int], tables: Sequence[FrequencyTable]) -> bytes:
    """Encode integer symbols, one table per symbol, into a sealed payload."""
    if len(symbols) != len(tables):
        raise CoderError("one table per symbol is required")
    enc = RangeEncoder()
    for value, table in zip(symbols, tables):
        enc.encode_value(table, int(value))
    return enc.finish()


def rc_decode(data: bytes, tables: Sequence[FrequencyTable]) -> list[int]:
    """Inverse of rc_encode given the identical table sequence."""
    dec = RangeDecoder(data)
    out = [dec.decode_value(table) for table in tables]
    dec.verify_sentinel()
    return out


@dataclass
class Bitstream:
    """On-disk container: fixed header, then the two coded sections."""
    width: int
    height: int
    lambda_index: int
    clusters: int
    chunks: int
    z_payload: bytes
    y_payload: bytes
    version: int = VERSION

    def pack(self) -> bytes:
        if not (0 < self.width <= 0xFFFF and 0 < self.height <= 0xFFFF):
            raise CoderError("image dimensions exceed the 16-bit header fields")
        head = struct.pack(HEADER_FMT, MAGIC, self.version, self.width,
                           self.height, self.lambda_index, self.clusters,
                           self.chunks)
        return (head
                + struct.pack("<I", len(self.z_payload)) + self.z_payload
                + struct.pack("<I", len(self.y_payload)) + self.y_payload)

    @staticmethod
    def unpack(blob: bytes) -> "Bitstream":
        head_size = struct.calcsize(HEADER_FMT)
        if len(blob) < head_size + 8:
            raise CorruptStreamError("stream shorter than its header")
        magic, version, width, height, lam, k, j = struct.unpack_from(
            HEADER_FMT, blob)
        if magic != MAGIC:
            raise CorruptStreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CorruptStreamError(f"unsupported version {version}")
        off = head_size
        z_len, = struct.unpack_from("<I", blob, off)
        off += 4
        if off + z_len + 4 > len(blob):
            raise CorruptStreamError("hyper-latent section overruns the stream")
        z_payload = blob[off:off + z_len]
        off += z_len
        y_len, = struct.unpack_from("<I", blob, off)
        off += 4
        if off + y_len != len(blob):
            raise CorruptStreamError("latent section length mismatch")
        y_payload = blob[off:off + y_len]
        return Bitstream(width=width, height=height, lambda_index=lam,
                         clusters=k, chunks=j, z_payload=z_payload,
                         y_payload=y_payload, version=version)
