"""Context-adaptive binary arithmetic coding of {-1, +1} code tensors.

A 32-bit integer range coder (low/high registers, pending-bit carry
handling) driven by adaptive zero/one counts. The context of a symbol is
its channel class (channel mod 4) together with the already coded left and
above neighbours; neighbours outside the tensor count as 0. Symbols are
scanned channel by channel in raster order, and -1 is coded as bit 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PRECISION = 32
TOP = (1 << PRECISION) - 1
HALF = 1 << (PRECISION - 1)
QUARTER = 1 << (PRECISION - 2)
THREE_QUARTERS = 3 * QUARTER
MAX_TOTAL = 1 << 16  # counts are halved once their sum exceeds this

CHANNEL_CLASSES = 4
SPATIAL_CONTEXTS = CHANNEL_CLASSES * 4
FLAG_CONTEXT = SPATIAL_CONTEXTS  # segment "branch active" flag
NUM_CONTEXTS = SPATIAL_CONTEXTS + 1


class DecodeError(ValueError):
    """Raised for truncated, padded or otherwise inconsistent streams."""


@dataclass
class ContextModel:
    """Adaptive (zeros, ones) counts per context, starting from add-one counts."""

    counts: np.ndarray = field(default_factory=lambda: np.ones((NUM_CONTEXTS, 2), dtype=np.int64))

    def __post_init__(self):
        self._c = [list(map(int, row)) for row in self.counts]

    def split(self, ctx: int) -> tuple[int, int]:
        c = self._c[ctx]
        return c[0], c[0] + c[1]

    def update(self, ctx: int, bit: int) -> None:
        c = self._c[ctx]
        c[bit] += 1
        if c[0] + c[1] > MAX_TOTAL:
            c[0] = (c[0] + 1) >> 1
            c[1] = (c[1] + 1) >> 1

    def table(self) -> np.ndarray:
        return np.array(self._c, dtype=np.int64)


class BinaryEncoder:
    def __init__(self):
        self.low = 0
        self.high = TOP
        self.pending = 0
        self.bits: list[int] = []
        self.model = ContextModel()

    def _emit(self, bit: int) -> None:
        self.bits.append(bit)
        if self.pending:
            self.bits.extend([1 - bit] * self.pending)
            self.pending = 0

    def encode(self, bit: int, ctx: int) -> None:
        zeros, total = self.model.split(ctx)
        span = self.high - self.low + 1
        mid = self.low + span * zeros // total - 1
        if bit:
            self.low = mid + 1
        else:
            self.high = mid
        self.model.update(ctx, bit)
        low, high = self.low, self.high
        while True:
            if high < HALF:
                self._emit(0)
            elif low >= HALF:
                self._emit(1)
                low -= HALF
                high -= HALF
            elif low >= QUARTER and high < THREE_QUARTERS:
                self.pending += 1
                low -= QUARTER
                high -= QUARTER
            else:
                break
            low = 2 * low
            high = 2 * high + 1
        self.low, self.high = low, high

    def finish(self) -> bytes:
        """Flush two bits that select a quarter inside the final interval."""
        self.pending += 1
        self._emit(0 if self.low < QUARTER else 1)
        return np.packbits(np.array(self.bits, dtype=np.uint8)).tobytes()


class BinaryDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.stream = np.unpackbits(np.frombuffer(self.data, dtype=np.uint8)).tolist()
        self.pos = 0
        self.low = 0
        self.high = TOP
        self.value = 0
        for _ in range(PRECISION):
            self.value = (self.value << 1) | self._next()
        self.pending = 0
        self.emitted = 0  # bits the matching encoder has written so far
        self.model = ContextModel()

    def _next(self) -> int:
        bit = self.stream[self.pos] if self.pos < len(self.stream) else 0
        self.pos += 1
        return bit

    def decode(self, ctx: int) -> int:
        zeros, total = self.model.split(ctx)
        span = self.high - self.low + 1
        mid = self.low + span * zeros // total - 1
        bit = 1 if self.value > mid else 0
        if bit:
            self.low = mid + 1
        else:
            self.high = mid
        self.model.update(ctx, bit)
        low, high, value = self.low, self.high, self.value
        while True:
            if high < HALF:
                self.emitted += 1 + self.pending
                self.pending = 0
            elif low >= HALF:
                self.emitted += 1 + self.pending
                self.pending = 0
                low -= HALF
                high -= HALF
                value -= HALF
            elif low >= QUARTER and high < THREE_QUARTERS:
                self.pending += 1
                low -= QUARTER
                high -= QUARTER
                value -= QUARTER
            else:
                break
            low = 2 * low
            high = 2 * high + 1
            value = 2 * value + self._next()
        self.low, self.high, self.value = low, high, value
        return bit

    def finish(self) -> None:
        """Check that the stream length is exactly what the encoder would flush."""
        bits = self.emitted + self.pending + 2
        expected = math.ceil(bits / 8)
        if len(self.data) < expected:
            raise DecodeError(f"stream truncated: {len(self.data)} bytes, expected {expected}")
        if len(self.data) > expected:
            raise DecodeError(f"stream has {len(self.data) - expected} trailing bytes past its end")
        if any(self.stream[bits : 8 * expected]):
            raise DecodeError("nonzero padding after the final flush")


# ---------------------------------------------------------------------------
# code tensors
# ---------------------------------------------------------------------------


def _as_planes(code: np.ndarray) -> np.ndarray:
    """View a code tensor as (planes, H, W); batch and channel axes are merged."""
    code = np.asarray(code)
    while code.ndim < 3:
        code = code[None]
    return code.reshape((int(np.prod(code.shape[:-2])),) + code.shape[-2:])


def code_bits(code: np.ndarray) -> np.ndarray:
    """Map {-1, +1} to {0, 1}; anything else is rejected."""
    code = np.asarray(code)
    if code.size and not np.all((code == -1) | (code == 1)):
        bad = code[(code != -1) & (code != 1)].ravel()[0]
        raise ValueError(f"code values must be -1 or +1, found {bad!r}")
    return (code > 0).astype(np.int64)


def contexts(bits: np.ndarray) -> np.ndarray:
    """Context id of every symbol of a (planes, H, W) bit array."""
    left = np.zeros_like(bits)
    above = np.zeros_like(bits)
    left[:, :, 1:] = bits[:, :, :-1]
    above[:, 1:, :] = bits[:, :-1, :]
    cls = (np.arange(bits.shape[0]) % CHANNEL_CLASSES)[:, None, None]
    return cls * 4 + left * 2 + above


def _encode_symbols(enc: BinaryEncoder, bits: np.ndarray) -> None:
    for bit, ctx in zip(bits.ravel().tolist(), contexts(bits).ravel().tolist()):
        enc.encode(bit, ctx)


def _decode_symbols(dec: BinaryDecoder, shape: tuple) -> np.ndarray:
    planes, h, w = shape
    out = np.zeros(shape, dtype=np.int64)
    if out.size == 0:
        return out
    for p in range(planes):
        cls = (p % CHANNEL_CLASSES) * 4
        prev = [0] * w
        for y in range(h):
            row = [0] * w
            left = 0
            for x in range(w):
                left = dec.decode(cls + left * 2 + prev[x])
                row[x] = left
            out[p, y] = row
            prev = row
    return out


def entropy_encode(code: np.ndarray) -> bytes:
    """Arithmetic-code a {-1, +1} tensor (last two axes spatial)."""
    bits = _as_planes(code_bits(code))
    enc = BinaryEncoder()
    _encode_symbols(enc, bits)
    return enc.finish()


def entropy_decode(data: bytes, shape) -> np.ndarray:
    """Inverse of :func:`entropy_encode`; returns a float32 {-1, +1} array."""
    shape = tuple(int(s) for s in shape)
    planes_shape = _as_planes(np.empty(shape, dtype=np.int8)).shape
    dec = BinaryDecoder(data)
    bits = _decode_symbols(dec, planes_shape)
    dec.finish()
    return (2 * bits - 1).astype(np.float32).reshape(shape)


def encode_segment(code: np.ndarray, active: bool = True) -> bytes:
    """Per-branch segment: an active flag, then the symbols if the branch is on.

    A switched-off branch codes only the flag and so has the minimal size.
    """
    enc = BinaryEncoder()
    enc.encode(int(active), FLAG_CONTEXT)
    if active:
        _encode_symbols(enc, _as_planes(code_bits(code)))
    return enc.finish()


def decode_segment(data: bytes, shape) -> tuple[np.ndarray, bool]:
    """Returns ``(code, active)``; inactive branches decode to zeros."""
    shape = tuple(int(s) for s in shape)
    dec = BinaryDecoder(data)
    active = bool(dec.decode(FLAG_CONTEXT))
    if active:
        planes_shape = _as_planes(np.empty(shape, dtype=np.int8)).shape
        code = (2 * _decode_symbols(dec, planes_shape) - 1).astype(np.float32).reshape(shape)
    else:
        code = np.zeros(shape, dtype=np.float32)
    dec.finish()
    return code, active


def minimal_segment_size() -> int:
    return len(encode_segment(np.zeros((0, 0, 0)), active=False))
