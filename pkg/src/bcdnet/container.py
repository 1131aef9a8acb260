"""Progressive ``.bcd`` container: header followed by one coded segment per branch.

Layout (little-endian)::

    "BCD1" | version u8 | height u16 | width u16 | pad_h u8 | pad_w u8 |
    N u8 | B u8 | s u8 | reserved u8 | N x segment length u32 | segments

``height``/``width`` are the original image size; the coded size adds the
bottom/right padding. A segment length of 0 marks a branch removed by
truncation, so the file decodes only up to the last level whose segments
are all present.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import codec, entropy
from .codec import BranchCodes, CodecModel

MAGIC = b"BCD1"
VERSION = 1
_FIXED = struct.Struct("<4sBHHBBBBBB")
U16_MAX = 0xFFFF


class ContainerError(ValueError):
    pass


class LevelUnavailable(ContainerError):
    pass


def header_size(branches: int) -> int:
    return _FIXED.size + 4 * branches


@dataclass(frozen=True)
class ContainerHeader:
    height: int
    width: int
    pad_h: int
    pad_w: int
    branches: int
    code_channels: int
    spatial_factor: int
    lengths: tuple

    @property
    def size(self) -> int:
        return header_size(self.branches)

    @property
    def code_shape(self) -> tuple:
        s = self.spatial_factor
        return (1, self.code_channels, (self.height + self.pad_h) // s, (self.width + self.pad_w) // s)

    @property
    def available_levels(self) -> int:
        """Number of leading branches whose segments are present."""
        n = 0
        for length in self.lengths:
            if length == 0:
                break
            n += 1
        return n

    def segment_offsets(self) -> list[int]:
        offsets = [self.size]
        for length in self.lengths[:-1]:
            offsets.append(offsets[-1] + length)
        return offsets

    def pack(self) -> bytes:
        for name in ("height", "width"):
            if not 0 < getattr(self, name) <= U16_MAX:
                raise ContainerError(f"image {name} {getattr(self, name)} does not fit in 16 bits")
        for name in ("pad_h", "pad_w", "branches", "code_channels", "spatial_factor"):
            if not 0 <= getattr(self, name) <= 0xFF:
                raise ContainerError(f"{name} {getattr(self, name)} does not fit in 8 bits")
        if len(self.lengths) != self.branches:
            raise ContainerError(f"{len(self.lengths)} segment lengths for {self.branches} branches")
        fixed = _FIXED.pack(
            MAGIC,
            VERSION,
            self.height,
            self.width,
            self.pad_h,
            self.pad_w,
            self.branches,
            self.code_channels,
            self.spatial_factor,
            0,
        )
        return fixed + struct.pack(f"<{self.branches}I", *self.lengths)


def read_header(data: bytes) -> ContainerHeader:
    if len(data) < _FIXED.size:
        raise ContainerError(f"file too short for a container header ({len(data)} bytes)")
    magic, version, h, w, ph, pw, n, b, s, _ = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if len(data) < header_size(n):
        raise ContainerError("container header is truncated")
    if n == 0 or s == 0 or (h + ph) % s or (w + pw) % s:
        raise ContainerError("inconsistent container geometry")
    lengths = struct.unpack_from(f"<{n}I", data, _FIXED.size)
    return ContainerHeader(h, w, ph, pw, n, b, s, tuple(lengths))


def write_container(codes: BranchCodes, height: int, width: int, pad: tuple = (0, 0), spatial_factor: int = 16) -> bytes:
    """Serialize per-branch codes (each (1, B, h, w)) of an image of the given size."""
    n = codes.n_branches
    shape = codes.codes[0].shape
    if len(shape) != 4 or shape[0] != 1:
        raise ContainerError(f"container holds one image; code shape is {shape}")
    s = spatial_factor
    expected = (height + pad[0]) // s, (width + pad[1]) // s
    if (height + pad[0]) % s or (width + pad[1]) % s or tuple(shape[2:]) != expected:
        raise ContainerError(f"code grid {shape[2:]} does not match image {height}x{width} with pad {pad}")
    segments = [entropy.encode_segment(c, a) for c, a in zip(codes.codes, codes.active)]
    header = ContainerHeader(height, width, pad[0], pad[1], n, shape[1], s, tuple(len(x) for x in segments))
    return header.pack() + b"".join(segments)


def read_container(data: bytes, level: int | None = None) -> tuple[BranchCodes, ContainerHeader]:
    """Decode the codes of branches 1..level (all present branches by default).

    Only the header and the first ``level`` segments are read; branches
    beyond the level come back as zeros and inactive.
    """
    header = read_header(data)
    available = header.available_levels
    if level is None:
        level = available
        end = header.size + sum(header.lengths)
        if len(data) != end:
            raise ContainerError(f"container is {len(data)} bytes, header declares {end}")
    if not 1 <= level <= header.branches:
        raise ContainerError(f"level {level} outside 1..{header.branches}")
    if level > available:
        raise LevelUnavailable(f"level unavailable: file holds {available} of {header.branches} levels, {level} requested")
    shape = header.code_shape
    offsets = header.segment_offsets()
    codes, active = [], []
    for i in range(header.branches):
        if i < level:
            start, stop = offsets[i], offsets[i] + header.lengths[i]
            if len(data) < stop:
                raise ContainerError(f"segment {i + 1} is truncated")
            try:
                code, on = entropy.decode_segment(data[start:stop], shape)
            except entropy.DecodeError as exc:
                raise ContainerError(f"segment {i + 1}: {exc}") from None
        else:
            code, on = np.zeros(shape, dtype=np.float32), False
        codes.append(code)
        active.append(on)
    return BranchCodes(codes, tuple(active)), header


def truncate_to_level(data: bytes, level: int) -> bytes:
    header = read_header(data)
    if not 1 <= level <= header.branches:
        raise ContainerError(f"level {level} outside 1..{header.branches}")
    if level > header.available_levels:
        raise LevelUnavailable(f"level unavailable: file holds {header.available_levels} levels")
    lengths = header.lengths[:level] + (0,) * (header.branches - level)
    cut = ContainerHeader(**{**header.__dict__, "lengths": lengths})
    end = header.size + sum(lengths)
    if len(data) < end:
        raise ContainerError("container is truncated")
    return cut.pack() + data[header.size : end]


def measured_bpp(data: bytes, level: int | None = None, include_header: bool = False) -> float:
    """8 * coded bytes / original pixel count, over segments 1..level."""
    header = read_header(data)
    level = header.available_levels if level is None else level
    total = sum(header.lengths[:level])
    if include_header:
        total += header.size
    return 8.0 * total / (header.height * header.width)


# ---------------------------------------------------------------------------
# whole-image helpers
# ---------------------------------------------------------------------------


def encode_image(image: np.ndarray, model: CodecModel, switch_mask=None) -> bytes:
    """Pad, encode and serialize an (H, W, 3) uint8 image."""
    s = model.config.spatial_factor
    h, w = image.shape[:2]
    padded, pad = codec.pad_image(image, s)
    codes = codec.encode(padded, model, switch_mask)
    return write_container(codes, h, w, pad, s)


def check_model(header: ContainerHeader, model: CodecModel) -> None:
    config = model.config
    if (header.branches, header.code_channels, header.spatial_factor) != (
        config.branches,
        config.code_channels,
        config.spatial_factor,
    ):
        raise ContainerError(
            f"container (N={header.branches}, B={header.code_channels}, s={header.spatial_factor}) "
            f"does not match model (N={config.branches}, B={config.code_channels}, s={config.spatial_factor})"
        )


def decode_image(data: bytes, model: CodecModel, level: int) -> np.ndarray:
    """Reconstruction at ``level`` as an (H, W, 3) uint8 image with padding removed."""
    codes, header = read_container(data, level)
    check_model(header, model)
    rec = codec.decode(codes, model, level)
    return rec.pixels[: header.height, : header.width]
