"""Scalable image compression over bit-planes with gated cross-branch units."""

from .bitplane import BitPlaneStack, decompose, reconstruct
from .codec import BranchCodes, CodecConfig, CodecModel, LevelReconstruction, basic_bitrate
from .container import read_container, truncate_to_level, write_container
from .entropy import entropy_decode, entropy_encode
from .tensor import Tensor

__all__ = [
    "BitPlaneStack",
    "BranchCodes",
    "CodecConfig",
    "CodecModel",
    "LevelReconstruction",
    "Tensor",
    "basic_bitrate",
    "decompose",
    "entropy_decode",
    "entropy_encode",
    "read_container",
    "reconstruct",
    "truncate_to_level",
    "write_container",
]
