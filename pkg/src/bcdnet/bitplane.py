"""Bit-plane decomposition of 8-bit RGB images and order-0 entropy estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BIT_DEPTH = 8


def validate_image(image: np.ndarray) -> np.ndarray:
    """Return ``image`` as a (height, width, 3) uint8 array or raise ValueError."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an RGB image of shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"image dimensions must be positive, got {arr.shape[:2]}")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr)):
            raise ValueError("pixel values must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


@dataclass(frozen=True)
class BitPlaneStack:
    """Binary planes indexed as ``planes[channel, level - 1, h, w]``.

    Level 1 is the most significant bit. Channels are ordered R, G, B.
    """

    planes: np.ndarray
    depth: int = BIT_DEPTH

    @property
    def height(self) -> int:
        return self.planes.shape[2]

    @property
    def width(self) -> int:
        return self.planes.shape[3]

    def plane(self, channel: int, level: int) -> np.ndarray:
        return self.planes[channel, level - 1]

    def level(self, level: int) -> np.ndarray:
        """The (3, H, W) stack of R, G, B planes at one significance level."""
        return self.planes[:, level - 1]


def decompose(image: np.ndarray, depth: int = BIT_DEPTH) -> BitPlaneStack:
    img = validate_image(image).astype(np.int64)
    chw = img.transpose(2, 0, 1)
    planes = np.empty((3, depth) + chw.shape[1:], dtype=np.uint8)
    for level in range(1, depth + 1):
        planes[:, level - 1] = (chw // 2 ** (depth - level)) % 2
    return BitPlaneStack(planes, depth)


def reconstruct(stack: BitPlaneStack) -> np.ndarray:
    planes = np.asarray(stack.planes)
    if np.any((planes != 0) & (planes != 1)):
        raise ValueError("bit-plane values must be 0 or 1")
    depth = stack.depth
    weights = 2 ** (depth - np.arange(1, depth + 1, dtype=np.int64))
    chw = np.tensordot(weights, planes.astype(np.int64), axes=([0], [1]))
    return chw.transpose(1, 2, 0).astype(np.uint8)


def _binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return float(-p * np.log2(p) - (1.0 - p) * np.log2(1.0 - p))


def plane_entropy(plane: np.ndarray) -> float:
    """Order-0 empirical entropy of a binary plane, in bits per symbol."""
    plane = np.asarray(plane)
    if plane.size == 0:
        return 0.0
    if np.any((plane != 0) & (plane != 1)):
        raise ValueError("plane values must be 0 or 1")
    return _binary_entropy(float(np.count_nonzero(plane)) / plane.size)


def channel_entropy(channel: np.ndarray) -> float:
    """Order-0 entropy of one channel's 256-bin histogram."""
    counts = np.bincount(np.asarray(channel, dtype=np.uint8).reshape(-1), minlength=256)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def image_entropy(image: np.ndarray) -> float:
    """Per-channel order-0 pixel entropy averaged over R, G, B."""
    img = validate_image(image)
    return float(np.mean([channel_entropy(img[:, :, c]) for c in range(3)]))


def entropy_report(image: np.ndarray) -> dict:
    """Per-channel plane entropies, their sums and the pixel entropy."""
    img = validate_image(image)
    stack = decompose(img)
    report = {"channels": []}
    for c, label in enumerate("RGB"):
        planes = [plane_entropy(stack.plane(c, level)) for level in range(1, stack.depth + 1)]
        pixel = channel_entropy(img[:, :, c])
        report["channels"].append(
            {
                "channel": label,
                "plane_entropies": planes,
                "plane_sum": float(sum(planes)),
                "image_entropy": pixel,
                "sum_exceeds": float(sum(planes)) >= pixel,
            }
        )
    report["holds"] = all(ch["sum_exceeds"] for ch in report["channels"])
    return report
