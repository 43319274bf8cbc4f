"""Face-region degradation operators for the conditional-deblurring proxy task.

Every operator is applied to the whole image and then composited back so that
pixels outside the face mask are untouched bit-for-bit. Strength conventions:
downsample:N pools to an NxN grid (smaller N = stronger), gaussian_blur:R uses
sigma = R/2 truncated at 3 sigma (larger R = stronger).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError

KINDS = ("masking", "downsample", "gaussian_blur", "none")


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    strength: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("downsample", "gaussian_blur") and self.strength < 1:
            raise ConfigError(f"{self.kind} requires strength >= 1, got {self.strength}")

    @classmethod
    def from_string(cls, text: str) -> "DegradationSpec":
        """Parse 'kind' or 'kind:strength', e.g. 'downsample:8'."""
        if ":" in text:
            kind, s = text.split(":", 1)
            try:
                strength = int(s)
            except ValueError:
                raise ConfigError(f"bad degradation strength in {text!r}")
            return cls(kind=kind.strip(), strength=strength)
        return cls(kind=text.strip())

    def to_string(self) -> str:
        if self.kind in ("downsample", "gaussian_blur"):
            return f"{self.kind}:{self.strength}"
        return self.kind


def downsample_upsample(image: np.ndarray, n: int) -> np.ndarray:
    """Box-average pool to an n x n grid, then nearest-neighbor upsample back."""
    if n < 1:
        raise InputError(f"grid size must be >= 1, got {n}")
    h, w = image.shape[:2]
    if h % n or w % n:
        raise InputError(f"image sides ({h}x{w}) not divisible by grid {n}")
    bh, bw = h // n, w // n
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        small = arr.reshape(n, bh, n, bw).mean(axis=(1, 3))
        out = np.repeat(np.repeat(small, bh, axis=0), bw, axis=1)
    else:
        small = arr.reshape(n, bh, n, bw, -1).mean(axis=(1, 3))
        out = np.repeat(np.repeat(small, bh, axis=0), bw, axis=1)
    return out.astype(image.dtype, copy=False)


def gaussian_kernel_1d(radius: int) -> np.ndarray:
    """Normalized 1-D Gaussian taps, sigma = radius/2, support |x| <= 3 sigma."""
    if radius < 1:
        raise InputError(f"blur radius must be >= 1, got {radius}")
    sigma = radius / 2.0
    half = max(1, int(np.floor(3.0 * sigma)))
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def gaussian_blur(image: np.ndarray, radius: int) -> np.ndarray:
    """Separable Gaussian blur with symmetric (reflect) border padding."""
    k = gaussian_kernel_1d(radius)
    half = (len(k) - 1) // 2
    arr = np.asarray(image, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]

    def conv_axis(data, axis):
        pad = [(0, 0)] * data.ndim
        pad[axis] = (half, half)
        padded = np.pad(data, pad, mode="symmetric")
        out = np.zeros_like(data)
        for i, wgt in enumerate(k):
            sl = [slice(None)] * data.ndim
            sl[axis] = slice(i, i + data.shape[axis])
            out += wgt * padded[tuple(sl)]
        return out

    arr = conv_axis(arr, 0)
    arr = conv_axis(arr, 1)
    if squeeze:
        arr = arr[:, :, 0]
    return arr.astype(image.dtype, copy=False)


def mask_fill(image: np.ndarray, face_mask: np.ndarray) -> np.ndarray:
    """Zero out pixels inside the mask, leave everything else untouched."""
    if face_mask.shape != image.shape[:2]:
        raise InputError(f"mask shape {face_mask.shape} != image spatial shape {image.shape[:2]}")
    out = np.array(image, copy=True)
    out[face_mask > 0] = 0
    return out


def degrade(image: np.ndarray, face_mask: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Apply spec's operator, composited so the background stays exact."""
    if face_mask.shape != image.shape[:2]:
        raise InputError(f"mask shape {face_mask.shape} != image spatial shape {image.shape[:2]}")
    if spec.kind == "none":
        return np.array(image, copy=True)
    if spec.kind == "masking":
        return mask_fill(image, face_mask)
    if spec.kind == "downsample":
        degraded = downsample_upsample(image, spec.strength)
    else:
        degraded = gaussian_blur(image, spec.strength)
    out = np.array(image, copy=True)
    sel = face_mask > 0
    out[sel] = degraded[sel]
    return out
