"""Image-side array operations and carriers.

Images are (C, H, W) float arrays. Cover and stego pixels live in [0, 1];
residuals are unconstrained. Patch layout is fixed: patch k = r*(W/P) + c
covers rows [r*P, (r+1)*P) and cols [c*P, (c+1)*P); inside a patch the
d_patch = C*P*P values are ordered channel-major, then row-major. The
patchify/reshape pair is a bit-exact bijection under this layout.

All array ops accept either numpy arrays or torch tensors so the same code
serves the differentiable training path and the numpy evaluation path.

Stego images persist either as 8-bit PNG (quantized mode) or as a raw
little-endian float container (lossless float mode): a 32-byte header of
magic ``SLMFIMG1``, uint32 C, H, W, a uint32 dtype tag (1 = float32,
2 = float64), 8 reserved zero bytes, then C*H*W values in (C, H, W)
row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import Geometry

FLOAT_MAGIC = b"SLMFIMG1"
_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class GeometryError(ValueError):
    """Array shape inconsistent with the declared geometry."""


def _permute(x, axes):
    if isinstance(x, np.ndarray):
        return np.transpose(x, axes)
    return x.permute(*axes)


def patchify(img, patch: int):
    """Split a (C, H, W) image into an (N, d_patch) grid.

    Exact inverse of reshape_to_image for any valid geometry.
    """
    if patch <= 0:
        raise GeometryError(f"patch size must be positive, got {patch}")
    if img.ndim != 3:
        raise GeometryError(f"expected (C, H, W) image, got shape {tuple(img.shape)}")
    c, h, w = img.shape
    if h % patch or w % patch:
        raise GeometryError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = img.reshape(c, gh, patch, gw, patch)
    x = _permute(x, (1, 3, 0, 2, 4))  # (gh, gw, C, P, P)
    return x.reshape(gh * gw, c * patch * patch)


def reshape_to_image(p, geometry: Geometry):
    """Place an (N, d_patch) grid back into a (C, H, W) residual image."""
    n, d = p.shape
    if n != geometry.n_patches or d != geometry.d_patch:
        raise GeometryError(
            f"patch grid {n}x{d} does not match geometry "
            f"(N={geometry.n_patches}, d_patch={geometry.d_patch})"
        )
    c, patch = geometry.channels, geometry.patch
    gh = geometry.height // patch
    gw = geometry.width // patch
    x = p.reshape(gh, gw, c, patch, patch)
    x = _permute(x, (2, 0, 3, 1, 4))  # (C, gh, P, gw, P)
    return x.reshape(c, geometry.height, geometry.width)


def insert(cover, residual, clamp: str = "hard"):
    """Additive insertion: stego = cover + residual.

    clamp="hard" clips to [0, 1] (gradient flows inside the range and is
    zero outside, which is what Stage-2 training uses); clamp="none"
    returns the raw sum for analysis and training diagnostics.
    """
    if tuple(cover.shape) != tuple(residual.shape):
        raise GeometryError(
            f"cover {tuple(cover.shape)} and residual {tuple(residual.shape)} shapes differ"
        )
    stego = cover + residual
    if clamp == "none":
        return stego
    if clamp == "hard":
        if isinstance(stego, np.ndarray):
            return np.clip(stego, 0.0, 1.0)
        return torch.clamp(stego, 0.0, 1.0)
    raise ValueError(f"unknown clamp policy {clamp!r}")


def quantize(img, bits: int = 8):
    """Snap pixels to the 2**bits - 1 uniform grid on [0, 1].

    Out-of-range input is an error; clamp first.
    """
    if bits < 1:
        raise ValueError(f"bits must be >= 1, got {bits}")
    levels = (1 << bits) - 1
    if isinstance(img, torch.Tensor):
        if img.min() < 0 or img.max() > 1:
            raise ValueError("quantize requires pixels in [0, 1]; clamp first")
        return torch.round(img * levels) / levels
    arr = np.asarray(img)
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("quantize requires pixels in [0, 1]; clamp first")
    return np.round(arr * levels) / levels


def save_float_image(path: str | Path, img: np.ndarray) -> None:
    """Write the raw float container described in the module docstring."""
    arr = np.asarray(img)
    if arr.ndim != 3:
        raise GeometryError(f"expected (C, H, W) image, got shape {arr.shape}")
    if arr.dtype == np.float64:
        tag, dtype = 2, _DTYPE_TAGS[2]
    else:
        tag, dtype = 1, _DTYPE_TAGS[1]
    c, h, w = arr.shape
    header = struct.pack("<8sIIII8x", FLOAT_MAGIC, c, h, w, tag)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_float_image(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(32)
        if len(header) != 32:
            raise ValueError(f"{path}: truncated float-image header")
        magic, c, h, w, tag = struct.unpack("<8sIIII8x", header)
        if magic != FLOAT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if tag not in _DTYPE_TAGS:
            raise ValueError(f"{path}: unknown dtype tag {tag}")
        dtype = _DTYPE_TAGS[tag]
        data = f.read(c * h * w * dtype.itemsize)
    arr = np.frombuffer(data, dtype=dtype).reshape(c, h, w)
    return arr.astype(np.float64 if tag == 2 else np.float32)


def save_png(path: str | Path, img: np.ndarray) -> None:
    """Write a [0, 1] image as 8-bit PNG (quantizing to the 255 grid)."""
    arr = quantize(np.asarray(img, dtype=np.float64), 8)
    u8 = np.round(arr * 255).astype(np.uint8)
    if u8.shape[0] == 1:
        pil = Image.fromarray(u8[0], mode="L")
    elif u8.shape[0] == 3:
        pil = Image.fromarray(np.transpose(u8, (1, 2, 0)), mode="RGB")
    else:
        raise GeometryError(f"PNG supports 1 or 3 channels, got {u8.shape[0]}")
    pil.save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    pil = Image.open(path)
    arr = np.asarray(pil, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return arr[None, :, :]
    return np.transpose(arr, (2, 0, 1))


def load_image(path: str | Path) -> np.ndarray:
    """Dispatch on suffix: .fimg is the float container, anything else PIL."""
    p = Path(path)
    if p.suffix == ".fimg":
        return load_float_image(p)
    return load_png(p)
