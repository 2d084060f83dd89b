"""Classical bit-level baseline: blind DWT-DCT watermarking with QIM.

One bit per 8x8 block of the level-1 Haar approximation band: the block's
DCT is taken and one fixed mid-band coefficient is snapped to the nearest
quantizer cell whose index parity equals the bit. Extraction re-reads the
parity blindly, without the cover. Channels fill in order, blocks in
row-major order, so capacity is channels * (H/2/8) * (W/2/8) bits; at
3x256x256 that is 768.

Text payloads are framed as a 16-bit big-endian bit-length header followed
by the UTF-8 bytes, most significant bit first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

BLOCK = 8
DEFAULT_COEF = (2, 3)  # mid-band position inside the 8x8 DCT block
DEFAULT_STEP = 0.08


class CapacityError(ValueError):
    """Payload larger than the usable coefficient slots."""


@dataclass(frozen=True)
class BitPayload:
    bits: tuple[int, ...]
    origin_text: str | None = None
    valid: bool = True

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("payload bits must be 0/1")

    def __len__(self) -> int:
        return len(self.bits)


def _bytes_to_bits(data: bytes) -> list[int]:
    out = []
    for byte in data:
        for k in range(7, -1, -1):
            out.append((byte >> k) & 1)
    return out


def _bits_to_bytes(bits) -> bytes:
    if len(bits) % 8:
        raise ValueError("bit count must be a multiple of 8")
    out = bytearray()
    for i in range(0, len(bits), 8):
        byte = 0
        for b in bits[i : i + 8]:
            byte = (byte << 1) | int(b)
        out.append(byte)
    return bytes(out)


def utf8_to_bits(text: str) -> BitPayload:
    """Frame text as header(16 bits, big-endian bit count) + UTF-8 bits."""
    body = text.encode("utf-8")
    nbits = 8 * len(body)
    if nbits > 0xFFFF:
        raise ValueError(f"text too long for the 16-bit header: {nbits} bits")
    header = [(nbits >> k) & 1 for k in range(15, -1, -1)]
    return BitPayload(bits=tuple(header + _bytes_to_bits(body)), origin_text=text)


def bits_to_utf8(payload: BitPayload) -> tuple[str, bool]:
    """Invert utf8_to_bits; invalid byte sequences decode with replacement
    characters and a False validity flag."""
    bits = payload.bits
    if len(bits) < 16:
        return "", False
    nbits = 0
    for b in bits[:16]:
        nbits = (nbits << 1) | b
    body = bits[16 : 16 + nbits]
    if len(body) < nbits or nbits % 8:
        return "", False
    raw = _bits_to_bytes(body)
    try:
        return raw.decode("utf-8"), True
    except UnicodeDecodeError:
        return raw.decode("utf-8", errors="replace"), False


def haar_dwt2(x: np.ndarray) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Level-1 orthonormal Haar transform of a 2D array with even sides."""
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a - b + c - d) / 2.0
    hl = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, (lh, hl, hh)


def haar_idwt2(ll, bands) -> np.ndarray:
    lh, hl, hh = bands
    h2, w2 = ll.shape
    out = np.empty((h2 * 2, w2 * 2), dtype=np.float64)
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2.0
    out[0::2, 1::2] = (ll - lh + hl - hh) / 2.0
    out[1::2, 0::2] = (ll + lh - hl - hh) / 2.0
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2.0
    return out


def capacity(shape: tuple[int, ...], block: int = BLOCK) -> int:
    """Embeddable bits for a (C, H, W) or (H, W) image."""
    if len(shape) == 2:
        c, h, w = 1, *shape
    elif len(shape) == 3:
        c, h, w = shape
    else:
        raise ValueError(f"expected 2D or 3D image shape, got {shape}")
    return c * ((h // 2) // block) * ((w // 2) // block)


def _as_channels(img) -> tuple[np.ndarray, bool]:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim == 3:
        return arr, False
    raise ValueError(f"expected (H, W) or (C, H, W) image, got shape {arr.shape}")


def dwtdct_embed(
    cover,
    payload: BitPayload,
    step: float = DEFAULT_STEP,
    coef: tuple[int, int] = DEFAULT_COEF,
) -> np.ndarray:
    """Embed payload bits; returns a float stego image shaped like cover."""
    chans, was_2d = _as_channels(cover)
    cap = capacity(chans.shape)
    if len(payload) > cap:
        raise CapacityError(f"payload of {len(payload)} bits exceeds capacity {cap}")
    bits = list(payload.bits)
    out = np.empty_like(chans)
    per_chan = capacity(chans.shape[1:])
    cu, cv = coef
    for ci in range(chans.shape[0]):
        ll, bands = haar_dwt2(chans[ci])
        chunk = bits[ci * per_chan : (ci + 1) * per_chan]
        nbr = (ll.shape[1]) // BLOCK
        for k, bit in enumerate(chunk):
            r, c = divmod(k, nbr)
            blk = ll[r * BLOCK : (r + 1) * BLOCK, c * BLOCK : (c + 1) * BLOCK]
            d = dctn(blk, norm="ortho")
            q = d[cu, cv] / step
            m = round(q)
            if (m & 1) != bit:
                m = m + 1 if q > m else m - 1
            d[cu, cv] = m * step
            ll[r * BLOCK : (r + 1) * BLOCK, c * BLOCK : (c + 1) * BLOCK] = idctn(d, norm="ortho")
        out[ci] = haar_idwt2(ll, bands)
    return out[0] if was_2d else out


def dwtdct_extract(
    stego,
    n_bits: int,
    step: float = DEFAULT_STEP,
    coef: tuple[int, int] = DEFAULT_COEF,
) -> BitPayload:
    """Blindly re-read the first n_bits QIM parities."""
    chans, _ = _as_channels(stego)
    cap = capacity(chans.shape)
    if n_bits > cap:
        raise CapacityError(f"requested {n_bits} bits exceeds capacity {cap}")
    per_chan = capacity(chans.shape[1:])
    cu, cv = coef
    bits: list[int] = []
    for ci in range(chans.shape[0]):
        if len(bits) >= n_bits:
            break
        ll, _bands = haar_dwt2(chans[ci])
        nbr = ll.shape[1] // BLOCK
        take = min(per_chan, n_bits - len(bits))
        for k in range(take):
            r, c = divmod(k, nbr)
            blk = ll[r * BLOCK : (r + 1) * BLOCK, c * BLOCK : (c + 1) * BLOCK]
            d = dctn(blk, norm="ortho")
            bits.append(int(round(d[cu, cv] / step)) & 1)
    return BitPayload(bits=tuple(bits))


def embed_text(cover, text: str, step: float = DEFAULT_STEP) -> np.ndarray:
    """Convenience wrapper: frame text as bits and embed."""
    return dwtdct_embed(cover, utf8_to_bits(text), step=step)


def extract_text(stego, step: float = DEFAULT_STEP) -> tuple[str, bool]:
    """Read the header first, then exactly the framed payload."""
    header = dwtdct_extract(stego, 16, step=step)
    nbits = 0
    for b in header.bits:
        nbits = (nbits << 1) | b
    total = min(16 + nbits, capacity(np.asarray(stego).shape))
    payload = dwtdct_extract(stego, total, step=step)
    return bits_to_utf8(payload)
