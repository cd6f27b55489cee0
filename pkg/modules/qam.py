"""
Gray-coded square QAM with unit average power.

Bits b0 b1 b2 ... of a symbol alternate between the axes: even-indexed bits
drive I, odd-indexed bits drive Q. On each axis the first bit is the sign
and the rest select the magnitude in Gray order, the cellular (38.211)
convention. QPSK 00 maps to (+1+j)/√2; 16-QAM uses (1−2b0)(2−(1−2b2)) on I.
"""
from functools import lru_cache
from typing import List, Tuple

import numpy as np

from modules.errors import ConfigError, ContractError

SUPPORTED_ORDERS = (4, 16, 64, 256)
_DEMAP_CHUNK = 8192


def bits_per_symbol(order: int) -> int:
    if order not in SUPPORTED_ORDERS:
        raise ConfigError(f"constellation order {order} not supported (choose from {SUPPORTED_ORDERS})")
    return int(np.log2(order))


def _axis_level(axis_bits: Tuple[int, ...]) -> int:
    m = len(axis_bits)
    level = 1
    for k in range(m - 1, 0, -1):
        level = 2 ** (m - k) - (1 - 2 * axis_bits[k]) * level
    return (1 - 2 * axis_bits[0]) * level


def axis_levels(order: int) -> List[Tuple[Tuple[int, ...], int]]:
    """Per-axis (bits, unnormalised odd level) pairs; both axes share them."""
    m = bits_per_symbol(order) // 2
    out = []
    for value in range(2 ** m):
        bits = tuple((value >> (m - 1 - k)) & 1 for k in range(m))
        out.append((bits, _axis_level(bits)))
    return out


def scale(order: int) -> float:
    """Divisor that brings the odd-integer grid to unit average power."""
    return float(np.sqrt(2.0 * (order - 1) / 3.0))


@lru_cache(maxsize=None)
def _constellation(order: int) -> np.ndarray:
    n = bits_per_symbol(order)
    divisor = scale(order)
    points = np.empty(order, dtype=np.complex128)
    for index in range(order):
        bits = tuple((index >> (n - 1 - k)) & 1 for k in range(n))
        points[index] = complex(_axis_level(bits[0::2]), _axis_level(bits[1::2])) / divisor
    points.flags.writeable = False
    return points


def constellation(order: int) -> np.ndarray:
    """Points indexed by the integer whose MSB-first binary digits are b0 b1 ..."""
    return _constellation(order)


def qam_map(bits: np.ndarray, order: int) -> np.ndarray:
    n = bits_per_symbol(order)
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    if bits.size % n:
        raise ContractError(f"qam_map: {bits.size} bits is not a multiple of {n}")
    index = bits.reshape(-1, n) @ (1 << np.arange(n - 1, -1, -1))
    return constellation(order)[index]


def nearest_index(symbols: np.ndarray, order: int) -> np.ndarray:
    """Index of the closest point (Euclidean); ties go to the smaller index."""
    points = constellation(order)
    flat = np.asarray(symbols, dtype=np.complex128).reshape(-1)
    out = np.empty(flat.size, dtype=np.int64)
    for start in range(0, flat.size, _DEMAP_CHUNK):
        chunk = flat[start:start + _DEMAP_CHUNK]
        distances = np.abs(chunk[:, np.newaxis] - points[np.newaxis, :]) ** 2
        out[start:start + chunk.size] = np.argmin(distances, axis=1)
    return out.reshape(np.shape(symbols))


def hard_symbols(symbols: np.ndarray, order: int) -> np.ndarray:
    return constellation(order)[nearest_index(symbols, order)]


def qam_demap(symbols: np.ndarray, order: int) -> np.ndarray:
    """Hard-decision bits, b0 first for every symbol."""
    n = bits_per_symbol(order)
    index = nearest_index(symbols, order).reshape(-1)
    return ((index[:, np.newaxis] >> np.arange(n - 1, -1, -1)) & 1).astype(np.uint8).reshape(-1)


def gray_table(order: int) -> List[Tuple[str, complex]]:
    """(bit string, point) for every constellation index, for audit output."""
    n = bits_per_symbol(order)
    return [(format(i, f"0{n}b"), complex(p)) for i, p in enumerate(constellation(order))]
