"""Counter-mode random streams.

Every random quantity in the package comes from a :class:`Stream`. A stream is
a Philox4x64 counter generator whose 128-bit key is the first 16 bytes of
SHA-256 over a byte string, so any party holding the same seed material gets
the same sequence of 64-bit words regardless of process, platform or call
order elsewhere. Floating draws are derived from raw words explicitly (no
reliance on numpy's distribution samplers, which are not version-stable).
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_TWO_NEG_53 = 2.0 ** -53


def seed_material(*parts: object) -> bytes:
    """Serialize seed parts into an unambiguous byte string.

    ints are encoded as u64 little-endian, str as UTF-8 and bytes verbatim;
    every part is length-prefixed so ("ab", "c") and ("a", "bc") differ.
    """
    out = bytearray()
    for part in parts:
        if isinstance(part, (bool, np.bool_)):
            raise TypeError("bool is not a valid seed part")
        if isinstance(part, (int, np.integer)):
            raw = struct.pack("<Q", int(part) & 0xFFFFFFFFFFFFFFFF)
        elif isinstance(part, str):
            raw = part.encode("utf-8")
        elif isinstance(part, (bytes, bytearray)):
            raw = bytes(part)
        else:
            raise TypeError(f"unsupported seed part {type(part).__name__}")
        out += struct.pack("<I", len(raw)) + raw
    return bytes(out)


class Stream:
    """Deterministic stream of 64-bit words keyed by seed material."""

    def __init__(self, material: bytes):
        digest = hashlib.sha256(material).digest()
        key = np.frombuffer(digest[:16], dtype="<u8").astype(np.uint64)
        self._gen = np.random.Philox(key=key, counter=0)

    @classmethod
    def of(cls, *parts: object) -> "Stream":
        return cls(seed_material(*parts))

    @classmethod
    def raw(cls, material: bytes) -> "Stream":
        return cls(material)

    def words(self, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        return np.asarray(self._gen.random_raw(n), dtype=np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """Uniform doubles on the open interval (0, 1)."""
        w = self.words(n) >> np.uint64(11)
        return (w.astype(np.float64) + 0.5) * _TWO_NEG_53

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller, consuming two words per pair."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def normal_single(self, n: int) -> np.ndarray:
        """Box-Muller in single precision, widened to float64.

        One 64-bit word feeds a pair: its low and high 32-bit halves give two
        24-bit uniforms. About 3x cheaper than :meth:`normal`, which matters
        for multi-million entry watermark keys.
        """
        m = (n + 1) // 2
        halves = self.words(m).astype("<u8", copy=False).view("<u4")
        u = (halves >> np.uint32(8)).astype(np.float32)
        u += np.float32(0.5)
        u *= np.float32(2.0**-24)
        r = np.sqrt(np.float32(-2.0) * np.log(u[0::2]))
        theta = np.float32(2.0 * np.pi) * u[1::2]
        z = np.empty((m, 2), dtype=np.float32)
        np.multiply(r, np.cos(theta), out=z[:, 0])
        np.multiply(r, np.sin(theta), out=z[:, 1])
        return z.reshape(-1)[:n].astype(np.float64)

    def laplace(self, n: int, scale: float) -> np.ndarray:
        """Laplace(0, scale) draws by inverse CDF."""
        v = self.uniform(n) - 0.5
        return -scale * np.sign(v) * np.log1p(-2.0 * np.abs(v))

    def bits(self, n: int) -> np.ndarray:
        """First ``n`` bits of the stream, least-significant bit first per word."""
        w = self.words((n + 63) // 64)
        shifts = np.arange(64, dtype=np.uint64)
        b = (w[:, None] >> shifts[None, :]) & np.uint64(1)
        return b.reshape(-1)[:n].astype(np.int8)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform permutation of range(n) via a stable argsort of fresh words."""
        return np.argsort(self.words(n), kind="stable").astype(np.int64)

    def integers(self, n: int, high: int) -> np.ndarray:
        """``n`` integers in [0, high) by multiply-shift on the top 53 bits."""
        return np.floor(self.uniform(n) * high).astype(np.int64)
