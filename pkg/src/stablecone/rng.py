"""Counter-based random streams.

Every random number in the package comes from Philox4x64-10 evaluated at an
explicit counter.  A stream is identified by a 128-bit key derived from the
master seed and a tuple of labels (module tag, sub-experiment, ...) through a
BLAKE2b hash, so the mapping from ``(seed, labels)`` to numbers is stable
across platforms and Python versions.

Counter layout ``(c0, c1, c2, c3)``:

* ``c0`` item index (path index for walks, sample index for bulk draws)
* ``c1`` time step for walks, call cursor for bulk draws
* ``c2`` block index inside one step / draw
* ``c3`` lane, separating walk draws from bulk draws on the same key

Because the counter contains the path index, the numbers consumed by path
``i`` do not depend on which worker simulates it or in which order.
"""
from __future__ import annotations

import hashlib

import numba as nb
import numpy as np
from llvmlite import ir
from numba import types
from numba.extending import intrinsic

SCHEME_ID = "philox4x64-10/blake2b-128-key/v1"

LANE_BULK = 0
LANE_WALK = 1
LANE_INCREMENT = 2
LANE_GENERATOR = 3

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_S11 = np.uint64(11)
_TWO_M53 = 2.0 ** -53


@intrinsic
def _mulhilo(typingctx, a, b):
    """Full 64x64 -> 128 bit product as (hi, lo), via a native i128 multiply."""
    sig = types.UniTuple(types.uint64, 2)(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        i128 = ir.IntType(128)
        i64 = ir.IntType(64)
        prod = builder.mul(builder.zext(args[0], i128), builder.zext(args[1], i128))
        hi = builder.trunc(builder.lshr(prod, ir.Constant(i128, 64)), i64)
        lo = builder.trunc(prod, i64)
        return context.make_tuple(builder, signature.return_type, [hi, lo])

    return sig, codegen


@nb.njit(inline="always")
def philox4x64(c0, c1, c2, c3, k0, k1):
    """Philox4x64 with 10 rounds; returns four uint64 words."""
    for r in range(10):
        if r > 0:
            k0 += _W0
            k1 += _W1
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@nb.njit(inline="always")
def to_unit(u):
    # 53 random bits mapped to the open interval (0, 1)
    return (np.float64(u >> _S11) + 0.5) * _TWO_M53


@nb.njit(inline="always")
def block_uniforms(k0, k1, c0, c1, c2, c3):
    a, b, c, d = philox4x64(c0, c1, c2, c3, k0, k1)
    return to_unit(a), to_unit(b), to_unit(c), to_unit(d)


@nb.njit(nogil=True, cache=True)
def _fill_uniforms(out, k0, k1, item0, cursor, lane):
    n, m = out.shape
    nblk = (m + 3) // 4
    for i in range(n):
        c0 = np.uint64(item0 + i)
        for b in range(nblk):
            u0, u1, u2, u3 = block_uniforms(k0, k1, c0, np.uint64(cursor),
                                            np.uint64(b), np.uint64(lane))
            j = 4 * b
            out[i, j] = u0
            if j + 1 < m:
                out[i, j + 1] = u1
            if j + 2 < m:
                out[i, j + 2] = u2
            if j + 3 < m:
                out[i, j + 3] = u3


def derive_key(seed: int, labels: tuple = ()) -> tuple[int, int]:
    """Stable 128-bit Philox key for ``(seed, *labels)``."""
    text = "|".join([str(int(seed) & 0xFFFFFFFFFFFFFFFF)] + [str(s) for s in labels])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return (int.from_bytes(digest[:8], "little"), int.from_bytes(digest[8:], "little"))


class Stream:
    """A splittable, counter-based random stream.

    Bulk draws (``uniforms``, ``normals``) advance an internal call cursor, so
    consecutive calls return fresh numbers; the sequence of calls fully
    determines the output.  ``spawn`` derives an independent child stream.

    Parameters
    ----------
    seed : int
        64-bit master seed.
    labels : tuple, optional
        Labels identifying the substream (module tag, experiment part, ...).
    """

    def __init__(self, seed: int, labels: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.labels = tuple(labels)
        k0, k1 = derive_key(self.seed, self.labels)
        self.key = (np.uint64(k0), np.uint64(k1))
        self.cursor = 0

    def __repr__(self):
        return f"Stream(seed={self.seed}, labels={self.labels!r}, cursor={self.cursor})"

    def spawn(self, *labels) -> "Stream":
        return Stream(self.seed, self.labels + tuple(labels))

    def uniforms(self, n: int, width: int = 1, item0: int = 0) -> np.ndarray:
        """Array of shape ``(n, width)`` of uniforms on (0, 1)."""
        out = np.empty((int(n), int(width)))
        _fill_uniforms(out, self.key[0], self.key[1], int(item0), self.cursor, LANE_BULK)
        self.cursor += 1
        return out

    def generator(self) -> np.random.Generator:
        """A numpy Generator on the same key, for resampling and permutations.

        Its counter starts in a lane of its own at the current cursor, so it
        never overlaps the compiled draws.
        """
        key = int(self.key[0]) | (int(self.key[1]) << 64)
        counter = np.array([0, self.cursor, 0, LANE_GENERATOR], dtype=np.uint64)
        self.cursor += 1
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def normals(self, n: int, width: int = 1) -> np.ndarray:
        """Standard normals via Box-Muller, shape ``(n, width)``."""
        pairs = (width + 1) // 2
        u = self.uniforms(n, 2 * pairs)
        rad = np.sqrt(-2.0 * np.log(u[:, 0::2]))
        ang = 2.0 * np.pi * u[:, 1::2]
        z = np.empty((n, 2 * pairs))
        z[:, 0::2] = rad * np.cos(ang)
        z[:, 1::2] = rad * np.sin(ang)
        return z[:, :width]


def as_stream(stream, default_labels: tuple = ()) -> Stream:
    """Accept a ``Stream`` or an integer seed."""
    if isinstance(stream, Stream):
        return stream
    if stream is None:
        return Stream(0, default_labels)
    return Stream(int(stream), default_labels)
