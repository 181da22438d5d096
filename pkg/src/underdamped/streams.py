"""Counter-based random streams.

Every draw is a pure function of ``(master_seed, stream_id, counter)``.
A stream key is derived by hashing the two seeds with the SplitMix64
finalizer; the ``k``-th raw word of a stream is ``mix64(key + (k + 1) * G)``
with ``G`` the golden-ratio Weyl increment.  Normals use a 128-layer
ziggurat, so the number of words consumed per normal is data dependent but
still fully determined by the stream position.

The low-level ``njit`` helpers are shared by the compiled ensemble kernels,
which is what makes a kernel run and a step-by-step Python run on the same
stream bit-compatible.
"""

from __future__ import annotations

import numba as nb
import numpy as np

__all__ = ["RngStream", "derive_stream", "stream_key"]

_MASK64 = (1 << 64) - 1

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_STREAM_SALT = np.uint64(0xD1B54A32D192ED03)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_LOW7 = np.uint64(127)
_INV53 = 1.0 / 9007199254740992.0


def _ziggurat_tables(layers=128, r=3.442619855899, area=9.91256303526217e-3):
    x = np.zeros(layers + 1)
    f = np.exp(-0.5 * r * r)
    x[0] = area / f
    x[1] = r
    for i in range(2, layers):
        x[i] = np.sqrt(-2.0 * np.log(area / x[i - 1] + f))
        f = np.exp(-0.5 * x[i] * x[i])
    return x, x[1:] / x[:-1], r


_ZIG_X, _ZIG_RATIO, _ZIG_R = _ziggurat_tables()


@nb.njit(inline="always", cache=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True)
def key_from_seeds(master_seed, stream_id):
    return mix64(mix64(master_seed) ^ mix64(stream_id + _STREAM_SALT))


@nb.njit(inline="always", cache=True)
def raw_word(key, counter):
    return mix64(key + (counter + _ONE) * _GOLDEN)


@nb.njit(inline="always", cache=True)
def word_to_unit(z):
    # open interval (0, 1): safe for log()
    return (float(z >> _S11) + 0.5) * _INV53


@nb.njit(inline="always", cache=True)
def draw_uniform(key, counter):
    return word_to_unit(raw_word(key, counter)), counter + _ONE


@nb.njit(inline="always", cache=True)
def draw_normal(key, counter):
    while True:
        z = raw_word(key, counter)
        counter += _ONE
        i = int(z & _LOW7)
        u = 2.0 * word_to_unit(z) - 1.0
        if abs(u) < _ZIG_RATIO[i]:
            return u * _ZIG_X[i], counter
        if i == 0:
            while True:
                a = np.log(word_to_unit(raw_word(key, counter))) / _ZIG_R
                b = np.log(word_to_unit(raw_word(key, counter + _ONE)))
                counter += np.uint64(2)
                if -2.0 * b >= a * a:
                    break
            if u < 0.0:
                return a - _ZIG_R, counter
            return _ZIG_R - a, counter
        x = u * _ZIG_X[i]
        f0 = np.exp(-0.5 * (_ZIG_X[i] * _ZIG_X[i] - x * x))
        f1 = np.exp(-0.5 * (_ZIG_X[i + 1] * _ZIG_X[i + 1] - x * x))
        w = word_to_unit(raw_word(key, counter))
        counter += _ONE
        if f1 + w * (f0 - f1) < 1.0:
            return x, counter


@nb.njit(cache=True)
def fill_normal(key, counter, out):
    for i in range(out.size):
        out[i], counter = draw_normal(key, counter)
    return counter


@nb.njit(cache=True)
def fill_uniform(key, counter, out):
    for i in range(out.size):
        out[i] = word_to_unit(raw_word(key, counter))
        counter += _ONE
    return counter


@nb.njit(cache=True)
def fill_words(key, counter, out):
    for i in range(out.size):
        out[i] = raw_word(key, counter)
        counter += _ONE
    return counter


def stream_key(master_seed: int, stream_id: int) -> np.uint64:
    key = key_from_seeds(np.uint64(master_seed & _MASK64), np.uint64(stream_id & _MASK64))
    return np.uint64(key)  # numba hands back a Python int, which would re-enter as int64


class RngStream:
    """A position in a counter-based random stream.

    Draw methods advance ``counter``; :meth:`copy` forks an independent
    cursor at the same position (both then produce the same draws).
    """

    __slots__ = ("master_seed", "stream_id", "counter", "_key")

    def __init__(self, master_seed: int, stream_id: int = 0, counter: int = 0):
        self.master_seed = int(master_seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.counter = int(counter) & _MASK64
        self._key = stream_key(self.master_seed, self.stream_id)

    @property
    def key(self) -> np.uint64:
        return self._key

    def copy(self) -> "RngStream":
        return RngStream(self.master_seed, self.stream_id, self.counter)

    def __repr__(self):
        return (f"RngStream(master_seed={self.master_seed:#x}, "
                f"stream_id={self.stream_id}, counter={self.counter})")

    def __eq__(self, other):
        if not isinstance(other, RngStream):
            return NotImplemented
        return (self.master_seed, self.stream_id, self.counter) == (
            other.master_seed, other.stream_id, other.counter)

    def normal(self, size=None):
        shape = () if size is None else np.atleast_1d(size).astype(int)
        out = np.empty(int(np.prod(shape)))
        self.counter = int(fill_normal(self._key, np.uint64(self.counter), out))
        return out[0] if size is None else out.reshape(tuple(shape))

    def uniform(self, size=None):
        """Uniform draws on the open interval (0, 1)."""
        shape = () if size is None else np.atleast_1d(size).astype(int)
        out = np.empty(int(np.prod(shape)))
        self.counter = int(fill_uniform(self._key, np.uint64(self.counter), out))
        return out[0] if size is None else out.reshape(tuple(shape))

    def words(self, size):
        out = np.empty(int(size), dtype=np.uint64)
        self.counter = int(fill_words(self._key, np.uint64(self.counter), out))
        return out


def derive_stream(master_seed: int, stream_id: int) -> RngStream:
    """Fresh stream (counter 0) keyed by both seeds."""
    return RngStream(master_seed, stream_id, 0)
