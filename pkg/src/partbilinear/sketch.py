"""Compact bilinear pooling via tensor sketch.

Each stream is count-sketched into ``d`` buckets with its own random
(hash, sign) pair, and the two sketches are circularly convolved. The inner
product of two such sketches is an unbiased estimate of the inner product of
the exact outer products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Embedding, FeatureMap, SketchedLayout
from .errors import DimensionError

DEFAULT_SKETCH_DIM = 512


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _bit_reverse_permutation(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 DFT along the last axis (length must be a power of two)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not _is_power_of_two(n):
        raise DimensionError(f"radix-2 transform needs a power-of-two length, got {n}")
    y = x[..., _bit_reverse_permutation(n)]
    out = np.empty_like(y)
    lead = y.shape[:-1]
    m = 2
    while m <= n:
        half = m // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / m)
        src = y.reshape(lead + (n // m, m))
        dst = out.reshape(lead + (n // m, m))
        odd = src[..., half:] * twiddle
        np.add(src[..., :half], odd, out=dst[..., :half])
        np.subtract(src[..., :half], odd, out=dst[..., half:])
        y, out = out, y
        m *= 2
    return y


def ifft(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.complex128)
    return np.conj(fft(np.conj(X))) / X.shape[-1]


def circular_convolve_direct(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    d = u.shape[-1]
    idx = (np.arange(d)[:, None] - np.arange(d)[None, :]) % d
    return np.einsum("...j,...kj->...k", u, v[..., idx])


def circular_convolve(u, v) -> np.ndarray:
    """``out[k] = sum_j u[j] * v[(k - j) mod d]`` along the last axis.

    Power-of-two lengths go through the radix-2 transform, others through
    direct summation. Leading axes broadcast.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"cannot convolve lengths {u.shape[-1]} and {v.shape[-1]}")
    if _is_power_of_two(u.shape[-1]):
        return ifft(fft(u) * fft(v)).real
    return circular_convolve_direct(u, v)


def mean_circular_convolve(U, V) -> np.ndarray:
    """``circular_convolve(U, V).mean(axis=-2)`` with one inverse transform per row."""
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if U.shape[-1] != V.shape[-1]:
        raise DimensionError(f"cannot convolve lengths {U.shape[-1]} and {V.shape[-1]}")
    if _is_power_of_two(U.shape[-1]):
        # the inverse transform is linear, so average in the frequency domain
        return ifft((fft(U) * fft(V)).mean(axis=-2)).real
    return circular_convolve_direct(U, V).mean(axis=-2)


def circular_correlate(g, v) -> np.ndarray:
    """Adjoint of ``u -> circular_convolve(u, v)``: ``out[j] = sum_k g[k] v[(k - j) mod d]``."""
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[-1]
    flipped = v[..., (-np.arange(d)) % d]
    return circular_convolve(g, flipped)


@dataclass(frozen=True, eq=False)
class SketchParams:
    """Random hash/sign pairs for the appearance and part streams.

    Build with :meth:`from_seed`; the same ``(c_a, c_p, d, seed)`` always
    yields the same maps.
    """

    d: int
    hash_a: np.ndarray
    sign_a: np.ndarray
    hash_p: np.ndarray
    sign_p: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"sketch dimension must be positive, got {self.d}")
        for name in ("hash_a", "sign_a", "hash_p", "sign_p"):
            arr = np.array(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if len(self.hash_a) != len(self.sign_a) or len(self.hash_p) != len(self.sign_p):
            raise DimensionError("hash and sign arrays must have equal length per stream")

    @classmethod
    def from_seed(cls, c_a: int, c_p: int, d: int = DEFAULT_SKETCH_DIM, seed: int = 0):
        if d < 1:
            raise ValueError(f"sketch dimension must be positive, got {d}")
        # Philox is counter based: streams are reproducible across platforms.
        ss_a, ss_p = np.random.SeedSequence(seed).spawn(2)
        rng_a = np.random.Generator(np.random.Philox(ss_a))
        rng_p = np.random.Generator(np.random.Philox(ss_p))
        hash_a = rng_a.integers(0, d, size=c_a)
        sign_a = rng_a.integers(0, 2, size=c_a) * 2 - 1
        hash_p = rng_p.integers(0, d, size=c_p)
        sign_p = rng_p.integers(0, 2, size=c_p) * 2 - 1
        return cls(d, hash_a, sign_a, hash_p, sign_p, seed)

    @property
    def c_a(self) -> int:
        return len(self.hash_a)

    @property
    def c_p(self) -> int:
        return len(self.hash_p)

    def matrix_a(self) -> np.ndarray:
        return sketch_matrix(self.hash_a, self.sign_a, self.d)

    def matrix_p(self) -> np.ndarray:
        return sketch_matrix(self.hash_p, self.sign_p, self.d)

    @property
    def layout(self) -> SketchedLayout:
        return SketchedLayout(self.d)


def sketch_matrix(hash_, sign, d: int) -> np.ndarray:
    """Dense ``(c, d)`` matrix ``M`` such that ``x @ M`` is the count sketch of ``x``."""
    hash_ = np.asarray(hash_)
    M = np.zeros((len(hash_), d))
    M[np.arange(len(hash_)), hash_] = sign
    return M


def count_sketch(x, hash_, sign, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(x.shape[:-1] + (d,))
    np.add.at(out, (..., np.asarray(hash_)), np.asarray(sign) * x)
    return out


def _check_dims(c_a, c_p, params: SketchParams):
    if c_a != params.c_a or c_p != params.c_p:
        raise DimensionError(
            f"descriptor dims ({c_a}, {c_p}) do not match sketch params ({params.c_a}, {params.c_p})"
        )


def tensor_sketch_local(a, p, params: SketchParams) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    _check_dims(a.shape[-1], p.shape[-1], params)
    return circular_convolve(
        count_sketch(a, params.hash_a, params.sign_a, params.d),
        count_sketch(p, params.hash_p, params.sign_p, params.d),
    )


def compact_bilinear_pool_arrays(A: np.ndarray, P: np.ndarray, params: SketchParams) -> np.ndarray:
    """Batched compact pooling: ``(..., S, c_a)`` and ``(..., S, c_p)`` to ``(..., d)``."""
    if A.shape[:-1] != P.shape[:-1]:
        raise DimensionError(f"leading shapes differ: {A.shape[:-1]} vs {P.shape[:-1]}")
    _check_dims(A.shape[-1], P.shape[-1], params)
    U = A @ params.matrix_a()
    V = P @ params.matrix_p()
    return mean_circular_convolve(U, V)


def compact_bilinear_pool(A: FeatureMap, P: FeatureMap, params: SketchParams,
                          nonneg_parts: bool = False) -> Embedding:
    if A.shape[:2] != P.shape[:2]:
        raise DimensionError(f"appearance grid {A.shape[:2]} != part grid {P.shape[:2]}")
    p = P.descriptors()
    if nonneg_parts:
        p = np.maximum(p, 0.0)
    f = compact_bilinear_pool_arrays(A.descriptors(), p, params)
    return Embedding(f, params.layout)


def estimate_inner_product(e1: Embedding, e2: Embedding) -> float:
    if not isinstance(e1.layout, SketchedLayout) or e1.layout != e2.layout:
        raise DimensionError(f"need matching sketched layouts, got {e1.layout} and {e2.layout}")
    return float(np.dot(e1.values, e2.values))
