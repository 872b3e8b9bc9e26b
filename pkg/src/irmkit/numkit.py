"""Dense linear algebra and deterministic randomness shared by all modules.

Matrices are plain float64 ``numpy.ndarray`` in row-major layout.  All
randomness flows through :class:`Rng`, which derives independent streams
from a master seed and a purpose string, so every experiment component is
reproducible in isolation.
"""

from __future__ import annotations

import numpy as np
from numpy.linalg import LinAlgError

from .errors import SingularGramError

# Fourth-order penalty terms (c^2 sigma^4 scale) need the full float64
# mantissa; never downcast inside this module.
DTYPE = np.float64

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a hash of a purpose string."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


class Rng:
    """Deterministic random stream with documented sub-seeding.

    ``Rng(seed)`` always produces the same stream.  ``rng.stream(purpose)``
    derives an independent child stream from ``(seed, fnv1a64(purpose))``,
    so distinct components of an experiment can be re-run in isolation.
    An ``Rng`` is single-owner: do not share one instance across threads.
    """

    def __init__(self, seed: int, _entropy: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._entropy = (int(seed),) + tuple(_entropy)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._entropy)))

    def stream(self, purpose: str) -> "Rng":
        return Rng(self.seed, _entropy=self._entropy[1:] + (fnv1a64(purpose),))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)


def as_matrix(a) -> np.ndarray:
    """View input as a float64 2-d array without copying when possible."""
    m = np.asarray(a, dtype=DTYPE)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {m.shape}")
    return m


def solve_least_squares(A, b, ridge: float = 0.0) -> np.ndarray:
    """argmin_v ||A v - b||^2 + ridge ||v||^2 via the normal equations.

    Uses a Cholesky solve of ``A^T A + ridge I``.  A rank-deficient system
    with ``ridge == 0`` raises :class:`SingularGramError` rather than
    silently falling back to a pseudo-inverse; callers that want the
    min-norm completion must ask for it explicitly.
    """
    A = as_matrix(A)
    b = np.asarray(b, dtype=DTYPE).ravel()
    if A.shape[0] != b.shape[0]:
        raise ValueError(f"A has {A.shape[0]} rows but b has {b.shape[0]} entries")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    gram = A.T @ A
    if ridge > 0:
        gram = gram + ridge * np.eye(A.shape[1])
    rhs = A.T @ b
    return solve_gram(gram, rhs)


def solve_gram(gram, rhs) -> np.ndarray:
    """Solve ``gram @ v = rhs`` for symmetric positive-definite ``gram``."""
    gram = as_matrix(gram)
    rhs = np.asarray(rhs, dtype=DTYPE)
    try:
        L = np.linalg.cholesky(gram)
    except LinAlgError as exc:
        raise SingularGramError("Gram matrix is singular; retry with ridge > 0") from exc
    y = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, y)


def solve_gram_min_norm(gram, rhs, rel_tol: float = 1e-12) -> np.ndarray:
    """Minimum-norm solution of a possibly singular symmetric system.

    Exactly-zero singular directions are dropped (threshold relative to the
    largest singular value).  Needed where a representation has an exactly
    null column and the optimal classifier is still well defined.
    """
    gram = as_matrix(gram)
    rhs = np.asarray(rhs, dtype=DTYPE)
    U, s, Vt = np.linalg.svd(gram, hermitian=True)
    cut = s > rel_tol * (s[0] if s.size else 1.0)
    inv = np.zeros_like(s)
    inv[cut] = 1.0 / s[cut]
    return Vt.T @ (inv * (U.T @ rhs))


def random_orthogonal(d: int, rng: Rng) -> np.ndarray:
    """Haar-ish random orthogonal matrix with sign-fixed diagonal.

    QR of a Gaussian matrix; the R diagonal's signs are folded into Q so
    the result is a deterministic function of the stream.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    g = rng.standard_normal((d, d))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def gaussian_matrix(rows: int, cols: int, mean: float, std: float, rng: Rng) -> np.ndarray:
    """i.i.d. normal entries; std == 0 returns the constant matrix."""
    if std < 0:
        raise ValueError("std must be non-negative")
    return rng.normal(mean, std, (rows, cols)).astype(DTYPE, copy=False)
