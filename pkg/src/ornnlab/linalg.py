"""Dense float64 linear algebra and orthogonality utilities.

Everything in this module is pure: functions take arrays (plus, where
needed, an explicit seeded generator) and return fresh arrays, so values
are safe to share across threads. All arithmetic is 64-bit; there is no
32-bit fast path.

Randomness flows through counter-based Philox4x64 generators built by
:func:`make_rng`, keyed by a ``(seed, stream)`` pair. Identical keys
reproduce identical draw sequences bit for bit; distinct streams are
independent, which is how concurrent parts of an experiment get their own
randomness without coordination.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "make_rng",
    "gemm",
    "block_rotation",
    "nearest_orthogonal",
    "spectral_norm",
    "sample_unit_sphere",
    "eigenvalue_phases",
]

_MASK64 = 0xFFFFFFFFFFFFFFFF


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox4x64 generator keyed by (seed, stream)."""
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense product ``a @ b`` with an explicit inner-dimension check.

    Matrix-vector products are the single-column case: a 1-D ``b`` is
    treated as a column.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 1 or b.ndim < 1:
        raise ValueError("gemm: operands must be at least 1-D")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"gemm: inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def block_rotation(phases, period: int) -> np.ndarray:
    """Block-diagonal matrix of 2x2 rotations, one block per phase.

    Block j advances by the angle 2*pi*phases[j]/period at every
    application, so all blocks simultaneously return to the identity after
    exactly ``period`` steps: the matrix is an orthogonal clock with that
    period. Each phase must lie in {1, ..., period}.
    """
    phases = np.atleast_1d(np.asarray(phases))
    if phases.size == 0:
        raise ValueError("block_rotation: need at least one phase")
    if period < 1:
        raise ValueError(f"block_rotation: period must be >= 1, got {period}")
    if np.any((phases < 1) | (phases > period)):
        raise ValueError("block_rotation: phases must lie in {1, ..., period}")
    theta = 2.0 * np.pi * phases.astype(np.float64) / float(period)
    d = theta.size
    c, s = np.cos(theta), np.sin(theta)
    q = np.zeros((2 * d, 2 * d))
    i = np.arange(d)
    q[2 * i, 2 * i] = c
    q[2 * i, 2 * i + 1] = s
    q[2 * i + 1, 2 * i] = -s
    q[2 * i + 1, 2 * i + 1] = c
    return q


def spectral_norm(m: np.ndarray, iters: int = 100) -> float:
    """Largest singular value, estimated by power iteration on ``m.T @ m``.

    The starting vector is drawn from a fixed internal stream, so repeated
    calls on the same matrix give the same answer. A zero matrix yields 0.
    """
    m = np.asarray(m, dtype=np.float64)
    v = make_rng(0x5EED, 0).standard_normal(m.shape[-1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        w = m @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        u = m.T @ w
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return float(nw)
        v = u / nu
        new_sigma = nw
        if abs(new_sigma - sigma) <= 1e-13 * max(new_sigma, 1.0):
            sigma = new_sigma
            break
        sigma = new_sigma
    return float(np.linalg.norm(m @ v))


def nearest_orthogonal(m: np.ndarray, tol: float = 1e-11, max_iter: int = 200) -> np.ndarray:
    """Orthogonal polar factor of a square full-rank matrix.

    Newton-Schulz iteration ``X <- 1.5 X - 0.5 X (X.T X)`` after pre-scaling
    by the spectral norm. The iteration drives every singular value to 1
    while leaving the singular vectors alone, which is exactly the nearest
    orthogonal matrix in Frobenius distance. Rank-deficient input has no
    unique nearest orthogonal matrix; the iteration then fails to converge
    and an error is raised.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"nearest_orthogonal: matrix must be square, got {m.shape}")
    alpha = spectral_norm(m)
    if alpha == 0.0:
        raise ValueError("nearest_orthogonal: zero matrix; projection is not unique")
    x = m / alpha
    eye = np.eye(m.shape[0])
    for _ in range(max_iter):
        gram = x.T @ x
        if np.abs(gram - eye).max() < tol:
            return x
        x = 1.5 * x - 0.5 * (x @ gram)
    raise ValueError(
        "nearest_orthogonal: Newton-Schulz did not converge; input is "
        "rank-deficient or nearly so and the projection is not unique"
    )


def sample_unit_sphere(dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """`n` points drawn uniformly from the unit sphere in `dim` dimensions.

    Returns an (n, dim) array whose rows have unit Euclidean norm. Gaussian
    draws are normalized; the astronomically rare near-zero draw is
    rejected and redrawn so the norm contract is exact.
    """
    if dim < 1:
        raise ValueError(f"sample_unit_sphere: dim must be >= 1, got {dim}")
    g = rng.standard_normal((n, dim))
    norms = np.linalg.norm(g, axis=1)
    while np.any(norms < 1e-12):
        bad = norms < 1e-12
        g[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(g, axis=1)
    return g / norms[:, None]


def eigenvalue_phases(m: np.ndarray) -> np.ndarray:
    """Phases in (-pi, pi] of the complex eigenvalues of a real matrix.

    For an orthogonal matrix the eigenvalues lie on the unit circle and the
    phases describe its rotation content; they come in conjugate pairs.
    """
    return np.angle(np.linalg.eigvals(np.asarray(m, dtype=np.float64)))
