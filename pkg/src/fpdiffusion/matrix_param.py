"""Exponential-map parameterisation of orthogonal, SPD and antisymmetric matrices.

An orthogonal matrix is ``Q = expm(H)`` with ``H`` antisymmetric, built from the
strictly upper-triangular entries of ``H``.  SPD and antisymmetric matrices are
then conjugations of a diagonal / 2x2-block canonical form by ``Q``::

    R_inv = Q diag(exp(log_eigs)) Q^T
    omega = Q blockdiag([[0, l1], [-l1, 0]], ...) Q^T

Odd-dimensional antisymmetric matrices carry a trailing 1x1 zero block.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionError, NotPositiveDefiniteError, NumericError, ValidationError

__all__ = [
    "OrthogonalParam",
    "SpdParam",
    "AntisymParam",
    "DampedBlocks",
    "matrix_exp",
    "realize_orthogonal",
    "realize_spd",
    "realize_antisym",
    "spd_sqrt",
    "psd_sqrt",
    "antisym_shift_inverse",
    "assemble_damped",
    "antisym_from_generator",
]


def _as_square(m):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix has non-finite entries")
    return m


def matrix_exp(m):
    """Matrix exponential ``e^m``.

    Symmetric inputs go through an eigendecomposition so the result is exactly
    symmetric; everything else uses Pade scaling-and-squaring.
    """
    m = _as_square(m)
    if np.array_equal(m, m.T):
        w, v = np.linalg.eigh(m)
        out = (v * np.exp(w)) @ v.T
        return 0.5 * (out + out.T)
    return scipy.linalg.expm(m)


def n_generator(dim):
    return dim * (dim - 1) // 2


def antisym_from_generator(dim, generator):
    """Antisymmetric ``H`` whose strictly upper triangle (row-major) is ``generator``."""
    generator = np.asarray(generator, dtype=float).ravel()
    if generator.size != n_generator(dim):
        raise DimensionError(
            f"dim={dim} needs {n_generator(dim)} generator entries, got {generator.size}"
        )
    h = np.zeros((dim, dim))
    iu = np.triu_indices(dim, 1)
    h[iu] = generator
    return h - h.T


@dataclass(frozen=True, eq=False)
class OrthogonalParam:
    dim: int
    generator: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionError("dim must be positive")
        g = np.asarray(self.generator, dtype=float).ravel()
        if g.size != n_generator(self.dim):
            raise DimensionError(
                f"dim={self.dim} needs {n_generator(self.dim)} generator entries, got {g.size}"
            )
        object.__setattr__(self, "generator", g)

    @classmethod
    def identity(cls, dim):
        return cls(dim, np.zeros(n_generator(dim)))

    @classmethod
    def random(cls, dim, rng, scale=1.0):
        return cls(dim, scale * rng.standard_normal(n_generator(dim)))


@dataclass(frozen=True, eq=False)
class SpdParam:
    orth: OrthogonalParam
    log_eigs: np.ndarray

    def __post_init__(self):
        le = np.asarray(self.log_eigs, dtype=float).ravel()
        if le.size != self.orth.dim:
            raise DimensionError(f"need {self.orth.dim} log-eigenvalues, got {le.size}")
        object.__setattr__(self, "log_eigs", le)

    @property
    def dim(self):
        return self.orth.dim

    @classmethod
    def identity(cls, dim):
        return cls(OrthogonalParam.identity(dim), np.zeros(dim))

    @classmethod
    def random(cls, dim, rng, scale=1.0):
        return cls(OrthogonalParam.random(dim, rng), scale * rng.standard_normal(dim))


@dataclass(frozen=True, eq=False)
class AntisymParam:
    orth: OrthogonalParam
    block_eigs: np.ndarray

    def __post_init__(self):
        be = np.asarray(self.block_eigs, dtype=float).ravel()
        if be.size != self.orth.dim // 2:
            raise DimensionError(f"need {self.orth.dim // 2} block eigenvalues, got {be.size}")
        object.__setattr__(self, "block_eigs", be)

    @property
    def dim(self):
        return self.orth.dim

    @classmethod
    def zero(cls, dim):
        return cls(OrthogonalParam.identity(dim), np.zeros(dim // 2))

    @classmethod
    def random(cls, dim, rng, scale=1.0):
        return cls(OrthogonalParam.random(dim, rng), scale * rng.standard_normal(dim // 2))


@dataclass(frozen=True, eq=False)
class DampedBlocks:
    a_eigs: np.ndarray
    b_eigs: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a_eigs, dtype=float).ravel()
        b = np.asarray(self.b_eigs, dtype=float).ravel()
        if a.size != b.size or a.size == 0:
            raise DimensionError("a_eigs and b_eigs must be non-empty and of equal length")
        if np.any(a <= 0) or np.any(b <= 0):
            raise ValidationError("damped block eigenvalues must be strictly positive")
        object.__setattr__(self, "a_eigs", a)
        object.__setattr__(self, "b_eigs", b)

    @property
    def d(self):
        return self.a_eigs.size


def realize_orthogonal(p):
    return matrix_exp(antisym_from_generator(p.dim, p.generator))


def realize_spd(p):
    q = realize_orthogonal(p.orth)
    r = (q * np.exp(p.log_eigs)) @ q.T
    return 0.5 * (r + r.T)


def _block_canonical(dim, block_eigs):
    j = np.zeros((dim, dim))
    for i, lam in enumerate(block_eigs):
        j[2 * i, 2 * i + 1] = lam
        j[2 * i + 1, 2 * i] = -lam
    return j


def realize_antisym(p):
    q = realize_orthogonal(p.orth)
    w = q @ _block_canonical(p.dim, p.block_eigs) @ q.T
    return 0.5 * (w - w.T)


def _check_symmetric(m, tol=1e-10):
    m = _as_square(m)
    scale = max(1.0, np.max(np.abs(m)))
    if np.max(np.abs(m - m.T)) > tol * scale:
        raise ValidationError("matrix is not symmetric")
    return 0.5 * (m + m.T)


def spd_sqrt(r_inv):
    """Symmetric square root of an SPD matrix."""
    m = _check_symmetric(r_inv)
    w, v = np.linalg.eigh(m)
    if np.any(w <= 0):
        raise NotPositiveDefiniteError(f"minimum eigenvalue {w.min():.3e} is not positive")
    s = (v * np.sqrt(w)) @ v.T
    return 0.5 * (s + s.T)


def psd_sqrt(r_inv, tol=1e-12):
    """Square root of a positive semi-definite matrix (degenerate metrics)."""
    m = _check_symmetric(r_inv)
    w, v = np.linalg.eigh(m)
    scale = max(1.0, np.max(np.abs(w)))
    if np.any(w < -tol * scale):
        raise NotPositiveDefiniteError(f"eigenvalue {w.min():.3e} is negative")
    s = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (s + s.T)


def antisym_shift_inverse(b):
    """``(I + B)^{-1}`` for antisymmetric ``B`` via its real block-diagonal form.

    Each 2x2 block ``[[0, l], [-l, 0]]`` inverts to
    ``[[1, -l], [l, 1]] / (1 + l^2)``; 1x1 zero blocks invert to 1.
    """
    if isinstance(b, AntisymParam):
        q = realize_orthogonal(b.orth)
        lams = b.block_eigs
        blocks = np.eye(b.dim)
        for i, lam in enumerate(lams):
            k = 2 * i
            blocks[k : k + 2, k : k + 2] = np.array([[1.0, -lam], [lam, 1.0]]) / (1.0 + lam**2)
        return q @ blocks @ q.T

    b = _as_square(b)
    scale = max(1.0, np.max(np.abs(b)))
    if np.max(np.abs(b + b.T)) > 1e-10 * scale:
        raise ValidationError("matrix is not antisymmetric")
    b = 0.5 * (b - b.T)
    t, z = scipy.linalg.schur(b, output="real")
    n = b.shape[0]
    inv = np.zeros_like(t)
    i = 0
    while i < n:
        if i + 1 < n and abs(t[i + 1, i]) > 0.0:
            lam = 0.5 * (t[i, i + 1] - t[i + 1, i])
            inv[i : i + 2, i : i + 2] = np.array([[1.0, -lam], [lam, 1.0]]) / (1.0 + lam**2)
            i += 2
        else:
            inv[i, i] = 1.0
            i += 1
    return z @ inv @ z.T


def assemble_damped(blocks):
    """Phase-space matrices ``omega = [[0, A], [-A, 0]]`` and ``R_inv = [[0, 0], [0, B]]``."""
    d = blocks.d
    omega = np.zeros((2 * d, 2 * d))
    r_inv = np.zeros((2 * d, 2 * d))
    a = np.diag(blocks.a_eigs)
    omega[:d, d:] = a
    omega[d:, :d] = -a
    r_inv[d:, d:] = np.diag(blocks.b_eigs)
    return omega, r_inv
