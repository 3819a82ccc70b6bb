"""Dense real kernels used by the encoding scheme.

Matrices are 2-D float64 numpy arrays and vectors are 1-D float64 arrays;
there are no wrapper types.  The binary layout used by scheme files and wire
messages is little-endian: two u64 dimensions followed by rows*cols float64
values in row-major order.
"""

import logging
import struct

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ConfigError, EmptyKernelError, GenerationError, RankError

logger = logging.getLogger(__name__)

RANK_RTOL = 1e-10
MAX_ATTEMPTS = 16
ZERO_ROW_TOL = 1e-12

_HEADER = struct.Struct("<QQ")


def as_matrix(m, name="matrix"):
    """Validate and return ``m`` as a finite, non-empty 2-D float64 array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ConfigError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} has non-finite entries")
    return a


def as_vector(v, dim=None, name="vector"):
    a = np.asarray(v, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1)
    if a.ndim != 1:
        raise ConfigError(f"{name} must be 1-D, got shape {a.shape}")
    if dim is not None and a.shape[0] != dim:
        raise ConfigError(f"{name} has dimension {a.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} has non-finite entries")
    return a


def singular_values(m):
    return np.linalg.svd(np.asarray(m, dtype=np.float64), compute_uv=False)


def has_full_column_rank(m, rtol=RANK_RTOL):
    s = singular_values(m)
    return m.shape[0] >= m.shape[1] and s[0] > 0 and s[-1] > rtol * s[0]


def condition_number(m):
    s = singular_values(m)
    return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")


def gen_full_col_rank(rows, cols, scale, rng):
    """Draw a ``rows x cols`` matrix with i.i.d. U[-scale, scale] entries.

    The draw is repeated while the matrix is numerically rank deficient
    (smallest singular value not above ``RANK_RTOL`` times the largest), at
    most ``MAX_ATTEMPTS`` times.
    """
    if not (rows >= cols >= 1):
        raise ConfigError(f"need rows >= cols >= 1, got {rows}x{cols}")
    if not scale > 0:
        raise GenerationError(f"scale must be positive, got {scale}")
    for attempt in range(MAX_ATTEMPTS):
        m = rng.uniform(-scale, scale, size=(rows, cols))
        if has_full_column_rank(m):
            return m
        logger.debug("rank-deficient %dx%d draw (attempt %d)", rows, cols, attempt + 1)
    raise GenerationError(
        f"no full-column-rank {rows}x{cols} matrix after {MAX_ATTEMPTS} attempts"
    )


def gen_full_rank(rows, cols, scale, rng):
    """Full-rank draw of any shape; wide shapes are generated transposed."""
    if rows >= cols:
        return gen_full_col_rank(rows, cols, scale, rng)
    return np.ascontiguousarray(gen_full_col_rank(cols, rows, scale, rng).T)


def left_inverse(m):
    """Moore-Penrose left inverse ``(m^T m)^-1 m^T`` of a full-column-rank matrix.

    Evaluated through a Householder QR factorisation, ``R^-1 Q^T``, which is
    algebraically identical to the normal-equations form but loses accuracy
    with cond(m) rather than cond(m)**2.
    """
    m = as_matrix(m)
    rows, cols = m.shape
    if rows < cols:
        raise RankError(f"{rows}x{cols} matrix cannot have full column rank")
    q, r = np.linalg.qr(m, mode="reduced")
    d = np.abs(np.diag(r))
    if d.min() <= RANK_RTOL * d.max() or not has_full_column_rank(m):
        raise RankError(f"{rows}x{cols} matrix is numerically rank deficient")
    return solve_triangular(r, q.T, lower=False)


def kernel_basis(pi1):
    """Orthonormal basis of the orthogonal complement of col(pi1).

    For the Moore-Penrose left inverse this is exactly ker(pi1_left), so
    ``left_inverse(pi1) @ kernel_basis(pi1)`` vanishes up to rounding.
    """
    pi1 = as_matrix(pi1, "pi1")
    rows, cols = pi1.shape
    if rows <= cols:
        raise EmptyKernelError(f"kernel of the left inverse of a {rows}x{cols} matrix is empty")
    if not has_full_column_rank(pi1):
        raise RankError("pi1 must have full column rank")
    q, _ = np.linalg.qr(pi1, mode="complete")
    n1 = np.ascontiguousarray(q[:, cols:])
    # Row norms of any orthonormal kernel basis are basis independent: a zero
    # row means e_i lies in col(pi1), which only a new pi1 can fix.
    if zero_rows(n1).size:
        logger.warning("kernel basis has zero rows %s", zero_rows(n1).tolist())
    return n1


def zero_rows(m, tol=ZERO_ROW_TOL):
    return np.flatnonzero(np.linalg.norm(m, axis=1) < tol)


def norms(m):
    """Per-row l1 and l2 norms."""
    m = np.asarray(m, dtype=np.float64)
    return np.abs(m).sum(axis=1), np.sqrt((m * m).sum(axis=1))


def matrix_to_bytes(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    return _HEADER.pack(*m.shape) + np.ascontiguousarray(m, dtype="<f8").tobytes()


def matrix_from_bytes(buf, offset=0):
    """Parse one serialized matrix; return ``(matrix, next_offset)``.

    Raises ``ValueError`` on truncated input.
    """
    if len(buf) - offset < _HEADER.size:
        raise ValueError("truncated matrix header")
    rows, cols = _HEADER.unpack_from(buf, offset)
    offset += _HEADER.size
    nbytes = rows * cols * 8
    if len(buf) - offset < nbytes:
        raise ValueError(f"truncated matrix body: need {nbytes} bytes")
    m = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=offset)
    return m.astype(np.float64).reshape(rows, cols), offset + nbytes


def vector_to_bytes(v):
    return matrix_to_bytes(np.asarray(v, dtype=np.float64).reshape(-1, 1))


def vector_from_bytes(buf, offset=0):
    m, offset = matrix_from_bytes(buf, offset)
    if m.shape[1] != 1:
        raise ValueError(f"expected a column vector, got shape {m.shape}")
    return m[:, 0].copy(), offset
