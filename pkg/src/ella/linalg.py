"""Dense float64 matrix helpers shared by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Every
function returns a fresh array and never mutates its inputs.
"""

import numpy as np


class ShapeError(ValueError):
    """Raised when operands have incompatible shapes."""


def as_matrix(values, name="matrix"):
    """Return ``values`` as a fresh, finite, 2-D float64 array."""
    m = np.array(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got {m.ndim}-D")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(lhs, rhs):
    """Standard matrix product; rejects non-conformable operands."""
    lhs = np.asarray(lhs, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    if lhs.ndim != 2 or rhs.ndim != 2 or lhs.shape[1] != rhs.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {lhs.shape} by {rhs.shape}")
    return lhs @ rhs


def hadamard(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b, "hadamard")
    return a * b


def frob_norm_sq(m):
    m = np.asarray(m, dtype=np.float64)
    return float(np.sum(m * m))


def frob_inner(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b, "frob_inner")
    return float(np.sum(a * b))


class LowRankFactors:
    """Adapter pair ``(A, B)`` whose product ``A @ B`` is the weight update.

    ``A`` is ``d x r`` and ``B`` is ``r x k``; the update has the shape of a
    ``d x k`` frozen weight.
    """

    def __init__(self, A, B):
        A = as_matrix(A, "A")
        B = as_matrix(B, "B")
        if A.shape[1] != B.shape[0]:
            raise ShapeError(f"A.cols ({A.shape[1]}) != B.rows ({B.shape[0]})")
        rank = A.shape[1]
        if rank > min(A.shape[0], B.shape[1]):
            raise ShapeError(
                f"rank {rank} exceeds min(d, k) = {min(A.shape[0], B.shape[1])}"
            )
        self.A = A
        self.B = B

    @property
    def rank(self):
        return self.A.shape[1]

    @property
    def shape(self):
        return (self.A.shape[0], self.B.shape[1])

    def delta(self):
        return self.A @ self.B

    def __repr__(self):
        return f"LowRankFactors(shape={self.shape}, rank={self.rank})"
