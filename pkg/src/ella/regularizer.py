"""Subspace-aware alignment penalty and its closed-form shrinkage analysis.

The training-time penalty is ``||dW * W_past||_F^2`` (elementwise product)
where ``W_past`` is the running sum of earlier task updates for one layer.
The analysis half of the module works on the epsilon-floored energy matrix
``E = |W_past| + eps`` and provides the coordinatewise shrinkage solution,
an independent 1-D minimiser to check it against, and the two bounds on
how much of the gradient can leak into past directions.
"""

import io
import math
from dataclasses import dataclass

import numpy as np

from .linalg import LowRankFactors, ShapeError, as_matrix, frob_inner, frob_norm_sq, hadamard

DEFAULT_EPSILON = 1e-8
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class PastAccumulator:
    """Per-layer running sum of past task updates.

    Updates arrive in task order and are summed in arrival order, so the
    stored matrices are reproducible bit for bit. ``accumulate`` returns a new
    accumulator and leaves the receiver untouched.
    """

    def __init__(self, per_layer=None, task_count=0):
        self.per_layer = dict(per_layer or {})
        self.task_count = int(task_count)

    def get(self, layer, shape=None):
        """``W_past`` for ``layer``; zeros of ``shape`` when nothing is stored."""
        if layer in self.per_layer:
            return self.per_layer[layer]
        if shape is None:
            raise KeyError(layer)
        return np.zeros(shape)

    def accumulate(self, layer, delta):
        delta = as_matrix(delta, "delta")
        per_layer = dict(self.per_layer)
        if layer in per_layer:
            prev = per_layer[layer]
            if prev.shape != delta.shape:
                raise ShapeError(
                    f"layer {layer!r}: update shape {delta.shape} != stored {prev.shape}"
                )
            per_layer[layer] = prev + delta
        else:
            per_layer[layer] = delta.copy()
        return PastAccumulator(per_layer, self.task_count)

    def finish_task(self):
        return PastAccumulator(self.per_layer, self.task_count + 1)

    def to_bytes(self):
        """Serialise to an uncompressed ``.npz`` blob (one array per layer)."""
        buf = io.BytesIO()
        arrays = {f"layer_{k}": v for k, v in sorted(self.per_layer.items())}
        np.savez(buf, task_count=np.int64(self.task_count), **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob):
        with np.load(io.BytesIO(blob)) as data:
            per_layer = {
                int(k[len("layer_"):]): data[k].copy()
                for k in data.files
                if k.startswith("layer_")
            }
            return cls(per_layer, int(data["task_count"]))

    def __eq__(self, other):
        if not isinstance(other, PastAccumulator):
            return NotImplemented
        return (
            self.task_count == other.task_count
            and self.per_layer.keys() == other.per_layer.keys()
            and all(np.array_equal(v, other.per_layer[k]) for k, v in self.per_layer.items())
        )


def accumulate(acc, layer, delta):
    return acc.accumulate(layer, delta)


@dataclass(frozen=True)
class EnergyMatrix:
    E: np.ndarray
    epsilon: float

    @property
    def shape(self):
        return self.E.shape


def energy(w_past, epsilon=DEFAULT_EPSILON):
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    w_past = as_matrix(w_past, "w_past")
    return EnergyMatrix(np.abs(w_past) + epsilon, float(epsilon))


@dataclass(frozen=True)
class ShrinkageProblem:
    """Unconstrained step ``G``, energy ``E`` and strength ``lam``."""

    G: np.ndarray
    E: EnergyMatrix
    lam: float

    def __post_init__(self):
        G = as_matrix(self.G, "G")
        object.__setattr__(self, "G", G)
        if G.shape != self.E.shape:
            raise ShapeError(f"G shape {G.shape} != E shape {self.E.shape}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


def penalty(delta_w, w_past):
    """Alignment penalty ``||delta_w * w_past||_F^2``."""
    return frob_norm_sq(hadamard(delta_w, w_past))


def penalty_grad(delta_w, w_past):
    w_past = np.asarray(w_past, dtype=np.float64)
    return 2.0 * hadamard(w_past * w_past, delta_w)


def penalty_grad_factors(f: LowRankFactors, w_past):
    """Gradients of the penalty with respect to ``A`` and ``B`` of ``dW = A @ B``."""
    w_past = np.asarray(w_past, dtype=np.float64)
    if f.shape != w_past.shape:
        raise ShapeError(f"adapter product shape {f.shape} != w_past shape {w_past.shape}")
    M = penalty_grad(f.delta(), w_past)
    return M @ f.B.T, f.A.T @ M


def shrinkage_solve(p: ShrinkageProblem):
    """Minimiser of ``0.5||dW - G||^2 + 0.5 lam ||E * dW||^2``, coordinatewise."""
    return p.G / (1.0 + p.lam * p.E.E**2)


def percoord_objective(z, g, e, lam):
    return 0.5 * (z - g) ** 2 + 0.5 * lam * e**2 * z**2


def _objective_gap(c, d, g, e, lam):
    # f(c) - f(d) in factored form; subtracting two evaluated objectives loses
    # every digit below sqrt(machine eps) near the minimum
    return 0.5 * (c - d) * ((c + d - 2.0 * g) + lam * e**2 * (c + d))


def _golden_section(g, e, lam, tol, max_iter):
    # vectorised over equal-shaped arrays; returns (argmin, final bracket width)
    lo = -2.0 * np.abs(g)
    hi = 2.0 * np.abs(g)
    c = hi - _INV_PHI * (hi - lo)
    d = lo + _INV_PHI * (hi - lo)
    for _ in range(max_iter):
        width = hi - lo
        if np.all(width <= tol):
            break
        left = _objective_gap(c, d, g, e, lam) < 0
        # keep [lo, d] where f(c) < f(d), else [c, hi]
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        new_c = hi - _INV_PHI * (hi - lo)
        new_d = lo + _INV_PHI * (hi - lo)
        c, d = np.where(left, new_c, d), np.where(left, c, new_d)
    return 0.5 * (lo + hi), hi - lo


def percoord_oracle(g, e, lam, tol=1e-9, max_iter=200):
    """Golden-section minimiser of the per-coordinate objective.

    Brackets ``[-2|g|, 2|g|]``, which always contains the minimiser, and
    shrinks it by objective comparisons alone. Used as an independent check
    on :func:`shrinkage_solve`.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    z, width = _golden_section(
        np.float64(g), np.float64(e), np.float64(lam), tol, max_iter
    )
    if width > tol:
        raise ConvergenceError("golden-section search did not converge", float(width))
    return float(z)


def percoord_oracle_batch(g, e, lam, tol=1e-9, max_iter=200):
    """Array version of :func:`percoord_oracle` (same search, elementwise)."""
    if not tol > 0:
        raise ValueError("tol must be > 0")
    g, e, lam = np.broadcast_arrays(
        np.asarray(g, dtype=np.float64),
        np.asarray(e, dtype=np.float64),
        np.asarray(lam, dtype=np.float64),
    )
    z, width = _golden_section(g, e, lam, tol, max_iter)
    worst = float(np.max(width, initial=0.0))
    if worst > tol:
        raise ConvergenceError("golden-section search did not converge", worst)
    return z


def interference(delta_w, w_past):
    """Signed Frobenius inner product between an update and ``W_past``."""
    return frob_inner(delta_w, w_past)


def interference_bound(p: ShrinkageProblem, w_past):
    """Upper bound on ``|<shrinkage_solve(p), w_past>_F|``."""
    if not p.lam > 0:
        raise ValueError("interference bound is undefined for lambda = 0")
    w_past = as_matrix(w_past, "w_past")
    if w_past.shape != p.G.shape:
        raise ShapeError(f"w_past shape {w_past.shape} != G shape {p.G.shape}")
    scaled = w_past / p.E.E
    return math.sqrt(frob_norm_sq(p.G)) / (2.0 * math.sqrt(p.lam)) * math.sqrt(frob_norm_sq(scaled))


def penalty_energy_bound(p: ShrinkageProblem):
    """``(||E * dW*||_F^2, ||G||_F^2 / (4 lam))``; the first never exceeds the second."""
    if not p.lam > 0:
        raise ValueError("penalty-energy bound is undefined for lambda = 0")
    achieved = frob_norm_sq(p.E.E * shrinkage_solve(p))
    return achieved, frob_norm_sq(p.G) / (4.0 * p.lam)


def shrinkage_gain(x, lam):
    """``x / (1 + lam x)^2``; peaks at ``x = 1/lam`` with value ``1/(4 lam)``."""
    x = np.asarray(x, dtype=np.float64)
    return x / (1.0 + lam * x) ** 2
