"""Dense float64 matrices and the numerical kernels built on them.

A "matrix" here is simply a 2-D ``numpy.ndarray`` of dtype float64. Higher
modules mostly work through :mod:`ept.autodiff`, which calls the same kernels.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import RankError, ShapeError

_AXES = {"rows": 0, "cols": 1}


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a C-contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(m, axis="cols") -> np.ndarray:
    """Numerically stable softmax.

    ``axis="cols"`` normalises across the columns of each row (rows sum to 1);
    ``axis="rows"`` normalises down each column. Integer axes are accepted for
    n-d arrays.
    """
    ax = _AXES.get(axis, axis)
    x = np.asarray(m, dtype=np.float64)
    z = np.exp(x - x.max(axis=ax, keepdims=True))
    return z / z.sum(axis=ax, keepdims=True)


def relu(m) -> np.ndarray:
    return np.maximum(np.asarray(m, dtype=np.float64), 0.0)


def _jacobi_columns(x: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60):
    """One-sided (Hestenes) Jacobi on the columns of ``x``.

    Returns ``(w, v)`` with ``w = x @ v`` having mutually orthogonal columns and
    ``v`` orthogonal. Column norms of ``w`` are the singular values.
    """
    w = x.copy()
    n = w.shape[1]
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp, wq = w[:, p], w[:, q]
                alpha = wp @ wp
                beta = wq @ wq
                gamma = wp @ wq
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                # a tiny gamma overflows zeta to inf, which correctly gives t = 0
                with np.errstate(over="ignore"):
                    zeta = (beta - alpha) / (2.0 * gamma)
                    t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * wp - s * wq
                w[:, q] = s * wp + c * wq
                w[:, p] = new_p
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            break
    return w, v


def svd(m):
    """Thin SVD ``m = u @ diag(sigma) @ vt`` via one-sided Jacobi.

    Singular values come back non-increasing. Each left singular vector is
    sign-normalised so its largest-magnitude entry is positive (first one on
    ties). Columns of ``u`` paired with a zero singular value may be zero.
    """
    m = as_matrix(m)
    rows, cols = m.shape
    transposed = cols > rows
    x = m.T if transposed else m
    w, v = _jacobi_columns(np.array(x))
    sigma = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-sigma, kind="stable")
    sigma, w, v = sigma[order], w[:, order], v[:, order]
    safe = np.where(sigma > 0, sigma, 1.0)
    left, right = w / safe, v
    if transposed:
        # x = m^T = w v^T  =>  m = v w^T: swap the roles of the factors.
        left, right = right, left
    for j in range(left.shape[1]):
        if sigma[j] == 0:
            continue
        k = np.argmax(np.abs(left[:, j]))
        if left[k, j] < 0:
            left[:, j] = -left[:, j]
            right[:, j] = -right[:, j]
    return left, sigma, right.T


def truncated_svd(m, r: int):
    """Best rank-``r`` factorisation ``m ≈ a @ b`` with ``a = U_r Σ_r`` and ``b = V_r^T``."""
    m = as_matrix(m)
    if not 1 <= r <= min(m.shape):
        raise RankError(f"rank {r} outside [1, {min(m.shape)}] for shape {m.shape}")
    u, sigma, vt = svd(m)
    return u[:, :r] * sigma[:r], vt[:r].copy()


# -- binary layout: u64 rows, u64 cols (little endian), then row-major <f8 payload


def matrix_to_bytes(m) -> bytes:
    m = as_matrix(m)
    header = struct.pack("<QQ", *m.shape)
    return header + m.astype("<f8").tobytes(order="C")


def write_matrix(fh: BinaryIO, m) -> None:
    fh.write(matrix_to_bytes(m))


def read_matrix(fh: BinaryIO) -> np.ndarray:
    header = fh.read(16)
    if len(header) != 16:
        raise EOFError("truncated matrix header")
    rows, cols = struct.unpack("<QQ", header)
    payload = fh.read(8 * rows * cols)
    if len(payload) != 8 * rows * cols:
        raise EOFError(f"truncated matrix payload for shape ({rows}, {cols})")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
