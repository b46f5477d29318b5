"""Self-contained dense numerics: stable reductions, small eigen/inverse
solvers, finite-difference oracles and seeded randomness.

Everything operates on float64 numpy arrays. Token matrices follow the
d x N convention (one token per column); ``as_token_matrix`` converts
row-per-token data. All functions are pure; ``Rng`` is the only stateful
object and is meant to be owned by exactly one caller at a time.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# validated constructors
# ---------------------------------------------------------------------------

def as_vector(data, dim: int | None = None) -> np.ndarray:
    """Return a finite float64 1-D array, optionally checking its length."""
    v = np.ascontiguousarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a vector, got ndim={v.ndim}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"expected dim {dim}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Return a finite float64 2-D row-major array with optional shape check."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def as_token_matrix(data, orientation: str = "columns") -> np.ndarray:
    """Coerce token data to the d x N one-token-per-column layout.

    ``orientation="rows"`` accepts the common N x d layout and transposes.
    """
    m = as_matrix(data)
    if orientation == "columns":
        return m
    if orientation == "rows":
        return np.ascontiguousarray(m.T)
    raise ValueError(f"unknown orientation {orientation!r}")


# ---------------------------------------------------------------------------
# seeded randomness
# ---------------------------------------------------------------------------

def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """Deterministic xoshiro256** stream seeded through splitmix64.

    The recurrence is fixed integer arithmetic, so a given seed yields the
    same stream on every platform. Instances are cheap; create one per
    independent task instead of sharing.
    """

    def __init__(self, seed: int):
        state = seed & _MASK64
        s = []
        for _ in range(4):
            state, word = _splitmix64(state)
            s.append(word)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        out = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return out

    def uniform(self) -> float:
        """One double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([(self.next_u64() >> 11) for _ in range(n)],
                        dtype=np.float64) * 2.0 ** -53

    def normals(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller on the uniform stream."""
        pairs = (n + 1) // 2
        # u1 in (0, 1] so the log is always finite
        u1 = (np.array([(self.next_u64() >> 11) for _ in range(pairs)],
                       dtype=np.float64) + 1.0) * 2.0 ** -53
        u2 = self.uniforms(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = (2.0 * math.pi) * u2
        return np.concatenate([radius * np.cos(angle),
                               radius * np.sin(angle)])[:n]

    def normal(self) -> float:
        return float(self.normals(1)[0])

    def normal_vector(self, dim: int) -> np.ndarray:
        return self.normals(dim)

    def normal_matrix(self, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
        return scale * self.normals(rows * cols).reshape(rows, cols)


def orthonormal_rows(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """Random matrix with orthonormal rows (Gaussian draw, Gram-Schmidt)."""
    if rows > cols:
        raise ValueError("cannot orthonormalize more rows than columns")
    while True:
        m = rng.normal_matrix(rows, cols)
        ok = True
        for i in range(rows):
            for j in range(i):
                m[i] -= (m[i] @ m[j]) * m[j]
            norm = float(np.linalg.norm(m[i]))
            if norm < 1e-8:
                ok = False
                break
            m[i] /= norm
        if ok:
            return m


def sample_hypersphere(rng: Rng, dim: int, radius: float) -> np.ndarray:
    """Uniform point on the radius-``radius`` sphere in R^dim.

    A Gaussian draw is rescaled to the exact target norm; degenerate draws
    (norm below 1e-12) are redrawn.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    while True:
        v = rng.normals(dim)
        norm = float(np.linalg.norm(v))
        if norm >= 1e-12:
            return (radius / norm) * v


# ---------------------------------------------------------------------------
# stable reductions
# ---------------------------------------------------------------------------

def logsumexp(values: np.ndarray) -> float:
    """log(sum(exp(values))) computed with a max shift; exact for one entry."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty reduction")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite entries in reduction")
    top = float(np.max(v))
    if v.size == 1:
        return top
    return top + math.log(float(np.sum(np.exp(v - top))))


def softmax(values: np.ndarray) -> np.ndarray:
    """Probability-simplex image of ``values``; shift-invariant by max shift."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty reduction")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite entries in reduction")
    shifted = np.exp(v - np.max(v))
    return shifted / np.sum(shifted)


def softmax_lse_rows(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise (softmax, log-sum-exp) with the same max-shift stabilization."""
    top = np.max(scores, axis=-1, keepdims=True)
    shifted = np.exp(scores - top)
    total = np.sum(shifted, axis=-1)
    return shifted / total[..., None], top[..., 0] + np.log(total)


# ---------------------------------------------------------------------------
# symmetric eigensolver (cyclic Jacobi)
# ---------------------------------------------------------------------------

def _offdiag_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def sym_eig(a: np.ndarray, *, max_sweeps: int = 100,
            tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues ascending, eigenvectors as columns). Sweeps stop
    once the off-diagonal Frobenius norm drops below ``tol`` or after
    ``max_sweeps`` full passes. Input must be square and symmetric to
    within 1e-10 (it is symmetrized before iterating).
    """
    m = as_matrix(a)
    n, cols = m.shape
    if n != cols:
        raise ValueError("eigensolver requires a square matrix")
    scale = max(1.0, float(np.max(np.abs(m))))
    if float(np.max(np.abs(m - m.T))) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    a = 0.5 * (m + m.T)
    vecs = np.eye(n)
    if n == 1:
        return a[0, :1].copy(), vecs

    for _ in range(max_sweeps):
        if _offdiag_norm(a) < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(1.0, theta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p] = rot_p
                a[:, q] = rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :] = rot_p
                a[q, :] = rot_q
                a[p, q] = 0.0
                a[q, p] = 0.0
                rot_p = c * vecs[:, p] - s * vecs[:, q]
                rot_q = s * vecs[:, p] + c * vecs[:, q]
                vecs[:, p] = rot_p
                vecs[:, q] = rot_q

    order = np.argsort(np.diag(a), kind="stable")
    return np.diag(a)[order].copy(), vecs[:, order]


def sym_eigvals(a: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of a symmetric matrix (see ``sym_eig``)."""
    vals, _ = sym_eig(a)
    return vals


# ---------------------------------------------------------------------------
# inverses
# ---------------------------------------------------------------------------

def solve_inverse(a: np.ndarray, *, pivot_tol: float = 1e-12) -> np.ndarray:
    """Matrix inverse by Gauss-Jordan elimination with partial pivoting."""
    m = as_matrix(a)
    n, cols = m.shape
    if n != cols:
        raise ValueError("inverse requires a square matrix")
    work = np.hstack([m.copy(), np.eye(n)])
    for col in range(n):
        pivot_row = col + int(np.argmax(np.abs(work[col:, col])))
        pivot = work[pivot_row, col]
        if abs(pivot) < pivot_tol:
            raise ValueError("singular matrix")
        if pivot_row != col:
            work[[col, pivot_row]] = work[[pivot_row, col]]
        work[col] /= work[col, col]
        ratios = work[:, col].copy()
        ratios[col] = 0.0
        work -= np.outer(ratios, work[col])
    return np.ascontiguousarray(work[:, n:])


def range_space_pinv(w: np.ndarray) -> np.ndarray:
    """Pseudoinverse W^T (W W^T)^-1 of a wide full-row-rank matrix.

    Coincides with the Moore-Penrose pseudoinverse when the rows are
    independent; requires rows <= cols.
    """
    m = as_matrix(w)
    rows, cols = m.shape
    if rows > cols:
        raise ValueError("range-space pseudoinverse requires rows <= cols")
    gram = m @ m.T
    try:
        gram_inv = solve_inverse(gram)
    except ValueError as err:
        raise ValueError("rank-deficient rows") from err
    return m.T @ gram_inv


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def fd_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar field, coordinate by coordinate."""
    x = as_vector(x)
    grad = np.empty_like(x)
    probe = x.copy()
    for j in range(x.shape[0]):
        probe[j] = x[j] + h
        hi = float(f(probe))
        probe[j] = x[j] - h
        lo = float(f(probe))
        probe[j] = x[j]
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise ValueError("non-finite function value in finite difference")
        grad[j] = (hi - lo) / (2.0 * h)
    return grad


def fd_jacobian(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector field f: R^n -> R^m."""
    x = as_vector(x)
    probe = x.copy()
    cols = []
    for j in range(x.shape[0]):
        probe[j] = x[j] + h
        hi = np.asarray(f(probe), dtype=np.float64)
        probe[j] = x[j] - h
        lo = np.asarray(f(probe), dtype=np.float64)
        probe[j] = x[j]
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            raise ValueError("non-finite function value in finite difference")
        cols.append((hi - lo) / (2.0 * h))
    return np.stack(cols, axis=1)
