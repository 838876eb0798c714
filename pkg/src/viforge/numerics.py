"""Dense symmetric linear algebra and seeded random streams.

Everything here is a pure function of its inputs. ``sym_eig`` uses a cyclic
Jacobi sweep for small matrices and falls back to LAPACK (``numpy.linalg.eigh``)
above ``JACOBI_MAX_DIM`` where a Python-level Jacobi loop is too slow.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NotPSDError

JACOBI_MAX_DIM = 64
JACOBI_TOL = 1e-12
PINV_CUTOFF = 1e-10
SYMMETRY_TOL = 1e-10

# fixed ids so renaming a stream never silently reshuffles draws
STREAM_IDS = {
    "data": 0,
    "init": 1,
    "tree-noise": 2,
    "subset-sampling": 3,
    "split": 4,
    "eval": 5,
}


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray   # descending
    eigenvectors: np.ndarray  # columns

    def reconstruct(self):
        q = self.eigenvectors
        return (q * self.eigenvalues) @ q.T


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, path)``.

    ``path`` is a tuple of non-negative ints; ``child`` extends it, so any
    number of independent sub-streams can be derived from one seed.
    """

    seed: int
    stream: tuple = ()

    def child(self, key) -> "RngStream":
        if isinstance(key, str):
            key = STREAM_IDS.get(key, zlib.crc32(key.encode("utf-8")) + 1024)
        if int(key) < 0:
            raise InvalidArgumentError(f"stream key must be non-negative, got {key}")
        return RngStream(self.seed, self.stream + (int(key),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=self.stream)
        return np.random.Generator(np.random.PCG64(ss))


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise InvalidArgumentError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError(f"{name} has non-finite entries")
    return a


def _check_symmetric(a):
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got shape {a.shape}")
    scale = max(np.abs(a).max(initial=0.0), np.finfo(float).tiny)
    if np.abs(a - a.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise InvalidArgumentError("matrix is not symmetric")
    return 0.5 * (a + a.T)


def _fix_signs(vecs):
    # largest-magnitude entry of each column made positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def jacobi_eig(a, tol=JACOBI_TOL, max_sweeps=100):
    """Cyclic Jacobi eigensolver; returns (eigenvalues, eigenvectors) unsorted."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    norm_f = np.linalg.norm(a)
    if n < 2 or norm_f == 0.0:
        return np.diag(a).copy(), v
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off < tol * norm_f:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (float(a[q, q]) - float(a[p, p])) / (2.0 * float(apq))
                if abs(theta) > 1e150:  # theta**2 would overflow; use the asymptotic root
                    t = 0.5 / theta
                else:
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(1.0 + theta * theta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


def sym_eig(a, method="auto") -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    ``method`` is ``"jacobi"``, ``"lapack"`` or ``"auto"`` (Jacobi up to
    ``JACOBI_MAX_DIM`` rows).
    """
    a = _check_symmetric(a)
    if method == "auto":
        method = "jacobi" if a.shape[0] <= JACOBI_MAX_DIM else "lapack"
    if method == "jacobi":
        vals, vecs = jacobi_eig(a)
    elif method == "lapack":
        vals, vecs = np.linalg.eigh(a)
    else:
        raise InvalidArgumentError(f"unknown eigen method {method!r}")
    order = np.argsort(-vals, kind="stable")
    return EigenDecomposition(vals[order], _fix_signs(vecs[:, order]))


def quad_form_pinv(a, c, cutoff=PINV_CUTOFF, eig: EigenDecomposition | None = None) -> float:
    """Return ``c^T A^+ c`` with eigenvalues below ``cutoff * lambda_max`` zeroed."""
    if not 0.0 < cutoff < 1.0:
        raise InvalidArgumentError("cutoff must lie in (0, 1)")
    c = np.asarray(c, dtype=float).ravel()
    if eig is None:
        eig = sym_eig(a)
    if c.shape[0] != eig.eigenvalues.shape[0]:
        raise InvalidArgumentError("dimension of c does not match A")
    lam = eig.eigenvalues
    lam_max = lam[0] if lam.size else 0.0
    if lam_max <= 0.0:
        if lam.size and lam[-1] < 0.0:
            raise NotPSDError("matrix has no positive eigenvalue")
        return 0.0
    if lam[-1] < -cutoff * lam_max:
        raise NotPSDError(f"matrix is not PSD (min eigenvalue {lam[-1]:.3g})")
    keep = lam > cutoff * lam_max
    proj = eig.eigenvectors[:, keep].T @ c
    return float(np.sum(proj * proj / lam[keep]))


def mvn_sample(mean, cov, n, rng: RngStream) -> np.ndarray:
    """Draw ``n`` rows from N(mean, cov); Cholesky with an eigen fallback."""
    mean = np.asarray(mean, dtype=float).ravel()
    cov = _check_symmetric(cov)
    if cov.shape[0] != mean.shape[0]:
        raise InvalidArgumentError("mean and cov dimensions differ")
    z = rng.generator().standard_normal((int(n), mean.shape[0]))
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        scale = max(abs(vals).max(initial=0.0), 1.0)
        if vals.min(initial=0.0) < -1e-10 * scale:
            raise NotPSDError("covariance matrix is indefinite") from None
        factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return mean + z @ factor.T
