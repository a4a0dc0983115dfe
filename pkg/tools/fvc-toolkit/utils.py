import hashlib
from typing import Callable

import numpy as np


def complex_step_jacobian(fun: Callable[[np.ndarray], np.ndarray], x0, h: float = 1e-20):
    """Jacobian of a real-analytic vector function by complex-step differentiation.

    ``fun`` must be written in real arithmetic (no abs, conj or comparisons on
    the perturbed argument) so that the imaginary perturbation propagates.
    Column k is Im(f(x0 + i*h*e_k)) / h, exact to machine precision.
    """
    x0 = np.asarray(x0, dtype=float)
    f0 = np.asarray(fun(x0.astype(complex)))
    jac = np.zeros((f0.size, x0.size))
    for k in range(x0.size):
        x = x0.astype(complex)
        x[k] += 1j * h
        jac[:, k] = np.imag(np.asarray(fun(x))) / h
    return jac


def dq_expand(ycomplex) -> np.ndarray:
    """Real 2N x 2N expansion of a complex N x N matrix.

    Entry g + jb becomes the block [[g, -b], [b, g]]; bus k owns rows and
    columns 2k (real part) and 2k + 1 (imaginary part).
    """
    ycomplex = np.atleast_2d(np.asarray(ycomplex, dtype=complex))
    rows, cols = ycomplex.shape
    out = np.zeros((2 * rows, 2 * cols))
    out[0::2, 0::2] = ycomplex.real
    out[0::2, 1::2] = -ycomplex.imag
    out[1::2, 0::2] = ycomplex.imag
    out[1::2, 1::2] = ycomplex.real
    return out


def symmetrize(mat):
    return 0.5 * (mat + mat.T)


def is_hurwitz(a: np.ndarray, margin: float = 0.0) -> bool:
    if a.size == 0:
        return True
    return bool(np.max(np.linalg.eigvals(a).real) < -margin)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def matrix_to_json(mat) -> dict:
    # row-major with explicit dims
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    return {"rows": int(mat.shape[0]), "cols": int(mat.shape[1]), "data": [float(v) for v in mat.ravel()]}


def matrix_from_json(obj: dict) -> np.ndarray:
    return np.asarray(obj["data"], dtype=float).reshape(obj["rows"], obj["cols"])
