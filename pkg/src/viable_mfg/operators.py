"""Finite-volume building blocks on a masked Cartesian grid.

Faces between an active and an inactive cell carry zero flux, which is the
discrete co-normal Neumann condition.  The diffusion operator uses the
diagonal of ``a + eps I`` at face midpoints; a zero coefficient gives an
exactly zero face flux.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ModelError
from .fields import MaskedGrid
from .models import DiffusionField


def diffusion_operator(mesh: MaskedGrid, a: DiffusionField, eps: float = 0.0) -> sp.csr_matrix:
    """Symmetric PSD matrix of -div((a + eps I) D .) with zero-flux mask faces."""
    rows, cols, vals = [], [], []
    diag = np.zeros(mesh.n)
    h2 = mesh.h**2
    for k in range(mesh.dim):
        left, right = mesh.faces(k)
        if len(left) == 0:
            continue
        mid = 0.5 * (mesh.centers[left] + mesh.centers[right])
        A = a(mid)
        off = np.abs(A).sum(axis=2) - np.abs(np.einsum("nii->ni", A))
        if np.any(off > 1e-12):
            raise ModelError("finite-volume diffusion supports diagonal a only")
        coef = (A[:, k, k] + eps) / h2
        if np.any(coef < -1e-14):
            raise ModelError("diffusion coefficient is negative at a face")
        coef = np.maximum(coef, 0.0)
        np.add.at(diag, left, coef)
        np.add.at(diag, right, coef)
        rows += [left, right]
        cols += [right, left]
        vals += [-coef, -coef]
    rows.append(np.arange(mesh.n))
    cols.append(np.arange(mesh.n))
    vals.append(diag)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(mesh.n, mesh.n))


def one_sided(mesh: MaskedGrid, u: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Forward and backward differences along ``axis``; 0 across a zero-flux face."""
    h = mesh.h
    plus, minus = mesh.plus[axis], mesh.minus[axis]
    fwd = np.where(plus >= 0, (u[plus] - u) / h, 0.0)
    bwd = np.where(minus >= 0, (u - u[minus]) / h, 0.0)
    return fwd, bwd


def central_gradient(mesh: MaskedGrid, u: np.ndarray) -> np.ndarray:
    out = np.empty((mesh.n, mesh.dim))
    for k in range(mesh.dim):
        fwd, bwd = one_sided(mesh, u, k)
        out[:, k] = 0.5 * (fwd + bwd)
    return out


def cell_gradient(mesh: MaskedGrid, u: np.ndarray) -> np.ndarray:
    """Central difference where both neighbours are active, one-sided otherwise."""
    out = np.zeros((mesh.n, mesh.dim))
    for k in range(mesh.dim):
        fwd, bwd = one_sided(mesh, u, k)
        hp, hm = mesh.plus[k] >= 0, mesh.minus[k] >= 0
        out[:, k] = np.where(hp & hm, 0.5 * (fwd + bwd), fwd + bwd)
    return out


def upwind_gradient(mesh: MaskedGrid, u: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Gradient looking along the state drift -c: backward where c > 0, forward where c < 0."""
    out = np.empty((mesh.n, mesh.dim))
    for k in range(mesh.dim):
        fwd, bwd = one_sided(mesh, u, k)
        out[:, k] = np.where(c[:, k] > 0, bwd, np.where(c[:, k] < 0, fwd, 0.5 * (fwd + bwd)))
    return out


def upwind_operator(mesh: MaskedGrid, c: np.ndarray) -> sp.csr_matrix:
    """Matrix U with (U u)_i = sum_k c_k^+ D^-_k u + c_k^- D^+_k u.

    Rows sum to zero and off-diagonals are nonpositive.  Its transpose is the
    conservative donor-cell transport used by the Fokker-Planck solver.
    """
    h = mesh.h
    rows, cols, vals = [], [], []
    diag = np.zeros(mesh.n)
    idx = np.arange(mesh.n)
    for k in range(mesh.dim):
        cp = np.maximum(c[:, k], 0.0) / h
        cm = np.minimum(c[:, k], 0.0) / h
        has_m = mesh.minus[k] >= 0
        has_p = mesh.plus[k] >= 0
        # c^+ (u_i - u_minus)
        sel = has_m & (cp > 0)
        diag[sel] += cp[sel]
        rows.append(idx[sel])
        cols.append(mesh.minus[k][sel])
        vals.append(-cp[sel])
        # c^- (u_plus - u_i)
        sel = has_p & (cm < 0)
        diag[sel] -= cm[sel]
        rows.append(idx[sel])
        cols.append(mesh.plus[k][sel])
        vals.append(cm[sel])
    rows.append(idx)
    cols.append(idx)
    vals.append(diag)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(mesh.n, mesh.n))


def divergence(mesh: MaskedGrid, v: np.ndarray) -> np.ndarray:
    """Central-difference divergence of a cell-centred vector field (one-sided at mask edges)."""
    out = np.zeros(mesh.n)
    for k in range(mesh.dim):
        fwd, bwd = one_sided(mesh, v[:, k], k)
        both = (mesh.plus[k] >= 0) & (mesh.minus[k] >= 0)
        out += np.where(both, 0.5 * (fwd + bwd), fwd + bwd)
    return out


@dataclass
class LinearSolve:
    """Factorised or iterative solve of a sparse system."""

    matrix: sp.spmatrix
    method: str = "direct"
    tol: float = 1e-12
    maxiter: int = 1000

    def __post_init__(self):
        self.matrix = sp.csc_matrix(self.matrix)
        self._lu = sp.linalg.splu(self.matrix) if self.method == "direct" else None

    def __call__(self, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        if self._lu is not None:
            return self._lu.solve(rhs, trans="T" if transpose else "N")
        A = self.matrix.T if transpose else self.matrix
        x, info = sp.linalg.bicgstab(A, rhs, rtol=self.tol, atol=0.0, maxiter=self.maxiter)
        if info != 0:
            from .errors import SolverDiverged

            raise SolverDiverged(f"iterative solve did not converge (info={info})")
        return x
