"""Shared P1 finite-element helpers: cell geometry and a fixed-pattern
sparse assembler.

The assembler exploits that the sparsity pattern of a FEM operator is set
by the connectivity alone: the CSR structure and the scatter map from
cell-local entries to CSR slots are computed once, and each assembly then
reduces to one weighted bincount.
"""

import numpy as np
from scipy import sparse

__all__ = ["p1_geometry", "FixedPattern"]


def p1_geometry(vertices, cells):
    """Cell volumes (m,) and constant P1 shape gradients (m, 4, 3).

    Raises if any cell has non-positive volume.
    """
    e = vertices[cells]
    jac = np.stack([e[:, 1] - e[:, 0], e[:, 2] - e[:, 0], e[:, 3] - e[:, 0]], axis=2)
    det = np.linalg.det(jac)
    if np.any(det <= 0.0):
        bad = int(np.flatnonzero(det <= 0.0)[0])
        raise ValueError(f"assembly on inverted cell {bad}")
    vols = det / 6.0
    inv = np.linalg.inv(jac)
    grads = np.empty((cells.shape[0], 4, 3))
    grads[:, 1:, :] = inv
    grads[:, 0, :] = -inv.sum(axis=1)
    return vols, grads


class FixedPattern:
    """CSR matrix with a frozen sparsity pattern fed from flat COO triplets."""

    def __init__(self, rows, cols, shape):
        rows = np.asarray(rows).ravel()
        cols = np.asarray(cols).ravel()
        order = np.lexsort((cols, rows))
        r, c = rows[order], cols[order]
        new = np.empty(r.size, dtype=bool)
        new[0] = True
        new[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
        slot_sorted = np.cumsum(new) - 1
        self.nnz = int(slot_sorted[-1]) + 1
        self._slots = np.empty(r.size, dtype=np.int64)
        self._slots[order] = slot_sorted
        self.indices = c[new].astype(np.int32)
        unique_rows = r[new]
        self.indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(self.indptr, unique_rows + 1, 1)
        self.indptr = np.cumsum(self.indptr)
        self.shape = shape

    def assemble(self, data):
        """Sum flat entry values (aligned with the constructor triplets)
        into a fresh CSR matrix."""
        vals = np.bincount(self._slots, weights=np.asarray(data).ravel(),
                           minlength=self.nnz)
        return sparse.csr_matrix((vals, self.indices.copy(), self.indptr.copy()),
                                 shape=self.shape)
