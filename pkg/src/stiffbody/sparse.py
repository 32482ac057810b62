"""Symmetric block-sparse matrices over per-body 12x12 blocks.

The Newton system couples bodies only where the broad phase found
overlapping interval boxes, so the matrix is stored as dense diagonal
blocks plus a dictionary of upper off-diagonal blocks keyed by canonical
body pairs. Factorization is a block Cholesky with on-the-fly fill-in;
a failed pivot carries the offending block index (it signals a projection
bug upstream, since every assembled block is PSD plus an SPD mass term).
"""
from __future__ import annotations

import numpy as np

__all__ = ["BlockSparseMatrix", "BlockCholesky", "FactorizationError"]


class FactorizationError(RuntimeError):
    """Cholesky pivot failure; `block` is the offending diagonal index."""

    def __init__(self, block: int, message: str = ""):
        self.block = block
        super().__init__(
            message or f"non-SPD pivot at diagonal block {block} "
            "(per-pair PSD projection violated?)"
        )


class BlockSparseMatrix:
    """Symmetric matrix of dense b x b blocks (b = 12 for affine bodies).

    Only upper off-diagonal blocks (i < j) are stored. The sparsity
    pattern is fixed at construction from the culling overlap pairs; adds
    outside the pattern raise, which catches stale-pattern bugs.
    """

    def __init__(self, n_blocks: int, pairs=(), block_dim: int = 12):
        self.n = int(n_blocks)
        self.b = int(block_dim)
        self.diag = np.zeros((self.n, self.b, self.b))
        self.off: dict[tuple[int, int], np.ndarray] = {}
        for i, j in pairs:
            key = (min(int(i), int(j)), max(int(i), int(j)))
            if key[0] == key[1]:
                raise ValueError("off-diagonal pair must couple two blocks")
            if key not in self.off:
                self.off[key] = np.zeros((self.b, self.b))

    @property
    def shape(self):
        return (self.n * self.b, self.n * self.b)

    def reset(self):
        self.diag[:] = 0.0
        for blk in self.off.values():
            blk[:] = 0.0

    def add_diag(self, i: int, block: np.ndarray):
        self.diag[i] += block

    def add_off(self, i: int, j: int, block: np.ndarray):
        """Accumulate the (i, j) coupling; transposed automatically when i > j."""
        if i < j:
            self.off[(i, j)] += block
        else:
            self.off[(j, i)] += block.T

    def to_dense(self) -> np.ndarray:
        b = self.b
        A = np.zeros(self.shape)
        for i in range(self.n):
            A[i * b : (i + 1) * b, i * b : (i + 1) * b] = self.diag[i]
        for (i, j), blk in self.off.items():
            A[i * b : (i + 1) * b, j * b : (j + 1) * b] = blk
            A[j * b : (j + 1) * b, i * b : (i + 1) * b] = blk.T
        return A

    def matvec(self, x: np.ndarray) -> np.ndarray:
        b = self.b
        xb = x.reshape(self.n, b)
        out = np.einsum("nij,nj->ni", self.diag, xb)
        for (i, j), blk in self.off.items():
            out[i] += blk @ xb[j]
            out[j] += blk.T @ xb[i]
        return out.reshape(-1)

    def factor(self) -> "BlockCholesky":
        return BlockCholesky(self)


class BlockCholesky:
    """Lower block Cholesky L L^T = A with symbolic fill-in."""

    def __init__(self, A: BlockSparseMatrix):
        n, b = A.n, A.b
        # symbolic pass: column structures including fill
        cols: list[set[int]] = [set() for _ in range(n)]
        for (i, j) in A.off:
            cols[i].add(j)  # lower storage: row j > column i
        for j in range(n):
            rows = sorted(cols[j])
            for a in range(len(rows)):
                for c in range(a + 1, len(rows)):
                    cols[rows[a]].add(rows[c])

        L_diag = np.zeros((n, b, b))
        L_off: dict[tuple[int, int], np.ndarray] = {}
        rows_of: list[list[int]] = [sorted(cols[j]) for j in range(n)]
        # column k contributions pending for each later column
        for j in range(n):
            D = A.diag[j].copy()
            for k in range(j):
                if j in cols[k]:
                    Ljk = L_off[(j, k)]
                    D -= Ljk @ Ljk.T
            try:
                Ljj = np.linalg.cholesky(0.5 * (D + D.T))
            except np.linalg.LinAlgError as exc:
                raise FactorizationError(j) from exc
            L_diag[j] = Ljj
            for i in rows_of[j]:
                B = A.off.get((j, i))
                B = B.T.copy() if B is not None else np.zeros((b, b))
                for k in range(j):
                    if i in cols[k] and j in cols[k]:
                        B -= L_off[(i, k)] @ L_off[(j, k)].T
                # L_ij = B Ljj^{-T}
                L_off[(i, j)] = _solve_lower_T(Ljj, B)
        self.n, self.b = n, b
        self.L_diag = L_diag
        self.L_off = L_off
        self.rows_of = rows_of
        self._A = A

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        n, b = self.n, self.b
        y = rhs.reshape(n, b).copy()
        # forward: L y = rhs
        for j in range(n):
            y[j] = _forward_lower(self.L_diag[j], y[j])
            for i in self.rows_of[j]:
                y[i] -= self.L_off[(i, j)] @ y[j]
        # backward: L^T x = y
        for j in range(n - 1, -1, -1):
            for i in self.rows_of[j]:
                y[j] -= self.L_off[(i, j)].T @ y[i]
            y[j] = _backward_upper(self.L_diag[j].T, y[j])
        return y.reshape(-1)

    def solve_refined(self, rhs: np.ndarray, rel_tol: float = 1e-8,
                      max_refine: int = 3) -> np.ndarray:
        """Solve with iterative refinement until |A x - rhs| <= rel_tol |rhs|."""
        x = self.solve(rhs)
        norm = np.linalg.norm(rhs)
        if norm == 0.0:
            return x
        for _ in range(max_refine):
            r = rhs - self._A.matvec(x)
            if np.linalg.norm(r) <= rel_tol * norm:
                break
            x = x + self.solve(r)
        return x


def _solve_lower_T(L, B):
    """X with X L^T = B for lower-triangular L (i.e. L X^T = B^T)."""
    return np.linalg.solve(L, B.T).T


def _forward_lower(L, b):
    return np.linalg.solve(L, b)


def _backward_upper(U, b):
    return np.linalg.solve(U, b)
