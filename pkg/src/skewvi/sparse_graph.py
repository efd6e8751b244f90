"""Sparsity patterns for block-structured precision matrices and a sparse
unit-lower-triangular factor type with forward/backward solves.

Variable ordering is fixed as (b_1, ..., b_n, eta): local blocks first,
global block last.  Under this ordering the strictly-lower sparsity of the
factor L matches that of the precision Q = L D_kappa^2 L^T for both the
block-arrow (markov_order=0) and block-tridiagonal-arrow (markov_order=1)
structures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Instrumentation counters used by tests: dense p x p materializations and
# cumulative entry count touched by triangular solves.
_counters = {"dense_materializations": 0, "solve_entries": 0}


def counter(name: str) -> int:
    return _counters[name]


def reset_counter(name: str) -> None:
    _counters[name] = 0


@dataclass(frozen=True)
class SparsityPattern:
    """Free strictly-lower positions of L, stored column-major (CSC-like)."""

    n_blocks: int
    block_dims: tuple
    global_dim: int
    markov_order: int
    rows: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)
    col_ptr: np.ndarray = field(repr=False)

    @property
    def total_dim(self) -> int:
        return int(sum(self.block_dims) + self.global_dim)

    @property
    def nnz(self) -> int:
        return len(self.rows)

    @property
    def entries(self):
        """Ordered list of (row, col) free positions, column-major."""
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def conditional_independence_mask(self) -> np.ndarray:
        """Dense boolean mask of allowed off-diagonal positions of Q.

        Symmetric; True where the structure permits a nonzero.  Diagnostics
        only.
        """
        p = self.total_dim
        block = _block_index(self.n_blocks, self.block_dims, self.global_dim)
        n = self.n_blocks
        mask = np.zeros((p, p), dtype=bool)
        for i in range(p):
            for j in range(p):
                bi, bj = block[i], block[j]
                if bi == bj or bi == n or bj == n:
                    mask[i, j] = True
                elif self.markov_order == 1 and abs(bi - bj) == 1:
                    mask[i, j] = True
        return mask

    def describe(self) -> dict:
        return {
            "n_blocks": self.n_blocks,
            "block_dims": list(self.block_dims),
            "global_dim": self.global_dim,
            "markov_order": self.markov_order,
        }

    @staticmethod
    def from_descriptor(d: dict) -> "SparsityPattern":
        return build_pattern(
            d["n_blocks"], d["block_dims"], d["global_dim"], d["markov_order"]
        )


def _block_index(n_blocks, block_dims, global_dim):
    """Map coordinate index -> block id; the global block gets id n_blocks."""
    ids = []
    for b, d in enumerate(block_dims):
        ids.extend([b] * d)
    ids.extend([n_blocks] * global_dim)
    return np.asarray(ids, dtype=int)


def build_pattern(n_blocks, block_dims, global_dim, markov_order) -> SparsityPattern:
    """Construct the free strictly-lower pattern for the given block layout.

    markov_order=0 gives the block-arrow structure of a random effects
    posterior; markov_order=1 additionally frees the sub-diagonal local
    blocks (state space structure).
    """
    if markov_order not in (0, 1):
        raise ValueError(f"markov_order must be 0 or 1, got {markov_order}")
    block_dims = tuple(int(d) for d in block_dims)
    if len(block_dims) != n_blocks:
        raise ValueError("block_dims length must equal n_blocks")
    if any(d < 1 for d in block_dims):
        raise ValueError("all block dims must be >= 1")
    if global_dim < 0:
        raise ValueError("global_dim must be >= 0")
    p = sum(block_dims) + global_dim
    if p == 0:
        raise ValueError("total dimension must be positive")

    offsets = np.concatenate(([0], np.cumsum(block_dims)))
    g0 = offsets[-1]  # first global index

    rows = []
    cols = []
    col_ptr = [0]
    for j in range(p):
        col_rows = []
        if j < g0:
            b = int(np.searchsorted(offsets, j, side="right") - 1)
            # within-block strictly-lower part
            col_rows.extend(range(j + 1, offsets[b + 1]))
            # next local block for order-1 Markov structure
            if markov_order == 1 and b + 1 < n_blocks:
                col_rows.extend(range(offsets[b + 1], offsets[b + 2]))
            # global rows couple to everything
            col_rows.extend(range(g0, p))
        else:
            col_rows.extend(range(j + 1, p))
        rows.extend(col_rows)
        cols.extend([j] * len(col_rows))
        col_ptr.append(len(rows))

    return SparsityPattern(
        n_blocks=n_blocks,
        block_dims=block_dims,
        global_dim=int(global_dim),
        markov_order=int(markov_order),
        rows=np.asarray(rows, dtype=np.intp),
        cols=np.asarray(cols, dtype=np.intp),
        col_ptr=np.asarray(col_ptr, dtype=np.intp),
    )


@dataclass
class UnitLowerSparse:
    """Unit-diagonal lower-triangular matrix, nonzeros only at pattern entries.

    The unit diagonal is implicit and never stored, so it cannot drift
    during optimization.  Instances are treated as immutable values.
    """

    pattern: SparsityPattern
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.pattern.nnz,):
            raise ValueError(
                f"values length {self.values.shape} does not match pattern "
                f"nnz {self.pattern.nnz}"
            )

    @property
    def p(self) -> int:
        return self.pattern.total_dim

    def with_values(self, values) -> "UnitLowerSparse":
        return UnitLowerSparse(self.pattern, np.asarray(values, dtype=float))

    @staticmethod
    def identity(pattern: SparsityPattern) -> "UnitLowerSparse":
        return UnitLowerSparse(pattern, np.zeros(pattern.nnz))

    def to_dense(self) -> np.ndarray:
        _counters["dense_materializations"] += 1
        p = self.p
        out = np.eye(p)
        out[self.pattern.rows, self.pattern.cols] = self.values
        return out

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """L @ x for x of shape (p,) or (p, m)."""
        x = _check_vec(x, self.p)
        y = x.astype(float).copy()
        pat = self.pattern
        if pat.nnz:
            contrib = self.values[:, None] * x[pat.cols] if x.ndim == 2 \
                else self.values * x[pat.cols]
            np.add.at(y, pat.rows, contrib)
        return y

    def matvec_t(self, x: np.ndarray) -> np.ndarray:
        """L.T @ x for x of shape (p,) or (p, m)."""
        x = _check_vec(x, self.p)
        y = x.astype(float).copy()
        pat = self.pattern
        if pat.nnz:
            contrib = self.values[:, None] * x[pat.rows] if x.ndim == 2 \
                else self.values * x[pat.rows]
            np.add.at(y, pat.cols, contrib)
        return y

    def solve_lower(self, b: np.ndarray) -> np.ndarray:
        """Solve L x = b by forward substitution; cost O(nnz)."""
        b = _check_vec(b, self.p)
        x = b.astype(float).copy()
        pat = self.pattern
        _counters["solve_entries"] += pat.nnz
        vals = self.values
        batched = x.ndim == 2
        for j in range(self.p):
            s, e = pat.col_ptr[j], pat.col_ptr[j + 1]
            if s == e:
                continue
            if batched:
                x[pat.rows[s:e]] -= vals[s:e, None] * x[j]
            else:
                x[pat.rows[s:e]] -= vals[s:e] * x[j]
        return x

    def solve_lower_t(self, b: np.ndarray) -> np.ndarray:
        """Solve L.T x = b by back substitution; cost O(nnz)."""
        b = _check_vec(b, self.p)
        x = b.astype(float).copy()
        pat = self.pattern
        _counters["solve_entries"] += pat.nnz
        vals = self.values
        for j in range(self.p - 1, -1, -1):
            s, e = pat.col_ptr[j], pat.col_ptr[j + 1]
            if s == e:
                continue
            x[j] -= vals[s:e] @ x[pat.rows[s:e]]
        return x


def _check_vec(x, p):
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[0] != p:
        raise ValueError(f"expected vector of length {p} (got shape {x.shape})")
    return x


def solve_lower(L: UnitLowerSparse, b) -> np.ndarray:
    """Return L^{-1} b."""
    return L.solve_lower(b)


def solve_lower_transpose(L: UnitLowerSparse, b) -> np.ndarray:
    """Return L^{-T} b."""
    return L.solve_lower_t(b)


def assemble_precision(L: UnitLowerSparse, kappa) -> np.ndarray:
    """Dense precision Q = L D_kappa^2 L^T.  Diagnostics only: the optimizer
    never materializes Q."""
    kappa = np.asarray(kappa, dtype=float)
    if kappa.shape != (L.p,):
        raise ValueError(f"kappa must have length {L.p}")
    if np.any(kappa <= 0):
        raise ValueError("kappa entries must be positive")
    dense = L.to_dense()
    _counters["dense_materializations"] += 1
    return (dense * kappa**2) @ dense.T
