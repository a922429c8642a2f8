"""CSR storage of the user-item rating matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import DuplicateEntry, IndexOutOfRange, InvalidRating


class RatingTriplet(NamedTuple):
    user: int
    item: int
    rating: float


def check_triplet(t: RatingTriplet, n: int, m: int) -> None:
    if not (0 <= t.user < n and 0 <= t.item < m):
        raise IndexOutOfRange(f"triplet {tuple(t)} outside {n}x{m} matrix")
    if not math.isfinite(t.rating) or t.rating == 0:
        raise InvalidRating(f"rating of {tuple(t)} must be finite and nonzero")


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Immutable CSR matrix. Arrays are read-only views."""

    n_rows: int
    n_cols: int
    data: np.ndarray
    col_indices: np.ndarray
    row_ptr: np.ndarray

    def __post_init__(self):
        for arr in (self.data, self.col_indices, self.row_ptr):
            arr.setflags(write=False)

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def row_indices(self) -> np.ndarray:
        """Row of every stored value, aligned with ``data``."""
        return np.repeat(np.arange(self.n_rows, dtype=np.int64), np.diff(self.row_ptr))

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_rows, self.n_cols))
        dense[self.row_indices, self.col_indices] = self.data
        return dense

    def triplets(self) -> list[RatingTriplet]:
        return list(nonzero_iter(self))


def csr_from_triplets(triplets: Sequence[RatingTriplet], n: int, m: int) -> CsrMatrix:
    """Build a CSR matrix with rows ascending and columns ascending per row.

    Raises ``DuplicateEntry`` when a (user, item) pair repeats; one rating
    per pair is assumed, so overwriting would hide bad input.
    """
    if n < 0 or m < 0:
        raise IndexOutOfRange("matrix dimensions must be non-negative")
    for t in triplets:
        check_triplet(RatingTriplet(*t), n, m)
    order = sorted(range(len(triplets)), key=lambda i: (triplets[i][0], triplets[i][1]))
    users = np.fromiter((triplets[i][0] for i in order), dtype=np.int64, count=len(order))
    items = np.fromiter((triplets[i][1] for i in order), dtype=np.int64, count=len(order))
    data = np.fromiter((triplets[i][2] for i in order), dtype=np.float64, count=len(order))

    if len(order) > 1:
        same = (users[1:] == users[:-1]) & (items[1:] == items[:-1])
        if same.any():
            pos = int(np.argmax(same))
            raise DuplicateEntry(f"duplicate rating for (user={users[pos]}, item={items[pos]})")

    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(users, minlength=n), out=row_ptr[1:])
    return CsrMatrix(n, m, data, items, row_ptr)


def nonzero_iter(csr: CsrMatrix) -> Iterator[RatingTriplet]:
    """Yield stored entries in (row, col) order."""
    ptr = csr.row_ptr
    for i in range(csr.n_rows):
        for p in range(ptr[i], ptr[i + 1]):
            yield RatingTriplet(i, int(csr.col_indices[p]), float(csr.data[p]))


def row_slice(csr: CsrMatrix, i: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 <= i < csr.n_rows:
        raise IndexOutOfRange(f"row {i} outside [0, {csr.n_rows})")
    lo, hi = csr.row_ptr[i], csr.row_ptr[i + 1]
    return csr.col_indices[lo:hi], csr.data[lo:hi]
