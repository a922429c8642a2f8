"""Slot layouts for ratings and latent-factor profiles.

Ratings are packed in CSR order, ``L`` per ciphertext. Profiles are
packed either one per ciphertext or ``batch_size`` per ciphertext,
member-major: member ``j``'s ``k`` factors occupy slots
``j*k .. j*k + k - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import he_backend as he
from .errors import BatchTooWide, ProfileTooWide
from .sparse import CsrMatrix


@dataclass(frozen=True)
class PackedRatings:
    ciphertexts: list
    index_map: np.ndarray  # (M, 2) int64 of (user, item), slot order
    params: he.HEParams

    @property
    def count(self) -> int:
        return len(self.index_map)

    def locate(self, idx: int) -> tuple[he.Ciphertext, int]:
        L = self.params.slot_count
        return self.ciphertexts[idx // L], idx % L


@dataclass(frozen=True)
class DenseRatings:
    """Naive layout: one ciphertext per user row, zeros included."""

    ciphertexts: list
    n_cols: int
    params: he.HEParams
    index_map: np.ndarray = field(init=False)

    def __post_init__(self):
        n = len(self.ciphertexts)
        grid = np.stack(np.meshgrid(np.arange(n), np.arange(self.n_cols), indexing="ij"), axis=-1)
        object.__setattr__(self, "index_map", grid.reshape(-1, 2).astype(np.int64))

    @property
    def count(self) -> int:
        return len(self.index_map)

    def locate(self, idx: int) -> tuple[he.Ciphertext, int]:
        return self.ciphertexts[idx // self.n_cols], idx % self.n_cols


def pack_values(values, index_map, pk: he.PublicKey) -> PackedRatings:
    values = np.asarray(values, dtype=np.float64)
    L = pk.params.slot_count
    cts = [he.encrypt(pk, values[lo:lo + L]) for lo in range(0, len(values), L)]
    return PackedRatings(cts, np.asarray(index_map, dtype=np.int64).reshape(-1, 2), pk.params)


def pack_ratings(csr: CsrMatrix, pk: he.PublicKey, params: he.HEParams | None = None) -> PackedRatings:
    """Encrypt the nonzeros in CSR order; ``ceil(M / L)`` ciphertexts."""
    if params is not None and params != pk.params:
        raise ValueError("params differ from the public key's params")
    index_map = np.column_stack([csr.row_indices, csr.col_indices])
    return pack_values(csr.data, index_map, pk)


def pack_dense_rows(dense: np.ndarray, pk: he.PublicKey) -> DenseRatings:
    dense = np.asarray(dense, dtype=np.float64)
    if dense.shape[1] > pk.params.slot_count:
        raise ProfileTooWide(f"{dense.shape[1]} columns exceed {pk.params.slot_count} slots")
    return DenseRatings([he.encrypt(pk, row) for row in dense], dense.shape[1], pk.params)


@dataclass(frozen=True)
class PackedProfile:
    ciphertext: he.Ciphertext
    owner: int


def pack_profiles(matrix, pk: he.PublicKey) -> list[PackedProfile]:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError("profile matrix must be 2-D")
    if matrix.shape[1] > pk.params.slot_count:
        raise ProfileTooWide(f"k={matrix.shape[1]} exceeds {pk.params.slot_count} slots")
    return [PackedProfile(he.encrypt(pk, row), i) for i, row in enumerate(matrix)]


@dataclass(frozen=True)
class ProfileBatch:
    batch_index: int
    batch_size: int
    count: int  # valid members; the final batch may be short
    ciphertext: he.Ciphertext

    @property
    def start(self) -> int:
        return self.batch_index * self.batch_size

    @property
    def members(self) -> range:
        return range(self.start, self.start + self.count)

    def global_index(self, local: int) -> int:
        if not 0 <= local < self.batch_size:
            raise IndexError(f"local index {local} outside [0, {self.batch_size})")
        return self.start + local


def pack_profile_batches(matrix, batch_size: int, pk: he.PublicKey) -> list[ProfileBatch]:
    matrix = np.asarray(matrix, dtype=np.float64)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rows, k = matrix.shape
    if batch_size * k > pk.params.slot_count:
        raise BatchTooWide(f"{batch_size} x k={k} exceeds {pk.params.slot_count} slots")
    out = []
    for b in range(math.ceil(rows / batch_size)):
        block = matrix[b * batch_size:(b + 1) * batch_size]
        out.append(ProfileBatch(b, batch_size, len(block), he.encrypt(pk, block.ravel())))
    return out


@dataclass(frozen=True)
class BatchGroups:
    u_batch_size: int
    v_batch_size: int
    groups: dict  # (u_batch_idx, v_batch_idx) -> list[(slot_idx, user, item)]

    def __iter__(self) -> Iterator[tuple[tuple[int, int], list]]:
        for key in sorted(self.groups):
            yield key, self.groups[key]

    def __len__(self) -> int:
        return len(self.groups)

    def sizes(self) -> dict:
        return {key: len(entries) for key, entries in self}


def build_batch_groups(csr: CsrMatrix, u_batch_size: int, v_batch_size: int) -> BatchGroups:
    """Partition nonzeros by (user batch, item batch); CSR order kept inside groups."""
    return batch_groups_from_index_map(np.column_stack([csr.row_indices, csr.col_indices]),
                                       u_batch_size, v_batch_size)


def batch_groups_from_index_map(index_map, u_batch_size: int, v_batch_size: int) -> BatchGroups:
    """Same partition built from slot-ordered (user, item) pairs alone."""
    if u_batch_size < 1 or v_batch_size < 1:
        raise ValueError("batch sizes must be >= 1")
    groups: dict = {}
    pairs = np.asarray(index_map, dtype=np.int64).reshape(-1, 2).tolist()
    for slot, (user, item) in enumerate(pairs):
        key = (user // u_batch_size, item // v_batch_size)
        groups.setdefault(key, []).append((slot, user, item))
    return BatchGroups(u_batch_size, v_batch_size, {key: groups[key] for key in sorted(groups)})


def unpack_batches(sk: he.SecretKey, batches: list[ProfileBatch], k: int) -> np.ndarray:
    """Decrypt batched profiles back into an (n, k) matrix. Test/eval helper."""
    rows = [he.decrypt(sk, b.ciphertext)[: b.count * k].reshape(b.count, k) for b in batches]
    return np.vstack(rows) if rows else np.zeros((0, k))
