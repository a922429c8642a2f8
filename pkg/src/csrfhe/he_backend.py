"""Simulated leveled CKKS arithmetic.

A :class:`Ciphertext` carries a hidden vector of ``L = poly_degree / 2``
real slots together with its consumed level and the id of the key that
encrypted it. Arithmetic follows CKKS semantics:

* encryption and plaintext encoding round values to a ``2**-frac_bits``
  fixed-point grid;
* every multiplication (ciphertext or plaintext operand) consumes one
  level and re-quantizes the product to the grid, standing in for the
  rescale step;
* additions and rotations are level-free.

No lattice cryptography is performed. The payload is only reachable via
:func:`decrypt` with the matching secret key, and serialized ciphertexts
pass the payload through a keyed mask.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import math
import secrets
import struct
from dataclasses import dataclass, field, replace
from numbers import Real

import numpy as np

from . import _kernels
from .errors import (
    DepthExhausted,
    InvalidParams,
    KeyMismatch,
    SerializationError,
    TooManyValues,
    WrongKey,
)

# 218-bit coefficient modulus: the largest chain SEAL allows at degree 8192
# for 128-bit security. A model assumption, not a measured value.
DEFAULT_MODULUS_BITS = 218


@dataclass(frozen=True)
class HEParams:
    poly_degree: int = 8192
    frac_bits: int = 32
    max_depth: int = 16
    modulus_bits: int = DEFAULT_MODULUS_BITS
    ct_bytes: int | None = None
    noise: bool = False

    def __post_init__(self):
        d = self.poly_degree
        if d < 2 or d & (d - 1):
            raise InvalidParams(f"poly_degree must be a power of two >= 2, got {d}")
        if not 1 <= self.frac_bits <= 50:
            raise InvalidParams(f"frac_bits must lie in [1, 50], got {self.frac_bits}")
        if self.max_depth < 1:
            raise InvalidParams(f"max_depth must be >= 1, got {self.max_depth}")
        if self.modulus_bits < 1:
            raise InvalidParams("modulus_bits must be positive")
        if self.ct_bytes is not None and self.ct_bytes < 1:
            raise InvalidParams("ct_bytes override must be positive")

    @property
    def slot_count(self) -> int:
        return self.poly_degree // 2

    @property
    def scale(self) -> float:
        return float(2**self.frac_bits)

    def with_depth(self, max_depth: int) -> "HEParams":
        return replace(self, max_depth=max(1, int(max_depth)))

    def digest(self) -> bytes:
        """8-byte fingerprint; ciphertexts only interoperate under equal digests."""
        text = f"{self.poly_degree}:{self.frac_bits}:{self.max_depth}:{self.modulus_bits}:{self.noise}"
        return hashlib.blake2b(text.encode(), digest_size=8).digest()


def ct_size_bytes(params: HEParams) -> int:
    """Modelled size of one ciphertext: two ring elements at full modulus."""
    if params.ct_bytes is not None:
        return params.ct_bytes
    return 2 * params.poly_degree * math.ceil(params.modulus_bits / 8)


# --------------------------------------------------------------------------
# keys

@dataclass(frozen=True)
class PublicKey:
    key_id: str
    params: HEParams


@dataclass(frozen=True)
class SecretKey:
    key_id: str
    params: HEParams = field(repr=False)

    def __repr__(self):
        return f"SecretKey(key_id={self.key_id!r})"


@dataclass(frozen=True)
class KeyPair:
    pk: PublicKey
    sk: SecretKey

    @property
    def params(self) -> HEParams:
        return self.pk.params

    @property
    def key_id(self) -> str:
        return self.pk.key_id


def keygen(params: HEParams, seed: int | None = None) -> KeyPair:
    """Fresh key pair. With a seed the key id is reproducible."""
    if not isinstance(params, HEParams):
        raise InvalidParams("keygen expects HEParams")
    if seed is None:
        key_id = secrets.token_hex(8)
    else:
        h = hashlib.blake2b(f"keygen:{seed}".encode() + params.digest(), digest_size=8)
        key_id = h.hexdigest()
    return KeyPair(PublicKey(key_id, params), SecretKey(key_id, params))


# --------------------------------------------------------------------------
# operation counting

@dataclass
class OpCounts:
    add: int = 0
    sub: int = 0
    mul: int = 0
    mul_plain: int = 0
    rotate: int = 0
    encrypt: int = 0
    decrypt: int = 0
    mod_switch: int = 0

    @property
    def total(self) -> int:
        """Homomorphic evaluation ops (excludes encrypt/decrypt/mod-switch)."""
        return self.add + self.sub + self.mul + self.mul_plain + self.rotate

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["total"] = self.total
        return d

    def __sub__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(**{k: getattr(self, k) - getattr(other, k) for k in self.__dataclass_fields__})

    def copy(self) -> "OpCounts":
        return OpCounts(**{k: getattr(self, k) for k in self.__dataclass_fields__})


_active_counters: contextvars.ContextVar[tuple] = contextvars.ContextVar("_active_counters", default=())


@contextlib.contextmanager
def count_ops():
    """Count homomorphic operations executed inside the block (nestable)."""
    counts = OpCounts()
    token = _active_counters.set(_active_counters.get() + (counts,))
    try:
        yield counts
    finally:
        _active_counters.reset(token)


def _tick(name: str, n: int = 1) -> None:
    for c in _active_counters.get():
        setattr(c, name, getattr(c, name) + n)


def merge_counts(counts: OpCounts) -> None:
    """Add counts gathered elsewhere (e.g. a worker thread) to the active counters."""
    for name in counts.__dataclass_fields__:
        _tick(name, getattr(counts, name))


def run_isolated(fn, *args):
    """Call ``fn`` in a fresh context; return ``(result, OpCounts)``.

    Worker threads use this so they never touch the caller's counters.
    """
    def inner():
        with count_ops() as counts:
            result = fn(*args)
        return result, counts
    return contextvars.Context().run(inner)


# --------------------------------------------------------------------------
# ciphertexts

class Ciphertext:
    """Opaque ciphertext. There is intentionally no accessor for the slots."""

    __slots__ = ("_slots", "scale_bits", "level", "key_id", "valid_count", "params")

    def __init__(self, slots, level, key_id, valid_count, params):
        slots.setflags(write=False)
        self._slots = slots
        self.scale_bits = params.frac_bits
        self.level = level
        self.key_id = key_id
        self.valid_count = valid_count
        self.params = params

    def __repr__(self):
        return (f"Ciphertext(level={self.level}, valid_count={self.valid_count}, "
                f"key_id={self.key_id!r})")

    def __reduce__(self):
        raise TypeError("ciphertexts are not picklable; use serialize()")


def _noise(slots, n, params):
    if not params.noise or n == 0:
        return
    seed = int.from_bytes(hashlib.blake2b(slots[:n].tobytes(), digest_size=8).digest(), "little")
    step = 2.0 ** -params.frac_bits
    slots[:n] += np.random.default_rng(seed).uniform(-step, step, n)


def encode(values, params: HEParams) -> np.ndarray:
    """Quantize a plaintext vector to the fixed-point grid (length preserved)."""
    arr = np.array(values, dtype=np.float64, copy=True).ravel()
    if arr.size > params.slot_count:
        raise TooManyValues(f"{arr.size} values exceed {params.slot_count} slots")
    if not np.all(np.isfinite(arr)):
        raise ValueError("plaintext values must be finite")
    _kernels.quantize(arr, arr.size, params.scale)
    return arr


def encode_scalar(value: float, params: HEParams) -> float:
    s = float(value)
    if not math.isfinite(s):
        raise ValueError("plaintext scalar must be finite")
    return float(np.rint(s * params.scale) / params.scale)


def encrypt(pk: PublicKey, values, params: HEParams | None = None) -> Ciphertext:
    if params is not None and params != pk.params:
        raise InvalidParams("params differ from the public key's params")
    params = pk.params
    arr = np.asarray(values, dtype=np.float64).ravel()
    n = arr.size
    if n > params.slot_count:
        raise TooManyValues(f"{n} values exceed {params.slot_count} slots")
    if not np.all(np.isfinite(arr)):
        raise ValueError("values must be finite")
    slots = np.zeros(params.slot_count)
    slots[:n] = arr
    _kernels.quantize(slots, n, params.scale)
    _noise(slots, n, params)
    _tick("encrypt")
    return Ciphertext(slots, 0, pk.key_id, n, params)


def decrypt(sk: SecretKey, ct: Ciphertext) -> np.ndarray:
    if not isinstance(sk, SecretKey) or sk.key_id != ct.key_id:
        raise WrongKey("secret key does not match the ciphertext's key")
    _tick("decrypt")
    return ct._slots[: ct.valid_count].copy()


def _check_pair(a: Ciphertext, b: Ciphertext) -> None:
    if a.key_id != b.key_id:
        raise KeyMismatch(f"ciphertexts under different keys ({a.key_id} vs {b.key_id})")
    if a.params != b.params:
        raise KeyMismatch("ciphertexts under different parameters")


def _plain_vector(b, params: HEParams) -> np.ndarray:
    pt = encode(b, params)
    padded = np.zeros(params.slot_count)
    padded[: pt.size] = pt
    return padded, pt.size


def _linear(a: Ciphertext, b, sign: float, opname: str) -> Ciphertext:
    params = a.params
    L = params.slot_count
    if isinstance(b, Ciphertext):
        _check_pair(a, b)
        n = max(a.valid_count, b.valid_count)
        other, level = b._slots, max(a.level, b.level)
    elif isinstance(b, Real):
        n = a.valid_count
        other, level = encode_scalar(b, params), a.level
    else:
        other, width = _plain_vector(b, params)
        n, level = max(a.valid_count, width), a.level
    out = np.zeros(L)
    if isinstance(other, float):
        np.add(a._slots[:n], sign * other, out=out[:n])
    elif sign > 0:
        np.add(a._slots[:n], other[:n], out=out[:n])
    else:
        np.subtract(a._slots[:n], other[:n], out=out[:n])
    _tick(opname)
    return Ciphertext(out, level, a.key_id, n, params)


def add(a: Ciphertext, b) -> Ciphertext:
    """Slotwise sum with a ciphertext, plaintext vector, or scalar (level-free)."""
    return _linear(a, b, 1.0, "add")


def sub(a: Ciphertext, b) -> Ciphertext:
    return _linear(a, b, -1.0, "sub")


def _next_level(level: int, params: HEParams) -> int:
    nxt = level + 1
    if nxt > params.max_depth:
        raise DepthExhausted(
            f"multiplication would reach level {nxt} > max_depth {params.max_depth}",
            required_depth=nxt,
        )
    return nxt


def mul(a: Ciphertext, b) -> Ciphertext:
    """Slotwise product, then rescale: one level consumed, result re-quantized.

    Plaintext operands are encoded at ``frac_bits`` first, exactly as a
    CKKS plaintext would be, so constants such as a learning rate carry
    their own encoding error.
    """
    params = a.params
    out = np.zeros(params.slot_count)
    if isinstance(b, Ciphertext):
        _check_pair(a, b)
        level = _next_level(max(a.level, b.level), params)
        n = min(a.valid_count, b.valid_count)
        _kernels.mul_quantize(a._slots, b._slots, out, n, params.scale)
        _tick("mul")
    elif isinstance(b, Real):
        level = _next_level(a.level, params)
        n = a.valid_count
        _kernels.scale_quantize(a._slots, encode_scalar(b, params), out, n, params.scale)
        _tick("mul_plain")
    else:
        level = _next_level(a.level, params)
        pt, width = _plain_vector(b, params)
        n = min(a.valid_count, width)
        _kernels.mul_quantize(a._slots, pt, out, n, params.scale)
        _tick("mul_plain")
    _noise(out, n, params)
    return Ciphertext(out, level, a.key_id, n, params)


def _rotated_valid(valid: int, steps: int, L: int) -> int:
    # Support [0, valid) moves to [L - steps, L - steps + valid) modulo L.
    if valid == 0:
        return 0
    return L - steps + valid if valid <= steps else L


def rotate(ct: Ciphertext, steps: int) -> Ciphertext:
    """Cyclic left rotation: slot ``i`` of the result holds slot ``i + steps``."""
    L = ct.params.slot_count
    s = int(steps) % L
    if s == 0:
        return ct
    out = np.empty(L)
    _kernels.rotate(ct._slots, s, out)
    _tick("rotate")
    return Ciphertext(out, ct.level, ct.key_id, _rotated_valid(ct.valid_count, s, L), ct.params)


def _fold(ct: Ciphertext, steps: int) -> Ciphertext:
    """``ct + rotate(ct, steps)`` in one fused kernel call."""
    L = ct.params.slot_count
    out = np.empty(L)
    _kernels.rotate_add(ct._slots, steps % L, out)
    _tick("rotate")
    _tick("add")
    valid = max(ct.valid_count, _rotated_valid(ct.valid_count, steps % L, L))
    return Ciphertext(out, ct.level, ct.key_id, valid, ct.params)


def mod_switch(ct: Ciphertext, level: int) -> Ciphertext:
    """Drop to a deeper level without touching the payload."""
    if level < ct.level:
        raise ValueError(f"cannot raise a ciphertext from level {ct.level} back to {level}")
    if level > ct.params.max_depth:
        raise DepthExhausted(f"level {level} exceeds max_depth {ct.params.max_depth}",
                             required_depth=level)
    if level == ct.level:
        return ct
    _tick("mod_switch")
    return Ciphertext(ct._slots, level, ct.key_id, ct.valid_count, ct.params)


def replicate(ct: Ciphertext, width: int) -> Ciphertext:
    """Copy slot 0 into slots ``0..width-1`` by right-rotation doubling.

    ``ct`` must hold a single valid slot. Uses rotations and additions
    only, so no level is consumed and the result has exactly ``width``
    valid slots.
    """
    if ct.valid_count > 1:
        raise ValueError("replicate expects a single-slot ciphertext")
    if not 1 <= width <= ct.params.slot_count:
        raise ValueError(f"width {width} outside [1, {ct.params.slot_count}]")
    result = None
    offset = 0
    block, size = ct, 1
    while True:
        if width & size:
            piece = block if offset == 0 else rotate(block, -offset)
            result = piece if result is None else add(result, piece)
            offset += size
        if 2 * size > width:
            break
        block = add(block, rotate(block, -size))
        size *= 2
    return result


def select_slot(ct: Ciphertext, slot: int, width: int = 1) -> Ciphertext:
    """Move slot ``slot`` to position 0, zero the rest, broadcast to ``width``.

    The zeroing is a multiply by a 0/1 plaintext mask and costs one level.
    """
    moved = rotate(ct, slot)
    single = mul(moved, [1.0])
    return single if width == 1 else replicate(single, width)


def select_range(ct: Ciphertext, start: int, width: int) -> Ciphertext:
    """Move slots ``start..start+width-1`` to the front and zero the rest (one level)."""
    moved = rotate(ct, start)
    return mul(moved, np.ones(width))


def inner_product(a: Ciphertext, b: Ciphertext, k: int, broadcast: bool = False) -> Ciphertext:
    """Dot product of the first ``k`` slots of ``a`` and ``b``.

    One multiplication, ``ceil(log2 k)`` rotate-and-add folds that gather
    the sum in slot 0, then a slot-0 mask (one more level) that clears the
    partial sums the folds leave behind. With ``broadcast`` the sum is
    replicated into slots ``0..k-1``.
    """
    if not 1 <= k <= a.params.slot_count:
        raise ValueError(f"k={k} outside [1, {a.params.slot_count}]")
    if a.valid_count > k or (isinstance(b, Ciphertext) and b.valid_count > k):
        raise ValueError("operands hold more than k valid slots")
    p = mul(a, b)
    step = 1
    while step < k:
        p = _fold(p, step)
        step *= 2
    p = mul(p, [1.0])
    return replicate(p, k) if broadcast and k > 1 else p


# --------------------------------------------------------------------------
# serialization

MAGIC = b"CSRFHECT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sH8s16sIIII")


def _keystream(key_id: str, params: HEParams, n: int) -> np.ndarray:
    seed = hashlib.blake2b(key_id.encode() + params.digest(), digest_size=16).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(seed, "little")))
    return rng.integers(0, 2**64, size=n, dtype=np.uint64, endpoint=False)


def serialize(ct: Ciphertext) -> bytes:
    """Versioned binary framing; the payload is XOR-masked with a key-bound stream."""
    p = ct.params
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, p.digest(), ct.key_id.encode().ljust(16, b"\0"),
                          ct.level, ct.scale_bits, ct.valid_count, p.slot_count)
    masked = ct._slots.view(np.uint64) ^ _keystream(ct.key_id, p, p.slot_count)
    return header + masked.astype("<u8").tobytes()


def deserialize(data: bytes, params: HEParams) -> Ciphertext:
    if len(data) < _HEADER.size:
        raise SerializationError("truncated ciphertext header")
    magic, version, digest, key_raw, level, scale_bits, valid, L = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise SerializationError("bad magic")
    if version != FORMAT_VERSION:
        raise SerializationError(f"unsupported format version {version}")
    if digest != params.digest() or L != params.slot_count or scale_bits != params.frac_bits:
        raise SerializationError("ciphertext was produced under different parameters")
    body = data[_HEADER.size:]
    if len(body) != 8 * L:
        raise SerializationError("payload length does not match slot count")
    if valid > L or level > params.max_depth:
        raise SerializationError("inconsistent header fields")
    key_id = key_raw.rstrip(b"\0").decode()
    masked = np.frombuffer(body, dtype="<u8").astype(np.uint64)
    slots = (masked ^ _keystream(key_id, params, L)).view(np.float64).copy()
    return Ciphertext(slots, level, key_id, valid, params)
