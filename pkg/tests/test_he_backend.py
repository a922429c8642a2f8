import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from csrfhe import he_backend as he
from csrfhe.errors import (
    DepthExhausted,
    InvalidParams,
    KeyMismatch,
    SerializationError,
    TooManyValues,
    WrongKey,
)

L_SMALL = 32
vec = arrays(np.float64, L_SMALL, elements=st.floats(-8, 8, allow_nan=False))


def test_default_params_give_4096_slots():
    keys = he.keygen(he.HEParams(poly_degree=8192, frac_bits=32))
    assert keys.params.slot_count == 4096


def test_desk_scale_params():
    assert he.keygen(he.HEParams(poly_degree=8, frac_bits=32)).params.slot_count == 4


@pytest.mark.parametrize("kwargs", [{"poly_degree": 100}, {"poly_degree": 1}, {"frac_bits": 0},
                                    {"max_depth": 0}, {"modulus_bits": 0}, {"ct_bytes": 0}])
def test_invalid_params(kwargs):
    with pytest.raises(InvalidParams):
        he.HEParams(**kwargs)


def test_keygen_rejects_non_params():
    with pytest.raises(InvalidParams):
        he.keygen({"poly_degree": 8})


def test_fresh_keys_are_distinct_and_bound(small_params):
    a, b = he.keygen(small_params), he.keygen(small_params)
    assert a.key_id != b.key_id
    ct = he.encrypt(a.pk, [1.0, 2.0])
    with pytest.raises(WrongKey):
        he.decrypt(b.sk, ct)
    assert he.decrypt(a.sk, ct).tolist() == [1.0, 2.0]


def test_seeded_keygen_is_deterministic(small_params):
    assert he.keygen(small_params, seed=3).key_id == he.keygen(small_params, seed=3).key_id
    assert he.keygen(small_params, seed=3).key_id != he.keygen(small_params, seed=4).key_id


def test_secret_key_repr_hides_params(small_keys):
    assert "params" not in repr(small_keys.sk)


def test_round_trip_within_quantum(small_keys):
    out = he.decrypt(small_keys.sk, he.encrypt(small_keys.pk, [3.7, 4.5]))
    assert np.allclose(out, [3.7, 4.5], atol=2.0**-32, rtol=0)


def test_full_width_encrypt():
    keys = he.keygen(he.HEParams(), seed=1)
    ct = he.encrypt(keys.pk, np.ones(4096))
    assert ct.valid_count == 4096 and ct.level == 0


def test_too_many_values(small_keys):
    with pytest.raises(TooManyValues):
        he.encrypt(small_keys.pk, np.ones(L_SMALL + 1))


def test_zeros_decrypt_to_zeros(small_keys):
    assert not he.decrypt(small_keys.sk, he.encrypt(small_keys.pk, np.zeros(5))).any()


@settings(max_examples=100, deadline=None)
@given(vec)
def test_encrypt_error_bound(x):
    keys = he.keygen(he.HEParams(poly_degree=2 * L_SMALL), seed=0)
    for fb in (22, 32):
        k = he.keygen(he.HEParams(poly_degree=2 * L_SMALL, frac_bits=fb), seed=0)
        err = np.abs(he.decrypt(k.sk, he.encrypt(k.pk, x)) - x).max()
        assert err <= 2.0 ** -(fb - 1)
    assert keys.params.slot_count == L_SMALL


def test_add_sub_identities(small_keys):
    pk, sk = small_keys.pk, small_keys.sk
    assert he.decrypt(sk, he.add(he.encrypt(pk, [1, 2]), he.encrypt(pk, [3, 4]))).tolist() == [4, 6]
    a = he.encrypt(pk, [1.25, -2.5])
    assert he.decrypt(sk, he.add(a, np.zeros(2))).tolist() == [1.25, -2.5]
    assert he.decrypt(sk, he.sub(he.encrypt(pk, [5]), he.encrypt(pk, [2]))).tolist() == [3]
    assert not he.decrypt(sk, he.sub(a, a)).any()


def test_mixed_key_operations_fail(small_params):
    a, b = he.keygen(small_params), he.keygen(small_params)
    x, y = he.encrypt(a.pk, [1.0]), he.encrypt(b.pk, [1.0])
    for op in (he.add, he.sub, he.mul):
        with pytest.raises(KeyMismatch):
            op(x, y)


def test_mul_identity_and_level(small_keys):
    pk, sk = small_keys.pk, small_keys.sk
    prod = he.mul(he.encrypt(pk, [2, 3]), he.encrypt(pk, [4, 5]))
    assert he.decrypt(sk, prod).tolist() == [8, 15]
    assert prod.level == 1


@pytest.mark.parametrize("depth", [1, 3, 8])
def test_depth_exhausted_exactly_after_budget(depth):
    keys = he.keygen(he.HEParams(poly_degree=16, max_depth=depth), seed=0)
    ct = he.encrypt(keys.pk, [1.0])
    for _ in range(depth):
        ct = he.mul(ct, 1.0)
    assert ct.level == depth
    with pytest.raises(DepthExhausted) as info:
        he.mul(ct, 1.0)
    assert info.value.required_depth == depth + 1


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_mul_chain_error(depth, seed):
    rng = np.random.default_rng(seed)
    keys = he.keygen(he.HEParams(poly_degree=2 * L_SMALL, max_depth=depth), seed=0)
    factors = rng.uniform(-1, 1, (depth + 1, L_SMALL))
    ct = he.encrypt(keys.pk, factors[0])
    exact = factors[0].copy()
    for f in factors[1:]:
        ct = he.mul(ct, he.encrypt(keys.pk, f))
        exact *= f
    assert np.abs(he.decrypt(keys.sk, ct) - exact).max() <= depth * 2.0 ** -(32 - 2)


@settings(max_examples=100, deadline=None)
@given(vec, vec)
def test_homomorphism_bounds(a, b):
    keys = he.keygen(he.HEParams(poly_degree=2 * L_SMALL), seed=0)
    ea, eb = he.encrypt(keys.pk, a), he.encrypt(keys.pk, b)
    fb = keys.params.frac_bits
    assert np.abs(he.decrypt(keys.sk, he.add(ea, eb)) - (a + b)).max() <= 2 * 2.0 ** -(fb - 1)
    assert np.abs(he.decrypt(keys.sk, he.sub(ea, eb)) - (a - b)).max() <= 2 * 2.0 ** -(fb - 1)
    bound = 2.0 ** -(fb - 2) * np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    assert np.all(np.abs(he.decrypt(keys.sk, he.mul(ea, eb)) - a * b) <= bound)


def test_plaintext_operands(small_keys):
    pk, sk = small_keys.pk, small_keys.sk
    ct = he.encrypt(pk, [1.0, 2.0, 3.0])
    assert he.decrypt(sk, he.add(ct, [1.0, 1.0])).tolist() == [2.0, 3.0, 3.0]
    assert he.decrypt(sk, he.add(ct, 0.5)).tolist() == [1.5, 2.5, 3.5]
    assert he.decrypt(sk, he.mul(ct, [2.0, 0.0])).tolist() == [2.0, 0.0]
    assert he.decrypt(sk, he.mul(ct, 2.0)).tolist() == [2.0, 4.0, 6.0]


def test_plaintext_constants_are_encoded():
    keys = he.keygen(he.HEParams(poly_degree=16, frac_bits=4), seed=0)
    # 0.05 encodes to 1/16 at four fractional bits
    assert he.decrypt(keys.sk, he.mul(he.encrypt(keys.pk, [1.0]), 0.05)).tolist() == [0.0625]


def test_rotation_identities(small_keys):
    pk, sk = small_keys.pk, small_keys.sk
    x = np.arange(1.0, L_SMALL + 1)
    ct = he.encrypt(pk, x)
    assert he.rotate(ct, 0) is ct
    assert np.array_equal(he.decrypt(sk, he.rotate(ct, L_SMALL)), x)
    assert np.array_equal(he.decrypt(sk, he.rotate(he.rotate(ct, 5), -5)), x)
    assert np.array_equal(he.decrypt(sk, he.rotate(ct, 3)), np.roll(x, -3))
    assert he.rotate(ct, 3).level == ct.level


@settings(max_examples=100, deadline=None)
@given(st.integers(0, L_SMALL), st.integers(-L_SMALL + 1, L_SMALL - 1))
def test_slots_beyond_valid_count_stay_zero(width, steps):
    keys = he.keygen(he.HEParams(poly_degree=2 * L_SMALL), seed=0)
    ct = he.encrypt(keys.pk, np.arange(1.0, width + 1))
    for out in (he.rotate(ct, steps), he.mul(ct, 3.0), he.add(ct, 1.0), he.mul(ct, [2.0] * 3)):
        assert not out._slots[out.valid_count:].any()
        assert out.valid_count <= L_SMALL


def test_inner_product_examples(small_keys):
    pk, sk = small_keys.pk, small_keys.sk
    orth = he.inner_product(he.encrypt(pk, [1, 0, 0]), he.encrypt(pk, [0, 1, 0]), 3)
    assert he.decrypt(sk, orth).tolist() == [0.0]
    ones = he.encrypt(pk, np.ones(10))
    ip = he.inner_product(ones, ones, 10, broadcast=True)
    assert he.decrypt(sk, ip).tolist() == [10.0] * 10
    assert ip.level == 2


def test_inner_product_random_k10():
    keys = he.keygen(he.HEParams(), seed=2)
    rng = np.random.default_rng(5)
    for _ in range(20):
        u, v = rng.uniform(-1, 1, 10), rng.uniform(-1, 1, 10)
        ip = he.inner_product(he.encrypt(keys.pk, u), he.encrypt(keys.pk, v), 10)
        assert abs(he.decrypt(keys.sk, ip)[0] - u @ v) <= 1e-4


def test_select_and_replicate(small_keys):
    pk, sk = small_keys.pk, small_keys.sk
    ct = he.encrypt(pk, [5.0, 6.0, 7.0, 8.0])
    assert he.decrypt(sk, he.select_slot(ct, 2)).tolist() == [7.0]
    wide = he.select_slot(ct, 3, width=5)
    assert he.decrypt(sk, wide).tolist() == [8.0] * 5 and wide.level == 1
    assert he.decrypt(sk, he.select_range(ct, 1, 2)).tolist() == [6.0, 7.0]
    with pytest.raises(ValueError):
        he.replicate(ct, 4)


def test_mod_switch(small_keys):
    ct = he.encrypt(small_keys.pk, [1.0])
    deeper = he.mod_switch(ct, 3)
    assert deeper.level == 3 and he.decrypt(small_keys.sk, deeper).tolist() == [1.0]
    with pytest.raises(ValueError):
        he.mod_switch(deeper, 1)
    with pytest.raises(DepthExhausted):
        he.mod_switch(ct, small_keys.params.max_depth + 1)


def test_level_monotone_through_operations(small_keys):
    pk = small_keys.pk
    a = he.mul(he.encrypt(pk, [1.0, 2.0]), 2.0)
    b = he.encrypt(pk, [3.0])
    for out in (he.add(a, b), he.sub(b, a), he.rotate(a, 1), he.add(a, 1.0)):
        assert out.level == max(a.level, b.level) or out.level == a.level
        assert out.level >= a.level
    assert he.mul(a, b).level == a.level + 1


def test_quantization_error_ordering():
    rng = np.random.default_rng(11)
    x, y = rng.uniform(-8, 8, 512), rng.uniform(-8, 8, 512)
    errs = {}
    for fb in (22, 32):
        k = he.keygen(he.HEParams(poly_degree=1024, frac_bits=fb), seed=0)
        got = he.decrypt(k.sk, he.mul(he.encrypt(k.pk, x), he.encrypt(k.pk, y)))
        errs[fb] = np.abs(got - x * y).max()
    assert errs[22] >= errs[32]


def test_serialization_round_trip_and_opacity(small_keys):
    x = np.linspace(-3, 3, 20)
    ct = he.mul(he.encrypt(small_keys.pk, x), 0.5)
    blob = he.serialize(ct)
    back = he.deserialize(blob, small_keys.params)
    assert np.array_equal(he.decrypt(small_keys.sk, back), he.decrypt(small_keys.sk, ct))
    assert (back.level, back.valid_count, back.key_id) == (ct.level, ct.valid_count, ct.key_id)
    assert blob == he.serialize(back)
    assert he.encode(x * 0.5, small_keys.params).tobytes()[:64] not in blob
    assert blob.startswith(he.MAGIC)


def test_deserialize_rejects_foreign_params(small_keys):
    blob = he.serialize(he.encrypt(small_keys.pk, [1.0]))
    with pytest.raises(SerializationError):
        he.deserialize(blob, he.HEParams(poly_degree=64, frac_bits=22, max_depth=40))
    with pytest.raises(SerializationError):
        he.deserialize(b"XXXXXXXX" + blob[8:], small_keys.params)
    with pytest.raises(SerializationError):
        he.deserialize(blob[:-8], small_keys.params)


def test_ciphertext_not_picklable(small_keys):
    with pytest.raises(TypeError):
        pickle.dumps(he.encrypt(small_keys.pk, [1.0]))


def test_ct_size_bytes():
    # 2 polynomials x 8192 coefficients x ceil(218 / 8) bytes
    assert he.ct_size_bytes(he.HEParams()) == 458752
    assert he.ct_size_bytes(he.HEParams(poly_degree=16384)) == 2 * he.ct_size_bytes(he.HEParams())
    assert he.ct_size_bytes(he.HEParams(ct_bytes=1234)) == 1234


def test_op_counting_nests(small_keys):
    ct = he.encrypt(small_keys.pk, [1.0, 2.0])
    with he.count_ops() as outer:
        he.add(ct, ct)
        with he.count_ops() as inner:
            he.mul(ct, ct)
            he.rotate(ct, 1)
    assert (inner.mul, inner.rotate, inner.add) == (1, 1, 0)
    assert (outer.add, outer.mul, outer.rotate) == (1, 1, 1)
    assert outer.total == 3


def test_run_isolated_keeps_counts_apart(small_keys):
    ct = he.encrypt(small_keys.pk, [1.0])
    with he.count_ops() as outer:
        _, counts = he.run_isolated(he.mul, ct, ct)
    assert counts.mul == 1 and outer.mul == 0
    with he.count_ops() as outer:
        he.merge_counts(counts)
    assert outer.mul == 1


def test_noise_flag_is_bounded_and_deterministic():
    params = he.HEParams(poly_degree=64, noise=True)
    keys = he.keygen(params, seed=0)
    x = np.linspace(-1, 1, 32)
    a = he.decrypt(keys.sk, he.encrypt(keys.pk, x))
    b = he.decrypt(keys.sk, he.encrypt(keys.pk, x))
    assert np.array_equal(a, b)
    assert np.abs(a - x).max() <= 2 * 2.0**-32
