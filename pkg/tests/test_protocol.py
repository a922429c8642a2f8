import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csrfhe import he_backend as he
from csrfhe.errors import KeyMisuse, PrivacyViolation
from csrfhe.mf_engine import Hyperparams, init_model, run_factorization
from csrfhe.packing import pack_ratings
from csrfhe.protocol import (
    CSP,
    LEDGER_COLUMNS,
    Message,
    RS,
    audit_privacy,
    ledger_totals,
    plan_params,
    ratings_by_user,
    read_ledger_csv,
    run_factorization_phase,
    run_initialization,
    run_recommendation,
    user_name,
)
from csrfhe.sparse import csr_from_triplets, nonzero_iter
from helpers import random_triplets

BASE = he.HEParams(poly_degree=64)


def setup(triplets, n, m, engine="csr", hp=None, base=BASE, mask_seed=0):
    hp = hp or Hyperparams(k=2, alpha=0.05, T=1, u_batch_size=2, v_batch_size=2)
    csr = csr_from_triplets(triplets, n, m)
    index_map = np.column_stack([csr.row_indices, csr.col_indices])
    params = plan_params(index_map, n, m, engine, hp, base)
    layout = "naive-dense" if engine == "naive-dense" else "csr"
    session = run_initialization(ratings_by_user(triplets), n, m, params, layout, mask_seed, key_seed=3)
    return session, csr, hp


def full_run(triplets, n, m, engine="csr", hp=None):
    session, csr, hp = setup(triplets, n, m, engine, hp)
    model, delta = run_factorization_phase(session, engine, hp)
    pairs = [(i, j) for i, j, _ in triplets]
    return session, model, delta, run_recommendation(session, model, pairs)


def test_single_user_single_rating():
    session, _, _ = setup([(0, 0, 4.0)], 1, 1)
    kinds = [e.kind for e in session.ledger]
    assert kinds == ["public_key", "public_key", "encrypted_ratings", "masked_ratings",
                     "packed_ratings", "recommendation_mask"]
    assert session.harness_decrypt(session.packed.ciphertexts[0])[0] == 4.0
    assert ledger_totals(session.ledger).ct_count == 1


def test_round_trip_matches_csr_order():
    triplets = random_triplets(np.random.default_rng(0), 8, 7, 30)
    session, csr, _ = setup(triplets, 8, 7)
    L = session.params.slot_count
    values = np.concatenate([session.harness_decrypt(ct)[:L] for ct in session.packed.ciphertexts])
    expected = list(nonzero_iter(csr))
    assert session.packed.index_map.tolist() == [[t.user, t.item] for t in expected]
    assert np.array_equal(values[: len(expected)], [t.rating for t in expected])
    assert len(session.packed.ciphertexts) == math.ceil(30 / L)


def test_fourteen_thousand_ratings_pack_into_four_ciphertexts():
    triplets = [(i, j, float(1 + (i + j) % 5)) for i in range(700) for j in range(20)]
    params = he.HEParams(max_depth=2)
    session = run_initialization(ratings_by_user(triplets), 700, 20, params, key_seed=0)
    packed = [e for e in session.ledger if e.kind == "packed_ratings"]
    assert len(packed) == 1 and packed[0].ct_count == 4
    assert packed[0].sender == CSP and packed[0].receiver == RS


@pytest.mark.parametrize("engine", ["csr", "csr-batched", "naive-dense"])
def test_factorization_is_silent_and_matches_direct_run(engine):
    triplets = random_triplets(np.random.default_rng(1), 6, 5, 14)
    hp = Hyperparams(k=2, alpha=0.05, T=2, u_batch_size=2, v_batch_size=2)
    session, csr, hp = setup(triplets, 6, 5, engine, hp)
    before = len(session.ledger)
    model, delta = run_factorization_phase(session, engine, hp)
    assert delta == 0 and len(session.ledger) == before
    if engine == "csr":
        direct = init_model(6, 5, hp, session.rs.pk)
        run_factorization(direct, pack_ratings(csr, session.rs.pk), hp)
        sk = session._harness_sk
        for a, b in zip(model.decrypt_profiles(sk), direct.decrypt_profiles(sk)):
            assert np.abs(a - b).max() <= 1e-9


def test_factorization_raises_when_a_message_is_sent():
    session, _, hp = setup([(0, 0, 3.0), (1, 1, 2.0)], 2, 2)

    def chatty(stats, model):
        session.send("factorization", RS, CSP, "leak", plaintext={"x": np.zeros(1)})

    with pytest.raises(PrivacyViolation):
        run_factorization_phase(session, "csr", hp, on_iteration=chatty)


def test_recommendation_delivers_true_predictions():
    triplets = random_triplets(np.random.default_rng(2), 5, 6, 12)
    session, model, _, recs = full_run(triplets, 5, 6)
    U, V = model.decrypt_profiles(session._harness_sk)
    for i, items in recs.items():
        for j, value in items.items():
            assert abs(value - U[i] @ V[j]) <= 1e-3
    assert sum(len(v) for v in recs.values()) == 12
    truth = {(i, j): U[i] @ V[j] for i, j, _ in triplets}
    report = audit_privacy(session, {(i, j): r for i, j, r in triplets}, truth)
    assert report.ok, report.violations
    assert report.checked_values == 24


def test_zero_pairs_sends_one_empty_notification():
    session, csr, hp = setup([(0, 1, 5.0)], 2, 2)
    model, _ = run_factorization_phase(session, "csr", hp)
    before = len(session.ledger)
    assert run_recommendation(session, model, []) == {}
    last = session.ledger.entries[before:]
    assert len(last) == 1 and last[0].ct_count == 0
    assert ledger_totals(session.ledger).ct_count == 1


def test_csp_sees_ratings_offset_by_masks():
    triplets = random_triplets(np.random.default_rng(3), 4, 4, 9)
    session, _, _ = setup(triplets, 4, 4)
    truth = {(i, j): r for i, j, r in triplets}
    for obs in session.csp.observations:
        expect = np.array([truth[tuple(p)] for p in obs.pairs.tolist()]) + session.masks.rating_vector(obs.pairs)
        assert np.array_equal(obs.values, expect)
        assert (session.masks.rating_vector(obs.pairs) >= 1).all()


def test_secret_key_stays_with_csp():
    session, _, _ = setup([(0, 0, 1.0)], 1, 1)
    ct = session.packed.ciphertexts[0]
    assert session.csp.holds_secret_key
    for party in [session.rs] + list(session.users.values()):
        assert not party.holds_secret_key
        with pytest.raises(KeyMisuse):
            party.decrypt(ct)
        with pytest.raises(KeyMisuse):
            party.install_secret_key(session._harness_sk)
    with pytest.raises(KeyMisuse):
        session.rs.receive(Message("initialization", CSP, user_name(0), "x"))


def test_ledger_csv_columns(tmp_path):
    session, _, _, _ = full_run([(0, 0, 2.0), (1, 1, 4.0)], 2, 2)
    path = tmp_path / "ledger.csv"
    session.ledger.write_csv(path)
    rows = read_ledger_csv(path)
    assert tuple(rows[0]) == LEDGER_COLUMNS
    assert len(rows) == len(session.ledger)
    assert {r["phase"] for r in rows} == {"initialization", "recommendation"}
    assert sum(r["ct_count"] for r in rows) == ledger_totals(session.ledger, "physical").ct_count


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_paper_accounting_formula(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(1, 8)), int(rng.integers(1, 8))
    M = int(rng.integers(1, n * m + 1))
    triplets = random_triplets(rng, n, m, M)
    hp = Hyperparams(k=2, alpha=0.05, T=0)
    L = BASE.slot_count
    for engine, expected in (("csr", 1 + math.ceil(M / L)), ("naive-dense", 1 + n)):
        session, _, _ = setup(triplets, n, m, engine, hp)
        model, _ = run_factorization_phase(session, engine, hp)
        run_recommendation(session, model, [(i, j) for i, j, _ in triplets])
        totals = ledger_totals(session.ledger, "paper")
        assert totals.ct_count == expected
        assert totals.ct_bytes == expected * he.ct_size_bytes(session.params)
        assert ledger_totals(session.ledger, "physical").ct_count >= expected


def test_batched_and_plain_exchange_the_same_traffic():
    triplets = random_triplets(np.random.default_rng(4), 6, 6, 16)
    hp = Hyperparams(k=2, alpha=0.05, T=1, u_batch_size=2, v_batch_size=2)
    a = full_run(triplets, 6, 6, "csr", hp)[0]
    b = full_run(triplets, 6, 6, "csr-batched", hp)[0]
    for accounting in ("paper", "physical"):
        ta, tb = ledger_totals(a.ledger, accounting), ledger_totals(b.ledger, accounting)
        assert (ta.ct_count, ta.messages, ta.pt_bytes) == (tb.ct_count, tb.messages, tb.pt_bytes)


def test_audit_flags_planted_leaks():
    triplets = [(0, 0, 5.0), (1, 1, 3.0)]
    session, _, _, _ = full_run(triplets, 2, 2)
    truth = {(i, j): r for i, j, r in triplets}
    assert audit_privacy(session, truth).ok
    session.csp.observe("factorization", "masked_rating", [5.0], [(0, 0)])
    session.rs.observe("factorization", "rating", [3.0], [(1, 1)])
    session.users[0].observe("recommendation", "prediction", [1.0], [(1, 0)])
    violations = audit_privacy(session, truth).violations
    assert any("unmasked" in v for v in violations)
    assert any("RS observed 'rating'" in v for v in violations)
    assert any("another user's" in v for v in violations)


def test_argument_errors():
    session, _, hp = setup([(0, 0, 1.0)], 1, 1)
    with pytest.raises(ValueError):
        run_factorization_phase(session, "naive-dense", hp)
    with pytest.raises(ValueError):
        ledger_totals(session.ledger, "bytes")
    with pytest.raises(ValueError):
        run_initialization({}, 1, 1, BASE, layout="coo")
    with pytest.raises(ValueError):
        run_initialization({0: [(0, 1.0)]}, 1, 40, BASE, layout="naive-dense")
    with pytest.raises(IndexError):
        run_initialization({0: [(3, 1.0)]}, 1, 2, BASE)
    session.packed = None
    with pytest.raises(RuntimeError):
        run_factorization_phase(session, "csr", hp)
