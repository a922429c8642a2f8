"""Three-party protocol simulation: users, recommendation server (RS), crypto service provider (CSP).

Parties live in one process. Each party reads only messages addressed to
it, and every plaintext value a party sees is written to its observation
log so a post-run audit can check what leaked. Only the CSP ever holds
the secret key.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import he_backend as he
from .batched_engine import plan_batched, run_batched_factorization
from .errors import KeyMisuse, PrivacyViolation
from .mf_engine import (
    EncryptedModel,
    Hyperparams,
    PredictedRatings,
    init_model,
    plan_per_rating,
    predict,
    run_factorization,
)
from .packing import DenseRatings, PackedRatings, batch_groups_from_index_map, pack_ratings
from .sparse import csr_from_triplets

PHASES = ("initialization", "factorization", "recommendation")
ENGINES = ("csr", "csr-batched", "naive-dense")
LEDGER_COLUMNS = ("phase", "sender", "receiver", "ct_count", "ct_bytes", "pt_bytes")

RS = "RS"
CSP = "CSP"


def user_name(i: int) -> str:
    return f"user:{i}"


# --------------------------------------------------------------------------
# ledger

@dataclass(frozen=True)
class LedgerEntry:
    phase: str
    sender: str
    receiver: str
    ct_count: int
    ct_bytes: int
    pt_bytes: int
    kind: str  # message type; not exported


class MessageLedger:
    """Append-only record of every message sent between parties."""

    def __init__(self):
        self._entries: list[LedgerEntry] = []

    def append(self, entry: LedgerEntry) -> None:
        if entry.phase not in PHASES:
            raise ValueError(f"unknown phase {entry.phase!r}")
        self._entries.append(entry)

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LEDGER_COLUMNS)
            for e in self._entries:
                writer.writerow([getattr(e, col) for col in LEDGER_COLUMNS])


def read_ledger_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for col in ("ct_count", "ct_bytes", "pt_bytes"):
            row[col] = int(row[col])
    return rows


@dataclass(frozen=True)
class LedgerTotals:
    accounting: str
    ct_count: int
    ct_bytes: int
    pt_bytes: int
    messages: int

    def as_dict(self) -> dict:
        return {"accounting": self.accounting, "ct_count": self.ct_count,
                "ct_bytes": self.ct_bytes, "pt_bytes": self.pt_bytes, "messages": self.messages}


def ledger_totals(ledger: MessageLedger, accounting: str = "paper") -> LedgerTotals:
    """Ciphertext exchange totals.

    ``paper`` counts only the rating ciphertexts the CSP returns to the RS
    plus one for the prediction matrix, whatever its physical size.
    ``physical`` counts every message in both directions.
    """
    entries = list(ledger)
    if accounting == "physical":
        return LedgerTotals("physical", sum(e.ct_count for e in entries),
                            sum(e.ct_bytes for e in entries), sum(e.pt_bytes for e in entries),
                            len(entries))
    if accounting != "paper":
        raise ValueError("accounting must be 'paper' or 'physical'")
    ratings = [e for e in entries if e.kind == "packed_ratings"]
    preds = [e for e in entries if e.kind == "masked_predictions" and e.ct_count > 0]
    ct = sum(e.ct_count for e in ratings) + (1 if preds else 0)
    per_ct = next((e.ct_bytes // e.ct_count for e in ratings + preds if e.ct_count), 0)
    return LedgerTotals("paper", ct, ct * per_ct, 0, len(ratings) + len(preds))


# --------------------------------------------------------------------------
# parties

@dataclass(frozen=True)
class Message:
    phase: str
    sender: str
    receiver: str
    kind: str
    ciphertexts: tuple = ()
    plaintext: Mapping[str, np.ndarray] = field(default_factory=dict)
    key: he.PublicKey | None = None


@dataclass(frozen=True)
class Observation:
    phase: str
    label: str  # e.g. "masked_rating", "prediction", "mask", "index_map"
    values: np.ndarray
    pairs: np.ndarray | None = None


class Party:
    def __init__(self, name: str, role: str):
        self.name = name
        self.role = role
        self.pk: he.PublicKey | None = None
        self._sk: he.SecretKey | None = None
        self._inbox: list[Message] = []
        self.observations: list[Observation] = []

    @property
    def holds_secret_key(self) -> bool:
        return self._sk is not None

    def install_secret_key(self, sk: he.SecretKey) -> None:
        if self.role != CSP:
            raise KeyMisuse(f"{self.name} may not hold the secret key")
        self._sk = sk

    def decrypt(self, ct: he.Ciphertext) -> np.ndarray:
        if self._sk is None:
            raise KeyMisuse(f"{self.name} has no secret key")
        return he.decrypt(self._sk, ct)

    def receive(self, msg: Message) -> None:
        if msg.receiver != self.name:
            raise KeyMisuse(f"{self.name} cannot read a message for {msg.receiver}")
        self._inbox.append(msg)

    def take(self, kind: str) -> list[Message]:
        found = [m for m in self._inbox if m.kind == kind]
        self._inbox = [m for m in self._inbox if m.kind != kind]
        return found

    def observe(self, phase: str, label: str, values, pairs=None) -> None:
        pairs = None if pairs is None else np.array(pairs, dtype=np.int64).reshape(-1, 2)
        self.observations.append(Observation(phase, label, np.array(values, dtype=np.float64), pairs))

    def __repr__(self):
        return f"Party({self.name!r})"


class MaskTable:
    """Integer masks in ``[1, 2**16)`` drawn by the RS.

    Integers sit exactly on the fixed-point grid, so masking and unmasking
    add no quantization error.
    """

    LOW = 1
    HIGH = 1 << 16

    def __init__(self, seed: int):
        self._rng = np.random.default_rng([seed, 0x6D61736B])
        self.rating: dict[tuple[int, int], float] = {}
        self.recommendation: dict[int, np.ndarray] = {}

    def _draw(self, size: int) -> np.ndarray:
        return self._rng.integers(self.LOW, self.HIGH, size=size).astype(np.float64)

    def draw_rating_masks(self, user: int, items) -> np.ndarray:
        items = [int(j) for j in items]
        values = self._draw(len(items))
        for j, v in zip(items, values.tolist()):
            self.rating[(user, j)] = v
        return values

    def rating_vector(self, pairs) -> np.ndarray:
        return np.array([self.rating[(int(i), int(j))] for i, j in np.asarray(pairs).reshape(-1, 2)],
                        dtype=np.float64)

    def draw_recommendation_mask(self, user: int, m: int) -> np.ndarray:
        self.recommendation[user] = self._draw(m)
        return self.recommendation[user]

    def recommendation_vector(self, pairs) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return np.array([self.recommendation[int(i)][int(j)] for i, j in pairs], dtype=np.float64)


# --------------------------------------------------------------------------
# session

@dataclass
class Session:
    params: he.HEParams
    layout: str  # "csr" or "naive-dense"
    n: int
    m: int
    ledger: MessageLedger
    users: dict
    rs: Party
    csp: Party
    masks: MaskTable
    packed: PackedRatings | DenseRatings | None = None
    # Evaluation harness only: lets experiments score a model without any
    # party decrypting. Never reachable through a Party.
    _harness_sk: he.SecretKey | None = field(default=None, repr=False)

    def harness_decrypt(self, ct: he.Ciphertext) -> np.ndarray:
        if self._harness_sk is None:
            raise KeyMisuse("no harness key on this session")
        return he.decrypt(self._harness_sk, ct)

    def party(self, name: str) -> Party:
        if name == RS:
            return self.rs
        if name == CSP:
            return self.csp
        return self.users[int(name.split(":", 1)[1])]

    def send(self, phase: str, sender: str, receiver: str, kind: str, ciphertexts=(),
             plaintext: Mapping | None = None, pt_bytes: int | None = None,
             key: he.PublicKey | None = None) -> None:
        plaintext = dict(plaintext or {})
        cts = tuple(ciphertexts)
        if pt_bytes is None:
            pt_bytes = sum(np.asarray(v).nbytes for v in plaintext.values())
        self.ledger.append(LedgerEntry(phase, sender, receiver, len(cts),
                                       len(cts) * he.ct_size_bytes(self.params), pt_bytes, kind))
        self.party(receiver).receive(Message(phase, sender, receiver, kind, cts, plaintext, key))


def ratings_by_user(triplets: Iterable) -> dict[int, list[tuple[int, float]]]:
    out: dict[int, list] = {}
    for user, item, rating in triplets:
        out.setdefault(int(user), []).append((int(item), float(rating)))
    for user in out:
        out[user].sort()
    return out


def plan_params(index_map, n: int, m: int, engine: str, hp: Hyperparams,
                base: he.HEParams | None = None) -> he.HEParams:
    """Parameters whose depth budget covers ``hp.T`` iterations of ``engine`` plus prediction.

    ``index_map`` is the slot-ordered (user, item) layout the engine will see;
    for ``naive-dense`` that is every cell of the matrix.
    """
    base = base or he.HEParams()
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}")
    if engine == "naive-dense":
        index_map = np.stack(np.meshgrid(np.arange(n), np.arange(m), indexing="ij"), -1).reshape(-1, 2)
    if engine == "csr-batched":
        groups = batch_groups_from_index_map(index_map, hp.u_batch_size, hp.v_batch_size)
        plan = plan_batched(groups, math.ceil(n / hp.u_batch_size), math.ceil(m / hp.v_batch_size), hp)
    else:
        plan = plan_per_rating(index_map, n, m, hp)
    return base.with_depth(max(1, plan.required(hp.T)))


def run_initialization(user_ratings: Mapping[int, list], n: int, m: int, params: he.HEParams,
                       layout: str = "csr", mask_seed: int = 0, key_seed: int | None = None) -> Session:
    """Key distribution, masked upload, CSP re-packing and RS unmasking.

    ``user_ratings`` maps user index to ``(item, rating)`` pairs. On return
    ``session.packed`` holds the true ratings encrypted in the requested
    layout, at the RS.
    """
    if layout not in ("csr", "naive-dense"):
        raise ValueError("layout must be 'csr' or 'naive-dense'")
    phase = "initialization"
    L = params.slot_count
    users = {i: Party(user_name(i), "user") for i in range(n)}
    session = Session(params, layout, n, m, MessageLedger(), users, Party(RS, RS), Party(CSP, CSP),
                      MaskTable(mask_seed))
    rs, csp = session.rs, session.csp

    keys = he.keygen(params, seed=key_seed)
    csp.install_secret_key(keys.sk)
    session._harness_sk = keys.sk
    csp.pk = keys.pk
    pk_bytes = he.ct_size_bytes(params)
    for name in [RS] + [user_name(i) for i in range(n)]:
        session.send(phase, CSP, name, "public_key", pt_bytes=pk_bytes, key=keys.pk)
        party = session.party(name)
        party.pk = party.take("public_key")[0].key

    # users upload their own ratings under pk
    for i in range(n):
        row = sorted(user_ratings.get(i, []))
        user = users[i]
        items = np.array([j for j, _ in row], dtype=np.int64)
        values = np.array([r for _, r in row], dtype=np.float64)
        if len(row) and (items.min() < 0 or items.max() >= m):
            raise IndexError(f"user {i} rated an item outside [0, {m})")
        user.observe(phase, "rating", values, np.column_stack([np.full(len(items), i), items]))
        if layout == "naive-dense":
            if m > L:
                raise ValueError(f"{m} items do not fit one {L}-slot ciphertext")
            dense = np.zeros(m)
            dense[items] = values
            session.send(phase, user.name, RS, "encrypted_ratings",
                         [he.encrypt(user.pk, dense)], {"items": np.arange(m)})
            continue
        for lo in range(0, len(row), L):
            session.send(phase, user.name, RS, "encrypted_ratings",
                         [he.encrypt(user.pk, values[lo:lo + L])], {"items": items[lo:lo + L]})

    # RS masks each upload and forwards it to the CSP
    for msg in rs.take("encrypted_ratings"):
        i = int(msg.sender.split(":", 1)[1])
        items = msg.plaintext["items"]
        mask = session.masks.draw_rating_masks(i, items)
        rs.observe(phase, "mask", mask, np.column_stack([np.full(len(items), i), items]))
        masked = he.add(msg.ciphertexts[0], mask)
        session.send(phase, RS, CSP, "masked_ratings", [masked],
                     {"user": np.array([i], dtype=np.int64), "items": items})

    # CSP decrypts masked values and re-encrypts them in the compact layout
    masked_rows: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for msg in csp.take("masked_ratings"):
        i = int(msg.plaintext["user"][0])
        items = msg.plaintext["items"]
        values = csp.decrypt(msg.ciphertexts[0])[: len(items)]
        csp.observe(phase, "masked_rating", values, np.column_stack([np.full(len(items), i), items]))
        prev = masked_rows.get(i)
        if prev is not None:
            items, values = np.concatenate([prev[0], items]), np.concatenate([prev[1], values])
        masked_rows[i] = (items, values)

    if layout == "csr":
        triplets = [(i, int(j), float(v)) for i in sorted(masked_rows)
                    for j, v in zip(*masked_rows[i])]
        masked_csr = csr_from_triplets(triplets, n, m)
        packed_masked = pack_ratings(masked_csr, csp.pk)
        session.send(phase, CSP, RS, "packed_ratings", packed_masked.ciphertexts,
                     {"index_map": packed_masked.index_map})
        msg = rs.take("packed_ratings")[0]
        index_map = msg.plaintext["index_map"]
        rs.observe(phase, "index_map", np.zeros(0), index_map)
        mask = session.masks.rating_vector(index_map)
        cts = [he.sub(ct, mask[c * L:(c + 1) * L]) for c, ct in enumerate(msg.ciphertexts)]
        session.packed = PackedRatings(cts, index_map, params)
    else:
        rows = []
        for i in range(n):
            _, values = masked_rows[i]
            rows.append(he.encrypt(csp.pk, values))
        session.send(phase, CSP, RS, "packed_ratings", rows)
        msg = rs.take("packed_ratings")[0]
        cts = []
        for i, ct in enumerate(msg.ciphertexts):
            pairs = np.column_stack([np.full(m, i), np.arange(m)])
            cts.append(he.sub(ct, session.masks.rating_vector(pairs)))
        session.packed = DenseRatings(cts, m, params)

    # recommendation masks travel RS -> user in plaintext over their private channel
    for i in range(n):
        mask = session.masks.draw_recommendation_mask(i, m)
        rs.observe(phase, "mask", mask)
        session.send(phase, RS, user_name(i), "recommendation_mask", plaintext={"mask": mask})
        users[i].observe(phase, "mask", users[i].take("recommendation_mask")[0].plaintext["mask"])
    return session


def run_factorization_phase(session: Session, engine: str, hp: Hyperparams,
                            on_iteration: Callable | None = None,
                            mode: str = "sequential") -> tuple[EncryptedModel, int]:
    """Train entirely at the RS. Returns the model and the number of ledger entries added."""
    if session.packed is None:
        raise RuntimeError("initialization has not run")
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}")
    if (engine == "naive-dense") != (session.layout == "naive-dense"):
        raise ValueError(f"engine {engine!r} does not match the {session.layout!r} layout")
    before = len(session.ledger)
    pk = session.rs.pk
    if engine == "csr-batched":
        model = init_model(session.n, session.m, hp, pk, hp.u_batch_size, hp.v_batch_size)
        groups = batch_groups_from_index_map(session.packed.index_map, hp.u_batch_size, hp.v_batch_size)
        run_batched_factorization(model, groups, session.packed, hp, on_iteration, mode=mode)
    else:
        model = init_model(session.n, session.m, hp, pk)
        run_factorization(model, session.packed, hp, on_iteration)
    delta = len(session.ledger) - before
    if delta:
        raise PrivacyViolation(f"factorization phase sent {delta} messages")
    return model, delta


def run_recommendation(session: Session, model: EncryptedModel, pairs,
                       workers: int = 1) -> dict[int, dict[int, float]]:
    """Masked prediction round trip. Returns ``{user: {item: prediction}}`` as each user sees it."""
    phase = "recommendation"
    rs, csp = session.rs, session.csp
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        session.send(phase, RS, CSP, "masked_predictions")
        csp.take("masked_predictions")
        return {}
    L = session.params.slot_count
    preds: PredictedRatings = predict(model, pairs, workers=workers)
    mask = session.masks.recommendation_vector(pairs)
    masked = [he.add(ct, mask[c * L:(c + 1) * L]) for c, ct in enumerate(preds.ciphertexts)]
    session.send(phase, RS, CSP, "masked_predictions", masked, {"pairs": pairs})

    msg = csp.take("masked_predictions")[0]
    values = np.concatenate([csp.decrypt(ct) for ct in msg.ciphertexts])[: len(pairs)]
    csp.observe(phase, "masked_prediction", values, pairs)
    for i in np.unique(pairs[:, 0]).tolist():
        sel = pairs[:, 0] == i
        session.send(phase, CSP, user_name(i), "user_predictions",
                     plaintext={"items": pairs[sel, 1], "values": values[sel]})

    out: dict[int, dict[int, float]] = {}
    for i, user in session.users.items():
        for msg in user.take("user_predictions"):
            items, vals = msg.plaintext["items"], msg.plaintext["values"]
            own = np.column_stack([np.full(len(items), i), items])
            user.observe(phase, "masked_prediction", vals, own)
            clear = vals - session.masks.recommendation[i][items]
            user.observe(phase, "prediction", clear, own)
            out.setdefault(i, {}).update(zip(items.tolist(), clear.tolist()))
    return out


# --------------------------------------------------------------------------
# audit

@dataclass
class AuditReport:
    violations: list = field(default_factory=list)
    checked_values: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations


def audit_privacy(session: Session, true_ratings: Mapping[tuple[int, int], float],
                  true_predictions: Mapping[tuple[int, int], float] | None = None,
                  tol: float | None = None) -> AuditReport:
    """Check every party's observation log against the ground truth.

    A masked value counts as safe only if it differs from the truth by
    exactly the mask drawn for that position, and that mask is nonzero.
    """
    tol = 4.0 * 2.0 ** -(session.params.frac_bits - 1) if tol is None else tol
    report = AuditReport()
    for name, party in [(RS, session.rs)] + [(u.name, u) for u in session.users.values()]:
        if party.holds_secret_key:
            report.violations.append(f"{name} holds the secret key")

    for obs in session.rs.observations:
        if obs.label not in ("mask", "index_map"):
            report.violations.append(f"RS observed {obs.label!r} in {obs.phase}")

    for obs in session.csp.observations:
        if obs.label == "masked_rating":
            truth = np.array([true_ratings.get((i, j), 0.0) for i, j in obs.pairs.tolist()])
            mask = session.masks.rating_vector(obs.pairs)
        elif obs.label == "masked_prediction":
            if true_predictions is None:
                continue
            truth = np.array([true_predictions[(i, j)] for i, j in obs.pairs.tolist()])
            mask = session.masks.recommendation_vector(obs.pairs)
        else:
            report.violations.append(f"CSP observed {obs.label!r} in {obs.phase}")
            continue
        _check_masked(report, f"CSP {obs.label}", obs.values, truth, mask, tol)

    for i, user in session.users.items():
        for obs in user.observations:
            if obs.pairs is not None and len(obs.pairs) and (obs.pairs[:, 0] != i).any():
                report.violations.append(f"{user.name} observed another user's {obs.label!r}")
    return report


def _check_masked(report: AuditReport, where: str, observed, truth, mask, tol) -> None:
    report.checked_values += len(observed)
    if (mask == 0).any():
        report.violations.append(f"{where}: zero mask")
    bad = np.abs((observed - truth) - mask) > tol * np.maximum(1.0, np.abs(observed))
    if bad.any():
        report.violations.append(f"{where}: {int(bad.sum())} values not offset by their mask")
    exposed = np.abs(observed - truth) < 0.5
    if exposed.any():
        report.violations.append(f"{where}: {int(exposed.sum())} unmasked values")
