"""Per-rating encrypted SGD over CSR-packed ratings."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import he_backend as he
from .errors import DepthExhausted
from .packing import pack_profile_batches, pack_profiles


@dataclass(frozen=True)
class Hyperparams:
    k: int = 10
    alpha: float = 0.01
    lam: float = 0.01
    mu: float | None = None  # None: same as lam
    T: int = 20
    seed: int = 0
    u_batch_size: int = 5
    v_batch_size: int = 5
    dampening: float = 0.1
    dampen_per: str = "outer"  # "outer" iteration or per processed "step"
    normalize_by_M: bool = False
    shuffle: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.lam < 0 or (self.mu is not None and self.mu < 0):
            raise ValueError("regularization must be >= 0")
        if self.T < 0:
            raise ValueError("T must be >= 0")
        if self.u_batch_size < 1 or self.v_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.dampening < 0:
            raise ValueError("dampening must be >= 0")
        if self.dampen_per not in ("outer", "step"):
            raise ValueError("dampen_per must be 'outer' or 'step'")

    @property
    def mu_eff(self) -> float:
        return self.lam if self.mu is None else self.mu

    def with_(self, **changes) -> "Hyperparams":
        return replace(self, **changes)


@dataclass
class EncryptedModel:
    """Encrypted user and item profiles.

    With batch size 1 every list entry is one profile (``k`` slots). With
    larger batch sizes entry ``b`` packs profiles ``b*bs .. b*bs+bs-1``.
    """

    enc_U: list
    enc_V: list
    n: int
    m: int
    k: int
    u_batch_size: int = 1
    v_batch_size: int = 1
    t: int = 0

    @property
    def params(self) -> he.HEParams:
        return (self.enc_U or self.enc_V)[0].params

    @property
    def key_id(self) -> str:
        return (self.enc_U or self.enc_V)[0].key_id

    @property
    def max_level(self) -> int:
        return max((ct.level for ct in self.enc_U + self.enc_V), default=0)

    def copy(self) -> "EncryptedModel":
        return replace(self, enc_U=list(self.enc_U), enc_V=list(self.enc_V))

    def align_levels(self) -> None:
        """Mod-switch every profile to the deepest level present."""
        top = self.max_level
        self.enc_U = [he.mod_switch(ct, top) for ct in self.enc_U]
        self.enc_V = [he.mod_switch(ct, top) for ct in self.enc_V]

    def user_profile(self, i: int) -> he.Ciphertext:
        return _member(self.enc_U, self.u_batch_size, i, self.k)

    def item_profile(self, j: int) -> he.Ciphertext:
        return _member(self.enc_V, self.v_batch_size, j, self.k)

    def decrypt_profiles(self, sk: he.SecretKey) -> tuple[np.ndarray, np.ndarray]:
        return (_unpack(sk, self.enc_U, self.u_batch_size, self.n, self.k),
                _unpack(sk, self.enc_V, self.v_batch_size, self.m, self.k))


def _member(cts, batch_size, idx, k):
    if batch_size == 1:
        return cts[idx]
    return he.select_range(cts[idx // batch_size], (idx % batch_size) * k, k)


def _unpack(sk, cts, batch_size, rows, k):
    if rows == 0:
        return np.zeros((0, k))
    flat = []
    for ct in cts:
        vals = np.zeros(batch_size * k)
        dec = he.decrypt(sk, ct)[: batch_size * k]
        vals[: dec.size] = dec
        flat.append(vals)
    return np.concatenate(flat).reshape(-1, k)[:rows]


@dataclass(frozen=True)
class PredictedRatings:
    ciphertexts: list
    pairs: np.ndarray  # (P, 2); pair p sits in ciphertext p // L, slot p % L

    def decrypt(self, sk: he.SecretKey) -> np.ndarray:
        if not self.ciphertexts:
            return np.zeros(0)
        return np.concatenate([he.decrypt(sk, ct) for ct in self.ciphertexts])[: len(self.pairs)]


@dataclass
class IterationStats:
    iteration: int
    seconds: float
    ops: he.OpCounts
    profile_writes: int
    learning_rate: float


# --------------------------------------------------------------------------
# initialization

def sample_initial_factors(n: int, m: int, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw U ~ U(0,1)^{n x k} then V ~ U(0,1)^{m x k} from one seeded stream."""
    rng = np.random.default_rng(seed)
    return rng.random((n, k)), rng.random((m, k))


def init_model(n: int, m: int, hp: Hyperparams, pk: he.PublicKey,
               u_batch_size: int = 1, v_batch_size: int = 1) -> EncryptedModel:
    U, V = sample_initial_factors(n, m, hp.k, hp.seed)
    if u_batch_size == 1:
        enc_U = [p.ciphertext for p in pack_profiles(U, pk)]
    else:
        enc_U = [b.ciphertext for b in pack_profile_batches(U, u_batch_size, pk)]
    if v_batch_size == 1:
        enc_V = [p.ciphertext for p in pack_profiles(V, pk)]
    else:
        enc_V = [b.ciphertext for b in pack_profile_batches(V, v_batch_size, pk)]
    return EncryptedModel(enc_U, enc_V, n, m, hp.k, u_batch_size, v_batch_size)


def visitation_order(count: int, hp: Hyperparams, iteration: int) -> np.ndarray:
    if not hp.shuffle:
        return np.arange(count)
    return np.random.default_rng([hp.seed, iteration]).permutation(count)


# --------------------------------------------------------------------------
# one rating

def rating_ciphertext(source, idx: int, k: int) -> he.Ciphertext:
    """Rating ``idx`` of a packed source, broadcast to ``k`` slots (one level)."""
    ct, slot = source.locate(idx)
    return he.select_slot(ct, slot, width=k)


def gradient_steps(u, v, r, hp: Hyperparams, lr: float | None, grad_scale: float = 1.0):
    """``lr * (err*v - lam*u)`` and ``lr * (err*u - mu*v)`` with ``err = r - <u, v>``.

    ``lr=None`` returns the unscaled gradients.
    """
    dot = he.inner_product(u, v, hp.k, broadcast=True)
    err = he.sub(r, dot)
    if grad_scale != 1.0:
        err = he.mul(err, grad_scale)
    gd_u = he.sub(he.mul(err, v), he.mul(u, hp.lam))
    gd_v = he.sub(he.mul(err, u), he.mul(v, hp.mu_eff))
    if lr is None:
        return gd_u, gd_v
    return he.mul(gd_u, lr), he.mul(gd_v, lr)


def sgd_step(model: EncryptedModel, enc_rating: he.Ciphertext, user: int, item: int,
             hp: Hyperparams, grad_scale: float = 1.0) -> EncryptedModel:
    """Update ``u_user`` and ``v_item`` in place from one encrypted rating.

    Both updates read the pre-update profiles.
    """
    if model.u_batch_size != 1 or model.v_batch_size != 1:
        raise ValueError("sgd_step needs a per-profile model (batch size 1)")
    if enc_rating.valid_count == 1 and hp.k > 1:
        enc_rating = he.replicate(enc_rating, hp.k)
    u, v = model.enc_U[user], model.enc_V[item]
    step_u, step_v = gradient_steps(u, v, enc_rating, hp, hp.alpha, grad_scale)
    model.enc_U[user] = he.add(u, step_u)
    model.enc_V[item] = he.add(v, step_v)
    return model


# --------------------------------------------------------------------------
# depth planning

def step_levels(lu: int, lv: int, rating_level: int, normalize: bool) -> tuple[int, int]:
    """Levels of the two scaled gradient steps produced by ``gradient_steps``."""
    r = rating_level + 1
    err = max(r, max(lu, lv) + 2) + (1 if normalize else 0)
    gu = max(max(err, lv) + 1, lu + 1) + 1
    gv = max(max(err, lu) + 1, lv + 1) + 1
    return gu, gv


@dataclass
class DepthPlan:
    start_level: int
    after_iteration: list = field(default_factory=list)
    predict_extra: int = 2

    def required(self, T: int) -> int:
        top = self.start_level if T == 0 else self.after_iteration[T - 1]
        return top + self.predict_extra

    def max_feasible_T(self, budget: int) -> int:
        best = 0
        for t in range(1, len(self.after_iteration) + 1):
            if self.required(t) <= budget:
                best = t
        return best

    def check(self, params: he.HEParams, T: int) -> None:
        need = self.required(T)
        if need > params.max_depth:
            feasible = self.max_feasible_T(params.max_depth)
            raise DepthExhausted(
                f"{T} iterations need depth {need} but max_depth is {params.max_depth}; "
                f"at most {feasible} iterations fit",
                required_depth=need, max_feasible_T=feasible)


def plan_per_rating(index_map, n: int, m: int, hp: Hyperparams, start_level: int = 0,
              rating_level: int = 0, T: int | None = None) -> DepthPlan:
    T = hp.T if T is None else T
    plan = DepthPlan(start_level)
    level = start_level
    users = np.asarray(index_map)[:, 0].tolist() if len(index_map) else []
    items = np.asarray(index_map)[:, 1].tolist() if len(index_map) else []
    for t in range(T):
        LU = [level] * n
        LV = [level] * m
        for idx in visitation_order(len(users), hp, t).tolist():
            u, v = users[idx], items[idx]
            gu, gv = step_levels(LU[u], LV[v], rating_level, hp.normalize_by_M)
            LU[u] = max(LU[u], gu)
            LV[v] = max(LV[v], gv)
        level = max(LU + LV + [level])
        plan.after_iteration.append(level)
    return plan


def params_for_plan(params: he.HEParams, plan: DepthPlan, T: int) -> he.HEParams:
    """Parameters whose depth budget exactly covers ``T`` iterations plus prediction."""
    return params.with_depth(plan.required(T))


# --------------------------------------------------------------------------
# full runs

def _check_source(model: EncryptedModel, source) -> None:
    if source.ciphertexts and source.ciphertexts[0].key_id != model.key_id:
        raise ValueError("packed ratings and model are under different keys")


def source_level(source) -> int:
    return max((ct.level for ct in source.ciphertexts), default=0)


def run_factorization(model: EncryptedModel, packed, hp: Hyperparams,
                      on_iteration: Callable[[IterationStats, EncryptedModel], None] | None = None
                      ) -> EncryptedModel:
    """Run ``hp.T`` passes over every packed rating in visitation order.

    The depth budget is checked before any work; an infeasible request
    raises ``DepthExhausted`` carrying the largest feasible ``T``.
    """
    if model.u_batch_size != 1 or model.v_batch_size != 1:
        raise ValueError("the per-rating engine needs per-profile models")
    _check_source(model, packed)
    if hp.T == 0:
        return model
    plan = plan_per_rating(packed.index_map, model.n, model.m, hp, model.max_level, source_level(packed))
    plan.check(model.params, hp.T)

    grad_scale = 1.0 / packed.count if hp.normalize_by_M and packed.count else 1.0
    users = packed.index_map[:, 0].tolist()
    items = packed.index_map[:, 1].tolist()
    for t in range(hp.T):
        start = time.perf_counter()
        with he.count_ops() as ops:
            for idx in visitation_order(packed.count, hp, t).tolist():
                r = rating_ciphertext(packed, idx, hp.k)
                sgd_step(model, r, users[idx], items[idx], hp, grad_scale)
            model.align_levels()
        model.t += 1
        if on_iteration is not None:
            stats = IterationStats(model.t, time.perf_counter() - start, ops,
                                   2 * packed.count, hp.alpha)
            on_iteration(stats, model)
    return model


def _predict_chunk(model: EncryptedModel, pairs: np.ndarray):
    L = model.params.slot_count
    acc = None
    users: dict = {}
    items: dict = {}
    for pos, (i, j) in enumerate(pairs.tolist()):
        if i not in users:
            users[i] = model.user_profile(i)
        if j not in items:
            items[j] = model.item_profile(j)
        ip = he.inner_product(users[i], items[j], model.k)
        placed = he.rotate(ip, -(pos % L))
        acc = placed if acc is None else he.add(acc, placed)
    return acc


def predict(model: EncryptedModel, pairs, workers: int = 1) -> PredictedRatings:
    """Encrypted ``<u_i, v_j>`` for each pair, ``L`` predictions per ciphertext.

    With ``workers > 1`` the output ciphertexts are filled concurrently;
    results are merged in pair order so the output does not depend on
    scheduling.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return PredictedRatings([], pairs)
    if ((pairs[:, 0] < 0) | (pairs[:, 0] >= model.n) | (pairs[:, 1] < 0) | (pairs[:, 1] >= model.m)).any():
        raise IndexError("prediction pair outside the model's dimensions")
    L = model.params.slot_count
    chunks = [pairs[lo:lo + L] for lo in range(0, len(pairs), L)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: he.run_isolated(_predict_chunk, model, c), chunks))
        for _, ops in results:
            he.merge_counts(ops)
        cts = [ct for ct, _ in results]
    else:
        cts = [_predict_chunk(model, c) for c in chunks]
    return PredictedRatings(cts, pairs)
