"""Datasets, RMSE, the plaintext reference factorization and end-to-end run reports."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import he_backend as he
from ._kernels import BACKEND as KERNEL_BACKEND
from ._kernels import sgd_epoch
from .batched_engine import dampened_lr, run_batched_factorization
from .errors import ConfigError, DimensionMismatch, EmptySet, ParseError, SubsetTooLarge
from .mf_engine import (
    Hyperparams,
    init_model,
    predict,
    run_factorization,
    sample_initial_factors,
    visitation_order,
)
from .packing import batch_groups_from_index_map, pack_dense_rows, pack_ratings
from .protocol import (
    ENGINES,
    audit_privacy,
    ledger_totals,
    plan_params,
    ratings_by_user,
    run_factorization_phase,
    run_initialization,
    run_recommendation,
)
from .sparse import CsrMatrix, RatingTriplet, csr_from_triplets

SAMPLE_SIZES = (128, 256, 512, 1024)


# --------------------------------------------------------------------------
# data

def load_movielens(path, n_users: int | None = None, n_items: int | None = None) -> list[RatingTriplet]:
    """Parse a ``u.data`` file: ``user<TAB>item<TAB>rating<TAB>timestamp``, 1-based ids.

    Ids are shifted to 0-based. When ``n_users``/``n_items`` are given, ids
    beyond them raise ``DimensionMismatch``.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ParseError(f"line {lineno}: expected 4 tab-separated fields, got {len(fields)}",
                                 line_number=lineno)
            try:
                user, item, rating, _ = int(fields[0]), int(fields[1]), float(fields[2]), int(fields[3])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}", line_number=lineno) from None
            if user < 1 or item < 1:
                raise ParseError(f"line {lineno}: ids are 1-based", line_number=lineno)
            if not math.isfinite(rating) or rating == 0:
                raise ParseError(f"line {lineno}: rating must be finite and nonzero", line_number=lineno)
            out.append(RatingTriplet(user - 1, item - 1, rating))
    if out:
        max_user = max(t.user for t in out)
        max_item = max(t.item for t in out)
        if n_users is not None and max_user >= n_users:
            raise DimensionMismatch(f"user id {max_user + 1} exceeds {n_users} users")
        if n_items is not None and max_item >= n_items:
            raise DimensionMismatch(f"item id {max_item + 1} exceeds {n_items} items")
    return out


def popular_subset(triplets, top_items: int, reindex_users: bool = True) -> list[RatingTriplet]:
    """Keep ratings of the ``top_items`` most-rated items.

    Ties go to the smaller item id. Kept items are renumbered densely in
    ascending original id; users likewise unless ``reindex_users`` is off.
    """
    if top_items < 1:
        raise ValueError("top_items must be >= 1")
    counts = Counter(t[1] for t in triplets)
    chosen = sorted(counts, key=lambda j: (-counts[j], j))[:top_items]
    item_map = {j: new for new, j in enumerate(sorted(chosen))}
    kept = [t for t in triplets if t[1] in item_map]
    if reindex_users:
        user_map = {i: new for new, i in enumerate(sorted({t[0] for t in kept}))}
    else:
        user_map = {t[0]: t[0] for t in kept}
    return [RatingTriplet(user_map[t[0]], item_map[t[1]], float(t[2])) for t in kept]


def sample_ratings(triplets, size: int, seed: int) -> list[RatingTriplet]:
    """Uniform sample without replacement, returned in (user, item) order."""
    if size < 0:
        raise ValueError("size must be >= 0")
    if size > len(triplets):
        raise SubsetTooLarge(f"cannot sample {size} of {len(triplets)} ratings")
    idx = np.random.default_rng(seed).choice(len(triplets), size=size, replace=False)
    return sorted((RatingTriplet(*triplets[i]) for i in idx.tolist()), key=lambda t: (t[0], t[1]))


def dimensions(triplets) -> tuple[int, int]:
    if not triplets:
        return 0, 0
    return max(t[0] for t in triplets) + 1, max(t[1] for t in triplets) + 1


# --------------------------------------------------------------------------
# metrics and plaintext reference

def rmse(predictions, truths) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise DimensionMismatch(f"{p.size} predictions for {t.size} truths")
    if p.size == 0:
        raise EmptySet("RMSE over an empty set")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def _training_rmse(U, V, csr: CsrMatrix) -> float:
    rows = csr.row_indices
    return rmse(np.einsum("ij,ij->i", U[rows], V[csr.col_indices]), csr.data)


def plaintext_mf(csr: CsrMatrix, hp: Hyperparams, variant: str = "per-rating",
                 dense: bool = False) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Float64 mirror of the encrypted engines: same seed, order and updates.

    ``dense=True`` mirrors the naive layout, which visits every cell and
    treats unrated cells as zero ratings. RMSE is always on the nonzeros.
    """
    if variant not in ("per-rating", "batched"):
        raise ValueError("variant must be 'per-rating' or 'batched'")
    n, m = csr.n_rows, csr.n_cols
    U, V = sample_initial_factors(n, m, hp.k, hp.seed)
    if dense:
        grid = np.stack(np.meshgrid(np.arange(n), np.arange(m), indexing="ij"), -1).reshape(-1, 2)
        users, items, ratings = grid[:, 0].copy(), grid[:, 1].copy(), csr.to_dense().ravel()
    else:
        users, items, ratings = csr.row_indices, csr.col_indices.copy(), csr.data.copy()
    count = len(ratings)
    grad_scale = 1.0 / count if hp.normalize_by_M and count else 1.0
    history = []
    if variant == "per-rating":
        for t in range(hp.T):
            order = visitation_order(count, hp, t)
            sgd_epoch(U, V, np.ascontiguousarray(users[order], dtype=np.int64),
                      np.ascontiguousarray(items[order], dtype=np.int64),
                      np.ascontiguousarray(ratings[order]), hp.alpha, hp.lam, hp.mu_eff, grad_scale)
            history.append(_training_rmse(U, V, csr))
        return U, V, history

    groups = batch_groups_from_index_map(np.column_stack([users, items]), hp.u_batch_size, hp.v_batch_size)
    step = 0
    for t in range(hp.T):
        for _, entries in groups:
            U0, V0 = U.copy(), V.copy()
            dU: dict = {}
            dV: dict = {}
            for slot, i, j in entries:
                lr = dampened_lr(hp.alpha, t if hp.dampen_per == "outer" else step, hp.dampening)
                step += 1
                err = (ratings[slot] - U0[i] @ V0[j]) * grad_scale
                gu = lr * (err * V0[j] - hp.lam * U0[i])
                gv = lr * (err * U0[i] - hp.mu_eff * V0[j])
                dU[i] = dU[i] + gu if i in dU else gu
                dV[j] = dV[j] + gv if j in dV else gv
            for i, g in dU.items():
                U[i] = U0[i] + g
            for j, g in dV.items():
                V[j] = V0[j] + g
        history.append(_training_rmse(U, V, csr))
    return U, V, history


# --------------------------------------------------------------------------
# run configuration and reports

@dataclass(frozen=True)
class RunConfig:
    dataset: str | None = None
    top_items: int | None = 40
    ratings: int | None = 1024  # None: every rating of the subset
    sample_seed: int = 0
    engine: str = "csr"
    mode: str = "sequential"
    k: int = 10
    alpha: float = 0.01
    lam: float = 0.01
    mu: float | None = None
    iters: int = 20
    seed: int = 0
    u_batch_size: int = 5
    v_batch_size: int = 5
    dampening: float = 0.1
    dampen_per: str = "outer"
    normalize_by_M: bool = False
    shuffle: bool = False
    poly_degree: int = 8192
    frac_bits: int = 32
    max_depth: int | None = None  # None: sized to the run
    modulus_bits: int = he.DEFAULT_MODULUS_BITS
    ct_bytes: int | None = None
    noise: bool = False
    accounting: str = "paper"
    recommend: str = "rated"  # prediction targets: rated, all or none
    track_rmse: bool = True
    out: str = "out"

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ConfigError(f"engine must be one of {', '.join(ENGINES)}")
        if self.mode not in ("sequential", "parallel"):
            raise ConfigError("mode must be sequential or parallel")
        if self.accounting not in ("paper", "physical"):
            raise ConfigError("accounting must be paper or physical")
        if self.recommend not in ("rated", "all", "none"):
            raise ConfigError("recommend must be rated, all or none")
        if self.ratings is not None and self.ratings < 1:
            raise ConfigError("ratings must be >= 1")
        if self.top_items is not None and self.top_items < 1:
            raise ConfigError("top_items must be >= 1")
        try:
            self.hyperparams()
            self.he_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(k=self.k, alpha=self.alpha, lam=self.lam, mu=self.mu, T=self.iters,
                           seed=self.seed, u_batch_size=self.u_batch_size,
                           v_batch_size=self.v_batch_size, dampening=self.dampening,
                           dampen_per=self.dampen_per, normalize_by_M=self.normalize_by_M,
                           shuffle=self.shuffle)

    def he_params(self) -> he.HEParams:
        return he.HEParams(poly_degree=self.poly_degree, frac_bits=self.frac_bits,
                           max_depth=self.max_depth or 1, modulus_bits=self.modulus_bits,
                           ct_bytes=self.ct_bytes, noise=self.noise)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of every field except the output directory."""
        body = {k: v for k, v in self.as_dict().items() if k != "out"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def prepare_triplets(config: RunConfig, triplets=None) -> tuple[list[RatingTriplet], int, int]:
    """Load, restrict and sample the ratings a run trains on; returns (triplets, n, m)."""
    if triplets is None:
        if config.dataset is None:
            raise ConfigError("no dataset path configured")
        triplets = load_movielens(config.dataset)
    if config.top_items is not None:
        triplets = popular_subset(triplets, config.top_items)
    n, m = dimensions(triplets)
    if config.ratings is not None:
        triplets = sample_ratings(triplets, config.ratings, config.sample_seed)
    return triplets, n, m


@dataclass
class IterationRow:
    iteration: int
    rmse: float | None
    seconds: float
    learning_rate: float
    profile_writes: int
    ops: dict


CSV_COLUMNS = ("iteration", "rmse", "seconds", "learning_rate", "profile_writes",
               "op_add", "op_sub", "op_mul", "op_mul_plain", "op_rotate", "op_mod_switch", "op_total")


@dataclass
class RunReport:
    config: dict
    config_hash: str
    dims: dict
    params: dict
    initial_rmse: float | None
    rows: list = field(default_factory=list)
    ledger: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)
    kernel_backend: str = KERNEL_BACKEND
    session: object = field(default=None, repr=False, compare=False)

    @property
    def rmse_curve(self) -> list[float]:
        return [r.rmse for r in self.rows]

    @property
    def final_rmse(self) -> float | None:
        return self.rows[-1].rmse if self.rows else self.initial_rmse

    def summary(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "config": self.config,
            "params": self.params,
            "dims": self.dims,
            "kernel_backend": self.kernel_backend,
            "initial_rmse": self.initial_rmse,
            "final_rmse": self.final_rmse,
            "rmse": self.rmse_curve,
            "op_totals": _sum_ops(r.ops for r in self.rows),
            "profile_writes": sum(r.profile_writes for r in self.rows),
            "ledger": self.ledger,
            "audit": self.audit,
        }

    def csv_rows(self) -> list[list]:
        out = []
        for r in self.rows:
            out.append([r.iteration, "" if r.rmse is None else repr(r.rmse), f"{r.seconds:.6f}",
                        repr(r.learning_rate), r.profile_writes,
                        *(r.ops[k] for k in ("add", "sub", "mul", "mul_plain", "rotate",
                                             "mod_switch", "total"))])
        return out

    def write(self, out_dir, stem: str = "run") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}-{self.config_hash}.csv"
        json_path = out_dir / f"{stem}-{self.config_hash}.json"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            writer.writerows(self.csv_rows())
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def _sum_ops(dicts) -> dict:
    total: Counter = Counter()
    for d in dicts:
        total.update(d)
    return dict(total)


def convergence_run(config: RunConfig, triplets=None) -> RunReport:
    """Full protocol run: initialization, training, recommendation and audit.

    With ``track_rmse`` the training RMSE over the rated pairs is measured
    after every iteration through an evaluation-only decryption path, so
    no protocol messages are added.
    """
    triplets, n, m = prepare_triplets(config, triplets)
    hp = config.hyperparams()
    csr = csr_from_triplets(triplets, n, m)
    index_map = np.column_stack([csr.row_indices, csr.col_indices])
    base = config.he_params()
    if config.max_depth is None:
        params = plan_params(index_map, n, m, config.engine, hp, base)
    else:
        params = base
    layout = "naive-dense" if config.engine == "naive-dense" else "csr"
    session = run_initialization(ratings_by_user(triplets), n, m, params, layout=layout,
                                 mask_seed=config.seed, key_seed=config.seed)

    def score(model) -> float:
        if len(index_map) == 0:
            return None
        preds = predict(model, index_map)
        values = np.concatenate([session.harness_decrypt(ct) for ct in preds.ciphertexts])
        return rmse(values[: len(index_map)], csr.data)

    rows: list[IterationRow] = []

    def on_iteration(stats, model):
        rows.append(IterationRow(stats.iteration, score(model) if config.track_rmse else None,
                                 stats.seconds, stats.learning_rate, stats.profile_writes,
                                 stats.ops.as_dict()))

    initial = None
    if config.track_rmse:
        batched = config.engine == "csr-batched"
        initial = score(init_model(n, m, hp, session.rs.pk,
                                   hp.u_batch_size if batched else 1, hp.v_batch_size if batched else 1))
    model, _ = run_factorization_phase(session, config.engine, hp, on_iteration, mode=config.mode)

    if config.recommend == "none":
        pairs = np.zeros((0, 2), dtype=np.int64)
    elif config.recommend == "all":
        pairs = np.stack(np.meshgrid(np.arange(n), np.arange(m), indexing="ij"), -1).reshape(-1, 2)
    else:
        pairs = index_map
    if config.recommend != "none":
        run_recommendation(session, model, pairs)
    truth_preds = None
    if len(pairs):
        preds = predict(model, pairs)
        values = np.concatenate([session.harness_decrypt(ct) for ct in preds.ciphertexts])
        truth_preds = {(int(i), int(j)): float(v) for (i, j), v in zip(pairs.tolist(), values)}
    audit = audit_privacy(session, {(t[0], t[1]): t[2] for t in triplets}, truth_preds)

    return RunReport(
        config=config.as_dict(),
        config_hash=config.digest(),
        dims={"n": n, "m": m, "M": len(triplets), "slots": params.slot_count},
        params={**dataclasses.asdict(params), "ct_size_bytes": he.ct_size_bytes(params),
                "slot_count": params.slot_count},
        initial_rmse=initial,
        rows=rows,
        ledger={mode: ledger_totals(session.ledger, mode).as_dict() for mode in ("paper", "physical")},
        audit={"violations": list(audit.violations), "checked_values": audit.checked_values},
        session=session,
    )


def iteration_ops(triplets, n: int, m: int, engine: str, hp: Hyperparams,
                  base: he.HEParams | None = None) -> tuple[he.OpCounts, int]:
    """Homomorphic ops and profile writes of one training iteration, without the protocol."""
    hp = hp.with_(T=1)
    csr = csr_from_triplets(triplets, n, m)
    index_map = np.column_stack([csr.row_indices, csr.col_indices])
    params = plan_params(index_map, n, m, engine, hp, base)
    keys = he.keygen(params, seed=hp.seed)
    seen: list = []
    hook = lambda stats, model: seen.append(stats)  # noqa: E731
    if engine == "csr-batched":
        model = init_model(n, m, hp, keys.pk, hp.u_batch_size, hp.v_batch_size)
        groups = batch_groups_from_index_map(index_map, hp.u_batch_size, hp.v_batch_size)
        run_batched_factorization(model, groups, pack_ratings(csr, keys.pk), hp, hook)
    else:
        source = pack_dense_rows(csr.to_dense(), keys.pk) if engine == "naive-dense" \
            else pack_ratings(csr, keys.pk)
        run_factorization(init_model(n, m, hp, keys.pk), source, hp, hook)
    return seen[0].ops, seen[0].profile_writes

