"""Batch-pair traversal with per-group gradient accumulation."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

from . import he_backend as he
from .mf_engine import (
    DepthPlan,
    EncryptedModel,
    Hyperparams,
    IterationStats,
    _check_source,
    gradient_steps,
    rating_ciphertext,
    source_level,
    step_levels,
)
from .packing import BatchGroups


def dampened_lr(alpha: float, iteration: int, dampening: float) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return alpha / (1.0 + dampening * iteration)


class GradientAccumulator:
    """Per-batch map from local profile index to its summed encrypted gradient."""

    def __init__(self, batch_size: int):
        self.batch_size = batch_size
        self._grads: dict[int, he.Ciphertext] = {}

    def add(self, local: int, grad: he.Ciphertext) -> None:
        if not 0 <= local < self.batch_size:
            raise IndexError(f"local index {local} outside [0, {self.batch_size})")
        prev = self._grads.get(local)
        self._grads[local] = grad if prev is None else he.add(prev, grad)

    def get(self, local: int):
        return self._grads.get(local)

    def __len__(self) -> int:
        return len(self._grads)

    def items(self):
        return sorted(self._grads.items())

    def apply(self, batch_ct: he.Ciphertext, k: int, lr: float | None = None) -> he.Ciphertext:
        """Add every accumulated gradient, scaled by ``lr`` if given, into its member's slots."""
        out = batch_ct
        for local, grad in self.items():
            if lr is not None:
                grad = he.mul(grad, lr)
            out = he.add(out, grad if local == 0 else he.rotate(grad, -local * k))
        return out


def _extract(batch_ct, batch_size, local, k, cache):
    if batch_size == 1:
        return batch_ct
    if local not in cache:
        cache[local] = he.select_range(batch_ct, local * k, k)
    return cache[local]


def _learning_rate(hp: Hyperparams, iteration: int, step: int) -> float:
    t = iteration if hp.dampen_per == "outer" else step
    return dampened_lr(hp.alpha, t, hp.dampening)


def process_batch_group(entries, u_batch: he.Ciphertext, v_batch: he.Ciphertext, enc_ratings,
                        hp: Hyperparams, iteration: int, step_offset: int = 0,
                        grad_scale: float = 1.0):
    """Accumulate gradients for one (user batch, item batch) group, then apply once.

    Every gradient is computed against the group-start ciphertexts. With
    outer-iteration dampening the rate is constant over the group, so it
    scales each accumulated sum once; per-step dampening scales every
    gradient. Returns ``(u_batch, v_batch, writes)`` where ``writes``
    counts profile updates.
    """
    ubs, vbs, k = hp.u_batch_size, hp.v_batch_size, hp.k
    acc_u, acc_v = GradientAccumulator(ubs), GradientAccumulator(vbs)
    u_cache: dict = {}
    v_cache: dict = {}
    per_group = hp.dampen_per == "outer"
    for offset, (slot, user, item) in enumerate(entries):
        ul, vl = user % ubs, item % vbs
        u_f = _extract(u_batch, ubs, ul, k, u_cache)
        v_f = _extract(v_batch, vbs, vl, k, v_cache)
        r = rating_ciphertext(enc_ratings, slot, k)
        lr = None if per_group else _learning_rate(hp, iteration, step_offset + offset)
        grad_u, grad_v = gradient_steps(u_f, v_f, r, hp, lr, grad_scale)
        acc_u.add(ul, grad_u)
        acc_v.add(vl, grad_v)
    lr = _learning_rate(hp, iteration, step_offset) if per_group else None
    return acc_u.apply(u_batch, k, lr), acc_v.apply(v_batch, k, lr), len(acc_u) + len(acc_v)


def schedule_waves(groups: BatchGroups) -> list[list]:
    """Split groups into waves whose members touch pairwise-disjoint batches.

    Each batch sees its groups in the original order, so running waves in
    sequence reproduces the sequential result exactly.
    """
    last_u: dict = {}
    last_v: dict = {}
    waves: list[list] = []
    for key, entries in groups:
        ub, vb = key
        w = max(last_u.get(ub, -1), last_v.get(vb, -1)) + 1
        if w == len(waves):
            waves.append([])
        waves[w].append((key, entries))
        last_u[ub] = last_v[vb] = w
    return waves


def plan_batched(groups: BatchGroups, n_u_batches: int, n_v_batches: int, hp: Hyperparams,
              start_level: int = 0, rating_level: int = 0, T: int | None = None) -> DepthPlan:
    T = hp.T if T is None else T
    extra_u = 1 if groups.u_batch_size > 1 else 0
    extra_v = 1 if groups.v_batch_size > 1 else 0
    plan = DepthPlan(start_level, predict_extra=2 + max(extra_u, extra_v))
    level = start_level
    for _ in range(T):
        LU = [level] * n_u_batches
        LV = [level] * n_v_batches
        for (ub, vb), entries in groups:
            lu, lv = LU[ub] + extra_u, LV[vb] + extra_v
            gu, gv = step_levels(lu, lv, rating_level, hp.normalize_by_M)
            LU[ub] = max(LU[ub], gu)
            LV[vb] = max(LV[vb], gv)
        level = max(LU + LV + [level])
        plan.after_iteration.append(level)
    return plan


def run_batched_factorization(model: EncryptedModel, groups: BatchGroups, enc_ratings,
                              hp: Hyperparams,
                              on_iteration: Callable[[IterationStats, EncryptedModel], None] | None = None,
                              mode: str = "sequential", workers: int = 4) -> EncryptedModel:
    """``hp.T`` passes over all batch groups in (u_batch, v_batch) order.

    ``mode="parallel"`` runs each wave from :func:`schedule_waves` on a
    thread pool; the result is identical to sequential mode.
    """
    if (model.u_batch_size, model.v_batch_size) != (groups.u_batch_size, groups.v_batch_size):
        raise ValueError("model batching does not match the batch groups")
    if (hp.u_batch_size, hp.v_batch_size) != (groups.u_batch_size, groups.v_batch_size):
        raise ValueError("hyperparameter batch sizes do not match the batch groups")
    if mode not in ("sequential", "parallel"):
        raise ValueError("mode must be 'sequential' or 'parallel'")
    _check_source(model, enc_ratings)
    if hp.T == 0:
        return model
    plan = plan_batched(groups, len(model.enc_U), len(model.enc_V), hp, model.max_level,
                     source_level(enc_ratings))
    plan.check(model.params, hp.T)

    grad_scale = 1.0 / enc_ratings.count if hp.normalize_by_M and enc_ratings.count else 1.0
    offsets = {}
    running = 0
    for key, entries in groups:
        offsets[key] = running
        running += len(entries)

    def run_group(item, t):
        (ub, vb), entries = item
        step0 = t * enc_ratings.count + offsets[(ub, vb)]
        return process_batch_group(entries, model.enc_U[ub], model.enc_V[vb], enc_ratings,
                                   hp, t, step0, grad_scale)

    for t in range(hp.T):
        start = time.perf_counter()
        writes = 0
        with he.count_ops() as ops:
            if mode == "sequential":
                for item in groups:
                    new_u, new_v, w = run_group(item, t)
                    (ub, vb), _ = item
                    model.enc_U[ub], model.enc_V[vb] = new_u, new_v
                    writes += w
            else:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    for wave in schedule_waves(groups):
                        results = list(pool.map(lambda it: he.run_isolated(run_group, it, t), wave))
                        for ((ub, vb), _), ((new_u, new_v, w), counts) in zip(wave, results):
                            model.enc_U[ub], model.enc_V[vb] = new_u, new_v
                            writes += w
                            he.merge_counts(counts)
            model.align_levels()
        model.t += 1
        if on_iteration is not None:
            lr = _learning_rate(hp, t, t * enc_ratings.count)
            on_iteration(IterationStats(model.t, time.perf_counter() - start, ops, writes, lr), model)
    return model
