import numpy as np

from csrfhe.sparse import csr_from_triplets


def random_triplets(rng, n, m, count, low=1, high=6):
    cells = rng.choice(n * m, size=count, replace=False)
    return [(int(c // m), int(c % m), float(rng.integers(low, high))) for c in np.sort(cells)]


def random_csr(seed, n, m, count):
    return csr_from_triplets(random_triplets(np.random.default_rng(seed), n, m, count), n, m)


def reference_sgd(triplets, n, m, k, seed, alpha, lam, mu, T):
    """Plain-Python per-rating SGD in (user, item) order; independent of the package kernels."""
    rng = np.random.default_rng(seed)
    U = rng.random((n, k)).tolist()
    V = rng.random((m, k)).tolist()
    ordered = sorted(triplets, key=lambda t: (t[0], t[1]))
    for _ in range(T):
        for i, j, r in ordered:
            u, v = U[i], V[j]
            err = r - sum(a * b for a, b in zip(u, v))
            U[i] = [a + alpha * (err * b - lam * a) for a, b in zip(u, v)]
            V[j] = [b + alpha * (err * a - mu * b) for a, b in zip(u, v)]
    return np.array(U), np.array(V)


def run_per_rating(csr, hp, base=None, seed=0):
    from csrfhe import he_backend as he
    from csrfhe.mf_engine import init_model, params_for_plan, plan_per_rating, run_factorization
    from csrfhe.packing import pack_ratings

    base = base or he.HEParams(poly_degree=64)
    index_map = np.column_stack([csr.row_indices, csr.col_indices])
    plan = plan_per_rating(index_map, csr.n_rows, csr.n_cols, hp)
    keys = he.keygen(params_for_plan(base, plan, hp.T), seed=seed)
    model = init_model(csr.n_rows, csr.n_cols, hp, keys.pk)
    packed = pack_ratings(csr, keys.pk)
    run_factorization(model, packed, hp)
    return model, keys, packed


def run_batched(csr, hp, base=None, seed=0, mode="sequential"):
    from csrfhe import he_backend as he
    from csrfhe.batched_engine import plan_batched, run_batched_factorization
    from csrfhe.mf_engine import init_model, params_for_plan
    from csrfhe.packing import build_batch_groups, pack_ratings

    base = base or he.HEParams(poly_degree=64)
    groups = build_batch_groups(csr, hp.u_batch_size, hp.v_batch_size)
    nub = -(-csr.n_rows // hp.u_batch_size)
    nvb = -(-csr.n_cols // hp.v_batch_size)
    plan = plan_batched(groups, nub, nvb, hp)
    keys = he.keygen(params_for_plan(base, plan, hp.T), seed=seed)
    model = init_model(csr.n_rows, csr.n_cols, hp, keys.pk, hp.u_batch_size, hp.v_batch_size)
    run_batched_factorization(model, groups, pack_ratings(csr, keys.pk), hp, mode=mode)
    return model, keys
