"""Pure numpy versions of the compiled slot kernels.

Every function mirrors its counterpart in ``_slotops.pyx`` operation for
operation so the two backends agree bit for bit (``sgd_epoch`` excepted,
whose dot-product summation order may differ in the last ulp).
"""

import numpy as np


def quantize(x, n, scale):
    head = x[:n]
    np.multiply(head, scale, out=head)
    np.rint(head, out=head)
    np.divide(head, scale, out=head)


def mul_quantize(a, b, out, n, scale):
    head = out[:n]
    np.multiply(a[:n], b[:n], out=head)
    quantize(out, n, scale)


def scale_quantize(a, s, out, n, scale):
    head = out[:n]
    np.multiply(a[:n], s, out=head)
    quantize(out, n, scale)


def rotate(a, steps, out):
    L = a.shape[0]
    head = L - steps
    out[:head] = a[steps:]
    out[head:] = a[:steps]


def rotate_add(a, steps, out):
    L = a.shape[0]
    head = L - steps
    np.add(a[:head], a[steps:], out=out[:head])
    np.add(a[head:], a[:steps], out=out[head:])


def sgd_epoch(U, V, users, items, ratings, alpha, lam, mu, grad_scale):
    for u, v, r in zip(users.tolist(), items.tolist(), ratings.tolist()):
        uf = U[u].copy()
        vf = V[v].copy()
        err = (r - float(uf @ vf)) * grad_scale
        U[u] = uf + alpha * (err * vf - lam * uf)
        V[v] = vf + alpha * (err * uf - mu * vf)
